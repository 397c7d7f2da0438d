use tcinn::data::container::{decode_tensor, encode_tensor};
use tcinn::data::{generate_phantom_dataset, read_tensor_file, write_tensor_file, AnyTensor, PhantomConfig};
use tcinn::train::{checkpoint_dtype, train, Checkpoint, TrainConfig};
use tcinn::{Error, Real, Tensor};

/// Written by an independent script: header, dims, six f32 values and the
/// CRC-64/XZ of everything before it.
const GOLDEN: &[u8] = include_bytes!("data/golden_2x3_f32.tcit");

#[test]
fn golden_file_matches_byte_for_byte() {
    assert_eq!(GOLDEN.len(), 48);
    let t = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(encode_tensor(&t).unwrap(), GOLDEN);
    match decode_tensor(GOLDEN).unwrap() {
        AnyTensor::F32(back) => assert_eq!(back, t),
        other => panic!("decoded as {:?}", other.dtype()),
    }
}

fn bits_equal<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits() || (x.is_nan() && y.is_nan()))
}

#[test]
fn tensor_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let specials = [0.0, -0.0, 1e-310, -1e-300, f64::MAX, f64::INFINITY, f64::NEG_INFINITY, 0.1, 1.0 / 3.0];
    for shape in [vec![9], vec![3, 3], vec![1, 3, 3], vec![1, 1, 3, 3]] {
        let t64 = Tensor::<f64>::from_f64(shape.clone(), &specials).unwrap();
        let path = dir.path().join("t64.tcit");
        write_tensor_file(&t64, &path).unwrap();
        match read_tensor_file(&path).unwrap() {
            AnyTensor::F64(back) => assert!(bits_equal(&back, &t64)),
            other => panic!("decoded as {:?}", other.dtype()),
        }
        let t32: Tensor<f32> = t64.cast();
        write_tensor_file(&t32, &path).unwrap();
        match read_tensor_file(&path).unwrap() {
            AnyTensor::F32(back) => {
                assert!(back.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
            }
            other => panic!("decoded as {:?}", other.dtype()),
        }
    }
}

#[test]
fn any_single_byte_change_is_rejected() {
    let t = Tensor::<f64>::from_f64(vec![2, 2], &[0.5, -1.5, 2.25, 8.0]).unwrap();
    let good = encode_tensor(&t).unwrap();
    for i in 0..good.len() {
        for flip in [0x01u8, 0x80] {
            let mut bad = good.clone();
            bad[i] ^= flip;
            assert!(decode_tensor(&bad).is_err(), "byte {i} flip {flip:#x} accepted");
        }
    }
    // past the header every change is caught by the checksum
    let mut bad = good.clone();
    bad[20] ^= 0x10;
    assert!(matches!(decode_tensor(&bad), Err(Error::Checksum { .. })));
}

fn tiny_checkpoint<T: Real>(dir: &std::path::Path) -> Checkpoint<T> {
    let cfg = PhantomConfig {
        seed: 3,
        size: 16,
        pairs: 2,
        dtype: T::DTYPE,
        ..Default::default()
    };
    let manifest = generate_phantom_dataset(&cfg, dir).unwrap();
    let mut tc = TrainConfig {
        epochs: 1,
        batch_size: 2,
        initial_lr: 1e-3,
        ..Default::default()
    };
    tc.model.blocks = 2;
    tc.model.dense_layers = 2;
    tc.model.growth = 4;
    tc.model.actnorm = true;
    train::<T>(&manifest, &tc).unwrap().0
}

fn checkpoint_round_trip<T: Real>() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint::<T>(dir.path());
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(checkpoint_dtype(&path).unwrap(), T::DTYPE);
    let back = Checkpoint::<T>::load(&path).unwrap();
    assert_eq!(back.params.len(), ckpt.params.len());
    for ((na, a), (nb, b)) in ckpt.params.iter().zip(&back.params) {
        assert_eq!(na, nb);
        assert!(bits_equal(a, b), "{na} changed");
    }
    let (m1, v1) = ckpt.optimizer.moments();
    let (m2, v2) = back.optimizer.moments();
    assert!(m1.iter().zip(m2).all(|(a, b)| bits_equal(a, b)));
    assert!(v1.iter().zip(v2).all(|(a, b)| bits_equal(a, b)));
    assert_eq!(back.optimizer.step_count(), ckpt.optimizer.step_count());
    assert_eq!((back.epoch, &back.rng, &back.config), (ckpt.epoch, &ckpt.rng, &ckpt.config));
    assert_eq!(back.encode().unwrap(), ckpt.encode().unwrap());

    // the restored model computes exactly what the saved one did
    let x = Tensor::<T>::from_f64(vec![1, 3, 16, 16], &(0..768).map(|i| (i % 17) as f64 / 17.0).collect::<Vec<_>>())
        .unwrap();
    let (a, b) = (ckpt.model().unwrap().forward(&x).unwrap(), back.model().unwrap().forward(&x).unwrap());
    assert!(bits_equal(&a, &b));
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    checkpoint_round_trip::<f32>();
    checkpoint_round_trip::<f64>();
}

#[test]
fn checkpoint_corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = tiny_checkpoint::<f64>(dir.path()).encode().unwrap();
    for i in (0..bytes.len()).step_by(bytes.len() / 97 + 1).chain([bytes.len() - 1]) {
        let mut bad = bytes.clone();
        bad[i] ^= 0x04;
        assert!(Checkpoint::<f64>::decode(&bad).is_err(), "byte {i} change accepted");
    }
    assert!(Checkpoint::<f64>::decode(&bytes[..bytes.len() - 3]).is_err());
    // the stored type must match the requested one
    assert!(Checkpoint::<f32>::decode(&bytes).is_err());
}
