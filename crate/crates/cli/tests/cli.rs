use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcinn::data::{read_tensor_file, write_tensor_file, DatasetManifest};
use tcinn::metrics::{suv_mean, SuvParams, VoiMask};
use tcinn::train::{Checkpoint, LossCurve};
use tcinn::Tensor;

const TINY_MODEL: &[&str] = &["--blocks", "1", "--dense-layers", "2", "--growth", "4", "--batch-size", "2"];

fn tcinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcinn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tcinn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, seed: &str, pairs: &str, precision: &str) -> PathBuf {
    let out = ok(&[
        "phantom",
        "--seed",
        seed,
        "--size",
        "16",
        "--pairs",
        pairs,
        "--precision",
        precision,
        "--out",
        s(dir),
    ]);
    PathBuf::from(out.trim())
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", s(manifest), "--out", s(out)];
    args.extend_from_slice(TINY_MODEL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn load(path: &Path) -> Tensor<f64> {
    read_tensor_file(path).unwrap().into_real::<f64>()
}

#[test]
fn phantom_writes_requested_pairs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = phantom(&a, "7", "5", "f32");
    let mb = phantom(&b, "7", "5", "f32");
    assert_eq!(DatasetManifest::read(&ma).unwrap().len(), 5);
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    for name in ["manifest.csv", "source_0000.tcit", "target_0004.tcit"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn argument_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = tcinn(&["phantom", "--pairs", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = tcinn(&["phantom", "--no-such-flag", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = tcinn(&["train", "--manifest", "m.csv", "--channels", "4", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_1_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.ckpt");
    let out = tcinn(&["infer", "--ckpt", s(&missing), "--input", "x.tcit", "--out", "y.tcit"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
    let out = tcinn(&["phantom", "--config", s(&dir.path().join("absent.cfg")), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_feeds_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let data = dir.path().join("data");
    fs::write(&cfg, format!("seed=3\nsize=16\npairs=2\nout={}\n", s(&data))).unwrap();
    ok(&["phantom", "--config", s(&cfg), "--pairs", "3"]);
    assert_eq!(DatasetManifest::read(data.join("manifest.csv")).unwrap().len(), 3);
    fs::write(&cfg, "sedd=3\n").unwrap();
    assert_eq!(tcinn(&["phantom", "--config", s(&cfg), "--out", "x"]).status.code(), Some(2));
}

#[test]
fn train_smoke_run_writes_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantom(&dir.path().join("data"), "1", "4", "f32");
    let run = dir.path().join("run");
    train(&manifest, &run, &["--epochs", "2"]);
    let curve = LossCurve::read_csv(run.join("loss.csv")).unwrap();
    assert_eq!(curve.len(), 2);
    let ckpt = Checkpoint::<f32>::load(run.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.config.channels, 3);
    ckpt.model().unwrap();

    // resuming extends the same loss file
    let more = run.join("model.ckpt");
    train(&manifest, &run, &["--epochs", "3", "--resume", s(&more)]);
    assert_eq!(LossCurve::read_csv(run.join("loss.csv")).unwrap().len(), 3);
}

#[test]
fn infer_round_trips_and_identity_init_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = phantom(&dir.path().join("data"), "2", "4", "f32");
    let source = dir.path().join("data/source_0000.tcit");

    let init = dir.path().join("init");
    train(&manifest, &init, &["--dry-run"]);
    let same = dir.path().join("same.tcit");
    ok(&["infer", "--ckpt", s(&init.join("model.ckpt")), "--input", s(&source), "--out", s(&same)]);
    assert!(max_abs(&load(&same), &load(&source)) < 1e-5);
    assert!(tcinn::data::ScaleRecord::sidecar_path(&same).exists());

    let run = dir.path().join("run");
    train(&manifest, &run, &["--epochs", "1", "--lr", "1e-3"]);
    let ckpt = run.join("model.ckpt");
    let (fwd, back) = (dir.path().join("fwd.tcit"), dir.path().join("back.tcit"));
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&source), "--out", s(&fwd)]);
    ok(&["infer", "--ckpt", s(&ckpt), "--input", s(&fwd), "--out", s(&back), "--direction", "inverse"]);
    assert!(max_abs(&load(&back), &load(&source)) < 1e-3);
    assert!(max_abs(&load(&fwd), &load(&source)) > 0.0);

    // a stack of planes is not a single image
    let stack = dir.path().join("stack.tcit");
    write_tensor_file(&Tensor::<f32>::zeros(vec![2, 16, 16]).unwrap(), &stack).unwrap();
    let out = tcinn(&["infer", "--ckpt", s(&ckpt), "--input", s(&stack), "--out", s(&fwd)]);
    assert_eq!(out.status.code(), Some(2));
}

fn parse_report(path: &Path) -> (Vec<Vec<f64>>, Vec<f64>) {
    let text = fs::read_to_string(path).unwrap();
    let mut rows = Vec::new();
    let mut mean = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.starts_with('#')) {
        let cells: Vec<&str> = line.split(',').collect();
        let nums = |c: &[&str]| c.iter().map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect::<Vec<_>>();
        match cells[0] {
            "mean" => mean = nums(&cells[1..]),
            "std" => {}
            _ => rows.push(nums(&cells[1..])),
        }
    }
    (rows, mean)
}

#[test]
fn eval_of_targets_has_zero_error_and_consistent_means() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = phantom(&data, "4", "3", "f64");
    let preds = dir.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    for i in 0..3 {
        let name = format!("target_{i:04}.tcit");
        fs::copy(data.join(&name), preds.join(&name)).unwrap();
    }
    let report = dir.path().join("same.csv");
    ok(&["eval", "--manifest", s(&manifest), "--pred-dir", s(&preds), "--report", s(&report)]);
    let (rows, _) = parse_report(&report);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[2] == 0.0 && r[3] == 0.0));

    let run = dir.path().join("run");
    train(&manifest, &run, &["--epochs", "1", "--precision", "f64", "--lr", "1e-3"]);
    let report = dir.path().join("model.csv");
    ok(&["eval", "--manifest", s(&manifest), "--ckpt", s(&run.join("model.ckpt")), "--report", s(&report)]);
    let (rows, mean) = parse_report(&report);
    for col in 0..4 {
        let m = rows.iter().map(|r| r[col]).sum::<f64>() / rows.len() as f64;
        assert!((m - mean[col]).abs() <= 1e-12 * m.abs().max(1.0), "column {col}: {m} vs {}", mean[col]);
    }
}

#[test]
fn eval_suv_columns_match_direct_computation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = phantom(&data, "5", "2", "f64");
    let mut mask = vec![0.0; 256];
    for r in 4..10 {
        for c in 5..12 {
            mask[r * 16 + c] = 1.0;
        }
    }
    let voi = dir.path().join("voi.tcit");
    let mask_t = Tensor::<f64>::from_f64(vec![16, 16], &mask).unwrap();
    write_tensor_file(&mask_t, &voi).unwrap();
    let report = dir.path().join("suv.csv");
    ok(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--pred-dir",
        s(&data),
        "--report",
        s(&report),
        "--suv-id",
        "10",
        "--suv-weight",
        "70",
        "--voi",
        s(&voi),
        "--voxel-volume",
        "0.5",
    ]);
    let (rows, _) = parse_report(&report);
    let m = DatasetManifest::read(&manifest).unwrap();
    let vm = VoiMask::from_tensor(&mask_t, 0.5).unwrap();
    let p = SuvParams::new(10.0, 70.0).unwrap();
    for (i, row) in rows.iter().enumerate() {
        let pair = m.load_pair::<f64>(i).unwrap();
        let target = tcinn::data::denormalize(&pair.target, &pair.target_scale);
        let expected = suv_mean(&target, &vm, &p).unwrap();
        assert_eq!(row[4], expected);
        assert_eq!(row[5], expected);
    }

    // without the SUV flags the columns stay empty
    let plain = dir.path().join("plain.csv");
    ok(&["eval", "--manifest", s(&manifest), "--pred-dir", s(&data), "--report", s(&plain)]);
    assert!(parse_report(&plain).0.iter().all(|r| r[4].is_nan() && r[5].is_nan()));
}

#[test]
fn every_subcommand_help_shows_defaults() {
    for sub in ["phantom", "train", "infer", "eval", "ablate"] {
        let help = ok(&[sub, "--help"]);
        assert!(help.contains("--config"), "{sub}");
        assert!(help.contains("[default:"), "{sub}");
    }
    let help = ok(&["train", "--help"]);
    for d in ["[default: 300]", "[default: 0.0001]", "[default: 3]", "[default: 1]"] {
        assert!(help.contains(d), "train help lacks {d}");
    }
}

#[test]
fn ablate_writes_one_row_per_width() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = phantom(&dir.path().join("train"), "1", "2", "f64");
    let held = phantom(&dir.path().join("held"), "2", "2", "f64");
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--manifest",
        s(&train_set),
        "--heldout",
        s(&held),
        "--epochs",
        "1",
        "--ssim",
        "global",
        "--precision",
        "f64",
        "--out",
        s(&out),
    ];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    for c in [3, 6, 9] {
        assert!(out.join(format!("c{c}/model.ckpt")).exists());
    }
}
