//! Central finite-difference checks of every tape operation, of whole
//! models in both directions and of the bidirectional loss.
//!
//! The reference derivative is always taken in 64-bit arithmetic, so the
//! 32-bit check compares the 32-bit backward pass against an accurate
//! oracle instead of against a noisy 32-bit difference quotient.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcinn::autodiff::{ParamId, Tape, Var};
use tcinn::model::{Inv1x1, ModelConfig, TcinnModel};
use tcinn::train::loss_hold_graph;
use tcinn::{Real, Result, Tensor};

const STEP: f64 = 1e-6;
const TOL_F64: f64 = 1e-6;
const TOL_F32: f64 = 1e-3;

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).unwrap()
}

/// Inputs with magnitude at least 0.05 so no coordinate sits on a kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, -1.0, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v);
        }
    }
    t
}

/// A differentiable expression of some input tensors.
pub trait Case {
    fn build<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Scalar objective: mean squared distance of the case output to a fixed
/// random tensor, which weights every output element differently.
fn objective<T: Real>(case: &impl Case, inputs: &[Tensor<f64>], anchor_seed: u64, trainable: bool) -> (Tape<T>, Var) {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if trainable {
                tape.param(ParamId(i), t.cast()).unwrap()
            } else {
                tape.constant(t.cast())
            }
        })
        .collect();
    let out = case.build(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let anchor = random(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(anchor_seed));
    let a = tape.constant(anchor.cast());
    let loss = tape.mse(out, a).unwrap();
    (tape, loss)
}

fn value(case: &impl Case, inputs: &[Tensor<f64>], anchor_seed: u64) -> f64 {
    let (tape, loss) = objective::<f64>(case, inputs, anchor_seed, false);
    tape.value(loss).data()[0]
}

fn numeric(case: &impl Case, inputs: &[Tensor<f64>], anchor_seed: u64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].numel())
                .map(|j| {
                    let x0 = work[i].data()[j];
                    work[i].data_mut()[j] = x0 + STEP;
                    let up = value(case, &work, anchor_seed);
                    work[i].data_mut()[j] = x0 - STEP;
                    let down = value(case, &work, anchor_seed);
                    work[i].data_mut()[j] = x0;
                    (up - down) / (2.0 * STEP)
                })
                .collect()
        })
        .collect()
}

fn analytic<T: Real>(case: &impl Case, inputs: &[Tensor<f64>], anchor_seed: u64) -> Vec<Vec<f64>> {
    let (tape, loss) = objective::<T>(case, inputs, anchor_seed, true);
    let grads = tape.backward(loss).unwrap();
    (0..inputs.len())
        .map(|i| grads.get(ParamId(i)).unwrap().data().iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Relative error `|a - n| / |n|` over all coordinates of one input.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    assert!(norm > 1e-12, "reference gradient vanishes");
    diff / norm
}

pub fn check(name: &str, case: impl Case, inputs: Vec<Tensor<f64>>) {
    for t in &inputs {
        assert!(t.numel() <= 2 * 3 * 6 * 6, "{name}: input {:?} too large", t.shape());
    }
    let reference = numeric(&case, &inputs, 99);
    let g64 = analytic::<f64>(&case, &inputs, 99);
    let g32 = analytic::<f32>(&case, &inputs, 99);
    for i in 0..inputs.len() {
        let (e64, e32) = (rel_err(&g64[i], &reference[i]), rel_err(&g32[i], &reference[i]));
        assert!(e64 < TOL_F64, "{name} input {i}: 64-bit relative error {e64:e}");
        assert!(e32 < TOL_F32, "{name} input {i}: 32-bit relative error {e32:e}");
    }
}

macro_rules! case {
    ($ty:ident, |$tape:ident, $v:ident| $body:expr) => {
        struct $ty;
        impl crate::gradcheck::Case for $ty {
            fn build<T: tcinn::Real>(
                &self,
                $tape: &mut tcinn::autodiff::Tape<T>,
                $v: &[tcinn::autodiff::Var],
            ) -> tcinn::Result<tcinn::autodiff::Var> {
                $body
            }
        }
    };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn conv2d_same_padding_with_bias() {
    case!(C, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    let r = &mut rng(1);
    check(
        "conv2d",
        C,
        vec![random(&[2, 3, 6, 6], -1.0, 1.0, r), random(&[2, 3, 3, 3], -1.0, 1.0, r), random(&[2], -1.0, 1.0, r)],
    );
}

pub fn conv2d_strided_without_padding() {
    case!(C, |t, v| t.conv2d(v[0], v[1], None, 2, 0));
    let r = &mut rng(2);
    check("conv2d stride 2", C, vec![random(&[1, 2, 6, 6], -1.0, 1.0, r), random(&[3, 2, 3, 3], -1.0, 1.0, r)]);
}

pub fn leaky_relu() {
    case!(C, |t, v| t.leaky_relu(v[0], 0.2));
    check("leaky_relu", C, vec![away_from_zero(&[2, 3, 6, 6], &mut rng(3))]);
}

pub fn pointwise_ops() {
    case!(Add, |t, v| t.add(v[0], v[1]));
    case!(Sub, |t, v| t.sub(v[0], v[1]));
    case!(Had, |t, v| t.hadamard(v[0], v[1]));
    let r = &mut rng(4);
    let (a, b) = (random(&[2, 3, 4, 4], -1.0, 1.0, r), random(&[2, 3, 4, 4], -1.0, 1.0, r));
    check("add", Add, vec![a.clone(), b.clone()]);
    check("sub", Sub, vec![a.clone(), b.clone()]);
    check("hadamard", Had, vec![a, b]);
}

pub fn scale_exp_and_soft_clamp() {
    case!(Scale, |t, v| Ok(t.scale(v[0], -1.7)));
    case!(Exp, |t, v| Ok(t.exp(v[0])));
    case!(Clamp, |t, v| t.soft_clamp(v[0], 2.0));
    let x = random(&[2, 3, 4, 4], -3.0, 3.0, &mut rng(5));
    check("scale", Scale, vec![x.clone()]);
    check("exp", Exp, vec![x.clone()]);
    check("soft_clamp", Clamp, vec![x]);
}

pub fn channel_split_and_concat() {
    case!(Split, |t, v| {
        let (a, b) = t.channel_split(v[0], 1)?;
        let b2 = t.scale(b, 3.0);
        t.channel_concat(b2, a)
    });
    case!(Slice, |t, v| t.slice_channels(v[0], 1, 2));
    let x = random(&[2, 3, 5, 5], -1.0, 1.0, &mut rng(6));
    check("split/concat", Split, vec![x.clone()]);
    check("slice", Slice, vec![x]);
}

pub fn mse_of_two_variables() {
    case!(C, |t, v| t.mse(v[0], v[1]));
    let r = &mut rng(7);
    check("mse", C, vec![random(&[2, 3, 4, 4], -1.0, 1.0, r), random(&[2, 3, 4, 4], -1.0, 1.0, r)]);
}

fn well_conditioned(c: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut w = random(&[c, c], -0.3, 0.3, r);
    for i in 0..c {
        w.data_mut()[i * c + i] += 1.0;
    }
    w
}

pub fn channel_mix_and_unmix() {
    case!(Mix, |t, v| t.channel_mix(v[0], v[1]));
    case!(Unmix, |t, v| {
        let inv = Inv1x1::new(t.value(v[1]).clone())?.inverse().clone();
        t.channel_unmix(v[0], v[1], &inv)
    });
    let r = &mut rng(8);
    let x = random(&[2, 3, 6, 6], -1.0, 1.0, r);
    let w = well_conditioned(3, r);
    check("channel_mix", Mix, vec![x.clone(), w.clone()]);
    check("channel_unmix", Unmix, vec![x, w]);
}

pub fn channel_affine_both_directions() {
    case!(Fwd, |t, v| t.channel_affine(v[0], v[1], v[2]));
    case!(Inv, |t, v| t.channel_affine_inverse(v[0], v[1], v[2]));
    let r = &mut rng(9);
    let x = random(&[2, 3, 6, 6], -1.0, 1.0, r);
    let scale = random(&[3], 0.5, 2.0, r);
    let shift = random(&[3], -1.0, 1.0, r);
    check("channel_affine", Fwd, vec![x.clone(), scale.clone(), shift.clone()]);
    check("channel_affine_inverse", Inv, vec![x, scale, shift]);
}

/// Tiny model with every conditioner output made non-zero, so no
/// parameter sits at a point where its gradient is trivially zero.
fn tiny_model(blocks: usize, actnorm: bool, seed: u64) -> TcinnModel<f64> {
    let mut cfg = ModelConfig::new(3);
    cfg.blocks = blocks;
    cfg.dense_layers = 2;
    cfg.growth = 3;
    cfg.actnorm = actnorm;
    let mut m = TcinnModel::<f64>::init(cfg, seed).unwrap();
    m.randomize_output_layers(seed + 1, 0.5).unwrap();
    if actnorm {
        let x = random(&[2, 3, 6, 6], 0.0, 1.0, &mut rng(seed + 2));
        m.initialize_actnorm(&x).unwrap();
    }
    m
}

/// Model under test, rebuilt from its parameter tensors on every call so
/// finite differences see perturbed mixing matrices with fresh inverses.
struct ModelCase {
    base: TcinnModel<f64>,
    inverse: bool,
    loss: Option<f64>,
}

impl ModelCase {
    fn inputs(&self, x: Tensor<f64>, y: Option<Tensor<f64>>) -> Vec<Tensor<f64>> {
        let mut v = self.base.export_parameters();
        v.push(x);
        v.extend(y);
        v
    }
}

impl Case for ModelCase {
    fn build<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let n = self.base.param_count();
        let mut model = TcinnModel::<T>::init(self.base.config().clone(), 0)?;
        model.import_parameters(inputs[..n].iter().map(|&v| tape.value(v).clone()).collect())?;
        let bound = model.bind_vars(tape, &inputs[..n])?;
        let x = inputs[n];
        match self.loss {
            Some(lambda) => Ok(loss_hold_graph(tape, &model, &bound, x, inputs[n + 1], lambda)?.total),
            None if self.inverse => model.inverse_graph(tape, &bound, x),
            None => model.forward_graph(tape, &bound, x),
        }
    }
}

pub fn model_forward_with_and_without_actnorm() {
    for (blocks, actnorm) in [(1, false), (2, true)] {
        let case = ModelCase {
            base: tiny_model(blocks, actnorm, 10 + blocks as u64),
            inverse: false,
            loss: None,
        };
        let x = random(&[2, 3, 6, 6], 0.0, 1.0, &mut rng(20));
        let inputs = case.inputs(x, None);
        check(&format!("model forward ({blocks} blocks)"), case, inputs);
    }
}

pub fn model_inverse_with_and_without_actnorm() {
    for (blocks, actnorm) in [(1, true), (2, false)] {
        let case = ModelCase {
            base: tiny_model(blocks, actnorm, 30 + blocks as u64),
            inverse: true,
            loss: None,
        };
        let y = random(&[2, 3, 6, 6], 0.0, 1.0, &mut rng(40));
        let inputs = case.inputs(y, None);
        check(&format!("model inverse ({blocks} blocks)"), case, inputs);
    }
}

pub fn bidirectional_loss() {
    for lambda in [1.0, 0.3] {
        let case = ModelCase {
            base: tiny_model(2, false, 50),
            inverse: false,
            loss: Some(lambda),
        };
        let r = &mut rng(51);
        let x = random(&[2, 3, 6, 6], 0.0, 1.0, r);
        let y = random(&[2, 3, 6, 6], 0.0, 1.0, r);
        let inputs = case.inputs(x, Some(y));
        check(&format!("loss_hold lambda {lambda}"), case, inputs);
    }
}

/// Every check above, by name.
pub const ALL: &[(&str, fn())] = &[
    ("conv2d_same_padding_with_bias", conv2d_same_padding_with_bias),
    ("conv2d_strided_without_padding", conv2d_strided_without_padding),
    ("leaky_relu", leaky_relu),
    ("pointwise_ops", pointwise_ops),
    ("scale_exp_and_soft_clamp", scale_exp_and_soft_clamp),
    ("channel_split_and_concat", channel_split_and_concat),
    ("mse_of_two_variables", mse_of_two_variables),
    ("channel_mix_and_unmix", channel_mix_and_unmix),
    ("channel_affine_both_directions", channel_affine_both_directions),
    ("model_forward_with_and_without_actnorm", model_forward_with_and_without_actnorm),
    ("model_inverse_with_and_without_actnorm", model_inverse_with_and_without_actnorm),
    ("bidirectional_loss", bidirectional_loss),
];
