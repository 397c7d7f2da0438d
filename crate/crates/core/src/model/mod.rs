//! The invertible network: a stack of blocks, each an optional actnorm, an
//! invertible 1x1 convolution and an enhanced affine coupling.

mod actnorm;
mod augment;
mod coupling;
mod dense;
mod inv1x1;

pub use actnorm::Actnorm;
pub use augment::{augment_channels, collapse_channels};
pub use coupling::{soft_clamp, Coupling};
pub use dense::{ConvLayer, DenseBlock, LEAKY_SLOPE};
pub use inv1x1::{Inv1x1, MAX_CONDITION, MIN_ABS_DET};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use coupling::BoundCoupling;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channel count after augmentation.
    pub channels: usize,
    /// Width of the first coupling part.
    pub split: usize,
    pub blocks: usize,
    pub dense_layers: usize,
    pub growth: usize,
    pub clamp: f64,
    pub actnorm: bool,
}

impl ModelConfig {
    /// Defaults for `channels`: split at `channels / 2`, 4 blocks, dense
    /// blocks of 8 layers with growth 16, clamp 2.0, no actnorm.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            split: channels / 2,
            blocks: 4,
            dense_layers: 8,
            growth: 16,
            clamp: 2.0,
            actnorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::invalid(format!("model needs at least 2 channels, got {}", self.channels)));
        }
        if self.split == 0 || self.split >= self.channels {
            return Err(Error::invalid(format!(
                "split {} outside 1..{}",
                self.split, self.channels
            )));
        }
        if self.dense_layers == 0 {
            return Err(Error::invalid("dense blocks need at least one layer"));
        }
        if self.dense_layers > 1 && self.growth == 0 {
            return Err(Error::invalid("dense growth must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::invalid(format!("clamp bound {} must be positive", self.clamp)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("split", self.split.to_string()),
            ("blocks", self.blocks.to_string()),
            ("dense_layers", self.dense_layers.to_string()),
            ("growth", self.growth.to_string()),
            ("clamp", format!("{:?}", self.clamp)),
            ("actnorm", self.actnorm.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Parse(format!("bad value {v:?} for model key {key}")))
        }
        let mut cfg = ModelConfig::new(2);
        let mut seen_split = false;
        for (k, v) in pairs {
            match k {
                "channels" => cfg.channels = parse(k, v)?,
                "split" => {
                    cfg.split = parse(k, v)?;
                    seen_split = true;
                }
                "blocks" => cfg.blocks = parse(k, v)?,
                "dense_layers" => cfg.dense_layers = parse(k, v)?,
                "growth" => cfg.growth = parse(k, v)?,
                "clamp" => cfg.clamp = parse(k, v)?,
                "actnorm" => cfg.actnorm = parse(k, v)?,
                other => return Err(Error::Parse(format!("unknown model key {other:?}"))),
            }
        }
        if !seen_split {
            cfg.split = cfg.channels / 2;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Puts model tensors on a tape, either as trainable parameters with
/// sequential ids or as constants.
pub(crate) struct Binder<'t, T> {
    tape: &'t mut Tape<T>,
    trainable: bool,
    /// Variables already on the tape, taken in order instead of new ones.
    existing: Option<&'t [Var]>,
    next: usize,
}

impl<'t, T: Real> Binder<'t, T> {
    pub(crate) fn constants(tape: &'t mut Tape<T>) -> Self {
        Self {
            tape,
            trainable: false,
            existing: None,
            next: 0,
        }
    }

    pub(crate) fn params(tape: &'t mut Tape<T>) -> Self {
        Self {
            tape,
            trainable: true,
            existing: None,
            next: 0,
        }
    }

    pub(crate) fn existing(tape: &'t mut Tape<T>, vars: &'t [Var]) -> Self {
        Self {
            tape,
            trainable: false,
            existing: Some(vars),
            next: 0,
        }
    }

    pub(crate) fn bind(&mut self, t: &Tensor<T>) -> Result<Var> {
        let id = ParamId(self.next);
        self.next += 1;
        if let Some(vars) = self.existing {
            let v = *vars
                .get(id.0)
                .ok_or_else(|| Error::invalid(format!("only {} variables for the model parameters", vars.len())))?;
            if self.tape.value(v).shape() != t.shape() {
                return Err(Error::shape(
                    "bind_vars",
                    format!("parameter {} expects {:?}, got {:?}", id.0, t.shape(), self.tape.value(v).shape()),
                ));
            }
            return Ok(v);
        }
        if self.trainable {
            self.tape.param(id, t.clone())
        } else {
            Ok(self.tape.constant(t.clone()))
        }
    }
}

pub(crate) fn replace_checked<T: Real>(
    slot: &mut Tensor<T>,
    values: &mut dyn Iterator<Item = Tensor<T>>,
) -> Result<()> {
    let next = values
        .next()
        .ok_or_else(|| Error::invalid("too few parameter tensors"))?;
    if next.shape() != slot.shape() {
        return Err(Error::shape(
            "load_parameters",
            format!("expected {:?}, got {:?}", slot.shape(), next.shape()),
        ));
    }
    *slot = next;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub actnorm: Option<Actnorm<T>>,
    pub mix: Inv1x1<T>,
    pub coupling: Coupling<T>,
}

#[derive(Clone, Debug)]
struct BoundBlock {
    actnorm: Option<(Var, Var)>,
    mix: Var,
    coupling: BoundCoupling,
}

/// Parameters of a model placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    blocks: Vec<BoundBlock>,
    count: usize,
}

impl BoundModel {
    pub fn param_count(&self) -> usize {
        self.count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TcinnModel<T> {
    config: ModelConfig,
    blocks: Vec<Block<T>>,
}

impl<T: Real> TcinnModel<T> {
    /// Seeded initialisation that starts as the identity map.
    ///
    /// Mixing matrices are random orthogonal, except the last block's, which
    /// is the transpose of the product of the others so the stack composes
    /// to the identity while every coupling is still zero. The final layer
    /// of every conditioner is zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (config.channels, config.split);
        let mut product = DMatrix::<f64>::identity(c, c);
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let w = if b + 1 == config.blocks {
                product.transpose()
            } else {
                inv1x1::random_orthogonal(c, &mut rng)
            };
            product = &w * &product;
            let s = DenseBlock::init(d, c - d, config.dense_layers, config.growth, 0.0, &mut rng)?;
            let t = DenseBlock::init(d, c - d, config.dense_layers, config.growth, 0.0, &mut rng)?;
            let r = DenseBlock::init(c - d, d, config.dense_layers, config.growth, 0.0, &mut rng)?;
            blocks.push(Block {
                actnorm: if config.actnorm {
                    Some(Actnorm::identity(c)?)
                } else {
                    None
                },
                mix: Inv1x1::from_matrix(&w)?,
                coupling: Coupling::new(d, config.clamp, s, t, r)?,
            });
        }
        Ok(Self { config, blocks })
    }

    pub fn from_blocks(config: ModelConfig, blocks: Vec<Block<T>>) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.blocks {
            return Err(Error::invalid(format!(
                "config declares {} blocks, got {}",
                config.blocks,
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            let ok = b.mix.channels() == config.channels
                && b.coupling.channels() == config.channels
                && b.coupling.split() == config.split
                && b.actnorm.is_some() == config.actnorm
                && b.actnorm.as_ref().is_none_or(|a| a.scale().numel() == config.channels);
            if !ok {
                return Err(Error::shape("model", format!("block {i} inconsistent with config")));
            }
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    /// Replaces the final layer of every conditioner with Gaussian weights
    /// and biases of standard deviation `gain * sqrt(2 / fan_in)`, the
    /// scaling of the hidden layers, so the model is no longer the identity.
    pub fn randomize_output_layers(&mut self, seed: u64, gain: f64) -> Result<()> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for cond in block.coupling.conditioners_mut() {
                let last = cond.layers_mut().last_mut().expect("non-empty dense block");
                let fan_in = last.kernel.numel() / last.kernel.shape()[0];
                let std = gain * (2.0 / fan_in as f64).sqrt();
                for v in last.kernel.data_mut().iter_mut().chain(last.bias.data_mut()) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = T::lit(z * std);
                }
            }
        }
        Ok(())
    }

    /// Named parameter tensors in binding order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(a) = &b.actnorm {
                out.push((format!("block{i}.actnorm.scale"), a.scale()));
                out.push((format!("block{i}.actnorm.shift"), a.shift()));
            }
            out.push((format!("block{i}.inv1x1.weight"), b.mix.weight()));
            b.coupling.collect(&format!("block{i}.coupling"), &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_parameters().len()
    }

    pub fn export_parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Loads tensors in [`Self::named_parameters`] order. Mixing matrices are
    /// re-validated and their inverses refreshed.
    pub fn import_parameters(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::invalid(format!("expected {expected} parameter tensors, got {}", values.len())));
        }
        let mut it = values.into_iter();
        for b in &mut self.blocks {
            if let Some(a) = &mut b.actnorm {
                let mut scale = a.scale().clone();
                let mut shift = a.shift().clone();
                replace_checked(&mut scale, &mut it)?;
                replace_checked(&mut shift, &mut it)?;
                a.scale_mut_checked(scale, shift)?;
            }
            let w = it.next().ok_or_else(|| Error::invalid("too few parameter tensors"))?;
            b.mix.set_weight(w)?;
            b.coupling.load(&mut it)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundModel> {
        let binder = if trainable {
            Binder::params(tape)
        } else {
            Binder::constants(tape)
        };
        self.bind_with(binder)
    }

    /// Uses variables already on `tape`, one per tensor of
    /// [`Self::named_parameters`] and in that order. The values on the tape
    /// stand in for the model's own; mixing inverses still come from the model.
    pub fn bind_vars(&self, tape: &mut Tape<T>, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameter variables, got {}",
                self.param_count(),
                vars.len()
            )));
        }
        self.bind_with(Binder::existing(tape, vars))
    }

    fn bind_with(&self, mut binder: Binder<'_, T>) -> Result<BoundModel> {
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let actnorm = match &b.actnorm {
                Some(a) => Some((binder.bind(a.scale())?, binder.bind(a.shift())?)),
                None => None,
            };
            let mix = binder.bind(b.mix.weight())?;
            let coupling = b.coupling.bind(&mut binder)?;
            blocks.push(BoundBlock { actnorm, mix, coupling });
        }
        Ok(BoundModel {
            blocks,
            count: binder.next,
        })
    }

    fn check_channels(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.config.channels {
            return Err(Error::shape(
                "model",
                format!("model has {} channels, input has {c}", self.config.channels),
            ));
        }
        Ok(())
    }

    pub fn forward_graph(&self, tape: &mut Tape<T>, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_channels(tape, x)?;
        let mut h = x;
        for (b, p) in self.blocks.iter().zip(&bound.blocks) {
            if let Some((scale, shift)) = p.actnorm {
                h = tape.channel_affine(h, scale, shift)?;
            }
            h = tape.channel_mix(h, p.mix)?;
            h = b.coupling.forward_graph(tape, &p.coupling, h)?;
        }
        Ok(h)
    }

    pub fn inverse_graph(&self, tape: &mut Tape<T>, bound: &BoundModel, y: Var) -> Result<Var> {
        self.check_channels(tape, y)?;
        let mut h = y;
        for (b, p) in self.blocks.iter().zip(&bound.blocks).rev() {
            h = b.coupling.inverse_graph(tape, &p.coupling, h)?;
            h = tape.channel_unmix(h, p.mix, b.mix.inverse())?;
            if let Some((scale, shift)) = p.actnorm {
                h = tape.channel_affine_inverse(h, scale, shift)?;
            }
        }
        Ok(h)
    }

    fn eval(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let v = tape.constant(x.clone());
        let out = if inverse {
            self.inverse_graph(&mut tape, &bound, v)?
        } else {
            self.forward_graph(&mut tape, &bound, v)?
        };
        Ok(tape.into_value(out))
    }

    /// Source to target direction.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(x, false)
    }

    /// Target to source direction.
    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(y, true)
    }

    /// Data-dependent actnorm initialisation on one batch, block by block.
    pub fn initialize_actnorm(&mut self, x: &Tensor<T>) -> Result<()> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            if let Some(a) = &mut b.actnorm {
                a.initialize_from(&h)?;
                h = a.forward(&h)?;
            }
            h = b.mix.forward(&h)?;
            h = b.coupling.forward(&h)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c: usize, k: usize) -> ModelConfig {
        ModelConfig {
            blocks: k,
            dense_layers: 3,
            growth: 4,
            ..ModelConfig::new(c)
        }
    }

    fn input(c: usize) -> Tensor<f64> {
        Tensor::new(vec![2, c, 6, 6], (0..72 * c).map(|i| ((i * 29 % 97) as f64) / 97.0).collect()).unwrap()
    }

    #[test]
    fn fresh_model_is_identity() {
        for k in [0, 1, 2, 4] {
            let m = TcinnModel::<f64>::init(small(3, k), 7).unwrap();
            let x = input(3);
            assert!(m.forward(&x).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
            assert!(m.inverse(&x).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
        }
        let m = TcinnModel::<f32>::init(ModelConfig::new(9), 3).unwrap();
        let x = input(9).cast::<f32>();
        assert!(m.forward(&x).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn mixing_matrices_are_orthogonal() {
        let m = TcinnModel::<f64>::init(small(6, 4), 21).unwrap();
        for b in m.blocks() {
            let w = DMatrix::from_row_slice(6, 6, b.mix.weight().data());
            let err = (w.transpose() * &w - DMatrix::identity(6, 6)).abs().max();
            assert!(err < 1e-12);
        }
        // non-trivial mixing inside the stack
        let first = m.blocks()[0].mix.weight();
        assert!(first.max_abs_diff(&Inv1x1::<f64>::identity(6).unwrap().weight().clone()).unwrap() > 1e-3);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TcinnModel::<f32>::init(small(3, 2), 5).unwrap();
        let b = TcinnModel::<f32>::init(small(3, 2), 5).unwrap();
        let c = TcinnModel::<f32>::init(small(3, 2), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn random_model_round_trips() {
        for (c, k) in [(3, 1), (6, 2), (9, 4)] {
            let mut m = TcinnModel::<f64>::init(small(c, k), 1).unwrap();
            m.randomize_output_layers(2, 1.0).unwrap();
            let x = input(c);
            let y = m.forward(&x).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() > 1e-3);
            assert!(m.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        }
    }

    #[test]
    fn actnorm_model_round_trips() {
        let mut cfg = small(3, 2);
        cfg.actnorm = true;
        let mut m = TcinnModel::<f64>::init(cfg, 4).unwrap();
        m.randomize_output_layers(8, 0.5).unwrap();
        let x = input(3);
        m.initialize_actnorm(&x).unwrap();
        let y = m.forward(&x).unwrap();
        assert!(m.inverse(&y).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = TcinnModel::<f64>::init(small(3, 2), 1).unwrap();
        a.randomize_output_layers(3, 0.5).unwrap();
        let mut b = TcinnModel::<f64>::init(small(3, 2), 2).unwrap();
        b.import_parameters(a.export_parameters()).unwrap();
        assert_eq!(a, b);
        let names = a.named_parameters();
        let mut tape = Tape::new();
        assert_eq!(a.bind(&mut tape, true).unwrap().param_count(), names.len());
    }

    #[test]
    fn import_rejects_singular_mixing() {
        let mut m = TcinnModel::<f64>::init(small(3, 1), 1).unwrap();
        let mut params = m.export_parameters();
        params[0] = Tensor::zeros(vec![3, 3]).unwrap();
        assert!(matches!(m.import_parameters(params), Err(Error::Singular { .. })));
    }

    #[test]
    fn config_pairs_round_trip() {
        let mut cfg = ModelConfig::new(9);
        cfg.clamp = 1.5;
        cfg.actnorm = true;
        let pairs = cfg.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::new(1).validate().is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = TcinnModel::<f64>::init(small(3, 1), 1).unwrap();
        assert!(matches!(m.forward(&input(6)), Err(Error::Shape { .. })));
    }
}
