//! Bidirectional training with Adam and a step-halving learning rate.

mod adam;
mod checkpoint;
mod curve;
mod loss;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use curve::{EpochRecord, LossCurve, LOSS_HEADER};
pub use loss::{loss_hold, loss_hold_graph, LossValue, LossVars};
pub use schedule::lr_at_epoch;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::model::{augment_channels, ModelConfig, TcinnModel};
use crate::tensor::{Real, Tensor};

/// Stream of the shuffling generator; model initialisation uses stream 0.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub halving_period: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// `model.channels` is the augmentation width C.
    pub model: ModelConfig,
    /// Rescale gradients whose global norm exceeds this bound.
    pub clip_norm: Option<f64>,
    /// Validate inputs and return the initial state without training.
    pub dry_run: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            initial_lr: 1e-4,
            halving_period: 50,
            lambda: 1.0,
            batch_size: 4,
            seed: 0,
            adam: AdamConfig::default(),
            model: ModelConfig::new(3),
            clip_norm: None,
            dry_run: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid(format!("initial lr {} must be positive", self.initial_lr)));
        }
        if self.halving_period == 0 {
            return Err(Error::invalid("halving period must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("clip norm {c} must be positive")));
            }
        }
        self.model.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        lr_at_epoch(epoch, self.epochs, self.initial_lr, self.halving_period)
    }
}

/// Loss of one optimisation step, reported to the batch observer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchReport {
    /// Zero-based epoch.
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub loss: LossValue,
    pub lr: f64,
}

/// Largest acceptable round trip error of the per-epoch spot check.
pub fn round_trip_tolerance<T: Real>() -> f64 {
    match T::DTYPE {
        crate::tensor::DType::F32 => 1e-4,
        crate::tensor::DType::F64 => 1e-10,
    }
}

struct Dataset<T> {
    sources: Vec<Tensor<T>>,
    targets: Vec<Tensor<T>>,
}

impl<T: Real> Dataset<T> {
    fn load(manifest: &DatasetManifest, channels: usize) -> Result<Self> {
        let pairs = manifest.load_all::<T>()?;
        let mut sources = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (h, w) = (p.source.shape()[1], p.source.shape()[2]);
            let plane = |t: Tensor<T>| -> Result<Tensor<T>> {
                augment_channels(&t.reshape(vec![1, 1, h, w])?, channels)?.reshape(vec![channels, h, w])
            };
            sources.push(plane(p.source)?);
            targets.push(plane(p.target)?);
        }
        Ok(Self { sources, targets })
    }

    /// `B x C x H x W` source and target batches.
    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let pick = |v: &[Tensor<T>]| Tensor::stack(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        Ok((pick(&self.sources)?, pick(&self.targets)?))
    }
}

/// Trains from scratch. See [`train_from`].
pub fn train<T: Real>(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(Checkpoint<T>, LossCurve)> {
    train_from(manifest, cfg, None, |_| {})
}

/// Runs the remaining epochs of `cfg`, optionally resuming from `resume`.
///
/// Each epoch shuffles the pairs with a generator seeded from `cfg.seed`
/// (separate from the model stream), then for every batch evaluates the
/// bidirectional loss, back-propagates and applies one Adam step at the
/// epoch's learning rate. After each epoch the first batch is pushed
/// through forward then inverse and must come back within
/// [`round_trip_tolerance`].
pub fn train_from<T: Real>(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    resume: Option<Checkpoint<T>>,
    mut on_batch: impl FnMut(&BatchReport),
) -> Result<(Checkpoint<T>, LossCurve)> {
    cfg.validate()?;
    let data = Dataset::<T>::load(manifest, cfg.model.channels)?;
    let n = data.sources.len();

    let (mut model, mut opt, start, mut rng) = match resume {
        Some(ck) => {
            let model = ck.model_for(&cfg.model)?;
            if ck.epoch > cfg.epochs {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint completed {} epochs, config asks for {}",
                    ck.epoch, cfg.epochs
                )));
            }
            (model, ck.optimizer, ck.epoch, ck.rng.restore())
        }
        None => {
            let mut model = TcinnModel::<T>::init(cfg.model.clone(), cfg.seed)?;
            if cfg.model.actnorm {
                let first: Vec<usize> = (0..n.min(cfg.batch_size)).collect();
                model.initialize_actnorm(&data.batch(&first)?.0)?;
            }
            let opt = AdamState::new(model.named_parameters());
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SHUFFLE_STREAM);
            (model, opt, 0, rng)
        }
    };

    let mut curve = LossCurve::new();
    if cfg.dry_run {
        return Ok((Checkpoint::capture(&model, &opt, start, RngState::capture(&rng)), curve));
    }

    let mut params = model.export_parameters();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in start..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch)?;
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut total, mut forward, mut inverse) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(idx)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true)?;
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let vars = loss_hold_graph(&mut tape, &model, &bound, xv, yv, cfg.lambda)?;
            let loss = loss::read_loss(&tape, &vars);
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {} batch {b} (forward {}, inverse {})",
                    epoch + 1,
                    loss.forward,
                    loss.inverse
                )));
            }
            let mut grads = tape.backward(vars.total)?;
            drop(tape);
            if let Some(limit) = cfg.clip_norm {
                let norm = grads.global_norm().as_f64();
                if norm > limit {
                    grads.scale(T::lit(limit / norm));
                }
            }
            opt.step(&mut params, &grads, lr, &cfg.adam).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {} batch {b}", epoch + 1)),
                other => other,
            })?;
            model.import_parameters(params.clone()).map_err(|e| match e {
                Error::Singular { .. } => {
                    log::error!("1x1 mixing matrix became singular at epoch {} batch {b}", epoch + 1);
                    e
                }
                other => other,
            })?;
            let k = idx.len() as f64;
            total += loss.total * k;
            forward += loss.forward * k;
            inverse += loss.inverse * k;
            on_batch(&BatchReport {
                epoch,
                batch: b,
                size: idx.len(),
                loss,
                lr,
            });
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            total: total / n as f64,
            forward: forward / n as f64,
            inverse: inverse / n as f64,
            lr,
        };
        log::info!(
            "epoch {} loss {:.6e} (forward {:.6e}, inverse {:.6e}) lr {:e}",
            rec.epoch,
            rec.total,
            rec.forward,
            rec.inverse,
            lr
        );
        curve.push(rec)?;

        let probe: Vec<usize> = order.iter().copied().take(cfg.batch_size).collect();
        let (x, _) = data.batch(&probe)?;
        let back = model.inverse(&model.forward(&x)?)?;
        let err = back.max_abs_diff(&x)?.as_f64();
        let tol = round_trip_tolerance::<T>();
        if err.is_nan() || err >= tol {
            return Err(Error::Invertibility {
                epoch: epoch + 1,
                error: err,
                tolerance: tol,
            });
        }
    }
    Ok((Checkpoint::capture(&model, &opt, cfg.epochs, RngState::capture(&rng)), curve))
}
