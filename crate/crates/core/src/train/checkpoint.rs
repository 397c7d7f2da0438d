//! Checkpoint bundle, stored as a `TCIT` record of kind 1.
//!
//! ```text
//! tag       "CKPT"
//! version   u32
//! config    u32 length + `key=value` lines
//! epoch     u32, completed epochs
//! rng       32-byte seed, u64 stream, u128 word position (two u64, low first)
//! count     u32
//! params    count x (u32 length + name, ndim u8, dims u32, values)
//! adam step u64
//! moments   count x first-moment values, then count x second-moment values
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use crate::data::container::{open_record, ByteReader, ByteWriter, KIND_CHECKPOINT};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TcinnModel};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const TAG: &[u8; 4] = b"CKPT";

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub config: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: AdamState<T>,
    pub rng: RngState,
}

impl<T: Real> Checkpoint<T> {
    pub fn capture(model: &TcinnModel<T>, optimizer: &AdamState<T>, epoch: usize, rng: RngState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            epoch,
            params: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            optimizer: optimizer.clone(),
            rng,
        }
    }

    /// Rebuilds the model stored in the checkpoint.
    pub fn model(&self) -> Result<TcinnModel<T>> {
        let mut model = TcinnModel::init(self.config.clone(), 0)?;
        let names = model.named_parameters();
        if names.len() != self.params.len() || names.iter().zip(&self.params).any(|((a, _), (b, _))| a != b) {
            return Err(Error::ConfigMismatch("stored parameter names do not match the model layout".into()));
        }
        model.import_parameters(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }

    /// Like [`Self::model`], but first requires the stored config to equal `expected`.
    pub fn model_for(&self, expected: &ModelConfig) -> Result<TcinnModel<T>> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {}, expected {}",
                describe(&self.config),
                describe(expected)
            )));
        }
        self.model()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::header(KIND_CHECKPOINT, T::DTYPE);
        w.bytes(TAG);
        w.u32(self.version);
        w.blob(config_text(&self.config).as_bytes())?;
        w.u32(u32::try_from(self.epoch).map_err(|_| Error::invalid("epoch exceeds u32"))?);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        let (m, v) = self.optimizer.moments();
        if m.len() != self.params.len() {
            return Err(Error::invalid("optimizer state does not match parameter count"));
        }
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.blob(name.as_bytes())?;
            w.dims(t.shape())?;
            w.values(t.data());
        }
        w.u64(self.optimizer.step_count());
        for t in m.iter().chain(v) {
            w.values(t.data());
        }
        Ok(w.finish())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (kind, dtype, body) = open_record(bytes)?;
        if kind != KIND_CHECKPOINT {
            return Err(Error::Payload(format!("record kind {kind} is not a checkpoint")));
        }
        if dtype != T::DTYPE {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint stores {} parameters, {} requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let mut r = ByteReader::new(body);
        if r.take(4)? != TAG {
            return Err(Error::Payload("missing checkpoint tag".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let text = std::str::from_utf8(r.blob()?).map_err(|_| Error::Payload("config is not UTF-8".into()))?;
        let config = parse_config(text)?;
        let epoch = r.u32()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = r.u64()? as u128 | (r.u64()? as u128) << 64;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = String::from_utf8(r.blob()?.to_vec()).map_err(|_| Error::Payload("parameter name is not UTF-8".into()))?;
            let dims = r.dims()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Payload("element count overflow".into()))?;
            let values = r.values(n)?;
            let t = Tensor::new(dims, values).map_err(|e| Error::Payload(format!("parameter {name}: {e}")))?;
            params.push((name, t));
        }
        let step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * count);
        for i in 0..2 * count {
            let shape = params[i % count].1.shape().to_vec();
            let n = params[i % count].1.numel();
            moments.push(Tensor::new(shape, r.values(n)?)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Payload(format!("{} trailing bytes in checkpoint", r.remaining())));
        }
        let second = moments.split_off(count);
        let optimizer = AdamState {
            step,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            first: moments,
            second,
        };
        Ok(Self {
            version,
            config,
            epoch,
            params,
            optimizer,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn save_checkpoint<T: Real>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    Checkpoint::load(path)
}

/// Precision of a checkpoint file, after verifying its checksum.
pub fn checkpoint_dtype(path: impl AsRef<Path>) -> Result<DType> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, dtype, _) = open_record(&bytes)?;
    if kind != KIND_CHECKPOINT {
        return Err(Error::Payload(format!("record kind {kind} is not a checkpoint")));
    }
    Ok(dtype)
}

fn config_text(cfg: &ModelConfig) -> String {
    cfg.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_config(text: &str) -> Result<ModelConfig> {
    let pairs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::Payload(format!("bad config line {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ModelConfig::from_pairs(pairs)
}

fn describe(cfg: &ModelConfig) -> String {
    cfg.to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}
