//! Deterministic synthetic source/target pairs with a known analytic map.
//!
//! Source images are a background level plus isotropic Gaussian blobs.
//! The target applies a spatially weighted pointwise map: a square root near
//! the image centre blending into a linear `0.8 x` towards the border.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::container::write_tensor_file;
use super::manifest::{DatasetManifest, ManifestEntry};
use super::preprocess::ScaleRecord;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    pub size: usize,
    pub pairs: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub background: f64,
    pub dtype: DType,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            pairs: 100,
            min_blobs: 3,
            max_blobs: 8,
            background: 0.05,
            dtype: DType::F32,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::invalid(format!("phantom size must be at least 16, got {}", self.size)));
        }
        if self.pairs == 0 {
            return Err(Error::invalid("phantom pair count must be at least 1"));
        }
        if self.min_blobs > self.max_blobs {
            return Err(Error::invalid("phantom blob range is empty"));
        }
        Ok(())
    }
}

/// Spatial weight `M(p) = exp(-|p - c|^2 / (2 sigma^2))`, `sigma = size / 6`,
/// `c` the image centre.
pub fn modulation(size: usize, row: usize, col: usize) -> f64 {
    let c = (size as f64 - 1.0) / 2.0;
    let sigma = size as f64 / 6.0;
    let d2 = (row as f64 - c).powi(2) + (col as f64 - c).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// The analytic source-to-target map at one pixel.
pub fn target_value(x: f64, weight: f64) -> f64 {
    weight * x.sqrt() + (1.0 - weight) * 0.8 * x
}

/// Applies [`target_value`] with [`modulation`] over a square image.
pub fn target_from_source(source: &[f64], size: usize) -> Vec<f64> {
    source
        .iter()
        .enumerate()
        .map(|(i, &x)| target_value(x, modulation(size, i / size, i % size)))
        .collect()
}

/// Source and target of pair `index` as `size x size` row-major planes.
/// Each pair draws from its own stream, so the result does not depend on
/// which other pairs are generated.
pub fn phantom_pair(cfg: &PhantomConfig, index: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = cfg.size;
    let h = n as f64;
    let blobs = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    let specs: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let cy = rng.random_range(0.0..h);
            let cx = rng.random_range(0.0..h);
            let sigma = rng.random_range(h / 16.0..=h / 8.0);
            let amp = rng.random_range(0.3..=0.9);
            (cy, cx, sigma, amp)
        })
        .collect();
    let mut source = vec![cfg.background; n * n];
    for (i, v) in source.iter_mut().enumerate() {
        let (r, c) = ((i / n) as f64, (i % n) as f64);
        for &(cy, cx, sigma, amp) in &specs {
            *v += amp * (-((r - cy).powi(2) + (c - cx).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
        *v = v.clamp(0.0, 1.0);
    }
    let target = target_from_source(&source, n);
    (source, target)
}

fn write_plane<T: Real>(values: &[f64], size: usize, path: &Path) -> Result<()> {
    let t = Tensor::<T>::from_f64(vec![1, size, size], values)?;
    write_tensor_file(&t, path)?;
    ScaleRecord::unit().write_sidecar(path)
}

/// Writes `source_NNNN.tcit`, `target_NNNN.tcit` (with unit-range scale
/// sidecars) and `manifest.csv` into `out_dir`. Returns the manifest.
pub fn generate_phantom_dataset(cfg: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(cfg.pairs);
    for i in 0..cfg.pairs {
        let (x, y) = phantom_pair(cfg, i);
        let source = PathBuf::from(format!("source_{i:04}.tcit"));
        let target = PathBuf::from(format!("target_{i:04}.tcit"));
        for (vals, name) in [(&x, &source), (&y, &target)] {
            let path = out_dir.join(name);
            match cfg.dtype {
                DType::F32 => write_plane::<f32>(vals, cfg.size, &path)?,
                DType::F64 => write_plane::<f64>(vals, cfg.size, &path)?,
            }
        }
        entries.push(ManifestEntry {
            source,
            target,
            mask: None,
        });
    }
    let manifest = DatasetManifest::new(out_dir, entries);
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Path of the manifest written by [`generate_phantom_dataset`].
pub fn manifest_path(out_dir: impl AsRef<Path>) -> PathBuf {
    out_dir.as_ref().join("manifest.csv")
}
