use std::fs;
use std::path::{Path, PathBuf};

use super::container::read_tensor_file;
use super::preprocess::ScaleRecord;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub target: PathBuf,
    pub mask: Option<PathBuf>,
}

/// Paired image listing. Paths are stored as written and resolved against
/// the directory holding the manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// One loaded pair, images shaped `1 x H x W`.
#[derive(Clone, Debug)]
pub struct ImagePair<T> {
    pub index: usize,
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    pub source_scale: ScaleRecord,
    pub target_scale: ScaleRecord,
    pub mask: Option<Tensor<T>>,
}

/// Accepts `[h, w]`, `[1, h, w]` or `[1, 1, h, w]` and returns `[1, h, w]`.
pub fn as_single_plane<T: Real>(t: Tensor<T>, path: &Path) -> Result<Tensor<T>> {
    let shape = t.shape().to_vec();
    match shape.as_slice() {
        &[h, w] | &[1, h, w] | &[1, 1, h, w] => t.reshape(vec![1, h, w]),
        other => Err(Error::shape(
            "load_image",
            format!("{}: expected a single H x W plane, got {other:?}", path.display()),
        )),
    }
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let entry = match fields.as_slice() {
                [s, t] => ManifestEntry {
                    source: s.into(),
                    target: t.into(),
                    mask: None,
                },
                [s, t, m] => ManifestEntry {
                    source: s.into(),
                    target: t.into(),
                    mask: Some(m.into()),
                },
                _ => {
                    return Err(Error::Parse(format!(
                        "manifest line {}: expected `source,target[,mask]`",
                        lineno + 1
                    )))
                }
            };
            entries.push(entry);
        }
        Ok(Self::new(root, entries))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# source,target[,mask]\n");
        for e in &self.entries {
            out.push_str(&e.source.to_string_lossy());
            out.push(',');
            out.push_str(&e.target.to_string_lossy());
            if let Some(m) = &e.mask {
                out.push(',');
                out.push_str(&m.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn load_image<T: Real>(&self, p: &Path) -> Result<(Tensor<T>, ScaleRecord)> {
        let path = self.resolve(p);
        let t = as_single_plane(read_tensor_file(&path)?.into_real::<T>(), &path)?;
        let sidecar = ScaleRecord::sidecar_path(&path);
        let scale = if sidecar.exists() {
            ScaleRecord::read_sidecar(&path)?
        } else {
            ScaleRecord::unit()
        };
        Ok((t, scale))
    }

    /// Loads one entry. Missing scale sidecars default to the unit range.
    pub fn load_pair<T: Real>(&self, index: usize) -> Result<ImagePair<T>> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("manifest has no entry {index}")))?;
        let (source, source_scale) = self.load_image(&e.source)?;
        let (target, target_scale) = self.load_image(&e.target)?;
        if source.shape() != target.shape() {
            return Err(Error::shape(
                "manifest",
                format!("pair {index}: source {:?} vs target {:?}", source.shape(), target.shape()),
            ));
        }
        let mask = match &e.mask {
            Some(m) => {
                let path = self.resolve(m);
                let mask = as_single_plane(read_tensor_file(&path)?.into_real::<T>(), &path)?;
                if mask.shape() != source.shape() {
                    return Err(Error::shape("manifest", format!("pair {index}: mask shape {:?}", mask.shape())));
                }
                Some(mask)
            }
            None => None,
        };
        Ok(ImagePair {
            index,
            source,
            target,
            source_scale,
            target_scale,
            mask,
        })
    }

    /// Loads every pair, requiring one common `H x W`.
    pub fn load_all<T: Real>(&self) -> Result<Vec<ImagePair<T>>> {
        if self.is_empty() {
            return Err(Error::invalid("manifest lists no pairs"));
        }
        let pairs: Vec<ImagePair<T>> = (0..self.len()).map(|i| self.load_pair(i)).collect::<Result<_>>()?;
        let shape = pairs[0].source.shape().to_vec();
        if let Some(bad) = pairs.iter().find(|p| p.source.shape() != shape.as_slice()) {
            return Err(Error::shape(
                "manifest",
                format!("pair {} has shape {:?}, pair 0 has {shape:?}", bad.index, bad.source.shape()),
            ));
        }
        Ok(pairs)
    }
}
