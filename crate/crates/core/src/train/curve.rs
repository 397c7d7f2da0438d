use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::decimal;

pub const LOSS_HEADER: &str = "epoch,loss_total,loss_forward,loss_inverse,lr";

/// Means over one epoch's batches. `epoch` counts from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub forward: f64,
    pub inverse: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    records: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Appends a record; epochs must strictly increase.
    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "epoch {} does not follow epoch {}",
                    rec.epoch, last.epoch
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOSS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                decimal(r.total, 12),
                decimal(r.forward, 12),
                decimal(r.inverse, 12),
                decimal(r.lr, 12)
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(LOSS_HEADER) {
            return Err(Error::Parse(format!("loss curve must start with `{LOSS_HEADER}`")));
        }
        let mut curve = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse(format!("loss curve row {}: {line:?}", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            curve.push(EpochRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                total: num(f[1])?,
                forward: num(f[2])?,
                inverse: num(f[3])?,
                lr: num(f[4])?,
            })?;
        }
        Ok(curve)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_ordering() {
        let mut c = LossCurve::new();
        let rec = |epoch, total| EpochRecord {
            epoch,
            total,
            forward: total / 2.0,
            inverse: total / 2.0,
            lr: 1e-4,
        };
        c.push(rec(1, 0.0123456789012)).unwrap();
        c.push(rec(2, 0.00345)).unwrap();
        assert!(c.push(rec(2, 0.1)).is_err());
        let text = c.to_csv();
        assert!(text.starts_with("epoch,loss_total,loss_forward,loss_inverse,lr\n1,0.0123456789012,"));
        let back = LossCurve::parse_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.records()[1].lr, 1e-4);
        assert!((back.records()[0].total - 0.0123456789012).abs() < 1e-15);
        assert!(LossCurve::parse_csv("epoch,loss\n").is_err());
    }
}
