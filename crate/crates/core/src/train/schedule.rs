use crate::error::{Error, Result};

/// Step-halving learning rate: `initial * 0.5^floor(epoch / period)`.
pub fn lr_at_epoch(epoch: usize, epochs: usize, initial: f64, period: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::invalid(format!("epoch {epoch} outside 0..{epochs}")));
    }
    if period == 0 {
        return Err(Error::invalid("halving period must be at least 1"));
    }
    let halvings = (epoch / period).min(i32::MAX as usize) as i32;
    Ok(initial * 0.5f64.powi(halvings))
}
