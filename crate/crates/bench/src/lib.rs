//! Fixtures shared by the benchmarks.

use tcinn::model::{ModelConfig, TcinnModel};
use tcinn::Tensor;

/// Deterministic values in `[0, 1]` with no repeating pattern.
pub fn image(shape: &[usize], seed: u32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n)
        .map(|i| (i as f32 * 0.618_034 + seed as f32 * 0.137).sin() * 0.5 + 0.5)
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape matches data")
}

/// Random non-identity model with the default dense blocks.
pub fn model(channels: usize, blocks: usize) -> TcinnModel<f32> {
    let mut cfg = ModelConfig::new(channels);
    cfg.blocks = blocks;
    let mut m = TcinnModel::init(cfg, 7).expect("valid config");
    m.randomize_output_layers(8, 0.25).expect("model has blocks");
    m
}
