use super::dense::{BoundDense, DenseBlock};
use super::Binder;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Enhanced affine coupling with conditioners `s`, `t` (first part to
/// second part) and `r` (second part to first part).
///
/// Forward, with `(m1, m2)` the channel split of the input:
///
/// ```text
/// n1 = m1 + r(m2)
/// n2 = m2 * exp(clamp(s(n1))) + t(n1)
/// ```
///
/// `s` and `t` see `n1` rather than `m1`; that is what lets the inverse
/// recover `m2` from `n1` alone before undoing the `r` update.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling<T> {
    split: usize,
    clamp: f64,
    s: DenseBlock<T>,
    t: DenseBlock<T>,
    r: DenseBlock<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct BoundCoupling {
    s: BoundDense,
    t: BoundDense,
    r: BoundDense,
}

/// `alpha * (2 / pi) * atan(x / alpha)` on a plain tensor.
pub fn soft_clamp<T: Real>(x: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.soft_clamp(v, alpha)?;
    Ok(tape.into_value(out))
}

impl<T: Real> Coupling<T> {
    pub fn new(split: usize, clamp: f64, s: DenseBlock<T>, t: DenseBlock<T>, r: DenseBlock<T>) -> Result<Self> {
        if split == 0 {
            return Err(Error::invalid("coupling split index must be at least 1"));
        }
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(Error::invalid(format!("clamp bound {clamp} must be positive")));
        }
        let rest = s.out_channels();
        let ok = s.in_channels() == split
            && t.in_channels() == split
            && t.out_channels() == rest
            && r.in_channels() == rest
            && r.out_channels() == split;
        if !ok {
            return Err(Error::shape(
                "coupling",
                format!(
                    "conditioners inconsistent with split {split}: s {}->{}, t {}->{}, r {}->{}",
                    s.in_channels(),
                    s.out_channels(),
                    t.in_channels(),
                    t.out_channels(),
                    r.in_channels(),
                    r.out_channels()
                ),
            ));
        }
        Ok(Self { split, clamp, s, t, r })
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn channels(&self) -> usize {
        self.split + self.s.out_channels()
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn s(&self) -> &DenseBlock<T> {
        &self.s
    }

    pub fn t(&self) -> &DenseBlock<T> {
        &self.t
    }

    pub fn r(&self) -> &DenseBlock<T> {
        &self.r
    }

    pub(crate) fn conditioners_mut(&mut self) -> [&mut DenseBlock<T>; 3] {
        [&mut self.s, &mut self.t, &mut self.r]
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.s.collect(&format!("{prefix}.s"), out);
        self.t.collect(&format!("{prefix}.t"), out);
        self.r.collect(&format!("{prefix}.r"), out);
    }

    pub(crate) fn load(&mut self, values: &mut dyn Iterator<Item = Tensor<T>>) -> Result<()> {
        self.s.load(values)?;
        self.t.load(values)?;
        self.r.load(values)
    }

    pub(crate) fn bind(&self, binder: &mut Binder<'_, T>) -> Result<BoundCoupling> {
        Ok(BoundCoupling {
            s: self.s.bind(binder)?,
            t: self.t.bind(binder)?,
            r: self.r.bind(binder)?,
        })
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (_, c, _, _) = tape.value(x).dims4()?;
        if c != self.channels() {
            return Err(Error::shape(
                "coupling",
                format!("layer has {} channels, input has {c}", self.channels()),
            ));
        }
        Ok(())
    }

    fn check_finite(&self, tape: &Tape<T>, out: Var, dir: &str) -> Result<()> {
        if !tape.value(out).all_finite() {
            return Err(Error::NonFinite(format!(
                "coupling {dir} output (clamp bound {}); reduce the clamp or the learning rate",
                self.clamp
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_graph(&self, tape: &mut Tape<T>, p: &BoundCoupling, m: Var) -> Result<Var> {
        self.check_input(tape, m)?;
        let (m1, m2) = tape.channel_split(m, self.split)?;
        let r = self.r.apply_graph(tape, &p.r, m2)?;
        let n1 = tape.add(m1, r)?;
        let s_raw = self.s.apply_graph(tape, &p.s, n1)?;
        let s = tape.soft_clamp(s_raw, self.clamp)?;
        let scale = tape.exp(s);
        let shift = self.t.apply_graph(tape, &p.t, n1)?;
        let scaled = tape.hadamard(m2, scale)?;
        let n2 = tape.add(scaled, shift)?;
        let n = tape.channel_concat(n1, n2)?;
        self.check_finite(tape, n, "forward")?;
        Ok(n)
    }

    pub(crate) fn inverse_graph(&self, tape: &mut Tape<T>, p: &BoundCoupling, n: Var) -> Result<Var> {
        self.check_input(tape, n)?;
        let (n1, n2) = tape.channel_split(n, self.split)?;
        let s_raw = self.s.apply_graph(tape, &p.s, n1)?;
        let s = tape.soft_clamp(s_raw, self.clamp)?;
        let neg_s = tape.scale(s, -1.0);
        let inv_scale = tape.exp(neg_s);
        let shift = self.t.apply_graph(tape, &p.t, n1)?;
        let centered = tape.sub(n2, shift)?;
        let m2 = tape.hadamard(centered, inv_scale)?;
        let r = self.r.apply_graph(tape, &p.r, m2)?;
        let m1 = tape.sub(n1, r)?;
        let m = tape.channel_concat(m1, m2)?;
        self.check_finite(tape, m, "inverse")?;
        Ok(m)
    }

    fn eval(&self, x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut binder = Binder::constants(&mut tape);
        let bound = self.bind(&mut binder)?;
        let v = tape.constant(x.clone());
        let out = if inverse {
            self.inverse_graph(&mut tape, &bound, v)?
        } else {
            self.forward_graph(&mut tape, &bound, v)?
        };
        Ok(tape.into_value(out))
    }

    pub fn forward(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(m, false)
    }

    pub fn inverse(&self, n: &Tensor<T>) -> Result<Tensor<T>> {
        self.eval(n, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_coupling(c: usize, seed: u64, std: f64) -> Coupling<f64> {
        let d = c / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = DenseBlock::init(d, c - d, 3, 4, std, &mut rng).unwrap();
        let t = DenseBlock::init(d, c - d, 3, 4, std, &mut rng).unwrap();
        let r = DenseBlock::init(c - d, d, 3, 4, std, &mut rng).unwrap();
        Coupling::new(d, 2.0, s, t, r).unwrap()
    }

    #[test]
    fn soft_clamp_examples() {
        let x = Tensor::<f64>::from_f64(vec![3], &[0.0, 2.0, 1e12]).unwrap();
        let y = soft_clamp(&x, 2.0).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!(y.data()[2] < 2.0 && y.data()[2] > 1.999_999);
        assert!(soft_clamp(&x, 0.0).is_err());
    }

    #[test]
    fn zero_conditioners_are_identity() {
        let layer = random_coupling(3, 5, 0.0);
        let x = Tensor::new(vec![2, 3, 4, 4], (0..96).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        assert_eq!(layer.forward(&x).unwrap(), x);
        assert_eq!(layer.inverse(&x).unwrap(), x);
    }

    #[test]
    fn round_trip_random_parameters() {
        for c in [2, 3, 6] {
            let layer = random_coupling(c, 9 + c as u64, 0.5);
            let x = Tensor::new(vec![2, c, 5, 5], (0..50 * c).map(|i| ((i * 37 % 101) as f64) / 101.0).collect())
                .unwrap();
            let y = layer.forward(&x).unwrap();
            assert!(y.max_abs_diff(&x).unwrap() > 1e-3, "layer should not be trivial");
            let back = layer.inverse(&y).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
            let fwd_of_inv = layer.forward(&layer.inverse(&x).unwrap()).unwrap();
            assert!(fwd_of_inv.max_abs_diff(&x).unwrap() < 1e-10);
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let layer = random_coupling(3, 1, 0.0);
        let x = Tensor::zeros(vec![1, 4, 4, 4]).unwrap();
        assert!(matches!(layer.forward(&x), Err(Error::Shape { .. })));
    }
}
