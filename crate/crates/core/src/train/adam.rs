use crate::autodiff::{GradientMap, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub(crate) step: u64,
    pub(crate) names: Vec<String>,
    pub(crate) first: Vec<Tensor<T>>,
    pub(crate) second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        let mut names = Vec::new();
        let mut first = Vec::new();
        for (name, t) in params {
            names.push(name);
            first.push(t.zeros_like());
        }
        let second = first.clone();
        Self {
            step: 0,
            names,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// One bias-corrected Adam update of `params`, where `params[i]` is the
    /// tensor whose gradient is stored under `ParamId(i)`. Nothing is changed
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &GradientMap<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        let mut ordered = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let g = grads
                .get(ParamId(i))
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter {}", self.names[i])))?;
            p.expect_same_shape(g, "adam_step")?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {}", self.names[i])));
            }
            ordered.push(g);
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
        let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
        let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(ordered)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
