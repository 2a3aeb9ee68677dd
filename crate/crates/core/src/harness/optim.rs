use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam with bias correction and global-norm clipping. Moments are stored
/// per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// Replaces optimizer state, checking shapes against the current moments.
    pub fn set_state(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, steps: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid("optimizer state does not match the parameter count"));
        }
        for (new, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if new.shape() != old.shape() {
                return Err(Error::shape("optimizer state", new.shape(), old.shape()));
            }
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }

    /// Applies one update from the gradients accumulated in `store`, each
    /// multiplied by `grad_scale` first.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: f64) -> Result<StepReport> {
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer was created for a different parameter store"));
        }
        // Rescaling by the largest entry keeps the sum of squares from overflowing.
        let grads = || store.iter().flat_map(|(_, p)| p.grad().data().iter().map(|g| g.as_f64() * grad_scale));
        let peak = grads().fold(0.0, |m: f64, g| m.max(g.abs()));
        let grad_norm = if peak > 0.0 && peak.is_finite() {
            peak * grads().map(|g| (g / peak).powi(2)).sum::<f64>().sqrt()
        } else {
            peak
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let mut scale = grad_scale;
        let clipped = matches!(self.config.clip_norm, Some(c) if grad_norm > c);
        if let (true, Some(c)) = (clipped, self.config.clip_norm) {
            log::info!("step {}: clipping gradient norm {grad_norm:.4} to {c}", self.steps + 1);
            scale *= c / grad_norm;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2, s) = (T::lit(beta1), T::lit(beta2), T::lit(scale));
        let (one, step_size, eps) = (T::one(), T::lit(lr / c1), T::lit(eps));
        let c2_sqrt = T::lit(c2.sqrt());
        for ((param, m), v) in store.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let (value, grad) = param.value_and_grad_mut();
            let iter = value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &g), (m, v)) in iter {
                let g = g * s;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(StepReport { grad_norm, clipped })
    }
}
