use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Cosine annealing from `lr_init` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_init: 2e-4,
            lr_min: 1e-6,
            total_steps: 400_000,
        }
    }
}

/// Learning rate at `step`; steps past the end clamp to `lr_min`.
pub fn cosine_lr(step: usize, sched: &LrSchedule) -> f64 {
    if sched.total_steps == 0 {
        return sched.lr_init;
    }
    let s = step.min(sched.total_steps) as f64 / sched.total_steps as f64;
    sched.lr_min + 0.5 * (sched.lr_init - sched.lr_min) * (1.0 + (std::f64::consts::PI * s).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments, one array per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.tensor.len()])
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moment arrays, store has {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (i, (_, p)) in store.iter().enumerate() {
            if self.m[i].len() != p.tensor.len() || self.v[i].len() != p.tensor.len() {
                return Err(Error::Shape(format!(
                    "optimizer moments for `{}` have {} entries, parameter has {}",
                    p.name,
                    self.m[i].len(),
                    p.tensor.len()
                )));
            }
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            state: OptimizerState::for_store(store),
        }
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        self.state.check(store)?;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
        let (ib1, ib2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64c(1.0 - lr * c.weight_decay);
        let step_size = T::from_f64c(lr / bc1);
        let inv_bc2_sqrt = T::from_f64c(1.0 / bc2.sqrt());
        let eps = T::from_f64c(c.eps);
        for (i, p) in store.iter_mut().enumerate() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let grad = p.grad.data();
            let theta = p.tensor.data_mut();
            for j in 0..theta.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + ib1 * g;
                v[j] = b2 * v[j] + ib2 * g * g;
                let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
                theta[j] = theta[j] * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
