//! First-order optimizers over flat parameter vectors.

use crate::checkpoint::{real_data, real_vec, ArrayData, Checkpoint, Persist};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Adam,
    /// Adam with variance rectification for the first steps.
    RAdam,
}

/// Moment estimates for Adam-family updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T: Real> {
    pub rule: Rule,
    pub hp: AdamParams,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(rule: Rule, hp: AdamParams, n: usize) -> Self {
        Optimizer { rule, hp, step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn adam(n: usize) -> Self {
        Self::new(Rule::Adam, AdamParams::default(), n)
    }

    pub fn radam(n: usize) -> Self {
        Self::new(Rule::RAdam, AdamParams::default(), n)
    }

    /// One update of `params` in place with learning rate `lr`.
    pub fn update(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let t = self.step as f64;
        let AdamParams { beta1, beta2, eps } = self.hp;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        // Rectification factor, or None while the variance estimate is unreliable.
        let rect = match self.rule {
            Rule::Adam => Some(1.0),
            Rule::RAdam => {
                let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                let rho = rho_inf - 2.0 * t * beta2.powf(t) / bc2;
                (rho > 5.0).then(|| {
                    ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
                })
            }
        };
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_m = T::of(lr / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let e = T::of(eps);
        match rect {
            Some(r) => {
                let s = step_m * T::of(r);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + c1 * g;
                    self.v[i] = b2 * self.v[i] + c2 * g * g;
                    params[i] -= s * self.m[i] * sqrt_bc2 / (self.v[i].sqrt() + e * sqrt_bc2);
                }
            }
            None => {
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = b1 * self.m[i] + c1 * g;
                    self.v[i] = b2 * self.v[i] + c2 * g * g;
                    params[i] -= step_m * self.m[i];
                }
            }
        }
    }
}

/// Scales `grad` so its L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grad: &mut [T], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `lr(i) = start · (end/start)^(i/(n-1))`, exponential decay over `n` steps.
pub fn exp_decay(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let f = step.min(total - 1) as f64 / (total - 1) as f64;
    start * (end / start).powf(f)
}

impl<T: Real> Persist for Optimizer<T> {
    fn write_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(format!("{prefix}rule"), if self.rule == Rule::Adam { "adam" } else { "radam" });
        ckpt.set_meta(format!("{prefix}hp"), format!("{} {} {}", self.hp.beta1, self.hp.beta2, self.hp.eps));
        ckpt.put(format!("{prefix}step"), vec![1], ArrayData::U64(vec![self.step]));
        ckpt.put(format!("{prefix}m"), vec![self.m.len()], real_data(&self.m));
        ckpt.put(format!("{prefix}v"), vec![self.v.len()], real_data(&self.v));
    }

    fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let rule = match ckpt.meta(&format!("{prefix}rule"))? {
            "adam" => Rule::Adam,
            "radam" => Rule::RAdam,
            other => return Err(Error::validation(format!("unknown optimizer rule {other:?}"))),
        };
        let hp: Vec<f64> = ckpt
            .meta(&format!("{prefix}hp"))?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::validation(e.to_string())))
            .collect::<Result<_>>()?;
        if hp.len() != 3 {
            return Err(Error::validation("optimizer hyperparameters malformed"));
        }
        let step = ckpt.get_u64(&format!("{prefix}step"))?;
        let m = real_vec(ckpt.get(&format!("{prefix}m"))?)?;
        let v = real_vec(ckpt.get(&format!("{prefix}v"))?)?;
        if m.len() != v.len() || step.len() != 1 {
            return Err(Error::validation("optimizer state shapes disagree"));
        }
        Ok(Optimizer { rule, hp: AdamParams { beta1: hp[0], beta2: hp[1], eps: hp[2] }, step: step[0], m, v })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_endpoints() {
        assert_eq!(exp_decay(5e-4, 5e-5, 0, 2000), 5e-4);
        assert!((exp_decay(5e-4, 5e-5, 1999, 2000) - 5e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let lr = exp_decay(5e-4, 5e-5, i, 2000);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        for rule in [Rule::Adam, Rule::RAdam] {
            let mut x = vec![3.0f64, -2.0];
            let mut opt = Optimizer::new(rule, AdamParams::default(), 2);
            for _ in 0..3000 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                opt.update(&mut x, &g, 1e-2);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{rule:?} {x:?}");
        }
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let mut x = vec![1.0f64];
        let mut opt = Optimizer::adam(1);
        opt.update(&mut x, &[0.5], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6);
    }
}
