use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing was touched.
    SkippedNonFinite,
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

impl AdamW {
    pub fn step(
        &self,
        params: &mut ParamStore,
        grads: &[Vec<f64>],
        state: &mut AdamState,
    ) -> Result<StepOutcome> {
        if grads.len() != params.len() || state.m.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} grads / {} state for {} params",
                    grads.len(),
                    state.m.len(),
                    params.len()
                ),
            ));
        }
        for (g, t) in grads.iter().zip(params.tensors()) {
            if g.len() != t.numel() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("grad of length {} for tensor {:?}", g.len(), t.shape()),
                ));
            }
        }
        if grads.iter().flatten().any(|x| !x.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = store(&[1.0, -2.0]);
        let opt = AdamW::default();
        let mut st = AdamState::new(&p);
        opt.step(&mut p, &[vec![0.0, 0.0]], &mut st).unwrap();
        let d = p.get("p").unwrap().data();
        let decay = 1.0 - opt.lr * opt.weight_decay;
        assert_eq!(d, &[decay, -2.0 * decay]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut p = store(&[0.0]);
        let opt = AdamW {
            weight_decay: 0.0,
            lr: 1e-3,
            ..AdamW::default()
        };
        let mut st = AdamState::new(&p);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..5000 {
            opt.step(&mut p, &[vec![0.37]], &mut st).unwrap();
            let now = p.get("p").unwrap().data()[0];
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - opt.lr).abs() < 1e-3 * opt.lr, "{last_step}");
    }

    #[test]
    fn nan_gradient_is_skipped() {
        let mut p = store(&[1.0]);
        let mut st = AdamState::new(&p);
        let out = AdamW::default()
            .step(&mut p, &[vec![f64::NAN]], &mut st)
            .unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p.get("p").unwrap().data(), &[1.0]);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = store(&[0.3, -0.1, 2.0]);
            let mut st = AdamState::new(&p);
            let opt = AdamW {
                lr: 1e-2,
                ..AdamW::default()
            };
            for i in 0..100 {
                let x = p.get("p").unwrap().data().to_vec();
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v + (i as f64 * 0.1).sin()).collect();
                opt.step(&mut p, &[g], &mut st).unwrap();
            }
            p.get("p")
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0]];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-9);
    }
}
