use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adaptive first/second moment optimizer with bias correction.
///
/// Moment updates run in f64 per element in a fixed order, so two runs
/// with identical gradients produce identical parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let m = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self { cfg, v: m.clone(), m, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update. Returns the (pre-clip) global gradient norm.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("optimizer_step"));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.f64() * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gv;
                v[j] = b2 * v[j] + (1.0 - b2) * gv * gv;
                let upd = self.cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                let nv = pv.f64() - upd;
                if !nv.is_finite() {
                    return Err(Error::NonFinite("optimizer_step"));
                }
                *pv = T::lit(nv);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f64>) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let n = v.len();
        ps.add("p", Tensor::new(vec![n], v).unwrap());
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = one_param(vec![0.5, -1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        for _ in 0..10 {
            opt.step(&mut ps, &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(ps.tensor(0).data(), &[0.5, -1.0]);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn constant_gradient_step_approaches_learning_rate() {
        let mut ps = one_param(vec![0.0]);
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(cfg, &ps);
        let g = Tensor::new(vec![1], vec![0.37]).unwrap();
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = ps.tensor(0).data()[0];
            opt.step(&mut ps, std::slice::from_ref(&g)).unwrap();
            last = before - ps.tensor(0).data()[0];
        }
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = cfg.lr * 0.37 / (0.37 + cfg.eps);
        assert!((last - expected).abs() < 1e-12, "{last} vs {expected}");
    }

    #[test]
    fn rejects_shape_mismatch_and_nan() {
        let mut ps = one_param(vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        assert!(opt.step(&mut ps, &[Tensor::zeros(&[3])]).is_err());
        let nan = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(opt.step(&mut ps, &[nan]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut a = one_param(vec![0.0]);
        let mut b = one_param(vec![0.0]);
        let mut oa = Adam::new(AdamConfig { clip_norm: Some(1.0), ..Default::default() }, &a);
        let mut ob = Adam::new(AdamConfig::default(), &b);
        oa.step(&mut a, &[Tensor::new(vec![1], vec![100.0]).unwrap()]).unwrap();
        ob.step(&mut b, &[Tensor::new(vec![1], vec![1.0]).unwrap()]).unwrap();
        assert_eq!(a.tensor(0).data(), b.tensor(0).data());
    }
}
