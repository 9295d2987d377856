use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamStore};
use super::tensor::Matrix;

/// `base · min(step / warmup, √(warmup / step))`; equals `base` at `step == warmup`.
pub fn inverse_sqrt_lr(base: f64, warmup: u64, step: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    if warmup == 0 {
        return base;
    }
    let (s, w) = (step as f64, warmup as f64);
    base * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            warmup: 8000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.values.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        inverse_sqrt_lr(self.config.lr, self.config.warmup, self.step)
    }

    /// Advances one step and applies `grads` to `params`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let lr = self.current_lr();
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.0.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i);
            match g {
                Some(g) => {
                    for k in 0..p.data.len() {
                        let gk = g.data[k] * clip;
                        m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                        v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                        let mh = m.data[k] / bc1;
                        let vh = v.data[k] / bc2;
                        p.data[k] -= lr * mh / (vh.sqrt() + c.eps);
                    }
                }
                None => {
                    // treated as a zero gradient
                    for k in 0..p.data.len() {
                        m.data[k] *= c.beta1;
                        v.data[k] *= c.beta2;
                        if m.data[k] != 0.0 {
                            p.data[k] -= lr * (m.data[k] / bc1) / ((v.data[k] / bc2).sqrt() + c.eps);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup() {
        assert_eq!(inverse_sqrt_lr(5e-4, 8000, 8000), 5e-4);
        assert!((inverse_sqrt_lr(5e-4, 8000, 4000) - 2.5e-4).abs() < 1e-18);
        assert!((inverse_sqrt_lr(5e-4, 8000, 32000) - 2.5e-4).abs() < 1e-18);
        assert_eq!(inverse_sqrt_lr(1.0, 10, 0), 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::default();
        ps.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let cfg = AdamConfig {
            lr: 0.1,
            warmup: 1,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &ps);
        for _ in 0..2000 {
            let g = ps.get(0).data.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut ps, &Gradients(vec![Some(Matrix::from_vec(1, 2, g))]));
        }
        assert!(ps.get(0).data.iter().all(|x| x.abs() < 1e-2), "{:?}", ps.get(0));
    }
}
