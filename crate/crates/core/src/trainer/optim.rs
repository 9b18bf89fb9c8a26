use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            weight_decay: 0.1,
        }
    }
}

/// First/second moments for a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Decoupled decay `p -= lr·wd·p`, then the bias-corrected Adam update.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step<F: Real>(&mut self, params: &mut [&mut Tensor<F>], grads: &[Vec<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::dim(format!("tensor {k} changed size under the optimizer")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    site: format!("gradient of tensor {k}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                let mut x = w.as_f64();
                x -= lr * c.weight_decay * x;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w = F::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

/// Learning rate for `epoch` of a phase lasting `total` epochs. The first
/// and last epochs return `lr_start` and `lr_end` exactly.
pub fn lr_schedule(epoch: usize, total: usize, lr_start: f64, lr_end: f64, kind: ScheduleKind) -> Result<f64> {
    if epoch >= total {
        return Err(Error::contract(format!("epoch {epoch} outside 0..{total}")));
    }
    if epoch == 0 {
        return Ok(lr_start);
    }
    if epoch == total - 1 {
        return Ok(lr_end);
    }
    let frac = epoch as f64 / (total - 1) as f64;
    let w = match kind {
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        ScheduleKind::Linear => 1.0 - frac,
    };
    Ok(lr_end + (lr_start - lr_end) * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, [3]);
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap();
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, [1]);
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        opt.step(&mut [&mut p], &[vec![1.0]], 1e-3).unwrap();
        assert!((p.data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn quadratic_bowl_matches_reference_recurrence() {
        // reference values from an independent scalar implementation
        let mut opt = AdamW::new(AdamWConfig::default(), [2]);
        let mut w = Tensor::new(vec![2], vec![3.0f64, -2.0]).unwrap();
        for _ in 0..50 {
            let g: Vec<f64> = w.data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut [&mut w], &[g], 0.1).unwrap();
        }
        assert!((w.data()[0] - -0.17744966040637328).abs() < 1e-12);
        assert!((w.data()[1] - 0.0165861444024694).abs() < 1e-12);
        let norm = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 0.1 * 13f64.sqrt());
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut opt = AdamW::new(AdamWConfig::default(), [2]);
        let mut p = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        let r = opt.step(&mut [&mut p], &[vec![0.5, f32::NAN]], 1e-2);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            assert_eq!(lr_schedule(0, 100, 1e-4, 1e-5, kind).unwrap(), 1e-4);
            assert_eq!(lr_schedule(99, 100, 1e-4, 1e-5, kind).unwrap(), 1e-5);
            let mid = lr_schedule(50, 101, 1e-4, 1e-5, kind).unwrap();
            assert!((mid - 5.5e-5).abs() < 1e-12);
        }
        assert_eq!(lr_schedule(0, 1, 1e-4, 1e-5, ScheduleKind::Cosine).unwrap(), 1e-4);
        assert!(matches!(lr_schedule(100, 100, 1e-4, 1e-5, ScheduleKind::Cosine), Err(Error::Contract(_))));
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..30).map(|e| lr_schedule(e, 30, 1e-4, 1e-5, ScheduleKind::Cosine).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
