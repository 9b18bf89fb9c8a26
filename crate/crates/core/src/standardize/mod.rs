//! Teacher-target standardization: per-token L2 normalization, and "PHI-S"
//! standardization (mean-centering, rotation into the covariance eigenbasis,
//! one isotropic scale, then a normalized Hadamard rotation). The eigenbasis
//! makes the fitted covariance diagonal; the Hadamard rotation then spreads
//! its trace evenly, so every output channel carries the same variance.
//!
//! States are fitted once on a frozen pre-pass over the training set and
//! applied to teacher targets only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchGrid;
use crate::linalg::symmetric_eigen;

pub const L2_EPS: f32 = 1e-8;
/// Floor on the fitted PHI-S scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StandardizerKind {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "phi-s")]
    PhiS,
}

impl StandardizerKind {
    pub fn label(self) -> &'static str {
        match self {
            StandardizerKind::L2 => "L2",
            StandardizerKind::PhiS => "PHI-S",
        }
    }
}

/// Fitted statistics. L2 states carry none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizerState {
    pub kind: StandardizerKind,
    /// Channel count of the raw teacher features.
    pub channels: usize,
    pub mean: Vec<f64>,
    /// Covariance eigenvectors as columns, `[channels, channels]` row-major.
    #[serde(default)]
    pub rotation: Vec<f64>,
    pub scale: f64,
    /// Power of two ≥ `channels`; zero-padding fills the difference.
    pub hadamard_dim: usize,
    pub pad: usize,
}

impl StandardizerState {
    pub fn l2(channels: usize) -> Self {
        Self {
            kind: StandardizerKind::L2,
            channels,
            mean: Vec::new(),
            rotation: Vec::new(),
            scale: 1.0,
            hadamard_dim: channels,
            pad: 0,
        }
    }

    /// Channel count after standardization.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            StandardizerKind::L2 => self.channels,
            StandardizerKind::PhiS => self.hadamard_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            StandardizerKind::L2 => {
                if !self.mean.is_empty() || !self.rotation.is_empty() {
                    return Err(Error::contract("L2 standardizer carries no fitted statistics"));
                }
            }
            StandardizerKind::PhiS => {
                if !self.hadamard_dim.is_power_of_two()
                    || self.hadamard_dim != self.channels + self.pad
                    || self.mean.len() != self.channels
                    || self.rotation.len() != self.channels * self.channels
                {
                    return Err(Error::dim(format!(
                        "PHI-S state: {} channels + {} pad vs hadamard dim {}",
                        self.channels, self.pad, self.hadamard_dim
                    )));
                }
                if !(self.scale > 0.0 && self.scale.is_finite()) {
                    return Err(Error::contract(format!("PHI-S scale {} must be positive", self.scale)));
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, g: &PatchGrid) -> Result<PatchGrid> {
        match self.kind {
            StandardizerKind::L2 => {
                if g.channels() != self.channels {
                    return Err(Error::dim(format!(
                        "standardizer fitted for {} channels, got {}",
                        self.channels,
                        g.channels()
                    )));
                }
                Ok(l2_normalize(g))
            }
            StandardizerKind::PhiS => phi_s_apply(g, self),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        state.validate()?;
        Ok(state)
    }
}

/// Sylvester Hadamard matrix, `[n, n]` row-major with ±1 entries.
pub fn hadamard(n: usize) -> Result<Vec<i32>> {
    if !n.is_power_of_two() {
        return Err(Error::dim(format!("hadamard order {n} is not a power of two")));
    }
    let mut h = vec![1i32];
    let mut size = 1;
    while size < n {
        let next = size * 2;
        let mut out = vec![0i32; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = h[i * size + j];
                out[i * next + j] = v;
                out[i * next + j + size] = v;
                out[(i + size) * next + j] = v;
                out[(i + size) * next + j + size] = -v;
            }
        }
        h = out;
        size = next;
    }
    Ok(h)
}

/// In-place `x ← H x` for the Sylvester-ordered Hadamard matrix.
pub fn fwht(x: &mut [f64]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(h * 2) {
            for i in block..block + h {
                let (a, b) = (x[i], x[i + h]);
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Scales every token to unit Euclidean norm; zero tokens stay zero.
pub fn l2_normalize(g: &PatchGrid) -> PatchGrid {
    let mut out = g.clone();
    for tok in out.tokens_mut() {
        let norm = tok.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let d = norm.max(L2_EPS);
        tok.iter_mut().for_each(|v| *v /= d);
    }
    out
}

/// Fits per-channel means, the covariance eigenbasis and a single isotropic
/// scale `sqrt(mean over channels of the per-channel variance)`.
pub fn phi_s_fit<'a>(samples: impl IntoIterator<Item = &'a PatchGrid>) -> Result<StandardizerState> {
    let mut channels = None;
    let mut count = 0usize;
    let mut sum: Vec<f64> = Vec::new();
    let mut grids = Vec::new();
    for g in samples {
        match channels {
            None => {
                channels = Some(g.channels());
                sum = vec![0.0; g.channels()];
            }
            Some(c) if c != g.channels() => {
                return Err(Error::dim(format!("PHI-S fit: {c} vs {} channels", g.channels())));
            }
            Some(_) => {}
        }
        for tok in g.tokens() {
            sum.iter_mut().zip(tok).for_each(|(s, &v)| *s += v as f64);
        }
        count += g.num_tokens();
        grids.push(g);
    }
    if count < 2 {
        return Err(Error::InsufficientData(format!("PHI-S fit needs at least 2 tokens, saw {count}")));
    }
    let c = channels.expect("count > 0 implies a grid");
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    // second pass keeps the covariance free of cancellation
    let mut cov = vec![0.0f64; c * c];
    let mut centered = vec![0.0f64; c];
    for g in grids {
        for tok in g.tokens() {
            centered.iter_mut().zip(tok).zip(&mean).for_each(|((d, &v), m)| *d = v as f64 - m);
            for i in 0..c {
                let di = centered[i];
                for (j, &dj) in centered.iter().enumerate().skip(i) {
                    cov[i * c + j] += di * dj;
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= count as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let mean_var = (0..c).map(|i| cov[i * c + i]).sum::<f64>() / c as f64;
    let (_, rotation) = symmetric_eigen(&cov, c);
    let hadamard_dim = c.next_power_of_two();
    Ok(StandardizerState {
        kind: StandardizerKind::PhiS,
        channels: c,
        mean,
        rotation,
        scale: mean_var.sqrt().max(SCALE_FLOOR),
        hadamard_dim,
        pad: hadamard_dim - c,
    })
}

/// Per token: subtract the mean, rotate into the fitted eigenbasis, divide by
/// the scale, zero-pad to the Hadamard order and rotate by `H/√n`. The map is
/// an isometry up to `1/scale`.
pub fn phi_s_apply(g: &PatchGrid, s: &StandardizerState) -> Result<PatchGrid> {
    if s.kind != StandardizerKind::PhiS {
        return Err(Error::contract("phi_s_apply needs a PHI-S state"));
    }
    s.validate()?;
    if g.channels() != s.channels {
        return Err(Error::dim(format!(
            "PHI-S state fitted for {} channels, got {}",
            s.channels,
            g.channels()
        )));
    }
    let n = s.hadamard_dim;
    let norm = 1.0 / ((n as f64).sqrt() * s.scale);
    let mut out = Vec::with_capacity(g.num_tokens() * n);
    let c = s.channels;
    let mut centered = vec![0.0f64; c];
    let mut buf = vec![0.0f64; n];
    for tok in g.tokens() {
        centered.iter_mut().zip(tok).zip(&s.mean).for_each(|((d, &v), m)| *d = v as f64 - m);
        buf.iter_mut().for_each(|b| *b = 0.0);
        for (i, &d) in centered.iter().enumerate() {
            let row = &s.rotation[i * c..(i + 1) * c];
            buf[..c].iter_mut().zip(row).for_each(|(b, &u)| *b += u * d);
        }
        fwht(&mut buf);
        out.extend(buf.iter().map(|&v| (v * norm) as f32));
    }
    PatchGrid::new(g.batch(), g.grid_h(), g.grid_w(), n, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn grid_of(tokens: &[Vec<f32>]) -> PatchGrid {
        let c = tokens[0].len();
        PatchGrid::new(1, 1, tokens.len(), c, tokens.concat()).unwrap()
    }

    /// Independent channels with the given means and standard deviations.
    fn anisotropic(n: usize, means: &[f64], stds: &[f64], seed: u64) -> PatchGrid {
        let mut r = rng::stream(seed, "anisotropic");
        let c = means.len();
        let data = (0..n * c)
            .map(|i| (means[i % c] + stds[i % c] * rng::normal(&mut r)) as f32)
            .collect();
        PatchGrid::new(1, 100, n / 100, c, data).unwrap()
    }

    #[test]
    fn hadamard_small_orders() {
        assert_eq!(hadamard(1).unwrap(), vec![1]);
        assert_eq!(hadamard(2).unwrap(), vec![1, 1, 1, -1]);
        assert!(matches!(hadamard(6), Err(Error::Dimension(_))));
        assert!(hadamard(0).is_err());
    }

    #[test]
    fn hadamard_rows_are_orthogonal() {
        let n = 8;
        let h = hadamard(n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dot: i32 = (0..n).map(|k| h[i * n + k] * h[j * n + k]).sum();
                assert_eq!(dot, if i == j { n as i32 } else { 0 });
            }
        }
    }

    #[test]
    fn fast_transform_matches_matrix() {
        let n = 16;
        let h = hadamard(n).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut fast = x.clone();
        fwht(&mut fast);
        for i in 0..n {
            let direct: f64 = (0..n).map(|k| h[i * n + k] as f64 * x[k]).sum();
            assert!((direct - fast[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_examples() {
        let g = grid_of(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![0.6, 0.8]]);
        let out = l2_normalize(&g);
        assert_eq!(out.token(0, 0, 0), &[0.6, 0.8]);
        assert_eq!(out.token(0, 0, 1), &[0.0, 0.0]);
        let unit = out.token(0, 0, 2);
        assert!((unit[0] - 0.6).abs() < 1e-7 && (unit[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn phi_s_fit_examples() {
        let same = grid_of(&vec![vec![1.5, -2.0, 0.25, 4.0]; 10]);
        let s = phi_s_fit([&same]).unwrap();
        assert_eq!(s.mean, vec![1.5, -2.0, 0.25, 4.0]);
        assert_eq!(s.scale, SCALE_FLOOR);

        // channel variances 1 and 3 (population): values ±1 and ±√3
        let r3 = 3.0f32.sqrt();
        let g = grid_of(&[vec![1.0, r3], vec![-1.0, -r3], vec![-1.0, r3], vec![1.0, -r3]]);
        let s = phi_s_fit([&g]).unwrap();
        assert!((s.scale - 2.0f64.sqrt()).abs() < 1e-6);
        assert_eq!(s.hadamard_dim, 2);

        let one = grid_of(&[vec![1.0, 2.0]]);
        assert!(matches!(phi_s_fit([&one]), Err(Error::InsufficientData(_))));
        assert!(matches!(phi_s_fit(std::iter::empty()), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn phi_s_fit_recovers_generating_parameters() {
        let c = 16;
        let means: Vec<f64> = (0..c).map(|k| 2.0 + 4.0 * k as f64 / c as f64).collect();
        let stds: Vec<f64> = (0..c).map(|k| 0.5 + 1.5 * k as f64 / c as f64).collect();
        let g = anisotropic(10_000, &means, &stds, 3);
        let s = phi_s_fit([&g]).unwrap();
        for (m, t) in s.mean.iter().zip(&means) {
            assert!((m / t - 1.0).abs() < 0.02, "{m} vs {t}");
        }
        let target = (stds.iter().map(|v| v * v).sum::<f64>() / c as f64).sqrt();
        assert!((s.scale / target - 1.0).abs() < 0.02);
    }

    #[test]
    fn phi_s_apply_centering_and_isometry() {
        let c = 8;
        let means: Vec<f64> = (0..c).map(|k| k as f64 - 3.0).collect();
        let stds: Vec<f64> = (0..c).map(|k| 1.0 + k as f64).collect();
        let g = anisotropic(1000, &means, &stds, 5);
        let s = phi_s_fit([&g]).unwrap();
        let out = phi_s_apply(&g, &s).unwrap();
        for (tin, tout) in g.tokens().zip(out.tokens()) {
            let nin: f64 = tin.iter().zip(&s.mean).map(|(&v, m)| (v as f64 - m).powi(2)).sum::<f64>().sqrt();
            let nout: f64 = tout.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((nout - nin / s.scale).abs() < 1e-5 * (1.0 + nout));
        }
        let at_mean = grid_of(&[s.mean.iter().map(|&m| m as f32).collect()]);
        let z = phi_s_apply(&at_mean, &s).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn padding_for_non_power_of_two_channels() {
        let g = anisotropic(200, &[1.0; 6], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 8);
        let s = phi_s_fit([&g]).unwrap();
        assert_eq!((s.hadamard_dim, s.pad), (8, 2));
        assert_eq!(phi_s_apply(&g, &s).unwrap().channels(), 8);
        let wrong = PatchGrid::zeros(1, 1, 2, 5).unwrap();
        assert!(matches!(phi_s_apply(&wrong, &s), Err(Error::Dimension(_))));
        let mut bad = s.clone();
        bad.hadamard_dim = 6;
        assert!(matches!(phi_s_apply(&g, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn state_round_trips_through_text() {
        let g = anisotropic(300, &[0.1, 0.2, 0.3], &[1.0, 2.0, 0.5], 9);
        let s = phi_s_fit([&g]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("std.json");
        s.save(&p).unwrap();
        assert_eq!(StandardizerState::load(&p).unwrap(), s);
        let l2 = StandardizerState::l2(3);
        l2.save(&p).unwrap();
        assert_eq!(StandardizerState::load(&p).unwrap(), l2);
    }

    #[test]
    fn phi_s_balances_channel_energies() {
        let c = 64;
        let means: Vec<f64> = (0..c).map(|k| (k as f64 * 0.37).sin() * 5.0).collect();
        let stds: Vec<f64> = (0..c).map(|k| 0.2 + 3.0 * (k as f64 / c as f64).powi(2)).collect();
        let g = anisotropic(10_000, &means, &stds, 12);
        let s = phi_s_fit([&g]).unwrap();
        let out = phi_s_apply(&g, &s).unwrap();
        let n = out.num_tokens() as f64;
        let mut mu = vec![0.0f64; c];
        for t in out.tokens() {
            mu.iter_mut().zip(t).for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0f64; c];
        for t in out.tokens() {
            for ((v, &x), m) in var.iter_mut().zip(t).zip(&mu) {
                *v += (x as f64 - m).powi(2) / n;
            }
        }
        assert!(mu.iter().all(|m| m.abs() < 1e-5), "{mu:?}");
        let avg = var.iter().sum::<f64>() / c as f64;
        let lo = var.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = var.iter().copied().fold(0.0, f64::max);
        assert!((hi - lo) / avg < 0.03);
    }

    proptest! {
        #[test]
        fn l2_is_idempotent(vals in prop::collection::vec(-50.0f32..50.0, 24)) {
            let g = PatchGrid::new(1, 2, 3, 4, vals).unwrap();
            let once = l2_normalize(&g);
            let twice = l2_normalize(&once);
            prop_assert!(once.data().iter().zip(twice.data()).all(|(a, b)| (a - b).abs() < 1e-6));
            prop_assert_eq!(once.dims(), g.dims());
        }
    }
}
