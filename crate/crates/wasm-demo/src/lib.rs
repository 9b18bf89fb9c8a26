//! Browser demo: loss balancing, target standardization and mask metrics,
//! each as a plain function over typed arrays.

use agglomerate::balancing::{combine, entropy, uniform_weights, Balancer, BalancerConfig, BalancingKind, LossVector};
use agglomerate::features::PatchGrid;
use agglomerate::segmetrics::{dice, hausdorff, hd95_with, BinaryMask, Hd95Mode};
use agglomerate::standardize::{l2_normalize, phi_s_apply, phi_s_fit};
use agglomerate::Result;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

/// Channels of the standardization demo.
pub const DEMO_CHANNELS: usize = 8;
const DEMO_TOKENS: usize = 1024;

fn js(e: agglomerate::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Weights for `losses` from a seeded MLP balancer whose parameters are
/// multiplied by `gain`. `gain = 0` gives uniform weights.
pub fn mlp_alpha(losses: &[f64], seed: u64, gain: f64) -> Result<Vec<f64>> {
    let cfg = BalancerConfig {
        kind: BalancingKind::Mlp,
        ..BalancerConfig::default()
    };
    let channels = vec![1; losses.len()];
    let mut b = Balancer::<f64>::init(&cfg, 1, &channels, seed)?;
    for t in b.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    Ok(b.mlp_weights(&LossVector::detached(losses.to_vec())?)?.as_slice().to_vec())
}

/// `[α…, H(α), combined loss]` for the chosen balancer.
pub fn balance_summary(losses: &[f64], kind: &str, seed: u64, gain: f64, entropy_coeff: f64) -> Result<Vec<f64>> {
    let alpha = match kind {
        "uniform" => uniform_weights(losses.len())?.as_slice().to_vec(),
        "mlp" => mlp_alpha(losses, seed, gain)?,
        other => return Err(agglomerate::Error::Config(format!("unknown balancer {other:?}"))),
    };
    let w = agglomerate::balancing::WeightVector::new(alpha.clone())?;
    let total = combine(&w, &LossVector::detached(losses.to_vec())?, entropy_coeff)?;
    let mut out = alpha;
    out.push(entropy(w.as_slice()));
    out.push(total);
    Ok(out)
}

fn demo_tokens(seed: u64, anisotropy: f64) -> Result<PatchGrid> {
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = DEMO_CHANNELS;
    let mut data = Vec::with_capacity(DEMO_TOKENS * c);
    for _ in 0..DEMO_TOKENS {
        let shared: f64 = StandardNormal.sample(&mut r);
        for ch in 0..c {
            let std = anisotropy.powf(ch as f64 / (c - 1) as f64);
            let z: f64 = StandardNormal.sample(&mut r);
            data.push((std * (0.8 * z + 0.6 * shared) + ch as f64) as f32);
        }
    }
    PatchGrid::new(DEMO_TOKENS, 1, 1, c, data)
}

fn channel_stats(g: &PatchGrid) -> (Vec<f64>, Vec<f64>) {
    let c = g.channels();
    let n = g.num_tokens() as f64;
    let mut mean = vec![0.0; c];
    for t in g.tokens() {
        for (m, &v) in mean.iter_mut().zip(t) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0; c];
    for t in g.tokens() {
        for ((s, &v), m) in var.iter_mut().zip(t).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    (mean, var)
}

/// Per-channel variance then mean of raw, L2-normalized and PHI-S tokens,
/// `6 · DEMO_CHANNELS` values. Channel stds span `1 ..= anisotropy`.
pub fn standardization_stats(seed: u64, anisotropy: f64) -> Result<Vec<f64>> {
    if !(anisotropy.is_finite() && anisotropy > 0.0) {
        return Err(agglomerate::Error::Config(format!("anisotropy must be positive, got {anisotropy}")));
    }
    let raw = demo_tokens(seed, anisotropy)?;
    let l2 = l2_normalize(&raw);
    let state = phi_s_fit([&raw])?;
    let phi = phi_s_apply(&raw, &state)?;
    let stats = [channel_stats(&raw), channel_stats(&l2), channel_stats(&phi)];
    let mut out: Vec<f64> = stats.iter().flat_map(|(_, v)| v.clone()).collect();
    out.extend(stats.iter().flat_map(|(m, _)| m.clone()));
    Ok(out)
}

/// `[dice, hd95, hausdorff]` with NaN where a distance is undefined.
pub fn mask_scores(pred: &[u8], truth: &[u8], height: usize, width: usize, max_directed: bool) -> Result<Vec<f64>> {
    let a = BinaryMask::new(height, width, pred.iter().map(|&v| v != 0).collect())?;
    let b = BinaryMask::new(height, width, truth.iter().map(|&v| v != 0).collect())?;
    let mode = if max_directed { Hd95Mode::MaxDirected } else { Hd95Mode::Union };
    Ok(vec![
        dice(&a, &b)?,
        hd95_with(&a, &b, mode)?.unwrap_or(f64::NAN),
        hausdorff(&a, &b)?.unwrap_or(f64::NAN),
    ])
}

#[wasm_bindgen]
pub fn balance(losses: &[f64], kind: &str, seed: u32, gain: f64, entropy_coeff: f64) -> std::result::Result<Vec<f64>, JsValue> {
    balance_summary(losses, kind, seed as u64, gain, entropy_coeff).map_err(js)
}

#[wasm_bindgen]
pub fn standardize(seed: u32, anisotropy: f64) -> std::result::Result<Vec<f64>, JsValue> {
    standardization_stats(seed as u64, anisotropy).map_err(js)
}

#[wasm_bindgen]
pub fn metrics(pred: &[u8], truth: &[u8], height: usize, width: usize, max_directed: bool) -> std::result::Result<Vec<f64>, JsValue> {
    mask_scores(pred, truth, height, width, max_directed).map_err(js)
}

#[wasm_bindgen]
pub fn demo_channels() -> usize {
    DEMO_CHANNELS
}
