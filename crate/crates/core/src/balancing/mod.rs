//! Per-teacher loss weighting: uniform, an MLP over the (detached) loss
//! vector, and scaled dot-product attention between a pooled student query
//! and pooled teacher keys. Every strategy yields a point on the simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PatchGrid;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::student::INIT_STD;

pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalancingKind {
    Uniform,
    Mlp,
    Attention,
}

impl BalancingKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Mlp => "mlp",
            Self::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancerConfig {
    pub kind: BalancingKind,
    /// MLP hidden width.
    pub hidden: usize,
    pub activation: Activation,
    /// Attention width `d`.
    pub attn_dim: usize,
    pub entropy_coeff: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            kind: BalancingKind::Attention,
            hidden: 16,
            activation: Activation::Gelu,
            attn_dim: 32,
            entropy_coeff: 0.01,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attn_dim == 0 {
            return Err(Error::Config("balancer widths must be positive".into()));
        }
        if !self.entropy_coeff.is_finite() || self.entropy_coeff < 0.0 {
            return Err(Error::Config(format!(
                "entropy_coeff must be finite and >= 0, got {}",
                self.entropy_coeff
            )));
        }
        Ok(())
    }
}

/// Per-teacher losses in teacher order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub detached: bool,
}

impl LossVector {
    pub fn detached(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("loss vector needs at least one teacher"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::contract(format!("losses must be finite and >= 0: {values:?}")));
        }
        Ok(Self { values, detached: true })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates the simplex invariant.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let sum: f64 = alpha.iter().sum();
        if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::contract(format!("not on the simplex: {alpha:?}")));
        }
        Ok(Self(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn uniform_weights(teachers: usize) -> Result<WeightVector> {
    if teachers == 0 {
        return Err(Error::contract("uniform weights over zero teachers"));
    }
    WeightVector::new(vec![1.0 / teachers as f64; teachers])
}

/// Shannon entropy in nats.
pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>()
}

/// `Σ α_i ℓ_i − c·H(α)` on plain values.
pub fn combine(alpha: &WeightVector, losses: &LossVector, entropy_coeff: f64) -> Result<f64> {
    if alpha.len() != losses.len() {
        return Err(Error::dim(format!(
            "combine: {} weights for {} losses",
            alpha.len(),
            losses.len()
        )));
    }
    let weighted: f64 = alpha.0.iter().zip(&losses.values).map(|(a, l)| a * l).sum();
    Ok(weighted - entropy_coeff * entropy(&alpha.0))
}

/// Tape version of [`combine`]. `alpha` is `[1, T]`, `losses` are scalars.
pub fn combine_on_tape<F: Real>(tape: &mut Tape<F>, alpha: Var, losses: &[Var], entropy_coeff: f64) -> Result<Var> {
    let t = losses.len();
    if tape.shape(alpha).iter().product::<usize>() != t {
        return Err(Error::dim(format!(
            "combine: {:?} weights for {t} losses",
            tape.shape(alpha)
        )));
    }
    let a = tape.reshape(alpha, &[t])?;
    let l = tape.stack(losses)?;
    let weighted = tape.mul(a, l)?;
    let mut total = tape.sum(weighted)?;
    if entropy_coeff != 0.0 {
        // −c·H(α) = c·Σ α ln α
        let log_a = tape.ln(a)?;
        let plogp = tape.mul(a, log_a)?;
        let neg_h = tape.sum(plogp)?;
        let term = tape.scale(neg_h, F::from_f64_lossy(entropy_coeff))?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Learnable state of one strategy. Uniform carries no parameters.
#[derive(Debug, Clone)]
pub struct Balancer<F> {
    kind: BalancingKind,
    activation: Activation,
    teachers: usize,
    attn_dim: usize,
    params: ParamSet<F>,
}

impl<F: Real> Balancer<F> {
    /// Teachers are named by their slot index; see [`Balancer::init_named`].
    pub fn init(cfg: &BalancerConfig, embed_dim: usize, teacher_channels: &[usize], seed: u64) -> Result<Self> {
        let names: Vec<String> = (0..teacher_channels.len()).map(|i| i.to_string()).collect();
        Self::init_named(cfg, embed_dim, &names, teacher_channels, seed)
    }

    /// Each teacher's parameter slot is drawn from a stream keyed by its
    /// name, so reordering teachers reorders the slots and nothing else.
    pub fn init_named(
        cfg: &BalancerConfig,
        embed_dim: usize,
        names: &[String],
        teacher_channels: &[usize],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let t = teacher_channels.len();
        if t == 0 {
            return Err(Error::contract("balancer needs at least one teacher"));
        }
        if names.len() != t {
            return Err(Error::dim(format!("{} names for {t} teachers", names.len())));
        }
        let mut slots: Vec<_> = names
            .iter()
            .map(|n| rng::stream(seed, &format!("balancer-slot/{n}")))
            .collect();
        let mut p = ParamSet::new();
        match cfg.kind {
            BalancingKind::Uniform => {}
            BalancingKind::Mlp => {
                let h = cfg.hidden;
                // column i of W1 and row i of W2 belong to teacher i
                let mut w1 = vec![F::zero(); h * t];
                let mut w2 = vec![F::zero(); t * h];
                for (i, r) in slots.iter_mut().enumerate() {
                    for j in 0..h {
                        w1[j * t + i] = F::from_f64_lossy(rng::truncated_normal(r, INIT_STD));
                    }
                    for j in 0..h {
                        w2[i * h + j] = F::from_f64_lossy(rng::truncated_normal(r, INIT_STD));
                    }
                }
                p.insert("mlp.w1", Tensor::new(vec![h, t], w1)?);
                p.zeros("mlp.b1", &[h]);
                p.insert("mlp.w2", Tensor::new(vec![t, h], w2)?);
                p.zeros("mlp.b2", &[t]);
            }
            BalancingKind::Attention => {
                let mut r = rng::stream(seed, "balancer-query");
                p.trunc_normal("attn.q_map", &[embed_dim, cfg.attn_dim], INIT_STD, &mut r);
                for (i, (&c, r)) in teacher_channels.iter().zip(slots.iter_mut()).enumerate() {
                    p.trunc_normal(&format!("attn.k_map.{i}"), &[c, cfg.attn_dim], INIT_STD, r);
                }
            }
        }
        Ok(Self {
            kind: cfg.kind,
            activation: cfg.activation,
            teachers: t,
            attn_dim: cfg.attn_dim,
            params: p,
        })
    }

    pub fn kind(&self) -> BalancingKind {
        self.kind
    }

    pub fn teachers(&self) -> usize {
        self.teachers
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// `softmax(W2·σ(W1·ℓ + b1) + b2)` as `[1, T]`. The losses enter as data.
    pub fn mlp_on_tape(&self, tape: &mut Tape<F>, bound: &Bound, losses: &[F]) -> Result<Var> {
        self.expect(BalancingKind::Mlp)?;
        if losses.len() != self.teachers {
            return Err(Error::dim(format!(
                "mlp balancer has {} slots, got {} losses",
                self.teachers,
                losses.len()
            )));
        }
        let p = &self.params;
        let l = tape.constant(&Tensor::new(vec![1, losses.len()], losses.to_vec())?)?;
        let w1t = tape.transpose(p.var(bound, "mlp.w1"))?;
        let h = tape.linear(l, w1t, p.var(bound, "mlp.b1"))?;
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h)?,
            Activation::Relu => tape.relu(h)?,
        };
        let w2t = tape.transpose(p.var(bound, "mlp.w2"))?;
        let z = tape.linear(h, w2t, p.var(bound, "mlp.b2"))?;
        tape.softmax(z)
    }

    /// `softmax_i(qᵀk_i/√d)` as `[1, T]`, with `q` from the mean-pooled
    /// student tokens and `k_i` from the mean-pooled tokens of teacher `i`.
    pub fn attn_on_tape(&self, tape: &mut Tape<F>, bound: &Bound, student: Var, teachers: &[Var]) -> Result<Var> {
        self.expect(BalancingKind::Attention)?;
        if teachers.len() != self.teachers {
            return Err(Error::dim(format!(
                "attention balancer has {} keys, got {} teachers",
                self.teachers,
                teachers.len()
            )));
        }
        let p = &self.params;
        let pooled = tape.mean_rows(student)?;
        let q = tape.matmul(pooled, p.var(bound, "attn.q_map"))?;
        let mut keys = Vec::with_capacity(teachers.len());
        for (i, &tv) in teachers.iter().enumerate() {
            let pooled = tape.mean_rows(tv)?;
            let k = tape.matmul(pooled, p.var(bound, &format!("attn.k_map.{i}")))?;
            keys.push(tape.transpose(k)?);
        }
        let kmat = tape.concat_cols(&keys)?;
        let logits = tape.matmul(q, kmat)?;
        let logits = tape.scale(logits, F::from_f64_lossy(1.0 / (self.attn_dim as f64).sqrt()))?;
        tape.softmax(logits)
    }

    /// Uniform weights as a `[1, T]` constant.
    pub fn uniform_on_tape(&self, tape: &mut Tape<F>) -> Result<Var> {
        let v = F::one() / F::from_usize(self.teachers).unwrap();
        tape.constant(&Tensor::full(vec![1, self.teachers], v)?)
    }

    /// Gradient-free MLP weights.
    pub fn mlp_weights(&self, losses: &LossVector) -> Result<WeightVector> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let l: Vec<F> = losses.values.iter().map(|&v| F::from_f64_lossy(v)).collect();
        let a = self.mlp_on_tape(&mut tape, &bound, &l)?;
        to_weights(&tape, a)
    }

    /// Gradient-free attention weights for single-item grids or batches.
    pub fn attn_weights(&self, student: &PatchGrid, teachers: &[PatchGrid]) -> Result<WeightVector> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let s = tape.constant(&grid_matrix(student)?)?;
        let mut tv = Vec::with_capacity(teachers.len());
        for g in teachers {
            tv.push(tape.constant(&grid_matrix(g)?)?);
        }
        let a = self.attn_on_tape(&mut tape, &bound, s, &tv)?;
        to_weights(&tape, a)
    }

    fn expect(&self, kind: BalancingKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::contract(format!(
                "{} balancer asked for {} weights",
                self.kind.label(),
                kind.label()
            )));
        }
        Ok(())
    }
}

fn to_weights<F: Real>(tape: &Tape<F>, alpha: Var) -> Result<WeightVector> {
    WeightVector::new(tape.value(alpha).iter().map(|v| v.as_f64()).collect())
}

/// All tokens of a grid as a `[tokens, channels]` matrix.
pub fn grid_matrix<F: Real>(g: &PatchGrid) -> Result<Tensor<F>> {
    Tensor::new(
        vec![g.num_tokens(), g.channels()],
        g.data().iter().map(|&v| F::from_f64_lossy(v as f64)).collect(),
    )
}

#[cfg(test)]
mod tests;
