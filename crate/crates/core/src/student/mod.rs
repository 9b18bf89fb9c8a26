//! The lightweight student encoder (a tiny pre-norm ViT over patch tokens,
//! no CLS token) and the per-teacher projection heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Image, PatchGrid};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet};
use crate::rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub grid: [usize; 2],
    /// Transformer MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            grid: [8, 8],
            mlp_ratio: 2,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("student extents must be positive".into()));
        }
        if self.grid.contains(&0) {
            return Err(Error::Config("student grid must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Input extents the encoder expects.
    pub fn input_extents(&self) -> (usize, usize) {
        (self.grid[0] * self.patch_size, self.grid[1] * self.patch_size)
    }
}

/// Flattens an image into `[tokens, patch_size²]` row-major patches.
pub fn patchify<F: Real>(image: &Image, cfg: &StudentConfig) -> Result<Tensor<F>> {
    let p = cfg.patch_size;
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::dim(format!(
            "{}x{} input is not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    if [gh, gw] != cfg.grid {
        return Err(Error::dim(format!(
            "{}x{} input gives a {gh}x{gw} grid, configured {:?}",
            image.height, image.width, cfg.grid
        )));
    }
    let mut data = Vec::with_capacity(image.height * image.width);
    for ty in 0..gh {
        for tx in 0..gw {
            for dy in 0..p {
                let row = (ty * p + dy) * image.width + tx * p;
                data.extend(image.data[row..row + p].iter().map(|&v| F::from_f64_lossy(v as f64)));
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p], data)
}

#[derive(Debug, Clone)]
pub struct Student<F> {
    cfg: StudentConfig,
    params: ParamSet<F>,
}

impl<F: Real> Student<F> {
    pub fn init(cfg: &StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "student-init");
        let e = cfg.embed_dim;
        let hidden = e * cfg.mlp_ratio;
        let mut p = ParamSet::new();
        p.trunc_normal("patch_embed.weight", &[cfg.patch_dim(), e], INIT_STD, &mut r);
        p.zeros("patch_embed.bias", &[e]);
        p.trunc_normal("pos_embed", &[cfg.tokens(), e], INIT_STD, &mut r);
        for b in 0..cfg.depth {
            let n = |s: &str| format!("blocks.{b}.{s}");
            p.ones(&n("ln1.gain"), &[e]);
            p.zeros(&n("ln1.bias"), &[e]);
            p.trunc_normal(&n("attn.qkv.weight"), &[e, 3 * e], INIT_STD, &mut r);
            p.zeros(&n("attn.qkv.bias"), &[3 * e]);
            p.trunc_normal(&n("attn.proj.weight"), &[e, e], INIT_STD, &mut r);
            p.zeros(&n("attn.proj.bias"), &[e]);
            p.ones(&n("ln2.gain"), &[e]);
            p.zeros(&n("ln2.bias"), &[e]);
            p.trunc_normal(&n("mlp.fc1.weight"), &[e, hidden], INIT_STD, &mut r);
            p.zeros(&n("mlp.fc1.bias"), &[hidden]);
            p.trunc_normal(&n("mlp.fc2.weight"), &[hidden, e], INIT_STD, &mut r);
            p.zeros(&n("mlp.fc2.bias"), &[e]);
        }
        p.ones("norm.gain", &[e]);
        p.zeros("norm.bias", &[e]);
        Ok(Self { cfg: cfg.clone(), params: p })
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// `[tokens, patch²]` patches → `[tokens, embed_dim]` embeddings.
    pub fn encode(&self, tape: &mut Tape<F>, bound: &Bound, patches: Var) -> Result<Var> {
        let p = &self.params;
        let v = |name: &str| p.var(bound, name);
        let e = self.cfg.embed_dim;
        let shape = tape.shape(patches);
        if shape != [self.cfg.tokens(), self.cfg.patch_dim()] {
            return Err(Error::dim(format!(
                "encode expects [{}, {}] patches, got {shape:?}",
                self.cfg.tokens(),
                self.cfg.patch_dim()
            )));
        }
        let mut x = tape.linear(patches, v("patch_embed.weight"), v("patch_embed.bias"))?;
        x = tape.add(x, v("pos_embed"))?;
        let dh = e / self.cfg.heads;
        let inv_sqrt = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
        for b in 0..self.cfg.depth {
            let n = |s: &str| v(&format!("blocks.{b}.{s}"));
            let h = tape.layer_norm(x, n("ln1.gain"), n("ln1.bias"))?;
            let qkv = tape.linear(h, n("attn.qkv.weight"), n("attn.qkv.bias"))?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let q = tape.narrow_cols(qkv, head * dh, dh)?;
                let k = tape.narrow_cols(qkv, e + head * dh, dh)?;
                let val = tape.narrow_cols(qkv, 2 * e + head * dh, dh)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let attn = tape.softmax(scores)?;
                heads.push(tape.matmul(attn, val)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.linear(merged, n("attn.proj.weight"), n("attn.proj.bias"))?;
            x = tape.add(x, attn_out)?;
            let h = tape.layer_norm(x, n("ln2.gain"), n("ln2.bias"))?;
            let h = tape.linear(h, n("mlp.fc1.weight"), n("mlp.fc1.bias"))?;
            let h = tape.gelu(h)?;
            let h = tape.linear(h, n("mlp.fc2.weight"), n("mlp.fc2.bias"))?;
            x = tape.add(x, h)?;
        }
        tape.layer_norm(x, v("norm.gain"), v("norm.bias"))
    }

    /// Gradient-free embedding of one image as a single-item grid.
    pub fn embed(&self, image: &Image) -> Result<PatchGrid> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let patches = tape.constant(&patchify(image, &self.cfg)?)?;
        let out = self.encode(&mut tape, &bound, patches)?;
        let data = tape.value(out).iter().map(|v| v.as_f64() as f32).collect();
        PatchGrid::new(1, self.cfg.grid[0], self.cfg.grid[1], self.cfg.embed_dim, data)
    }
}

/// Per-teacher MLP `linear → GELU → linear` from the student width to the
/// teacher's channel count.
#[derive(Debug, Clone)]
pub struct ProjectionHead<F> {
    teacher: String,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    params: ParamSet<F>,
}

impl<F: Real> ProjectionHead<F> {
    pub fn init(teacher: &str, embed_dim: usize, teacher_channels: usize, seed: u64) -> Self {
        let hidden = embed_dim.max(teacher_channels);
        let mut r = rng::stream(seed, &format!("head-init/{teacher}"));
        let mut p = ParamSet::new();
        p.trunc_normal("fc1.weight", &[embed_dim, hidden], INIT_STD, &mut r);
        p.zeros("fc1.bias", &[hidden]);
        p.trunc_normal("fc2.weight", &[hidden, teacher_channels], INIT_STD, &mut r);
        p.zeros("fc2.bias", &[teacher_channels]);
        Self {
            teacher: teacher.to_string(),
            in_dim: embed_dim,
            hidden,
            out_dim: teacher_channels,
            params: p,
        }
    }

    pub fn teacher(&self) -> &str {
        &self.teacher
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_channels(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// `[tokens, embed_dim]` → `[tokens, teacher_channels]`.
    pub fn project(&self, tape: &mut Tape<F>, bound: &Bound, embedding: Var) -> Result<Var> {
        let s = tape.shape(embedding);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::dim(format!(
                "head {} expects {} channels, got {s:?}",
                self.teacher, self.in_dim
            )));
        }
        let p = &self.params;
        let h = tape.linear(embedding, p.var(bound, "fc1.weight"), p.var(bound, "fc1.bias"))?;
        let h = tape.gelu(h)?;
        tape.linear(h, p.var(bound, "fc2.weight"), p.var(bound, "fc2.bias"))
    }

    /// Gradient-free projection of a student embedding grid.
    pub fn apply(&self, embedding: &PatchGrid) -> Result<PatchGrid> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let mut out = Vec::with_capacity(embedding.num_tokens() * self.out_dim);
        for b in 0..embedding.batch() {
            let data = embedding.item(b).iter().map(|&v| F::from_f64_lossy(v as f64)).collect();
            let x = tape.constant(&Tensor::new(vec![embedding.tokens_per_item(), embedding.channels()], data)?)?;
            let y = self.project(&mut tape, &bound, x)?;
            out.extend(tape.value(y).iter().map(|v| v.as_f64() as f32));
        }
        PatchGrid::new(embedding.batch(), embedding.grid_h(), embedding.grid_w(), self.out_dim, out)
    }
}
