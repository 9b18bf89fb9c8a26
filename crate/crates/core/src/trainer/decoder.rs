use crate::error::{Error, Result};
use crate::features::{upsample_matrix, PatchGrid};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::student::INIT_STD;

/// Soft-Dice smoothing term.
pub const DICE_SMOOTH: f64 = 1.0;

/// Per-token linear classifier whose logits are bilinearly upsampled to
/// pixel resolution.
#[derive(Debug, Clone)]
pub struct ToyDecoder<F> {
    embed_dim: usize,
    classes: usize,
    grid: [usize; 2],
    out: [usize; 2],
    params: ParamSet<F>,
    upsample: Tensor<F>,
}

impl<F: Real> ToyDecoder<F> {
    pub fn init(embed_dim: usize, classes: usize, grid: [usize; 2], out: [usize; 2], seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract(format!("decoder needs >= 2 classes, got {classes}")));
        }
        let mut r = rng::stream(seed, "decoder-init");
        let mut p = ParamSet::new();
        p.trunc_normal("weight", &[embed_dim, classes], INIT_STD, &mut r);
        p.zeros("bias", &[classes]);
        let u = upsample_matrix(grid[0], grid[1], out[0], out[1]);
        let upsample = Tensor::new(
            vec![out[0] * out[1], grid[0] * grid[1]],
            u.into_iter().map(|v| F::from_f64_lossy(v as f64)).collect(),
        )?;
        Ok(Self {
            embed_dim,
            classes,
            grid,
            out,
            params: p,
            upsample,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.out[0] * self.out[1]
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// The fixed interpolation matrix as a tape constant, shared by a batch.
    pub fn upsampler(&self, tape: &mut Tape<F>) -> Result<Var> {
        tape.constant(&self.upsample)
    }

    /// `[tokens, embed_dim]` → pixel logits `[H·W, classes]`.
    pub fn logits(&self, tape: &mut Tape<F>, bound: &Bound, upsampler: Var, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens);
        if s != [self.grid[0] * self.grid[1], self.embed_dim] {
            return Err(Error::dim(format!(
                "decoder expects [{}, {}] tokens, got {s:?}",
                self.grid[0] * self.grid[1],
                self.embed_dim
            )));
        }
        let z = tape.linear(tokens, self.params.var(bound, "weight"), self.params.var(bound, "bias"))?;
        tape.matmul(upsampler, z)
    }

    /// Cross-entropy plus soft Dice (mean over classes) for one image.
    pub fn loss(&self, tape: &mut Tape<F>, logits: Var, labels: &[u8]) -> Result<Var> {
        let (n, k) = (self.pixels(), self.classes);
        if labels.len() != n {
            return Err(Error::dim(format!("{} labels for {n} pixels", labels.len())));
        }
        let mut onehot = vec![F::zero(); n * k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(Error::contract(format!("label {l} outside {k} classes")));
            }
            onehot[i * k + l] = F::one();
            counts[l] += 1;
        }
        let y = tape.constant(&Tensor::new(vec![n, k], onehot)?)?;
        let ls = tape.log_softmax(logits)?;
        let picked = tape.mul(ls, y)?;
        let total = tape.sum(picked)?;
        let ce = tape.scale(total, F::from_f64_lossy(-1.0 / n as f64))?;

        let p = tape.softmax(logits)?;
        let py = tape.mul(p, y)?;
        let inter = tape.sum_rows(py)?;
        let num = tape.scale(inter, F::from_f64_lossy(2.0))?;
        let smooth = tape.constant(&Tensor::full(vec![1, k], F::from_f64_lossy(DICE_SMOOTH))?)?;
        let num = tape.add(num, smooth)?;
        let psum = tape.sum_rows(p)?;
        let ysum = Tensor::new(
            vec![1, k],
            counts.iter().map(|&c| F::from_f64_lossy(c as f64 + DICE_SMOOTH)).collect(),
        )?;
        let ysum = tape.constant(&ysum)?;
        let den = tape.add(psum, ysum)?;
        let ratio = tape.div(num, den)?;
        let dice = tape.mean(ratio)?;
        let diff = tape.sub(ce, dice)?;
        let one = tape.constant(&Tensor::scalar(F::one()))?;
        tape.add(diff, one)
    }

    /// Hard per-pixel labels for one item's tokens.
    pub fn predict(&self, tokens: &[f32]) -> Result<Vec<u8>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let up = self.upsampler(&mut tape)?;
        let t = Tensor::new(
            vec![self.grid[0] * self.grid[1], self.embed_dim],
            tokens.iter().map(|&v| F::from_f64_lossy(v as f64)).collect(),
        )?;
        let x = tape.constant(&t)?;
        let l = self.logits(&mut tape, &bound, up, x)?;
        Ok(tape
            .value(l)
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }

    pub fn predict_grid(&self, embeddings: &PatchGrid) -> Result<Vec<Vec<u8>>> {
        (0..embeddings.batch()).map(|b| self.predict(embeddings.item(b))).collect()
    }
}
