//! Two-phase training. Phase 1 distills the student against standardized
//! teacher targets with per-teacher heads and a loss balancer; phase 2
//! freezes the encoder and fits a toy segmentation decoder.

pub mod ablation;
mod data;
mod decoder;
mod optim;
mod report;
mod run;

pub use ablation::{
    aggregate, build_grid, run_ablation, table2_variants, table3_variants, thread_count, AblationReport, AblationRow,
    Axis, RunSummary, TrendCheck, Variant, TREND_TOLERANCE,
};
pub use data::{epoch_batches, Dataset, Sample, CLASS_NAMES, NUM_CLASSES};
pub use decoder::{ToyDecoder, DICE_SMOOTH};
pub use optim::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig, ScheduleKind};
pub use report::{csv_field, fmt_opt, EpochRow, FinalMetrics, ParamCounts, RunReport};
pub use run::{param_counts, prepare_run_dir, run_experiment, write_run_dir, RunOutcome};

use serde::{Deserialize, Serialize};

use crate::balancing::{combine_on_tape, Balancer, BalancerConfig, BalancingKind};
use crate::config::{LossKind, TeacherConfig};
use crate::error::{Error, Result};
use crate::features::{resample_grid, synth_teacher, Image, PatchGrid};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;
use crate::segmetrics::{class_masks, dice, hd95_with, Hd95Mode};
use crate::standardize::{phi_s_fit, StandardizerKind, StandardizerState};
use crate::student::{patchify, ProjectionHead, Student, StudentConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Global gradient-norm cap, 0 disables.
    pub grad_clip: f64,
    pub train_images: usize,
    pub test_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            epochs_phase1: 100,
            epochs_phase2: 100,
            batch_size: 8,
            lr_start: 1e-4,
            lr_end: 1e-5,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            weight_decay: a.weight_decay,
            schedule: ScheduleKind::Cosine,
            grad_clip: 1.0,
            train_images: 512,
            test_images: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("trainer: {m}")));
        if self.epochs_phase1 == 0 || self.epochs_phase2 == 0 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.train_images == 0 || self.test_images == 0 {
            return fail("batch_size, train_images and test_images must be >= 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return fail("need lr_start >= lr_end > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay, adam_eps and grad_clip must be non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr(&self, epoch: usize, total: usize) -> Result<f64> {
        lr_schedule(epoch, total, self.lr_start, self.lr_end, self.schedule)
    }
}

/// Frozen teachers reduced to standardized targets on the student grid.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub names: Vec<String>,
    pub losses: Vec<LossKind>,
    pub states: Vec<StandardizerState>,
    /// Per teacher, one item per training image.
    pub train: Vec<PatchGrid>,
    pub test: Vec<PatchGrid>,
}

impl TeacherBundle {
    /// Runs every teacher once over both splits, resamples to `grid` and
    /// standardizes with statistics fitted on the training split only.
    pub fn build(
        teachers: &[TeacherConfig],
        kind: StandardizerKind,
        train: &[Image],
        test: &[Image],
        grid: [usize; 2],
    ) -> Result<Self> {
        let mut b = Self {
            names: Vec::new(),
            losses: Vec::new(),
            states: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for t in teachers {
            let adapter = synth_teacher(&t.spec())?;
            let raw = |images: &[Image]| -> Result<PatchGrid> {
                let g = adapter.produce_batch(images)?;
                resample_grid(&g, grid[0], grid[1])
            };
            let (tr, te) = (raw(train)?, raw(test)?);
            let state = match kind {
                StandardizerKind::L2 => StandardizerState::l2(t.out_channels),
                StandardizerKind::PhiS => phi_s_fit([&tr])?,
            };
            b.train.push(state.apply(&tr)?);
            b.test.push(state.apply(&te)?);
            b.names.push(t.name.clone());
            b.losses.push(t.loss);
            b.states.push(state);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.train.iter().map(PatchGrid::channels).collect()
    }

    /// Stacked tokens of `items` for teacher `i` as `[items·tokens, C]`.
    fn batch_targets(grids: &PatchGrid, items: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(items.len() * grids.tokens_per_item() * grids.channels());
        for &b in items {
            data.extend_from_slice(grids.item(b));
        }
        Tensor::new(vec![items.len() * grids.tokens_per_item(), grids.channels()], data)
    }
}

/// Everything trained in phase 1.
#[derive(Debug, Clone)]
pub struct Distiller {
    pub student: Student<f32>,
    pub heads: Vec<ProjectionHead<f32>>,
    pub balancer: Balancer<f32>,
    pub entropy_coeff: f64,
}

/// Per-step scalars of one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub combined: f64,
    pub losses: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Distiller {
    pub fn init(
        student: &StudentConfig,
        balancing: &BalancerConfig,
        names: &[String],
        channels: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let st = Student::init(student, seed)?;
        let heads = names
            .iter()
            .zip(channels)
            .map(|(n, &c)| ProjectionHead::init(n, student.embed_dim, c, seed))
            .collect();
        let balancer = Balancer::init_named(balancing, student.embed_dim, names, channels, seed)?;
        Ok(Self {
            student: st,
            heads,
            balancer,
            entropy_coeff: balancing.entropy_coeff,
        })
    }

    pub fn param_tensor_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.student.params().tensors().iter().map(Tensor::numel).collect();
        for h in &self.heads {
            v.extend(h.params().tensors().iter().map(Tensor::numel));
        }
        v.extend(self.balancer.params().tensors().iter().map(Tensor::numel));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v: Vec<&mut Tensor<f32>> = self.student.params_mut().tensors_mut().iter_mut().collect();
        for h in &mut self.heads {
            v.extend(h.params_mut().tensors_mut().iter_mut());
        }
        v.extend(self.balancer.params_mut().tensors_mut().iter_mut());
        v
    }

    /// Builds the combined loss for one batch on `tape` and returns it with
    /// the per-teacher losses and weights.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        bounds: &DistillBounds,
        patches: &[&Tensor<f32>],
        targets: &[Tensor<f32>],
        names: &[String],
        losses: &[LossKind],
    ) -> Result<(Var, Vec<Var>, Var)> {
        let mut tokens = Vec::with_capacity(patches.len());
        for p in patches {
            let x = tape.constant(p)?;
            tokens.push(self.student.encode(tape, &bounds.student, x)?);
        }
        let emb = if tokens.len() == 1 { tokens[0] } else { tape.concat_rows(&tokens)? };
        let mut ls = Vec::with_capacity(self.heads.len());
        let mut target_vars = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let named = |e: Error| match e {
                Error::NonFinite { site } => Error::NonFinite {
                    site: format!("teacher {}: {site}", names[i]),
                },
                other => other,
            };
            let z = head.project(tape, &bounds.heads[i], emb).map_err(named)?;
            let t = tape.constant(&targets[i])?;
            let l = match losses[i] {
                LossKind::Mse => tape.mse_loss(z, t),
                LossKind::Cosine => tape.cosine_loss(z, t),
            }
            .map_err(named)?;
            target_vars.push(t);
            ls.push(l);
        }
        let alpha = match self.balancer.kind() {
            BalancingKind::Uniform => self.balancer.uniform_on_tape(tape)?,
            BalancingKind::Mlp => {
                let values: Vec<f32> = ls.iter().map(|&l| tape.scalar(l)).collect();
                self.balancer.mlp_on_tape(tape, &bounds.balancer, &values)?
            }
            BalancingKind::Attention => {
                let q = tape.detach(emb);
                self.balancer.attn_on_tape(tape, &bounds.balancer, q, &target_vars)?
            }
        };
        let total = combine_on_tape(tape, alpha, &ls, self.entropy_coeff)?;
        Ok((total, ls, alpha))
    }

    pub fn bind(&self, tape: &mut Tape<f32>) -> Result<DistillBounds> {
        Ok(DistillBounds {
            student: self.student.params().bind(tape)?,
            heads: self.heads.iter().map(|h| h.params().bind(tape)).collect::<Result<_>>()?,
            balancer: self.balancer.params().bind(tape)?,
        })
    }

    fn grads(&self, tape: &Tape<f32>, b: &DistillBounds) -> Vec<Vec<f32>> {
        let mut g = self.student.params().grads(tape, &b.student);
        for (h, hb) in self.heads.iter().zip(&b.heads) {
            g.extend(h.params().grads(tape, hb));
        }
        g.extend(self.balancer.params().grads(tape, &b.balancer));
        g
    }

    /// One optimizer step on a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        opt: &mut AdamW,
        patches: &[&Tensor<f32>],
        targets: &[Tensor<f32>],
        bundle: &TeacherBundle,
        lr: f64,
        grad_clip: f64,
    ) -> Result<StepStats> {
        let mut tape = Tape::new();
        let bounds = self.bind(&mut tape)?;
        let (total, ls, alpha) = self.forward(&mut tape, &bounds, patches, targets, &bundle.names, &bundle.losses)?;
        let stats = StepStats {
            combined: tape.scalar(total) as f64,
            losses: ls.iter().map(|&l| tape.scalar(l) as f64).collect(),
            alpha: tape.value(alpha).iter().map(|&a| a as f64).collect(),
        };
        tape.backward(total)?;
        let mut grads = self.grads(&tape, &bounds);
        drop(tape);
        clip_grad_norm(&mut grads, grad_clip);
        opt.step(&mut self.params_mut(), &grads, lr)?;
        Ok(stats)
    }

    /// Student tokens of `images` as a grid batch.
    pub fn embed_all(&self, images: &[Image]) -> Result<PatchGrid> {
        let grids = images.iter().map(|im| self.student.embed(im)).collect::<Result<Vec<_>>>()?;
        PatchGrid::concat(&grids)
    }

    /// Mean squared error of each head against its targets.
    pub fn fidelity(&self, embeddings: &PatchGrid, targets: &[PatchGrid]) -> Result<Vec<f64>> {
        self.heads
            .iter()
            .zip(targets)
            .map(|(h, t)| {
                let z = h.apply(embeddings)?;
                let se: f64 = z.data().iter().zip(t.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                Ok(se / z.data().len() as f64)
            })
            .collect()
    }
}

/// Tape handles of every phase-1 parameter set.
#[derive(Debug)]
pub struct DistillBounds {
    pub student: Bound,
    pub heads: Vec<Bound>,
    pub balancer: Bound,
}

/// Phase 1. Returns one row per epoch with step-averaged scalars.
pub fn distill_phase(
    model: &mut Distiller,
    bundle: &TeacherBundle,
    patches: &[Tensor<f32>],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<EpochRow>> {
    if patches.is_empty() {
        return Err(Error::contract("phase 1 needs at least one training image"));
    }
    let mut opt = AdamW::new(cfg.adamw(), model.param_tensor_sizes());
    let t = bundle.len();
    let mut rows = Vec::with_capacity(cfg.epochs_phase1);
    for epoch in 0..cfg.epochs_phase1 {
        let lr = cfg.lr(epoch, cfg.epochs_phase1)?;
        let batches = epoch_batches(patches.len(), cfg.batch_size, crate::rng::mix(seed, 1), epoch);
        let (mut sum_total, mut sum_l, mut sum_a) = (0.0, vec![0.0; t], vec![0.0; t]);
        for items in &batches {
            let p: Vec<&Tensor<f32>> = items.iter().map(|&i| &patches[i]).collect();
            let targets = bundle
                .train
                .iter()
                .map(|g| TeacherBundle::batch_targets(g, items))
                .collect::<Result<Vec<_>>>()?;
            let s = model.step(&mut opt, &p, &targets, bundle, lr, cfg.grad_clip)?;
            sum_total += s.combined;
            for i in 0..t {
                sum_l[i] += s.losses[i];
                sum_a[i] += s.alpha[i];
            }
        }
        let n = batches.len() as f64;
        let row = EpochRow {
            phase: 1,
            epoch: epoch + 1,
            lr,
            loss: sum_total / n,
            teacher_losses: sum_l.iter().map(|v| v / n).collect(),
            alpha: sum_a.iter().map(|v| v / n).collect(),
            dice: Vec::new(),
            hd95: Vec::new(),
        };
        log(&format!(
            "phase 1 epoch {:>3} lr {:.3e} loss {:.5} | {}",
            row.epoch,
            lr,
            row.loss,
            bundle
                .names
                .iter()
                .zip(row.teacher_losses.iter().zip(&row.alpha))
                .map(|(n, (l, a))| format!("{n} {l:.5} a={a:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        rows.push(row);
    }
    Ok(rows)
}

/// Held-out labels and frozen embeddings for phase 2.
pub struct AlignData<'a> {
    pub train_embeddings: &'a PatchGrid,
    pub train_labels: Vec<&'a [u8]>,
    pub test_embeddings: &'a PatchGrid,
    pub test_labels: Vec<&'a [u8]>,
}

/// Per-class Dice and HD95 of `decoder` on the given items, averaged over
/// images; HD95 averages only where defined.
pub fn evaluate(
    decoder: &ToyDecoder<f32>,
    embeddings: &PatchGrid,
    labels: &[&[u8]],
    out: [usize; 2],
    mode: Hd95Mode,
) -> Result<FinalMetrics> {
    let k = decoder.classes();
    let (mut dsum, mut hsum, mut hn) = (vec![0.0; k - 1], vec![0.0; k - 1], vec![0usize; k - 1]);
    for (b, truth) in labels.iter().enumerate() {
        let pred = decoder.predict(embeddings.item(b))?;
        let pm = class_masks(&pred, out[0], out[1], k)?;
        let tm = class_masks(truth, out[0], out[1], k)?;
        for c in 0..k - 1 {
            dsum[c] += dice(&pm[c], &tm[c])?;
            if let Some(h) = hd95_with(&pm[c], &tm[c], mode)? {
                hsum[c] += h;
                hn[c] += 1;
            }
        }
    }
    let n = labels.len() as f64;
    let dice_v: Vec<f64> = dsum.iter().map(|d| d / n).collect();
    let hd: Vec<Option<f64>> = hsum
        .iter()
        .zip(&hn)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let defined: Vec<f64> = hd.iter().flatten().copied().collect();
    Ok(FinalMetrics {
        mean_dice: dice_v.iter().sum::<f64>() / dice_v.len() as f64,
        mean_hd95: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        dice: dice_v,
        hd95: hd,
    })
}

/// Phase 2: only the decoder is trained, on frozen student embeddings.
pub fn align_phase(
    decoder: &mut ToyDecoder<f32>,
    data: &AlignData,
    cfg: &TrainConfig,
    seed: u64,
    mode: Hd95Mode,
    log: &mut dyn FnMut(&str),
) -> Result<(Vec<EpochRow>, FinalMetrics)> {
    let n = data.train_labels.len();
    if n == 0 || data.test_labels.is_empty() {
        return Err(Error::contract("phase 2 needs non-empty train and held-out splits"));
    }
    if data.train_embeddings.batch() != n || data.test_embeddings.batch() != data.test_labels.len() {
        return Err(Error::dim("embedding batches do not match label counts"));
    }
    let side = (decoder.pixels() as f64).sqrt() as usize;
    let out = [side, side];
    let tokens = data.train_embeddings.tokens_per_item();
    let e = data.train_embeddings.channels();
    let mut opt = AdamW::new(cfg.adamw(), decoder.params().tensors().iter().map(Tensor::numel));
    let mut rows = Vec::with_capacity(cfg.epochs_phase2);
    let mut last = None;
    for epoch in 0..cfg.epochs_phase2 {
        let lr = cfg.lr(epoch, cfg.epochs_phase2)?;
        let batches = epoch_batches(n, cfg.batch_size, crate::rng::mix(seed, 2), epoch);
        let mut total = 0.0;
        for items in &batches {
            let mut tape = Tape::new();
            let bound = decoder.params().bind(&mut tape)?;
            let up = decoder.upsampler(&mut tape)?;
            let mut losses = Vec::with_capacity(items.len());
            for &i in items {
                let x = Tensor::new(vec![tokens, e], data.train_embeddings.item(i).to_vec())?;
                let x = tape.constant(&x)?;
                let l = decoder.logits(&mut tape, &bound, up, x)?;
                losses.push(decoder.loss(&mut tape, l, data.train_labels[i])?);
            }
            let s = tape.stack(&losses)?;
            let loss = tape.mean(s)?;
            total += tape.scalar(loss) as f64;
            tape.backward(loss)?;
            let mut grads = decoder.params().grads(&tape, &bound);
            drop(tape);
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let mut params: Vec<&mut Tensor<f32>> = decoder.params_mut().tensors_mut().iter_mut().collect();
            opt.step(&mut params, &grads, lr)?;
        }
        let m = evaluate(decoder, data.test_embeddings, &data.test_labels, out, mode)?;
        let row = EpochRow {
            phase: 2,
            epoch: epoch + 1,
            lr,
            loss: total / batches.len() as f64,
            teacher_losses: Vec::new(),
            alpha: Vec::new(),
            dice: m.dice.clone(),
            hd95: m.hd95.clone(),
        };
        log(&format!(
            "phase 2 epoch {:>3} lr {:.3e} loss {:.5} | dice {:.4} hd95 {}",
            row.epoch,
            lr,
            row.loss,
            m.mean_dice,
            fmt_opt(m.mean_hd95)
        ));
        rows.push(row);
        last = Some(m);
    }
    Ok((rows, last.expect("at least one epoch")))
}

/// Patches of every image for the student.
pub fn patchify_all(images: &[Image], cfg: &StudentConfig) -> Result<Vec<Tensor<f32>>> {
    images.iter().map(|im| patchify(im, cfg)).collect()
}
