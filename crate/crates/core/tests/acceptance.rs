//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criteria run one after another in a single test so
//! the timing budgets are not distorted by parallel test threads.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use agglomerate::balancing::{
    combine_on_tape, uniform_weights, Balancer, BalancerConfig, BalancingKind, LossVector,
};
use agglomerate::config::ExperimentConfig;
use agglomerate::features::{decode_embeddings, encode_embeddings, Image, PatchGrid};
use agglomerate::numerics::{gradcheck, Tape, Tensor, Var, GRADCHECK_EPS};
use agglomerate::params::Bound;
use agglomerate::rng;
use agglomerate::segmetrics::{dice, hd95, BinaryMask};
use agglomerate::standardize::{hadamard, phi_s_apply, phi_s_fit};
use agglomerate::student::{ProjectionHead, Student, StudentConfig};
use agglomerate::trainer::{
    distill_phase, lr_schedule, patchify_all, run_ablation, run_experiment, table2_variants, table3_variants,
    thread_count, Dataset, Distiller, ScheduleKind, TeacherBundle, ToyDecoder, Variant, NUM_CLASSES,
};
use agglomerate::Result;

type Check = (bool, String);

fn perturb(tensors: &mut [Tensor<f64>], seed: u64, std: f64) {
    let mut r = rng::stream(seed, "acceptance-perturb");
    for t in tensors {
        t.data_mut().iter_mut().for_each(|v| *v += std * rng::normal(&mut r));
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "acceptance-tensor");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

const PROBES: usize = 150;

fn gradcheck_student() -> Result<f64> {
    let cfg = StudentConfig::default();
    let mut s = Student::<f64>::init(&cfg, 1)?;
    perturb(s.params_mut().tensors_mut(), 1, 0.2);
    let mut inputs = s.params().tensors().to_vec();
    inputs.push(random_tensor(&[cfg.tokens(), cfg.patch_dim()], 2).with_grad());
    let target = random_tensor(&[cfg.tokens(), cfg.embed_dim], 3);
    let n = inputs.len();
    let rep = gradcheck(
        &inputs,
        |tape, v| {
            let y = s.encode(tape, &Bound::new(v[..n - 1].to_vec()), v[n - 1])?;
            let t = tape.constant(&target)?;
            let w = tape.mul(y, t)?;
            tape.sum(w)
        },
        PROBES,
        11,
        GRADCHECK_EPS,
    )?;
    Ok(rep.max_rel_error)
}

fn gradcheck_head() -> Result<f64> {
    let mut h = ProjectionHead::<f64>::init("S", 64, 32, 0);
    perturb(h.params_mut().tensors_mut(), 4, 0.3);
    let mut inputs = h.params().tensors().to_vec();
    inputs.push(random_tensor(&[64, 64], 5).with_grad());
    let target = random_tensor(&[64, 32], 6);
    let rep = gradcheck(
        &inputs,
        |tape, v| {
            let z = h.project(tape, &Bound::new(v[..4].to_vec()), v[4])?;
            let t = tape.constant(&target)?;
            tape.mse_loss(z, t)
        },
        PROBES,
        12,
        GRADCHECK_EPS,
    )?;
    Ok(rep.max_rel_error)
}

fn scalars(tape: &mut Tape<f64>, v: &[f64]) -> Result<Vec<Var>> {
    v.iter().map(|&x| tape.constant(&Tensor::scalar(x))).collect()
}

fn gradcheck_mlp_balancer() -> Result<f64> {
    let cfg = BalancerConfig {
        kind: BalancingKind::Mlp,
        ..BalancerConfig::default()
    };
    let mut b = Balancer::<f64>::init(&cfg, 64, &[64, 32, 64], 0)?;
    perturb(b.params_mut().tensors_mut(), 7, 0.6);
    let losses = [0.9, 0.2, 0.45];
    let rep = gradcheck(
        b.params().tensors(),
        |tape, v| {
            let a = b.mlp_on_tape(tape, &Bound::new(v.to_vec()), &losses)?;
            let ls = scalars(tape, &losses)?;
            combine_on_tape(tape, a, &ls, 0.01)
        },
        PROBES,
        13,
        GRADCHECK_EPS,
    )?;
    Ok(rep.max_rel_error)
}

fn gradcheck_attention_balancer() -> Result<f64> {
    let cfg = BalancerConfig::default();
    let mut b = Balancer::<f64>::init(&cfg, 64, &[64, 32, 64], 0)?;
    perturb(b.params_mut().tensors_mut(), 8, 0.3);
    let student = random_tensor(&[64, 64], 9);
    let teachers = [random_tensor(&[64, 64], 10), random_tensor(&[64, 32], 11), random_tensor(&[64, 64], 12)];
    let rep = gradcheck(
        b.params().tensors(),
        |tape, v| {
            let s = tape.constant(&student)?;
            let ts = teachers.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
            let a = b.attn_on_tape(tape, &Bound::new(v.to_vec()), s, &ts)?;
            let ls = scalars(tape, &[1.1, 0.3, 0.6])?;
            combine_on_tape(tape, a, &ls, 0.01)
        },
        PROBES,
        14,
        GRADCHECK_EPS,
    )?;
    Ok(rep.max_rel_error)
}

fn gradcheck_decoder() -> Result<f64> {
    let mut d = ToyDecoder::<f64>::init(64, NUM_CLASSES, [8, 8], [64, 64], 0)?;
    perturb(d.params_mut().tensors_mut(), 15, 0.3);
    let mut inputs = d.params().tensors().to_vec();
    inputs.push(random_tensor(&[64, 64], 16).with_grad());
    let labels: Vec<u8> = (0..64 * 64).map(|i| ((i / 64) / 22) as u8).collect();
    let rep = gradcheck(
        &inputs,
        |tape, v| {
            let up = d.upsampler(tape)?;
            let l = d.logits(tape, &Bound::new(v[..2].to_vec()), up, v[2])?;
            d.loss(tape, l, &labels)
        },
        PROBES,
        16,
        GRADCHECK_EPS,
    )?;
    Ok(rep.max_rel_error)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let parts: [(&str, fn() -> Result<f64>); 5] = [
        ("student", gradcheck_student),
        ("head", gradcheck_head),
        ("mlp balancer", gradcheck_mlp_balancer),
        ("attention balancer", gradcheck_attention_balancer),
        ("decoder", gradcheck_decoder),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, f) in parts {
        let e = f().expect("gradcheck runs");
        ok &= e < 1e-4;
        detail.push(format!("{name} {e:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    (ok, format!("max rel error: {}; {PROBES} probes each; {secs:.1}s", detail.join(", ")))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let mut r = rng::stream(2, "acceptance-simplex");
    let mut worst_sum = 0.0f64;
    let mut min_alpha = f64::INFINITY;
    let n = 10_000;
    for i in 0..n {
        let t = 1 + (rng::normal(&mut r).abs() * 3.0) as usize % 8;
        let seed = i as u64;
        let alpha: Vec<f64> = match i % 3 {
            0 => uniform_weights(t).unwrap().as_slice().to_vec(),
            1 => {
                let cfg = BalancerConfig {
                    kind: BalancingKind::Mlp,
                    hidden: 8,
                    ..BalancerConfig::default()
                };
                let mut b = Balancer::<f64>::init(&cfg, 4, &vec![1; t], seed).unwrap();
                let std = rng::normal(&mut r).abs().min(1.0);
                perturb(b.params_mut().tensors_mut(), seed, std);
                let l: Vec<f64> = (0..t).map(|_| rng::normal(&mut r).abs() * 5.0).collect();
                b.mlp_weights(&LossVector::detached(l).unwrap()).unwrap().as_slice().to_vec()
            }
            _ => {
                let cfg = BalancerConfig {
                    attn_dim: 8,
                    ..BalancerConfig::default()
                };
                let channels: Vec<usize> = (0..t).map(|k| 2 + k % 4).collect();
                let mut b = Balancer::<f64>::init(&cfg, 6, &channels, seed).unwrap();
                perturb(b.params_mut().tensors_mut(), seed, 0.5);
                let grid = |c: usize, s: u64| {
                    let mut g = rng::stream(s, "acceptance-grid");
                    let scale = 1.0 + 10.0 * rng::normal(&mut g).abs();
                    PatchGrid::new(1, 2, 2, c, (0..4 * c).map(|_| (scale * rng::normal(&mut g)) as f32).collect())
                        .unwrap()
                };
                let s = grid(6, seed * 31 + 1);
                let ts: Vec<PatchGrid> = channels.iter().enumerate().map(|(k, &c)| grid(c, seed * 31 + 2 + k as u64)).collect();
                b.attn_weights(&s, &ts).unwrap().as_slice().to_vec()
            }
        };
        assert_eq!(alpha.len(), t);
        worst_sum = worst_sum.max((alpha.iter().sum::<f64>() - 1.0).abs());
        min_alpha = alpha.iter().copied().fold(min_alpha, f64::min);
    }
    (
        min_alpha > 0.0 && worst_sum < 1e-6,
        format!("{n} draws: min alpha {min_alpha:.3e}, max |sum-1| {worst_sum:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let (n, c) = (10_000, 24);
    let mut r = rng::stream(3, "acceptance-phi-s");
    // random orthogonal mixing of channels with stds spanning two decades
    let mut q: Vec<f64> = (0..c * c).map(|_| rng::normal(&mut r)).collect();
    for i in 0..c {
        for j in 0..i {
            let d: f64 = (0..c).map(|k| q[i * c + k] * q[j * c + k]).sum();
            for k in 0..c {
                q[i * c + k] -= d * q[j * c + k];
            }
        }
        let norm = (0..c).map(|k| q[i * c + k].powi(2)).sum::<f64>().sqrt();
        (0..c).for_each(|k| q[i * c + k] /= norm);
    }
    let stds: Vec<f64> = (0..c).map(|i| 10f64.powf(-1.0 + 2.0 * i as f64 / (c - 1) as f64)).collect();
    let offsets: Vec<f64> = (0..c).map(|i| 3.0 * (i as f64 - 12.0)).collect();
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let z: Vec<f64> = (0..c).map(|i| stds[i] * rng::normal(&mut r)).collect();
        for k in 0..c {
            let v: f64 = (0..c).map(|i| z[i] * q[i * c + k]).sum::<f64>() + offsets[k];
            data.push(v as f32);
        }
    }
    let g = PatchGrid::new(n, 1, 1, c, data).unwrap();
    let state = phi_s_fit([&g]).unwrap();
    let out = phi_s_apply(&g, &state).unwrap();
    let oc = out.channels();
    let mut mean = vec![0.0f64; oc];
    for t in out.tokens() {
        t.iter().zip(mean.iter_mut()).for_each(|(&v, m)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0f64; oc];
    for t in out.tokens() {
        for ((&v, s), m) in t.iter().zip(var.iter_mut()).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n as f64;
        }
    }
    let max_mean = mean.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    let vmean = var.iter().sum::<f64>() / oc as f64;
    let spread = (var.iter().cloned().fold(f64::MIN, f64::max) - var.iter().cloned().fold(f64::MAX, f64::min)) / vmean;

    let mut hadamard_ok = true;
    let mut order = 1;
    while order <= 256 {
        let h = hadamard(order).unwrap();
        for i in 0..order {
            for j in 0..order {
                let dot: i64 = (0..order).map(|k| (h[i * order + k] * h[j * order + k]) as i64).sum();
                hadamard_ok &= dot == if i == j { order as i64 } else { 0 };
            }
        }
        order *= 2;
    }
    let rejects = [3, 6, 12, 100, 255].iter().all(|&n| hadamard(n).is_err());
    (
        max_mean < 1e-5 && spread < 0.03 && hadamard_ok && rejects,
        format!(
            "max |mean| {max_mean:.1e}, variance spread {:.3}%, H·Hᵀ = nI for n = 1..256 (powers of two) {}, non-powers rejected {rejects}",
            spread * 100.0,
            if hadamard_ok { "exact" } else { "BROKEN" }
        ),
    )
}

// ---------------------------------------------------------------- 4

/// Brute-force reference: foreground pixels touching background or the
/// frame, all-pairs distances, sorted linear-interpolated 95th percentile.
fn oracle_hd95(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let edge = |m: &[bool]| -> Vec<(i64, i64)> {
        let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize];
        let mut pts = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if at(y, x) && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(yy, xx)| !at(yy, xx)) {
                    pts.push((y, x));
                }
            }
        }
        pts
    };
    let (ea, eb) = (edge(a), edge(b));
    if ea.is_empty() || eb.is_empty() {
        return None;
    }
    let near = |p: &(i64, i64), set: &[(i64, i64)]| {
        let d2 = set.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap();
        (d2 as f64).sqrt()
    };
    let mut d: Vec<f64> = ea.iter().map(|p| near(p, &eb)).chain(eb.iter().map(|p| near(p, &ea))).collect();
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let k = rank as usize;
    let frac = rank - k as f64;
    Some(if k + 1 < d.len() { d[k] * (1.0 - frac) + d[k + 1] * frac } else { d[k] })
}

fn oracle_dice(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

fn random_mask(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<bool> {
    let u = |r: &mut rand_chacha::ChaCha8Rng| rng::normal(r).abs().fract();
    let style = (u(r) * 4.0) as usize;
    let (cy, cx, rad) = (u(r) * n as f64, u(r) * n as f64, 1.0 + u(r) * n as f64 / 2.5);
    let density = u(r) * 0.5;
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            match style {
                0 => (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad,
                1 => (y - cy).abs() <= rad / 2.0 && (x - cx).abs() <= rad,
                2 => u(r) < density,
                _ => false,
            }
        })
        .collect()
}

fn criterion_4() -> Check {
    let n = 32;
    let mut r = rng::stream(4, "acceptance-masks");
    let (mut dice_exact, mut worst_hd, mut undef_agree, mut undef) = (true, 0.0f64, true, 0);
    for _ in 0..500 {
        let (a, b) = (random_mask(&mut r, n), random_mask(&mut r, n));
        let (ma, mb) = (BinaryMask::new(n, n, a.clone()).unwrap(), BinaryMask::new(n, n, b.clone()).unwrap());
        dice_exact &= dice(&ma, &mb).unwrap() == oracle_dice(&a, &b);
        match (hd95(&ma, &mb).unwrap(), oracle_hd95(&a, &b, n, n)) {
            (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
            (None, None) => undef += 1,
            _ => undef_agree = false,
        }
    }
    let same = BinaryMask::from_fn(n, n, |y, x| (y as i64 - 16).pow(2) + (x as i64 - 16).pow(2) < 50).unwrap();
    let fixture_same = dice(&same, &same).unwrap() == 1.0 && hd95(&same, &same).unwrap() == Some(0.0);
    let p = BinaryMask::from_fn(n, n, |y, x| (y, x) == (10, 4)).unwrap();
    let q = BinaryMask::from_fn(n, n, |y, x| (y, x) == (10, 9)).unwrap();
    let fixture_pixels = hd95(&p, &q).unwrap() == Some(5.0);
    (
        dice_exact && worst_hd < 1e-9 && undef_agree && fixture_same && fixture_pixels,
        format!(
            "500 pairs: dice exact {dice_exact}, max hd95 diff {worst_hd:.1e}, {undef} undefined pairs agree {undef_agree}; fixtures identical {fixture_same}, distance-5 pixels {fixture_pixels}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.epochs_phase1 = 30;
    let tc = &cfg.trainer;
    let data = Dataset::generate(rng::mix(cfg.seed, 0xda7a), tc.train_images, tc.test_images).unwrap();
    let train: Vec<Image> = data.train.iter().map(|s| s.image.clone()).collect();
    let test: Vec<Image> = data.test.iter().map(|s| s.image.clone()).collect();
    let bundle = TeacherBundle::build(&cfg.teachers, cfg.standardization.kind, &train, &test, cfg.student.grid).unwrap();
    let mut model =
        Distiller::init(&cfg.student, &cfg.balancing, &bundle.names, &bundle.channels(), cfg.seed).unwrap();
    let patches = patchify_all(&train, &cfg.student).unwrap();
    let rows = distill_phase(&mut model, &bundle, &patches, tc, cfg.seed, &mut |_| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let drops: Vec<f64> = first.teacher_losses.iter().zip(&last.teacher_losses).map(|(a, b)| 1.0 - b / a).collect();
    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    // ma[k] averages epochs k+1..=k+10; compare every pair ending after epoch 10
    let ma_ok = ma.windows(2).all(|w| w[1] <= w[0]);
    let ok = drops.iter().all(|&d| d >= 0.9) && secs < 120.0 && ma_ok;
    let per: Vec<String> = bundle.names.iter().zip(&drops).map(|(n, d)| format!("{n} {:.1}%", d * 100.0)).collect();
    (
        ok,
        format!(
            "loss drop epoch 1 to 30: {}; 10-epoch moving average non-increasing {ma_ok}; {secs:.1}s",
            per.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 6 and 7

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Smaller training budget for the multi-seed trend runs; the full default
/// config takes minutes per run.
fn trend_profile(base: &ExperimentConfig) -> ExperimentConfig {
    let mut c = base.clone();
    c.trainer.train_images = 128;
    c.trainer.test_images = 32;
    c.trainer.epochs_phase1 = 20;
    c.trainer.epochs_phase2 = 30;
    c.trainer.batch_size = 4;
    c
}

fn trend(variants: Vec<Variant>, rows: &[(u8, u8)], name: &str) -> Check {
    let start = Instant::now();
    let picked: Vec<Variant> = variants.into_iter().filter(|v| v.row.is_some_and(|r| rows.contains(&r))).collect();
    let report = run_ablation(&picked, &TREND_SEEDS, false, thread_count(), None, &|_| {}).unwrap();
    println!("{}", report.to_markdown());
    let t = report.trends.iter().find(|t| t.name.starts_with(name)).expect("trend evaluated");
    (
        t.holds,
        format!("{} over {} seeds, {:.0}s", t.detail, TREND_SEEDS.len(), start.elapsed().as_secs_f64()),
    )
}

fn criterion_6() -> Check {
    let base = trend_profile(&ExperimentConfig::default());
    trend(table2_variants(&base), &[(2, 1), (2, 2), (2, 5)], "table2")
}

fn criterion_7() -> Check {
    let base = trend_profile(&ExperimentConfig::default());
    trend(table3_variants(&base), &[(3, 1), (3, 3)], "table3")
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.trainer.epochs_phase1 = 3;
    cfg.trainer.epochs_phase2 = 3;
    cfg.trainer.train_images = 16;
    cfg.trainer.test_images = 4;
    let a = run_experiment(&cfg, &mut |_| {}).unwrap().report.to_csv();
    let b = run_experiment(&cfg, &mut |_| {}).unwrap().report.to_csv();
    let identical = a.as_bytes() == b.as_bytes();

    let mut r = rng::stream(8, "acceptance-format");
    let mut vals: Vec<f32> = (0..3 * 5 * 7 * 6).map(|_| rng::normal(&mut r) as f32 * 1e3).collect();
    vals[..4].copy_from_slice(&[-0.0, f32::MIN_POSITIVE / 3.0, f32::MAX, -f32::MIN_POSITIVE]);
    let g = PatchGrid::new(3, 5, 7, 6, vals).unwrap();
    let bytes = encode_embeddings(&g);
    let back = decode_embeddings(&bytes).unwrap();
    let bit_exact = back.dims() == g.dims() && back.data().iter().zip(g.data()).all(|(x, y)| x.to_bits() == y.to_bits());

    let mut truncations_rejected = true;
    for cut in 0..bytes.len() {
        truncations_rejected &= decode_embeddings(&bytes[..cut]).is_err_and(|e| !e.to_string().is_empty());
    }
    let mut corruptions_rejected = true;
    for pos in (0..bytes.len()).step_by(37) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x5a;
        corruptions_rejected &= decode_embeddings(&bad).is_err();
    }
    let diag = decode_embeddings(&bytes[..bytes.len() / 2]).unwrap_err().to_string();
    (
        identical && bit_exact && truncations_rejected && corruptions_rejected,
        format!(
            "report.csv identical {identical}; round trip bit-exact {bit_exact}; all {} truncations rejected {truncations_rejected}; byte flips rejected {corruptions_rejected} (e.g. \"{diag}\")",
            bytes.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let mut ok = true;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        for total in [1usize, 2, 30, 100] {
            let first = lr_schedule(0, total, 1e-4, 1e-5, kind).unwrap();
            let last = lr_schedule(total - 1, total, 1e-4, 1e-5, kind).unwrap();
            ok &= first == 1e-4 && (total == 1 || last == 1e-5);
        }
    }
    let cfg = ExperimentConfig::default();
    let t = &cfg.trainer;
    let p1 = (t.lr(0, t.epochs_phase1).unwrap(), t.lr(t.epochs_phase1 - 1, t.epochs_phase1).unwrap());
    let p2 = (t.lr(0, t.epochs_phase2).unwrap(), t.lr(t.epochs_phase2 - 1, t.epochs_phase2).unwrap());
    ok &= p1 == (1e-4, 1e-5) && p2 == (1e-4, 1e-5);
    (ok, format!("default config phase 1 {:e} to {:e}, phase 2 {:e} to {:e}", p1.0, p1.1, p2.0, p2.1))
}

#[test]
fn acceptance() {
    let criteria: [(u8, &str, fn() -> Check); 9] = [
        (1, "gradient correctness", criterion_1),
        (2, "simplex invariant", criterion_2),
        (3, "PHI-S standardization", criterion_3),
        (4, "metric oracles", criterion_4),
        (5, "distillation convergence", criterion_5),
        (6, "balancing trend", criterion_6),
        (7, "teacher selection trend", criterion_7),
        (8, "determinism and formats", criterion_8),
        (9, "schedule endpoints", criterion_9),
    ];
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(c) => c,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let line = format!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        lines.push(line);
        if !pass {
            failed.push(id);
        }
    }
    println!("\n{}", lines.join("\n"));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
