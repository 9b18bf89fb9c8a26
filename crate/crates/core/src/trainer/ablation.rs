use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_experiment, write_run_dir};
use crate::balancing::BalancingKind;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::standardize::StandardizerKind;
use crate::trainer::report::{csv_field, fmt_opt};

/// Allowed Dice shortfall (0.5 points) before a trend counts as broken.
pub const TREND_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Balancing,
    Standardization,
    Teachers,
    Seed,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "balancing" => Ok(Self::Balancing),
            "standardization" => Ok(Self::Standardization),
            "teachers" => Ok(Self::Teachers),
            "seed" => Ok(Self::Seed),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected balancing, standardization, teachers or seed)"
            ))),
        }
    }
}

/// One configuration of the grid. `row` places it in an ablation table
/// as `(table, row)`.
#[derive(Debug, Clone)]
pub struct Variant {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub row: Option<(u8, u8)>,
}

fn with(base: &ExperimentConfig, b: BalancingKind, s: StandardizerKind) -> ExperimentConfig {
    let mut c = base.clone();
    c.balancing.kind = b;
    c.standardization.kind = s;
    c
}

fn combo_label(c: &ExperimentConfig) -> String {
    let b = match c.balancing.kind {
        BalancingKind::Uniform => "none",
        BalancingKind::Mlp => "MLP",
        BalancingKind::Attention => "Attn",
    };
    format!("{b} + {}", c.standardization.kind.label())
}

/// Balancing × standardization rows ① none+L2, ② MLP+L2, ③ MLP+PHI-S,
/// ④ Attn+L2, ⑤ Attn+PHI-S.
pub fn table2_variants(base: &ExperimentConfig) -> Vec<Variant> {
    use BalancingKind::*;
    use StandardizerKind::*;
    [(Uniform, L2), (Mlp, L2), (Mlp, PhiS), (Attention, L2), (Attention, PhiS)]
        .iter()
        .enumerate()
        .map(|(i, &(b, s))| {
            let cfg = with(base, b, s);
            Variant {
                label: combo_label(&cfg),
                cfg,
                row: Some((2, i as u8 + 1)),
            }
        })
        .collect()
}

/// Teacher subsets. With three teachers A, B, C the rows are {A}, {A,B},
/// {A,B,C}, {A,C}, {B,C}; otherwise every non-empty subset in index order.
pub fn table3_variants(base: &ExperimentConfig) -> Vec<Variant> {
    let n = base.teachers.len();
    let subsets: Vec<Vec<usize>> = if n == 3 {
        vec![vec![0], vec![0, 1], vec![0, 1, 2], vec![0, 2], vec![1, 2]]
    } else {
        (1..(1u32 << n))
            .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
            .collect()
    };
    subsets
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let mut cfg = base.clone();
            cfg.teachers = idx.iter().map(|&k| base.teachers[k].clone()).collect();
            let names: Vec<&str> = cfg.teachers.iter().map(|t| t.name.as_str()).collect();
            Variant {
                label: format!("{{{}}}", names.join(",")),
                cfg,
                row: (n == 3).then_some((3, i as u8 + 1)),
            }
        })
        .collect()
}

/// Cross product of the requested axes around `base`. The seed axis only
/// changes how results are aggregated.
pub fn build_grid(base: &ExperimentConfig, axes: &[Axis]) -> Vec<Variant> {
    let has = |a| axes.contains(&a);
    let mut grid = match (has(Axis::Balancing), has(Axis::Standardization)) {
        (true, true) => table2_variants(base),
        (true, false) => [BalancingKind::Uniform, BalancingKind::Mlp, BalancingKind::Attention]
            .iter()
            .map(|&b| {
                let cfg = with(base, b, base.standardization.kind);
                Variant {
                    label: combo_label(&cfg),
                    cfg,
                    row: None,
                }
            })
            .collect(),
        (false, true) => [StandardizerKind::L2, StandardizerKind::PhiS]
            .iter()
            .map(|&s| {
                let cfg = with(base, base.balancing.kind, s);
                Variant {
                    label: combo_label(&cfg),
                    cfg,
                    row: None,
                }
            })
            .collect(),
        (false, false) => vec![Variant {
            label: combo_label(base),
            cfg: base.clone(),
            row: None,
        }],
    };
    if has(Axis::Teachers) {
        let single = grid.len() == 1;
        grid = grid
            .iter()
            .flat_map(|v| {
                table3_variants(&v.cfg).into_iter().map(move |t| Variant {
                    label: if single { t.label.clone() } else { format!("{} / {}", v.label, t.label) },
                    row: if single { t.row } else { None },
                    cfg: t.cfg,
                })
            })
            .collect();
    }
    grid
}

/// Worker count from `AGGLOMERATE_THREADS`, else the available cores.
pub fn thread_count() -> usize {
    std::env::var("AGGLOMERATE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: usize,
    pub label: String,
    pub seed: u64,
    pub dice: f64,
    pub hd95: Option<f64>,
    /// Mean over teachers of the held-out head MSE.
    pub fidelity_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub row: Option<(u8, u8)>,
    pub seed: Option<u64>,
    pub runs: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub fidelity_mean: f64,
    pub fidelity_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunSummary>,
    pub trends: Vec<TrendCheck>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Collapses runs into one row per variant, or per (variant, seed).
pub fn aggregate(variants: &[Variant], runs: &[RunSummary], per_seed: bool) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == vi).collect();
        let groups: Vec<Vec<&RunSummary>> = if per_seed {
            mine.iter().map(|r| vec![*r]).collect()
        } else {
            vec![mine]
        };
        for g in groups.into_iter().filter(|g| !g.is_empty()) {
            let (dm, ds) = mean_std(&g.iter().map(|r| r.dice).collect::<Vec<_>>());
            let (fm, fs) = mean_std(&g.iter().map(|r| r.fidelity_mse).collect::<Vec<_>>());
            let h: Vec<f64> = g.iter().filter_map(|r| r.hd95).collect();
            let (hm, hs) = if h.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&h);
                (Some(m), Some(s))
            };
            rows.push(AblationRow {
                label: v.label.clone(),
                row: v.row,
                seed: per_seed.then(|| g[0].seed),
                runs: g.len(),
                dice_mean: dm,
                dice_std: ds,
                hd95_mean: hm,
                hd95_std: hs,
                fidelity_mean: fm,
                fidelity_std: fs,
            });
        }
    }
    rows
}

fn variant_dice(variants: &[Variant], runs: &[RunSummary], row: (u8, u8)) -> Option<(String, f64)> {
    let vi = variants.iter().position(|v| v.row == Some(row))?;
    let d: Vec<f64> = runs.iter().filter(|r| r.variant == vi).map(|r| r.dice).collect();
    (!d.is_empty()).then(|| (variants[vi].label.clone(), mean_std(&d).0))
}

/// Ordering checks for the ablation tables present in the grid.
pub fn trend_checks(variants: &[Variant], runs: &[RunSummary]) -> Vec<TrendCheck> {
    let mut out = Vec::new();
    let mut chain = |name: &str, rows: &[(u8, u8)]| {
        let found: Option<Vec<(String, f64)>> = rows.iter().map(|&r| variant_dice(variants, runs, r)).collect();
        if let Some(found) = found {
            let holds = found.windows(2).all(|w| w[0].1 >= w[1].1 - TREND_TOLERANCE);
            let detail = found
                .iter()
                .map(|(l, d)| format!("{l} {:.2}", d * 100.0))
                .collect::<Vec<_>>()
                .join(" >= ");
            out.push(TrendCheck {
                name: name.into(),
                holds,
                detail,
            });
        }
    };
    chain("table2: Attn+PHI-S >= MLP+L2 >= none+L2", &[(2, 5), (2, 2), (2, 1)]);
    chain("table3: all teachers >= first teacher alone", &[(3, 3), (3, 1)]);
    out
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Runs every (variant, seed) pair on `threads` workers. Results do not
/// depend on the worker count. With `out_dir`, each run writes its own
/// directory below `out_dir/runs`.
pub fn run_ablation(
    variants: &[Variant],
    seeds: &[u64],
    per_seed: bool,
    threads: usize,
    out_dir: Option<&Path>,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunSummary>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(vi, seed)| {
                let v = &variants[vi];
                let mut cfg = v.cfg.clone();
                cfg.seed = seed;
                let out = run_experiment(&cfg, &mut |_| {})?;
                if let Some(dir) = out_dir {
                    write_run_dir(&dir.join("runs").join(format!("{}-seed{seed}", slug(&v.label))), &out)?;
                }
                let m = out.report.final_metrics.as_ref().expect("phase 2 ran");
                let fid = &out.report.fidelity_mse;
                let summary = RunSummary {
                    variant: vi,
                    label: v.label.clone(),
                    seed,
                    dice: m.mean_dice,
                    hd95: m.mean_hd95,
                    fidelity_mse: fid.iter().sum::<f64>() / fid.len() as f64,
                };
                progress(&format!(
                    "{} seed {seed}: dice {:.4} hd95 {}",
                    v.label,
                    summary.dice,
                    fmt_opt(summary.hd95)
                ));
                Ok(summary)
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        rows: aggregate(variants, &runs, per_seed),
        trends: trend_checks(variants, &runs),
        runs,
    })
}

const CIRCLED: [&str; 5] = ["①", "②", "③", "④", "⑤"];

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "row,config,seed,runs,dice_mean,dice_std,hd95_mean,hd95_std,fidelity_mse_mean,fidelity_mse_std\r\n",
        );
        for r in &self.rows {
            let f = [
                r.row.map_or(String::new(), |(_, i)| i.to_string()),
                csv_field(&r.label),
                r.seed.map_or(String::new(), |s| s.to_string()),
                r.runs.to_string(),
                r.dice_mean.to_string(),
                r.dice_std.to_string(),
                fmt_opt(r.hd95_mean),
                fmt_opt(r.hd95_std),
                r.fidelity_mean.to_string(),
                r.fidelity_std.to_string(),
            ];
            out.push_str(&f.join(","));
            out.push_str("\r\n");
        }
        out
    }

    /// Table with Dice in percentage points, mean ± std over seeds.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| # | Configuration | Seeds | avg. Dice ↑ | avg. HD95 ↓ | Teacher MSE |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let idx = r.row.map_or(String::new(), |(_, i)| CIRCLED[(i as usize - 1).min(4)].to_string());
            let seeds = r.seed.map_or(r.runs.to_string(), |v| format!("seed {v}"));
            let hd = match (r.hd95_mean, r.hd95_std) {
                (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                _ => "undef".into(),
            };
            s.push_str(&format!(
                "| {idx} | {} | {seeds} | {:.2} ± {:.2} | {hd} | {:.4} ± {:.4} |\n",
                r.label.replace('|', "\\|"),
                r.dice_mean * 100.0,
                r.dice_std * 100.0,
                r.fidelity_mean,
                r.fidelity_std
            ));
        }
        if !self.trends.is_empty() {
            s.push('\n');
            for t in &self.trends {
                let mark = if t.holds { "holds" } else { "TREND FAILURE" };
                s.push_str(&format!("- {}: {mark} ({})\n", t.name, t.detail));
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}
