//! Plot-ready CSV views of a finished run: loss curves, balancing weight
//! trajectories and a two-component PCA of the final student tokens.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{load_embeddings, PatchGrid};
use crate::linalg::symmetric_eigen;
use crate::trainer::{csv_field, fmt_opt, RunReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Curves,
    Alpha,
    Pca,
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curves" => Ok(Self::Curves),
            "alpha" => Ok(Self::Alpha),
            "pca" => Ok(Self::Pca),
            other => Err(Error::Config(format!("unknown export `{other}`, expected curves, alpha or pca"))),
        }
    }
}

fn header(cols: impl IntoIterator<Item = String>) -> String {
    let mut s = cols.into_iter().map(|c| csv_field(&c)).collect::<Vec<_>>().join(",");
    s.push_str("\r\n");
    s
}

/// One row per epoch of both phases, numbered consecutively.
pub fn curves_csv(report: &RunReport) -> String {
    let mut cols = vec!["step".to_string(), "phase".into(), "epoch".into(), "lr".into(), "loss".into()];
    cols.extend(report.teachers.iter().map(|t| format!("loss_{t}")));
    cols.push("mean_dice".into());
    cols.push("mean_hd95".into());
    let mut out = header(cols);
    for (i, r) in report.rows.iter().enumerate() {
        let mut f = vec![
            (i + 1).to_string(),
            r.phase.to_string(),
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
        ];
        if r.teacher_losses.is_empty() {
            f.extend(std::iter::repeat_n(String::new(), report.teachers.len()));
        } else {
            f.extend(r.teacher_losses.iter().map(f64::to_string));
        }
        if r.dice.is_empty() {
            f.extend([String::new(), String::new()]);
        } else {
            f.push((r.dice.iter().sum::<f64>() / r.dice.len() as f64).to_string());
            let defined: Vec<f64> = r.hd95.iter().flatten().copied().collect();
            f.push(fmt_opt((!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)));
        }
        out.push_str(&f.join(","));
        out.push_str("\r\n");
    }
    out
}

/// Per-teacher weights over phase 1, one row per epoch.
pub fn alpha_csv(report: &RunReport) -> String {
    let mut cols = vec!["epoch".to_string()];
    cols.extend(report.teachers.iter().map(|t| format!("alpha_{t}")));
    let mut out = header(cols);
    for r in report.phase_rows(1) {
        let mut f = vec![r.epoch.to_string()];
        f.extend(r.alpha.iter().map(f64::to_string));
        out.push_str(&f.join(","));
        out.push_str("\r\n");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[channels, 2]` row-major.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// `[tokens, 2]` row-major.
    pub scores: Vec<f64>,
    /// Mean squared residual per token after projecting onto two components.
    pub reconstruction_mse: f64,
}

/// Two-component PCA over every token of `grid`.
pub fn pca2(grid: &PatchGrid) -> Result<Pca> {
    let c = grid.channels();
    let n = grid.num_tokens();
    if n < 2 || c < 2 {
        return Err(Error::contract(format!("PCA needs >= 2 tokens and channels, got {n} x {c}")));
    }
    let mut mean = vec![0.0; c];
    for t in grid.tokens() {
        for (m, &v) in mean.iter_mut().zip(t) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    for t in grid.tokens() {
        for (d, (&v, m)) in centered.iter_mut().zip(t.iter().zip(&mean)) {
            *d = v as f64 - m;
        }
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= (n - 1) as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let (vals, vecs) = symmetric_eigen(&cov, c);
    let components: Vec<f64> = (0..c).flat_map(|i| [vecs[i * c], vecs[i * c + 1]]).collect();
    let mut scores = Vec::with_capacity(n * 2);
    let mut resid = 0.0;
    for t in grid.tokens() {
        for (d, (&v, m)) in centered.iter_mut().zip(t.iter().zip(&mean)) {
            *d = v as f64 - m;
        }
        let s: [f64; 2] = std::array::from_fn(|k| (0..c).map(|i| centered[i] * components[i * 2 + k]).sum());
        resid += (0..c)
            .map(|i| (centered[i] - s[0] * components[i * 2] - s[1] * components[i * 2 + 1]).powi(2))
            .sum::<f64>();
        scores.extend(s);
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues: vals,
        scores,
        reconstruction_mse: resid / n as f64,
    })
}

/// Token coordinates and their two principal scores.
pub fn pca_csv(grid: &PatchGrid) -> Result<String> {
    let p = pca2(grid)?;
    let mut out = header(["item", "row", "col", "pc1", "pc2"].map(String::from));
    let (gh, gw) = (grid.grid_h(), grid.grid_w());
    for (i, s) in p.scores.chunks(2).enumerate() {
        let (b, rem) = (i / (gh * gw), i % (gh * gw));
        out.push_str(&format!("{b},{},{},{},{}\r\n", rem / gw, rem % gw, s[0], s[1]));
    }
    Ok(out)
}

/// Reads the artifacts `kind` needs from a run directory.
pub fn export_run(run_dir: &Path, kind: ExportKind) -> Result<String> {
    if !run_dir.is_dir() {
        return Err(Error::Config(format!("run directory {} does not exist", run_dir.display())));
    }
    let need = |name: &str| {
        let p = run_dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Config(format!("run artifact {} is missing", p.display())))
        }
    };
    match kind {
        ExportKind::Curves | ExportKind::Alpha => {
            let p = need("report.json")?;
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let report = RunReport::from_json(&text)?;
            Ok(if kind == ExportKind::Curves {
                curves_csv(&report)
            } else {
                alpha_csv(&report)
            })
        }
        ExportKind::Pca => pca_csv(&load_embeddings(need("tokens.bin")?)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn anisotropic(n: usize, c: usize, seed: u64) -> PatchGrid {
        let mut r = rng::stream(seed, "pca-test");
        let data = (0..n * c)
            .map(|i| {
                let ch = i % c;
                (rng::normal(&mut r) * (c - ch) as f64 + ch as f64) as f32
            })
            .collect();
        PatchGrid::new(n, 1, 1, c, data).unwrap()
    }

    #[test]
    fn pca_matches_nalgebra() {
        let g = anisotropic(400, 6, 4);
        let p = pca2(&g).unwrap();
        let (n, c) = (400, 6);
        let x = nalgebra::DMatrix::from_row_iterator(n, c, g.data().iter().map(|&v| v as f64));
        let mean = x.row_mean();
        let centered = nalgebra::DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        // residual energy is the trailing eigenvalue mass
        let oracle = vals[2..].iter().sum::<f64>() * (n - 1) as f64 / n as f64;
        assert!((p.reconstruction_mse - oracle).abs() < 1e-4 * oracle.max(1.0), "{} vs {oracle}", p.reconstruction_mse);
        assert!((p.eigenvalues[0] - vals[0]).abs() < 1e-8 * vals[0]);
    }

    #[test]
    fn scores_are_centered_and_uncorrelated() {
        let g = anisotropic(300, 5, 9);
        let p = pca2(&g).unwrap();
        let n = 300.0;
        let m1 = p.scores.chunks(2).map(|s| s[0]).sum::<f64>() / n;
        let cross = p.scores.chunks(2).map(|s| s[0] * s[1]).sum::<f64>() / n;
        assert!(m1.abs() < 1e-9 && cross.abs() < 1e-6);
    }

    #[test]
    fn degenerate_input_is_rejected() {
        let g = PatchGrid::zeros(1, 1, 1, 4).unwrap();
        assert!(pca2(&g).is_err());
        assert!("bogus".parse::<ExportKind>().is_err());
        assert!(export_run(Path::new("/nonexistent/run"), ExportKind::Curves).is_err());
    }
}
