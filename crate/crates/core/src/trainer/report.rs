use serde::{Deserialize, Serialize};

/// One row per (phase, epoch). Phase 1 fills the per-teacher columns, phase 2
/// the held-out metric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub phase: u8,
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub teacher_losses: Vec<f64>,
    pub alpha: Vec<f64>,
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub student: usize,
    pub heads: usize,
    pub balancer: usize,
    pub decoder: usize,
}

impl ParamCounts {
    /// The deployable encoder plus its distillation heads.
    pub fn student_and_heads(&self) -> usize {
        self.student + self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub teachers: Vec<String>,
    pub classes: Vec<String>,
    pub rows: Vec<EpochRow>,
    pub final_metrics: Option<FinalMetrics>,
    /// Held-out MSE between each head and its standardized teacher.
    pub fidelity_mse: Vec<f64>,
    pub params: ParamCounts,
    pub config_echo: String,
    pub wall_clock_seconds: f64,
}

/// RFC 4180 field quoting.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| x.to_string())
}

impl RunReport {
    pub fn phase_rows(&self, phase: u8) -> impl Iterator<Item = &EpochRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// Plain-text table of every epoch. Contains no timing, so identical
    /// runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut header = vec!["phase".to_string(), "epoch".into(), "lr".into(), "loss".into()];
        header.extend(self.teachers.iter().map(|t| format!("loss_{t}")));
        header.extend(self.teachers.iter().map(|t| format!("alpha_{t}")));
        header.extend(self.classes.iter().map(|c| format!("dice_{c}")));
        header.extend(self.classes.iter().map(|c| format!("hd95_{c}")));
        let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
        out.push_str("\r\n");
        let (t, k) = (self.teachers.len(), self.classes.len());
        for r in &self.rows {
            let mut f = vec![r.phase.to_string(), r.epoch.to_string(), r.lr.to_string(), r.loss.to_string()];
            let pad = |v: &[f64], n: usize| -> Vec<String> {
                if v.is_empty() {
                    vec![String::new(); n]
                } else {
                    v.iter().map(f64::to_string).collect()
                }
            };
            f.extend(pad(&r.teacher_losses, t));
            f.extend(pad(&r.alpha, t));
            f.extend(pad(&r.dice, k));
            if r.hd95.is_empty() {
                f.extend(vec![String::new(); k]);
            } else {
                f.extend(r.hd95.iter().map(|v| fmt_opt(*v)));
            }
            out.push_str(&f.join(","));
            out.push_str("\r\n");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Config(format!("report.json: {e}")))
    }

    /// One-line summary of the held-out metrics.
    pub fn summary(&self) -> String {
        match &self.final_metrics {
            Some(m) => format!(
                "final dice {:.4} hd95 {} ({})",
                m.mean_dice,
                m.mean_hd95.map_or("undef".into(), |v| format!("{v:.3}")),
                self.classes
                    .iter()
                    .zip(&m.dice)
                    .zip(&m.hd95)
                    .map(|((c, d), h)| format!("{c}: dice {d:.4} hd95 {}", h.map_or("undef".into(), |v| format!("{v:.3}"))))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            None => "no phase-2 metrics".into(),
        }
    }
}
