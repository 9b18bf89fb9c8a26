//! Experiment description loaded from TOML. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancing::BalancerConfig;
use crate::error::{Error, Result};
use crate::features::SyntheticTeacherSpec;
use crate::segmetrics::Hd95Mode;
use crate::standardize::StandardizerKind;
use crate::student::StudentConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub name: String,
    pub seed: u64,
    pub out_channels: usize,
    pub out_grid: [usize; 2],
    pub scale: f64,
    pub subspace_rank: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub loss: LossKind,
}

impl TeacherConfig {
    pub fn spec(&self) -> SyntheticTeacherSpec {
        SyntheticTeacherSpec {
            name: self.name.clone(),
            seed: self.seed,
            out_channels: self.out_channels,
            out_grid: self.out_grid,
            scale: self.scale,
            subspace_rank: self.subspace_rank,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizationConfig {
    pub kind: StandardizerKind,
}

impl Default for StandardizationConfig {
    fn default() -> Self {
        Self {
            kind: StandardizerKind::PhiS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub hd95_mode: Hd95Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub standardization: StandardizationConfig,
    #[serde(default)]
    pub balancing: BalancerConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub teachers: Vec<TeacherConfig>,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Three heterogeneous stand-ins: a fine 16×16 grid at large magnitude, a
/// 14×14 grid at small magnitude and a coarse 8×8 grid.
pub fn default_teachers() -> Vec<TeacherConfig> {
    let t = |name: &str, seed, out_channels, g, scale, subspace_rank, noise_std| TeacherConfig {
        name: name.into(),
        seed,
        out_channels,
        out_grid: [g, g],
        scale,
        subspace_rank,
        noise_std,
        loss: LossKind::Mse,
    };
    vec![
        t("S", 101, 64, 16, 10.0, 12, 0.05),
        t("D", 202, 32, 14, 0.5, 8, 0.002),
        t("C", 303, 64, 8, 2.0, 6, 0.01),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: default_output(),
            student: StudentConfig::default(),
            standardization: StandardizationConfig::default(),
            balancing: BalancerConfig::default(),
            trainer: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            teachers: default_teachers(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher is required".into()));
        }
        let mut names = BTreeSet::new();
        let mut seeds = BTreeSet::new();
        for t in &self.teachers {
            t.spec().validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate teacher name {:?}", t.name)));
            }
            if !seeds.insert(t.seed) {
                return Err(Error::Config(format!("teacher {:?} reuses seed {}", t.name, t.seed)));
            }
        }
        self.student.validate()?;
        self.balancing.validate()?;
        self.trainer.validate()
    }

    pub fn teacher_names(&self) -> Vec<String> {
        self.teachers.iter().map(|t| t.name.clone()).collect()
    }
}
