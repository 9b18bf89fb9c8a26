use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{resample_grid, PatchGrid};
use crate::error::{Error, Result};
use crate::rng;

/// Side length of the square synthetic inputs.
pub const INPUT_SIZE: usize = 64;

/// Pixel extent of the square patch every synthetic teacher embeds.
pub const TEACHER_PATCH: usize = 4;
const TEACHER_PATCH_DIM: usize = TEACHER_PATCH * TEACHER_PATCH;

/// Single-channel input image. `id` keys every per-input random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(id: u64, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::dim(format!(
                "image {height}x{width} with {} pixels",
                data.len()
            )));
        }
        Ok(Self { id, height, width, data })
    }

    /// Smooth seeded random field: a handful of low-frequency plane waves
    /// plus a little pixel noise.
    pub fn random_field(id: u64, seed: u64, size: usize) -> Self {
        let mut r = rng::stream(rng::mix(seed, id), "random-field");
        let waves: Vec<(f64, f64, f64, f64)> = (0..6)
            .map(|_| {
                let angle = r.random_range(0.0..std::f64::consts::TAU);
                let freq = r.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
                let phase = r.random_range(0.0..std::f64::consts::TAU);
                let amp = r.random_range(0.1..0.35);
                (freq * angle.cos(), freq * angle.sin(), phase, amp)
            })
            .collect();
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum();
                data.push((v + 0.05 * rng::normal(&mut r)) as f32);
            }
        }
        Self {
            id,
            height: size,
            width: size,
            data,
        }
    }

    fn as_grid(&self) -> PatchGrid {
        PatchGrid::new(1, self.height, self.width, 1, self.data.clone()).expect("image extents are valid")
    }
}

/// Generating parameters of one synthetic teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTeacherSpec {
    pub name: String,
    pub seed: u64,
    pub out_channels: usize,
    pub out_grid: [usize; 2],
    /// Global feature magnitude.
    pub scale: f64,
    pub subspace_rank: usize,
    #[serde(default)]
    pub noise_std: f64,
}

impl SyntheticTeacherSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("teacher {}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("teacher name must not be empty".into()));
        }
        if self.out_channels == 0 || self.out_grid.contains(&0) {
            return fail("out_channels and out_grid must be positive".into());
        }
        if self.subspace_rank == 0 || self.subspace_rank > self.out_channels {
            return fail(format!(
                "subspace_rank {} must be in 1..={}",
                self.subspace_rank, self.out_channels
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return fail(format!("scale {} must be positive", self.scale));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// A frozen feature extractor. Produces a `out_grid` token grid whose tokens
/// are `scale · Q · M · patch + noise`, with `M` a seeded Gaussian map of the
/// flattened 4×4 input patch into `subspace_rank` dimensions and `Q` a seeded
/// orthonormal basis of a `subspace_rank`-dimensional subspace of the
/// output channels.
#[derive(Debug, Clone)]
pub struct TeacherAdapter {
    spec: SyntheticTeacherSpec,
    /// `Q·M`, `[out_channels, 16]` row-major.
    projection: Vec<f64>,
}

pub fn synth_teacher(spec: &SyntheticTeacherSpec) -> Result<TeacherAdapter> {
    TeacherAdapter::new(spec.clone())
}

impl TeacherAdapter {
    pub fn new(spec: SyntheticTeacherSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        let r = spec.subspace_rank;
        let mut g = rng::stream(spec.seed, "teacher-map");
        let basis = orthonormal_columns(c, r, &mut g);
        let scale_m = 1.0 / (TEACHER_PATCH_DIM as f64).sqrt();
        let m: Vec<f64> = (0..r * TEACHER_PATCH_DIM).map(|_| rng::normal(&mut g) * scale_m).collect();
        let mut projection = vec![0.0; c * TEACHER_PATCH_DIM];
        for i in 0..c {
            for k in 0..r {
                let q = basis[i * r + k];
                for j in 0..TEACHER_PATCH_DIM {
                    projection[i * TEACHER_PATCH_DIM + j] += q * m[k * TEACHER_PATCH_DIM + j];
                }
            }
        }
        Ok(Self { spec, projection })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &SyntheticTeacherSpec {
        &self.spec
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels
    }

    pub fn out_grid(&self) -> (usize, usize) {
        (self.spec.out_grid[0], self.spec.out_grid[1])
    }

    /// Unscaled `Q·M`, `[out_channels, 16]`.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn produce(&self, image: &Image) -> Result<PatchGrid> {
        let (gh, gw) = self.out_grid();
        let (ph, pw) = (gh * TEACHER_PATCH, gw * TEACHER_PATCH);
        let pixels = resample_grid(&image.as_grid(), ph, pw)?;
        let px = pixels.data();
        let c = self.spec.out_channels;
        let mut noise = rng::stream(rng::mix(self.spec.seed, image.id), "teacher-noise");
        let mut out = Vec::with_capacity(gh * gw * c);
        let mut patch = [0.0f64; TEACHER_PATCH_DIM];
        for ty in 0..gh {
            for tx in 0..gw {
                for dy in 0..TEACHER_PATCH {
                    for dx in 0..TEACHER_PATCH {
                        let y = ty * TEACHER_PATCH + dy;
                        let x = tx * TEACHER_PATCH + dx;
                        patch[dy * TEACHER_PATCH + dx] = px[y * pw + x] as f64;
                    }
                }
                for row in self.projection.chunks(TEACHER_PATCH_DIM) {
                    let v: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    let n = if self.spec.noise_std > 0.0 {
                        self.spec.noise_std * rng::normal(&mut noise)
                    } else {
                        0.0
                    };
                    out.push((self.spec.scale * v + n) as f32);
                }
            }
        }
        PatchGrid::new(1, gh, gw, c, out)
    }

    pub fn produce_batch(&self, images: &[Image]) -> Result<PatchGrid> {
        let grids = images.iter().map(|im| self.produce(im)).collect::<Result<Vec<_>>>()?;
        PatchGrid::concat(&grids)
    }
}

/// `[rows, cols]` matrix with orthonormal columns, by Gram-Schmidt on
/// Gaussian vectors.
fn orthonormal_columns(rows: usize, cols: usize, g: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng::normal(g)).collect();
        for _ in 0..2 {
            for u in &columns {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            columns.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (k, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out[i * cols + k] = v;
        }
    }
    out
}
