//! Dice overlap and 95th-percentile Hausdorff distance over binary masks,
//! plus PGM (P5) mask interchange.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("mask extents must be positive"));
        }
        if bits.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} mask given {} pixels",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(format!(
                "mask extents differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground. Pixels on
/// the image border always qualify.
pub fn boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !m.get(y - 1, x)
                || !m.get(y + 1, x)
                || !m.get(y, x - 1)
                || !m.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Linear-interpolation percentile at rank `p/100·(n−1)`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::contract(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95Mode {
    /// 95th percentile of the union of both directed distance sets.
    #[default]
    Union,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

/// For each point of `from`, the distance to the nearest point of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ya, xa)| {
            to.iter()
                .map(|&(yb, xb)| {
                    let dy = ya as f64 - yb as f64;
                    let dx = xa as f64 - xb as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// HD95 between two masks, `None` when either is empty.
pub fn hd95_with(a: &BinaryMask, b: &BinaryMask, mode: Hd95Mode) -> Result<Option<f64>> {
    a.same_dims(b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let (ab, ba_) = (directed(&ba, &bb), directed(&bb, &ba));
    let v = match mode {
        Hd95Mode::Union => {
            let mut all = ab;
            all.extend(ba_);
            percentile(&all, 95.0)?
        }
        Hd95Mode::MaxDirected => percentile(&ab, 95.0)?.max(percentile(&ba_, 95.0)?),
    };
    Ok(Some(v))
}

pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    hd95_with(a, b, Hd95Mode::Union)
}

/// Symmetric Hausdorff distance over boundaries, `None` when either is empty.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    a.same_dims(b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let (ba, bb) = (boundary(a), boundary(b));
    let m = directed(&ba, &bb)
        .into_iter()
        .chain(directed(&bb, &ba))
        .fold(0.0, f64::max);
    Ok(Some(m))
}

/// Per-class scores; `hd95` is `None` where undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
}

impl MetricResult {
    pub fn evaluate(pred: &[BinaryMask], truth: &[BinaryMask], mode: Hd95Mode) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::dim(format!(
                "{} predicted classes vs {} ground-truth classes",
                pred.len(),
                truth.len()
            )));
        }
        let mut dice_v = Vec::with_capacity(pred.len());
        let mut hd = Vec::with_capacity(pred.len());
        for (p, t) in pred.iter().zip(truth) {
            dice_v.push(dice(p, t)?);
            hd.push(hd95_with(p, t, mode)?);
        }
        Ok(Self { dice: dice_v, hd95: hd })
    }

    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }

    /// Mean over classes where HD95 is defined.
    pub fn mean_hd95(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hd95.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Label map → one mask per class in `1..classes` (background excluded).
pub fn class_masks(labels: &[u8], height: usize, width: usize, classes: usize) -> Result<Vec<BinaryMask>> {
    (1..classes)
        .map(|c| BinaryMask::new(height, width, labels.iter().map(|&l| l as usize == c).collect()))
        .collect()
}

pub const PGM_THRESHOLD: u8 = 128;

/// Binary P5 PGM, maxval 255, foreground written as 255.
pub fn encode_pgm(m: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.width, m.height).into_bytes();
    out.extend(m.bits.iter().map(|&b| if b { 255 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<(String, usize)> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(start as u64, "unexpected end of PGM header"));
        }
        Ok((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), start))
    };
    let (magic, _) = token(bytes)?;
    if magic != "P5" {
        return Err(Error::format(0, format!("expected P5 magic, found {magic:?}")));
    }
    let mut num = |what: &str| -> Result<usize> {
        let (t, at) = token(bytes)?;
        t.parse()
            .map_err(|_| Error::format(at as u64, format!("bad {what} {t:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::format(0, format!("maxval {maxval} unsupported, need 255")));
    }
    // single whitespace byte separates header and raster
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(Error::format(
            start as u64,
            format!(
                "truncated raster: expected {need} bytes, found {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let bits = bytes[start..start + need].iter().map(|&v| v >= PGM_THRESHOLD).collect();
    BinaryMask::new(height, width, bits)
}

pub fn write_pgm(m: &BinaryMask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(m)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}
