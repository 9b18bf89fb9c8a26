use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{Image, INPUT_SIZE};
use crate::rng;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "rectangle", "disc"];

/// One synthetic input with its per-pixel class labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn id(&self) -> u64 {
        self.image.id
    }

    /// Random field with a brighter axis-aligned rectangle (class 1) and a
    /// darker disc (class 2) composited on top.
    pub fn generate(id: u64, seed: u64) -> Self {
        let n = INPUT_SIZE;
        let mut image = Image::random_field(id, seed, n);
        let mut labels = vec![0u8; n * n];
        let mut r = rng::stream(rng::mix(seed, id), "shapes");
        let (rh, rw) = (r.random_range(14..30usize), r.random_range(14..30usize));
        let (ry, rx) = (r.random_range(2..n - rh - 2), r.random_range(2..n - rw - 2));
        let rect_gain = r.random_range(1.0..1.4f32);
        let radius = r.random_range(7.0..13.0f64);
        let lo = radius.ceil() + 2.0;
        let (cy, cx) = (r.random_range(lo..n as f64 - lo), r.random_range(lo..n as f64 - lo));
        let disc_gain = r.random_range(1.0..1.4f32);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                if (ry..ry + rh).contains(&y) && (rx..rx + rw).contains(&x) {
                    image.data[i] += rect_gain;
                    labels[i] = 1;
                }
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    image.data[i] = image.data[i] - disc_gain;
                    labels[i] = 2;
                }
            }
        }
        Self { image, labels }
    }
}

/// Train and held-out samples with disjoint ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn generate(seed: u64, train: usize, test: usize) -> Result<Self> {
        if train == 0 || test == 0 {
            return Err(Error::contract("dataset splits must be non-empty"));
        }
        let make = |ids: std::ops::Range<u64>| ids.map(|id| Sample::generate(id, seed)).collect();
        Ok(Self {
            train: make(0..train as u64),
            test: make(train as u64..(train + test) as u64),
        })
    }

    pub fn disjoint(&self) -> bool {
        let ids: std::collections::BTreeSet<u64> = self.train.iter().map(Sample::id).collect();
        self.test.iter().all(|s| !ids.contains(&s.id()))
    }
}

/// Batches of indices into `0..n`, shuffled per epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::mix(seed, epoch as u64), "epoch-order");
    for i in (1..n).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
