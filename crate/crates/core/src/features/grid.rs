use crate::error::{Error, Result};

/// A batch of patch-token embeddings laid out `[batch, grid_h, grid_w, channels]`
/// row-major. Only spatial patch tokens are stored; there is no CLS slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    batch: usize,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(batch: usize, grid_h: usize, grid_w: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if batch == 0 || grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::dim(format!(
                "patch grid extents must be positive, got {batch}x{grid_h}x{grid_w}x{channels}"
            )));
        }
        let numel = batch
            .checked_mul(grid_h)
            .and_then(|n| n.checked_mul(grid_w))
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::dim("patch grid size overflows"))?;
        if numel != data.len() {
            return Err(Error::dim(format!(
                "patch grid {batch}x{grid_h}x{grid_w}x{channels} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            grid_h,
            grid_w,
            channels,
            data,
        })
    }

    pub fn zeros(batch: usize, grid_h: usize, grid_w: usize, channels: usize) -> Result<Self> {
        Self::new(batch, grid_h, grid_w, channels, vec![0.0; batch * grid_h * grid_w * channels])
    }

    /// Stacks single-item grids of identical geometry along the batch axis.
    pub fn concat(items: &[PatchGrid]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::dim("concat of no grids"))?;
        let mut data = Vec::with_capacity(items.iter().map(|g| g.data.len()).sum());
        let mut batch = 0;
        for g in items {
            if (g.grid_h, g.grid_w, g.channels) != (first.grid_h, first.grid_w, first.channels) {
                return Err(Error::dim("concat of grids with different geometry"));
            }
            data.extend_from_slice(&g.data);
            batch += g.batch;
        }
        Self::new(batch, first.grid_h, first.grid_w, first.channels, data)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.grid_h, self.grid_w, self.channels]
    }

    pub fn tokens_per_item(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_tokens(&self) -> usize {
        self.batch * self.tokens_per_item()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `[tokens, channels]` block of batch item `b`.
    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.tokens_per_item() * self.channels;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_grid(&self, b: usize) -> PatchGrid {
        PatchGrid {
            batch: 1,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            channels: self.channels,
            data: self.item(b).to_vec(),
        }
    }

    pub fn token(&self, b: usize, y: usize, x: usize) -> &[f32] {
        let start = ((b * self.grid_h + y) * self.grid_w + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.channels)
    }

    pub fn tokens_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.data.chunks_mut(self.channels)
    }
}

/// Bilinear resampling over the spatial axes with half-pixel centers and
/// edge clamping. Each output value is a convex combination of inputs, so
/// per-channel bounds are preserved.
pub fn resample_grid(g: &PatchGrid, target_h: usize, target_w: usize) -> Result<PatchGrid> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::dim("resample target extents must be positive"));
    }
    if (target_h, target_w) == (g.grid_h, g.grid_w) {
        return Ok(g.clone());
    }
    let ys = axis_weights(g.grid_h, target_h);
    let xs = axis_weights(g.grid_w, target_w);
    let c = g.channels;
    let mut out = vec![0.0f32; g.batch * target_h * target_w * c];
    for b in 0..g.batch {
        for (ty, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (tx, &(x0, x1, wx)) in xs.iter().enumerate() {
                let dst = ((b * target_h + ty) * target_w + tx) * c;
                let t00 = g.token(b, y0, x0);
                let t01 = g.token(b, y0, x1);
                let t10 = g.token(b, y1, x0);
                let t11 = g.token(b, y1, x1);
                for ch in 0..c {
                    let top = t00[ch] + (t01[ch] - t00[ch]) * wx;
                    let bot = t10[ch] + (t11[ch] - t10[ch]) * wx;
                    out[dst + ch] = top + (bot - top) * wy;
                }
            }
        }
    }
    PatchGrid::new(g.batch, target_h, target_w, c, out)
}

/// Dense `[dst_h·dst_w, src_h·src_w]` matrix applying [`resample_grid`]'s
/// bilinear weights to a flattened single-channel grid.
pub fn upsample_matrix(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<f32> {
    let ys = axis_weights(src_h, dst_h);
    let xs = axis_weights(src_w, dst_w);
    let n = src_h * src_w;
    let mut m = vec![0.0f32; dst_h * dst_w * n];
    for (ty, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (tx, &(x0, x1, wx)) in xs.iter().enumerate() {
            let row = &mut m[(ty * dst_w + tx) * n..][..n];
            row[y0 * src_w + x0] += (1.0 - wy) * (1.0 - wx);
            row[y0 * src_w + x1] += (1.0 - wy) * wx;
            row[y1 * src_w + x0] += wy * (1.0 - wx);
            row[y1 * src_w + x1] += wy * wx;
        }
    }
    m
}

/// Source index pair and interpolation weight for each target position.
pub(crate) fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}
