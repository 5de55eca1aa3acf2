//! Frame geometry: resizing, sliding-window patches, motion filtering and
//! training-set sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::Tensor;

pub const FRAME_HEIGHT: usize = 280;
pub const FRAME_WIDTH: usize = 420;
pub const PATCH: usize = 28;
pub const TRAIN_STRIDE: usize = 7;
pub const TEST_STRIDE: usize = 28;
/// Mean absolute inter-frame difference a patch must exceed to count as moving.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 10.0 / 255.0;
pub const CHANNELS: usize = 3;

/// Which model a patch feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Appearance,
    Motion,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Appearance => "appearance",
            Stream::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "appearance" => Some(Stream::Appearance),
            "motion" => Some(Stream::Motion),
            _ => None,
        }
    }
}

/// Where a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub video: usize,
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// `N×3×28×28` patches with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub data: Tensor,
    pub origins: Vec<PatchOrigin>,
    pub stream: Stream,
    /// Stride of the grid the origins refer to.
    pub stride: usize,
}

impl PatchBatch {
    pub fn empty(stream: Stream, stride: usize) -> Self {
        PatchBatch {
            data: Tensor::zeros(&[0, CHANNELS, PATCH, PATCH]),
            origins: Vec::new(),
            stream,
            stride,
        }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<PatchBatch> {
        Ok(PatchBatch {
            data: self.data.gather_outer(rows)?,
            origins: rows.iter().map(|&r| self.origins[r]).collect(),
            stream: self.stream,
            stride: self.stride,
        })
    }

    pub fn concat(parts: &[PatchBatch]) -> Result<PatchBatch> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of no batches"))?;
        let tensors: Vec<Tensor> = parts.iter().map(|p| p.data.clone()).collect();
        Ok(PatchBatch {
            data: Tensor::stack_outer(&tensors)?,
            origins: parts.iter().flat_map(|p| p.origins.iter().copied()).collect(),
            stream: first.stream,
            stride: first.stride,
        })
    }
}

fn chw(frame: &Tensor) -> Result<(usize, usize, usize)> {
    match *frame.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(dim_err!("frame must be C×H×W, got {:?}", frame.shape())),
    }
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = chw(frame)?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(dim_err!("cannot resize {h}×{w} to {out_h}×{out_w}"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(frame.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = &frame.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Resize to the working resolution (280 rows × 420 columns).
pub fn resize_frame(frame: &Tensor) -> Result<Tensor> {
    resize_bilinear(frame, FRAME_HEIGHT, FRAME_WIDTH)
}

/// Clamp into `[0, 1]`.
pub fn normalize_unit(frame: &Tensor) -> Tensor {
    frame.map(|v| v.clamp(0.0, 1.0))
}

/// Grid dimensions of `size`-patches at `stride` over an `h×w` frame.
pub fn grid_dims(h: usize, w: usize, size: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(contract_err!("stride must be positive"));
    }
    if h < size || w < size {
        return Err(contract_err!("frame {h}×{w} is smaller than a {size}×{size} patch"));
    }
    Ok(((h - size) / stride + 1, (w - size) / stride + 1))
}

/// All `size×size` patches whose top-left corner lies on the `stride` grid
/// and that fit inside the frame, row-major over the grid.
pub fn extract_patches(
    frame: &Tensor,
    size: usize,
    stride: usize,
    stream: Stream,
    video: usize,
    frame_index: usize,
) -> Result<PatchBatch> {
    let (c, h, w) = chw(frame)?;
    if c != CHANNELS || size != PATCH {
        return Err(dim_err!("patches are {CHANNELS}×{PATCH}×{PATCH}; got {c} channels, size {size}"));
    }
    let (rows, cols) = grid_dims(h, w, size, stride)?;
    let mut data = Vec::with_capacity(rows * cols * c * size * size);
    let mut origins = Vec::with_capacity(rows * cols);
    let src = frame.data();
    for row in 0..rows {
        for col in 0..cols {
            let (y0, x0) = (row * stride, col * stride);
            for ch in 0..c {
                for y in y0..y0 + size {
                    let base = (ch * h + y) * w + x0;
                    data.extend(src[base..base + size].iter().map(|v| v.clamp(0.0, 1.0)));
                }
            }
            origins.push(PatchOrigin {
                video,
                frame: frame_index,
                row,
                col,
            });
        }
    }
    Ok(PatchBatch {
        data: Tensor::new(vec![rows * cols, c, size, size], data)?,
        origins,
        stream,
        stride,
    })
}

/// Inverse of test-stride extraction: tile patches back into a frame.
pub fn reassemble(batch: &PatchBatch, h: usize, w: usize) -> Result<Tensor> {
    let mut out = vec![0.0; CHANNELS * h * w];
    let per = CHANNELS * PATCH * PATCH;
    for (i, o) in batch.origins.iter().enumerate() {
        let (y0, x0) = (o.row * batch.stride, o.col * batch.stride);
        if y0 + PATCH > h || x0 + PATCH > w {
            return Err(dim_err!("patch at ({}, {}) falls outside {h}×{w}", o.row, o.col));
        }
        let p = &batch.data.data()[i * per..(i + 1) * per];
        for ch in 0..CHANNELS {
            for y in 0..PATCH {
                let dst = (ch * h + y0 + y) * w + x0;
                out[dst..dst + PATCH].copy_from_slice(&p[(ch * PATCH + y) * PATCH..(ch * PATCH + y + 1) * PATCH]);
            }
        }
    }
    Tensor::new(vec![CHANNELS, h, w], out)
}

/// Keep patches whose footprint moved by more than `threshold` (mean
/// absolute difference to the previous frame). Without a previous frame
/// everything passes.
pub fn motion_filter(batch: &PatchBatch, frame: &Tensor, previous: Option<&Tensor>, threshold: f64) -> Result<PatchBatch> {
    let Some(prev) = previous else {
        return Ok(batch.clone());
    };
    let (c, h, w) = chw(frame)?;
    if prev.shape() != frame.shape() {
        return Err(dim_err!("consecutive frames differ in shape: {:?} vs {:?}", prev.shape(), frame.shape()));
    }
    let (a, b) = (frame.data(), prev.data());
    let mut keep = Vec::new();
    for (i, o) in batch.origins.iter().enumerate() {
        let (y0, x0) = (o.row * batch.stride, o.col * batch.stride);
        if y0 + PATCH > h || x0 + PATCH > w {
            return Err(dim_err!("patch provenance ({}, {}) outside the frame", o.row, o.col));
        }
        let mut total = 0.0;
        for ch in 0..c {
            for y in y0..y0 + PATCH {
                let base = (ch * h + y) * w + x0;
                total += a[base..base + PATCH]
                    .iter()
                    .zip(&b[base..base + PATCH])
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>();
            }
        }
        if total / (c * PATCH * PATCH) as f64 > threshold {
            keep.push(i);
        }
    }
    batch.select(&keep)
}

/// Uniform sample without replacement of up to `n_target` patches, in a
/// seed-determined order.
pub fn sample_training_set(batches: &[PatchBatch], n_target: usize, seed: u64) -> Result<PatchBatch> {
    let all = PatchBatch::concat(batches)?;
    let mut idx: Vec<usize> = (0..all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n_target.min(all.len()));
    all.select(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let n = c * h * w;
        Tensor::new(vec![c, h, w], (0..n).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let f = ramp(3, FRAME_HEIGHT, FRAME_WIDTH);
        assert_eq!(resize_frame(&f).unwrap(), f);
        let c = Tensor::full(&[3, 17, 31], 0.3);
        assert!(resize_frame(&c).unwrap().data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn halving_matches_box_filter() {
        let f = ramp(2, 10, 14);
        let half = resize_bilinear(&f, 5, 7).unwrap();
        for ch in 0..2 {
            for y in 0..5 {
                for x in 0..7 {
                    let at = |yy: usize, xx: usize| f.data()[(ch * 10 + yy) * 14 + xx];
                    let avg = (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1)) / 4.0;
                    assert!((half.data()[(ch * 5 + y) * 7 + x] - avg).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn patch_counts() {
        let f = Tensor::zeros(&[3, FRAME_HEIGHT, FRAME_WIDTH]);
        assert_eq!(extract_patches(&f, PATCH, TEST_STRIDE, Stream::Appearance, 0, 0).unwrap().len(), 150);
        assert_eq!(extract_patches(&f, PATCH, TRAIN_STRIDE, Stream::Appearance, 0, 0).unwrap().len(), 2109);
        let small = Tensor::zeros(&[3, 28, 28]);
        for s in [1, 5, 28, 100] {
            assert_eq!(extract_patches(&small, PATCH, s, Stream::Motion, 0, 0).unwrap().len(), 1);
        }
        let tiny = Tensor::zeros(&[3, 20, 40]);
        assert!(extract_patches(&tiny, PATCH, 7, Stream::Motion, 0, 0).is_err());
    }

    #[test]
    fn test_stride_tiles_the_frame() {
        let f = ramp(3, FRAME_HEIGHT, FRAME_WIDTH);
        let b = extract_patches(&f, PATCH, TEST_STRIDE, Stream::Appearance, 0, 0).unwrap();
        assert_eq!(reassemble(&b, FRAME_HEIGHT, FRAME_WIDTH).unwrap(), f);
        let o = b.origins[37];
        assert_eq!((o.row, o.col), (2, 7));
        // first pixel of patch 37 sits at (28·row, 28·col)
        assert_eq!(b.data.data()[37 * 3 * 28 * 28], f.data()[(2 * 28) * FRAME_WIDTH + 7 * 28]);
    }

    #[test]
    fn motion_filtering() {
        let prev = Tensor::full(&[3, 84, 84], 0.2);
        let batch = extract_patches(&prev, PATCH, 28, Stream::Appearance, 0, 1).unwrap();
        assert!(motion_filter(&batch, &prev, Some(&prev), DEFAULT_MOTION_THRESHOLD).unwrap().is_empty());
        assert_eq!(motion_filter(&batch, &prev, None, DEFAULT_MOTION_THRESHOLD).unwrap().len(), 9);

        let moved = Tensor::full(&[3, 84, 84], 0.25);
        assert_eq!(motion_filter(&batch, &moved, Some(&prev), 0.0).unwrap().len(), 9);

        // one moving block aligned with cell (1, 2)
        let mut cur = prev.clone();
        for ch in 0..3 {
            for y in 28..56 {
                for x in 56..84 {
                    cur.data_mut()[(ch * 84 + y) * 84 + x] = 0.9;
                }
            }
        }
        let stride7 = extract_patches(&cur, PATCH, 7, Stream::Appearance, 0, 1).unwrap();
        let kept = motion_filter(&stride7, &cur, Some(&prev), DEFAULT_MOTION_THRESHOLD).unwrap();
        assert!(!kept.is_empty());
        for o in &kept.origins {
            let (y0, x0) = (o.row * 7, o.col * 7);
            assert!(y0 < 56 && y0 + 28 > 28 && x0 + 28 > 56, "{o:?}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = ramp(3, 56, 56);
        let b = extract_patches(&f, PATCH, 7, Stream::Appearance, 0, 0).unwrap();
        let a1 = sample_training_set(&[b.clone()], 10, 5).unwrap();
        let a2 = sample_training_set(&[b.clone()], 10, 5).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.len(), 10);
        let all = sample_training_set(&[b.clone()], 1000, 5).unwrap();
        assert_eq!(all.len(), b.len());
        let mut seen: Vec<_> = all.origins.iter().map(|o| (o.row, o.col)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), b.len());
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        // 25 candidates, draw 5 each time: each count ~ Binomial(1000, 0.2).
        let f = ramp(3, 56, 56);
        let b = extract_patches(&f, PATCH, 7, Stream::Appearance, 0, 0).unwrap();
        assert_eq!(b.len(), 25);
        let mut counts = [0usize; 25];
        for seed in 0..1000 {
            for o in sample_training_set(&[b.clone()], 5, seed).unwrap().origins {
                counts[o.row * 5 + o.col] += 1;
            }
        }
        let (n, p) = (1000.0, 0.2);
        let (mean, sd) = (n * p, (n * p * (1.0 - p)) as f64);
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd.sqrt() + 1.0, "{c}");
        }
    }

    proptest! {
        #[test]
        fn unit_normalization_is_idempotent(vals in proptest::collection::vec(-1.0f64..2.0, 12)) {
            let t = Tensor::new(vec![3, 2, 2], vals).unwrap();
            let once = normalize_unit(&t);
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(normalize_unit(&once), once);
        }
    }
}
