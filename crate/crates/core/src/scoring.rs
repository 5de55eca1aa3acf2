//! Patch energies, score maps, two-stream fusion and thresholding.

use crate::error::{dim_err, Error, Result};
use crate::gmvae::{GmvaeModel, Mixture};
use crate::par;
use crate::patches::{extract_patches, grid_dims, PatchBatch, Stream, PATCH, TEST_STRIDE};
use crate::tensor::Tensor;

/// Energy `-log Σ_c π_c N(z | μ_c, σ_c²)`; lower means more normal.
pub fn sample_energy(z: &[f64], mixture: &Mixture) -> Result<f64> {
    Ok(-mixture.log_density(z)?)
}

/// Patch energies on the test-stride grid of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub values: Vec<f64>,
    pub frame: usize,
    /// `None` for a fused map.
    pub stream: Option<Stream>,
}

impl EnergyMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, frame: usize, stream: Option<Stream>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(dim_err!("{} energies for a {rows}×{cols} grid", values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite energy in frame {frame}")));
        }
        Ok(EnergyMap {
            rows,
            cols,
            values,
            frame,
            stream,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.stream.is_none()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Row and column of the largest energy (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let i = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (i / self.cols, i % self.cols)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.values.clone()).expect("grid shape")
    }

    pub fn from_tensor(t: &Tensor, frame: usize, stream: Option<Stream>) -> Result<Self> {
        match *t.shape() {
            [r, c] => Self::new(r, c, t.data().to_vec(), frame, stream),
            _ => Err(dim_err!("energy map must be rows×cols, got {:?}", t.shape())),
        }
    }

    fn same_grid(&self, other: &EnergyMap) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(dim_err!(
                "grids differ: {}×{} vs {}×{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }
}

/// Energies of a patch batch, encoded by their posterior means.
pub fn score_patches(model: &GmvaeModel, batch: &PatchBatch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let z = model.encode_means(&batch.data, 150)?;
    let rows: Vec<&[f64]> = z.data().chunks(z.shape()[1]).collect();
    par::try_map(&rows, |r| sample_energy(r, &model.mixture))
}

/// Score one prepared `3×H×W` frame on the non-overlapping test grid.
pub fn score_frame(model: &GmvaeModel, frame: &Tensor, stream: Stream, index: usize) -> Result<EnergyMap> {
    let (h, w) = match *frame.shape() {
        [3, h, w] => (h, w),
        _ => return Err(dim_err!("frame must be 3×H×W, got {:?}", frame.shape())),
    };
    let (rows, cols) = grid_dims(h, w, PATCH, TEST_STRIDE)?;
    let batch = extract_patches(frame, PATCH, TEST_STRIDE, stream, 0, index)?;
    EnergyMap::new(rows, cols, score_patches(model, &batch)?, index, Some(stream))
}

/// Score a sequence of prepared frames; map `i` carries frame index `i`.
pub fn score_frames(model: &GmvaeModel, frames: &[Tensor], stream: Stream) -> Result<Vec<EnergyMap>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| score_frame(model, f, stream, i))
        .collect()
}

/// Mean and standard deviation of training-patch energies, used to put the
/// two streams on a common scale before fusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyStats {
    pub mean: f64,
    pub std: f64,
}

impl EnergyStats {
    pub fn fit(energies: &[f64]) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::Contract("no energies to standardise".into()));
        }
        let n = energies.len() as f64;
        let mean = energies.iter().sum::<f64>() / n;
        let var = energies.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Ok(EnergyStats {
            mean,
            std: var.sqrt().max(1e-12),
        })
    }

    pub fn standardize(&self, map: &EnergyMap) -> EnergyMap {
        EnergyMap {
            values: map.values.iter().map(|v| (v - self.mean) / self.std).collect(),
            ..map.clone()
        }
    }
}

/// Cellwise `α·E_app + β·E_mot`.
pub fn fuse(app: &EnergyMap, mot: &EnergyMap, alpha: f64, beta: f64) -> Result<EnergyMap> {
    app.same_grid(mot)?;
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Contract(format!("fusion weights must be non-negative, got {alpha}, {beta}")));
    }
    let values = app
        .values
        .iter()
        .zip(&mot.values)
        .map(|(a, m)| alpha * a + beta * m)
        .collect();
    EnergyMap::new(app.rows, app.cols, values, app.frame, None)
}

/// Motion maps for every frame of an `n`-frame video. Map `i` covers frames
/// `i..i+Δt`, so frame `i` takes map `i`; frames past the last map reuse it.
pub fn align_motion(maps: &[EnergyMap], n_frames: usize) -> Result<Vec<EnergyMap>> {
    let last = maps.len().checked_sub(1).ok_or_else(|| Error::Data("no motion maps".into()))?;
    Ok((0..n_frames)
        .map(|i| EnergyMap {
            frame: i,
            ..maps[i.min(last)].clone()
        })
        .collect())
}

/// Per-pixel decision for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
    pub threshold: f64,
    pub frame: usize,
}

impl AnomalyMask {
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.iter().any(|&p| p)
    }
}

/// Set every pixel of grid cell `(i, j)` whose energy exceeds `theta`.
/// Pixels outside the grid (frame sizes not divisible by the cell size)
/// stay unset.
pub fn threshold_mask(map: &EnergyMap, theta: f64) -> AnomalyMask {
    let (height, width) = (map.rows * TEST_STRIDE, map.cols * TEST_STRIDE);
    let mut pixels = vec![false; height * width];
    for r in 0..map.rows {
        for c in 0..map.cols {
            if map.get(r, c) > theta {
                for y in r * TEST_STRIDE..(r + 1) * TEST_STRIDE {
                    pixels[y * width + c * TEST_STRIDE..y * width + (c + 1) * TEST_STRIDE].fill(true);
                }
            }
        }
    }
    AnomalyMask {
        height,
        width,
        pixels,
        threshold: theta,
        frame: map.frame,
    }
}
