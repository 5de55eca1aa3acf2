//! Dynamic flow: rank pooling of time-varying means of optical flow.
//!
//! A window of quantized flow fields is summarised by the linear ranking
//! function that orders the window's running means in time. The two weight
//! maps (horizontal and vertical) plus their magnitude form a three-channel
//! motion image.

use std::path::Path;

use crate::error::{contract_err, dim_err, Result};
use crate::par;
use crate::tensor::kernels::gemm;
use crate::tensor::{io, Tensor};

/// Scale applied before offsetting flow into the 0..=255 range.
pub const QUANT_SCALE: f64 = 16.0;
/// Offset applied after scaling.
pub const QUANT_OFFSET: f64 = 128.0;
/// Default rank-pooling window.
pub const DEFAULT_WINDOW: usize = 20;

/// Per-frame two-channel motion field, pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub frame: usize,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>, frame: usize) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(dim_err!("flow channels must be {height}×{width}"));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
            frame,
        })
    }

    pub fn from_tensor(t: &Tensor, frame: usize) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => {
                let (u, v) = t.data().split_at(h * w);
                Self::new(h, w, u.to_vec(), v.to_vec(), frame)
            }
            _ => Err(dim_err!("flow tensor must be 2×H×W, got {:?}", t.shape())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        Tensor::new(vec![2, self.height, self.width], data).expect("flow shape")
    }

    fn same_grid(&self, other: &FlowField) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Rank-pooled summary of one window of flow.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicFlowImage {
    pub height: usize,
    pub width: usize,
    pub fu: Vec<f64>,
    pub fv: Vec<f64>,
    pub fm: Vec<f64>,
    /// Index of the first flow of the window.
    pub start: usize,
    pub window: usize,
}

impl DynamicFlowImage {
    /// Channels stacked as `3×H×W` (u, v, magnitude), unscaled.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(3 * self.fu.len());
        data.extend_from_slice(&self.fu);
        data.extend_from_slice(&self.fv);
        data.extend_from_slice(&self.fm);
        Tensor::new(vec![3, self.height, self.width], data).expect("dynamic flow shape")
    }

    pub fn from_tensor(t: &Tensor, start: usize, window: usize) -> Result<Self> {
        match *t.shape() {
            [3, h, w] => {
                let n = h * w;
                let d = t.data();
                Ok(DynamicFlowImage {
                    height: h,
                    width: w,
                    fu: d[..n].to_vec(),
                    fv: d[n..2 * n].to_vec(),
                    fm: d[2 * n..].to_vec(),
                    start,
                    window,
                })
            }
            _ => Err(dim_err!("dynamic flow tensor must be 3×H×W, got {:?}", t.shape())),
        }
    }
}

/// Map each component to `clamp(round(v·a + b), 0, 255)`.
pub fn quantize_flow(f: &FlowField, a: f64, b: f64) -> FlowField {
    let q = |x: &f64| (x * a + b).round().clamp(0.0, 255.0);
    FlowField {
        u: f.u.iter().map(q).collect(),
        v: f.v.iter().map(q).collect(),
        ..f.clone()
    }
}

/// Running means: output `i` averages flows `0..=i`.
pub fn time_varying_mean(flows: &[FlowField]) -> Result<Vec<FlowField>> {
    let first = flows.first().ok_or_else(|| contract_err!("time-varying mean of an empty sequence"))?;
    let n = first.u.len();
    let (mut su, mut sv) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(flows.len());
    for (i, f) in flows.iter().enumerate() {
        if !f.same_grid(first) {
            return Err(dim_err!("flow {i} is {}×{}, expected {}×{}", f.height, f.width, first.height, first.width));
        }
        su.iter_mut().zip(&f.u).for_each(|(s, x)| *s += x);
        sv.iter_mut().zip(&f.v).for_each(|(s, x)| *s += x);
        let k = (i + 1) as f64;
        out.push(FlowField {
            u: su.iter().map(|s| s / k).collect(),
            v: sv.iter().map(|s| s / k).collect(),
            ..f.clone()
        });
    }
    Ok(out)
}

/// Ranking-machine solver settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankPoolConfig {
    /// Soft-margin weight on the pairwise hinge losses.
    pub c: f64,
    pub max_iter: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
    /// Halvings tried on a step before declaring convergence.
    pub max_halvings: usize,
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        RankPoolConfig {
            c: 1.0,
            max_iter: 2000,
            tol: 1e-6,
            max_halvings: 60,
        }
    }
}

/// Ranking function over a sequence plus the solver's objective trace.
#[derive(Clone, Debug)]
pub struct RankPoolResult {
    pub fu: Vec<f64>,
    pub fv: Vec<f64>,
    /// Objective after each accepted iteration, starting at `F = 0`.
    pub objective: Vec<f64>,
}

/// Objective `‖F‖² + C Σ_{i<j} max(0, 1 + ⟨F,m_i⟩ − ⟨F,m_j⟩)` at `F = (fu, fv)`.
pub fn rank_objective(tvms: &[FlowField], fu: &[f64], fv: &[f64], c: f64) -> f64 {
    let proj: Vec<f64> = tvms
        .iter()
        .map(|m| dot(&m.u, fu) + dot(&m.v, fv))
        .collect();
    let norm = dot(fu, fu) + dot(fv, fv);
    let mut hinge = 0.0;
    for i in 0..proj.len() {
        for j in i + 1..proj.len() {
            hinge += (1.0 + proj[i] - proj[j]).max(0.0);
        }
    }
    norm + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve the pairwise ranking problem over `tvms` by subgradient descent.
///
/// The iterate stays in the span of the centred features, so the solver
/// works on expansion coefficients over the Gram matrix: each step costs
/// `O(n²)` regardless of frame size. Steps start at `1/(2t)` and are halved
/// until the objective decreases, which makes the objective trace monotone.
pub fn rank_pool(tvms: &[FlowField], cfg: &RankPoolConfig) -> Result<RankPoolResult> {
    if tvms.len() < 2 {
        return Err(contract_err!("rank pooling needs at least 2 frames, got {}", tvms.len()));
    }
    if cfg.c <= 0.0 {
        return Err(contract_err!("soft margin C must be positive"));
    }
    let first = &tvms[0];
    if let Some(i) = tvms.iter().position(|m| !m.same_grid(first)) {
        return Err(dim_err!("tvm {i} does not match the first frame's grid"));
    }
    let n = tvms.len();
    let px = first.u.len();
    let dim = 2 * px;

    // centred feature rows [n, dim]
    let mut feats = vec![0.0; n * dim];
    for (i, m) in tvms.iter().enumerate() {
        feats[i * dim..i * dim + px].copy_from_slice(&m.u);
        feats[i * dim + px..(i + 1) * dim].copy_from_slice(&m.v);
    }
    let mut mean = vec![0.0; dim];
    for row in feats.chunks(dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    for row in feats.chunks_mut(dim) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    let mut gram = vec![0.0; n * n];
    gemm(n, dim, n, &feats, (dim, 1), &feats, (1, dim), &mut gram, 0.0);

    let objective = |alpha: &[f64]| -> f64 {
        let s: Vec<f64> = (0..n).map(|i| dot(&gram[i * n..(i + 1) * n], alpha)).collect();
        let mut hinge = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                hinge += (1.0 + s[i] - s[j]).max(0.0);
            }
        }
        dot(alpha, &s) + cfg.c * hinge
    };

    let mut alpha = vec![0.0; n];
    let mut current = objective(&alpha);
    let mut trace = vec![current];
    for t in 1..=cfg.max_iter {
        let s: Vec<f64> = (0..n).map(|i| dot(&gram[i * n..(i + 1) * n], &alpha)).collect();
        let mut dir: Vec<f64> = alpha.iter().map(|a| 2.0 * a).collect();
        for i in 0..n {
            for j in i + 1..n {
                if 1.0 + s[i] - s[j] > 0.0 {
                    dir[i] += cfg.c;
                    dir[j] -= cfg.c;
                }
            }
        }
        let mut step = 1.0 / (2.0 * t as f64);
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = alpha.iter().zip(&dir).map(|(a, d)| a - step * d).collect();
            let value = objective(&trial);
            if value < current {
                accepted = Some((trial, value));
                break;
            }
            step *= 0.5;
        }
        let Some((next, value)) = accepted else { break };
        let change = (current - value) / current.abs().max(f64::MIN_POSITIVE);
        alpha = next;
        current = value;
        trace.push(current);
        if change < cfg.tol {
            break;
        }
    }

    let mut fu = vec![0.0; px];
    let mut fv = vec![0.0; px];
    for (a, row) in alpha.iter().zip(feats.chunks(dim)) {
        fu.iter_mut().zip(&row[..px]).for_each(|(f, x)| *f += a * x);
        fv.iter_mut().zip(&row[px..]).for_each(|(f, x)| *f += a * x);
    }
    Ok(RankPoolResult {
        fu,
        fv,
        objective: trace,
    })
}

/// Pixelwise Euclidean magnitude.
pub fn flow_magnitude(fu: &[f64], fv: &[f64]) -> Result<Vec<f64>> {
    if fu.len() != fv.len() {
        return Err(dim_err!("magnitude of mismatched channels {} vs {}", fu.len(), fv.len()));
    }
    Ok(fu.iter().zip(fv).map(|(u, v)| u.hypot(*v)).collect())
}

/// Settings for turning a video's flows into dynamic-flow images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicFlowConfig {
    pub window: usize,
    pub quant_scale: f64,
    pub quant_offset: f64,
    pub solver: RankPoolConfig,
}

impl Default for DynamicFlowConfig {
    fn default() -> Self {
        DynamicFlowConfig {
            window: DEFAULT_WINDOW,
            quant_scale: QUANT_SCALE,
            quant_offset: QUANT_OFFSET,
            solver: RankPoolConfig::default(),
        }
    }
}

/// Number of dynamic-flow images produced from `n` flows.
pub fn dynamic_flow_count(n: usize, window: usize) -> usize {
    n.saturating_sub(window).max(1)
}

/// One dynamic-flow image per window start `i`, pooled over flows
/// `i..=i+Δt`; videos with at most `Δt` flows give a single image over all
/// of them.
pub fn dynamic_flow_sequence(flows: &[FlowField], cfg: &DynamicFlowConfig) -> Result<Vec<DynamicFlowImage>> {
    if cfg.window < 2 {
        return Err(contract_err!("window must be at least 2, got {}", cfg.window));
    }
    if flows.len() < 2 {
        return Err(contract_err!("need at least 2 flows, got {}", flows.len()));
    }
    let quantized: Vec<FlowField> = flows
        .iter()
        .map(|f| quantize_flow(f, cfg.quant_scale, cfg.quant_offset))
        .collect();
    let count = dynamic_flow_count(flows.len(), cfg.window);
    let span = if flows.len() > cfg.window { cfg.window + 1 } else { flows.len() };
    par::map_range(count, |start| {
        let tvms = time_varying_mean(&quantized[start..start + span])?;
        let pooled = rank_pool(&tvms, &cfg.solver)?;
        let fm = flow_magnitude(&pooled.fu, &pooled.fv)?;
        Ok(DynamicFlowImage {
            height: flows[0].height,
            width: flows[0].width,
            fu: pooled.fu,
            fv: pooled.fv,
            fm,
            start,
            window: cfg.window,
        })
    })
    .into_iter()
    .collect()
}

/// Per-channel linear map of dynamic-flow values onto `[0, 1]`, fitted on
/// training images and clamped outside the fitted range.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNormalizer {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl FlowNormalizer {
    /// Fit on `3×H×W` tensors.
    pub fn fit(images: &[Tensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(contract_err!("cannot fit a flow normalizer on no images"));
        }
        let mut n = Self::unfitted();
        for img in images {
            n.observe(img)?;
        }
        Ok(n)
    }

    /// Empty range; widen it with [`observe`](Self::observe).
    pub fn unfitted() -> Self {
        FlowNormalizer {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.lo.iter().zip(&self.hi).all(|(l, h)| l <= h)
    }

    pub fn observe(&mut self, img: &Tensor) -> Result<()> {
        let plane = channel_plane(img)?;
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            for &v in chunk {
                self.lo[c] = self.lo[c].min(v);
                self.hi[c] = self.hi[c].max(v);
            }
        }
        Ok(())
    }

    pub fn apply(&self, img: &Tensor) -> Result<Tensor> {
        let plane = channel_plane(img)?;
        let mut out = img.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let span = self.hi[c] - self.lo[c];
            for v in chunk {
                *v = if span > 0.0 {
                    ((*v - self.lo[c]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

fn channel_plane(img: &Tensor) -> Result<usize> {
    match *img.shape() {
        [3, h, w] => Ok(h * w),
        _ => Err(dim_err!("expected a 3×H×W image, got {:?}", img.shape())),
    }
}

/// Read a directory of `2×H×W` flow tensors in lexicographic order.
pub fn read_flow_dir(dir: &Path) -> Result<Vec<FlowField>> {
    let files = crate::imageio::sorted_files(dir, &["gmf"])?;
    files
        .iter()
        .enumerate()
        .map(|(i, p)| FlowField::from_tensor(&io::load(p)?, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, u: Vec<f64>, v: Vec<f64>) -> FlowField {
        FlowField::new(h, w, u, v, 0).unwrap()
    }

    #[test]
    fn quantization() {
        let f = field(1, 3, vec![0.0, 1.0, 10.0], vec![-1.0, -10.0, 0.49]);
        let q = quantize_flow(&f, QUANT_SCALE, QUANT_OFFSET);
        assert_eq!(q.u, vec![128.0, 144.0, 255.0]);
        assert_eq!(q.v, vec![112.0, 0.0, 136.0]);
    }

    #[test]
    fn running_means() {
        let seq = vec![field(1, 1, vec![0.0], vec![5.0]), field(1, 1, vec![2.0], vec![5.0])];
        let tvm = time_varying_mean(&seq).unwrap();
        assert_eq!(tvm[0].u, vec![0.0]);
        assert_eq!(tvm[1].u, vec![1.0]);
        assert_eq!(tvm[1].v, vec![5.0]);
        assert_eq!(time_varying_mean(&seq[..1]).unwrap()[0], seq[0]);
        assert!(time_varying_mean(&[]).is_err());
    }

    #[test]
    fn identical_tvms_pool_to_zero() {
        let m = field(2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![0.5; 4]);
        let r = rank_pool(&[m.clone(), m.clone(), m], &RankPoolConfig::default()).unwrap();
        assert!(r.fu.iter().chain(&r.fv).all(|&x| x == 0.0));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let seq: Vec<FlowField> = (0..8)
            .map(|t| {
                let u = (0..6).map(|p| ((t * 7 + p * 3) % 5) as f64 + 0.3 * t as f64).collect();
                let v = (0..6).map(|p| ((t + p) % 3) as f64).collect();
                field(2, 3, u, v)
            })
            .collect();
        let tvm = time_varying_mean(&seq).unwrap();
        let r = rank_pool(&tvm, &RankPoolConfig::default()).unwrap();
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
        let direct = rank_objective(&tvm, &r.fu, &r.fv, 1.0);
        assert!((direct - r.objective.last().unwrap()).abs() < 1e-8 * direct.max(1.0));
    }

    #[test]
    fn magnitude() {
        assert_eq!(flow_magnitude(&[3.0, 0.0], &[4.0, 0.0]).unwrap(), vec![5.0, 0.0]);
        assert!(flow_magnitude(&[1.0], &[]).is_err());
    }

    #[test]
    fn sequence_counts() {
        let mk = |n: usize| -> Vec<FlowField> {
            (0..n).map(|t| field(2, 2, vec![t as f64 * 0.1; 4], vec![0.0; 4])).collect()
        };
        let cfg = DynamicFlowConfig::default();
        assert_eq!(dynamic_flow_sequence(&mk(25), &cfg).unwrap().len(), 5);
        assert_eq!(dynamic_flow_sequence(&mk(10), &cfg).unwrap().len(), 1);
        assert_eq!(dynamic_flow_count(200, 20), 180);
        assert!(dynamic_flow_sequence(&mk(1), &cfg).is_err());
        let bad = DynamicFlowConfig { window: 1, ..cfg };
        assert!(dynamic_flow_sequence(&mk(5), &bad).is_err());
        for img in dynamic_flow_sequence(&mk(23), &cfg).unwrap() {
            for p in 0..4 {
                assert_eq!(img.fm[p], img.fu[p].hypot(img.fv[p]));
            }
        }
    }

    #[test]
    fn normalizer_maps_into_unit_range() {
        let a = Tensor::new(vec![3, 1, 2], vec![-1.0, 1.0, 0.0, 2.0, 5.0, 6.0]).unwrap();
        let n = FlowNormalizer::fit(&[a.clone()]).unwrap();
        let out = n.apply(&a).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let wild = Tensor::new(vec![3, 1, 2], vec![-9.0, 9.0, 1.0, 1.0, 5.5, 5.5]).unwrap();
        assert_eq!(n.apply(&wild).unwrap().data(), &[0.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
    }
}
