//! Glue between the stages: input preparation for both streams, training
//! set assembly, per-stream models with their side data, and video scoring.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::flow::{dynamic_flow_sequence, DynamicFlowConfig, FlowField, FlowNormalizer};
use crate::gmvae::persist::{load_model, save_model};
use crate::gmvae::{train, GmvaeModel, TrainConfig, TrainReport};
use crate::manifest::Manifest;
use crate::patches::{
    extract_patches, motion_filter, resize_frame, sample_training_set, PatchBatch, Stream, DEFAULT_MOTION_THRESHOLD,
    PATCH, TRAIN_STRIDE,
};
use crate::scoring::{align_motion, fuse, score_frame, score_patches, EnergyMap, EnergyStats};
use crate::tensor::Tensor;

/// Everything that shapes a run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub flow: DynamicFlowConfig,
    pub train: TrainConfig,
    /// Training patches per stream after filtering and sampling.
    pub train_patches: usize,
    pub motion_threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Standardise each stream's energies by its training statistics
    /// before fusion.
    pub standardize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            flow: DynamicFlowConfig::default(),
            train: TrainConfig::default(),
            train_patches: 20_000,
            motion_threshold: DEFAULT_MOTION_THRESHOLD,
            alpha: 0.5,
            beta: 0.5,
            standardize: false,
        }
    }
}

/// Appearance input: resized to 280×420 and clamped to `[0, 1]`.
pub fn appearance_input(frame: &Tensor) -> Result<Tensor> {
    Ok(resize_frame(frame)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Raw dynamic-flow images of a video at 280×420 (not yet normalised).
pub fn dynamic_flow_images(flows: &[FlowField], cfg: &DynamicFlowConfig) -> Result<Vec<Tensor>> {
    dynamic_flow_sequence(flows, cfg)?
        .iter()
        .map(|d| resize_frame(&d.to_tensor()))
        .collect()
}

/// Normalised dynamic-flow image ready for patching.
pub fn motion_input(raw: &Tensor, normalizer: &FlowNormalizer) -> Result<Tensor> {
    normalizer.apply(raw)
}

/// Motion-filtered training patches of one video, at most `quota` per frame.
/// `inputs[i]` is the stream input aligned to video frame `i`; `frames` are
/// the appearance inputs used by the motion filter.
pub fn collect_patches(
    stream: Stream,
    video: usize,
    inputs: &[Tensor],
    frames: &[Tensor],
    quota: usize,
    threshold: f64,
    seed: u64,
) -> Result<PatchBatch> {
    let mut parts = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let frame = frames.get(i).ok_or_else(|| contract_err!("no frame aligned with input {i}"))?;
        let all = extract_patches(input, PATCH, TRAIN_STRIDE, stream, video, i)?;
        let prev = i.checked_sub(1).map(|p| &frames[p]);
        let kept = motion_filter(&all, frame, prev, threshold)?;
        let mut idx: Vec<usize> = (0..kept.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((video as u64) << 32) ^ i as u64);
        idx.shuffle(&mut rng);
        idx.truncate(quota);
        idx.sort_unstable();
        if !idx.is_empty() {
            parts.push(kept.select(&idx)?);
        }
    }
    if parts.is_empty() {
        return Ok(PatchBatch::empty(stream, TRAIN_STRIDE));
    }
    PatchBatch::concat(&parts)
}

/// A trained stream plus what is needed to score with it.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModel {
    pub stream: Stream,
    pub model: GmvaeModel,
    /// Motion stream only.
    pub normalizer: Option<FlowNormalizer>,
    /// Energies of the training patches.
    pub stats: EnergyStats,
    /// Dynamic-flow window the motion stream was trained with.
    pub window: usize,
}

/// Train one stream on sampled patches and record its energy statistics.
pub fn train_stream(
    stream: Stream,
    batches: &[PatchBatch],
    cfg: &PipelineConfig,
    normalizer: Option<FlowNormalizer>,
) -> Result<(StreamModel, TrainReport)> {
    let nonempty: Vec<PatchBatch> = batches.iter().filter(|b| !b.is_empty()).cloned().collect();
    if nonempty.is_empty() {
        return Err(Error::Data(format!("no {} training patches survived filtering", stream.name())));
    }
    let set = sample_training_set(&nonempty, cfg.train_patches, cfg.train.seed)?;
    log::info!("{} stream: training on {} patches", stream.name(), set.len());
    let (model, report) = train(&set.data, &cfg.train)?;
    let stats = EnergyStats::fit(&score_patches(&model, &set)?)?;
    Ok((
        StreamModel {
            stream,
            model,
            normalizer,
            stats,
            window: cfg.flow.window,
        },
        report,
    ))
}

pub fn train_config_manifest(c: &TrainConfig) -> Manifest {
    let mut m = Manifest::new();
    m.set("train.learning_rate", format!("{:?}", c.learning_rate))
        .set("train.momentum", format!("{:?}", c.momentum))
        .set("train.weight_decay", format!("{:?}", c.weight_decay))
        .set("train.batch_size", c.batch_size)
        .set("train.epochs", c.epochs)
        .set("train.mc_samples", c.mc_samples)
        .set("train.pretrain_epochs", c.pretrain_epochs)
        .set("train.seed", c.seed)
        .set("train.components", c.components);
    m
}

/// Apply `train.` overrides from `m` to `base`.
pub fn train_config_from_manifest(m: &Manifest, base: &TrainConfig) -> Result<TrainConfig> {
    let s = m.section("train");
    let mut c = base.clone();
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = s.parse(stringify!($field))? {
                c.$field = v;
            }
        };
    }
    take!(learning_rate);
    take!(momentum);
    take!(weight_decay);
    take!(batch_size);
    take!(epochs);
    take!(mc_samples);
    take!(pretrain_epochs);
    take!(seed);
    take!(components);
    Ok(c)
}

/// Every pipeline setting as `flow.`, `train.`, `pipeline.` and `score.` keys.
pub fn pipeline_manifest(c: &PipelineConfig) -> Manifest {
    let mut m = Manifest::new();
    m.set("flow.window", c.flow.window)
        .set("flow.quant_scale", format!("{:?}", c.flow.quant_scale))
        .set("flow.quant_offset", format!("{:?}", c.flow.quant_offset))
        .set("flow.c", format!("{:?}", c.flow.solver.c))
        .set("flow.max_iter", c.flow.solver.max_iter)
        .set("flow.tol", format!("{:?}", c.flow.solver.tol))
        .set("flow.max_halvings", c.flow.solver.max_halvings);
    for (k, v) in train_config_manifest(&c.train).entries() {
        m.set(k.clone(), v);
    }
    m.set("pipeline.train_patches", c.train_patches)
        .set("pipeline.motion_threshold", format!("{:?}", c.motion_threshold))
        .set("score.alpha", format!("{:?}", c.alpha))
        .set("score.beta", format!("{:?}", c.beta))
        .set("score.standardize", c.standardize);
    m
}

/// Apply overrides from `m` to `base`.
pub fn pipeline_config_from_manifest(m: &Manifest, base: &PipelineConfig) -> Result<PipelineConfig> {
    let mut c = base.clone();
    let f = m.section("flow");
    macro_rules! take {
        ($sec:expr, $key:literal, $dst:expr) => {
            if let Some(v) = $sec.parse($key)? {
                $dst = v;
            }
        };
    }
    take!(f, "window", c.flow.window);
    take!(f, "quant_scale", c.flow.quant_scale);
    take!(f, "quant_offset", c.flow.quant_offset);
    take!(f, "c", c.flow.solver.c);
    take!(f, "max_iter", c.flow.solver.max_iter);
    take!(f, "tol", c.flow.solver.tol);
    take!(f, "max_halvings", c.flow.solver.max_halvings);
    c.train = train_config_from_manifest(m, &c.train)?;
    let p = m.section("pipeline");
    take!(p, "train_patches", c.train_patches);
    take!(p, "motion_threshold", c.motion_threshold);
    let s = m.section("score");
    take!(s, "alpha", c.alpha);
    take!(s, "beta", c.beta);
    take!(s, "standardize", c.standardize);
    if !(c.alpha >= 0.0 && c.beta >= 0.0) {
        return Err(Error::Usage(format!("fusion weights must be non-negative, got {} and {}", c.alpha, c.beta)));
    }
    if c.flow.window < 2 {
        return Err(Error::Usage(format!("flow.window must be at least 2, got {}", c.flow.window)));
    }
    c.train.validate().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(c)
}

/// Nearest-neighbour resize of a ground-truth mask.
pub fn resize_mask(mask: &[bool], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<bool>> {
    if mask.len() != h * w || h == 0 || w == 0 {
        return Err(dim_err!("mask of {} pixels is not {h}×{w}", mask.len()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(mask.to_vec());
    }
    Ok((0..out_h * out_w)
        .map(|i| {
            let (y, x) = (i / out_w, i % out_w);
            mask[(y * h / out_h) * w + x * w / out_w]
        })
        .collect())
}

impl StreamModel {
    pub fn save(&self, path: &Path, train: &TrainConfig) -> Result<()> {
        let mut m = train_config_manifest(train);
        m.set("stream", self.stream.name())
            .set("window", self.window)
            .set("energy.mean", format!("{:?}", self.stats.mean))
            .set("energy.std", format!("{:?}", self.stats.std));
        if let Some(n) = &self.normalizer {
            m.set_floats("normalizer.lo", &n.lo).set_floats("normalizer.hi", &n.hi);
        }
        save_model(path, &self.model, &m)
    }

    /// Load a stream model and the training configuration recorded with it.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let (model, m) = load_model(path)?;
        let bad = |e: Error| Error::format(path, e.to_string());
        let stream = Stream::parse(m.require("stream").map_err(bad)?)
            .ok_or_else(|| Error::format(path, "unknown stream"))?;
        let normalizer = match (m.floats("normalizer.lo").map_err(bad)?, m.floats("normalizer.hi").map_err(bad)?) {
            (Some(lo), Some(hi)) if lo.len() == 3 && hi.len() == 3 => Some(FlowNormalizer {
                lo: [lo[0], lo[1], lo[2]],
                hi: [hi[0], hi[1], hi[2]],
            }),
            (None, None) => None,
            _ => return Err(Error::format(path, "malformed normalizer")),
        };
        if stream == Stream::Motion && normalizer.is_none() {
            return Err(Error::format(path, "motion model without a flow normalizer"));
        }
        let train = train_config_from_manifest(&m, &TrainConfig::default()).map_err(bad)?;
        Ok((
            StreamModel {
                stream,
                model,
                normalizer,
                stats: EnergyStats {
                    mean: m.parse_required("energy.mean").map_err(bad)?,
                    std: m.parse_required("energy.std").map_err(bad)?,
                },
                window: m.parse_required("window").map_err(bad)?,
            },
            train,
        ))
    }
}

/// Per-frame maps of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub appearance: Option<Vec<EnergyMap>>,
    /// Already aligned to video frames.
    pub motion: Option<Vec<EnergyMap>>,
    pub fused: Vec<EnergyMap>,
}

/// Appearance energy maps for every frame.
pub fn score_appearance(model: &StreamModel, frames: &[Tensor]) -> Result<Vec<EnergyMap>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| score_frame(&model.model, &appearance_input(f)?, Stream::Appearance, i))
        .collect()
}

/// Motion energy maps aligned to `n_frames` video frames.
pub fn score_motion(model: &StreamModel, flows: &[FlowField], n_frames: usize, cfg: &DynamicFlowConfig) -> Result<Vec<EnergyMap>> {
    let cfg = DynamicFlowConfig {
        window: model.window,
        ..*cfg
    };
    score_motion_raw(model, &dynamic_flow_images(flows, &cfg)?, n_frames)
}

/// Like [`score_motion`] from already computed raw dynamic-flow images.
pub fn score_motion_raw(model: &StreamModel, raw: &[Tensor], n_frames: usize) -> Result<Vec<EnergyMap>> {
    let norm = model
        .normalizer
        .as_ref()
        .ok_or_else(|| contract_err!("motion model has no flow normalizer"))?;
    let maps = raw
        .iter()
        .enumerate()
        .map(|(i, r)| score_frame(&model.model, &motion_input(&resize_frame(r)?, norm)?, Stream::Motion, i))
        .collect::<Result<Vec<_>>>()?;
    align_motion(&maps, n_frames)
}

/// Fuse whichever streams are present. A missing stream contributes zero.
pub fn fuse_streams(
    app: Option<(&[EnergyMap], &EnergyStats)>,
    mot: Option<(&[EnergyMap], &EnergyStats)>,
    alpha: f64,
    beta: f64,
    standardize: bool,
) -> Result<Vec<EnergyMap>> {
    let prep = |m: &EnergyMap, s: &EnergyStats| if standardize { s.standardize(m) } else { m.clone() };
    match (app, mot) {
        (Some((a, sa)), Some((m, sm))) => {
            if a.len() != m.len() {
                return Err(Error::Data(format!("{} appearance maps vs {} motion maps", a.len(), m.len())));
            }
            a.iter().zip(m).map(|(x, y)| fuse(&prep(x, sa), &prep(y, sm), alpha, beta)).collect()
        }
        (Some((a, s)), None) => a.iter().map(|x| {
            let x = prep(x, s);
            let zero = EnergyMap { values: vec![0.0; x.values.len()], ..x.clone() };
            fuse(&x, &zero, alpha, beta)
        }).collect(),
        (None, Some((m, s))) => m.iter().map(|y| {
            let y = prep(y, s);
            let zero = EnergyMap { values: vec![0.0; y.values.len()], ..y.clone() };
            fuse(&zero, &y, alpha, beta)
        }).collect(),
        (None, None) => Err(contract_err!("no stream model supplied")),
    }
}

/// Score a whole video with one or both streams.
pub fn score_video(
    app: Option<&StreamModel>,
    mot: Option<&StreamModel>,
    frames: &[Tensor],
    flows: Option<&[FlowField]>,
    cfg: &PipelineConfig,
) -> Result<VideoScores> {
    let a = app.map(|m| score_appearance(m, frames)).transpose()?;
    let m = match mot {
        Some(model) => {
            let flows = flows.ok_or_else(|| Error::Data("motion model given but the video has no flows".into()))?;
            Some(score_motion(model, flows, frames.len(), &cfg.flow)?)
        }
        None => None,
    };
    let fused = fuse_streams(
        a.as_deref().zip(app.map(|s| &s.stats)),
        m.as_deref().zip(mot.map(|s| &s.stats)),
        cfg.alpha,
        cfg.beta,
        cfg.standardize,
    )?;
    Ok(VideoScores {
        appearance: a,
        motion: m,
        fused,
    })
}
