//! Command-line front end: `synth`, `flow`, `train`, `score` and `eval`.
//!
//! Settings come from an optional `key = value` file with `[section]`
//! headers (`synth`, `flow`, `train`, `pipeline`, `score`); flags override
//! the file. Every command writes a `run.txt` manifest into its output
//! directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::error::{Error, Result};
use crate::eval::{frame_scores, pixel_score, roc_table, summarize, Summary};
use crate::flow::{dynamic_flow_sequence, read_flow_dir, DynamicFlowConfig, FlowNormalizer};
use crate::imageio::{read_frame_dir, read_mask, sorted_files, write_mask};
use crate::manifest::Manifest;
use crate::par;
use crate::patches::{resize_frame, PatchBatch, Stream, TEST_STRIDE};
use crate::pipeline::{
    appearance_input, collect_patches, fuse_streams, motion_input, pipeline_config_from_manifest, pipeline_manifest,
    resize_mask, score_appearance, score_motion_raw, train_stream, PipelineConfig, StreamModel,
};
use crate::scoring::{threshold_mask, EnergyMap};
use crate::synth::{config_from_manifest, config_manifest, write_dataset, SynthConfig};
use crate::tensor::io::{self, DType};
use crate::tensor::Tensor;

pub const RUN_MANIFEST: &str = "run.txt";
pub const FRAME_SCORES: &str = "frame_scores.txt";
pub const REPORT: &str = "report.txt";

#[derive(Parser, Debug)]
#[command(name = "gmfcvae", version, about = "Two-stream GMFC-VAE video anomaly detection")]
pub struct Cli {
    /// Settings file (`key = value`, `[section]` headers); flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with planted anomalies.
    Synth(SynthArgs),
    /// Turn each video's optical flow into dynamic-flow images.
    Flow(FlowArgs),
    /// Train the stream models on normal videos.
    Train(TrainArgs),
    /// Score videos: energy maps, frame scores and optional masks.
    Score(ScoreArgs),
    /// Frame- and pixel-level ROC evaluation, or a sweep over K.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train_videos: Option<usize>,
    #[arg(long)]
    pub test_videos: Option<usize>,
    #[arg(long)]
    pub video_len: Option<usize>,
    #[arg(long)]
    pub families: Option<usize>,
    /// Comma-separated anomaly kinds, e.g. `texture-swap,reverse-motion`.
    #[arg(long)]
    pub anomalies: Option<String>,
}

#[derive(Args, Debug)]
pub struct FlowArgs {
    /// A video directory or a directory of videos, each with `flows/`.
    #[arg(long)]
    pub videos: PathBuf,
    /// Defaults to `--videos`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StreamChoice {
    Appearance,
    Motion,
    Both,
}

impl StreamChoice {
    fn appearance(self) -> bool {
        self != StreamChoice::Motion
    }

    fn motion(self) -> bool {
        self != StreamChoice::Appearance
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of normal training videos.
    #[arg(long)]
    pub videos: PathBuf,
    /// Model directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StreamChoice::Both)]
    pub stream: StreamChoice,
    /// Output of `flow` for these videos; computed on the fly otherwise.
    #[arg(long)]
    pub dynamic: Option<PathBuf>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training patches per stream.
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub motion_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub videos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StreamChoice::Both)]
    pub stream: StreamChoice,
    #[arg(long)]
    pub dynamic: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Mask threshold on fused energies; masks are skipped without it.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Standardise each stream by its training energies before fusion.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScoreColumn {
    Appearance,
    Motion,
    Fused,
}

impl ScoreColumn {
    fn name(self) -> &'static str {
        match self {
            ScoreColumn::Appearance => "appearance",
            ScoreColumn::Motion => "motion",
            ScoreColumn::Fused => "fused",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `score` (not used with `--k-sweep`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Test videos with `labels.txt` and optionally `masks/`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scores the ROC tables and pixel-level results are computed from.
    #[arg(long, value_enum, default_value_t = ScoreColumn::Fused)]
    pub stream: ScoreColumn,
    /// Retrain and rescore for each K in this comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub k_sweep: Option<Vec<usize>>,
    /// Training videos for `--k-sweep`.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Dynamic-flow output for the training videos (`--k-sweep`).
    #[arg(long)]
    pub train_dynamic: Option<PathBuf>,
    /// Dynamic-flow output for the test videos (`--k-sweep`).
    #[arg(long)]
    pub gt_dynamic: Option<PathBuf>,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    par::set_parallel(!cli.sequential);
    let mut settings = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("cannot read {}: {e}", p.display())))?;
            Manifest::parse_text(&text).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
        }
        None => Manifest::new(),
    };
    if let Some(s) = cli.seed {
        settings.set("synth.seed", s).set("train.seed", s);
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&mut settings, a),
        Command::Flow(a) => cmd_flow(&mut settings, a),
        Command::Train(a) => cmd_train(&mut settings, a),
        Command::Score(a) => cmd_score(&mut settings, a),
        Command::Eval(a) => cmd_eval(&mut settings, a),
    }
}

fn usage(e: Error) -> Error {
    match e {
        Error::Data(m) | Error::Contract(m) => Error::Usage(m),
        other => other,
    }
}

fn pipeline_config(settings: &Manifest) -> Result<PipelineConfig> {
    pipeline_config_from_manifest(settings, &PipelineConfig::default()).map_err(usage)
}

fn override_opt<T: ToString>(m: &mut Manifest, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.set(key, v.to_string());
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn write_run(dir: &Path, command: &str, body: &Manifest) -> Result<()> {
    let mut m = Manifest::new();
    m.set("command", command).set("version", env!("CARGO_PKG_VERSION"));
    for (k, v) in body.entries() {
        m.set(k.clone(), v);
    }
    write_text(&dir.join(RUN_MANIFEST), &m.render())
}

/// Videos under `root`: the directory itself when it holds `frames/` or
/// `flows/`, otherwise its subdirectories that do, by name.
pub fn list_videos(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let is_video = |p: &Path| p.join("frames").is_dir() || p.join("flows").is_dir();
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    if is_video(root) {
        let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "video".into());
        return Ok(vec![(name, root.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() && is_video(&p) {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Data(format!("no videos (directories with frames/ or flows/) under {}", root.display())));
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::format(path, format!("label `{l}` is neither 0 nor 1"))),
        })
        .collect()
}

fn cmd_synth(settings: &mut Manifest, a: &SynthArgs) -> Result<()> {
    override_opt(settings, "synth.train_videos", &a.train_videos);
    override_opt(settings, "synth.test_videos", &a.test_videos);
    override_opt(settings, "synth.video_len", &a.video_len);
    override_opt(settings, "synth.families", &a.families);
    override_opt(settings, "synth.anomalies", &a.anomalies);
    let cfg = config_from_manifest(settings, &SynthConfig::default()).map_err(usage)?;
    cfg.validate(2).map_err(usage)?;
    mkdir(&a.out)?;
    info!("writing {} training and {} test videos to {}", cfg.train_videos, cfg.test_videos, a.out.display());
    write_dataset(&a.out, &cfg)?;
    write_run(&a.out, "synth", &config_manifest(&cfg))
}

fn dynamic_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name).join("dynamic")
}

fn cmd_flow(settings: &mut Manifest, a: &FlowArgs) -> Result<()> {
    override_opt(settings, "flow.window", &a.window);
    let cfg = pipeline_config(settings)?;
    let out = a.out.clone().unwrap_or_else(|| a.videos.clone());
    let videos = list_videos(&a.videos)?;
    mkdir(&out)?;
    for (name, dir) in &videos {
        let flows = read_flow_dir(&dir.join("flows"))?;
        let images = dynamic_flow_sequence(&flows, &cfg.flow)?;
        let dd = dynamic_dir(&out, name);
        mkdir(&dd)?;
        for img in &images {
            io::save(&dd.join(format!("{:06}.gmf", img.start)), &img.to_tensor(), DType::F32)?;
        }
        info!("{name}: {} flows -> {} dynamic-flow images", flows.len(), images.len());
    }
    let mut body = pipeline_manifest(&cfg);
    body.set("videos", a.videos.display());
    write_run(&out, "flow", &body)
}

/// Raw dynamic-flow images of one video at scoring resolution, from a
/// `flow` output directory when given, otherwise computed from `flows/`.
fn raw_dynamic(name: &str, dir: &Path, dynamic: Option<&Path>, cfg: &DynamicFlowConfig) -> Result<Vec<Tensor>> {
    match dynamic {
        Some(root) => {
            let run = root.join(RUN_MANIFEST);
            if let Ok(text) = fs::read_to_string(&run) {
                let m = Manifest::parse_text(&text)?;
                if let Some(w) = m.parse::<usize>("flow.window")? {
                    if w != cfg.window {
                        return Err(Error::Data(format!(
                            "{} holds window {w} dynamic flow but the model needs {}",
                            root.display(),
                            cfg.window
                        )));
                    }
                }
            }
            sorted_files(&dynamic_dir(root, name), &["gmf"])?
                .iter()
                .map(|p| resize_frame(&io::load(p)?))
                .collect()
        }
        None => crate::pipeline::dynamic_flow_images(&read_flow_dir(&dir.join("flows"))?, cfg),
    }
}

fn appearance_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let frames = read_frame_dir(&dir.join("frames"))?;
    if frames.is_empty() {
        return Err(Error::Data(format!("no frames in {}", dir.join("frames").display())));
    }
    frames.iter().map(appearance_input).collect()
}

fn cmd_train(settings: &mut Manifest, a: &TrainArgs) -> Result<()> {
    override_opt(settings, "flow.window", &a.window);
    override_opt(settings, "train.epochs", &a.epochs);
    override_opt(settings, "train.pretrain_epochs", &a.pretrain_epochs);
    override_opt(settings, "train.components", &a.components);
    override_opt(settings, "train.learning_rate", &a.learning_rate);
    override_opt(settings, "train.batch_size", &a.batch_size);
    override_opt(settings, "pipeline.train_patches", &a.patches);
    override_opt(settings, "pipeline.motion_threshold", &a.motion_threshold);
    let cfg = pipeline_config(settings)?;
    let videos = list_videos(&a.videos)?;
    mkdir(&a.out)?;
    let total: usize = videos
        .iter()
        .map(|(_, d)| sorted_files(&d.join("frames"), &["gmf", "ppm", "pgm"]).map(|f| f.len()))
        .sum::<Result<usize>>()?;
    if total == 0 {
        return Err(Error::Data(format!("no training frames under {}", a.videos.display())));
    }
    // twice the share needed, so the global sample still has a choice
    let quota = (2 * cfg.train_patches).div_ceil(total).max(1);
    let seed = cfg.train.seed;
    let mut body = pipeline_manifest(&cfg);
    body.set("videos", a.videos.display()).set("stream", format!("{:?}", a.stream).to_lowercase());

    if a.stream.appearance() {
        let mut batches: Vec<PatchBatch> = Vec::new();
        for (vi, (_, dir)) in videos.iter().enumerate() {
            let frames = appearance_frames(dir)?;
            batches.push(collect_patches(Stream::Appearance, vi, &frames, &frames, quota, cfg.motion_threshold, seed ^ 0xA)?);
        }
        let (model, report) = train_stream(Stream::Appearance, &batches, &cfg, None)?;
        model.save(&a.out.join("appearance.gmf"), &cfg.train)?;
        record_report(&mut body, "appearance", &model, &report);
    }
    if a.stream.motion() {
        let mut norm = FlowNormalizer::unfitted();
        for (name, dir) in &videos {
            for img in raw_dynamic(name, dir, a.dynamic.as_deref(), &cfg.flow)? {
                norm.observe(&img)?;
            }
        }
        if !norm.is_fitted() {
            return Err(Error::Data("no dynamic-flow images to fit the normalizer on".into()));
        }
        let mut batches = Vec::new();
        for (vi, (name, dir)) in videos.iter().enumerate() {
            let frames = appearance_frames(dir)?;
            let inputs = raw_dynamic(name, dir, a.dynamic.as_deref(), &cfg.flow)?
                .iter()
                .map(|r| motion_input(r, &norm))
                .collect::<Result<Vec<_>>>()?;
            batches.push(collect_patches(Stream::Motion, vi, &inputs, &frames, quota, cfg.motion_threshold, seed ^ 0xB)?);
        }
        let (model, report) = train_stream(Stream::Motion, &batches, &cfg, Some(norm))?;
        model.save(&a.out.join("motion.gmf"), &cfg.train)?;
        record_report(&mut body, "motion", &model, &report);
    }
    write_run(&a.out, "train", &body)
}

fn record_report(m: &mut Manifest, stream: &str, model: &StreamModel, r: &crate::gmvae::TrainReport) {
    let last = |v: &[f64]| v.last().map(|x| format!("{x:?}")).unwrap_or_else(|| "-".into());
    m.set(format!("report.{stream}.pretrain_mse"), last(&r.pretrain_mse))
        .set(format!("report.{stream}.em_log_likelihood"), format!("{:?}", r.em_log_likelihood))
        .set(format!("report.{stream}.loss"), last(&r.loss))
        .set(format!("report.{stream}.reconstruction"), last(&r.reconstruction))
        .set(format!("report.{stream}.kl"), last(&r.kl))
        .set(format!("report.{stream}.energy_mean"), format!("{:?}", model.stats.mean))
        .set(format!("report.{stream}.energy_std"), format!("{:?}", model.stats.std));
}

fn maps_tensor(maps: &[EnergyMap]) -> Result<Tensor> {
    let (r, c) = maps.first().map(|m| (m.rows, m.cols)).unwrap_or((0, 0));
    Tensor::new(vec![maps.len(), r, c], maps.iter().flat_map(|m| m.values.iter().copied()).collect())
}

fn maps_from_tensor(t: &Tensor, stream: Option<Stream>) -> Result<Vec<EnergyMap>> {
    let [n, r, c] = *t.shape() else {
        return Err(crate::error::dim_err!("energy maps must be T×rows×cols, got {:?}", t.shape()));
    };
    (0..n)
        .map(|i| EnergyMap::new(r, c, t.data()[i * r * c..(i + 1) * r * c].to_vec(), i, stream))
        .collect()
}

fn cmd_score(settings: &mut Manifest, a: &ScoreArgs) -> Result<()> {
    override_opt(settings, "score.alpha", &a.alpha);
    override_opt(settings, "score.beta", &a.beta);
    if a.standardize {
        settings.set("score.standardize", true);
    }
    let cfg = pipeline_config(settings)?;
    let load = |name: &str| -> Result<Option<StreamModel>> {
        let p = a.models.join(name);
        if p.is_file() {
            Ok(Some(StreamModel::load(&p)?.0))
        } else {
            Ok(None)
        }
    };
    let app = if a.stream.appearance() { load("appearance.gmf")? } else { None };
    let mot = if a.stream.motion() { load("motion.gmf")? } else { None };
    if app.is_none() && mot.is_none() {
        return Err(Error::Data(format!("no usable model in {}", a.models.display())));
    }
    if a.stream == StreamChoice::Both && (app.is_none() || mot.is_none()) {
        log::warn!("only one stream model found in {}; the other contributes zero", a.models.display());
    }
    let videos = list_videos(&a.videos)?;
    mkdir(&a.out)?;
    let mut table = String::from("# video frame appearance motion fused\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_else(|| "-".into());
    for (name, dir) in &videos {
        let frames = read_frame_dir(&dir.join("frames"))?;
        if frames.is_empty() {
            return Err(Error::Data(format!("no frames in {}", dir.display())));
        }
        let am = app.as_ref().map(|m| score_appearance(m, &frames)).transpose()?;
        let mm = match &mot {
            Some(m) => {
                let flow = DynamicFlowConfig { window: m.window, ..cfg.flow };
                let raw = raw_dynamic(name, dir, a.dynamic.as_deref(), &flow)?;
                Some(score_motion_raw(m, &raw, frames.len())?)
            }
            None => None,
        };
        let fused = fuse_streams(
            am.as_deref().zip(app.as_ref().map(|s| &s.stats)),
            mm.as_deref().zip(mot.as_ref().map(|s| &s.stats)),
            cfg.alpha,
            cfg.beta,
            cfg.standardize,
        )?;
        let vd = a.out.join(name);
        mkdir(&vd)?;
        for (label, maps) in [("appearance", &am), ("motion", &mm), ("fused", &Some(fused.clone()))] {
            if let Some(maps) = maps {
                io::save(&vd.join(format!("{label}.gmf")), &maps_tensor(maps)?, DType::F64)?;
            }
        }
        let fa = am.as_deref().map(frame_scores);
        let fm = mm.as_deref().map(frame_scores);
        let ff = frame_scores(&fused);
        for (t, f) in ff.iter().enumerate() {
            table.push_str(&format!(
                "{name} {t} {} {} {f:?}\n",
                cell(fa.as_ref().map(|v| v[t])),
                cell(fm.as_ref().map(|v| v[t]))
            ));
        }
        if let Some(theta) = a.theta {
            let md = vd.join("masks");
            mkdir(&md)?;
            for map in &fused {
                let mask = threshold_mask(map, theta);
                write_mask(&md.join(format!("{:06}.pgm", map.frame)), mask.height, mask.width, &mask.pixels)?;
            }
        }
        info!("{name}: scored {} frames", frames.len());
    }
    write_text(&a.out.join(FRAME_SCORES), &table)?;
    let mut body = pipeline_manifest(&cfg);
    body.set("models", a.models.display()).set("videos", a.videos.display());
    if let Some(t) = a.theta {
        body.set("score.theta", format!("{t:?}"));
    }
    write_run(&a.out, "score", &body)
}

/// One row of `frame_scores.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub video: String,
    pub frame: usize,
    /// Appearance, motion, fused.
    pub scores: [Option<f64>; 3],
}

pub fn read_frame_scores(path: &Path) -> Result<Vec<FrameScore>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |l: &str| Error::format(path, format!("malformed line `{l}`"));
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(line));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(line))
            }
        };
        out.push(FrameScore {
            video: f[0].to_string(),
            frame: f[1].parse().map_err(|_| bad(line))?,
            scores: [num(f[2])?, num(f[3])?, num(f[4])?],
        });
    }
    Ok(out)
}

/// Frame-level summaries per available score column plus, when masks and
/// maps exist, the pixel-level summary of `column`.
pub struct Evaluation {
    pub frame: BTreeMap<&'static str, Summary>,
    pub pixel: Option<Summary>,
    pub frames: usize,
    pub positives: usize,
}

pub fn evaluate(scores_dir: &Path, gt: &Path, column: ScoreColumn) -> Result<Evaluation> {
    let rows = read_frame_scores(&scores_dir.join(FRAME_SCORES))?;
    let mut videos: Vec<String> = Vec::new();
    for r in &rows {
        if videos.last() != Some(&r.video) {
            if videos.contains(&r.video) {
                return Err(Error::Data(format!("rows of video {} are not contiguous", r.video)));
            }
            videos.push(r.video.clone());
        }
    }
    let mut labels = Vec::with_capacity(rows.len());
    for v in &videos {
        let l = read_labels(&gt.join(v).join("labels.txt"))?;
        let n = rows.iter().filter(|r| &r.video == v).count();
        if l.len() != n {
            return Err(Error::Data(format!("video {v}: {n} scored frames but {} labels", l.len())));
        }
        labels.extend(l);
    }
    let mut frame = BTreeMap::new();
    for col in [ScoreColumn::Appearance, ScoreColumn::Motion, ScoreColumn::Fused] {
        let s: Option<Vec<f64>> = rows.iter().map(|r| r.scores[col.index()]).collect();
        if let Some(s) = s {
            frame.insert(col.name(), summarize(&s, &labels)?);
        }
    }
    if !frame.contains_key(column.name()) {
        return Err(Error::Data(format!("no {} scores in {}", column.name(), scores_dir.display())));
    }
    let have_pixel = videos.iter().all(|v| gt.join(v).join("masks").is_dir() && scores_dir.join(v).join(format!("{}.gmf", column.name())).is_file());
    let pixel = if have_pixel {
        let mut ps = Vec::with_capacity(rows.len());
        let mut k = 0;
        for v in &videos {
            let maps = maps_from_tensor(&io::load(&scores_dir.join(v).join(format!("{}.gmf", column.name())))?, None)?;
            let masks = sorted_files(&gt.join(v).join("masks"), &["pgm"])?;
            if masks.len() != maps.len() {
                return Err(Error::Data(format!("video {v}: {} maps but {} masks", maps.len(), masks.len())));
            }
            for (map, mp) in maps.iter().zip(&masks) {
                let (h, w, m) = read_mask(mp)?;
                let m = resize_mask(&m, h, w, map.rows * TEST_STRIDE, map.cols * TEST_STRIDE)?;
                ps.push(pixel_score(map, &m, labels[k])?);
                k += 1;
            }
        }
        Some(summarize(&ps, &labels)?)
    } else {
        None
    };
    Ok(Evaluation {
        frame,
        pixel,
        frames: labels.len(),
        positives: labels.iter().filter(|&&l| l).count(),
    })
}

fn report_manifest(e: &Evaluation, column: ScoreColumn) -> Manifest {
    let mut m = Manifest::new();
    m.set("frames", e.frames).set("positives", e.positives).set("stream", column.name());
    for (name, s) in &e.frame {
        m.set(format!("frame.{name}.auc"), format!("{:?}", s.auc))
            .set(format!("frame.{name}.eer"), format!("{:?}", s.eer));
    }
    match &e.pixel {
        Some(s) => m
            .set("pixel.auc", format!("{:?}", s.auc))
            .set("pixel.eer", format!("{:?}", s.eer)),
        None => m.set("pixel", "skipped"),
    };
    m
}

fn cmd_eval(settings: &mut Manifest, a: &EvalArgs) -> Result<()> {
    if let Some(ks) = &a.k_sweep {
        return k_sweep(settings, a, ks);
    }
    let scores = a.scores.as_ref().ok_or_else(|| Error::Usage("eval needs --scores (or --k-sweep)".into()))?;
    let e = evaluate(scores, &a.gt, a.stream)?;
    mkdir(&a.out)?;
    write_text(&a.out.join(REPORT), &report_manifest(&e, a.stream).render())?;
    write_text(&a.out.join("roc_frame.txt"), &roc_table(&e.frame[a.stream.name()].curve))?;
    if let Some(p) = &e.pixel {
        write_text(&a.out.join("roc_pixel.txt"), &roc_table(&p.curve))?;
    }
    let mut body = Manifest::new();
    body.set("scores", scores.display()).set("gt", a.gt.display());
    write_run(&a.out, "eval", &body)
}

fn k_sweep(settings: &mut Manifest, a: &EvalArgs, ks: &[usize]) -> Result<()> {
    let train = a.train.as_ref().ok_or_else(|| Error::Usage("--k-sweep needs --train".into()))?;
    if ks.is_empty() {
        return Err(Error::Usage("empty K list".into()));
    }
    let stream = match a.stream {
        ScoreColumn::Appearance => StreamChoice::Appearance,
        ScoreColumn::Motion => StreamChoice::Motion,
        ScoreColumn::Fused => StreamChoice::Both,
    };
    mkdir(&a.out)?;
    let mut table = String::from("# K AUC%\n");
    let mut report = Manifest::new();
    report.set("stream", a.stream.name());
    for &k in ks {
        let base = a.out.join(format!("k{k}"));
        let (models, scores) = (base.join("models"), base.join("scores"));
        let mut s = settings.clone();
        s.set("train.components", k);
        cmd_train(
            &mut s.clone(),
            &TrainArgs {
                videos: train.clone(),
                out: models.clone(),
                stream,
                dynamic: a.train_dynamic.clone(),
                window: None,
                epochs: None,
                pretrain_epochs: None,
                components: None,
                learning_rate: None,
                batch_size: None,
                patches: None,
                motion_threshold: None,
            },
        )?;
        cmd_score(
            &mut s,
            &ScoreArgs {
                models,
                videos: a.gt.clone(),
                out: scores.clone(),
                stream,
                dynamic: a.gt_dynamic.clone(),
                alpha: None,
                beta: None,
                theta: None,
                standardize: false,
            },
        )?;
        let e = evaluate(&scores, &a.gt, a.stream)?;
        let auc = e.frame[a.stream.name()].auc;
        info!("K = {k}: frame-level AUC {:.2}%", 100.0 * auc);
        table.push_str(&format!("{k} {:.2}\n", 100.0 * auc));
        report.set(format!("k{k}.auc"), format!("{auc:?}"));
    }
    write_text(&a.out.join("ksweep.txt"), &table)?;
    write_text(&a.out.join(REPORT), &report.render())?;
    let mut body = pipeline_manifest(&pipeline_config(settings)?);
    body.set("train", train.display())
        .set("gt", a.gt.display())
        .set("k_sweep", ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
    write_run(&a.out, "eval", &body)
}
