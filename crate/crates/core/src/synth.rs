//! Synthetic surveillance-style videos with planted anomalies.
//!
//! A slowly drifting textured background is crossed left to right by
//! striped discs ("pedestrians"). Optical flow is exact by construction:
//! every pixel carries the displacement of the surface covering it. Test
//! videos contain one extra disc inside a declared rectangle. It looks and
//! moves like the others until the anomaly interval, during which it
//! changes:
//!
//! * `TextureSwap`: checkerboard texture in foreign colours;
//! * `SpeedChange`: several times the normal speed;
//! * `ReverseMotion`: moving right to left;
//! * `FamilyBlend`: texture intensity halfway between the two normal
//!   families (only meaningful with `families = 2`).

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract_err, Error, Result};
use crate::flow::FlowField;
use crate::imageio::write_mask;
use crate::manifest::Manifest;
use crate::par;
use crate::tensor::io::{self, DType};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnomalyKind {
    TextureSwap,
    SpeedChange,
    ReverseMotion,
    FamilyBlend,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::TextureSwap => "texture-swap",
            AnomalyKind::SpeedChange => "speed-change",
            AnomalyKind::ReverseMotion => "reverse-motion",
            AnomalyKind::FamilyBlend => "family-blend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AnomalyKind::TextureSwap,
            AnomalyKind::SpeedChange,
            AnomalyKind::ReverseMotion,
            AnomalyKind::FamilyBlend,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// Axis-aligned pixel rectangle, `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub video_len: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    /// Normal appearance families (1 or 2); video `i` uses family `i % families`.
    pub families: usize,
    pub blobs: usize,
    pub blob_radius: f64,
    /// Horizontal speed of normal discs, pixels per frame.
    pub blob_speed: f64,
    /// Background drift, pixels per frame (x, y).
    pub drift: (f64, f64),
    /// Anomaly kinds cycled over test videos; empty means no anomalies.
    pub anomalies: Vec<AnomalyKind>,
    /// Region the anomalous disc stays within.
    pub anomaly_region: Rect,
    pub anomaly_radius: f64,
    pub speed_factor: f64,
    /// First anomalous frame and number of anomalous frames.
    pub anomaly_start: usize,
    pub anomaly_frames: usize,
    /// Frames over which a motion anomaly blends in from normal motion.
    pub anomaly_ramp: usize,
    /// Standard deviation of Gaussian noise added to emitted flow fields.
    pub flow_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 280,
            width: 420,
            video_len: 30,
            train_videos: 5,
            test_videos: 6,
            families: 1,
            blobs: 4,
            blob_radius: 20.0,
            blob_speed: 2.0,
            drift: (0.6, 0.3),
            anomalies: vec![AnomalyKind::TextureSwap, AnomalyKind::ReverseMotion],
            anomaly_region: Rect {
                y0: 40,
                x0: 40,
                y1: 240,
                x1: 380,
            },
            anomaly_radius: 22.0,
            speed_factor: 3.5,
            anomaly_start: 12,
            anomaly_frames: 18,
            anomaly_ramp: 4,
            flow_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, window: usize) -> Result<()> {
        let r = &self.anomaly_region;
        let d = (2.0 * self.anomaly_radius).ceil() as usize;
        if !(r.y0 < r.y1 && r.x0 < r.x1 && r.y1 <= self.height && r.x1 <= self.width) {
            return Err(contract_err!("anomaly region {r:?} is not inside {}×{}", self.height, self.width));
        }
        if r.y1 - r.y0 <= d || r.x1 - r.x0 <= d {
            return Err(contract_err!("anomaly region {r:?} cannot hold a disc of radius {}", self.anomaly_radius));
        }
        if self.video_len < window + 2 {
            return Err(contract_err!("videos of {} frames are shorter than Δt + 2 = {}", self.video_len, window + 2));
        }
        if !(1..=2).contains(&self.families) {
            return Err(contract_err!("1 or 2 normal families supported, got {}", self.families));
        }
        if self.anomaly_start + self.anomaly_frames > self.video_len {
            return Err(contract_err!("anomaly interval runs past the end of the video"));
        }
        if self.height < 28 || self.width < 28 || self.blob_radius <= 0.0 || self.flow_noise < 0.0 {
            return Err(contract_err!("degenerate synthetic configuration"));
        }
        Ok(())
    }
}

/// One generated video. `flows[t]` maps frame `t` to `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub flows: Vec<FlowField>,
    pub labels: Vec<bool>,
    /// Per-frame `H×W` ground truth, row-major.
    pub masks: Vec<Vec<bool>>,
    pub anomaly: Option<AnomalyKind>,
    pub family: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    pub train: Vec<Video>,
    pub test: Vec<Video>,
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Stripes { gain: f64 },
    Checker,
}

#[derive(Clone, Copy, Debug)]
struct Disc {
    start: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    texture: Texture,
    phase: f64,
    /// Horizontal wrap-around (normal discs) or bouncing inside a rectangle.
    bounds: Option<Rect>,
    anomaly: Option<Deviation>,
}

/// Behaviour of the planted disc over frames `from..to`.
#[derive(Clone, Copy, Debug)]
struct Deviation {
    from: usize,
    to: usize,
    ramp: usize,
    velocity: (f64, f64),
    texture: Texture,
}

fn triangle(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let m = (p - lo).rem_euclid(2.0 * span);
    lo + if m <= span { m } else { 2.0 * span - m }
}

impl Disc {
    fn centre(&self, t: usize, width: usize) -> (f64, f64) {
        let (mut x, mut y) = self.start;
        for k in 0..t {
            let (vx, vy) = self.velocity_at(k);
            x += vx;
            y += vy;
        }
        match self.bounds {
            Some(b) => (
                triangle(x, b.x0 as f64 + self.radius, b.x1 as f64 - self.radius),
                triangle(y, b.y0 as f64 + self.radius, b.y1 as f64 - self.radius),
            ),
            None => {
                let span = width as f64 + 2.0 * self.radius;
                ((x + self.radius).rem_euclid(span) - self.radius, y)
            }
        }
    }

    /// Displacement from frame `k` to `k + 1`. The planted disc blends into
    /// its anomalous velocity over the first `ramp` frames of the interval.
    fn velocity_at(&self, k: usize) -> (f64, f64) {
        match self.anomaly {
            Some(a) if (a.from..a.to).contains(&k) => {
                let f = ((k - a.from + 1) as f64 / a.ramp.max(1) as f64).min(1.0);
                (
                    (1.0 - f) * self.velocity.0 + f * a.velocity.0,
                    (1.0 - f) * self.velocity.1 + f * a.velocity.1,
                )
            }
            _ => self.velocity,
        }
    }

    fn anomalous(&self, t: usize) -> bool {
        self.anomaly.is_some_and(|a| (a.from..a.to).contains(&t))
    }

    fn texture(&self, t: usize) -> Texture {
        match self.anomaly {
            Some(a) if self.anomalous(t) => a.texture,
            _ => self.texture,
        }
    }
}

fn family_gain(family: usize, families: usize) -> f64 {
    match (families, family) {
        (1, _) => 1.0,
        (_, 0) => 0.45,
        _ => 1.35,
    }
}

fn background(x: f64, y: f64, gain: f64) -> [f64; 3] {
    let a = (TAU * (0.8 * x + 0.6 * y) / 37.0).sin();
    let b = (TAU * (0.3 * x - 0.95 * y) / 23.0).sin();
    let v = 0.35 + 0.08 * a + 0.06 * b;
    [v * gain * 1.0, v * gain * 0.95, v * gain * 0.85]
}

fn disc_colour(texture: Texture, dx: f64, dy: f64, phase: f64) -> [f64; 3] {
    match texture {
        Texture::Stripes { gain } => {
            let s = 0.5 + 0.5 * (TAU * (dx + phase) / 12.0).sin();
            let v = 0.45 + 0.2 * s + 0.03 * (TAU * dy / 16.0).cos();
            [v * gain * 1.25, v * gain * 0.8, v * gain * 0.5]
        }
        Texture::Checker => {
            let on = ((dx + 40.0) / 6.0).floor() as i64 + ((dy + 40.0) / 6.0).floor() as i64;
            if on.rem_euclid(2) == 0 {
                [0.1, 0.85, 0.9]
            } else {
                [0.05, 0.3, 0.55]
            }
        }
    }
}

fn video_seed(seed: u64, split: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (split << 40) ^ index as u64
}

struct Scene {
    discs: Vec<Disc>,
    gain: f64,
    anomaly: Option<usize>,
}

fn build_scene(cfg: &SynthConfig, split: u64, index: usize, anomaly: Option<AnomalyKind>) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, split, index));
    let family = index % cfg.families;
    let gain = family_gain(family, cfg.families);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let r = cfg.blob_radius;
    let mut discs: Vec<Disc> = (0..cfg.blobs)
        .map(|_| Disc {
            start: (rng.gen_range(-r..w + r), rng.gen_range(r..(h - r).max(r + 1.0))),
            velocity: (cfg.blob_speed * rng.gen_range(0.85..1.15), rng.gen_range(-0.2..0.2)),
            radius: r,
            texture: Texture::Stripes { gain },
            phase: rng.gen_range(0.0..12.0),
            bounds: None,
            anomaly: None,
        })
        .collect();
    for d in &mut discs {
        // keep vertical drift inside the frame
        let end = d.start.1 + d.velocity.1 * cfg.video_len as f64;
        if end < r || end > h - r {
            d.velocity.1 = -d.velocity.1;
        }
    }
    let anomaly = anomaly.map(|kind| {
        let reg = cfg.anomaly_region;
        let ra = cfg.anomaly_radius;
        let speed = cfg.blob_speed * rng.gen_range(0.9..1.1);
        let vy = rng.gen_range(-0.2..0.2);
        let odd_velocity = match kind {
            AnomalyKind::SpeedChange => (speed * cfg.speed_factor, vy),
            AnomalyKind::ReverseMotion => (-speed, vy),
            _ => (speed, vy),
        };
        let odd_texture = match kind {
            AnomalyKind::TextureSwap => Texture::Checker,
            AnomalyKind::FamilyBlend => Texture::Stripes {
                gain: 0.5 * (family_gain(0, 2) + family_gain(1, 2)),
            },
            _ => Texture::Stripes { gain },
        };
        // no bounce off the region edge before the interval starts
        let (lo, hi) = (reg.x0 as f64 + ra, reg.x1 as f64 - ra);
        let reach = (hi - speed * cfg.anomaly_start as f64).max(lo + 1.0);
        let (ylo, yhi) = (reg.y0 as f64 + ra + 6.0, reg.y1 as f64 - ra - 6.0);
        discs.push(Disc {
            start: (rng.gen_range(lo..reach), rng.gen_range(ylo.min(yhi - 1.0)..yhi.max(ylo + 1.0))),
            velocity: (speed, vy),
            radius: ra,
            texture: Texture::Stripes { gain },
            phase: rng.gen_range(0.0..12.0),
            bounds: Some(reg),
            anomaly: Some(Deviation {
                from: cfg.anomaly_start,
                to: cfg.anomaly_start + cfg.anomaly_frames,
                ramp: cfg.anomaly_ramp,
                velocity: odd_velocity,
                texture: odd_texture,
            }),
        });
        discs.len() - 1
    });
    Scene { discs, gain, anomaly }
}

/// Frame `t`, its exact flow to `t + 1` and the anomaly footprint.
fn render(cfg: &SynthConfig, scene: &Scene, t: usize) -> (Tensor, Vec<f64>, Vec<f64>, Vec<bool>) {
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];
    let mut u = vec![cfg.drift.0; plane];
    let mut v = vec![cfg.drift.1; plane];
    let mut gt = vec![false; plane];
    let shift = (cfg.drift.0 * t as f64, cfg.drift.1 * t as f64);
    for y in 0..h {
        for x in 0..w {
            let c = background(x as f64 - shift.0, y as f64 - shift.1, scene.gain);
            for ch in 0..3 {
                img[ch * plane + y * w + x] = c[ch];
            }
        }
    }
    for (i, d) in scene.discs.iter().enumerate() {
        let (cx, cy) = d.centre(t, w);
        let (nx, ny) = d.centre(t + 1, w);
        let r = d.radius;
        let (ylo, yhi) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize + 1).min(h));
        let (xlo, xhi) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize + 1).min(w));
        if cx + r < 0.0 || ylo >= yhi || xlo >= xhi {
            continue;
        }
        for y in ylo..yhi {
            for x in xlo..xhi {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let c = disc_colour(d.texture(t), dx, dy, d.phase);
                let p = y * w + x;
                for ch in 0..3 {
                    img[ch * plane + p] = c[ch].clamp(0.0, 1.0);
                }
                u[p] = nx - cx;
                v[p] = ny - cy;
                gt[p] = scene.anomaly == Some(i) && d.anomalous(t);
            }
        }
    }
    for val in &mut img {
        *val = val.clamp(0.0, 1.0);
    }
    (Tensor::new(vec![3, h, w], img).expect("frame shape"), u, v, gt)
}

fn generate_video(cfg: &SynthConfig, split: u64, index: usize, anomaly: Option<AnomalyKind>) -> Video {
    let scene = build_scene(cfg, split, index, anomaly);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, split, index) ^ 0xF10_F10F);
    let noise = Normal::new(0.0, cfg.flow_noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut frames = Vec::with_capacity(cfg.video_len);
    let mut flows = Vec::with_capacity(cfg.video_len - 1);
    let mut masks = Vec::with_capacity(cfg.video_len);
    for t in 0..cfg.video_len {
        let (img, mut u, mut v, gt) = render(cfg, &scene, t);
        if t + 1 < cfg.video_len {
            if cfg.flow_noise > 0.0 {
                for x in u.iter_mut().chain(v.iter_mut()) {
                    *x += noise.sample(&mut noise_rng);
                }
            }
            flows.push(FlowField::new(cfg.height, cfg.width, u, v, t).expect("flow shape"));
        }
        frames.push(img);
        masks.push(gt);
    }
    let labels = masks.iter().map(|m| m.iter().any(|&g| g)).collect();
    let split_name = if split == 0 { "train" } else { "test" };
    Video {
        name: format!("{split_name}{index:03}"),
        frames,
        flows,
        labels,
        masks,
        anomaly,
        family: index % cfg.families,
    }
}

/// Generate one training (`test = false`) or test video.
pub fn generate_video_at(cfg: &SynthConfig, test: bool, index: usize) -> Video {
    if test {
        let kind = (!cfg.anomalies.is_empty()).then(|| cfg.anomalies[index % cfg.anomalies.len()]);
        generate_video(cfg, 1, index, kind)
    } else {
        generate_video(cfg, 0, index, None)
    }
}

/// Full dataset in memory. Deterministic under `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<VideoDataset> {
    cfg.validate(2)?;
    Ok(VideoDataset {
        train: par::map_range(cfg.train_videos, |i| generate_video_at(cfg, false, i)),
        test: par::map_range(cfg.test_videos, |i| generate_video_at(cfg, true, i)),
    })
}

/// Per-patch `mean(G − R)` statistics of normal patches versus patches lying
/// wholly inside a planted texture-swap disc, from a rendering pass over
/// the first test video with that anomaly. Returns `(mean, std, planted)`.
pub fn texture_swap_statistics(cfg: &SynthConfig) -> Result<(f64, f64, Vec<f64>)> {
    let idx = cfg
        .anomalies
        .iter()
        .position(|&k| k == AnomalyKind::TextureSwap)
        .filter(|&i| i < cfg.test_videos)
        .ok_or_else(|| contract_err!("no texture-swap video configured"))?;
    let scene = build_scene(cfg, 1, idx, Some(AnomalyKind::TextureSwap));
    let (h, w) = (cfg.height, cfg.width);
    let stat = |img: &Tensor, y0: usize, x0: usize| -> f64 {
        let d = img.data();
        let mut s = 0.0;
        for y in y0..y0 + 28 {
            for x in x0..x0 + 28 {
                s += d[h * w + y * w + x] - d[y * w + x];
            }
        }
        s / 784.0
    };
    let mut normal = Vec::new();
    let mut planted = Vec::new();
    for t in cfg.anomaly_start..cfg.anomaly_start + cfg.anomaly_frames {
        let (img, _, _, gt) = render(cfg, &scene, t);
        for y0 in (0..=h - 28).step_by(4) {
            for x0 in (0..=w - 28).step_by(4) {
                let inside = (y0..y0 + 28).all(|y| gt[y * w + x0..y * w + x0 + 28].iter().all(|&g| g));
                let touches = (y0..y0 + 28).any(|y| gt[y * w + x0..y * w + x0 + 28].iter().any(|&g| g));
                if inside {
                    planted.push(stat(&img, y0, x0));
                } else if !touches {
                    normal.push(stat(&img, y0, x0));
                }
            }
        }
    }
    let n = normal.len() as f64;
    let mean = normal.iter().sum::<f64>() / n;
    let std = (normal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mean, std, planted))
}

/// Write one video: `frames/`, `flows/`, and for test videos `labels.txt`
/// plus `masks/`.
pub fn write_video(dir: &Path, video: &Video, with_gt: bool) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let (fd, wd) = (dir.join("frames"), dir.join("flows"));
    mk(&fd)?;
    mk(&wd)?;
    for (t, f) in video.frames.iter().enumerate() {
        io::save(&fd.join(format!("{t:06}.gmf")), f, DType::U8)?;
    }
    for (t, f) in video.flows.iter().enumerate() {
        io::save(&wd.join(format!("{t:06}.gmf")), &f.to_tensor(), DType::F32)?;
    }
    if with_gt {
        let md = dir.join("masks");
        mk(&md)?;
        let h = video.frames[0].shape()[1];
        let w = video.frames[0].shape()[2];
        for (t, m) in video.masks.iter().enumerate() {
            write_mask(&md.join(format!("{t:06}.pgm")), h, w, m)?;
        }
        let labels: String = video.labels.iter().map(|&l| if l { "1\n" } else { "0\n" }).collect();
        let p = dir.join("labels.txt");
        fs::write(&p, labels).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn config_manifest(cfg: &SynthConfig) -> Manifest {
    let mut m = Manifest::new();
    let r = cfg.anomaly_region;
    let kinds: Vec<&str> = cfg.anomalies.iter().map(|k| k.name()).collect();
    m.set("synth.height", cfg.height)
        .set("synth.width", cfg.width)
        .set("synth.video_len", cfg.video_len)
        .set("synth.train_videos", cfg.train_videos)
        .set("synth.test_videos", cfg.test_videos)
        .set("synth.families", cfg.families)
        .set("synth.blobs", cfg.blobs)
        .set("synth.blob_radius", format!("{:?}", cfg.blob_radius))
        .set("synth.blob_speed", format!("{:?}", cfg.blob_speed))
        .set_floats("synth.drift", &[cfg.drift.0, cfg.drift.1])
        .set("synth.anomalies", kinds.join(","))
        .set("synth.anomaly_region", format!("{},{},{},{}", r.y0, r.x0, r.y1, r.x1))
        .set("synth.anomaly_radius", format!("{:?}", cfg.anomaly_radius))
        .set("synth.speed_factor", format!("{:?}", cfg.speed_factor))
        .set("synth.anomaly_start", cfg.anomaly_start)
        .set("synth.anomaly_frames", cfg.anomaly_frames)
        .set("synth.anomaly_ramp", cfg.anomaly_ramp)
        .set("synth.flow_noise", format!("{:?}", cfg.flow_noise))
        .set("synth.seed", cfg.seed);
    m
}

/// Read overrides from the `synth.` keys of `m` on top of `base`.
pub fn config_from_manifest(m: &Manifest, base: &SynthConfig) -> Result<SynthConfig> {
    let mut c = base.clone();
    let s = m.section("synth");
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = s.parse(stringify!($field))? {
                c.$field = v;
            }
        };
    }
    take!(height);
    take!(width);
    take!(video_len);
    take!(train_videos);
    take!(test_videos);
    take!(families);
    take!(blobs);
    take!(blob_radius);
    take!(blob_speed);
    take!(anomaly_radius);
    take!(speed_factor);
    take!(anomaly_start);
    take!(anomaly_frames);
    take!(anomaly_ramp);
    take!(flow_noise);
    take!(seed);
    if let Some(d) = s.floats("drift")? {
        if d.len() != 2 {
            return Err(Error::Data("synth.drift needs two numbers".into()));
        }
        c.drift = (d[0], d[1]);
    }
    if let Some(a) = s.get("anomalies") {
        c.anomalies = a
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty() && *t != "none")
            .map(|t| AnomalyKind::parse(t).ok_or_else(|| Error::Data(format!("unknown anomaly kind `{t}`"))))
            .collect::<Result<_>>()?;
    }
    if let Some(r) = s.get("anomaly_region") {
        let v: Vec<usize> = r
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::Data(format!("bad anomaly_region `{r}`"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Data("anomaly_region needs y0,x0,y1,x1".into()));
        }
        c.anomaly_region = Rect {
            y0: v[0],
            x0: v[1],
            y1: v[2],
            x1: v[3],
        };
    }
    Ok(c)
}

/// Write the whole dataset under `root/{train,test}/<video>/`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<()> {
    cfg.validate(2)?;
    for (test, n) in [(false, cfg.train_videos), (true, cfg.test_videos)] {
        let split = root.join(if test { "test" } else { "train" });
        let results = par::map_range(n, |i| {
            let v = generate_video_at(cfg, test, i);
            write_video(&split.join(&v.name), &v, test)
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
    }
    let p = root.join("synth.txt");
    fs::write(&p, config_manifest(cfg).render()).map_err(|e| Error::io(&p, e))
}
