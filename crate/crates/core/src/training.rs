//! Patch-based self-supervised training.
//!
//! Training sees noisy frames only: every video enters through
//! [`NoisyVideo`], whose only constructor wraps an observed sequence, and
//! synthetic experiments draw fresh noise through a [`NoisySource`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::TrainedModel;
use crate::data_metrics::{NoiseResampler, VideoTensor};
use crate::denoise::predict_window;
use crate::error::{Result, UdvdError};
use crate::loss_fusion::{gaussian_nll_grad, NoiseKind, NoiseModel, PixelPosterior, SIGMA_REGULARIZER_SLOPE};
use crate::network::{BlindSpotNetwork, OutputLayout};
use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Augmentation {
    Flip,
    TimeReverse,
    TemporalSubsample,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [
        Augmentation::Flip,
        Augmentation::TimeReverse,
        Augmentation::TemporalSubsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Augmentation::Flip => "flip",
            Augmentation::TimeReverse => "time_reverse",
            Augmentation::TemporalSubsample => "temporal_subsample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "flip" => Some(Augmentation::Flip),
            "time_reverse" | "reverse" => Some(Augmentation::TimeReverse),
            "temporal_subsample" | "subsample" => Some(Augmentation::TemporalSubsample),
            _ => None,
        }
    }

    /// Parse a comma-separated list; an empty string or `none` is the empty set.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Vec::new());
        }
        let set: BTreeSet<_> = s
            .split(',')
            .map(|item| {
                Self::parse(item).ok_or_else(|| {
                    UdvdError::config("augment", format!("unknown augmentation `{}`", item.trim()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(set.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_checkpoints: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentations: Vec<Augmentation>,
    pub noise: NoiseModel,
    /// Optimizer steps per epoch; `None` covers every window origin once
    /// at stride `patch_size`.
    pub steps_per_epoch: Option<usize>,
    /// Frames held out at the end of each video for early stopping (0 = off).
    pub early_stop_frames: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            epochs: 40,
            lr0: 1e-4,
            lr_checkpoints: vec![20, 25, 30],
            lr_factor: 2.0,
            batch_size: 4,
            seed: 0,
            augmentations: Vec::new(),
            noise: NoiseModel {
                kind: NoiseKind::GaussianKnownSigma,
                sigma: Some(30.0),
            },
            steps_per_epoch: None,
            early_stop_frames: 0,
            patience: 5,
        }
    }
}

const KV_FIELDS: [&str; 13] = [
    "patch_size",
    "epochs",
    "lr0",
    "lr_checkpoints",
    "lr_factor",
    "batch_size",
    "seed",
    "augment",
    "noise",
    "sigma",
    "steps_per_epoch",
    "early_stop_frames",
    "patience",
];

fn parse_field<T: std::str::FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| UdvdError::config(field, format!("cannot parse `{value}`")))
}

impl TrainConfig {
    /// Smaller patches for CPU runs; everything else as [`Default`].
    pub fn desk() -> Self {
        Self {
            patch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 4 != 0 {
            return Err(UdvdError::config(
                "patch_size",
                format!("must be a multiple of 4 and at least 8, got {}", self.patch_size),
            ));
        }
        if self.epochs == 0 {
            return Err(UdvdError::config("epochs", "must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(UdvdError::config("lr0", "must be positive and finite"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(UdvdError::config("lr_factor", "must be positive and finite"));
        }
        if self.lr_checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(UdvdError::config("lr_checkpoints", "must be strictly increasing"));
        }
        if self.lr_checkpoints.last().is_some_and(|&c| c >= self.epochs) {
            return Err(UdvdError::config("lr_checkpoints", "must all be below `epochs`"));
        }
        if self.batch_size == 0 {
            return Err(UdvdError::config("batch_size", "must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(UdvdError::config("steps_per_epoch", "must be positive"));
        }
        self.noise.validate()
    }

    /// Temporal strides a window may be sampled at.
    pub fn strides(&self) -> &'static [usize] {
        if self.augmentations.contains(&Augmentation::TemporalSubsample) {
            &[1, 2, 3]
        } else {
            &[1]
        }
    }

    /// Flat `key = value` text, one field per line, readable by [`TrainConfig::from_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let augs = if self.augmentations.is_empty() {
            "none".to_string()
        } else {
            self.augmentations.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr0 = {:e}", self.lr0);
        let _ = writeln!(s, "lr_checkpoints = {}", list(&self.lr_checkpoints));
        let _ = writeln!(s, "lr_factor = {}", self.lr_factor);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "augment = {augs}");
        let _ = writeln!(s, "noise = {}", self.noise.kind.name());
        if let Some(sigma) = self.noise.sigma {
            let _ = writeln!(s, "sigma = {sigma}");
        }
        match self.steps_per_epoch {
            Some(n) => {
                let _ = writeln!(s, "steps_per_epoch = {n}");
            }
            None => s.push_str("steps_per_epoch = auto\n"),
        }
        let _ = writeln!(s, "early_stop_frames = {}", self.early_stop_frames);
        let _ = writeln!(s, "patience = {}", self.patience);
        s
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut kind = cfg.noise.kind;
        let mut sigma = cfg.noise.sigma;
        let mut sigma_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UdvdError::config(format!("line {}", lineno + 1), "expected `key = value`")
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "patch_size" => cfg.patch_size = parse_field(key, value)?,
                "epochs" => cfg.epochs = parse_field(key, value)?,
                "lr0" => cfg.lr0 = parse_field(key, value)?,
                "lr_checkpoints" => {
                    cfg.lr_checkpoints = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| parse_field(key, v.trim()))
                            .collect::<Result<_>>()?
                    }
                }
                "lr_factor" => cfg.lr_factor = parse_field(key, value)?,
                "batch_size" => cfg.batch_size = parse_field(key, value)?,
                "seed" => cfg.seed = parse_field(key, value)?,
                "augment" => cfg.augmentations = Augmentation::parse_list(value)?,
                "noise" => {
                    kind = NoiseKind::parse(value).ok_or_else(|| {
                        UdvdError::config(key, format!("expected known, estimate or unknown, got `{value}`"))
                    })?
                }
                "sigma" => {
                    sigma = Some(parse_field(key, value)?);
                    sigma_given = true;
                }
                "steps_per_epoch" => {
                    cfg.steps_per_epoch = match value {
                        "auto" => None,
                        v => Some(parse_field(key, v)?),
                    }
                }
                "early_stop_frames" => cfg.early_stop_frames = parse_field(key, value)?,
                "patience" => cfg.patience = parse_field(key, value)?,
                other => {
                    return Err(UdvdError::config(
                        other,
                        format!("unknown field; expected one of {}", KV_FIELDS.join(", ")),
                    ))
                }
            }
        }
        if kind != NoiseKind::GaussianKnownSigma && !sigma_given {
            sigma = None;
        }
        cfg.noise = NoiseModel { kind, sigma };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Piecewise-constant schedule: `lr0` divided by `lr_factor` at each checkpoint passed.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(UdvdError::invalid(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let passed = cfg.lr_checkpoints.iter().filter(|&&c| c <= epoch).count();
    let mut lr = cfg.lr0;
    for _ in 0..passed {
        lr /= cfg.lr_factor;
    }
    Ok(lr)
}

/// An observed (noisy) video. There is no way to attach a clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyVideo(VideoTensor);

impl NoisyVideo {
    pub fn new(observed: VideoTensor) -> Self {
        Self(observed)
    }

    pub fn video(&self) -> &VideoTensor {
        &self.0
    }

    pub fn into_inner(self) -> VideoTensor {
        self.0
    }
}

/// Supplies the noisy training videos for each epoch.
pub trait NoisySource {
    fn next_epoch(&mut self) -> Result<Vec<NoisyVideo>>;
}

/// A fixed set of noise realisations, reused every epoch.
impl NoisySource for Vec<NoisyVideo> {
    fn next_epoch(&mut self) -> Result<Vec<NoisyVideo>> {
        Ok(self.clone())
    }
}

/// Fresh noise over the same content every epoch.
impl NoisySource for Vec<NoiseResampler> {
    fn next_epoch(&mut self) -> Result<Vec<NoisyVideo>> {
        Ok(self.iter_mut().map(|r| NoisyVideo::new(r.draw())).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    FlipHorizontal,
    FlipVertical,
    TimeReverse,
    Stride(usize),
}

/// Where a sample was cut from, before any transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOrigin {
    pub video: usize,
    pub center: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub window: Vec<PlaneTensor<f32>>,
    /// Index into `window` of the frame being denoised.
    pub target_pixel_frame: usize,
    pub provenance: Vec<Transform>,
    pub origin: SampleOrigin,
}

/// Frame indices of a `k`-frame window at `stride` centred on `center`, if it fits.
pub fn window_indices(len: usize, center: usize, k: usize, stride: usize) -> Option<Vec<usize>> {
    let half = k / 2 * stride;
    (center >= half && center + half < len).then(|| (0..k).map(|i| center - half + i * stride).collect())
}

fn apply_flips(frame: &PlaneTensor<f32>, transforms: &[Transform]) -> PlaneTensor<f32> {
    let mut f = frame.clone();
    for t in transforms {
        f = match t {
            Transform::FlipHorizontal => f.flip_horizontal(),
            Transform::FlipVertical => f.flip_vertical(),
            _ => f,
        };
    }
    f
}

/// Draw one training window: random stride, centre and patch origin, then
/// the configured transforms, each applied with probability ½.
pub fn augment(
    videos: &[NoisyVideo],
    k: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedSample> {
    let vi = rng.gen_range(0..videos.len());
    let video = videos[vi].video();
    let p = cfg.patch_size;
    if video.height() < p || video.width() < p {
        return Err(UdvdError::config(
            "patch_size",
            format!("{p} exceeds the {}x{} frames", video.height(), video.width()),
        ));
    }
    let feasible: Vec<usize> = cfg
        .strides()
        .iter()
        .copied()
        .filter(|&s| (k - 1) * s < video.len())
        .collect();
    let &stride = feasible.choose(rng).ok_or_else(|| {
        UdvdError::invalid(format!("video of {} frames is shorter than the {k}-frame window", video.len()))
    })?;
    let half = k / 2 * stride;
    let center = rng.gen_range(half..video.len() - half);
    let top = rng.gen_range(0..=video.height() - p);
    let left = rng.gen_range(0..=video.width() - p);

    let mut provenance = Vec::new();
    if stride > 1 {
        provenance.push(Transform::Stride(stride));
    }
    let mut indices = window_indices(video.len(), center, k, stride).expect("feasible stride");
    if cfg.augmentations.contains(&Augmentation::TimeReverse) && rng.gen_bool(0.5) {
        indices.reverse();
        provenance.push(Transform::TimeReverse);
    }
    if cfg.augmentations.contains(&Augmentation::Flip) {
        if rng.gen_bool(0.5) {
            provenance.push(Transform::FlipHorizontal);
        }
        if rng.gen_bool(0.5) {
            provenance.push(Transform::FlipVertical);
        }
    }
    let window = indices
        .iter()
        .map(|&t| Ok(apply_flips(&video.frame(t).crop(top, left, p, p)?, &provenance)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentedSample {
        window,
        target_pixel_frame: k / 2,
        provenance,
        origin: SampleOrigin {
            video: vi,
            center,
            top,
            left,
        },
    })
}

/// Adam with bias correction; moments persist across schedule changes.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(shapes: &[Vec<f32>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|g| vec![0.0; g.len()]).collect(),
            v: shapes.iter().map(|g| vec![0.0; g.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut BlindSpotNetwork<f32>, grads: &[Vec<f32>], lr: f64) {
        self.step_params(net.params.kernels_mut().map(|k| k.data.as_mut_slice()), grads, lr);
    }

    fn step_params<'a>(&mut self, params: impl Iterator<Item = &'a mut [f32]>, grads: &[Vec<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let alpha = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= alpha * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Per-pixel loss summed over a patch, with the gradient w.r.t. the raw
/// network output and the summed derivative w.r.t. `σ`.
pub(crate) struct PatchLoss {
    pub sum: f64,
    pub grad: PlaneTensor<f32>,
    pub d_sigma: f64,
}

pub(crate) fn patch_loss(
    out: &PlaneTensor<f32>,
    y: &PlaneTensor<f32>,
    layout: OutputLayout,
    sigma: Option<f64>,
) -> Result<PatchLoss> {
    let (c, h, w) = y.shape();
    let n = h * w;
    let mut grad = PlaneTensor::zeros(out.channels(), h, w);
    let (o, yv) = (out.data(), y.data());
    let mut sum = 0.0;
    let mut d_sigma = 0.0;
    match (layout, sigma) {
        (OutputLayout::MeanOnly, _) => {
            let g = grad.data_mut();
            for i in 0..c * n {
                let r = o[i] as f64 - yv[i] as f64;
                sum += r * r / c as f64;
                g[i] = (2.0 * r / c as f64) as f32;
            }
        }
        (OutputLayout::Posterior, Some(s)) if c == 1 => {
            let g = grad.data_mut();
            let s2 = s * s;
            for i in 0..n {
                let (mu, a) = (o[i] as f64, o[n + i] as f64);
                let r = yv[i] as f64 - mu;
                let var = a * a + s2;
                sum += 0.5 * r * r / var + 0.5 * var.ln();
                let ds = 0.5 * (1.0 / var - r * r / (var * var));
                g[i] = (-r / var) as f32;
                g[n + i] = (2.0 * a * ds) as f32;
                d_sigma += 2.0 * s * ds;
            }
        }
        (OutputLayout::Posterior, Some(s)) => {
            let nraw = out.channels() - c;
            let mut mu = vec![0.0; c];
            let mut raw = vec![0.0; nraw];
            let mut yp = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    mu[ch] = o[ch * n + i] as f64;
                    yp[ch] = yv[ch * n + i] as f64;
                }
                for k in 0..nraw {
                    raw[k] = o[(c + k) * n + i] as f64;
                }
                let post = PixelPosterior::new(mu.clone(), raw.clone(), s)?;
                let gr = gaussian_nll_grad(&yp, &post)?;
                sum += gr.loss;
                d_sigma += gr.d_sigma;
                let g = grad.data_mut();
                for ch in 0..c {
                    g[ch * n + i] = gr.d_mu[ch] as f32;
                }
                for k in 0..nraw {
                    g[(c + k) * n + i] = gr.d_raw_cov[k] as f32;
                }
            }
        }
        (layout, _) => {
            return Err(UdvdError::invalid(format!(
                "no training loss for output layout {layout:?} with this noise model"
            )))
        }
    }
    Ok(PatchLoss { sum, grad, d_sigma })
}

const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// One record per optimizer step.
    pub trace: Vec<LossRecord>,
    pub epoch_losses: Vec<f64>,
    /// Held-out self-prediction MSE per epoch, when early stopping is on.
    pub validation: Vec<f64>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| UdvdError::io(path, e))?);
    let mut body = String::from("epoch,step,loss,lr\n");
    for r in trace {
        let _ = writeln!(body, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr);
    }
    f.write_all(body.as_bytes()).map_err(|e| UdvdError::io(path, e))
}

fn split_holdout(videos: Vec<NoisyVideo>, holdout: usize, k: usize) -> Result<(Vec<NoisyVideo>, Vec<VideoTensor>)> {
    if holdout == 0 {
        return Ok((videos, Vec::new()));
    }
    let mut train = Vec::with_capacity(videos.len());
    let mut val = Vec::with_capacity(videos.len());
    for v in videos {
        let v = v.into_inner();
        if v.len() < holdout + k {
            return Err(UdvdError::config(
                "early_stop_frames",
                format!("{holdout} held-out frames leave fewer than {k} of {} for training", v.len()),
            ));
        }
        let cut = v.len() - holdout;
        train.push(NoisyVideo::new(v.slice(0, cut)?));
        val.push(v.slice(cut, v.len())?);
    }
    Ok((train, val))
}

/// Mean squared difference between the blind-spot mean and the noisy frame.
fn validation_mse(net: &BlindSpotNetwork<f32>, videos: &[VideoTensor]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in videos {
        for t in 0..v.len() {
            let field = predict_window(net, &v.window(t, net.frame_count()))?;
            for (a, b) in field.mu.data().iter().zip(v.frame(t).data()) {
                let d = *a as f64 - *b as f64;
                sum += d * d;
            }
            count += field.mu.data().len();
        }
    }
    Ok(sum / count as f64)
}

fn auto_steps(videos: &[NoisyVideo], k: usize, cfg: &TrainConfig) -> usize {
    let p = cfg.patch_size;
    let origins: usize = videos
        .iter()
        .map(|v| {
            let v = v.video();
            (v.len() + 1).saturating_sub(k) * (v.height() / p) * (v.width() / p)
        })
        .sum();
    origins.div_ceil(cfg.batch_size).max(1)
}

/// Train `net` on the videos produced by `source`.
///
/// Known σ minimises the Gaussian negative log-likelihood; estimated σ adds
/// a noise-level network of the same architecture and the `−0.1σ`
/// regulariser; unknown noise minimises the squared error of the mean.
pub fn fit(source: &mut dyn NoisySource, mut net: BlindSpotNetwork<f32>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let expected = match cfg.noise.kind {
        NoiseKind::Unknown => OutputLayout::MeanOnly,
        _ => OutputLayout::Posterior,
    };
    if net.config.output != expected {
        return Err(UdvdError::config(
            "noise",
            format!(
                "{} noise needs a {expected:?} network, got {:?}",
                cfg.noise.kind.name(),
                net.config.output
            ),
        ));
    }
    let k = net.frame_count();
    let mut sigma_net = if cfg.noise.kind == NoiseKind::GaussianUnknownSigma {
        let sc = net
            .config
            .clone()
            .with_output(OutputLayout::NoiseLevel)
            .with_seed(net.config.seed.wrapping_add(1));
        Some(BlindSpotNetwork::<f32>::new(sc)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = net.params.zero_grads();
    let mut adam = Adam::new(&grads);
    let mut sigma_grads = sigma_net.as_ref().map(|s| s.params.zero_grads());
    let mut sigma_adam = sigma_grads.as_ref().map(|g| Adam::new(g));

    let mut trace = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, BlindSpotNetwork<f32>, Option<BlindSpotNetwork<f32>>)> = None;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        let (train, val) = split_holdout(source.next_epoch()?, cfg.early_stop_frames, k)?;
        if train.is_empty() {
            return Err(UdvdError::invalid("no training videos"));
        }
        for v in &train {
            if v.video().channels() != net.config.color.channels() {
                return Err(UdvdError::shape(format!(
                    "network expects {}-channel frames, video has {}",
                    net.config.color.channels(),
                    v.video().channels()
                )));
            }
        }
        let steps = cfg.steps_per_epoch.unwrap_or_else(|| auto_steps(&train, k, cfg));
        let mut epoch_sum = 0.0;
        for _ in 0..steps {
            for g in grads.iter_mut() {
                g.fill(0.0);
            }
            if let Some(sg) = sigma_grads.as_mut() {
                for g in sg.iter_mut() {
                    g.fill(0.0);
                }
            }
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let sample = augment(&train, k, cfg, &mut rng)?;
                let y = &sample.window[sample.target_pixel_frame];
                let npix = (y.height() * y.width()) as f64;
                let scale = 1.0 / (npix * cfg.batch_size as f64);

                let sigma_pass = match &sigma_net {
                    Some(sn) => {
                        let mut tape = Tape::new(&sn.params, true);
                        let leaves: Vec<_> = sample.window.iter().map(|f| tape.leaf(f.clone(), false)).collect();
                        let out = sn.forward_graph(&mut tape, &leaves)?;
                        let mean = tape.value(out).sum() / npix;
                        Some((tape, out, mean))
                    }
                    None => None,
                };
                let sigma = match (&sigma_pass, cfg.noise.sigma) {
                    (Some((_, _, mean)), _) => Some(mean.abs().max(SIGMA_FLOOR)),
                    (None, s) => s,
                };

                let mut tape = Tape::new(&net.params, true);
                let leaves: Vec<_> = sample.window.iter().map(|f| tape.leaf(f.clone(), false)).collect();
                let out = net.forward_graph(&mut tape, &leaves)?;
                let pl = patch_loss(tape.value(out), y, net.config.output, sigma)?;
                let mut loss = pl.sum / npix;
                if sigma_pass.is_some() {
                    loss += SIGMA_REGULARIZER_SLOPE * sigma.unwrap_or(0.0);
                }
                if !loss.is_finite() {
                    return Err(UdvdError::Diverged {
                        epoch,
                        step: global_step,
                        loss,
                    });
                }
                batch_loss += loss / cfg.batch_size as f64;
                let seed = pl.grad.scale(scale as f32);
                tape.backward(&[(out, &seed)], Some(&mut grads));

                if let (Some((stape, sout, mean)), Some(sg)) = (sigma_pass, sigma_grads.as_mut()) {
                    if mean.abs() > SIGMA_FLOOR {
                        let d_sigma = pl.d_sigma / npix + SIGMA_REGULARIZER_SLOPE;
                        let g = d_sigma * mean.signum() / npix / cfg.batch_size as f64;
                        let seed = PlaneTensor::filled(1, y.height(), y.width(), g as f32);
                        stape.backward(&[(sout, &seed)], Some(sg));
                    }
                }
            }
            adam.step(&mut net, &grads, lr);
            if let (Some(sn), Some(sa), Some(sg)) = (sigma_net.as_mut(), sigma_adam.as_mut(), sigma_grads.as_ref()) {
                sa.step(sn, sg, lr);
            }
            trace.push(LossRecord {
                epoch,
                step: global_step,
                loss: batch_loss,
                lr,
            });
            epoch_sum += batch_loss;
            global_step += 1;
        }
        let mean = epoch_sum / steps as f64;
        epoch_losses.push(mean);
        log::info!("epoch {epoch}: mean loss {mean:.5}, lr {lr:e}");

        if !val.is_empty() {
            let mse = validation_mse(&net, &val)?;
            validation.push(mse);
            log::info!("epoch {epoch}: held-out mse {mse:.4}");
            let improved = best.as_ref().map_or(true, |(b, ..)| mse < *b);
            if improved {
                best = Some((mse, epoch, net.clone(), sigma_net.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience.max(1) {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, n, s)) => {
            net = n;
            sigma_net = s;
            e
        }
        None => epoch_losses.len() - 1,
    };
    let model = TrainedModel {
        net,
        sigma_net,
        noise: cfg.noise,
        train_config: cfg.to_kv_text(),
        metadata: String::new(),
    };
    Ok(TrainOutcome {
        model,
        trace,
        epoch_losses,
        validation,
        best_epoch,
        stopped_early,
    })
}
