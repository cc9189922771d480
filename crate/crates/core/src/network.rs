//! The four-branch rotated blind-spot network.
//!
//! Each branch stacks the frame window into D1 passes over consecutive frame
//! triples (one set of D1 weights for all triples), fuses them with D2, and
//! ends with a one-row causal offset. The four branches see the window
//! rotated by 0°, 90°, 180° and 270° and share all their weights. Their
//! derotated outputs are concatenated and mixed by three 1×1 convolutions.
//!
//! There are no additive terms anywhere, so the whole map is positively
//! homogeneous of degree one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eager, GraphBuilder, ParamId, ParamStore};
use crate::blindspot_ops::{inverse_turns, ConvKernel};
use crate::error::{Result, UdvdError};
use crate::scalar::Scalar;
use crate::tensor::PlaneTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    Rgb,
    Grayscale,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Rgb => 3,
            ColorMode::Grayscale => 1,
        }
    }

    pub fn from_channels(channels: usize) -> Result<Self> {
        match channels {
            3 => Ok(ColorMode::Rgb),
            1 => Ok(ColorMode::Grayscale),
            c => Err(UdvdError::invalid(format!("unsupported channel count {c}"))),
        }
    }
}

/// What the reconstruction head emits per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLayout {
    /// Mean plus the upper-triangular covariance factor (`C + C(C+1)/2`).
    Posterior,
    /// Mean only (`C`), for noise of unknown form.
    MeanOnly,
    /// One channel, the per-pixel noise-level estimate.
    NoiseLevel,
}

impl OutputLayout {
    pub fn channels(self, color: ColorMode) -> usize {
        let c = color.channels();
        match self {
            OutputLayout::Posterior => c + c * (c + 1) / 2,
            OutputLayout::MeanOnly => c,
            OutputLayout::NoiseLevel => 1,
        }
    }
}

/// Channel counts of one UNet block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder width (48 in the reference layer table).
    pub enc_width: usize,
    /// Bottleneck and decoder width (96 in the reference layer table).
    pub dec_width: usize,
}

impl UNetConfig {
    /// `(name, in, out)` for the seventeen 3×3 convolutions, in order.
    pub fn layer_table(&self) -> Vec<(&'static str, usize, usize)> {
        let (k1, k2, e, d) = (
            self.in_channels,
            self.out_channels,
            self.enc_width,
            self.dec_width,
        );
        vec![
            ("enc_conv_0", k1, e),
            ("enc_conv_1", e, e),
            ("enc_conv_2", e, e),
            ("enc_conv_3", e, e),
            ("enc_conv_4", e, e),
            ("enc_conv_5", e, e),
            ("enc_conv_6", e, d),
            ("enc_conv_7", d, d),
            ("enc_conv_8", d, e),
            // concat_1: upsampled enc_conv_8 with pool_1
            ("dec_conv_0", 2 * e, d),
            ("dec_conv_1", d, d),
            ("dec_conv_2", d, d),
            ("dec_conv_3", d, d),
            // concat_2: upsampled dec_conv_3 with the block input
            ("dec_conv_4", d + k1, d),
            ("dec_conv_5", d, d),
            ("dec_conv_6", d, d),
            ("dec_conv_7", d, k2),
        ]
    }
}

fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvKernel<T> {
    let bound = (6.0 / (inp * k * k) as f64).sqrt();
    let data = (0..out * inp * k * k)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    ConvKernel::new(out, inp, k, k, data).expect("kernel shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNet {
    pub config: UNetConfig,
    convs: Vec<ParamId>,
}

impl UNet {
    fn register<T: Scalar>(
        params: &mut ParamStore<T>,
        prefix: &str,
        config: UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let convs = config
            .layer_table()
            .into_iter()
            .map(|(name, i, o)| params.add(format!("{prefix}.{name}"), he_uniform(rng, o, i, 3)))
            .collect();
        Self { config, convs }
    }

    /// Wire the block into a graph. Spatial dims must be multiples of 4.
    pub fn forward<T: Scalar, B: GraphBuilder<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let (c, h, w) = b.shape(x);
        if c != self.config.in_channels {
            return Err(UdvdError::shape(format!(
                "UNet expects {} channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(UdvdError::shape(format!(
                "UNet input {h}x{w} is not divisible by 4 (two pooling stages)"
            )));
        }
        let cv = &self.convs;
        let conv_relu = |b: &mut B, x: &B::Var, i: usize| -> Result<B::Var> {
            let y = b.conv(x, cv[i])?;
            Ok(b.relu(&y))
        };
        let mut e = conv_relu(b, x, 0)?;
        e = conv_relu(b, &e, 1)?;
        e = conv_relu(b, &e, 2)?;
        let pool_1 = b.pool(&e)?;
        e = conv_relu(b, &pool_1, 3)?;
        e = conv_relu(b, &e, 4)?;
        e = conv_relu(b, &e, 5)?;
        let pool_2 = b.pool(&e)?;
        e = conv_relu(b, &pool_2, 6)?;
        e = conv_relu(b, &e, 7)?;
        e = conv_relu(b, &e, 8)?;
        let up = b.upsample(&e);
        let mut d = b.concat(&[up, pool_1])?;
        for i in 9..13 {
            d = conv_relu(b, &d, i)?;
        }
        let up = b.upsample(&d);
        d = b.concat(&[up, x.clone()])?;
        for i in 13..16 {
            d = conv_relu(b, &d, i)?;
        }
        b.conv(&d, cv[16])
    }
}

/// Structural configuration of a [`BlindSpotNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Frames per input window: 1, 3 or 5.
    pub frame_count: usize,
    pub color: ColorMode,
    pub output: OutputLayout,
    pub enc_width: usize,
    pub dec_width: usize,
    /// Output channels of each D1 pass (32 in the reference design).
    pub d1_out: usize,
    /// Output channels of D2, i.e. of each branch (96).
    pub d2_out: usize,
    /// Width of the two hidden 1×1 layers in the head (96).
    pub head_width: usize,
    pub fusion_enabled: bool,
    /// Seed for weight initialisation.
    pub seed: u64,
}

impl NetworkConfig {
    /// Reference channel counts.
    pub fn full(frame_count: usize, color: ColorMode) -> Self {
        Self {
            frame_count,
            color,
            output: OutputLayout::Posterior,
            enc_width: 48,
            dec_width: 96,
            d1_out: 32,
            d2_out: 96,
            head_width: 96,
            fusion_enabled: true,
            seed: 0,
        }
    }

    /// Narrow variant for single-core CPU experiments; same topology.
    pub fn desk(frame_count: usize, color: ColorMode) -> Self {
        Self {
            enc_width: 8,
            dec_width: 16,
            d1_out: 8,
            d2_out: 16,
            head_width: 16,
            ..Self::full(frame_count, color)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_output(mut self, output: OutputLayout) -> Self {
        self.output = output;
        self
    }

    pub fn output_channels(&self) -> usize {
        self.output.channels(self.color)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 5].contains(&self.frame_count) {
            return Err(UdvdError::config(
                "frame_count",
                format!("must be 1, 3 or 5, got {}", self.frame_count),
            ));
        }
        for (name, v) in [
            ("enc_width", self.enc_width),
            ("dec_width", self.dec_width),
            ("d1_out", self.d1_out),
            ("d2_out", self.d2_out),
            ("head_width", self.head_width),
        ] {
            if v == 0 {
                return Err(UdvdError::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// UNet configs of the branch: `(d1, Some(d2))`, or a single UNet for k = 1.
    pub fn unet_configs(&self) -> (UNetConfig, Option<UNetConfig>) {
        let c = self.color.channels();
        let unet = |in_channels, out_channels| UNetConfig {
            in_channels,
            out_channels,
            enc_width: self.enc_width,
            dec_width: self.dec_width,
        };
        match self.frame_count {
            1 => (unet(c, self.d2_out), None),
            3 => (unet(3 * c, self.d1_out), Some(unet(self.d1_out, self.d2_out))),
            _ => (
                unet(3 * c, self.d1_out),
                Some(unet(3 * self.d1_out, self.d2_out)),
            ),
        }
    }
}

/// Per-pixel network output split into its mean and covariance parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField<T> {
    /// `C × H × W` blind-spot mean estimate.
    pub mu: PlaneTensor<T>,
    /// `C(C+1)/2 × H × W` upper-triangular covariance factor entries.
    pub raw_cov: Option<PlaneTensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlindSpotNetwork<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    d1: UNet,
    d2: Option<UNet>,
    head: [ParamId; 3],
}

impl<T: Scalar> BlindSpotNetwork<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let (d1_cfg, d2_cfg) = config.unet_configs();
        let d1 = UNet::register(&mut params, "d1", d1_cfg, &mut rng);
        let d2 = d2_cfg.map(|cfg| UNet::register(&mut params, "d2", cfg, &mut rng));
        let hw = config.head_width;
        let head = [
            params.add("head.0", he_uniform(&mut rng, hw, 4 * config.d2_out, 1)),
            params.add("head.1", he_uniform(&mut rng, hw, hw, 1)),
            params.add(
                "head.2",
                he_uniform(&mut rng, config.output_channels(), hw, 1),
            ),
        ];
        Ok(Self {
            config,
            params,
            d1,
            d2,
            head,
        })
    }

    pub fn d1(&self) -> &UNet {
        &self.d1
    }

    pub fn d2(&self) -> Option<&UNet> {
        self.d2.as_ref()
    }

    pub fn head(&self) -> [ParamId; 3] {
        self.head
    }

    pub fn frame_count(&self) -> usize {
        self.config.frame_count
    }

    pub fn cast<U: Scalar>(&self) -> BlindSpotNetwork<U> {
        BlindSpotNetwork {
            config: self.config.clone(),
            params: self.params.cast(),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
            head: self.head,
        }
    }

    /// Check a window of frames before it enters the graph.
    pub fn validate_window(&self, shapes: &[(usize, usize, usize)]) -> Result<(usize, usize)> {
        if shapes.len() != self.config.frame_count {
            return Err(UdvdError::shape(format!(
                "network expects {} frames, got {}",
                self.config.frame_count,
                shapes.len()
            )));
        }
        let (c, h, w) = shapes[0];
        if shapes.iter().any(|s| *s != (c, h, w)) {
            return Err(UdvdError::shape("frames in a window differ in shape"));
        }
        if c != self.config.color.channels() {
            return Err(UdvdError::shape(format!(
                "network expects {} channels per frame, got {c}",
                self.config.color.channels()
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(UdvdError::shape(format!(
                "spatial dims {h}x{w} must be positive multiples of 4"
            )));
        }
        Ok((h, w))
    }

    /// One branch on frames already rotated into its orientation.
    pub fn branch_forward<B: GraphBuilder<T>>(&self, b: &mut B, frames: &[B::Var]) -> Result<B::Var> {
        if frames.len() != self.config.frame_count {
            return Err(UdvdError::shape(format!(
                "branch expects {} frames, got {}",
                self.config.frame_count,
                frames.len()
            )));
        }
        let fused = match (self.config.frame_count, &self.d2) {
            (1, _) => self.d1.forward(b, &frames[0])?,
            (3, Some(d2)) => {
                let stack = b.concat(frames)?;
                let d1 = self.d1.forward(b, &stack)?;
                d2.forward(b, &d1)?
            }
            (_, Some(d2)) => {
                let mut triples = Vec::with_capacity(3);
                for t in 0..3 {
                    let stack = b.concat(&frames[t..t + 3])?;
                    triples.push(self.d1.forward(b, &stack)?);
                }
                let stack = b.concat(&triples)?;
                d2.forward(b, &stack)?
            }
            _ => unreachable!("validated frame_count"),
        };
        Ok(b.causal_offset(&fused))
    }

    /// Full network on a frame window; returns the raw head output
    /// (`output_channels × H × W`).
    pub fn forward_graph<B: GraphBuilder<T>>(&self, b: &mut B, frames: &[B::Var]) -> Result<B::Var> {
        let shapes: Vec<_> = frames.iter().map(|f| b.shape(f)).collect();
        self.validate_window(&shapes)?;
        let mut derotated = Vec::with_capacity(4);
        for q in 0..4 {
            let rotated: Vec<B::Var> = frames.iter().map(|f| b.rotate(f, q)).collect();
            let out = self.branch_forward(b, &rotated)?;
            derotated.push(b.rotate(&out, inverse_turns(q)));
        }
        let mut h = b.concat(&derotated)?;
        h = b.conv(&h, self.head[0])?;
        h = b.relu(&h);
        h = b.conv(&h, self.head[1])?;
        h = b.relu(&h);
        b.conv(&h, self.head[2])
    }

    /// Eager evaluation of the raw head output.
    pub fn forward(&self, frames: &[PlaneTensor<T>]) -> Result<PlaneTensor<T>> {
        let mut eager = Eager::new(&self.params);
        let vars: Vec<_> = frames.iter().map(|f| std::rc::Rc::new(f.clone())).collect();
        let out = self.forward_graph(&mut eager, &vars)?;
        Ok(std::rc::Rc::try_unwrap(out).unwrap_or_else(|rc| (*rc).clone()))
    }

    /// Split a raw head output into mean and covariance parts.
    pub fn split_output(&self, out: PlaneTensor<T>) -> PosteriorField<T> {
        let c = self.config.color.channels();
        match self.config.output {
            OutputLayout::Posterior => PosteriorField {
                mu: out.channel_range(0, c),
                raw_cov: Some(out.channel_range(c, out.channels() - c)),
            },
            OutputLayout::MeanOnly => PosteriorField {
                mu: out,
                raw_cov: None,
            },
            OutputLayout::NoiseLevel => PosteriorField {
                mu: out,
                raw_cov: None,
            },
        }
    }

    /// Blind-spot posterior for every pixel of the window's reference frame.
    pub fn udvd_forward(&self, frames: &[PlaneTensor<T>]) -> Result<PosteriorField<T>> {
        Ok(self.split_output(self.forward(frames)?))
    }
}

/// Eager single-UNet evaluation.
pub fn unet_forward<T: Scalar>(
    x: &PlaneTensor<T>,
    unet: &UNet,
    params: &ParamStore<T>,
) -> Result<PlaneTensor<T>> {
    let mut eager = Eager::new(params);
    let out = unet.forward(&mut eager, &std::rc::Rc::new(x.clone()))?;
    Ok((*out).clone())
}
