//! Synthetic videos with exactly known motion.
//!
//! A scene is a periodic background texture translating at an integer
//! velocity plus textured objects, each moving rigidly at its own integer
//! velocity. Rendering is pure sampling on the integer lattice, so the
//! stored flow reproduces frame `t+1` from frame `t` bit-exactly wherever
//! the same layer is visible at both ends of the displacement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::video::VideoTensor;
use crate::error::{Result, UdvdError};
use crate::network::ColorMode;
use crate::tensor::PlaneTensor;

/// Displacement in pixels per frame; `dx` along columns, `dy` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Velocity {
    pub dx: i32,
    pub dy: i32,
}

impl Velocity {
    pub const fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TextureSpec {
    /// Constant gray level (or constant color for RGB scenes).
    Flat { level: f64 },
    /// Random field with amplitude spectrum `∝ 1/f^slope`, rescaled to the
    /// given mean and standard deviation and clamped into `[0, 255]`.
    Fractal { slope: f64, mean: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { radius: i32 },
    Rect { half_height: i32, half_width: i32 },
}

impl Shape {
    fn contains(&self, dr: i32, dc: i32) -> bool {
        match *self {
            Shape::Disc { radius } => dr * dr + dc * dc <= radius * radius,
            Shape::Rect {
                half_height,
                half_width,
            } => dr.abs() <= half_height && dc.abs() <= half_width,
        }
    }

    fn half_extent(&self) -> (i32, i32) {
        match *self {
            Shape::Disc { radius } => (radius, radius),
            Shape::Rect {
                half_height,
                half_width,
            } => (half_height, half_width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Centre `(row, col)` at frame 0.
    pub start: (i32, i32),
    pub velocity: Velocity,
    pub texture: TextureSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub texture: TextureSpec,
    pub velocity: Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub seed: u64,
    pub color: ColorMode,
    pub background: Background,
    /// Painted in order; later objects occlude earlier ones.
    pub objects: Vec<SceneObject>,
}

/// Per-pixel displacement between two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, row: usize, col: usize) -> Option<(f32, f32)> {
        let i = self.index(row, col);
        self.valid[i].then(|| (self.dx[i], self.dy[i]))
    }

    pub fn set(&mut self, row: usize, col: usize, flow: Option<(f32, f32)>) {
        let i = self.index(row, col);
        match flow {
            Some((dx, dy)) => {
                self.dx[i] = dx;
                self.dy[i] = dy;
                self.valid[i] = true;
            }
            None => {
                self.dx[i] = 0.0;
                self.dy[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Clean render plus the ground-truth flow from each frame to the next.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub clean: VideoTensor,
    /// `flows[t]` maps frame `t` to frame `t + 1`.
    pub flows: Vec<FlowField>,
    /// Per frame, the layer visible at each pixel: 0 = background, `j + 1` = object `j`.
    pub layers: Vec<Vec<u16>>,
}

impl SyntheticScene {
    /// A textured background panning at `velocity`, with no objects.
    pub fn translating_texture(seed: u64, color: ColorMode, velocity: Velocity) -> Self {
        Self {
            seed,
            color,
            background: Background {
                texture: TextureSpec::Fractal {
                    slope: 1.6,
                    mean: 120.0,
                    std: 45.0,
                },
                velocity,
            },
            objects: Vec::new(),
        }
    }

    /// Background panning at `(1, 0)`, a textured disc moving diagonally
    /// and a flat rectangle moving left. Fits 96×96 frames for up to 32 frames.
    pub fn benchmark(seed: u64, color: ColorMode) -> Self {
        Self::translating_texture(seed, color, Velocity::new(1, 0))
            .with_object(SceneObject {
                shape: Shape::Disc { radius: 14 },
                start: (30, 20),
                velocity: Velocity::new(1, 1),
                texture: TextureSpec::Fractal {
                    slope: 1.4,
                    mean: 170.0,
                    std: 40.0,
                },
            })
            .with_object(SceneObject {
                shape: Shape::Rect {
                    half_height: 10,
                    half_width: 12,
                },
                start: (70, 60),
                velocity: Velocity::new(0, -1),
                texture: TextureSpec::Flat { level: 60.0 },
            })
    }

    pub fn with_object(mut self, object: SceneObject) -> Self {
        self.objects.push(object);
        self
    }

    /// Reject objects that would leave the frame during `frames` frames.
    pub fn validate(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        for (j, obj) in self.objects.iter().enumerate() {
            let (hh, hw) = obj.shape.half_extent();
            for t in [0, frames.saturating_sub(1)] {
                let r = obj.start.0 + obj.velocity.dy * t as i32;
                let c = obj.start.1 + obj.velocity.dx * t as i32;
                if r - hh < 0 || c - hw < 0 || r + hh >= height as i32 || c + hw >= width as i32 {
                    return Err(UdvdError::invalid(format!(
                        "object {j} leaves the {height}x{width} frame by frame {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Periodic `rows × cols` random field with a power-law amplitude spectrum.
fn fractal_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, slope: f64) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = (0..rows * cols)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let row_fft = planner.plan_fft_forward(cols);
    let col_fft = planner.plan_fft_forward(rows);
    let row_ifft = planner.plan_fft_inverse(cols);
    let col_ifft = planner.plan_fft_inverse(rows);
    let transform_cols = |buf: &mut Vec<Complex<f64>>, fft: &dyn rustfft::Fft<f64>| {
        let mut column = vec![Complex::new(0.0, 0.0); rows];
        for c in 0..cols {
            for r in 0..rows {
                column[r] = buf[r * cols + c];
            }
            fft.process(&mut column);
            for r in 0..rows {
                buf[r * cols + c] = column[r];
            }
        }
    };
    for row in buf.chunks_mut(cols) {
        row_fft.process(row);
    }
    transform_cols(&mut buf, col_fft.as_ref());
    for r in 0..rows {
        let fr = r.min(rows - r) as f64 / rows as f64;
        for c in 0..cols {
            let fc = c.min(cols - c) as f64 / cols as f64;
            let f = (fr * fr + fc * fc).sqrt();
            let gain = if f == 0.0 { 0.0 } else { f.powf(-slope) };
            buf[r * cols + c] *= gain;
        }
    }
    for row in buf.chunks_mut(cols) {
        row_ifft.process(row);
    }
    transform_cols(&mut buf, col_ifft.as_ref());
    buf.iter().map(|z| z.re).collect()
}

fn standardize(field: &mut [f64], mean: f64, std: f64) {
    let n = field.len() as f64;
    let m = field.iter().sum::<f64>() / n;
    let s = (field.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    for v in field.iter_mut() {
        *v = if s > 0.0 { (*v - m) / s * std + mean } else { mean };
    }
}

/// Periodic texture image, `channels × rows × cols`.
struct Texture {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Texture {
    fn generate(spec: &TextureSpec, color: ColorMode, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let channels = color.channels();
        let n = rows * cols;
        let data = match *spec {
            TextureSpec::Flat { level } => vec![level.clamp(0.0, 255.0) as f32; channels * n],
            TextureSpec::Fractal { slope, mean, std } => {
                let mut luma = fractal_field(rng, rows, cols, slope);
                standardize(&mut luma, mean, std);
                let mut data = Vec::with_capacity(channels * n);
                if channels == 1 {
                    data.extend(luma.iter().map(|v| v.clamp(0.0, 255.0) as f32));
                } else {
                    // smoother chroma fields ride on the shared luminance
                    let mut c1 = fractal_field(rng, rows, cols, slope + 0.5);
                    let mut c2 = fractal_field(rng, rows, cols, slope + 0.5);
                    standardize(&mut c1, 0.0, 0.35 * std);
                    standardize(&mut c2, 0.0, 0.35 * std);
                    let mix = [(1.0, 0.0), (-0.5, 0.8), (-0.5, -0.8)];
                    for (a, b) in mix {
                        data.extend(
                            (0..n).map(|i| (luma[i] + a * c1[i] + b * c2[i]).clamp(0.0, 255.0) as f32),
                        );
                    }
                }
                data
            }
        };
        Self {
            rows,
            cols,
            data,
        }
    }

    #[inline]
    fn sample(&self, c: usize, r: i64, x: i64) -> f32 {
        let r = r.rem_euclid(self.rows as i64) as usize;
        let x = x.rem_euclid(self.cols as i64) as usize;
        self.data[(c * self.rows + r) * self.cols + x]
    }
}

/// Render `frames` frames of `height × width` together with their exact flow.
pub fn synth_video(
    scene: &SyntheticScene,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<SyntheticVideo> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(UdvdError::invalid("synthetic video needs positive T, H, W"));
    }
    scene.validate(frames, height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let bg_rows = (2 * height).next_power_of_two();
    let bg_cols = (2 * width).next_power_of_two();
    let background = Texture::generate(&scene.background.texture, scene.color, bg_rows, bg_cols, &mut rng);
    let object_textures: Vec<Texture> = scene
        .objects
        .iter()
        .map(|o| {
            let (hh, hw) = o.shape.half_extent();
            let rows = (2 * hh as usize + 1).next_power_of_two().max(8);
            let cols = (2 * hw as usize + 1).next_power_of_two().max(8);
            Texture::generate(&o.texture, scene.color, rows, cols, &mut rng)
        })
        .collect();

    let channels = scene.color.channels();
    let bv = scene.background.velocity;
    let layer_at = |t: i32, r: i32, c: i32| -> u16 {
        let mut layer = 0u16;
        for (j, o) in scene.objects.iter().enumerate() {
            let cr = o.start.0 + o.velocity.dy * t;
            let cc = o.start.1 + o.velocity.dx * t;
            if o.shape.contains(r - cr, c - cc) {
                layer = j as u16 + 1;
            }
        }
        layer
    };

    let mut rendered = Vec::with_capacity(frames);
    let mut layers = Vec::with_capacity(frames);
    for t in 0..frames as i32 {
        let mut frame = PlaneTensor::<f32>::zeros(channels, height, width);
        let mut layer_map = vec![0u16; height * width];
        for r in 0..height as i32 {
            for c in 0..width as i32 {
                let layer = layer_at(t, r, c);
                layer_map[(r as usize) * width + c as usize] = layer;
                for ch in 0..channels {
                    let v = if layer == 0 {
                        background.sample(ch, (r - bv.dy * t) as i64, (c - bv.dx * t) as i64)
                    } else {
                        let o = &scene.objects[layer as usize - 1];
                        let tex = &object_textures[layer as usize - 1];
                        let (hh, hw) = o.shape.half_extent();
                        let lr = r - (o.start.0 + o.velocity.dy * t) + hh;
                        let lc = c - (o.start.1 + o.velocity.dx * t) + hw;
                        tex.sample(ch, lr as i64, lc as i64)
                    };
                    frame.set(ch, r as usize, c as usize, v);
                }
            }
        }
        rendered.push(frame);
        layers.push(layer_map);
    }

    let mut flows = Vec::with_capacity(frames.saturating_sub(1));
    for t in 0..frames.saturating_sub(1) {
        let mut flow = FlowField::new(height, width);
        for r in 0..height {
            for c in 0..width {
                let layer = layers[t][r * width + c];
                let v = if layer == 0 {
                    bv
                } else {
                    scene.objects[layer as usize - 1].velocity
                };
                let (nr, nc) = (r as i32 + v.dy, c as i32 + v.dx);
                let inside = nr >= 0 && nc >= 0 && nr < height as i32 && nc < width as i32;
                let same_layer = inside && layers[t + 1][nr as usize * width + nc as usize] == layer;
                flow.set(r, c, same_layer.then_some((v.dx as f32, v.dy as f32)));
            }
        }
        flows.push(flow);
    }

    Ok(SyntheticVideo {
        clean: VideoTensor::new(rendered)?,
        flows,
        layers,
    })
}
