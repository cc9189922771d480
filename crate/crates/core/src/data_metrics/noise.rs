use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::video::VideoTensor;
use crate::error::{Result, UdvdError};

/// Add iid `N(0, sigma²)` to every sample. The result is not clipped.
pub fn add_gaussian_noise(video: &VideoTensor, sigma: f64, seed: u64) -> Result<VideoTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(video, sigma, &mut rng)
}

fn add_noise_with(video: &VideoTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<VideoTensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(UdvdError::invalid(format!("noise level must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(video.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let frames = video
        .frames()
        .iter()
        .map(|f| {
            let mut out = f.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + normal.sample(rng)) as f32;
            }
            out
        })
        .collect();
    VideoTensor::new(frames)
}

/// Draws a fresh noise realisation over a fixed clean video on each call.
///
/// The clean frames never leave this type; callers only see noisy draws.
#[derive(Debug, Clone)]
pub struct NoiseResampler {
    clean: VideoTensor,
    sigma: f64,
    rng: ChaCha8Rng,
}

impl NoiseResampler {
    pub fn new(clean: VideoTensor, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(UdvdError::invalid(format!("noise level must be >= 0, got {sigma}")));
        }
        Ok(Self {
            clean,
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn draw(&mut self) -> VideoTensor {
        add_noise_with(&self.clean, self.sigma, &mut self.rng).expect("validated at construction")
    }
}
