//! Whole-video inference: sliding frame windows, blind-spot prediction and
//! optional posterior-mean fusion with the observed pixel.

use crate::checkpoint::TrainedModel;
use crate::data_metrics::VideoTensor;
use crate::error::{Result, UdvdError};
use crate::loss_fusion::{posterior_mean, PixelPosterior};
use crate::network::{BlindSpotNetwork, PosteriorField};
use crate::tensor::PlaneTensor;

/// Zero-pad the bottom and right edges up to a multiple of 4.
///
/// Zeros rather than mirrored content: a mirrored copy of a pixel would
/// land inside the field of view of the branch looking toward that edge.
pub fn pad_to_multiple_of_4(frame: &PlaneTensor<f32>) -> PlaneTensor<f32> {
    let (c, h, w) = frame.shape();
    let (ph, pw) = (h.next_multiple_of(4), w.next_multiple_of(4));
    if (ph, pw) == (h, w) {
        return frame.clone();
    }
    PlaneTensor::from_fn(c, ph, pw, |ch, r, x| {
        if r < h && x < w {
            frame.get(ch, r, x)
        } else {
            0.0
        }
    })
}

fn padded_forward(net: &BlindSpotNetwork<f32>, window: &[PlaneTensor<f32>]) -> Result<PlaneTensor<f32>> {
    let (_, h, w) = window
        .first()
        .ok_or_else(|| UdvdError::shape("empty frame window"))?
        .shape();
    let padded: Vec<_> = window.iter().map(pad_to_multiple_of_4).collect();
    net.forward(&padded)?.crop(0, 0, h, w)
}

/// Blind-spot posterior for the central frame of `window`, any frame size.
pub fn predict_window(net: &BlindSpotNetwork<f32>, window: &[PlaneTensor<f32>]) -> Result<PosteriorField<f32>> {
    Ok(net.split_output(padded_forward(net, window)?))
}

/// Noise level from a noise-level network: absolute spatial mean of its output.
pub fn estimate_sigma(sigma_net: &BlindSpotNetwork<f32>, window: &[PlaneTensor<f32>]) -> Result<f64> {
    let out = padded_forward(sigma_net, window)?;
    Ok((out.sum() / out.data().len() as f64).abs())
}

/// Posterior mean of every pixel of `y` given the blind-spot prediction.
pub fn fuse_frame(field: &PosteriorField<f32>, y: &PlaneTensor<f32>, sigma: f64) -> Result<PlaneTensor<f32>> {
    let raw = field
        .raw_cov
        .as_ref()
        .ok_or_else(|| UdvdError::invalid("fusion needs a covariance prediction"))?;
    if field.mu.shape() != y.shape() {
        return Err(UdvdError::shape(format!(
            "prediction {:?} and frame {:?} differ",
            field.mu.shape(),
            y.shape()
        )));
    }
    if !(sigma > 0.0) {
        return Err(UdvdError::invalid(format!("fusion needs sigma > 0, got {sigma}")));
    }
    let (c, h, w) = y.shape();
    let n = h * w;
    let mut out = PlaneTensor::zeros(c, h, w);
    if c == 1 {
        let s2 = sigma * sigma;
        let (mu, a, yv) = (field.mu.data(), raw.data(), y.data());
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let var = a[i] as f64 * a[i] as f64;
            let m = mu[i] as f64;
            *o = (m + var / (var + s2) * (yv[i] as f64 - m)) as f32;
        }
        return Ok(out);
    }
    let nraw = raw.channels();
    for i in 0..n {
        let post = PixelPosterior::new(
            (0..c).map(|ch| field.mu.data()[ch * n + i] as f64).collect(),
            (0..nraw).map(|k| raw.data()[k * n + i] as f64).collect(),
            sigma,
        )?;
        let yp: Vec<f64> = (0..c).map(|ch| y.data()[ch * n + i] as f64).collect();
        for (ch, v) in posterior_mean(&yp, &post)?.into_iter().enumerate() {
            out.data_mut()[ch * n + i] = v as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// Final estimate: fused when fusion ran, otherwise equal to `mu`.
    pub denoised: VideoTensor,
    /// Blind-spot means before fusion.
    pub mu: VideoTensor,
    /// Noise level used for fusion at each frame.
    pub sigma: Vec<Option<f64>>,
    pub fused: bool,
}

/// Denoise every frame with a centred window, replicating the first and last
/// frames at the sequence ends. Fusion runs when `fusion` is set, the model
/// was trained for Gaussian noise and its config enables fusion.
pub fn denoise_video(model: &TrainedModel, video: &VideoTensor, fusion: bool) -> Result<DenoiseOutput> {
    model.validate()?;
    let net = &model.net;
    if video.channels() != net.config.color.channels() {
        return Err(UdvdError::shape(format!(
            "model expects {}-channel frames, video has {}",
            net.config.color.channels(),
            video.channels()
        )));
    }
    let fuse = fusion && net.config.fusion_enabled && model.noise.supports_fusion();
    let k = net.frame_count();
    let mut denoised = Vec::with_capacity(video.len());
    let mut mus = Vec::with_capacity(video.len());
    let mut sigmas = Vec::with_capacity(video.len());
    for t in 0..video.len() {
        let window = video.window(t, k);
        let field = predict_window(net, &window)?;
        let sigma = match (&model.sigma_net, model.noise.sigma) {
            (_, Some(s)) => Some(s),
            (Some(sn), None) => Some(estimate_sigma(sn, &window)?),
            (None, None) => None,
        };
        let out = match sigma {
            Some(s) if fuse => fuse_frame(&field, video.frame(t), s)?,
            _ => field.mu.clone(),
        };
        denoised.push(out);
        mus.push(field.mu);
        sigmas.push(sigma.filter(|_| fuse));
    }
    Ok(DenoiseOutput {
        denoised: VideoTensor::new(denoised)?,
        mu: VideoTensor::new(mus)?,
        sigma: sigmas,
        fused: fuse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss_fusion::NoiseModel;
    use crate::network::{ColorMode, NetworkConfig, OutputLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(k: usize, color: ColorMode) -> NetworkConfig {
        NetworkConfig {
            enc_width: 4,
            dec_width: 8,
            d1_out: 4,
            d2_out: 4,
            head_width: 4,
            ..NetworkConfig::desk(k, color)
        }
    }

    fn video(c: usize, t: usize, h: usize, w: usize) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        VideoTensor::new(
            (0..t)
                .map(|_| PlaneTensor::from_fn(c, h, w, |_, _, _| rng.gen_range(0.0..255.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn frame_count_and_size_preserved() {
        let m = TrainedModel::new(
            BlindSpotNetwork::new(tiny(5, ColorMode::Grayscale)).unwrap(),
            NoiseModel::known(20.0).unwrap(),
        );
        let v = video(1, 3, 13, 18);
        let out = denoise_video(&m, &v, true).unwrap();
        assert!(out.fused);
        assert_eq!(out.denoised.len(), 3);
        assert_eq!(out.denoised.frame(0).shape(), (1, 13, 18));
    }

    #[test]
    fn fusion_off_returns_mu() {
        let m = TrainedModel::new(
            BlindSpotNetwork::new(tiny(3, ColorMode::Rgb)).unwrap(),
            NoiseModel::known(20.0).unwrap(),
        );
        let v = video(3, 4, 16, 16);
        let out = denoise_video(&m, &v, false).unwrap();
        assert!(!out.fused);
        assert_eq!(out.denoised.frames(), out.mu.frames());
    }

    #[test]
    fn unknown_noise_never_fuses() {
        let cfg = tiny(1, ColorMode::Grayscale).with_output(OutputLayout::MeanOnly);
        let m = TrainedModel::new(BlindSpotNetwork::new(cfg).unwrap(), NoiseModel::unknown());
        let out = denoise_video(&m, &video(1, 2, 8, 8), true).unwrap();
        assert!(!out.fused);
    }

    #[test]
    fn mode_mismatch_rejected() {
        let cfg = tiny(1, ColorMode::Grayscale).with_output(OutputLayout::MeanOnly);
        let m = TrainedModel::new(BlindSpotNetwork::new(cfg).unwrap(), NoiseModel::known(10.0).unwrap());
        assert!(denoise_video(&m, &video(1, 2, 8, 8), true).is_err());
        let m = TrainedModel::new(
            BlindSpotNetwork::new(tiny(1, ColorMode::Grayscale)).unwrap(),
            NoiseModel::known(10.0).unwrap(),
        );
        assert!(denoise_video(&m, &video(3, 2, 8, 8), true).is_err());
    }

    #[test]
    fn rgb_fusion_matches_per_pixel_formula() {
        let net = BlindSpotNetwork::<f32>::new(tiny(1, ColorMode::Rgb)).unwrap();
        let v = video(3, 1, 8, 8);
        let field = predict_window(&net, &v.window(0, 1)).unwrap();
        let fused = fuse_frame(&field, v.frame(0), 15.0).unwrap();
        let raw = field.raw_cov.as_ref().unwrap();
        let post = PixelPosterior::new(
            (0..3).map(|c| field.mu.get(c, 2, 5) as f64).collect(),
            (0..6).map(|k| raw.get(k, 2, 5) as f64).collect(),
            15.0,
        )
        .unwrap();
        let y: Vec<f64> = (0..3).map(|c| v.frame(0).get(c, 2, 5) as f64).collect();
        let expect = posterior_mean(&y, &post).unwrap();
        for c in 0..3 {
            assert!((fused.get(c, 2, 5) as f64 - expect[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn grayscale_fusion_limits() {
        let mu = PlaneTensor::filled(1, 1, 2, 10.0f32);
        let y = PlaneTensor::filled(1, 1, 2, 50.0f32);
        let raw = PlaneTensor::from_vec(1, 1, 2, vec![0.0, 1e4]).unwrap();
        let field = PosteriorField { mu, raw_cov: Some(raw) };
        let f = fuse_frame(&field, &y, 5.0).unwrap();
        assert_eq!(f.get(0, 0, 0), 10.0);
        assert!((f.get(0, 0, 1) - 50.0).abs() < 1e-3);
    }
}
