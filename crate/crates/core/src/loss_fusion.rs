//! Gaussian likelihood of noisy pixels and posterior-mean fusion.
//!
//! The network predicts, per pixel, a mean `μx` and an upper-triangular
//! factor `A` of the signal covariance `Σx = AᵀA`. Under additive Gaussian
//! noise of level `σ` the noisy pixel is distributed as `N(μx, Σx + σ²I)`,
//! which gives the training loss, and the posterior mean of the clean pixel
//! blends `μx` with the observed value.
//!
//! All quantities speak the `[0, 255]` intensity convention.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UdvdError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianKnownSigma,
    GaussianUnknownSigma,
    Unknown,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::GaussianKnownSigma => "gaussian_known_sigma",
            NoiseKind::GaussianUnknownSigma => "gaussian_unknown_sigma",
            NoiseKind::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_known_sigma" | "known" => Some(NoiseKind::GaussianKnownSigma),
            "gaussian_unknown_sigma" | "estimate" => Some(NoiseKind::GaussianUnknownSigma),
            "unknown" => Some(NoiseKind::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Standard deviation, present iff the kind is `GaussianKnownSigma`.
    pub sigma: Option<f64>,
}

impl NoiseModel {
    pub fn known(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(UdvdError::invalid(format!("noise sigma must be > 0, got {sigma}")));
        }
        Ok(Self {
            kind: NoiseKind::GaussianKnownSigma,
            sigma: Some(sigma),
        })
    }

    pub fn estimated() -> Self {
        Self {
            kind: NoiseKind::GaussianUnknownSigma,
            sigma: None,
        }
    }

    pub fn unknown() -> Self {
        Self {
            kind: NoiseKind::Unknown,
            sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.sigma) {
            (NoiseKind::GaussianKnownSigma, Some(s)) if s > 0.0 && s.is_finite() => Ok(()),
            (NoiseKind::GaussianKnownSigma, _) => Err(UdvdError::config(
                "sigma",
                "known-sigma noise needs a positive sigma",
            )),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(UdvdError::config(
                "sigma",
                "sigma is only given for known-sigma noise",
            )),
        }
    }

    /// Whether the noisy pixel can be folded back in by posterior fusion.
    pub fn supports_fusion(&self) -> bool {
        self.kind != NoiseKind::Unknown
    }
}

/// Number of channels whose covariance factor has `len` upper-triangular entries.
pub fn channels_for_raw_len(len: usize) -> Result<usize> {
    match len {
        1 => Ok(1),
        3 => Ok(2),
        6 => Ok(3),
        n => Err(UdvdError::invalid(format!(
            "{n} is not a triangular number of covariance entries"
        ))),
    }
}

/// Upper-triangular `A` filled row by row from `raw`.
pub fn covariance_factor(raw: &[f64]) -> Result<DMatrix<f64>> {
    let c = channels_for_raw_len(raw.len())?;
    let mut a = DMatrix::zeros(c, c);
    let mut it = raw.iter();
    for i in 0..c {
        for j in i..c {
            a[(i, j)] = *it.next().expect("length checked");
        }
    }
    Ok(a)
}

/// `Σx = AᵀA`, symmetric positive semi-definite for any `raw`.
pub fn build_covariance(raw: &[f64]) -> Result<DMatrix<f64>> {
    let a = covariance_factor(raw)?;
    Ok(a.transpose() * &a)
}

/// Per-pixel prediction of the clean value given its neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPosterior {
    pub mu: Vec<f64>,
    pub raw_cov: Vec<f64>,
    pub sigma_n: f64,
}

impl PixelPosterior {
    pub fn new(mu: Vec<f64>, raw_cov: Vec<f64>, sigma_n: f64) -> Result<Self> {
        let c = channels_for_raw_len(raw_cov.len())?;
        if c != mu.len() {
            return Err(UdvdError::shape(format!(
                "{} covariance entries do not match {} channels",
                raw_cov.len(),
                mu.len()
            )));
        }
        Ok(Self { mu, raw_cov, sigma_n })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        build_covariance(&self.raw_cov).expect("validated at construction")
    }

    /// `Σy = Σx + σ²I`, the covariance of the noisy pixel.
    pub fn noisy_covariance(&self) -> DMatrix<f64> {
        let c = self.channels();
        self.covariance() + DMatrix::identity(c, c) * (self.sigma_n * self.sigma_n)
    }
}

/// Loss value with its gradients w.r.t. the network outputs and `σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGrad {
    pub loss: f64,
    pub d_mu: Vec<f64>,
    pub d_raw_cov: Vec<f64>,
    pub d_sigma: f64,
}

fn check_pixel(y: &[f64], post: &PixelPosterior) -> Result<()> {
    if y.len() != post.channels() {
        return Err(UdvdError::shape(format!(
            "pixel has {} channels, posterior {}",
            y.len(),
            post.channels()
        )));
    }
    if !(post.sigma_n > 0.0) {
        return Err(UdvdError::invalid(format!(
            "noise sigma must be > 0, got {}",
            post.sigma_n
        )));
    }
    Ok(())
}

/// `½ (y−μ)ᵀ(Σx+σ²I)⁻¹(y−μ) + ½ log|Σx+σ²I|`.
pub fn gaussian_nll(y: &[f64], post: &PixelPosterior) -> Result<f64> {
    Ok(gaussian_nll_grad(y, post)?.loss)
}

/// [`gaussian_nll`] together with its analytic gradient.
pub fn gaussian_nll_grad(y: &[f64], post: &PixelPosterior) -> Result<NllGrad> {
    check_pixel(y, post)?;
    let c = post.channels();
    let a = covariance_factor(&post.raw_cov)?;
    let s = a.transpose() * &a + DMatrix::identity(c, c) * (post.sigma_n * post.sigma_n);
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| UdvdError::Numerical("Σx + σ²I is not positive definite".into()))?;
    let r = DVector::from_iterator(c, y.iter().zip(&post.mu).map(|(y, m)| y - m));
    let w = chol.solve(&r); // S⁻¹ r
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let loss = 0.5 * r.dot(&w) + 0.5 * log_det;

    // dL/dS = ½ (S⁻¹ − w wᵀ); with S = AᵀA + σ²I, dL/dA = 2 A dL/dS.
    let s_inv = chol.inverse();
    let g = (&s_inv - &w * w.transpose()) * 0.5;
    let ga = &a * &g * 2.0;
    let mut d_raw_cov = Vec::with_capacity(post.raw_cov.len());
    for i in 0..c {
        for j in i..c {
            d_raw_cov.push(ga[(i, j)]);
        }
    }
    Ok(NllGrad {
        loss,
        d_mu: (-w).iter().copied().collect(),
        d_raw_cov,
        d_sigma: 2.0 * post.sigma_n * g.trace(),
    })
}

/// `E[x | y, Ω] = μx + Σx(Σx+σ²I)⁻¹(y−μx)`.
///
/// Equal to the precision-weighted form `(Σx⁻¹+σ⁻²I)⁻¹(Σx⁻¹μx+σ⁻²y)` but
/// defined for singular `Σx` as well.
pub fn posterior_mean(y: &[f64], post: &PixelPosterior) -> Result<Vec<f64>> {
    check_pixel(y, post)?;
    let c = post.channels();
    let sigma_x = post.covariance();
    let s = &sigma_x + DMatrix::identity(c, c) * (post.sigma_n * post.sigma_n);
    let chol = s
        .cholesky()
        .ok_or_else(|| UdvdError::Numerical("Σx + σ²I is not positive definite".into()))?;
    let r = DVector::from_iterator(c, y.iter().zip(&post.mu).map(|(y, m)| y - m));
    let correction = sigma_x * chol.solve(&r);
    Ok(post
        .mu
        .iter()
        .zip(correction.iter())
        .map(|(m, d)| m + d)
        .collect())
}

/// Gradients of one fused output channel w.r.t. `μx`, the covariance factor
/// entries and the observed pixel. Uses `E[x|y] = y − σ²S⁻¹(y−μx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrad {
    pub d_mu: Vec<f64>,
    pub d_raw_cov: Vec<f64>,
    pub d_y: Vec<f64>,
}

pub fn posterior_mean_grad(y: &[f64], post: &PixelPosterior, channel: usize) -> Result<FusionGrad> {
    check_pixel(y, post)?;
    let c = post.channels();
    if channel >= c {
        return Err(UdvdError::invalid(format!("channel {channel} out of range")));
    }
    let s2 = post.sigma_n * post.sigma_n;
    let a = covariance_factor(&post.raw_cov)?;
    let s = a.transpose() * &a + DMatrix::identity(c, c) * s2;
    let chol = s
        .cholesky()
        .ok_or_else(|| UdvdError::Numerical("Σx + σ²I is not positive definite".into()))?;
    let r = DVector::from_iterator(c, y.iter().zip(&post.mu).map(|(y, m)| y - m));
    let w = chol.solve(&r);
    let mut e = DVector::zeros(c);
    e[channel] = 1.0;
    let u = chol.solve(&e); // S⁻¹ e, S symmetric
    // d/dμ = σ² S⁻¹ e ; d/dy = e − σ² S⁻¹ e ; d/dΣ = σ² u wᵀ
    let m = &u * w.transpose() * s2;
    let ga = &a * (&m + m.transpose());
    let mut d_raw_cov = Vec::with_capacity(post.raw_cov.len());
    for i in 0..c {
        for j in i..c {
            d_raw_cov.push(ga[(i, j)]);
        }
    }
    Ok(FusionGrad {
        d_mu: (&u * s2).iter().copied().collect(),
        d_raw_cov,
        d_y: (&e - &u * s2).iter().copied().collect(),
    })
}

/// Penalty added to the loss when `σ` is estimated by a second network.
pub fn sigma_regularizer(sigma_estimate: f64) -> f64 {
    -0.1 * sigma_estimate
}

/// Derivative of [`sigma_regularizer`].
pub const SIGMA_REGULARIZER_SLOPE: f64 = -0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_post(rng: &mut ChaCha8Rng, c: usize) -> PixelPosterior {
        let raw_len = c * (c + 1) / 2;
        PixelPosterior::new(
            (0..c).map(|_| rng.gen_range(0.0..255.0)).collect(),
            (0..raw_len).map(|_| rng.gen_range(-20.0..20.0)).collect(),
            rng.gen_range(5.0..50.0),
        )
        .unwrap()
    }

    #[test]
    fn covariance_examples() {
        let id = build_covariance(&[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(id, DMatrix::identity(3, 3));
        assert_eq!(build_covariance(&[0.0; 6]).unwrap(), DMatrix::zeros(3, 3));
        assert!(build_covariance(&[0.0; 5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let eig = build_covariance(&raw).unwrap().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-9));
        }
    }

    #[test]
    fn scalar_nll_examples() {
        let p = PixelPosterior::new(vec![0.0], vec![0.0], 1.0).unwrap();
        assert_eq!(gaussian_nll(&[0.0], &p).unwrap(), 0.0);
        // Σx = 0.5 (a = √0.5), σ² = 0.5
        let p = PixelPosterior::new(vec![0.0], vec![0.5f64.sqrt()], 0.5f64.sqrt()).unwrap();
        assert_relative_eq!(gaussian_nll(&[2.0], &p).unwrap(), 2.0, epsilon = 1e-12);
        let bad = PixelPosterior::new(vec![0.0], vec![1.0], 0.0).unwrap();
        assert!(gaussian_nll(&[0.0], &bad).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in [1, 3] {
            for _ in 0..50 {
                let post = random_post(&mut rng, c);
                let y: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..255.0)).collect();
                let g = gaussian_nll_grad(&y, &post).unwrap();
                let f = |p: &PixelPosterior| gaussian_nll(&y, p).unwrap();
                let h = 1e-5;
                let check = |fd: f64, an: f64| {
                    let rel = (fd - an).abs() / an.abs().max(1e-3);
                    assert!(rel < 1e-4, "fd {fd} vs analytic {an}");
                };
                for i in 0..c {
                    let (mut p, mut m) = (post.clone(), post.clone());
                    p.mu[i] += h;
                    m.mu[i] -= h;
                    check((f(&p) - f(&m)) / (2.0 * h), g.d_mu[i]);
                }
                for i in 0..post.raw_cov.len() {
                    let (mut p, mut m) = (post.clone(), post.clone());
                    p.raw_cov[i] += h;
                    m.raw_cov[i] -= h;
                    check((f(&p) - f(&m)) / (2.0 * h), g.d_raw_cov[i]);
                }
                let (mut p, mut m) = (post.clone(), post.clone());
                p.sigma_n += h;
                m.sigma_n -= h;
                check((f(&p) - f(&m)) / (2.0 * h), g.d_sigma);
            }
        }
    }

    #[test]
    fn posterior_mean_examples() {
        // μ=1, Σx=4, σ²=1, y=3 → 2.6
        let p = PixelPosterior::new(vec![1.0], vec![2.0], 1.0).unwrap();
        assert_relative_eq!(posterior_mean(&[3.0], &p).unwrap()[0], 2.6, epsilon = 1e-12);
        let p = PixelPosterior::new(vec![10.0, 20.0, 30.0], vec![0.0; 6], 25.0).unwrap();
        assert_eq!(posterior_mean(&[0.0, 100.0, 7.0], &p).unwrap(), vec![10.0, 20.0, 30.0]);
        let p = PixelPosterior::new(vec![1.0], vec![2.0], -1.0).unwrap();
        assert!(posterior_mean(&[3.0], &p).is_err());
    }

    #[test]
    fn fusion_limits() {
        let p = PixelPosterior::new(vec![100.0], vec![1e-4], 30.0).unwrap();
        assert!((posterior_mean(&[200.0], &p).unwrap()[0] - 100.0).abs() < 1e-6);
        let p = PixelPosterior::new(vec![100.0], vec![30.0], 1e-5).unwrap();
        assert!((posterior_mean(&[200.0], &p).unwrap()[0] - 200.0).abs() < 1e-6);
    }

    #[test]
    fn fusion_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let post = random_post(&mut rng, 3);
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..255.0)).collect();
            let ch = rng.gen_range(0..3);
            let g = posterior_mean_grad(&y, &post, ch).unwrap();
            let f = |y: &[f64], p: &PixelPosterior| posterior_mean(y, p).unwrap()[ch];
            let h = 1e-5;
            for i in 0..3 {
                let (mut p, mut m) = (post.clone(), post.clone());
                p.mu[i] += h;
                m.mu[i] -= h;
                assert!(((f(&y, &p) - f(&y, &m)) / (2.0 * h) - g.d_mu[i]).abs() < 1e-6);
                let (mut yp, mut ym) = (y.clone(), y.clone());
                yp[i] += h;
                ym[i] -= h;
                assert!(((f(&yp, &post) - f(&ym, &post)) / (2.0 * h) - g.d_y[i]).abs() < 1e-6);
            }
            for i in 0..6 {
                let (mut p, mut m) = (post.clone(), post.clone());
                p.raw_cov[i] += h;
                m.raw_cov[i] -= h;
                let fd = (f(&y, &p) - f(&y, &m)) / (2.0 * h);
                assert!((fd - g.d_raw_cov[i]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn regularizer() {
        assert_eq!(sigma_regularizer(30.0), -3.0);
        assert_eq!(sigma_regularizer(0.0), 0.0);
    }

    #[test]
    fn noise_model_validation() {
        assert!(NoiseModel::known(0.0).is_err());
        assert!(NoiseModel::known(25.0).unwrap().validate().is_ok());
        assert!(NoiseModel { kind: NoiseKind::Unknown, sigma: Some(3.0) }.validate().is_err());
        assert!(!NoiseModel::unknown().supports_fusion());
        assert_eq!(NoiseKind::parse("estimate"), Some(NoiseKind::GaussianUnknownSigma));
    }

    proptest! {
        #[test]
        fn scalar_fusion_lies_between_mean_and_observation(
            mu in 0.0f64..255.0, y in -50.0f64..300.0, a in -30.0f64..30.0, sigma in 0.5f64..80.0
        ) {
            let p = PixelPosterior::new(vec![mu], vec![a], sigma).unwrap();
            let fused = posterior_mean(&[y], &p).unwrap()[0];
            let tol = 1e-9 * (mu.abs() + y.abs() + 1.0);
            prop_assert!(fused >= mu.min(y) - tol && fused <= mu.max(y) + tol);
        }

        #[test]
        fn nll_invariant_under_channel_permutation(seed in 0u64..500, perm in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let post = random_post(&mut rng, 3);
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..255.0)).collect();
            let order = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]][perm];
            // permute Σx, then refactor it as AᵀA with A upper triangular
            let sigma = post.covariance();
            let permuted = DMatrix::from_fn(3, 3, |i, j| sigma[(order[i], order[j])]) + DMatrix::identity(3, 3) * 1e-9;
            // Cholesky gives L Lᵀ, so A = Lᵀ is upper triangular with AᵀA = L Lᵀ
            let a = permuted.cholesky().unwrap().l().transpose();
            let raw = vec![a[(0, 0)], a[(0, 1)], a[(0, 2)], a[(1, 1)], a[(1, 2)], a[(2, 2)]];
            let p2 = PixelPosterior::new(order.iter().map(|&i| post.mu[i]).collect(), raw, post.sigma_n).unwrap();
            let y2: Vec<f64> = order.iter().map(|&i| y[i]).collect();
            let l1 = gaussian_nll(&y, &post).unwrap();
            let l2 = gaussian_nll(&y2, &p2).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-6 * l1.abs().max(1.0));
        }
    }
}
