//! Log-SNR noise schedule, variance-preserving α/σ split, timestep
//! sampling, and the min-SNR loss weight.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::{sigmoid, NumericsError, Real, Tensor};

/// Shifted-cosine log-SNR schedule with linear shift interpolation.
///
/// The base curve is λ(θ) = −2·ln(tan(πθ/2)) plus a resolution shift
/// that interpolates from `shift_hi` at t=0 to `shift_lo` at t=1. The
/// time axis is mapped onto the sub-interval of θ where the curve stays
/// inside `[lambda_min, lambda_max]`, so `logsnr_at(0) == lambda_max`,
/// `logsnr_at(1) == lambda_min`, and the curve is strictly decreasing
/// in between; the clamp itself never bites in the interior.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSnrSchedule {
    pub lambda_min: Real,
    pub lambda_max: Real,
    pub shift_lo: Real,
    pub shift_hi: Real,
    pub base_resolution: usize,
    pub train_resolution: usize,
    theta0: Real,
    theta1: Real,
}

const PI: Real = std::f64::consts::PI as Real;

impl LogSnrSchedule {
    pub fn new(
        lambda_min: Real,
        lambda_max: Real,
        shift_lo: Real,
        shift_hi: Real,
        base_resolution: usize,
        train_resolution: usize,
    ) -> Self {
        // λ_raw(θ, t) = bound is solvable analytically at each end
        // because tan is monotone.
        let theta0 = (2.0 / PI) * ((shift_hi - lambda_max) / 2.0).exp().atan();
        let theta1 = (2.0 / PI) * ((shift_lo - lambda_min) / 2.0).exp().atan();
        LogSnrSchedule {
            lambda_min,
            lambda_max,
            shift_lo,
            shift_hi,
            base_resolution,
            train_resolution,
            theta0,
            theta1,
        }
    }

    /// Schedule for a training resolution, with reference shifts at 32
    /// and 8 pixels: shift_hi = 2·ln(train/32), shift_lo = 2·ln(train/8).
    pub fn for_resolution(train_resolution: usize) -> Self {
        let base = train_resolution as Real;
        Self::new(
            -15.0,
            15.0,
            2.0 * (base / 8.0).ln(),
            2.0 * (base / 32.0).ln(),
            train_resolution,
            train_resolution,
        )
    }

    /// Log-SNR at a diffusion time t ∈ [0, 1].
    pub fn logsnr_at(&self, t: Real) -> Result<Real, NumericsError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(NumericsError::Config {
                op: "logsnr_at",
                reason: format!("t must lie in [0,1], got {t}"),
            });
        }
        let theta = self.theta0 + t * (self.theta1 - self.theta0);
        let shift = self.shift_hi + t * (self.shift_lo - self.shift_hi);
        let lam = -2.0 * (PI * theta / 2.0).tan().ln() + shift;
        Ok(lam.clamp(self.lambda_min, self.lambda_max))
    }

    /// Variance-preserving split: α = √sigmoid(λ), σ = √sigmoid(−λ).
    pub fn alpha_sigma(lambda: Real) -> (Real, Real) {
        let s = sigmoid(lambda);
        (s.sqrt(), (1.0 - s).sqrt())
    }

    /// Min-SNR weight for x-prediction: w(λ) = min(e^λ, γ).
    pub fn loss_weight(lambda: Real, gamma: Real) -> Real {
        assert!(gamma > 0.0, "gamma must be positive");
        lambda.exp().min(gamma)
    }

    /// Uniform draw of a diffusion time.
    pub fn sample_time<R: Rng>(rng: &mut R) -> Real {
        rng.gen_range(0.0..1.0)
    }

    /// z_t = α·x + σ·ε with ε drawn from the standard normal. Returns
    /// both the noised tensor and the noise so losses can reuse it.
    pub fn forward_noise<R: Rng>(
        &self,
        x: &Tensor,
        t: Real,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor), NumericsError> {
        let lambda = self.logsnr_at(t)?;
        let (alpha, sigma) = Self::alpha_sigma(lambda);
        let mut z = Vec::with_capacity(x.numel());
        let mut eps = Vec::with_capacity(x.numel());
        for &v in x.data() {
            let e: Real = rng.sample(StandardNormal);
            eps.push(e);
            z.push(alpha * v + sigma * e);
        }
        Ok((
            Tensor::from_vec(x.shape(), z)?,
            Tensor::from_vec(x.shape(), eps)?,
        ))
    }
}
