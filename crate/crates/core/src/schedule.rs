//! Variance-preserving diffusion mathematics.
//!
//! The forward process has marginal `x_t = α_t·x_0 + σ_t·ε` with
//! `α_t² + σ_t² = 1`. Time runs from `t = 0` (data) to `t = 1` (noise).
//! Everything here is a pure function of its inputs plus an explicit RNG.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower edge of the time range used by samplers and training.
pub const T_MIN: f64 = 1e-4;
/// Upper edge of the time range used by samplers and training.
pub const T_MAX: f64 = 1.0 - 1e-4;

/// Half-width of the Tweedie clip interval (`[-1-δ, 1+δ]` with δ = 0.2).
pub const TWEEDIE_CLIP: f64 = 1.2;

/// Continuous diffusion time in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        Ok(TimePoint(t))
    }

    /// Clamps into `[T_MIN, T_MAX]`, where neither α nor σ vanishes.
    pub fn clamped(t: f64) -> Self {
        TimePoint(t.clamp(T_MIN, T_MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
        }
    }

    /// `(α_t, σ_t)`. Exact at the endpoints.
    pub fn alpha_sigma(&self, t: TimePoint) -> (f64, f64) {
        let t = t.value();
        match self.kind {
            ScheduleKind::Cosine => {
                if t <= 0.0 {
                    (1.0, 0.0)
                } else if t >= 1.0 {
                    (0.0, 1.0)
                } else {
                    let (s, c) = (std::f64::consts::FRAC_PI_2 * t).sin_cos();
                    (c, s)
                }
            }
        }
    }

    pub fn alpha(&self, t: TimePoint) -> f64 {
        self.alpha_sigma(t).0
    }

    pub fn sigma(&self, t: TimePoint) -> f64 {
        self.alpha_sigma(t).1
    }

    /// `log(α²/σ²)`; infinite at the endpoints.
    pub fn log_snr(&self, t: TimePoint) -> f64 {
        let (a, s) = self.alpha_sigma(t);
        2.0 * (a.ln() - s.ln())
    }

    /// `α_t·x0 + σ_t·eps`
    pub fn forward_noise(&self, x0: &Tensor, t: TimePoint, eps: &Tensor) -> Result<Tensor> {
        x0.check_same_shape(eps)?;
        let (a, s) = self.alpha_sigma(t);
        Ok(x0.axpby(a, eps, s))
    }

    /// Clipped Tweedie estimate `(x_t − σ_t·ε̂)/α_t`.
    pub fn tweedie(&self, x_t: &Tensor, eps_hat: &Tensor, t: TimePoint) -> Result<Tensor> {
        x_t.check_same_shape(eps_hat)?;
        let (a, s) = self.alpha_sigma(t);
        if a <= 0.0 {
            return Err(Error::DegenerateTime(t.value()));
        }
        Ok(x_t.zip_map(eps_hat, |x, e| {
            ((x - s * e) / a).clamp(-TWEEDIE_CLIP, TWEEDIE_CLIP)
        }))
    }

    /// Score `−ε̂/σ_t` of the noisy marginal.
    pub fn eps_to_score(&self, eps_hat: &Tensor, t: TimePoint) -> Result<Tensor> {
        let s = self.sigma(t);
        if s <= 0.0 {
            return Err(Error::DegenerateTime(t.value()));
        }
        Ok(eps_hat.map(|e| -e / s))
    }

    /// Inverse of [`eps_to_score`](Self::eps_to_score).
    pub fn score_to_eps(&self, score: &Tensor, t: TimePoint) -> Result<Tensor> {
        let s = self.sigma(t);
        if s <= 0.0 {
            return Err(Error::DegenerateTime(t.value()));
        }
        Ok(score.map(|v| -v * s))
    }

    /// Deterministic DDIM step from `t` down to `s` given the ε-prediction at `t`.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        eps_cond: &Tensor,
        t: TimePoint,
        s: TimePoint,
    ) -> Result<Tensor> {
        if s.value() >= t.value() {
            return Err(Error::InvalidArgument(format!(
                "ddim step requires s < t, got s={} t={}",
                s.value(),
                t.value()
            )));
        }
        let x_hat = self.tweedie(x_t, eps_cond, t)?;
        let (a_s, s_s) = self.alpha_sigma(s);
        Ok(x_hat.axpby(a_s, eps_cond, s_s))
    }

    /// Mean coefficient and standard deviation of the forward transition `s → t`.
    pub fn transition(&self, s: TimePoint, t: TimePoint) -> Result<(f64, f64)> {
        if t.value() <= s.value() {
            return Err(Error::InvalidArgument(format!(
                "renoise requires t > s, got s={} t={}",
                s.value(),
                t.value()
            )));
        }
        let (a_s, s_s) = self.alpha_sigma(s);
        let (a_t, s_t) = self.alpha_sigma(t);
        if a_s <= 0.0 {
            return Err(Error::DegenerateTime(s.value()));
        }
        let ratio = a_t / a_s;
        let var = s_t * s_t - ratio * ratio * s_s * s_s;
        // rounding can leave a tiny negative radicand
        if var < -1e-12 {
            return Err(Error::ScheduleInconsistency(var, s.value(), t.value()));
        }
        Ok((ratio, var.max(0.0).sqrt()))
    }

    /// Forward re-noise `x_s → x_t` with fresh Gaussian noise.
    pub fn renoise<R: Rng + ?Sized>(
        &self,
        x_s: &Tensor,
        s: TimePoint,
        t: TimePoint,
        rng: &mut R,
    ) -> Result<Tensor> {
        let (ratio, std) = self.transition(s, t)?;
        let eps = Tensor::randn(x_s.shape(), rng);
        Ok(x_s.axpby(ratio, &eps, std))
    }
}

/// Uniform grid of `num_steps` intervals over `[T_MIN, T_MAX]`, descending,
/// truncated to start at `t_init`.
pub fn step_grid(num_steps: usize, t_init: f64) -> Vec<TimePoint> {
    let start = TimePoint::clamped(t_init);
    let mut grid = vec![start];
    for k in 1..=num_steps {
        let t = TimePoint::clamped(1.0 - k as f64 / num_steps as f64);
        if t.value() < start.value() && t.value() < grid[grid.len() - 1].value() {
            grid.push(t);
        }
    }
    grid
}
