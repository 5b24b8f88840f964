//! Conditional-score machinery: the reflectance-zeroing measurement operator,
//! pseudoinverse guidance, and the raydrop-aware progressive mask that gates it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linearization, ScoreModel};
use crate::schedule::{NoiseSchedule, TimePoint};
use crate::tensor::Tensor;

/// Channel index of the range channel.
pub const RANGE: usize = 0;
/// Channel index of the reflectance channel.
pub const REFLECTANCE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasurementKind {
    #[default]
    ZeroReflectance,
}

/// Linear corruption `H` that keeps the range channel and zeroes reflectance.
///
/// As a matrix `H` is a diagonal 0/1 selection, so `H† = H` and the
/// projector `H†H` equals `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MeasurementOperator {
    pub kind: MeasurementKind,
}

impl MeasurementOperator {
    pub fn zero_reflectance() -> Self {
        MeasurementOperator {
            kind: MeasurementKind::ZeroReflectance,
        }
    }

    fn select(&self, x: &Tensor) -> Tensor {
        match self.kind {
            MeasurementKind::ZeroReflectance => {
                let mut out = x.clone();
                for c in 0..out.channels() {
                    if c != RANGE {
                        out.channel_mut(c).fill(0.0);
                    }
                }
                out
            }
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.select(x)
    }

    pub fn pinv_apply(&self, y: &Tensor) -> Tensor {
        self.select(y)
    }

    /// `H†H x`
    pub fn projector(&self, x: &Tensor) -> Tensor {
        self.pinv_apply(&self.apply(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Reverse-mode product through the model.
    #[default]
    ExactVjp,
    /// `∂x̂/∂x ≈ I/α_t`.
    IdentityApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Threshold the Tweedie range channel at every step.
    #[default]
    Progressive,
    /// Guide every pixel (unmasked pseudoinverse guidance).
    AllOnes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Threshold on the normalized Tweedie range; pixels at or below are raydrop.
    pub eta: f64,
    pub jacobian_mode: JacobianMode,
    pub guidance_scale: f64,
    pub mask: MaskMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: -0.3,
            jacobian_mode: JacobianMode::ExactVjp,
            guidance_scale: 1.0,
            mask: MaskMode::Progressive,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::InvalidArgument("guidance_scale must be ≥ 0".into()));
        }
        if !(-1.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument("eta must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Binary `H×W` mask broadcast over channels; `true` marks a valid return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaydropMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl RaydropMask {
    pub fn ones(height: usize, width: usize) -> Self {
        RaydropMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch(height * width, bits.len()));
        }
        Ok(RaydropMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Fraction of pixels marked valid.
    pub fn fill_ratio(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len().max(1) as f64
    }

    fn check_shape(&self, x: &Tensor) -> Result<()> {
        if x.height() != self.height || x.width() != self.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                got: vec![x.height(), x.width()],
            });
        }
        Ok(())
    }
}

/// `r_t = sqrt(σ_t²/(α_t² + σ_t²))`
pub fn r_schedule(schedule: &NoiseSchedule, t: TimePoint) -> f64 {
    let (a, s) = schedule.alpha_sigma(t);
    (s * s / (a * a + s * s)).sqrt()
}

/// `m_i = 1` iff the range channel of `x_hat` exceeds `eta` (strictly).
pub fn progressive_mask(x_hat: &Tensor, eta: f64) -> RaydropMask {
    let bits = x_hat.channel(RANGE).iter().map(|&v| v > eta).collect();
    RaydropMask {
        height: x_hat.height(),
        width: x_hat.width(),
        bits,
    }
}

/// Pieces of one guided evaluation, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct GuidedEps {
    /// Unconditional ε-prediction.
    pub eps: Tensor,
    /// Clipped Tweedie estimate under the unconditional ε.
    pub x_hat: Tensor,
    pub mask: RaydropMask,
    /// Scaled likelihood gradient (before masking); zero when the scale is 0.
    pub gradient: Tensor,
    /// `ε̂ − σ_t·(m ⊙ gradient)`
    pub eps_cond: Tensor,
}

fn check_observation(x_t: &Tensor, y: &Tensor) -> Result<()> {
    x_t.check_same_shape(y)?;
    if x_t.channels() <= REFLECTANCE {
        return Err(Error::InvalidArgument(
            "guidance needs a range and a reflectance channel".into(),
        ));
    }
    Ok(())
}

/// Scaled pseudoinverse-guidance gradient at a linearized model.
#[allow(clippy::too_many_arguments)]
fn gradient_at(
    lin: &dyn Linearization,
    x_hat: &Tensor,
    t: TimePoint,
    y: &Tensor,
    h: &MeasurementOperator,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let r = r_schedule(schedule, t);
    if r <= 0.0 {
        return Err(Error::DegenerateTime(t.value()));
    }
    let residual = h.pinv_apply(y).axpby(1.0, &h.projector(x_hat), -1.0);
    let pulled = match cfg.jacobian_mode {
        JacobianMode::ExactVjp => lin.tweedie_vjp(&residual)?,
        JacobianMode::IdentityApprox => {
            let a = schedule.alpha(t);
            if a <= 0.0 {
                return Err(Error::DegenerateTime(t.value()));
            }
            residual.scale(1.0 / a)
        }
    };
    Ok(pulled.scale(cfg.guidance_scale / (r * r)))
}

/// `guidance_scale · r_t⁻² · [(H†y − H†H x̂_t)ᵀ ∂x̂_t/∂x_t]ᵀ`
pub fn pigdm_gradient(
    x_t: &Tensor,
    t: TimePoint,
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    check_observation(x_t, y)?;
    let schedule = model.schedule();
    if r_schedule(&schedule, t) <= 0.0 {
        return Err(Error::DegenerateTime(t.value()));
    }
    let lin = model.linearize(x_t, t)?;
    let x_hat = schedule.tweedie(x_t, lin.eps(), t)?;
    gradient_at(lin.as_ref(), &x_hat, t, y, h, cfg, &schedule)
}

/// Full guided evaluation: ε̂, Tweedie estimate, mask, gradient and the
/// masked conditional ε.
pub fn masked_guidance(
    x_t: &Tensor,
    t: TimePoint,
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &GuidanceConfig,
) -> Result<GuidedEps> {
    check_observation(x_t, y)?;
    let schedule = model.schedule();
    let lin = model.linearize(x_t, t)?;
    let eps = lin.eps().clone();
    let x_hat = schedule.tweedie(x_t, &eps, t)?;
    let mask = match cfg.mask {
        MaskMode::Progressive => progressive_mask(&x_hat, cfg.eta),
        MaskMode::AllOnes => RaydropMask::ones(x_t.height(), x_t.width()),
    };
    if cfg.guidance_scale == 0.0 {
        return Ok(GuidedEps {
            eps_cond: eps.clone(),
            gradient: Tensor::zeros(x_t.shape()),
            eps,
            x_hat,
            mask,
        });
    }
    let gradient = gradient_at(lin.as_ref(), &x_hat, t, y, h, cfg, &schedule)?;
    let sigma = schedule.sigma(t);
    let eps_cond = apply_masked(&eps, &gradient, &mask, sigma)?;
    Ok(GuidedEps {
        eps,
        x_hat,
        mask,
        gradient,
        eps_cond,
    })
}

/// `ε̂ − σ·(m ⊙ g)`; masked-out pixels keep `ε̂` untouched.
fn apply_masked(eps: &Tensor, grad: &Tensor, mask: &RaydropMask, sigma: f64) -> Result<Tensor> {
    mask.check_shape(eps)?;
    let plane = eps.plane();
    let mut out = eps.clone();
    for (i, (o, g)) in out.data_mut().iter_mut().zip(grad.data()).enumerate() {
        if mask.get(i % plane) {
            *o -= sigma * g;
        }
    }
    Ok(out)
}

/// Masked conditional ε-prediction (see [`masked_guidance`]).
pub fn masked_conditional_eps(
    x_t: &Tensor,
    t: TimePoint,
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    Ok(masked_guidance(x_t, t, y, model, h, cfg)?.eps_cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianPrior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tp(t: f64) -> TimePoint {
        TimePoint::new(t).unwrap()
    }

    fn prior() -> GaussianPrior {
        GaussianPrior::new(
            Tensor::from_vec([2, 1, 3], vec![0.2, 0.5, -0.1, 0.0, 0.3, -0.4]).unwrap(),
            Tensor::from_vec([2, 1, 3], vec![0.1, 0.2, 0.05, 0.3, 0.1, 0.2]).unwrap(),
            NoiseSchedule::cosine(),
        )
        .unwrap()
    }

    #[test]
    fn operator_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = MeasurementOperator::zero_reflectance();
        for _ in 0..10 {
            let x = Tensor::randn([2, 3, 4], &mut rng);
            let hx = h.apply(&x);
            assert_eq!(h.apply(&hx), hx);
            let p = h.projector(&x);
            assert_eq!(p.channel(RANGE), x.channel(RANGE));
            assert!(p.channel(REFLECTANCE).iter().all(|&v| v == 0.0));
            assert_eq!(h.projector(&p), p);
            let z = Tensor::randn([2, 3, 4], &mut rng);
            // symmetric: <Px, z> = <x, Pz>
            assert!((p.dot(&z) - x.dot(&h.projector(&z))).abs() < 1e-12);
            let yp = h.pinv_apply(&x);
            assert_eq!(h.pinv_apply(&h.apply(&yp)), yp);
        }
    }

    #[test]
    fn r_schedule_values() {
        let s = NoiseSchedule::cosine();
        assert_eq!(r_schedule(&s, tp(0.0)), 0.0);
        assert!((r_schedule(&s, tp(1.0)) - 1.0).abs() < 1e-15);
        assert!((r_schedule(&s, tp(0.5)) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn mask_threshold_is_strict() {
        let x = Tensor::from_vec([2, 1, 3], vec![-0.5, -0.3, 0.0, 9.0, 9.0, 9.0]).unwrap();
        let m = progressive_mask(&x, -0.3);
        assert_eq!(m.bits(), &[false, false, true]);
        assert!(progressive_mask(&Tensor::full([2, 2, 2], 1.0), -0.3).bits().iter().all(|&b| b));
        assert!(progressive_mask(&Tensor::full([2, 2, 2], -1.0), -0.3).bits().iter().all(|&b| !b));
    }

    #[test]
    fn gradient_vanishes_when_observation_is_met() {
        let p = prior();
        let h = MeasurementOperator::zero_reflectance();
        let t = tp(0.4);
        let x_t = Tensor::from_vec([2, 1, 3], vec![0.1, 0.4, 0.0, 0.2, -0.2, 0.3]).unwrap();
        let eps = p.predict_eps(&x_t, t).unwrap();
        let x_hat = p.schedule().tweedie(&x_t, &eps, t).unwrap();
        let y = h.apply(&x_hat);
        let g = pigdm_gradient(&x_t, t, &y, &p, &h, &GuidanceConfig::default()).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn gradient_gate_and_linearity() {
        let p = prior();
        let h = MeasurementOperator::zero_reflectance();
        let t = tp(0.3);
        let x_t = Tensor::from_vec([2, 1, 3], vec![0.1, 0.4, 0.0, 0.2, -0.2, 0.3]).unwrap();
        let y = Tensor::from_vec([2, 1, 3], vec![0.5, -0.5, 0.7, 0.0, 0.0, 0.0]).unwrap();
        let cfg = |k| GuidanceConfig {
            guidance_scale: k,
            ..GuidanceConfig::default()
        };
        assert_eq!(pigdm_gradient(&x_t, t, &y, &p, &h, &cfg(0.0)).unwrap().norm(), 0.0);
        let g1 = pigdm_gradient(&x_t, t, &y, &p, &h, &cfg(1.0)).unwrap();
        let g3 = pigdm_gradient(&x_t, t, &y, &p, &h, &cfg(3.0)).unwrap();
        assert!(g3.max_abs_diff(&g1.scale(3.0)) < 1e-12);
        assert!(matches!(
            pigdm_gradient(&x_t, tp(0.0), &y, &p, &h, &cfg(1.0)),
            Err(Error::DegenerateTime(_))
        ));
    }

    #[test]
    fn identity_mode_differs_by_known_factor() {
        // exact Jacobian is ατ²/(α²τ²+σ²); identity mode uses 1/α
        let p = prior();
        let h = MeasurementOperator::zero_reflectance();
        let t = tp(0.35);
        let x_t = Tensor::from_vec([2, 1, 3], vec![0.1, 0.4, 0.0, 0.2, -0.2, 0.3]).unwrap();
        let y = Tensor::from_vec([2, 1, 3], vec![0.5, -0.5, 0.7, 0.0, 0.0, 0.0]).unwrap();
        let exact = pigdm_gradient(&x_t, t, &y, &p, &h, &GuidanceConfig::default()).unwrap();
        let approx = pigdm_gradient(
            &x_t,
            t,
            &y,
            &p,
            &h,
            &GuidanceConfig {
                jacobian_mode: JacobianMode::IdentityApprox,
                ..GuidanceConfig::default()
            },
        )
        .unwrap();
        let (a, s) = p.schedule().alpha_sigma(t);
        for i in 0..3 {
            let tau2 = p.tau2().data()[i];
            let factor = (a * tau2 / (a * a * tau2 + s * s)) * a;
            assert!((exact.data()[i] - factor * approx.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_modes_reduce_correctly() {
        let p = prior();
        let h = MeasurementOperator::zero_reflectance();
        let t = tp(0.5);
        let y = Tensor::from_vec([2, 1, 3], vec![0.5, -0.5, 0.7, 0.0, 0.0, 0.0]).unwrap();
        let x_t = Tensor::from_vec([2, 1, 3], vec![0.3, -5.0, 0.6, 0.1, 0.1, 0.1]).unwrap();
        let cfg = GuidanceConfig::default();
        let g = masked_guidance(&x_t, t, &y, &p, &h, &cfg).unwrap();
        // second pixel's Tweedie range is below eta
        assert_eq!(g.mask.bits(), &[true, false, true]);
        let plane = 3;
        for i in 0..6 {
            if !g.mask.get(i % plane) {
                assert_eq!(g.eps_cond.data()[i].to_bits(), g.eps.data()[i].to_bits());
            }
        }
        let ones = masked_guidance(
            &x_t,
            t,
            &y,
            &p,
            &h,
            &GuidanceConfig {
                mask: MaskMode::AllOnes,
                ..cfg
            },
        )
        .unwrap();
        let sigma = p.schedule().sigma(t);
        let unmasked = ones.eps.axpby(1.0, &ones.gradient, -sigma);
        assert_eq!(ones.eps_cond, unmasked);
    }
}
