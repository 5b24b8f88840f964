//! Sim-to-real translation by masked posterior sampling.
//!
//! A simulated range image `y` is noised up to `t_init`, then integrated back
//! to `t ≈ 0` with deterministic DDIM steps whose ε-prediction is conditioned
//! on `y` through masked pseudoinverse guidance. Each step is repeated
//! `resample_cycles` extra times, re-noising in between, to blend guided and
//! free regions. The result is finalized by copying the simulated range into
//! every pixel the sample kept as a valid return.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    masked_guidance, pigdm_gradient, progressive_mask, GuidanceConfig, MaskMode,
    MeasurementOperator, RaydropMask, RANGE,
};
use crate::lidar::{RangeImage, DROP_RANGE};
use crate::model::ScoreModel;
use crate::rng::stream;
use crate::schedule::{step_grid, NoiseSchedule, TimePoint};
use crate::tensor::Tensor;

/// Normalized value written into raydrop pixels of both channels.
pub const DROP_VALUE: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub t_init: f64,
    pub num_steps: usize,
    pub resample_cycles: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    /// Keep every intermediate state in [`TranslationResult::trajectory`].
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_init: 0.8,
            num_steps: 32,
            resample_cycles: 3,
            guidance: GuidanceConfig::default(),
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_init > 0.0 && self.t_init <= 1.0) {
            return Err(Error::InvalidArgument("t_init must lie in (0, 1]".into()));
        }
        if self.num_steps < 2 {
            return Err(Error::InvalidArgument("num_steps must be at least 2".into()));
        }
        self.guidance.validate()
    }
}

/// One reverse sub-step of the sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Index of the grid step this sub-step belongs to.
    pub step: usize,
    /// Harmonization cycle within the step (0 is the first reverse pass).
    pub cycle: usize,
    pub t: f64,
    pub s: f64,
    /// `‖m ⊙ (H†y − H†H x̂_t)‖` for the guided Tweedie estimate driving the update.
    pub residual_norm: f64,
    /// Fraction of pixels where guidance was active.
    pub mask_fill: f64,
    /// Whether the state was re-noised from `s` back to `t` after this sub-step.
    pub renoised: bool,
}

#[derive(Debug, Clone)]
pub struct TranslationResult {
    /// Generated sample at the end of the reverse process (normalized).
    pub x0: Tensor,
    /// Raydrop mask of `x0`.
    pub mask0: RaydropMask,
    /// Label-consistent output: simulated range where `mask0` is set,
    /// generated reflectance, and the drop value elsewhere.
    pub finalized: Tensor,
    pub diagnostics: Vec<StepDiagnostics>,
    /// States after every grid step, starting with the initialization.
    pub trajectory: Vec<Tensor>,
}

/// Noises the simulation input up to `t_init`.
pub fn initialize_from_sim<R: Rng + ?Sized>(
    y: &Tensor,
    t_init: TimePoint,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let eps = Tensor::randn(y.shape(), rng);
    schedule.forward_noise(y, t_init, &eps)
}

fn ensure_finite(x: &Tensor, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            step,
            what: "non-finite sampler state".into(),
        })
    }
}

fn stamp_step(err: Error, step: usize) -> Error {
    match err {
        Error::NumericFailure { what, .. } => Error::NumericFailure { step, what },
        other => other,
    }
}

/// Guided reverse step `t → s` refined by `resample_cycles` rounds of
/// re-noising back to `t` and stepping again.
#[allow(clippy::too_many_arguments)]
pub fn harmonized_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: TimePoint,
    s: TimePoint,
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &SamplerConfig,
    rng: &mut R,
    step: usize,
    diagnostics: &mut Vec<StepDiagnostics>,
) -> Result<Tensor> {
    if s.value() >= t.value() {
        return Err(Error::InvalidArgument("harmonized step requires s < t".into()));
    }
    let schedule = model.schedule();
    let mut x = x_t.clone();
    let mut cycle = 0;
    loop {
        let g = masked_guidance(&x, t, y, model, h, &cfg.guidance).map_err(|e| stamp_step(e, step))?;
        let x_hat_cond = schedule.tweedie(&x, &g.eps_cond, t)?;
        let residual_norm = masked_residual_norm(&x_hat_cond, y, h, &g.mask);
        let x_s = schedule.ddim_step(&x, &g.eps_cond, t, s)?;
        ensure_finite(&x_s, step)?;
        let renoised = cycle < cfg.resample_cycles;
        diagnostics.push(StepDiagnostics {
            step,
            cycle,
            t: t.value(),
            s: s.value(),
            residual_norm,
            mask_fill: g.mask.fill_ratio(),
            renoised,
        });
        if !renoised {
            return Ok(x_s);
        }
        x = schedule.renoise(&x_s, s, t, rng)?;
        cycle += 1;
    }
}

fn masked_residual_norm(x_hat: &Tensor, y: &Tensor, h: &MeasurementOperator, mask: &RaydropMask) -> f64 {
    let r = h.pinv_apply(y).axpby(1.0, &h.projector(x_hat), -1.0);
    let plane = r.plane();
    r.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.get(i % plane))
        .map(|(_, v)| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Copies `y`'s range into valid pixels of `mask` and keeps the generated
/// reflectance there; every other pixel becomes [`DROP_VALUE`].
pub fn finalize_with_mask(x0: &Tensor, y: &Tensor, mask: &RaydropMask) -> Result<Tensor> {
    x0.check_same_shape(y)?;
    if mask.height() != x0.height() || mask.width() != x0.width() {
        return Err(Error::ShapeMismatch {
            expected: vec![x0.height(), x0.width()],
            got: vec![mask.height(), mask.width()],
        });
    }
    let mut out = Tensor::full(x0.shape(), DROP_VALUE);
    for c in 0..x0.channels() {
        let src = if c == RANGE { y.channel(c) } else { x0.channel(c) };
        for (i, (o, &v)) in out.channel_mut(c).iter_mut().zip(src).enumerate() {
            if mask.get(i) {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// [`finalize_with_mask`] with the mask thresholded from `x0`.
pub fn finalize_sample(x0: &Tensor, y: &Tensor, eta: f64) -> Result<Tensor> {
    finalize_with_mask(x0, y, &progressive_mask(x0, eta))
}

/// Metric-domain output for a simulated scan: pixels kept by `mask0` carry
/// the simulated range verbatim and the generated reflectance; all others
/// are drops.
pub fn finalize_range_image(sim: &RangeImage, result: &TranslationResult) -> Result<RangeImage> {
    let intr = sim.intrinsics;
    let refl = result.finalized.channel(crate::guidance::REFLECTANCE);
    if result.mask0.height() != intr.height || result.mask0.width() != intr.width {
        return Err(Error::ShapeMismatch {
            expected: vec![intr.height, intr.width],
            got: vec![result.mask0.height(), result.mask0.width()],
        });
    }
    let mut out = RangeImage::empty(intr);
    for i in 0..intr.pixels() {
        if result.mask0.get(i) && !sim.is_drop(i) {
            out.range[i] = sim.range[i];
            out.reflectance[i] = ((refl[i] + 1.0) * 0.5).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Counts pixels of `out` that break label consistency with `sim` under
/// `mask`: a pixel must be a clean drop unless the mask keeps it and the
/// simulation has a return there, in which case the range must match exactly.
pub fn label_violations(sim: &RangeImage, mask: &RaydropMask, out: &RangeImage) -> usize {
    if sim.range.len() != out.range.len() || mask.bits().len() != out.range.len() {
        return out.range.len().max(1);
    }
    (0..out.range.len())
        .filter(|&i| {
            if mask.get(i) && !sim.is_drop(i) {
                out.range[i] != sim.range[i] || !(0.0..=1.0).contains(&out.reflectance[i])
            } else {
                out.range[i] != DROP_RANGE || out.reflectance[i] != 0.0
            }
        })
        .count()
}

/// Translates one normalized observation `y` (reflectance channel zeroed)
/// using the random stream `(cfg.seed, 0)`.
pub fn drum_translate(
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &SamplerConfig,
) -> Result<TranslationResult> {
    drum_translate_with_rng(y, model, h, cfg, &mut stream(cfg.seed, 0))
}

pub fn drum_translate_with_rng(
    y: &Tensor,
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TranslationResult> {
    cfg.validate()?;
    let schedule = model.schedule();
    let grid = step_grid(cfg.num_steps, cfg.t_init);
    let mut x = initialize_from_sim(y, grid[0], &schedule, rng)?;
    let mut trajectory = Vec::new();
    if cfg.record_trajectory {
        trajectory.push(x.clone());
    }
    let mut diagnostics = Vec::new();
    for (step, pair) in grid.windows(2).enumerate() {
        x = harmonized_step(&x, pair[0], pair[1], y, model, h, cfg, rng, step, &mut diagnostics)?;
        if cfg.record_trajectory {
            trajectory.push(x.clone());
        }
    }
    let mask0 = match cfg.guidance.mask {
        MaskMode::Progressive => progressive_mask(&x, cfg.guidance.eta),
        MaskMode::AllOnes => RaydropMask::ones(x.height(), x.width()),
    };
    let finalized = finalize_with_mask(&x, y, &mask0)?;
    Ok(TranslationResult {
        x0: x,
        mask0,
        finalized,
        diagnostics,
        trajectory,
    })
}

/// Translates a batch; sample `i` draws from stream `(cfg.seed, i)`.
/// Failures are reported per sample.
pub fn translate_batch(
    ys: &[Tensor],
    model: &dyn ScoreModel,
    h: &MeasurementOperator,
    cfg: &SamplerConfig,
) -> Vec<Result<TranslationResult>> {
    ys.par_iter()
        .enumerate()
        .map(|(i, y)| drum_translate_with_rng(y, model, h, cfg, &mut stream(cfg.seed, i as u64)))
        .collect()
}

/// Reference samplers used to decompose the method into its parts.
pub mod baselines {
    use super::*;

    /// Unguided DDIM from the noised input (SDEdit). Returns the trajectory,
    /// initialization first.
    pub fn sdedit(
        y: &Tensor,
        model: &dyn ScoreModel,
        t_init: f64,
        num_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let schedule = model.schedule();
        let grid = step_grid(num_steps, t_init);
        let mut x = initialize_from_sim(y, grid[0], &schedule, rng)?;
        let mut traj = vec![x.clone()];
        for pair in grid.windows(2) {
            let eps = model.predict_eps(&x, pair[0])?;
            x = schedule.ddim_step(&x, &eps, pair[0], pair[1])?;
            traj.push(x.clone());
        }
        Ok(traj)
    }

    /// Unmasked pseudoinverse guidance from pure noise (`t_init = 1`).
    pub fn pigdm(
        y: &Tensor,
        model: &dyn ScoreModel,
        h: &MeasurementOperator,
        guidance: &GuidanceConfig,
        num_steps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let schedule = model.schedule();
        let grid = step_grid(num_steps, 1.0);
        let mut x = initialize_from_sim(y, grid[0], &schedule, rng)?;
        let mut traj = vec![x.clone()];
        for pair in grid.windows(2) {
            let t = pair[0];
            let eps = model.predict_eps(&x, t)?;
            let g = pigdm_gradient(&x, t, y, model, h, guidance)?;
            let sigma = schedule.sigma(t);
            let eps_cond = eps.zip_map(&g, |e, gi| e - sigma * gi);
            x = schedule.ddim_step(&x, &eps_cond, t, pair[1])?;
            traj.push(x.clone());
        }
        Ok(traj)
    }
}
