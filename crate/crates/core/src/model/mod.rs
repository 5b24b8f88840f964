//! ε-prediction score models.
//!
//! A [`ScoreModel`] predicts the noise injected into `x_t` and exposes the
//! vector-Jacobian product of its Tweedie estimate, which the guidance needs.
//! Two implementations exist: [`GaussianPrior`] (closed form, used as an exact
//! oracle) and [`NeuralDenoiser`] (a small trainable encoder–decoder).

mod checkpoint;
mod gaussian;
mod layers;
mod neural;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gaussian::GaussianPrior;
pub use neural::{Architecture, NeuralDenoiser};
pub use train::{epsilon_loss, train_denoiser, TrainConfig, TrainReport};

use crate::error::Result;
use crate::schedule::{NoiseSchedule, TimePoint};
use crate::tensor::Tensor;

/// A model evaluated at one `(x_t, t)` point, able to pull vectors back
/// through the Jacobian of its Tweedie estimate.
pub trait Linearization {
    /// The ε-prediction at the linearization point.
    fn eps(&self) -> &Tensor;

    /// `vᵀ·∂x̂_t/∂x_t` with `x̂_t = (x_t − σ_t·ε̂)/α_t` (unclipped).
    fn tweedie_vjp(&self, v: &Tensor) -> Result<Tensor>;
}

pub trait ScoreModel: Send + Sync {
    fn schedule(&self) -> NoiseSchedule;

    fn predict_eps(&self, x_t: &Tensor, t: TimePoint) -> Result<Tensor>;

    /// Evaluates the model at `(x_t, t)` keeping whatever state the VJP needs.
    fn linearize<'a>(&'a self, x_t: &Tensor, t: TimePoint)
        -> Result<Box<dyn Linearization + 'a>>;

    fn tweedie_vjp(&self, x_t: &Tensor, t: TimePoint, v: &Tensor) -> Result<Tensor> {
        self.linearize(x_t, t)?.tweedie_vjp(v)
    }
}
