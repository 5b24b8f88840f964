use crate::error::{Error, Result};
use crate::model::{Linearization, ScoreModel};
use crate::schedule::{NoiseSchedule, TimePoint};
use crate::tensor::Tensor;

/// Diagonal Gaussian data distribution `N(mu, diag(tau2))`.
///
/// Every quantity the sampler needs has a closed form, so this model is the
/// reference against which the sampler and guidance are checked.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mu: Tensor,
    tau2: Tensor,
    schedule: NoiseSchedule,
}

impl GaussianPrior {
    pub fn new(mu: Tensor, tau2: Tensor, schedule: NoiseSchedule) -> Result<Self> {
        mu.check_same_shape(&tau2)?;
        if tau2.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "prior variance must be positive and finite".into(),
            ));
        }
        Ok(GaussianPrior { mu, tau2, schedule })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn tau2(&self) -> &Tensor {
        &self.tau2
    }

    /// Exact posterior mean `E[x_0 | x_t] = (α τ² x_t + σ² μ)/(α² τ² + σ²)`.
    pub fn posterior_mean(&self, x_t: &Tensor, t: TimePoint) -> Result<Tensor> {
        self.mu.check_same_shape(x_t)?;
        let (a, s) = self.schedule.alpha_sigma(t);
        let data = x_t
            .data()
            .iter()
            .zip(self.mu.data())
            .zip(self.tau2.data())
            .map(|((&x, &m), &v)| (a * v * x + s * s * m) / (a * a * v + s * s))
            .collect();
        Tensor::from_vec(x_t.shape(), data)
    }

    /// Diagonal of `∂x̂_t/∂x_t`.
    pub fn tweedie_jacobian(&self, t: TimePoint) -> Tensor {
        let (a, s) = self.schedule.alpha_sigma(t);
        self.tau2.map(|v| a * v / (a * a * v + s * s))
    }
}

struct GaussianLinearization {
    eps: Tensor,
    jacobian: Tensor,
}

impl Linearization for GaussianLinearization {
    fn eps(&self) -> &Tensor {
        &self.eps
    }

    fn tweedie_vjp(&self, v: &Tensor) -> Result<Tensor> {
        self.jacobian.check_same_shape(v)?;
        Ok(v.zip_map(&self.jacobian, |a, b| a * b))
    }
}

impl ScoreModel for GaussianPrior {
    fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }

    fn predict_eps(&self, x_t: &Tensor, t: TimePoint) -> Result<Tensor> {
        self.mu.check_same_shape(x_t)?;
        let (a, s) = self.schedule.alpha_sigma(t);
        let data = x_t
            .data()
            .iter()
            .zip(self.mu.data())
            .zip(self.tau2.data())
            .map(|((&x, &m), &v)| s * (x - a * m) / (a * a * v + s * s))
            .collect();
        Tensor::from_vec(x_t.shape(), data)
    }

    fn linearize<'a>(
        &'a self,
        x_t: &Tensor,
        t: TimePoint,
    ) -> Result<Box<dyn Linearization + 'a>> {
        Ok(Box::new(GaussianLinearization {
            eps: self.predict_eps(x_t, t)?,
            jacobian: self.tweedie_jacobian(t),
        }))
    }
}
