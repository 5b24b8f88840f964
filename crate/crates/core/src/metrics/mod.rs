//! Fréchet distances between Gaussian summaries of feature sets, raydrop
//! statistics, and a small handcrafted range-image feature extractor.

mod features;

pub use features::{builtin_features, read_features, write_features, FEATURE_DIM, FEATURE_MAGIC};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lidar::RangeImage;

const REGULARIZE_BELOW: f64 = 1e-10;
const REGULARIZATION: f64 = 1e-6;

/// `N` feature vectors of dimension `D`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    data: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(d, r.len()));
        }
        Ok(FeatureSet {
            data: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
        })
    }

    pub fn from_images(images: &[RangeImage]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = images.par_iter().map(builtin_features).collect();
        Self::new(&rows)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch(mean.len(), cov.nrows()));
        }
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased, symmetrized sample covariance.
pub fn fit_gaussian(fs: &FeatureSet) -> Result<GaussianStats> {
    let n = fs.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 feature vectors, got {n}"
        )));
    }
    let mean: DVector<f64> = fs.data.row_mean().transpose();
    let mut centered = fs.data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or_else(|| Error::NumericFailure {
        step: 0,
        what: "symmetric eigensolver did not converge".into(),
    })
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`.
///
/// Both covariances receive `1e-6·I` when either has an eigenvalue below
/// `1e-10`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let d = a.dim();
    let ea = eigen(a.cov.clone())?;
    let min_b = eigen(b.cov.clone())?.eigenvalues.min();
    let (ea, cov_a, cov_b) = if ea.eigenvalues.min() < REGULARIZE_BELOW || min_b < REGULARIZE_BELOW {
        let reg = DMatrix::identity(d, d) * REGULARIZATION;
        let cov_a = &a.cov + &reg;
        (eigen(cov_a.clone())?, cov_a, &b.cov + &reg)
    } else {
        (ea, a.cov.clone(), b.cov.clone())
    };
    let sqrt_vals = ea.eigenvalues.map(|l| l.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = eigen(inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dmu = (&a.mean - &b.mean).norm_squared();
    Ok((dmu + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Fraction of dropped pixels.
pub fn raydrop_ratio(img: &RangeImage) -> f64 {
    img.raydrop_ratio()
}

/// Mean drop ratio over a set of images.
pub fn mean_raydrop_ratio(images: &[RangeImage]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    images.iter().map(raydrop_ratio).sum::<f64>() / images.len() as f64
}
