//! LiDAR data model: sensor intrinsics, two-channel range images, point
//! clouds, and the normalization map into the diffusion domain `[-1, 1]`.

mod io;
mod projection;
mod toy;

pub use io::{
    read_kitti_bin, read_range_image, write_kitti_bin, write_range_image, RANGE_IMAGE_MAGIC,
};
pub use projection::{project, unproject};
pub use toy::{gen_toy_scene, Domain, ToySceneConfig, SENSOR_HEIGHT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Metric range stored in raydrop pixels.
pub const DROP_RANGE: f64 = -1.0;
/// Normalized range at or below which a pixel decodes as a drop.
pub const DEFAULT_DROP_THRESHOLD: f64 = -0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorIntrinsics {
    /// Beam count (rows).
    pub height: usize,
    /// Azimuth bins (columns).
    pub width: usize,
    /// Elevation of the top edge of the first row, degrees.
    pub fov_up: f64,
    /// Elevation of the bottom edge of the last row, degrees.
    pub fov_down: f64,
    /// Meters.
    pub max_range: f64,
}

impl Default for SensorIntrinsics {
    /// The 32×128 desk-scale sensor used for toy scenes.
    fn default() -> Self {
        SensorIntrinsics {
            height: 32,
            width: 128,
            fov_up: 3.0,
            fov_down: -25.0,
            max_range: 50.0,
        }
    }
}

impl SensorIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::InvalidArgument("sensor needs at least 4×4 pixels".into()));
        }
        if !(self.fov_up > self.fov_down) || self.fov_up > 90.0 || self.fov_down < -90.0 {
            return Err(Error::InvalidArgument("need -90 ≤ fov_down < fov_up ≤ 90".into()));
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(Error::InvalidArgument("max_range must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Elevation of row `v`'s center, radians.
    pub fn row_elevation(&self, v: usize) -> f64 {
        let deg = self.fov_up - (v as f64 + 0.5) * (self.fov_up - self.fov_down) / self.height as f64;
        deg.to_radians()
    }

    /// Azimuth of column `u`'s center, radians in `(-π, π)`.
    pub fn column_azimuth(&self, u: usize) -> f64 {
        std::f64::consts::PI * (1.0 - (2 * u + 1) as f64 / self.width as f64)
    }

    /// Angular bin sizes `(azimuth, elevation)` in radians.
    pub fn bin_size(&self) -> (f64, f64) {
        (
            2.0 * std::f64::consts::PI / self.width as f64,
            ((self.fov_up - self.fov_down) / self.height as f64).to_radians(),
        )
    }
}

/// Equirectangular range and reflectance measurements, row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub intrinsics: SensorIntrinsics,
    /// Meters, [`DROP_RANGE`] where no return was detected.
    pub range: Vec<f64>,
    /// In `[0, 1]`, zero at drops.
    pub reflectance: Vec<f64>,
}

impl RangeImage {
    /// Image with every pixel dropped.
    pub fn empty(intrinsics: SensorIntrinsics) -> Self {
        RangeImage {
            intrinsics,
            range: vec![DROP_RANGE; intrinsics.pixels()],
            reflectance: vec![0.0; intrinsics.pixels()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.intrinsics.pixels();
        if self.range.len() != n || self.reflectance.len() != n {
            return Err(Error::DimensionMismatch(n, self.range.len().min(self.reflectance.len())));
        }
        let max = self.intrinsics.max_range;
        if let Some(r) = self
            .range
            .iter()
            .find(|&&r| r != DROP_RANGE && !(r > 0.0 && r <= max))
        {
            return Err(Error::InvalidArgument(format!("range {r} outside (0, {max}]")));
        }
        if self.reflectance.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("reflectance outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_drop(&self, i: usize) -> bool {
        self.range[i] == DROP_RANGE
    }

    /// Fraction of pixels without a return.
    pub fn raydrop_ratio(&self) -> f64 {
        let drops = (0..self.range.len()).filter(|&i| self.is_drop(i)).count();
        drops as f64 / self.range.len().max(1) as f64
    }

    /// Maps into the `2×H×W` diffusion domain.
    ///
    /// Range uses `2·ln(r+1)/ln(max_range+1) − 1`, reflectance `2v − 1`;
    /// drops map to `-1` in both channels.
    pub fn normalize(&self) -> Tensor {
        let intr = &self.intrinsics;
        let log_max = (intr.max_range + 1.0).ln();
        let mut data = Vec::with_capacity(2 * intr.pixels());
        data.extend(self.range.iter().map(|&r| {
            if r == DROP_RANGE {
                -1.0
            } else {
                2.0 * (r + 1.0).ln() / log_max - 1.0
            }
        }));
        data.extend(
            self.reflectance
                .iter()
                .zip(&self.range)
                .map(|(&v, &r)| if r == DROP_RANGE { -1.0 } else { 2.0 * v - 1.0 }),
        );
        Tensor::from_vec([2, intr.height, intr.width], data).expect("sized from intrinsics")
    }

    /// Inverse of [`normalize`](Self::normalize) with the default drop threshold.
    pub fn denormalize(x: &Tensor, intrinsics: SensorIntrinsics) -> Result<RangeImage> {
        Self::denormalize_with(x, intrinsics, DEFAULT_DROP_THRESHOLD)
    }

    /// Range values `≤ drop_threshold` become drops; others are clamped into
    /// `(0, max_range]` and reflectance into `[0, 1]`.
    pub fn denormalize_with(x: &Tensor, intrinsics: SensorIntrinsics, drop_threshold: f64) -> Result<RangeImage> {
        if x.shape() != [2, intrinsics.height, intrinsics.width] {
            return Err(Error::ShapeMismatch {
                expected: vec![2, intrinsics.height, intrinsics.width],
                got: x.shape().to_vec(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NumericFailure {
                step: 0,
                what: "cannot denormalize non-finite values".into(),
            });
        }
        let log_max = (intrinsics.max_range + 1.0).ln();
        let mut range = Vec::with_capacity(intrinsics.pixels());
        let mut reflectance = Vec::with_capacity(intrinsics.pixels());
        for (&r, &v) in x.channel(0).iter().zip(x.channel(1)) {
            if r <= drop_threshold {
                range.push(DROP_RANGE);
                reflectance.push(0.0);
            } else {
                let m = ((r + 1.0) * 0.5 * log_max).exp() - 1.0;
                range.push(m.clamp(f64::MIN_POSITIVE, intrinsics.max_range));
                reflectance.push(((v + 1.0) * 0.5).clamp(0.0, 1.0));
            }
        }
        Ok(RangeImage {
            intrinsics,
            range,
            reflectance,
        })
    }
}

/// Points `(x, y, z, reflectance)` in the sensor frame, meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> SensorIntrinsics {
        SensorIntrinsics::default()
    }

    #[test]
    fn normalize_endpoints() {
        let i = intr();
        let mut img = RangeImage::empty(i);
        img.range[0] = i.max_range;
        img.reflectance[0] = 1.0;
        // ln(r+1) = 0.5·ln(max+1)  ⇒  r = sqrt(max+1) − 1
        img.range[1] = (i.max_range + 1.0).sqrt() - 1.0;
        let x = img.normalize();
        assert!((x.get(0, 0, 0) - 1.0).abs() < 1e-12);
        assert!(x.get(0, 0, 1).abs() < 1e-12);
        assert_eq!(x.get(0, 0, 2), -1.0);
        assert_eq!(x.get(1, 0, 2), -1.0);
        assert_eq!(x.get(1, 0, 0), 1.0);
    }

    #[test]
    fn denormalize_endpoints() {
        let i = intr();
        let mut x = Tensor::full([2, i.height, i.width], 1.0);
        x.set(0, 0, 0, -1.0);
        let img = RangeImage::denormalize(&x, i).unwrap();
        assert!(img.is_drop(0));
        assert_eq!(img.reflectance[0], 0.0);
        assert!((img.range[1] - i.max_range).abs() < 1e-6);
        assert!(RangeImage::denormalize(&Tensor::zeros([2, 3, 3]), i).is_err());
    }

    #[test]
    fn validation() {
        let mut img = RangeImage::empty(intr());
        assert!(img.validate().is_ok());
        img.range[3] = 0.0;
        assert!(img.validate().is_err());
        img.range[3] = 51.0;
        assert!(img.validate().is_err());
        img.range[3] = 10.0;
        img.reflectance[3] = 1.5;
        assert!(img.validate().is_err());
        let bad = SensorIntrinsics { fov_up: -30.0, ..intr() };
        assert!(bad.validate().is_err());
        let tiny = SensorIntrinsics { height: 3, ..intr() };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn drop_ratio() {
        let mut img = RangeImage::empty(intr());
        assert_eq!(img.raydrop_ratio(), 1.0);
        img.range.iter_mut().for_each(|r| *r = 5.0);
        assert_eq!(img.raydrop_ratio(), 0.0);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(ranges in prop::collection::vec(0.05f64..=50.0, 16), refl in prop::collection::vec(0.0f64..=1.0, 16)) {
            let i = SensorIntrinsics { height: 4, width: 4, ..intr() };
            let img = RangeImage { intrinsics: i, range: ranges, reflectance: refl };
            let back = RangeImage::denormalize(&img.normalize(), i).unwrap();
            for (a, b) in img.range.iter().zip(&back.range) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in img.reflectance.iter().zip(&back.reflectance) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_strictly_monotone(a in 1e-3f64..50.0, b in 1e-3f64..50.0) {
            prop_assume!(a != b);
            let i = SensorIntrinsics { height: 4, width: 4, ..intr() };
            let mut img = RangeImage::empty(i);
            img.range[0] = a;
            img.range[1] = b;
            let x = img.normalize();
            prop_assert_eq!(a < b, x.get(0, 0, 0) < x.get(0, 0, 1));
        }
    }
}
