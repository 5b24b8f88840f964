//! Spherical projection between point clouds and range images.

use std::f64::consts::PI;

use super::{PointCloud, RangeImage, SensorIntrinsics};

/// Pixel `(row, column)` hit by direction `(x, y, z)` at distance `r`.
fn pixel_of(x: f64, y: f64, z: f64, r: f64, intr: &SensorIntrinsics) -> (usize, usize) {
    let (w, h) = (intr.width as f64, intr.height as f64);
    let theta = y.atan2(x);
    let phi = (z / r).clamp(-1.0, 1.0).asin().to_degrees();
    let u = (w * (1.0 - (theta + PI) / (2.0 * PI))).floor();
    let u = (u.rem_euclid(w)) as usize % intr.width;
    let v = (h * (intr.fov_up - phi) / (intr.fov_up - intr.fov_down)).floor();
    let v = v.clamp(0.0, h - 1.0) as usize;
    (v, u)
}

/// Nearest return wins when several points share a pixel. Points with
/// `r ∉ (0, max_range]` are discarded; unhit pixels are drops.
pub fn project(pc: &PointCloud, intr: &SensorIntrinsics) -> RangeImage {
    let mut img = RangeImage::empty(*intr);
    for &[x, y, z, refl] in &pc.points {
        let r = (x * x + y * y + z * z).sqrt();
        if !(r > 0.0 && r <= intr.max_range) || !r.is_finite() {
            continue;
        }
        let (v, u) = pixel_of(x, y, z, r, intr);
        let i = v * intr.width + u;
        if img.is_drop(i) || r < img.range[i] {
            img.range[i] = r;
            img.reflectance[i] = refl.clamp(0.0, 1.0);
        }
    }
    img
}

/// One point per valid pixel, placed along the pixel-center direction.
pub fn unproject(img: &RangeImage) -> PointCloud {
    let intr = &img.intrinsics;
    let mut points = Vec::new();
    for v in 0..intr.height {
        let phi = intr.row_elevation(v);
        let (sp, cp) = phi.sin_cos();
        for u in 0..intr.width {
            let i = v * intr.width + u;
            if img.is_drop(i) {
                continue;
            }
            let r = img.range[i];
            let (st, ct) = intr.column_azimuth(u).sin_cos();
            points.push([r * cp * ct, r * cp * st, r * sp, img.reflectance[i]]);
        }
    }
    PointCloud { points }
}
