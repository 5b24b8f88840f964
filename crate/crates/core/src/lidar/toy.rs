//! Procedural toy scenes: a ground plane, axis-aligned boxes, and a distant
//! backdrop sphere, raycast from a sensor mounted above the ground.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{RangeImage, SensorIntrinsics, DROP_RANGE};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Sensor height above the ground plane, meters.
pub const SENSOR_HEIGHT: f64 = 1.73;
/// Backdrop radius as a fraction of `max_range`.
const BACKDROP_FRACTION: f64 = 0.9;
/// Incidence cosine below which a return counts as grazing.
const GRAZING_COS: f64 = 0.1;
const GROUND_ALBEDO: f64 = 0.45;
const BACKDROP_ALBEDO: f64 = 0.3;
const GLASS_ALBEDO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Sim,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySceneConfig {
    pub domain: Domain,
    pub n_boxes: usize,
    pub drop_base: f64,
    pub drop_glass: f64,
    /// Probability that a box is glass.
    pub glass_fraction: f64,
    pub seed: u64,
}

impl Default for ToySceneConfig {
    fn default() -> Self {
        ToySceneConfig {
            domain: Domain::Real,
            n_boxes: 6,
            drop_base: 0.05,
            drop_glass: 0.6,
            glass_fraction: 0.3,
            seed: 0,
        }
    }
}

impl ToySceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("drop_base", self.drop_base),
            ("drop_glass", self.drop_glass),
            ("glass_fraction", self.glass_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Box3 {
    lo: [f64; 3],
    hi: [f64; 3],
    albedo: f64,
    glass: bool,
}

struct Hit {
    t: f64,
    cos: f64,
    albedo: f64,
    glass: bool,
}

impl Box3 {
    /// Slab test for a ray from the origin; the origin is never inside.
    fn intersect(&self, d: [f64; 3]) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if self.lo[k] > 0.0 || self.hi[k] < 0.0 {
                    return None;
                }
                continue;
            }
            let (a, b) = (self.lo[k] / d[k], self.hi[k] / d[k]);
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = k;
            }
            t1 = t1.min(far);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }
}

fn random_boxes(cfg: &ToySceneConfig, rng: &mut impl RngExt) -> Vec<Box3> {
    (0..cfg.n_boxes)
        .map(|_| {
            let dist = rng.random_range(6.0..30.0);
            let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (cx, cy) = (dist * az.cos(), dist * az.sin());
            let (hx, hy) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
            let top = rng.random_range(1.0..4.0) - SENSOR_HEIGHT;
            let glass = rng.random_bool(cfg.glass_fraction);
            let albedo = if glass { GLASS_ALBEDO } else { rng.random_range(0.2..0.9) };
            Box3 {
                lo: [cx - hx, cy - hy, -SENSOR_HEIGHT],
                hi: [cx + hx, cy + hy, top],
                albedo,
                glass,
            }
        })
        .collect()
}

fn cast(d: [f64; 3], boxes: &[Box3], backdrop: f64) -> Hit {
    let mut best = Hit {
        t: backdrop,
        cos: 1.0,
        albedo: BACKDROP_ALBEDO,
        glass: false,
    };
    if d[2] < 0.0 {
        let t = SENSOR_HEIGHT / -d[2];
        if t < best.t {
            best = Hit {
                t,
                cos: -d[2],
                albedo: GROUND_ALBEDO,
                glass: false,
            };
        }
    }
    for b in boxes {
        if let Some((t, axis)) = b.intersect(d) {
            if t < best.t {
                best = Hit {
                    t,
                    cos: d[axis].abs(),
                    albedo: b.albedo,
                    glass: b.glass,
                };
            }
        }
    }
    best
}

/// Renders one scene. Geometry depends only on `seed`, so the two domains
/// share a scene for equal seeds.
pub fn gen_toy_scene(cfg: &ToySceneConfig, intr: &SensorIntrinsics) -> Result<RangeImage> {
    cfg.validate()?;
    intr.validate()?;
    let mut geo_rng = stream(cfg.seed, 0);
    let mut drop_rng = stream(cfg.seed, 1);
    let boxes = random_boxes(cfg, &mut geo_rng);
    let backdrop = BACKDROP_FRACTION * intr.max_range;
    let mut img = RangeImage::empty(*intr);
    for v in 0..intr.height {
        let (sp, cp) = intr.row_elevation(v).sin_cos();
        for u in 0..intr.width {
            let (st, ct) = intr.column_azimuth(u).sin_cos();
            let hit = cast([cp * ct, cp * st, sp], &boxes, backdrop);
            let i = v * intr.width + u;
            match cfg.domain {
                Domain::Sim => {
                    img.range[i] = hit.t;
                    img.reflectance[i] = 0.0;
                }
                Domain::Real => {
                    let mut p = cfg.drop_base;
                    if hit.glass || hit.cos < GRAZING_COS {
                        p = p.max(cfg.drop_glass);
                    }
                    if drop_rng.random_bool(p) {
                        img.range[i] = DROP_RANGE;
                        img.reflectance[i] = 0.0;
                    } else {
                        let falloff = (-hit.t / intr.max_range).exp();
                        img.range[i] = hit.t;
                        img.reflectance[i] = (hit.albedo * hit.cos * falloff).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(img)
}
