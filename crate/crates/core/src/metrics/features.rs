//! Built-in range-image descriptor and the `DRUMFEAT` feature file.
//!
//! Layout of the 64 components, in order:
//! * `0..32`: histogram of normalized log-range over `[-1, 1]`, valid pixels only;
//! * `32..48`: histogram of reflectance over `[0, 1]`, valid pixels only;
//! * `48..64`: mean of each normalized channel over 8 horizontal bands
//!   (range bands first, top to bottom, then reflectance bands).
//!
//! Histograms count fractions of all pixels, so they sum to `1 − drop ratio`.

use std::fs;
use std::path::Path;

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::lidar::RangeImage;

pub const FEATURE_DIM: usize = 64;
pub const FEATURE_MAGIC: &[u8; 8] = b"DRUMFEAT";
const RANGE_BINS: usize = 32;
const REFL_BINS: usize = 16;
const BANDS: usize = 8;

fn bin(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let k = ((value - lo) / (hi - lo) * bins as f64).floor();
    (k.max(0.0) as usize).min(bins - 1)
}

pub fn builtin_features(img: &RangeImage) -> Vec<f64> {
    let intr = &img.intrinsics;
    let (h, w) = (intr.height, intr.width);
    let x = img.normalize();
    let inv_n = 1.0 / intr.pixels() as f64;
    let mut f = vec![0.0; FEATURE_DIM];
    for i in 0..intr.pixels() {
        if img.is_drop(i) {
            continue;
        }
        f[bin(x.data()[i], -1.0, 1.0, RANGE_BINS)] += inv_n;
        f[RANGE_BINS + bin(img.reflectance[i], 0.0, 1.0, REFL_BINS)] += inv_n;
    }
    let base = RANGE_BINS + REFL_BINS;
    for c in 0..2 {
        let plane = x.channel(c);
        for band in 0..BANDS {
            let (r0, r1) = (band * h / BANDS, ((band + 1) * h / BANDS).max(band * h / BANDS + 1).min(h));
            let cells = &plane[r0 * w..r1 * w];
            f[base + c * BANDS + band] = cells.iter().sum::<f64>() / cells.len() as f64;
        }
    }
    f
}

pub fn write_features(path: &Path, fs_: &FeatureSet) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 4 * fs_.len() * fs_.dim());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fs_.len() as u32).to_le_bytes());
    out.extend_from_slice(&(fs_.dim() as u32).to_le_bytes());
    for i in 0..fs_.len() {
        for v in fs_.matrix().row(i).iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::format(path, "missing DRUMFEAT header"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 4 * n * d {
        return Err(Error::format(path, format!("expected {n}×{d} float32 values")));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let rows: Vec<Vec<f64>> = values.chunks(d.max(1)).take(n).map(<[f64]>::to_vec).collect();
    if d == 0 {
        return Err(Error::format(path, "zero feature dimension"));
    }
    FeatureSet::new(&rows)
}
