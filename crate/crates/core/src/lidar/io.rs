//! Range-image (`DRUMIMG1`) and KITTI `.bin` point-cloud files.
//!
//! A `DRUMIMG1` file is little-endian: the magic, `u32 H`, `u32 W`, `u32 C=2`,
//! `f32 max_range`, `f32 fov_up`, `f32 fov_down`, then `C·H·W` `f32` values in
//! row-major order (range plane, then reflectance plane; metric units with
//! `-1` marking drops).

use std::fs;
use std::path::Path;

use super::{PointCloud, RangeImage, SensorIntrinsics};
use crate::error::{Error, Result};

pub const RANGE_IMAGE_MAGIC: &[u8; 8] = b"DRUMIMG1";
const HEADER_LEN: usize = 8 + 3 * 4 + 3 * 4;

pub fn encode_range_image(img: &RangeImage) -> Vec<u8> {
    let i = &img.intrinsics;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * i.pixels());
    out.extend_from_slice(RANGE_IMAGE_MAGIC);
    for v in [i.height as u32, i.width as u32, 2] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [i.max_range, i.fov_up, i.fov_down] {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &v in img.range.iter().chain(&img.reflectance) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_range_image(bytes: &[u8]) -> std::result::Result<RangeImage, String> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != RANGE_IMAGE_MAGIC {
        return Err("missing DRUMIMG1 header".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let (h, w, c) = (u32_at(8), u32_at(12), u32_at(16));
    if c != 2 {
        return Err(format!("expected 2 channels, found {c}"));
    }
    let intrinsics = SensorIntrinsics {
        height: h,
        width: w,
        max_range: f32_at(20),
        fov_up: f32_at(24),
        fov_down: f32_at(28),
    };
    let n = h.checked_mul(w).ok_or("image size overflow")?;
    if bytes.len() != HEADER_LEN + 2 * n * 4 {
        return Err(format!(
            "expected {} payload bytes, found {}",
            2 * n * 4,
            bytes.len() - HEADER_LEN
        ));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let img = RangeImage {
        intrinsics,
        range: values[..n].to_vec(),
        reflectance: values[n..].to_vec(),
    };
    img.validate().map_err(|e| e.to_string())?;
    Ok(img)
}

pub fn write_range_image(path: &Path, img: &RangeImage) -> Result<()> {
    fs::write(path, encode_range_image(img)).map_err(|e| Error::io(path, e))
}

pub fn read_range_image(path: &Path) -> Result<RangeImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_range_image(&bytes).map_err(|r| Error::format(path, r))
}

/// Consecutive little-endian `f32` quadruples `(x, y, z, reflectance)`.
pub fn write_kitti_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(16 * pc.len());
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(path, "length is not a multiple of 16 bytes"));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidar::{gen_toy_scene, Domain, ToySceneConfig};

    #[test]
    fn range_image_round_trip_is_byte_stable() {
        let intr = SensorIntrinsics::default();
        let img = gen_toy_scene(
            &ToySceneConfig {
                domain: Domain::Real,
                seed: 3,
                ..ToySceneConfig::default()
            },
            &intr,
        )
        .unwrap();
        let bytes = encode_range_image(&img);
        assert_eq!(&bytes[..8], b"DRUMIMG1");
        assert_eq!(bytes.len(), 32 + 8 * intr.pixels());
        let back = decode_range_image(&bytes).unwrap();
        assert_eq!(encode_range_image(&back), bytes);
        for (a, b) in img.range.iter().zip(&back.range) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn malformed_images_rejected() {
        let img = RangeImage::empty(SensorIntrinsics::default());
        let bytes = encode_range_image(&img);
        assert!(decode_range_image(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[16] = 3;
        assert!(decode_range_image(&bad).is_err());
        assert!(decode_range_image(b"DRUMIMG0").is_err());
    }

    #[test]
    fn kitti_round_trip() {
        let dir = std::env::temp_dir().join(format!("drum-kitti-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cloud.bin");
        let pc = PointCloud {
            points: vec![[1.5, -2.0, 0.25, 0.5], [10.0, 3.0, -1.0, 0.0]],
        };
        write_kitti_bin(&path, &pc).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);
        assert_eq!(read_kitti_bin(&path).unwrap(), pc);
        fs::write(&path, [0u8; 15]).unwrap();
        assert!(read_kitti_bin(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
