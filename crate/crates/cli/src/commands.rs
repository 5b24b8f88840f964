use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drum_core::lidar::{gen_toy_scene, read_range_image, write_range_image, Domain, RangeImage};
use drum_core::metrics::{
    builtin_features, fit_gaussian, frechet_distance, mean_raydrop_ratio, read_features,
    FeatureSet,
};
use drum_core::model::{load_checkpoint, save_checkpoint, train_denoiser, NeuralDenoiser};
use drum_core::rng::{derive_seeds, name_hash};
use drum_core::sampler::{drum_translate, finalize_range_image, label_violations};
use drum_core::{MeasurementOperator, NoiseSchedule, Tensor};
use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

pub const IMAGE_EXT: &str = "drumimg";
pub const CONFIG_ECHO: &str = "run_config.json";

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Range-image files in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == IMAGE_EXT) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_images(dir: &Path) -> Result<Vec<RangeImage>, CliError> {
    list_images(dir)?
        .iter()
        .map(|p| read_range_image(p).map_err(CliError::from))
        .collect()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
}

/// Writes `n_sim` simulated and `n_real` real toy scans under `out`.
/// Returns the number of image files written.
pub fn make_toy(cfg: &RunConfig, out: &Path, n_sim: usize, n_real: usize, jobs: usize) -> Result<usize, CliError> {
    let mut cfg = cfg.clone();
    cfg.set_path("out", out);
    create_dir(out)?;
    let pool = thread_pool(jobs)?;
    let mut manifest = serde_json::Map::new();
    for (domain, name, index, n) in [(Domain::Sim, "sim", 1, n_sim), (Domain::Real, "real", 2, n_real)] {
        let dir = out.join(name);
        create_dir(&dir)?;
        let seeds = derive_seeds(cfg.toy.seed, index, n);
        let entries: Vec<ManifestEntry> = pool.install(|| {
            seeds
                .par_iter()
                .enumerate()
                .map(|(i, &seed)| {
                    let scene = drum_core::lidar::ToySceneConfig {
                        domain,
                        seed,
                        ..cfg.toy.clone()
                    };
                    let img = gen_toy_scene(&scene, &cfg.sensor)?;
                    let file = format!("{name}_{i:05}.{IMAGE_EXT}");
                    write_range_image(&dir.join(&file), &img)?;
                    Ok(ManifestEntry {
                        file: format!("{name}/{file}"),
                        seed,
                    })
                })
                .collect::<Result<_, drum_core::Error>>()
        })?;
        manifest.insert(name.into(), serde_json::to_value(entries).expect("serializes"));
    }
    manifest.insert("sensor".into(), serde_json::to_value(cfg.sensor).expect("serializes"));
    manifest.insert("toy".into(), serde_json::to_value(&cfg.toy).expect("serializes"));
    write_json(&out.join("manifest.json"), &manifest)?;
    cfg.echo(&out.join(CONFIG_ECHO))?;
    info!("wrote {n_sim} sim and {n_real} real scans to {}", out.display());
    Ok(n_sim + n_real)
}

/// Trains (or resumes) the prior on the images in `data`, writing a
/// checkpoint to `ckpt_out`. Returns the final held-out loss.
pub fn train_prior(cfg: &RunConfig, data: &Path, ckpt_out: &Path, resume: Option<&Path>) -> Result<f64, CliError> {
    let mut cfg = cfg.clone();
    cfg.set_path("data", data);
    cfg.set_path("checkpoint", ckpt_out);
    let images = load_images(data)?;
    if images.is_empty() {
        return Err(CliError::Validation(format!("no .{IMAGE_EXT} files in {}", data.display())));
    }
    let dataset: Vec<Tensor> = images.iter().map(RangeImage::normalize).collect();
    let (mut model, start) = match resume {
        Some(path) => {
            cfg.set_path("resume", path);
            let ck = load_checkpoint(path)?;
            cfg.model = ck.model.architecture().clone();
            (ck.model, ck.step)
        }
        None => (NeuralDenoiser::new(cfg.model.clone(), NoiseSchedule::cosine(), cfg.train.seed)?, 0),
    };
    info!(
        "training {} parameters on {} images from step {start}",
        model.num_params(),
        dataset.len()
    );
    let clock = Instant::now();
    let report = train_denoiser(&mut model, &dataset, &cfg.train, start, |epoch, loss| {
        println!("epoch {epoch:5} loss {loss:.6} ({:.0}s)", clock.elapsed().as_secs_f64());
    })?;
    if let Some(parent) = ckpt_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_checkpoint(ckpt_out, &model, report.step)?;
    println!(
        "held-out loss {:.6} -> {:.6} at step {}",
        report.initial_holdout_loss, report.final_holdout_loss, report.step
    );
    write_json(&sibling(ckpt_out, ".report.json"), &report)?;
    cfg.echo(&sibling(ckpt_out, ".config.json"))?;
    Ok(report.final_holdout_loss)
}

#[derive(Debug, Default, Serialize)]
pub struct TranslateSummary {
    pub translated: usize,
    pub failed: Vec<(String, String)>,
    pub verified: usize,
    pub violations: Vec<(String, usize)>,
    pub mean_raydrop_ratio: f64,
}

struct Outcome {
    name: String,
    result: Result<(RangeImage, usize), CliError>,
}

fn translate_one(
    cfg: &RunConfig,
    model: &NeuralDenoiser,
    h: &MeasurementOperator,
    path: &Path,
    out: &Path,
    png: bool,
) -> Result<(RangeImage, usize), CliError> {
    let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let sim = read_range_image(path)?;
    let y = h.apply(&sim.normalize());
    let mut sampler = cfg.sampler.clone();
    sampler.seed ^= name_hash(&name);
    let result = drum_translate(&y, model, h, &sampler)?;
    let img = finalize_range_image(&sim, &result)?;
    let violations = label_violations(&sim, &result.mask0, &img);
    write_range_image(&out.join(&name), &img)?;
    if png {
        write_pngs(&img, out, Path::new(&name))?;
    }
    Ok((img, violations))
}

/// Translates every simulated scan in `input` into `out`. Per-sample failures
/// are logged and collected rather than aborting the batch.
pub fn translate(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &Path,
    out: &Path,
    png: bool,
    verify: bool,
    jobs: usize,
) -> Result<TranslateSummary, CliError> {
    let mut cfg = cfg.clone();
    cfg.set_path("checkpoint", ckpt);
    cfg.set_path("input", input);
    cfg.set_path("out", out);
    let model = load_checkpoint(ckpt)?.model;
    let files = list_images(input)?;
    create_dir(out)?;
    let h = MeasurementOperator::zero_reflectance();
    let clock = Instant::now();
    let outcomes: Vec<Outcome> = thread_pool(jobs)?.install(|| {
        files
            .par_iter()
            .map(|path| Outcome {
                name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                result: translate_one(&cfg, &model, &h, path, out, png),
            })
            .collect()
    });
    let mut summary = TranslateSummary::default();
    let mut outputs = Vec::new();
    for o in outcomes {
        match o.result {
            Ok((img, violations)) => {
                summary.translated += 1;
                outputs.push(img);
                if verify {
                    summary.verified += 1;
                    if violations > 0 {
                        error!("{}: {violations} label-consistency violations", o.name);
                        summary.violations.push((o.name, violations));
                    }
                }
            }
            Err(e) => {
                error!("{}: {e}", o.name);
                summary.failed.push((o.name, e.to_string()));
            }
        }
    }
    summary.mean_raydrop_ratio = mean_raydrop_ratio(&outputs);
    info!(
        "translated {}/{} scans in {:.1}s, mean raydrop ratio {:.4}",
        summary.translated,
        files.len(),
        clock.elapsed().as_secs_f64(),
        summary.mean_raydrop_ratio
    );
    write_json(&out.join("translate_summary.json"), &summary)?;
    cfg.echo(&out.join(CONFIG_ECHO))?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct SetStats {
    pub source: String,
    pub count: usize,
    pub mean_raydrop_ratio: Option<f64>,
    pub range_histogram: Option<Vec<f64>>,
    pub reflectance_histogram: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub frechet_distance: f64,
    pub features: &'static str,
    pub a: SetStats,
    pub b: SetStats,
}

fn mean_columns(rows: &[Vec<f64>], range: std::ops::Range<usize>) -> Vec<f64> {
    let n = rows.len().max(1) as f64;
    range.map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn summarize(images: &[RangeImage], source: &Path) -> (SetStats, Vec<Vec<f64>>) {
    let rows: Vec<Vec<f64>> = images.par_iter().map(builtin_features).collect();
    let stats = SetStats {
        source: source.display().to_string(),
        count: images.len(),
        mean_raydrop_ratio: Some(mean_raydrop_ratio(images)),
        range_histogram: Some(mean_columns(&rows, 0..32)),
        reflectance_histogram: Some(mean_columns(&rows, 32..48)),
    };
    (stats, rows)
}

/// One side of an evaluation: an image directory, an imported feature file,
/// or both.
pub struct EvalInput<'a> {
    pub dir: Option<&'a Path>,
    pub features: Option<&'a Path>,
}

fn load_side(side: &EvalInput) -> Result<(SetStats, FeatureSet), CliError> {
    let images = match side.dir {
        Some(dir) => {
            let images = load_images(dir)?;
            if images.is_empty() {
                return Err(CliError::Validation(format!("no .{IMAGE_EXT} files in {}", dir.display())));
            }
            Some((dir, images))
        }
        None => None,
    };
    match (side.features, images) {
        (Some(feat), images) => {
            let fs_ = read_features(feat)?;
            if fs_.is_empty() {
                return Err(CliError::Validation(format!("{} holds no features", feat.display())));
            }
            let stats = match images {
                Some((dir, imgs)) => summarize(&imgs, dir).0,
                None => SetStats {
                    source: feat.display().to_string(),
                    count: fs_.len(),
                    mean_raydrop_ratio: None,
                    range_histogram: None,
                    reflectance_histogram: None,
                },
            };
            Ok((stats, fs_))
        }
        (None, Some((dir, imgs))) => {
            let (stats, rows) = summarize(&imgs, dir);
            Ok((stats, FeatureSet::new(&rows)?))
        }
        (None, None) => Err(CliError::Validation("each side needs a directory or a feature file".into())),
    }
}

pub fn eval(cfg: &RunConfig, a: EvalInput, b: EvalInput, report_path: &Path) -> Result<EvalReport, CliError> {
    let mut cfg = cfg.clone();
    for (k, v) in [("a", a.dir), ("features_a", a.features), ("b", b.dir), ("features_b", b.features)] {
        if let Some(p) = v {
            cfg.set_path(k, p);
        }
    }
    cfg.set_path("report", report_path);
    let imported = a.features.is_some() || b.features.is_some();
    if imported && (a.features.is_none() || b.features.is_none()) {
        return Err(CliError::Validation("imported features must be given for both sides".into()));
    }
    let (sa, fa) = load_side(&a)?;
    let (sb, fb) = load_side(&b)?;
    let fd = frechet_distance(&fit_gaussian(&fa)?, &fit_gaussian(&fb)?)?;
    let report = EvalReport {
        frechet_distance: fd,
        features: if imported { "imported" } else { "builtin" },
        a: sa,
        b: sb,
    };
    println!("frechet distance ({} features): {fd:.6}", report.features);
    for (label, s) in [("a", &report.a), ("b", &report.b)] {
        match s.mean_raydrop_ratio {
            Some(r) => println!("{label}: {} samples, mean raydrop ratio {r:.4}", s.count),
            None => println!("{label}: {} samples", s.count),
        }
        if let (Some(rh), Some(fh)) = (&s.range_histogram, &s.reflectance_histogram) {
            println!("{label}: range histogram {}", fmt_hist(rh));
            println!("{label}: reflectance histogram {}", fmt_hist(fh));
        }
    }
    if let Some(parent) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(report_path, &json!(report))?;
    cfg.echo(&sibling(report_path, ".config.json"))?;
    Ok(report)
}

fn fmt_hist(h: &[f64]) -> String {
    h.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn write_gray(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(pixels))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `<stem>_range.png` (log-scaled, drops black) and
/// `<stem>_reflectance.png` into `out`.
pub fn write_pngs(img: &RangeImage, out: &Path, name: &Path) -> Result<(), CliError> {
    let stem = name.file_stem().unwrap_or_default().to_string_lossy();
    let x = img.normalize();
    let (h, w) = (img.intrinsics.height, img.intrinsics.width);
    let range: Vec<u8> = x.channel(0).iter().map(|&v| to_byte((v + 1.0) * 0.5)).collect();
    let refl: Vec<u8> = img.reflectance.iter().map(|&v| to_byte(v)).collect();
    write_gray(&out.join(format!("{stem}_range.png")), w, h, &range)?;
    write_gray(&out.join(format!("{stem}_reflectance.png")), w, h, &refl)
}

/// Exports a single image file or every image in a directory.
pub fn export_png(input: &Path, out: &Path) -> Result<usize, CliError> {
    let files = if input.is_dir() {
        list_images(input)?
    } else {
        vec![input.to_path_buf()]
    };
    create_dir(out)?;
    for f in &files {
        let img = read_range_image(f)?;
        write_pngs(&img, out, f)?;
    }
    if files.is_empty() {
        warn!("no images found in {}", input.display());
    }
    Ok(files.len())
}
