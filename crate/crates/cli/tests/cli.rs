use std::path::Path;
use std::process::{Command, Output};

use drum_core::lidar::read_range_image;
use drum_core::lidar::DROP_RANGE;
use serde_json::Value;

const SMALL: &[&str] = &["--sensor.height", "16", "--sensor.width", "64"];
const TINY_MODEL: &[&str] = &["--model.widths", "[4,8]", "--train.steps", "6", "--train.batch", "2"];
const FAST_SAMPLER: &[&str] = &["--sampler.num-steps", "3", "--cycles", "1"];

fn drum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drum"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = drum(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with(base: &[&str], extra: &[&[&str]]) -> Vec<String> {
    let mut v: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    for e in extra {
        v.extend(e.iter().map(|s| s.to_string()));
    }
    v
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// make-toy, train-prior and translate on a tiny problem under `dir`.
fn pipeline(dir: &Path) {
    let d = |p: &str| dir.join(p).display().to_string();
    let toy = with(&["make-toy", "--out", &d("toy"), "--n-sim", "3", "--n-real", "5"], &[SMALL]);
    run_ok(&refs(&toy));
    let train = with(
        &["train-prior", "--data", &d("toy/real"), "--out", &d("ck/prior.ckpt")],
        &[TINY_MODEL],
    );
    let stdout = run_ok(&refs(&train));
    assert!(stdout.contains("epoch"));
    assert!(stdout.contains("held-out loss"));
    let tr = with(
        &["translate", "--ckpt", &d("ck/prior.ckpt"), "--input", &d("toy/sim"), "--out", &d("out"), "--verify"],
        &[FAST_SAMPLER],
    );
    let stdout = run_ok(&refs(&tr));
    assert!(stdout.contains("label audit: 3/3 passed"), "{stdout}");
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);

    let manifest = read_json(&dir.join("toy/manifest.json"));
    assert_eq!(manifest["sim"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["real"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["sensor"]["width"], 64);

    let echo = read_json(&dir.join("out/run_config.json"));
    assert_eq!(echo["sampler"]["num_steps"], 3);
    assert_eq!(echo["sampler"]["resample_cycles"], 1);
    assert!(echo["paths"]["checkpoint"].as_str().unwrap().ends_with("prior.ckpt"));
    assert!(dir.join("ck/prior.ckpt.config.json").exists());

    for i in 0..3 {
        let name = format!("sim_{i:05}.drumimg");
        let sim = read_range_image(&dir.join("toy/sim").join(&name)).unwrap();
        let out = read_range_image(&dir.join("out").join(&name)).unwrap();
        assert_eq!(sim.intrinsics, out.intrinsics);
        for p in 0..out.range.len() {
            if out.range[p] != DROP_RANGE {
                // f32 storage of both images.
                assert_eq!(out.range[p], sim.range[p]);
            }
        }
    }

    let report = dir.join("eval.json");
    let stdout = run_ok(&[
        "eval",
        "--a",
        &dir.join("out").display().to_string(),
        "--b",
        &dir.join("toy/real").display().to_string(),
        "--report",
        &report.display().to_string(),
    ]);
    assert!(stdout.contains("frechet distance"));
    let r = read_json(&report);
    assert!(r["frechet_distance"].as_f64().unwrap() >= 0.0);
    assert_eq!(r["a"]["count"], 3);
    assert_eq!(r["b"]["range_histogram"].as_array().unwrap().len(), 32);
    assert!(dir.join("eval.json.config.json").exists());

    let stdout = run_ok(&[
        "export-png",
        "--input",
        &dir.join("out").display().to_string(),
        "--out",
        &dir.join("png").display().to_string(),
    ]);
    assert!(stdout.contains("exported 3 images"));
    let bytes = std::fs::read(dir.join("png/sim_00000_range.png")).unwrap();
    assert_eq!(&bytes[1..4], b"PNG");
}

#[test]
fn translation_is_reproducible_and_resume_continues_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let d = |p: &str| dir.join(p).display().to_string();
    let tr = with(
        &["translate", "--ckpt", &d("ck/prior.ckpt"), "--input", &d("toy/sim"), "--out", &d("again"), "--jobs", "2"],
        &[FAST_SAMPLER],
    );
    run_ok(&refs(&tr));
    for i in 0..3 {
        let name = format!("sim_{i:05}.drumimg");
        let a = std::fs::read(dir.join("out").join(&name)).unwrap();
        let b = std::fs::read(dir.join("again").join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }

    let resume = with(
        &["train-prior", "--data", &d("toy/real"), "--out", &d("ck/more.ckpt"), "--resume", &d("ck/prior.ckpt")],
        &[TINY_MODEL],
    );
    let stdout = run_ok(&refs(&resume));
    assert!(stdout.contains("at step 12"), "{stdout}");
}

#[test]
fn eval_accepts_imported_features() {
    use drum_core::metrics::{write_features, FeatureSet};
    let tmp = tempfile::tempdir().unwrap();
    let rows_a: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let rows_b: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 + 1.0, (i * i) as f64]).collect();
    let fa = tmp.path().join("a.feat");
    let fb = tmp.path().join("b.feat");
    write_features(&fa, &FeatureSet::new(&rows_a).unwrap()).unwrap();
    write_features(&fb, &FeatureSet::new(&rows_b).unwrap()).unwrap();
    let report = tmp.path().join("r.json");
    run_ok(&[
        "eval",
        "--features-a",
        fa.to_str().unwrap(),
        "--features-b",
        fb.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    let r = read_json(&report);
    assert_eq!(r["features"], "imported");
    // Same covariance, mean shifted by 1 in one coordinate.
    assert!((r["frechet_distance"].as_f64().unwrap() - 1.0).abs() < 1e-6);

    let out = drum(&["eval", "--features-a", fa.to_str().unwrap(), "--b", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().display().to_string();
    assert_eq!(drum(&["--help"]).status.code(), Some(0));
    assert_eq!(drum(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(drum(&["make-toy", "--out", &p, "--sampler.nope", "1"]).status.code(), Some(1));
    assert_eq!(drum(&["make-toy", "--out", &p, "--sampler.t-init", "1.5"]).status.code(), Some(1));
    assert_eq!(drum(&["make-toy", "--out", &p, "--jobs", "0"]).status.code(), Some(1));
    assert_eq!(drum(&["train-prior", "--data", &p, "--out", &format!("{p}/x.ckpt")]).status.code(), Some(1));

    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sampler": {"unknown_field": 1}}"#).unwrap();
    let out = drum(&["--config", cfg.to_str().unwrap(), "make-toy", "--out", &p]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"toy": {"seed": 9, "n_boxes": 2}, "sensor": {"height": 8, "width": 32}}"#).unwrap();
    let out = tmp.path().join("toy");
    run_ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "make-toy",
        "--out",
        out.to_str().unwrap(),
        "--n-sim",
        "1",
        "--n-real",
        "1",
        "--toy.seed=11",
    ]);
    let echo = read_json(&out.join("run_config.json"));
    assert_eq!(echo["toy"]["seed"], 11);
    assert_eq!(echo["toy"]["n_boxes"], 2);
    let img = read_range_image(&out.join("sim/sim_00000.drumimg")).unwrap();
    assert_eq!((img.intrinsics.height, img.intrinsics.width), (8, 32));
}

#[test]
fn empty_corpus_and_byte_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |p: &str| tmp.path().join(p).display().to_string();
    run_ok(&["make-toy", "--out", &d("empty"), "--n-sim", "0", "--n-real", "0"]);
    let manifest = read_json(&tmp.path().join("empty/manifest.json"));
    assert!(manifest["sim"].as_array().unwrap().is_empty());
    assert!(manifest["real"].as_array().unwrap().is_empty());
    assert_eq!(std::fs::read_dir(tmp.path().join("empty/sim")).unwrap().count(), 0);

    for run in ["a", "b"] {
        let args = with(&["make-toy", "--out", &d(run), "--n-sim", "4", "--n-real", "2", "--jobs", "2"], &[SMALL]);
        run_ok(&refs(&args));
    }
    for sub in ["sim/sim_00000", "sim/sim_00003", "real/real_00001"] {
        let f = format!("{sub}.drumimg");
        let a = std::fs::read(tmp.path().join("a").join(&f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(&f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    for i in 0..4 {
        let img = read_range_image(&tmp.path().join(format!("a/sim/sim_{i:05}.drumimg"))).unwrap();
        assert!(img.reflectance.iter().all(|&v| v == 0.0));
    }

    let ck = d("zero.ckpt");
    let stdout = run_ok(&[
        "train-prior",
        "--data",
        &d("a/real"),
        "--out",
        &ck,
        "--model.widths",
        "[4,8]",
        "--train.steps",
        "0",
    ]);
    assert!(stdout.contains("at step 0"), "{stdout}");

    let stdout = run_ok(&["translate", "--ckpt", &ck, "--input", &d("empty/sim"), "--out", &d("none")]);
    assert!(stdout.contains("translated 0 scans"), "{stdout}");
}

#[test]
fn unguided_translation_matches_sdedit_baseline() {
    use drum_core::model::load_checkpoint;
    use drum_core::rng::{name_hash, stream};
    use drum_core::sampler::{baselines, finalize_sample};
    use drum_core::{MeasurementOperator, SamplerConfig};

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir);
    let d = |p: &str| dir.join(p).display().to_string();
    let tr = with(
        &["translate", "--ckpt", &d("ck/prior.ckpt"), "--input", &d("toy/sim"), "--out", &d("plain")],
        &[&["--sampler.num-steps", "4", "--guidance-scale", "0", "--cycles", "0"]],
    );
    run_ok(&refs(&tr));

    let model = load_checkpoint(&dir.join("ck/prior.ckpt")).unwrap().model;
    let h = MeasurementOperator::zero_reflectance();
    let cfg = SamplerConfig::default();
    for i in 0..3 {
        let name = format!("sim_{i:05}.drumimg");
        let sim = read_range_image(&dir.join("toy/sim").join(&name)).unwrap();
        let y = h.apply(&sim.normalize());
        let mut rng = stream(cfg.seed ^ name_hash(&name), 0);
        let traj = baselines::sdedit(&y, &model, cfg.t_init, 4, &mut rng).unwrap();
        let x0 = traj.last().unwrap();
        let expected = finalize_sample(x0, &y, cfg.guidance.eta).unwrap();
        let out = read_range_image(&dir.join("plain").join(&name)).unwrap();
        let expected_mask: Vec<bool> = expected.channel(0).iter().map(|&v| v != -1.0).collect();
        for (p, &keep) in expected_mask.iter().enumerate() {
            let keep = keep && !sim.is_drop(p);
            assert_eq!(out.range[p] != drum_core::lidar::DROP_RANGE, keep, "{name} pixel {p}");
            if keep {
                let refl = ((expected.channel(1)[p] + 1.0) * 0.5).clamp(0.0, 1.0);
                assert!((out.reflectance[p] - refl).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn eval_of_a_set_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |p: &str| tmp.path().join(p).display().to_string();
    let args = with(&["make-toy", "--out", &d("toy"), "--n-sim", "0", "--n-real", "4"], &[SMALL]);
    run_ok(&refs(&args));
    run_ok(&["eval", "--a", &d("toy/real"), "--b", &d("toy/real"), "--report", &d("r.json")]);
    let r = read_json(&tmp.path().join("r.json"));
    assert!(r["frechet_distance"].as_f64().unwrap().abs() < 1e-8);
    assert_eq!(r["a"]["mean_raydrop_ratio"], r["b"]["mean_raydrop_ratio"]);
    let out = drum(&["eval", "--a", &d("toy/sim"), "--b", &d("toy/real")]);
    assert_eq!(out.status.code(), Some(1));
}
