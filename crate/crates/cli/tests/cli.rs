//! Drives the `gaunet` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaunet_core::dataset::read_png;
use gaunet_core::evaluation::MetricsReport;
use gaunet_core::training::load_checkpoint;
use tempfile::TempDir;

fn gaunet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaunet"))
        .args(args)
        .current_dir(dir)
        .env_remove("GAU_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = gaunet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    v
}

const TINY: &str = r#"
[data]
num_classes = 2
image_size = 16
synthetic_per_class = 20
synthetic_seed = 5
[generator]
base_filters = 2
num_blocks = 4
latent_dim = 8
latent_channels = 2
[critic]
growth_rate = 2
num_dense_blocks = 2
layers_per_block = 1
[training]
seed = 3
batch_size = 4
n_critic = 1
checkpoint_every = 2
[evaluation]
embedder_steps = 20
classifier_steps = 20
n_generated_per_class = 8
bootstrap_replicates = 20
"#;

/// Writes a tiny config training for `steps` into `<dir>/<name>`.
fn config(dir: &Path, name: &str, steps: u64) -> PathBuf {
    let text = format!(
        "output_dir = \"{name}\"\n{}",
        TINY.replace("seed = 3\n", &format!("seed = 3\ntotal_steps = {steps}\n"))
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn trained(dir: &Path, steps: u64) -> PathBuf {
    let cfg = config(dir, "run", steps);
    ok(dir, &["train", "--config", cfg.to_str().unwrap()]);
    dir.join("run/checkpoint.gck")
}

#[test]
fn synth_data_writes_every_image_and_a_stable_manifest() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth-data",
            "--classes",
            "2",
            "--per-class",
            "500",
            "--size",
            "64",
            "--seed",
            "7",
            "--out",
            "a",
        ],
    );
    let images = pngs(&d.join("a"));
    assert_eq!(images.len(), 1000);
    assert_eq!(read_png(&images[0]).unwrap().shape(), &[3, 64, 64]);
    let manifest = fs::read(d.join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.iter().filter(|&&b| b == b'\n').count(), 1001);

    ok(
        d,
        &[
            "synth-data",
            "--classes",
            "2",
            "--per-class",
            "500",
            "--size",
            "64",
            "--seed",
            "7",
            "--out",
            "b",
        ],
    );
    assert_eq!(fs::read(d.join("b/manifest.csv")).unwrap(), manifest);
    assert_eq!(
        fs::read(&images[999]).unwrap(),
        fs::read(d.join("b").join(images[999].file_name().unwrap())).unwrap()
    );
}

#[test]
fn one_class_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = gaunet(
        tmp.path(),
        &["synth-data", "--classes", "1", "--per-class", "5", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--classes"));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth-data",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--size",
            "16",
            "--seed",
            "11",
            "--out",
            "flag",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_gaunet"))
        .args([
            "synth-data",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--size",
            "16",
            "--out",
            "env",
        ])
        .current_dir(d)
        .env("GAU_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    for p in pngs(&d.join("flag")) {
        assert_eq!(
            fs::read(&p).unwrap(),
            fs::read(d.join("env").join(p.file_name().unwrap())).unwrap()
        );
    }
}

#[test]
fn training_writes_checkpoint_log_and_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let ckpt = trained(d, 200);
    assert!(ckpt.is_file());
    let log = fs::read_to_string(d.join("run/loss_log.txt")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 200);
    for (i, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 4, "{line}");
        assert_eq!(fields[0].parse::<usize>().unwrap(), i + 1);
        assert!(fields[1..].iter().all(|f| f.parse::<f64>().unwrap().is_finite()));
    }
    let resolved = fs::read_to_string(d.join("run/resolved_config.toml")).unwrap();
    for key in [
        "lambda_gp = 10.0",
        "beta1 = 0.0",
        "beta2 = 0.9",
        "total_steps = 200",
        "oracle = \"auto\"",
    ] {
        assert!(resolved.contains(key), "{key} missing from\n{resolved}");
    }
}

#[test]
fn resume_continues_the_log_without_gaps() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let straight = config(d, "straight", 6);
    ok(d, &["train", "--config", straight.to_str().unwrap()]);
    let split = config(d, "split", 6);
    ok(d, &["train", "--config", split.to_str().unwrap(), "--max-steps", "3"]);
    assert_eq!(
        fs::read_to_string(d.join("split/loss_log.txt"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    ok(d, &["train", "--resume", "split/checkpoint.gck"]);

    let log = fs::read_to_string(d.join("split/loss_log.txt")).unwrap();
    assert_eq!(log, fs::read_to_string(d.join("straight/loss_log.txt")).unwrap());
    let steps: Vec<&str> = log.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5", "6"]);
    let (resumed, _) = load_checkpoint::<f32>(&d.join("split/checkpoint.gck")).unwrap();
    let (uninterrupted, _) = load_checkpoint::<f32>(&d.join("straight/checkpoint.gck")).unwrap();
    assert_eq!(resumed, uninterrupted);
}

#[test]
fn missing_manifest_is_named() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("c.toml"),
        "[data]\nmanifest = \"nowhere/manifest.csv\"\n[training]\nseed = 1\n",
    )
    .unwrap();
    let out = gaunet(d, &["train", "--config", "c.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nowhere/manifest.csv"), "{}", stderr(&out));
}

#[test]
fn config_problems_are_listed_together() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("c.toml"),
        "[training]\nbatch_size = 1\nn_critic = 0\n[generator]\nnum_blocks = 3\n",
    )
    .unwrap();
    let out = gaunet(d, &["train", "--config", "c.toml"]);
    let err = stderr(&out);
    assert!(!out.status.success());
    assert!(
        err.contains("batch_size") && err.contains("n_critic") && err.contains("num_blocks"),
        "{err}"
    );

    fs::write(d.join("u.toml"), "[training]\nlearning_rate = 0.1\n").unwrap();
    let out = gaunet(d, &["train", "--config", "u.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate") && stderr(&out).contains("u.toml"));
}

#[test]
fn generate_writes_count_images_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d, 2);
    ok(
        d,
        &[
            "generate",
            "--checkpoint",
            "run/checkpoint.gck",
            "--class",
            "1",
            "--count",
            "64",
            "--seed",
            "4",
            "--out",
            "a",
        ],
    );
    ok(
        d,
        &[
            "generate",
            "--checkpoint",
            "run/checkpoint.gck",
            "--class",
            "1",
            "--count",
            "64",
            "--seed",
            "4",
            "--out",
            "b",
        ],
    );
    let a = pngs(&d.join("a"));
    assert_eq!(a.len(), 64);
    assert_eq!(a[0].file_name().unwrap(), "1_00000.png");
    assert_eq!(read_png(&a[63]).unwrap().shape(), &[3, 16, 16]);
    for p in &a {
        assert_eq!(
            fs::read(p).unwrap(),
            fs::read(d.join("b").join(p.file_name().unwrap())).unwrap()
        );
    }

    let out = gaunet(
        d,
        &[
            "generate",
            "--checkpoint",
            "run/checkpoint.gck",
            "--class",
            "2",
            "--out",
            "c",
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("class 2"));
}

#[test]
fn directory_against_itself_has_zero_fid() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = config(d, "run", 1);
    ok(
        d,
        &[
            "synth-data",
            "--classes",
            "2",
            "--per-class",
            "30",
            "--size",
            "16",
            "--seed",
            "2",
            "--out",
            "imgs",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--real",
            "imgs",
            "--fake",
            "imgs",
            "--out",
            "e",
        ],
    );
    let report = MetricsReport::read(&d.join("e/metrics.txt")).unwrap();
    assert!(report.fid.unwrap().abs() <= 1e-6, "{:?}", report.fid);
    assert!(d.join("e/samples.png").is_file());

    fs::create_dir(d.join("empty")).unwrap();
    let out = gaunet(
        d,
        &[
            "eval",
            "--config",
            cfg.to_str().unwrap(),
            "--real",
            "imgs",
            "--fake",
            "empty",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("empty"));
}

#[test]
fn eval_reports_are_reproducible_and_parse_back() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d, 2);
    for out in ["e1", "e2"] {
        ok(
            d,
            &[
                "eval",
                "--checkpoint",
                "run/checkpoint.gck",
                "--count",
                "10",
                "--out",
                out,
            ],
        );
    }
    let text = fs::read_to_string(d.join("e1/metrics.txt")).unwrap();
    let a = MetricsReport::parse(&text).unwrap();
    let b = MetricsReport::read(&d.join("e2/metrics.txt")).unwrap();
    assert_eq!(a.to_text(), text);
    assert_eq!(a.body(), b.body());
    assert!(a.fid.is_some() && a.conditional_accuracy.is_some());
    assert_eq!(a.per_class_accuracy.len(), 2);
    assert_eq!(
        fs::read(d.join("e1/samples.png")).unwrap(),
        fs::read(d.join("e2/samples.png")).unwrap()
    );
}

#[test]
fn classify_without_generated_images_matches_baseline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d, 2);
    ok(
        d,
        &[
            "classify",
            "--checkpoint",
            "run/checkpoint.gck",
            "--n-generated",
            "0",
            "--out",
            "c",
        ],
    );
    let report = MetricsReport::read(&d.join("c/metrics.txt")).unwrap();
    let names: Vec<&str> = report.classification.iter().map(|b| b.name.as_str()).collect();
    assert_eq!(names, ["without", "with"]);
    assert_eq!(report.classification[0].report, report.classification[1].report);
    assert_eq!(report.classification[0].averaging, "binary");
}
