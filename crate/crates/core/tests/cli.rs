//! End-to-end tests of the command-line interface, driving the built binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use maxsr::eval::ImageBuffer;
use maxsr::rng::Rng;

fn maxsr_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_maxsr"))
}

fn write_test_png(path: &Path, w: usize, h: usize, seed: u64) {
    let mut rng = Rng::new(seed);
    let mut data = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let px = (y * w + x) * 3;
            data[px] = ((x * 9 + y) % 256) as u8;
            data[px + 1] = ((x + y * 7) % 256) as u8;
            data[px + 2] = rng.below(256) as u8;
        }
    }
    let img = ImageBuffer::from_rgb8(w, h, data).unwrap();
    maxsr::image_io::write_png(path, &img).unwrap();
}

fn train_tiny_checkpoint(dir: &Path, iters: u64) -> PathBuf {
    let hr = dir.join("hr");
    std::fs::create_dir_all(&hr).unwrap();
    for k in 0..2 {
        write_test_png(&hr.join(format!("img{k}.png")), 24, 20, 50 + k as u64);
    }
    let config = dir.join("toy.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "model": {{"blocks": 2, "stages": 2, "width": 8, "heads": 2, "scale": 2}},
  "train": {{"total_iters": {iters}, "batch": 1, "patch_lr": 8, "lr0": 1e-3, "seed": 4}}
}}"#
        ),
    )
    .unwrap();
    let ckpt = dir.join("toy.ckpt");
    let out = maxsr_bin()
        .args(["train-toy", "--config"])
        .arg(&config)
        .arg("--data-dir")
        .arg(&hr)
        .arg("--out-checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "train-toy failed: {}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn upscale_shape_determinism_and_mode_override() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny_checkpoint(dir.path(), 1);
    let input = dir.path().join("in.png");
    write_test_png(&input, 36, 24, 3);

    let run = |out_name: &str, extra: &[&str]| -> Vec<u8> {
        let out_path = dir.path().join(out_name);
        let status = maxsr_bin()
            .args(["upscale", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&out_path)
            .args(extra)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(&out_path).unwrap()
    };

    let a = run("a.png", &[]);
    let b = run("b.png", &[]);
    assert_eq!(a, b, "same input and checkpoint must give bit-identical files");

    let img = maxsr::image_io::read_png(&dir.path().join("a.png")).unwrap();
    assert_eq!((img.width, img.height), (72, 48));

    // self-ensemble also works and produces the same extents
    let se = run("c.png", &["--self-ensemble"]);
    let img = maxsr::image_io::read_png(&dir.path().join("c.png")).unwrap();
    assert_eq!((img.width, img.height), (72, 48));
    assert_ne!(a, se);
}

#[test]
fn upscale_mode_override_coincides_on_square_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny_checkpoint(dir.path(), 0);
    // 64x64 input: exact-mode plan equals the fixed:8 plan
    let input = dir.path().join("sq.png");
    write_test_png(&input, 64, 64, 8);
    let run = |out_name: &str, extra: &[&str]| -> Vec<u8> {
        let out_path = dir.path().join(out_name);
        let status = maxsr_bin()
            .args(["upscale", "--checkpoint"])
            .arg(&ckpt)
            .arg("--input")
            .arg(&input)
            .arg("--output")
            .arg(&out_path)
            .args(extra)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out_path).unwrap()
    };
    let exact = run("exact.png", &["--attention", "exact"]);
    let fixed = run("fixed.png", &["--attention", "fixed:8"]);
    assert_eq!(exact, fixed);
}

#[test]
fn upscale_failures_exit_one_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny_checkpoint(dir.path(), 0);
    let out_path = dir.path().join("never.png");
    let out = maxsr_bin()
        .args(["upscale", "--checkpoint"])
        .arg(&ckpt)
        .arg("--input")
        .arg(dir.path().join("missing.png"))
        .arg("--output")
        .arg(&out_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!out_path.exists(), "failed run must not leave an output file");
}

#[test]
fn eval_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny_checkpoint(dir.path(), 1);
    let hr = dir.path().join("eval_hr");
    std::fs::create_dir_all(&hr).unwrap();
    for k in 0..2 {
        write_test_png(&hr.join(format!("e{k}.png")), 30, 26, 70 + k as u64);
    }
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    let run = || -> (String, String) {
        let out = maxsr_bin()
            .current_dir(&work)
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .arg("--hr-dir")
            .arg(&hr)
            .args(["--scale", "2", "--border", "2"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read_to_string(work.join("eval_report.json")).unwrap(),
            std::fs::read_to_string(work.join("eval_report.txt")).unwrap(),
        )
    };
    let (json1, table1) = run();
    let (json2, table2) = run();
    assert_eq!(json1, json2);
    assert_eq!(table1, table2);
    assert!(table1.contains("average"));
    let parsed: serde_json::Value = serde_json::from_str(&json1).unwrap();
    assert_eq!(parsed["per_image"].as_array().unwrap().len(), 2);
    // aggregate equals the mean of the per-image values
    let rows = parsed["per_image"].as_array().unwrap();
    let mean: f64 = rows.iter().map(|r| r["psnr_db"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;
    assert!((parsed["aggregate_psnr_db"].as_f64().unwrap() - mean).abs() < 1e-12);

    // scale mismatch is an error
    let out = maxsr_bin()
        .current_dir(&work)
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--hr-dir")
        .arg(&hr)
        .args(["--scale", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_toy_zero_iterations_and_seed_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    // zero iterations still writes the initial checkpoint and an empty trace
    let ckpt = train_tiny_checkpoint(dir.path(), 0);
    assert!(ckpt.exists());
    let csv = std::fs::read_to_string(dir.path().join("toy.ckpt.loss.csv")).unwrap();
    assert_eq!(csv.trim(), "iteration,loss,lr");

    // identical seeds give identical loss CSVs
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    train_tiny_checkpoint(dir_a.path(), 3);
    train_tiny_checkpoint(dir_b.path(), 3);
    let a = std::fs::read_to_string(dir_a.path().join("toy.ckpt.loss.csv")).unwrap();
    let b = std::fs::read_to_string(dir_b.path().join("toy.ckpt.loss.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn train_toy_finetune_from_x2_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let x2 = train_tiny_checkpoint(dir.path(), 0);

    let write_cfg = |name: &str, skip_rb: bool| -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(
            &p,
            format!(
                r#"{{
  "model": {{"blocks": 2, "stages": 2, "width": 8, "heads": 2, "scale": 3}},
  "train": {{"total_iters": 0, "batch": 1, "patch_lr": 8, "seed": 4}},
  "init_checkpoint": {:?},
  "init_skip_rb": {skip_rb}
}}"#,
                x2.to_str().unwrap()
            ),
        )
        .unwrap();
        p
    };

    // the x3 network accepts the x2 tensors once the reconstruction block
    // is re-initialized ...
    let cfg = write_cfg("ft.json", true);
    let out3 = dir.path().join("x3.ckpt");
    let out = maxsr_bin()
        .args(["train-toy", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(dir.path().join("hr"))
        .arg("--out-checkpoint")
        .arg(&out3)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out3.exists());

    // ... and rejects them otherwise
    let cfg = write_cfg("strict.json", false);
    let out = maxsr_bin()
        .args(["train-toy", "--config"])
        .arg(&cfg)
        .arg("--data-dir")
        .arg(dir.path().join("hr"))
        .arg("--out-checkpoint")
        .arg(dir.path().join("never.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_attention_csv_format_and_slopes() {
    let out = maxsr_bin()
        .args(["bench-attention", "--sizes", "16,32,64", "--mode", "adaptive"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.trim().lines().collect();
    assert_eq!(lines[0], "size,cost,wall_time_ms");
    assert_eq!(lines.len(), 4, "one row per size plus header");
    assert!(lines[1].starts_with("16,8192,"));
    assert!(lines[3].starts_with("64,524288,"));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("slope"), "slope line on stderr: {stderr}");

    // full size sweep: slope of the closed-form counts in the claimed band
    let out = maxsr_bin()
        .args(["bench-attention", "--sizes", "16,32,64,128,256", "--mode", "global"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let slope: f64 = stderr
        .rsplit_once(':')
        .and_then(|(_, v)| v.trim().parse().ok())
        .expect("slope value");
    assert!((1.9..=2.1).contains(&slope));
}

#[test]
fn gradcheck_exit_codes() {
    let out = maxsr_bin().args(["gradcheck", "--seed", "7"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(stdout.contains("max rel err"));

    // negative control: a corrupted analytic gradient must fail the run
    let out = maxsr_bin()
        .args(["gradcheck", "--seed", "7"])
        .env("MAXSR_GRADCHECK_CORRUPT", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
