//! End-to-end checks of the command-line surface and its exit codes.

use std::path::Path;
use std::process::Command;

fn seeco() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seeco"))
}

/// Tiny model/scene configuration so segment runs fast.
const TINY_CONFIG: &str = "\
image_size = 32
patch_size = 8
embed_dim = 16
num_blocks = 2
num_heads = 2
vocab_size = 256
window = 32
stride = 16
r = 2
";

fn write_tiny_image(path: &Path) {
    // 32x32 P6 with a simple two-tone pattern
    let mut bytes = b"P6\n32 32\n255\n".to_vec();
    for y in 0..32u32 {
        for x in 0..32u32 {
            if (x + y) % 11 < 5 {
                bytes.extend_from_slice(&[200, 40, 40]);
            } else {
                bytes.extend_from_slice(&[30, 80, 190]);
            }
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn gen_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scenes");
    let status = seeco()
        .args([
            "gen",
            "--seed",
            "5",
            "--count",
            "1",
            "--classes",
            "3",
            "--size",
            "224,224",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("scene_0000.ppm").exists());
    assert!(out.join("scene_0000_gt.pgm").exists());
    assert!(out.join("manifest.txt").exists());
    assert!(out.join("categories.txt").exists());

    // perfect prediction scores miou = 1
    let output = seeco()
        .args(["eval", "--classes", "3", "--pred"])
        .arg(out.join("scene_0000_gt.pgm"))
        .arg("--gt")
        .arg(out.join("scene_0000_gt.pgm"))
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("miou = 1"), "stdout: {stdout}");
}

#[test]
fn export_segment_eval_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.txt");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let model = dir.path().join("model.bin");
    let status = seeco()
        .args(["export-model", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&model)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(model.exists());

    let image = dir.path().join("input.ppm");
    write_tiny_image(&image);
    let categories = dir.path().join("categories.txt");
    std::fs::write(&categories, "water\nbuilding\n").unwrap();
    let synonyms = dir.path().join("synonyms.txt");
    std::fs::write(
        &synonyms,
        "water: lake, river, pond, reservoir, stream\n\
         building: house, structure, rooftop, facility, construction\n",
    )
    .unwrap();

    let labels = dir.path().join("labels.pgm");
    let output = seeco()
        .args(["segment", "--model"])
        .arg(&model)
        .arg("--image")
        .arg(&image)
        .arg("--categories")
        .arg(&categories)
        .arg("--synonyms")
        .arg(&synonyms)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&labels)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(labels.exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("loss"), "stdout: {stdout}");

    // static mode works on the same inputs
    let static_labels = dir.path().join("static.pgm");
    let status = seeco()
        .args(["segment", "--static", "--model"])
        .arg(&model)
        .arg("--image")
        .arg(&image)
        .arg("--categories")
        .arg(&categories)
        .arg("--synonyms")
        .arg(&synonyms)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&static_labels)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn usage_and_data_exit_codes() {
    // unknown flag -> usage error 1
    let status = seeco().args(["gen", "--bogus"]).status().unwrap();
    assert_eq!(status.code(), Some(1));

    // bad config contents -> 1
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.txt");
    std::fs::write(&config, "definitely_not_a_key = 5\n").unwrap();
    let status = seeco()
        .args(["suite", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // missing data file -> 2
    let status = seeco()
        .args([
            "eval",
            "--classes",
            "2",
            "--pred",
            "/nonexistent.pgm",
            "--gt",
        ])
        .arg("/nonexistent.pgm")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn empty_suite_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.txt");
    std::fs::write(&config, "scenes = 0\n").unwrap();
    let out = dir.path().join("out");
    let output = seeco()
        .args(["suite", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(out.join("report.csv").exists());
    assert!(out.join("summary.txt").exists());
}
