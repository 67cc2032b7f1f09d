//! End-to-end tests of the cdasr binary: exit codes, run-directory layout,
//! and the reproducibility contracts that hold across process boundaries.

use std::path::Path;
use std::process::Output;

use cdasr::image::Image;
use serde_json::json;

fn cdasr(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_cdasr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes `n` 16x16 textured PNGs; inverted variants simulate a shifted
/// target domain.
fn write_images(dir: &Path, n: usize, invert: bool) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let mut img = Image::constant(16, 16, 3, 0.0);
        for r in 0..16 {
            for c in 0..16 {
                let t = (r as f64 * 0.7 + c as f64 * 0.4 + i as f64).sin() * 0.5 + 0.5;
                img.pixels[[r, c, 0]] = t;
                img.pixels[[r, c, 1]] = (t * 0.8 + 0.1).clamp(0.0, 1.0);
                img.pixels[[r, c, 2]] = ((r + c + i) % 7) as f64 / 6.0;
            }
        }
        if invert {
            img.pixels.mapv_inplace(|v| 1.0 - v);
        }
        img.save_png(&dir.join(format!("img_{i}.png"))).unwrap();
    }
}

/// A config small enough to train in seconds: 4-channel backbone, 8-dim
/// stub encoder, one optimizer step per epoch over a 3-image set.
fn toy_config(epochs: usize) -> serde_json::Value {
    json!({
        "network": {
            "scale": 2,
            "backbone_channels": 4,
            "backbone_blocks": 1,
            "clip_dim": 8,
            "mlp_hidden": 8,
            "mlp_out": 6,
            "recon_blocks_per_stage": 1
        },
        "encoder": {"backend": "stub", "input_size": 16, "embed_dim": 8},
        "train": {
            "epochs": epochs,
            "batch_size": 3,
            "patch_size": 8,
            "scheduler": "none",
            "seed": 7
        },
        "adapt": {
            "episodes": 2,
            "shots": 1,
            "query_size": 1,
            "inner_steps": 1,
            "alpha_init": 1e-6,
            "gamma": 1e-6,
            "batch_size": 1,
            "seed": 3
        }
    })
}

fn write_config(path: &Path, cfg: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

#[test]
fn degrade_writes_the_mirror_tree_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let out = tmp.path().join("deg");

    let run = cdasr(&[
        "degrade",
        "--hr-dir",
        hr.to_str().unwrap(),
        "--scale",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let lr_files: Vec<_> = std::fs::read_dir(out.join("X2")).unwrap().collect();
    assert_eq!(lr_files.len(), 3);
    let manifest = std::fs::read(out.join("manifest_X2.json")).unwrap();
    let parsed = cdasr::dataset::Manifest::from_json(&manifest).unwrap();
    assert_eq!(parsed.pairs.len(), 3);
    assert_eq!(parsed.scale, 2);
}

#[test]
fn degrade_rejects_a_missing_directory_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cdasr(&[
        "degrade",
        "--hr-dir",
        tmp.path().join("nope").to_str().unwrap(),
        "--scale",
        "2",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("not a directory"), "{}", stderr(&run));
}

#[test]
fn degrade_rejects_scale_3_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 1, false);
    let run = cdasr(&[
        "degrade",
        "--hr-dir",
        hr.to_str().unwrap(),
        "--scale",
        "3",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("scale 3"), "{}", stderr(&run));
}

#[test]
fn missing_required_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = cdasr(&["degrade", "--scale", "2", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&run), 2);
    assert!(stderr(&run).contains("--hr-dir"), "{}", stderr(&run));

    let run = cdasr(&["eval", "--hr-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&run), 2);
}

#[test]
fn train_produces_the_run_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(60));
    let out = tmp.path().join("run");

    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    assert!(out.join("config.resolved.json").is_file());
    assert!(out.join("final").is_file());
    assert!(
        out.join("checkpoints").join("step_50").is_file(),
        "periodic checkpoint missing"
    );
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 61, "header plus one row per step");
    assert!(log.starts_with("step,total,pixel,perceptual,semantic"));
    assert!(stdout(&run).contains("step     60"));

    let ckpt = cdasr::checkpoint::load_checkpoint(&out.join("final")).unwrap();
    assert_eq!(ckpt.meta.step, 60);
    assert!(ckpt.opt.is_some(), "final checkpoint must be resumable");
}

#[test]
fn resolved_config_carries_the_documented_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    // leave learning_rate and batch_size unset so the defaults flow through
    let mut cfg = toy_config(1);
    let train = cfg["train"].as_object_mut().unwrap();
    train.remove("batch_size");
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &cfg);
    let out = tmp.path().join("run");

    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["learning_rate"].as_f64(), Some(1e-4));
    assert_eq!(resolved["train"]["batch_size"].as_u64(), Some(16));
}

#[test]
fn rerunning_the_emitted_resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(4));
    let out_a = tmp.path().join("run_a");
    let out_b = tmp.path().join("run_b");

    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let resolved = out_a.join("config.resolved.json");
    let run = cdasr(&[
        "train",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let log_a = std::fs::read(out_a.join("train_log.csv")).unwrap();
    let log_b = std::fs::read(out_b.join("train_log.csv")).unwrap();
    assert_eq!(log_a, log_b);
    let final_a = std::fs::read(out_a.join("final")).unwrap();
    let final_b = std::fs::read(out_b.join("final")).unwrap();
    assert_eq!(final_a, final_b);
}

#[test]
fn resume_continues_the_loss_trace_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_full = tmp.path().join("full.json");
    write_config(&cfg_full, &toy_config(10));
    let cfg_half = tmp.path().join("half.json");
    write_config(&cfg_half, &toy_config(5));

    let out_full = tmp.path().join("full");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_full.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out_full.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let out_half = tmp.path().join("half");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_half.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out_half.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let out_resumed = tmp.path().join("resumed");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_full.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out_resumed.to_str().unwrap(),
        "--resume",
        out_half.join("final").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let full_log = std::fs::read_to_string(out_full.join("train_log.csv")).unwrap();
    let resumed_log = std::fs::read_to_string(out_resumed.join("train_log.csv")).unwrap();
    let full_tail: Vec<&str> = full_log.lines().skip(6).collect();
    let resumed_rows: Vec<&str> = resumed_log.lines().skip(1).collect();
    assert_eq!(resumed_rows.len(), 5);
    assert_eq!(full_tail, resumed_rows, "steps 6..10 must match bit-exactly");

    let final_full = std::fs::read(out_full.join("final")).unwrap();
    let final_resumed = std::fs::read(out_resumed.join("final")).unwrap();
    assert_eq!(final_full, final_resumed);
}

#[test]
fn adapt_with_zero_episodes_re_emits_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(1));
    let out = tmp.path().join("run");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let target = tmp.path().join("target");
    write_images(&target, 3, true);
    let adapted_dir = tmp.path().join("adapted0");
    let run = cdasr(&[
        "adapt",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
        out.join("final").to_str().unwrap(),
        "--hr-dir",
        target.to_str().unwrap(),
        "--out",
        adapted_dir.to_str().unwrap(),
        "--episodes",
        "0",
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let original = std::fs::read(out.join("final")).unwrap();
    let reemitted = std::fs::read(adapted_dir.join("adapted")).unwrap();
    assert_eq!(original, reemitted, "zero episodes must be the identity");
}

#[test]
fn adapt_runs_episodes_and_writes_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(1));
    let out = tmp.path().join("run");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let target = tmp.path().join("target");
    write_images(&target, 3, true);
    let adapted_dir = tmp.path().join("adapted");
    let run = cdasr(&[
        "adapt",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
        out.join("final").to_str().unwrap(),
        "--hr-dir",
        target.to_str().unwrap(),
        "--out",
        adapted_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let log = std::fs::read_to_string(adapted_dir.join("episode_log.csv")).unwrap();
    assert!(log.starts_with("episode,support_loss_pre,support_loss_post,query_loss,mean_alpha"));
    assert_eq!(log.lines().count(), 3, "header plus two episodes");
    let ckpt = cdasr::checkpoint::load_checkpoint(&adapted_dir.join("adapted")).unwrap();
    assert_eq!(ckpt.meta.cfg.scale, 2);
    assert!(ckpt.opt.is_none(), "adapted checkpoints are for inference");
}

#[test]
fn eval_writes_per_image_rows_and_a_mean_row() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(1));
    let out = tmp.path().join("run");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let eval_dir = tmp.path().join("eval");
    let run = cdasr(&[
        "eval",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
        out.join("final").to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--protocol",
        "y",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    assert!(stdout(&run).contains("PSNR"));

    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image,psnr,ssim");
    assert_eq!(lines.len(), 5, "three image rows plus the mean row");
    assert!(lines[4].starts_with("mean,"));
}

#[test]
fn eval_scale_mismatch_names_both_values_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let hr = tmp.path().join("hr");
    write_images(&hr, 3, false);
    let cfg_path = tmp.path().join("toy.json");
    write_config(&cfg_path, &toy_config(1));
    let out = tmp.path().join("run");
    let run = cdasr(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));

    let run = cdasr(&[
        "eval",
        "--resume",
        out.join("final").to_str().unwrap(),
        "--hr-dir",
        hr.to_str().unwrap(),
        "--scale",
        "4",
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);
    let msg = stderr(&run);
    assert!(
        msg.contains("scale 4") && msg.contains("scale 2"),
        "mismatch must name both values: {msg}"
    );
}

#[test]
fn analyze_domains_writes_coords_and_matrix_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let set_a = tmp.path().join("natural");
    let set_b = tmp.path().join("inverted");
    write_images(&set_a, 3, false);
    write_images(&set_b, 3, true);

    let out1 = tmp.path().join("gap1");
    let run = cdasr(&[
        "analyze-domains",
        set_a.to_str().unwrap(),
        set_b.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    assert!(stdout(&run).contains("mmd[natural vs inverted]"));

    let coords = std::fs::read_to_string(out1.join("coords.csv")).unwrap();
    assert!(coords.starts_with("x,y,tag"));
    assert_eq!(coords.lines().count(), 7, "header plus six points");
    let matrix = std::fs::read_to_string(out1.join("mmd_matrix.csv")).unwrap();
    assert!(matrix.starts_with("tag,natural,inverted"));
    assert_eq!(matrix.lines().count(), 3);

    let out2 = tmp.path().join("gap2");
    let run = cdasr(&[
        "analyze-domains",
        set_a.to_str().unwrap(),
        set_b.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    assert_eq!(
        std::fs::read(out1.join("coords.csv")).unwrap(),
        std::fs::read(out2.join("coords.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(out1.join("mmd_matrix.csv")).unwrap(),
        std::fs::read(out2.join("mmd_matrix.csv")).unwrap()
    );
}
