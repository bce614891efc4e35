//! End-to-end CLI checks: exit codes, overrides, resolved-config
//! persistence, mask generation, ablation resumption, and reports.

use std::path::Path;
use std::process::Command;

fn segdream() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segdream"))
}

/// Tiny-but-valid settings so each invocation stays fast.
fn tiny_args(steps: usize) -> Vec<String> {
    [
        format!("total_env_steps={steps}"),
        "batch_size=2".into(),
        "seq_len=6".into(),
        "train_ratio=0.1".into(),
        "eval_every=0".into(),
        "eval_episodes=1".into(),
        "env.episode_length=8".into(),
        "model.det_dim=16".into(),
        "model.stoch_groups=4".into(),
        "model.stoch_classes=4".into(),
        "model.cnn_depth=4".into(),
        "agent.horizon=3".into(),
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.clone()])
    .collect()
}

#[test]
fn zero_step_train_exits_zero_with_empty_run_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(["train", "--out-dir", "empty"])
        .args(tiny_args(0))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("empty/metrics.jsonl").is_file());
    assert!(tmp.path().join("empty/checkpoint.sdcp").is_file());
}

#[test]
fn invalid_override_path_exits_one_and_names_it() {
    let out = segdream()
        .args(["train", "--set", "model.bogus_field=3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.bogus_field"), "stderr: {stderr}");
}

#[test]
fn variant_override_is_persisted_in_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(["train", "--out-dir", "var", "--set", "model.variant=sd_selective"])
        .args(tiny_args(0))
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = std::fs::read_to_string(tmp.path().join("var/config.toml")).unwrap();
    assert!(cfg.contains("variant = \"sd_selective\""), "config: {cfg}");
}

#[test]
fn unknown_ablate_variant_exits_one_listing_names() {
    let out = segdream()
        .args(["ablate", "--variants", "sd_bogus", "--seeds", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sd_selective") && stderr.contains("dreamer"));
}

#[test]
fn eval_on_missing_checkpoint_exits_two() {
    let out = segdream()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt.sdcp"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_prints_deterministic_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let run = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(["train", "--out-dir", "ev"])
        .args(tiny_args(20))
        .output()
        .unwrap();
    assert!(run.status.success(), "stderr: {}", String::from_utf8_lossy(&run.stderr));
    let ckpt = tmp.path().join("ev/checkpoint.sdcp");
    let eval = |seed: &str| {
        let out = segdream()
            .args(["eval", "--checkpoint"])
            .arg(&ckpt)
            .args(["--episodes", "2", "--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        String::from_utf8_lossy(&out.stdout).to_string()
    };
    let a = eval("0");
    let b = eval("0");
    assert_eq!(a, b, "same eval seed must print identical summaries");
    assert!(a.contains("mean return"));
}

#[test]
fn gen_masks_round_trip_matches_ground_truth_at_zero_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let run = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(["train", "--out-dir", "rec", "--record"])
        .args(tiny_args(16))
        .output()
        .unwrap();
    assert!(run.status.success());
    let episodes = tmp.path().join("rec/episodes.sdep");
    assert!(episodes.is_file());
    let masks_out = tmp.path().join("masks.sdmk");
    let gen = segdream()
        .args(["gen-masks", "--episodes"])
        .arg(&episodes)
        .args(["--out"])
        .arg(&masks_out)
        .args([
            "--set",
            "masks.kind=simulated_fm",
            "--set",
            "masks.p_fn_component=0.0",
        ])
        .output()
        .unwrap();
    assert!(gen.status.success(), "stderr: {}", String::from_utf8_lossy(&gen.stderr));

    let (header, eps) = segdream::containers::read_episodes(&episodes).unwrap();
    let (mask_header, masks) = segdream::containers::read_masks(&masks_out).unwrap();
    assert_eq!(mask_header.image_size, header.image_size);
    assert_eq!(eps.len(), masks.len());
    for (ep, ms) in eps.iter().zip(masks.iter()) {
        assert_eq!(ep.frames.len(), ms.len());
        for (f, m) in ep.frames.iter().zip(ms.iter()) {
            assert_eq!(&f.mask_gt, m, "zero-noise simulated masks equal ground truth");
        }
    }
}

#[test]
fn ablate_runs_cells_and_resumes_by_skipping_completed_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |extra: &[&str]| {
        let mut v: Vec<String> = vec![
            "ablate".into(),
            "--variants".into(),
            "sd_gt".into(),
            "--seeds".into(),
            "0".into(),
            "--out-dir".into(),
            "sweep".into(),
        ];
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let first = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(args(&[]))
        .args(tiny_args(16))
        .output()
        .unwrap();
    assert!(first.status.success(), "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("running"), "stdout: {stdout}");
    assert!(tmp.path().join("sweep/sd_gt_s0/checkpoint.sdcp").is_file());
    assert!(tmp.path().join("sweep/report/summary.csv").is_file());

    // resumption: the completed cell is skipped
    let second = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(args(&[]))
        .args(tiny_args(16))
        .output()
        .unwrap();
    assert!(second.status.success());
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert!(stdout.contains("skip"), "stdout: {stdout}");
}

#[test]
fn report_command_writes_files(){
    let tmp = tempfile::tempdir().unwrap();
    for (name, seed) in [("r0", "0"), ("r1", "1")] {
        let run = segdream()
            .env("SEGDREAM_OUT", tmp.path())
            .args(["train", "--out-dir", name, "--set", &format!("seed={seed}")])
            .args(tiny_args(16))
            .args(["--set", "eval_every=8"])
            .output()
            .unwrap();
        assert!(run.status.success());
    }
    let out = segdream()
        .env("SEGDREAM_OUT", tmp.path())
        .args(["report", "--out-dir", "rep"])
        .arg(tmp.path().join("r0"))
        .arg(tmp.path().join("r1"))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("rep/summary.csv").is_file());
    assert!(tmp.path().join("rep/return_curves.png").is_file());
}

#[test]
fn help_is_available_for_every_verb() {
    for verb in ["train", "eval", "ablate", "gen-masks", "report"] {
        let out = segdream().args([verb, "--help"]).output().unwrap();
        assert!(out.status.success(), "{verb} --help failed");
    }
    let _ = Path::new("unused");
}
