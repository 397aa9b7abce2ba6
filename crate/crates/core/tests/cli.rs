//! End-to-end checks of the `sganlab` binary: subcommand wiring, file
//! outputs, and exit codes.

use std::path::Path;
use std::process::Command;

fn sganlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sganlab"))
}

fn tiny_config(outdir: &Path, variant: &str) -> String {
    format!(
        r#"{{
        "dataset": {{"kind": "synthetic", "classes": 4, "per_class_train": 80, "per_class_test": 20, "image_size": 16, "seed": 5}},
        "variant": "{variant}",
        "noise_dim": 8,
        "batch_size": 32,
        "schedule": {{"encoder_epochs": 1, "independent_iterations": 4, "joint_iterations": 2}},
        "arch": {{"fc3_dim": 32, "encoder_channels": [8, 16], "g0_project_ch": 8, "g0_mid_ch": 8, "g1_hidden": [32], "d0_ch": [4, 8], "d1_hidden": [32]}},
        "metrics": {{"score_samples": 120, "score_splits": 4, "diversity_samples_per_condition": 4, "nn_queries": 2, "nn_k": 3}},
        "sample_grid": {{"rows": 4, "cols": 4}},
        "output_dir": "{}"
    }}"#,
        outdir.display()
    )
}

#[test]
fn train_sample_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny_config(&run_dir, "SGAN")).unwrap();

    let out = sganlab()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "resolved_config.json",
        "encoder.sgck",
        "final.sgck",
        "train_log.csv",
        "samples_final.ppm",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("phase,level,step,loss_d,loss_adv,loss_cond,loss_ent,loss_g_total\n"));

    // Sampling twice with one seed gives identical PPM bytes.
    let ckpt = run_dir.join("final.sgck");
    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    for dir in [&s1, &s2] {
        let out = sganlab()
            .args([
                "sample",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--labels",
                "0,1,2,3",
                "--count",
                "16",
                "--seed",
                "9",
                "--out",
                dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "sample failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = std::fs::read(s1.join("samples.ppm")).unwrap();
    let b = std::fs::read(s2.join("samples.ppm")).unwrap();
    assert_eq!(a, b, "cmd_sample is not deterministic");
    assert!(a.starts_with(b"P6\n"));

    // Eval writes the metrics CSV schema.
    let out = sganlab()
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--metrics",
            "score,diversity,nn",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("variant,metric,value,step\n"));
    assert!(metrics.contains("SGAN,classifier_score_mean,"));
    assert!(metrics.contains("SGAN,conditional_diversity,"));
    assert!(metrics.contains("SGAN,nn_mean_distance,"));
    assert!(run_dir.join("nn_grid.ppm").exists());
}

#[test]
fn no_joint_variant_emits_no_joint_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let out = sganlab()
        .args(["train", "--config", &tiny_config(&run_dir, "SGAN-no-joint")])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run_dir.join("after_independent_l0.sgck").exists());
    assert!(run_dir.join("after_independent_l1.sgck").exists());
    assert!(
        !run_dir.join("after_joint.sgck").exists(),
        "no-joint run wrote a joint checkpoint"
    );
}

#[test]
fn ablate_emits_six_rows_per_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("abl");
    let out = sganlab()
        .args(["ablate", "--config", &tiny_config(&run_dir, "SGAN")])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(run_dir.join("ablation.csv")).unwrap();
    for metric in [
        "classifier_score_mean",
        "classifier_score_std",
        "conditional_diversity",
    ] {
        let rows = csv
            .lines()
            .filter(|l| l.contains(&format!(",{metric},")))
            .count();
        assert_eq!(rows, 6, "{metric}: want 6 variant rows, got {rows}\n{csv}");
    }
    for variant in [
        "SGAN",
        "SGAN-no-joint",
        "DCGAN_adv_cond_ent",
        "DCGAN_adv_cond",
        "DCGAN_adv_ent",
        "DCGAN_adv",
    ] {
        assert!(
            run_dir.join(variant).join("final.sgck").exists(),
            "missing {variant} artifacts"
        );
    }
}

#[test]
fn bad_inputs_exit_nonzero() {
    let out = sganlab()
        .args(["train", "--config", r#"{"variant":"bogus"}"#])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));

    let out = sganlab()
        .args(["train", "--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Dependent command with a missing checkpoint.
    let out = sganlab()
        .args([
            "sample",
            "--checkpoint",
            "/nonexistent.sgck",
            "--config",
            "{}",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn encoder_subcommand_trains_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("enc");
    let out = sganlab()
        .args(["train-encoder", "--config", &tiny_config(&run_dir, "SGAN")])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run_dir.join("encoder.sgck").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("test accuracy"), "{stdout}");
}
