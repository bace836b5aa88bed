//! End-to-end pipeline checks: the CLI surface (train / eval / sweep /
//! report / render), the signed-distance + NCC training path, and the
//! dataset cache.

use std::path::Path;
use std::process::Command;

use coopreg::experiment::{DatasetSpec, ExperimentSpec, Method};
use coopreg::field::to_signed_distance;
use coopreg::loss::Matching;
use coopreg::nets::{CaeConfig, PrimaryConfig};
use coopreg::synth::{build_pair_dataset, ShapeFamily};
use coopreg::train::{train, TrainConfig};

fn tiny_spec(dir: &Path, method: Method) -> ExperimentSpec {
    let primary = PrimaryConfig {
        levels: 2,
        base_channels: 4,
        skip_connections: true,
        bottleneck_dim: None,
        input_size: 64,
    };
    let cae = (method == Method::Cae).then(|| CaeConfig {
        h: 1,
        levels: 2,
        base_channels: 4,
        input_size: 64,
    });
    ExperimentSpec {
        name: format!("cli-{method}"),
        method,
        dataset: DatasetSpec {
            family: ShapeFamily::Linear,
            n_shapes: 4,
            seed: 5,
            max_train_pairs: None,
        },
        train: TrainConfig {
            total_iterations: 40,
            warmup_fraction: 0.5,
            batch_size: 2,
            seed: 5,
            primary,
            cae,
            ..TrainConfig::default()
        },
        output_dir: dir.join(format!("cli-{method}")),
        ae_compare_h: 1,
    }
}

fn coopreg_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coopreg"))
}

#[test]
fn cli_train_eval_sweep_render_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), Method::Cae);
    let config_path = dir.path().join("exp.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();

    let status = coopreg_cmd()
        .args(["train", "--config"])
        .arg(&config_path)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(spec.output_dir.join("checkpoint/meta.json").exists());
    assert!(spec.output_dir.join("history.csv").exists());
    assert!(spec.output_dir.join("config.json").exists());

    let output = coopreg_cmd()
        .args(["eval", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("linear-boxbump"), "eval output: {stdout}");
    assert!(spec.output_dir.join("eval.csv").exists());

    let status = coopreg_cmd()
        .args(["sweep", "--config"])
        .arg(&config_path)
        .args(["--sources", "10"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(spec.output_dir.join("sweep.csv").exists());
    assert!(spec.output_dir.join("figures/sweep_strip.png").exists());

    let status = coopreg_cmd()
        .args(["render", "--config"])
        .arg(&config_path)
        .args(["--pairs", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(spec.output_dir.join("figures/falsecolor_00.png").exists());
    assert!(spec.output_dir.join("figures/falsecolor_01.png").exists());

    let report_config = serde_json::json!({
        "experiments": [spec.output_dir],
        "output": dir.path().join("combined.csv"),
    });
    let report_path = dir.path().join("report.json");
    std::fs::write(&report_path, serde_json::to_vec(&report_config).unwrap()).unwrap();
    let status = coopreg_cmd()
        .args(["report", "--config"])
        .arg(&report_path)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("combined.csv").exists());
    assert!(dir.path().join("combined.txt").exists());
}

#[test]
fn cli_seed_override_changes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), Method::Undr);
    let config_path = dir.path().join("exp.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();

    let run = |seed: &str, out: &Path| {
        let mut spec = tiny_spec(dir.path(), Method::Undr);
        spec.output_dir = out.to_path_buf();
        let cfg = out.with_extension("json");
        std::fs::write(&cfg, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
        let status = coopreg_cmd()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(out.join("history.csv")).unwrap()
    };

    let a = run("11", &dir.path().join("run-a"));
    let b = run("11", &dir.path().join("run-b"));
    let c = run("12", &dir.path().join("run-c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cli_fails_cleanly_on_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path(), Method::Undr);
    let config_path = dir.path().join("exp.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();

    let output = coopreg_cmd()
        .args(["eval", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
}

/// Signed-distance representation with the NCC matching loss, the 2D
/// exercise of the pipeline used for distance-transform imagery.
#[test]
fn sdt_ncc_training_smoke() {
    let binary = build_pair_dataset(ShapeFamily::Rotating, 4, 9, None).unwrap();
    let dataset = binary
        .map_images(|img| to_signed_distance(img, 0.5))
        .unwrap();

    // the SDT of a box-bump image is a valid, boundary-rich image
    let sdt = &dataset.samples()[0].image;
    assert!(sdt.min() >= 0.0 && sdt.max() <= 1.0);
    assert!(sdt.min() < 0.4 && sdt.max() > 0.6);

    let config = TrainConfig {
        total_iterations: 40,
        warmup_fraction: 0.5,
        batch_size: 2,
        seed: 2,
        matching: Matching::Ncc,
        ncc_window: 9,
        primary: PrimaryConfig {
            levels: 2,
            base_channels: 4,
            skip_connections: true,
            bottleneck_dim: None,
            input_size: 64,
        },
        cae: None,
        ..TrainConfig::default()
    };
    let model = train(&config, &dataset).unwrap();
    let last = model.history.records.last().unwrap();
    assert!(last.matching.is_finite());
    assert!(last.matching >= 0.0);
}

#[test]
fn dataset_cache_reload_preserves_split() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_pair_dataset(ShapeFamily::Rotating, 6, 21, None).unwrap();
    ds.write_cache(dir.path()).unwrap();
    let back =
        coopreg::synth::PairDataset::load_cache(dir.path(), ShapeFamily::Rotating, 6, 21).unwrap();
    assert_eq!(back.test_indices(), ds.test_indices());
    assert_eq!(back.n_samples(), 6);
}
