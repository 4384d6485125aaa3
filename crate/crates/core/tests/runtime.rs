//! Run-directory, training-loop and CLI behavior on tiny synthetic data.

use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use stdplm::config::{ExperimentConfig, MissingPattern, Task};
use stdplm::data::masks::load_mask;
use stdplm::data::synthetic::{constant_dataset, diffusion_sinusoid, random_graph, SyntheticSpec};
use stdplm::data::SpatialTemporalDataset;
use stdplm::runtime::checkpoint::{self, read_json, RunLock};
use stdplm::runtime::cli::{run_cli, Cli};
use stdplm::runtime::run::{
    evaluate_run, few_shot_run, forecast, impute, train_experiment, train_run, zero_shot, RunMetrics,
};
use stdplm::runtime::train::SeedOutcome;
use stdplm::Error;

const TINY: &str = r#"
task = "forecast"

[data]
path = "data/data.npz"
adjacency = "data/adj.csv"
name = "tiny"

[model]
window = 6
horizon = 3
channels = 1
interval_seconds = 1800
d_t = 4
d_n = 4
k = 4
m = 3
d_h = 8
d_plm = 16
layers = 1

[model.backbone]
kind = "scratch"
heads = 2

[train]
epochs = 2
patience = 5
batch_size = 16
eval_batch_size = 32
seeds = [1]
"#;

fn tiny_dataset(nodes: usize, seed: u64) -> SpatialTemporalDataset {
    let graph = random_graph(nodes, 0.2, seed).unwrap();
    let spec = SyntheticSpec {
        n_nodes: nodes,
        t_total: 240,
        seed,
        ..SyntheticSpec::default()
    };
    diffusion_sinusoid(&graph, &spec).unwrap()
}

fn write_dataset(ds: &SpatialTemporalDataset, dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    ds.save_npz(&dir.join("data.npz")).unwrap();
    ds.graph.write_csv(&dir.join("adj.csv")).unwrap();
}

/// Workspace with `data/` and `config.toml`; returns the config path.
fn workspace(root: &Path, extra: &str) -> PathBuf {
    write_dataset(&tiny_dataset(8, 3), &root.join("data"));
    let path = root.join("config.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn load(path: &Path) -> ExperimentConfig {
    ExperimentConfig::load(path).unwrap()
}

#[test]
fn train_writes_run_directory_and_evaluate_reproduces() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = workspace(root.path(), "");
    let run = root.path().join("run");
    let m = train_run(&load(&cfg_path), Some(root.path()), &run).unwrap();

    for f in ["config.toml", "checkpoint.safetensors", "stats.json", "metrics.json", "history.json", "params.md"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("masks").is_dir());
    assert!(run.join("plots/loss.svg").is_file());
    assert!(!run.join(checkpoint::LOCK_FILE).exists());

    let json: serde_json::Value = read_json(&run.join("metrics.json")).unwrap();
    for key in ["mae", "rmse", "mape"] {
        assert!(json[key].as_f64().unwrap().is_finite());
        assert_eq!(json["per_seed"][key].as_array().unwrap().len(), 1);
    }

    let again = evaluate_run(&run).unwrap();
    assert_eq!(again, m.checkpoint_metrics);
    // The stored config alone is enough to evaluate from another directory.
    let moved = root.path().join("moved");
    std::fs::rename(&run, &moved).unwrap();
    assert_eq!(evaluate_run(&moved).unwrap(), m.checkpoint_metrics);
}

#[test]
fn seeds_are_aggregated_with_sample_std() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = load(&workspace(root.path(), ""));
    cfg.train.seeds = vec![1, 2, 3];
    cfg.train.epochs = 1;
    let m = train_run(&cfg, Some(root.path()), &root.path().join("run")).unwrap();
    let maes = &m.per_seed.mae;
    assert_eq!(maes.len(), 3);
    let mean = maes.iter().sum::<f64>() / 3.0;
    let std = (maes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((m.mae - mean).abs() < 1e-12);
    assert!((m.mae_std - std).abs() < 1e-12);
    let best = m.per_seed.best_val_mae.iter().cloned().fold(f64::INFINITY, f64::min);
    let idx = m.per_seed.best_val_mae.iter().position(|v| *v == best).unwrap();
    assert_eq!(m.checkpoint_seed, m.seeds[idx]);
}

#[test]
fn same_seed_reproduces_trajectory() {
    let root = tempfile::tempdir().unwrap();
    let cfg = load(&workspace(root.path(), ""));
    let a = train_run(&cfg, Some(root.path()), &root.path().join("a")).unwrap();
    let b = train_run(&cfg, Some(root.path()), &root.path().join("b")).unwrap();
    let ha: Vec<SeedOutcome> = read_json(&root.path().join("a/history.json")).unwrap();
    let hb: Vec<SeedOutcome> = read_json(&root.path().join("b/history.json")).unwrap();
    let strip = |h: &[SeedOutcome]| -> Vec<(f64, f64)> { h[0].history.iter().map(|e| (e.train_loss, e.val_mae)).collect() };
    assert_eq!(strip(&ha), strip(&hb));
    assert_eq!(a.mae, b.mae);
}

#[test]
fn frozen_model_stops_after_patience() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = load(&workspace(root.path(), ""));
    cfg.train.lr = 0.0;
    cfg.train.epochs = 500;
    cfg.train.patience = 50;
    let ds = stdplm::runtime::run::load_dataset(&cfg, Some(root.path())).unwrap();
    let out = train_experiment(&cfg, &ds, None).unwrap();
    let seed = &out.seeds[0];
    assert_eq!(seed.best_epoch, 1);
    assert_eq!(seed.stopped_epoch, 51);
    assert_eq!(seed.history.len(), 51);
}

#[test]
fn checkpoint_is_best_validation_epoch() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = load(&workspace(root.path(), ""));
    cfg.train.epochs = 6;
    let ds = stdplm::runtime::run::load_dataset(&cfg, Some(root.path())).unwrap();
    let out = train_experiment(&cfg, &ds, None).unwrap();
    let seed = &out.seeds[0];
    let min = seed.history.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(seed.best_val_mae, min);
    assert_eq!(seed.history[seed.best_epoch - 1].val_mae, min);
    // Restored weights reproduce the best validation MAE.
    let val = stdplm::runtime::evaluate::evaluate_windows(
        &stdplm::runtime::evaluate::ModelPredictor(&out.model),
        &out.data,
        &out.data.val,
        cfg.train.eval_batch_size,
    )
    .unwrap();
    assert_eq!(val.mae, min);
}

#[test]
fn constant_series_is_learned() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = load(&workspace(root.path(), ""));
    cfg.train.epochs = 20;
    cfg.train.patience = 20;
    let graph = random_graph(6, 0.2, 1).unwrap();
    let ds = constant_dataset(&graph, 240, 37.5, 1800).unwrap();
    let out = train_experiment(&cfg, &ds, None).unwrap();
    let best = out.seeds[0].best_val_mae;
    assert!(best < 0.05, "validation MAE {best} on a constant series");
    assert!(out.metrics.mae.is_finite());
}

#[test]
fn lock_file_blocks_second_trainer() {
    let root = tempfile::tempdir().unwrap();
    let cfg = load(&workspace(root.path(), ""));
    let run = root.path().join("run");
    let _held = RunLock::acquire(&run).unwrap();
    let err = train_run(&cfg, Some(root.path()), &run).unwrap_err();
    assert!(matches!(err, Error::Locked(_)), "{err}");
}

#[test]
fn few_shot_keeps_a_prefix() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = load(&workspace(root.path(), ""));
    cfg.train.epochs = 1;
    let full = train_run(&cfg, Some(root.path()), &root.path().join("full")).unwrap();
    let part = few_shot_run(&cfg, 0.2, Some(root.path()), &root.path().join("part")).unwrap();
    assert_eq!(part.train_windows, (0.2 * full.train_windows as f64).floor() as usize);
    let same = few_shot_run(&cfg, 1.0, Some(root.path()), &root.path().join("same")).unwrap();
    assert_eq!(same.train_windows, full.train_windows);
    assert!(few_shot_run(&cfg, 0.001, Some(root.path()), &root.path().join("none")).is_err());
    assert!(few_shot_run(&cfg, 1.5, Some(root.path()), &root.path().join("bad")).is_err());
}

#[test]
fn zero_shot_identity_and_other_graph() {
    let root = tempfile::tempdir().unwrap();
    let cfg = load(&workspace(root.path(), ""));
    let run = root.path().join("run");
    train_run(&cfg, Some(root.path()), &run).unwrap();
    let source = stdplm::runtime::run::load_dataset(&cfg, Some(root.path())).unwrap();
    let same = zero_shot(&run, &source).unwrap();
    let eval = evaluate_run(&run).unwrap();
    assert_eq!((same.mae, same.rmse, same.mape), (eval.mae, eval.rmse, eval.mape));

    let other = tiny_dataset(13, 17);
    let t = zero_shot(&run, &other).unwrap();
    assert!(t.mae.is_finite() && t.rmse.is_finite() && t.mape.is_finite());

    let wide = SpatialTemporalDataset::new(
        "two-channel",
        ndarray::Array3::from_elem((240, 5, 2), 1.0f32),
        stdplm::data::dataset::regular_timestamps(0, 240, 1800),
        random_graph(5, 0.2, 2).unwrap(),
        1800,
    )
    .unwrap();
    assert!(matches!(zero_shot(&run, &wide), Err(Error::Config(_))));
}

#[test]
fn imputation_run_with_injected_mask() {
    let root = tempfile::tempdir().unwrap();
    let extra = "\n[missing]\npattern = \"cm\"\nrate = 0.5\nseed = 4\n";
    let mut cfg = load(&workspace(root.path(), extra));
    cfg.task = Task::Impute;
    cfg.model.horizon = cfg.model.window;
    let run = root.path().join("run");
    let m = train_run(&cfg, Some(root.path()), &run).unwrap();
    assert!(m.mae.is_finite());
    let masks: Vec<_> = std::fs::read_dir(run.join("masks")).unwrap().map(|e| e.unwrap().path()).collect();
    let bits = masks.iter().find(|p| p.extension().unwrap() == "bits").expect("mask file");
    let (mask, meta) = load_mask(bits).unwrap();
    assert_eq!(meta.pattern, MissingPattern::Cm);
    assert_eq!(mask.dim(), (240, 8, 1));
    assert_eq!(evaluate_run(&run).unwrap(), m.checkpoint_metrics);

    let ds = stdplm::runtime::run::load_dataset(&cfg, Some(root.path())).unwrap();
    let filled = impute(&run, &ds, Some(&mask)).unwrap();
    assert_eq!(filled.dim(), ds.data.dim());
    // Visible cells are passed through unchanged.
    for ((idx, v), keep) in filled.indexed_iter().zip(mask.iter()) {
        assert!(v.is_finite());
        if *keep {
            assert_eq!(*v, ds.data[idx]);
        }
    }
}

#[test]
fn forecast_shape_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let cfg = load(&workspace(root.path(), ""));
    let run = root.path().join("run");
    train_run(&cfg, Some(root.path()), &run).unwrap();
    let ds = stdplm::runtime::run::load_dataset(&cfg, Some(root.path())).unwrap();
    let a = forecast(&run, &ds, Some(100)).unwrap();
    let b = forecast(&run, &ds, Some(100)).unwrap();
    assert_eq!(a.dim(), (3, 8, 1));
    assert_eq!(a, b);
    assert!(forecast(&run, &ds, Some(3)).is_err());
}

#[test]
fn cli_subcommands_in_process() {
    let root = tempfile::tempdir().unwrap();
    let cfg = workspace(root.path(), "");
    let run = root.path().join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cli = |args: &[String]| {
        let mut argv = vec!["stdplm".to_string()];
        argv.extend_from_slice(args);
        run_cli(Cli::try_parse_from(argv).unwrap())
    };
    cli(&["train".into(), "--config".into(), s(&cfg), "--seed".into(), "1".into(), "--run-dir".into(), s(&run)]).unwrap();
    let m: RunMetrics = read_json(&run.join("metrics.json")).unwrap();
    assert_eq!(m.seeds, vec![1]);

    cli(&["evaluate".into(), "--run".into(), s(&run)]).unwrap();
    assert!(run.join("evaluate.json").is_file());

    let npy = root.path().join("f.npy");
    cli(&["forecast".into(), "--run".into(), s(&run), "--out".into(), s(&npy)]).unwrap();
    let y: ndarray::Array3<f32> = ndarray_npy::read_npy(&npy).unwrap();
    assert_eq!(y.dim(), (3, 8, 1));

    let masks = root.path().join("masks");
    cli(&[
        "gen-missing".into(),
        "--pattern".into(),
        "rm".into(),
        "--rate".into(),
        "0.7".into(),
        "--seed".into(),
        "7".into(),
        "--config".into(),
        s(&cfg),
        "--out".into(),
        s(&masks),
    ])
    .unwrap();
    let bits = masks.join("rm-0.7-7.bits");
    assert!(bits.is_file() && masks.join("rm-0.7-7.json").is_file());
    let (mask, meta) = load_mask(&bits).unwrap();
    assert_eq!(meta.shape, [240, 8, 1]);
    assert_eq!(mask, stdplm::data::generate_rm((240, 8, 1), 0.7, 7).unwrap());

    let filled = root.path().join("filled.npz");
    let forecast_run = cli(&["impute".into(), "--run".into(), s(&run), "--out".into(), s(&filled)]);
    assert!(matches!(forecast_run, Err(Error::Config(_))));
    let impute_cfg = root.path().join("impute.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("task = \"forecast\"", "task = \"impute\"").replace("horizon = 3", "horizon = 6");
    std::fs::write(&impute_cfg, text).unwrap();
    let impute_run = root.path().join("impute-run");
    cli(&["train".into(), "--config".into(), s(&impute_cfg), "--epochs".into(), "1".into(), "--run-dir".into(), s(&impute_run)]).unwrap();
    cli(&["impute".into(), "--run".into(), s(&impute_run), "--mask".into(), s(&bits), "--out".into(), s(&filled)]).unwrap();
    let mut npz = ndarray_npy::NpzReader::new(std::fs::File::open(&filled).unwrap()).unwrap();
    let y: ndarray::Array3<f32> = npz.by_name("data").unwrap();
    assert_eq!(y.dim(), (240, 8, 1));

    let target = root.path().join("target");
    write_dataset(&tiny_dataset(11, 5), &target);
    let zs = root.path().join("zs");
    cli(&["zero-shot".into(), "--from".into(), s(&run), "--data".into(), s(&target), "--out".into(), s(&zs)]).unwrap();
    let z: serde_json::Value = read_json(&zs.join("metrics.json")).unwrap();
    for key in ["mae", "rmse", "mape"] {
        assert!(z[key].as_f64().unwrap().is_finite());
    }

    let few = root.path().join("few");
    cli(&[
        "few-shot".into(),
        "--config".into(),
        s(&cfg),
        "--ratio".into(),
        "0.5".into(),
        "--epochs".into(),
        "1".into(),
        "--run-dir".into(),
        s(&few),
    ])
    .unwrap();

    let out = root.path().join("report");
    cli(&["report".into(), "--run".into(), s(&run), "--run".into(), s(&few), "--out".into(), s(&out)]).unwrap();
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.contains("| run |") && md.contains("| few |"));
    for plot in ["loss.svg", "val_mae.svg", "prediction.svg"] {
        assert!(run.join("plots").join(plot).is_file(), "{plot}");
    }
}

#[test]
fn binary_rejects_unknown_flags_and_reports_errors() {
    let bin = env!("CARGO_BIN_EXE_stdplm");
    let out = Command::new(bin).args(["train", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = Command::new(bin).args(["evaluate", "--run", "/nonexistent/run"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn binary_synth_then_train() {
    let root = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_stdplm");
    let data = root.path().join("data");
    let status = Command::new(bin)
        .args(["synth", "--out", data.to_str().unwrap(), "--nodes", "8", "--steps", "240", "--seed", "3"])
        .status()
        .unwrap();
    assert!(status.success());
    let cfg = root.path().join("config.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = root.path().join("run");
    let out = Command::new(bin)
        .env("RUST_LOG", "warn")
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--run-dir", run.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoint.safetensors").is_file());
}

#[test]
fn pretrained_backbone_from_cache_env() {
    use stdplm::backbone::gpt2::{random_checkpoint, write_checkpoint, Gpt2Shape, CACHE_DIR_ENV};
    let root = tempfile::tempdir().unwrap();
    let cache = root.path().join("cache");
    let shape = Gpt2Shape {
        vocab: 50,
        n_positions: 16,
        width: 16,
        layers: 2,
    };
    std::fs::create_dir_all(cache.join("tiny-gpt")).unwrap();
    write_checkpoint(&random_checkpoint(shape, 1).unwrap(), &cache.join("tiny-gpt/model.safetensors")).unwrap();

    let extra = "";
    let cfg_path = workspace(root.path(), extra);
    let text = std::fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("kind = \"scratch\"", "kind = \"pretrained\"\ncheckpoint = \"tiny-gpt\"\nlora_rank = 2");
    std::fs::write(&cfg_path, text).unwrap();

    let bin = env!("CARGO_BIN_EXE_stdplm");
    let run = root.path().join("run");
    let train = |env: Option<&Path>| {
        let mut c = Command::new(bin);
        c.env("RUST_LOG", "warn")
            .env_remove(CACHE_DIR_ENV)
            .env("HOME", root.path())
            .args(["train", "--config", cfg_path.to_str().unwrap(), "--epochs", "1", "--run-dir", run.to_str().unwrap()]);
        if let Some(p) = env {
            c.env(CACHE_DIR_ENV, p);
        }
        c.output().unwrap()
    };
    let missing = train(None);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains(CACHE_DIR_ENV));

    let ok = train(Some(&cache));
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let m: RunMetrics = read_json(&run.join("metrics.json")).unwrap();
    assert!(m.params.frozen > 0 && m.params.lora > 0);

    // Frozen weights are not copied into the run; evaluation reloads them.
    let out = Command::new(bin)
        .env(CACHE_DIR_ENV, &cache)
        .args(["evaluate", "--run", run.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tensors = candle_core::safetensors::load(run.join("checkpoint.safetensors"), &candle_core::Device::Cpu).unwrap();
    assert!(!tensors.contains_key("backbone.wte.weight"));
}
