use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray_npy::{NpzWriter, WriteNpyExt};

use crate::config::{BackboneKind, ExperimentConfig, MissingPattern, Task};
use crate::data::masks;
use crate::data::synthetic::{diffusion_sinusoid, random_graph, SyntheticSpec};
use crate::data::{load_pems, SpatialTemporalDataset};
use crate::error::{invalid, Error, Result};
use crate::runtime::checkpoint::{self, write_json};
use crate::runtime::run;

#[derive(Debug, Parser)]
#[command(name = "stdplm", version, about = "Spatial-temporal forecasting and imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Pretrained,
    Scratch,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PatternArg {
    Rm,
    Cm,
}

impl From<PatternArg> for MissingPattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Rm => MissingPattern::Rm,
            PatternArg::Cm => MissingPattern::Cm,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory (default: runs/<dataset>-<task>-<timestamp>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Replaces the configured seeds; repeat for several.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub backbone: Option<BackboneArg>,
    /// Dataset directory or archive, overriding the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory (one archive + one edge list) or archive path.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a run directory.
    Train(TrainArgs),
    /// Test metrics of a trained run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Predict the horizon after a window.
    Forecast {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory or archive (default: the run's training data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// Exclusive end index of the input window (default: series end).
        #[arg(long)]
        end: Option<usize>,
        /// `.npy` output (T_out x N x C); CSV on stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill missing values of a series.
    Impute {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory or archive (default: the run's training data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// Persisted mask (`.bits`) hiding extra cells.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the first fraction of training windows.
    FewShot {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        ratio: f64,
    },
    /// Evaluate a trained run on another graph without updates.
    ZeroShot {
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Where to write metrics.json (default: <from>/zero-shot-<name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and persist a missing-value mask.
    GenMissing {
        #[arg(long)]
        pattern: PatternArg,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        seed: u64,
        /// Take the shape (and graph for CM) from this config's dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// `T,N,C` for RM masks without a dataset.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
    },
    /// Metric tables and plots for run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic dataset (archive + edge list).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 1800)]
        interval: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn data_paths(data: &Path, adjacency: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    if data.is_dir() {
        let (d, a) = run::dataset_dir_files(data)?;
        Ok((d, adjacency.map(Path::to_path_buf).unwrap_or(a)))
    } else {
        let adj = adjacency.ok_or_else(|| invalid!("--adjacency is required when --data is a file"))?;
        Ok((data.to_path_buf(), adj.to_path_buf()))
    }
}

fn load_with(cfg: &ExperimentConfig, data: &DataArgs) -> Result<SpatialTemporalDataset> {
    let (d, a) = data_paths(&data.data, data.adjacency.as_deref())?;
    load_pems(&d, &a, cfg.model.interval_seconds, &cfg.data.start_time, cfg.model.adjacency_mode)
}

fn run_config(run: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&run.join(checkpoint::CONFIG_FILE))
}

fn dataset_for_run(run: &Path, data: Option<PathBuf>, adjacency: Option<PathBuf>) -> Result<SpatialTemporalDataset> {
    let cfg = run_config(run)?;
    match data {
        Some(data) => load_with(&cfg, &DataArgs { data, adjacency }),
        None => run::load_dataset(&cfg, None),
    }
}

fn prepare_train(args: &TrainArgs) -> Result<(ExperimentConfig, Option<PathBuf>, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let base = args.config.parent().map(Path::to_path_buf);
    if !args.seeds.is_empty() {
        cfg.train.seeds = args.seeds.clone();
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lambda_c {
        cfg.train.lambda_c = v;
    }
    if let Some(b) = args.backbone {
        cfg.model.backbone.kind = match b {
            BackboneArg::Pretrained => BackboneKind::Pretrained,
            BackboneArg::Scratch => BackboneKind::Scratch,
        };
    }
    if let Some(d) = &args.data {
        let cwd = std::env::current_dir().map_err(|e| Error::io("reading working directory", e))?;
        let (p, a) = data_paths(d, args.adjacency.as_deref())?;
        cfg.data.path = cwd.join(p);
        cfg.data.adjacency = cwd.join(a);
    }
    cfg.validate()?;
    let run_dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let task = match cfg.task {
                Task::Forecast => "forecast",
                Task::Impute => "impute",
            };
            let name = if cfg.data.name.is_empty() { "data" } else { &cfg.data.name };
            PathBuf::from("runs").join(format!("{name}-{task}-{}", chrono::Utc::now().format("%Y%m%d-%H%M%S")))
        }
    };
    Ok((cfg, base, run_dir))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let (cfg, base, dir) = prepare_train(&args)?;
            let m = run::train_run(&cfg, base.as_deref(), &dir)?;
            println!("run directory: {}", dir.display());
            print_json(&m)
        }
        Command::FewShot { train, ratio } => {
            let (cfg, base, dir) = prepare_train(&train)?;
            let m = run::few_shot_run(&cfg, ratio, base.as_deref(), &dir)?;
            println!("run directory: {}", dir.display());
            print_json(&m)
        }
        Command::Evaluate { run: dir } => {
            let m = run::evaluate_run(&dir)?;
            write_json(&dir.join("evaluate.json"), &m)?;
            print_json(&m)
        }
        Command::Forecast {
            run: dir,
            data,
            adjacency,
            end,
            out,
        } => {
            let ds = dataset_for_run(&dir, data, adjacency)?;
            let y = run::forecast(&dir, &ds, end)?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
                    y.write_npy(f).map_err(|e| Error::Format(e.to_string()))?;
                }
                None => {
                    println!("step,node,channel,value");
                    for ((t, i, c), v) in y.indexed_iter() {
                        println!("{t},{i},{c},{v}");
                    }
                }
            }
            Ok(())
        }
        Command::Impute {
            run: dir,
            data,
            adjacency,
            mask,
            out,
        } => {
            let ds = dataset_for_run(&dir, data, adjacency)?;
            let m = match mask {
                Some(p) => Some(masks::load_mask(&p)?.0),
                None => None,
            };
            let y = run::impute(&dir, &ds, m.as_ref())?;
            let f = std::fs::File::create(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let mut npz = NpzWriter::new(f);
            npz.add_array("data", &y).map_err(|e| Error::Format(e.to_string()))?;
            npz.finish().map_err(|e| Error::Format(e.to_string()))?;
            Ok(())
        }
        Command::ZeroShot { from, data, out } => {
            let cfg = run_config(&from)?;
            let ds = load_with(&cfg, &data)?;
            let m = run::zero_shot(&from, &ds)?;
            let dir = out.unwrap_or_else(|| from.join(format!("zero-shot-{}", ds.name)));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_json(&dir.join(checkpoint::METRICS_FILE), &m)?;
            print_json(&m)
        }
        Command::GenMissing {
            pattern,
            rate,
            seed,
            config,
            data,
            adjacency,
            shape,
            out,
        } => {
            let pattern: MissingPattern = pattern.into();
            let (mask, meta) = match (config, data, shape) {
                (Some(c), _, _) => {
                    let cfg = ExperimentConfig::load(&c)?;
                    let ds = run::load_dataset(&cfg, c.parent())?;
                    run::gen_missing(&ds, pattern, rate, seed)?
                }
                (None, Some(d), _) => {
                    let cfg = ExperimentConfig::new(Task::Impute);
                    let ds = load_with(&cfg, &DataArgs { data: d, adjacency })?;
                    run::gen_missing(&ds, pattern, rate, seed)?
                }
                (None, None, Some(s)) if pattern == MissingPattern::Rm && s.len() == 3 => {
                    let m = masks::generate_rm((s[0], s[1], s[2]), rate, seed)?;
                    let meta = masks::MaskMeta {
                        pattern,
                        rate,
                        seed,
                        shape: [s[0], s[1], s[2]],
                        achieved_rate: masks::missing_fraction(&m),
                        regions: None,
                    };
                    (m, meta)
                }
                _ => return Err(invalid!("give --config, --data, or --shape T,N,C (RM only)")),
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let path = out.join(run::mask_file_name(&meta));
            masks::save_mask(&path, &mask, &meta)?;
            println!("{} (missing {:.4})", path.display(), meta.achieved_rate);
            Ok(())
        }
        Command::Report { runs, out } => {
            let p = crate::runtime::report::report(&runs, &out)?;
            println!("{}", p.display());
            Ok(())
        }
        Command::Synth {
            out,
            nodes,
            steps,
            channels,
            interval,
            seed,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let g = random_graph(nodes, 0.1, seed)?;
            let spec = SyntheticSpec {
                n_nodes: nodes,
                t_total: steps,
                channels,
                interval_seconds: interval,
                seed,
                ..Default::default()
            };
            let ds = diffusion_sinusoid(&g, &spec)?;
            ds.save_npz(&out.join("data.npz"))?;
            g.write_csv(&out.join("adj.csv"))?;
            println!("{}", out.display());
            Ok(())
        }
    }
}
