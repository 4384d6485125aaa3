//! Metric tables and static SVG plots for finished runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::runtime::checkpoint::{self, load_run, read_json};
use crate::runtime::evaluate::{trace, ModelPredictor};
use crate::runtime::prepare::PreparedData;
use crate::runtime::run::{run_dataset, run_mask, RunMetrics};
use crate::runtime::train::SeedOutcome;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// Draws named series against their index.
pub fn line_plot(path: &Path, title: &str, x_label: &str, series: &[(&str, &[f64])]) -> Result<()> {
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (0.0, 1.0)
    };
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..(len - 1) as f64, lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (i, (name, values)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(x, &y)| (x as f64, y)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn fmt_ms(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

/// Markdown table over several runs.
pub fn metrics_table(runs: &[(String, RunMetrics)]) -> String {
    let mut s = String::from(
        "| Run | Task | Dataset | MAE | RMSE | MAPE(%) | Copy-last MAE | Parameters | Trainable Parameters | Trainable Ratio(%) |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for (name, m) in runs {
        let copy = m.baselines.get("copy_last").map_or("-".into(), |b| format!("{:.3}", b.mae));
        let _ = writeln!(
            s,
            "| {name} | {:?} | {} | {} | {} | {} | {copy} | {} | {} | {:.2} |",
            m.task,
            m.dataset,
            fmt_ms(m.mae, m.mae_std),
            fmt_ms(m.rmse, m.rmse_std),
            fmt_ms(m.mape, m.mape_std),
            m.params.total,
            m.params.trainable,
            100.0 * m.trainable_ratio
        );
    }
    s
}

/// Training loss and validation MAE per epoch, one line per seed.
pub fn history_plots(plots: &Path, name: &str, seeds: &[SeedOutcome]) -> Result<()> {
    if seeds.is_empty() {
        return Ok(());
    }
    let labels: Vec<String> = seeds.iter().map(|s| format!("seed {}", s.seed)).collect();
    let loss: Vec<Vec<f64>> = seeds.iter().map(|s| s.history.iter().map(|e| e.train_loss).collect()).collect();
    let val: Vec<Vec<f64>> = seeds.iter().map(|s| s.history.iter().map(|e| e.val_mae).collect()).collect();
    fn series<'a>(labels: &'a [String], v: &'a [Vec<f64>]) -> Vec<(&'a str, &'a [f64])> {
        labels.iter().map(String::as_str).zip(v.iter().map(Vec::as_slice)).collect()
    }
    let (loss, val) = (series(&labels, &loss), series(&labels, &val));
    line_plot(&plots.join("loss.svg"), &format!("{name}: training loss"), "epoch", &loss)?;
    line_plot(&plots.join("val_mae.svg"), &format!("{name}: validation MAE"), "epoch", &val)
}

/// Writes `report.md` into `out` plus, per run, loss curves and a
/// prediction-vs-truth trace under `<run>/plots/`. Returns the report path.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut rows = Vec::new();
    for dir in runs {
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let metrics: RunMetrics = read_json(&dir.join(checkpoint::METRICS_FILE))?;
        let plots = dir.join(checkpoint::PLOTS_DIR);
        std::fs::create_dir_all(&plots).map_err(|e| Error::io(format!("creating {}", plots.display()), e))?;
        let history: Vec<SeedOutcome> = read_json(&dir.join(checkpoint::HISTORY_FILE))?;
        history_plots(&plots, &name, &history)?;
        match prediction_trace(dir) {
            Ok((pred, truth)) => line_plot(
                &plots.join("prediction.svg"),
                &format!("{name}: node 0, first output step"),
                "test window",
                &[("truth", &truth), ("prediction", &pred)],
            )?,
            Err(e) => log::warn!("{}: skipping prediction plot: {e}", dir.display()),
        }
        rows.push((name, metrics));
    }
    let path = out.join("report.md");
    let mut text = String::from("# Results\n\n");
    text.push_str(&metrics_table(&rows));
    checkpoint::write_text(&path, &text)?;
    Ok(path)
}

fn prediction_trace(dir: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (cfg, ds) = run_dataset(dir)?;
    let run = load_run(dir, &ds.graph, true)?;
    let mask = run_mask(dir)?;
    let data = PreparedData::new(&ds, cfg.task, &cfg.model, &cfg.train, mask.as_ref().map(|(m, _)| m))?;
    let windows = &data.test[..data.test.len().min(500)];
    trace(&ModelPredictor(&run.model), &data, windows, 0, cfg.train.eval_batch_size)
}
