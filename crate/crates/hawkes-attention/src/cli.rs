//! Command layer behind the `hawkes-attention` binary.
//!
//! Every command reads one TOML config (plus `--set` overrides), writes a
//! resolved `config.echo`, and drops its artifacts into the output directory
//! under fixed names: `dataset.json`/`events.csv` (simulate),
//! `checkpoint.bin` + `metrics.json` + `train_report.json` (train/ts-train),
//! `metrics.json` + `predictions.csv` (eval/predict), `kernels.csv` +
//! `effective_kernels.csv` (export-kernels), `metrics.json` (grad-check,
//! ts-eval). Exit codes: 2 config errors, 3 data errors, 4 numerical
//! divergence.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::data::{self, EventDataset};
use crate::error::{Error, Result};
use crate::hawkes;
use crate::infer;
use crate::kernels;
use crate::model::{self, ModelState};
use crate::timeseries;
use crate::train;

#[derive(Parser, Debug)]
#[command(name = "hawkes-attention", version, about = "Marked temporal point processes with time-modulated attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key: `--set section.key=value` (repeatable).
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    /// Output directory (default `out`, or `out_dir` from the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Draw synthetic sequences from an exponential Hawkes process.
    Simulate,
    /// Fit the attention model on an event dataset.
    Train,
    /// Next-event prediction metrics on a held-out split.
    Eval,
    /// Per-prefix predictions dumped to CSV.
    Predict,
    /// Export raw and attention-mixed kernel curves.
    ExportKernels,
    /// Finite-difference verification of the NLL gradient.
    GradCheck,
    /// Fit the series forecasting variant.
    TsTrain,
    /// MSE/MAE of a trained forecaster.
    TsEval,
}

/// Runs one command; artifacts land in the resolved output directory.
pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(
        cli.config.as_deref(),
        &cli.set,
        cli.out.as_deref().and_then(Path::to_str),
        cli.seed,
    )?;
    let out_dir = PathBuf::from(config.out_dir.clone().unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.echo"), config.echo()?)?;

    match cli.command {
        Command::Simulate => cmd_simulate(&config, &out_dir),
        Command::Train => cmd_train(&config, &out_dir),
        Command::Eval | Command::Predict => cmd_eval(&config, &out_dir),
        Command::ExportKernels => cmd_export_kernels(&config, &out_dir),
        Command::GradCheck => cmd_grad_check(&config, &out_dir),
        Command::TsTrain => cmd_ts_train(&config, &out_dir),
        Command::TsEval => cmd_ts_eval(&config, &out_dir),
    }
}

/// Clap + run + exit-code mapping, for a thin `main`.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_metrics(out_dir: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(out_dir.join("metrics.json"), text)?;
    Ok(())
}

fn cmd_simulate(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let section = config
        .hawkes
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [hawkes] section".into()))?;
    let params = section.params()?;
    if !params.is_stable() {
        eprintln!(
            "warning: branching spectral radius {:.3} >= 1; the process is unstable",
            params.branching_spectral_radius()
        );
    }
    let ds = hawkes::simulate_dataset(&params, section.n_sequences, section.horizon, config.seed)?;
    data::write_dataset(&ds, &out_dir.join("dataset.json"))?;
    data::write_csv(&ds, &out_dir.join("events.csv"))?;
    let total = ds.total_events();
    write_metrics(
        out_dir,
        &serde_json::json!({
            "n_sequences": ds.len(),
            "num_types": ds.num_types,
            "total_events": total,
            "mean_rate": total as f64 / (section.n_sequences as f64 * section.horizon),
        }),
    )
}

/// Train/valid/test from explicit paths or one dataset plus split ratios.
fn load_splits(config: &RunConfig) -> Result<(EventDataset, EventDataset, EventDataset)> {
    let d = &config.data;
    if let (Some(tr), Some(va)) = (&d.train, &d.valid) {
        let train = data::load_dataset(Path::new(tr))?;
        let valid = data::load_dataset(Path::new(va))?;
        let test = match &d.test {
            Some(te) => data::load_dataset(Path::new(te))?,
            None => valid.clone(),
        };
        if valid.num_types != train.num_types || test.num_types != train.num_types {
            return Err(Error::Config("splits disagree on the number of event types".into()));
        }
        return Ok((train, valid, test));
    }
    let path = d
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("need data.dataset or data.train/data.valid".into()))?;
    let ds = data::load_dataset(Path::new(path))?;
    let (tr, va, te) = data::split_indices(ds.len(), (d.split[0], d.split[1], d.split[2]), d.split_seed)?;
    Ok((
        ds.subset(&tr, format!("{}-train", ds.name)),
        ds.subset(&va, format!("{}-valid", ds.name)),
        ds.subset(&te, format!("{}-test", ds.name)),
    ))
}

fn resolve_checkpoint(config: &RunConfig, out_dir: &Path) -> PathBuf {
    match &config.model.checkpoint {
        Some(p) => PathBuf::from(p),
        None => out_dir.join("checkpoint.bin"),
    }
}

fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let (train_ds, valid_ds, _) = load_splits(config)?;
    let mc = config.model_config(train_ds.num_types);
    let mut state = ModelState::init(mc, config.model.init_seed)?;
    let tc = config.train.to_train_config(config.seed);
    let report = train::fit(&mut state, &train_ds, &valid_ds, &tc, &out_dir.join("checkpoint.bin"))?;
    write_metrics(out_dir, &report.metrics_json())?;
    let mut full = serde_json::to_string_pretty(&report)?;
    full.push('\n');
    std::fs::write(out_dir.join("train_report.json"), full)?;
    Ok(())
}

fn cmd_eval(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let (_, _, test_ds) = load_splits(config)?;
    let state = train::load_checkpoint(&resolve_checkpoint(config, out_dir))?;
    let pc = config.predict.to_prediction_config(config.seed);
    let (report, records) = infer::evaluate(&state, &test_ds, &pc)?;
    write_metrics(out_dir, &serde_json::to_value(&report)?)?;
    infer::write_predictions_csv(&records, &out_dir.join("predictions.csv"))?;
    Ok(())
}

fn cmd_export_kernels(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let state = train::load_checkpoint(&resolve_checkpoint(config, out_dir))?;
    let ex = &config.export;
    let grid_max = ex.grid_max.unwrap_or(3.0 * state.kernels.dt_scale());
    let points = ex.grid_points.max(2);
    let grid: Vec<f64> = (0..points)
        .map(|i| grid_max * i as f64 / (points - 1) as f64)
        .collect();
    kernels::export_curves(&state.kernels, &grid, &out_dir.join("kernels.csv"))?;

    // effective curves need a reference context
    let reference = ex.dataset.clone().or_else(|| config.data.dataset.clone());
    let mut effective_rows = 0usize;
    if let Some(path) = reference {
        let ds = data::load_dataset(Path::new(&path))?;
        let seq = ds
            .sequences
            .get(ex.sequence_index)
            .ok_or_else(|| Error::Config(format!("export.sequence_index {} out of range", ex.sequence_index)))?;
        let position = ex.position.unwrap_or(seq.len() - 1);
        let mut csv = String::from("source,target,head,dt,kappa\n");
        for source in 0..ds.num_types {
            for target in 0..ds.num_types {
                let ek = model::effective_kernel(&state, seq, position, source, target, &grid)?;
                for (h, curve) in ek.per_head.iter().enumerate() {
                    for (dt, v) in grid.iter().zip(curve) {
                        csv.push_str(&format!("{source},{target},{h},{dt},{v}\n"));
                        effective_rows += 1;
                    }
                }
                for (dt, v) in grid.iter().zip(&ek.mixed) {
                    csv.push_str(&format!("{source},{target},-1,{dt},{v}\n"));
                    effective_rows += 1;
                }
            }
        }
        std::fs::write(out_dir.join("effective_kernels.csv"), csv)?;
    }

    write_metrics(
        out_dir,
        &serde_json::json!({
            "grid_points": points,
            "grid_max": grid_max,
            "dt_scale": state.kernels.dt_scale(),
            "effective_rows": effective_rows,
        }),
    )
}

fn cmd_grad_check(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let path = config
        .data
        .dataset
        .as_ref()
        .or(config.data.train.as_ref())
        .ok_or_else(|| Error::Config("grad-check needs data.dataset".into()))?;
    let ds = data::load_dataset(Path::new(path))?;
    let gc = &config.gradcheck;
    let seq = ds
        .sequences
        .get(gc.sequence_index)
        .ok_or_else(|| Error::Config(format!("gradcheck.sequence_index {} out of range", gc.sequence_index)))?;
    let truncated = seq.prefix(gc.max_events.min(seq.len()));
    let toy = EventDataset::new(ds.num_types, vec![truncated], "gradcheck")?;

    let mc = config.model_config(ds.num_types);
    let mut state = ModelState::init(mc, config.model.init_seed)?;
    state.kernels.set_dt_scale(toy.mean_inter_event_time())?;
    let batch = data::batch(&toy, &[0], gc.s_mc, data::QuadratureMode::Midpoint, 0)?;
    let report = train::grad_check(&state, &batch, gc.tolerance)?;
    for (name, err) in &report.per_tensor {
        println!("{name}: {err:.3e}");
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e}): {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    write_metrics(out_dir, &serde_json::to_value(&report)?)
}

fn cmd_ts_train(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let ts = &config.ts;
    let path = ts
        .series
        .as_ref()
        .ok_or_else(|| Error::Config("ts-train needs ts.series".into()))?;
    let ds = timeseries::load_series_csv(Path::new(path), (ts.split[0], ts.split[1], ts.split[2]))?;
    let mut state = timeseries::TsModelState::init(ts.to_ts_config(), ds.channels, config.model.init_seed)?;
    let tc = ts.to_ts_train_config(config.seed);
    let report = timeseries::ts_fit(&mut state, &ds, &tc, &out_dir.join("checkpoint.bin"))?;
    write_metrics(out_dir, &report.metrics_json())?;
    let mut full = serde_json::to_string_pretty(&report)?;
    full.push('\n');
    std::fs::write(out_dir.join("train_report.json"), full)?;
    Ok(())
}

fn cmd_ts_eval(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let ts = &config.ts;
    let path = ts
        .series
        .as_ref()
        .ok_or_else(|| Error::Config("ts-eval needs ts.series".into()))?;
    let ds = timeseries::load_series_csv(Path::new(path), (ts.split[0], ts.split[1], ts.split[2]))?;
    let ckpt = match &ts.checkpoint {
        Some(p) => PathBuf::from(p),
        None => out_dir.join("checkpoint.bin"),
    };
    let state = timeseries::load_ts_checkpoint(&ckpt)?;
    let (mse, mae) = timeseries::ts_evaluate(&state, &ds)?;
    let naive = timeseries::naive_last_value_mse(&ds, state.config.input_len, state.config.horizon)?;
    write_metrics(
        out_dir,
        &serde_json::json!({
            "mse": mse,
            "mae": mae,
            "naive_last_value_mse": naive,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ha-cli-tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn cli(command: Command, sets: Vec<String>, out: &Path) -> Cli {
        Cli {
            command,
            config: None,
            set: sets,
            out: Some(out.to_path_buf()),
            seed: Some(11),
        }
    }

    #[test]
    fn simulate_writes_dataset_and_echo() {
        let out = tmp("simulate");
        let sets = vec![
            "hawkes.mu=[2.0]".to_string(),
            "hawkes.alpha=[[0.0]]".to_string(),
            "hawkes.beta=[[1.0]]".to_string(),
            "hawkes.horizon=10.0".to_string(),
            "hawkes.n_sequences=3".to_string(),
        ];
        run(&cli(Command::Simulate, sets, &out)).unwrap();
        assert!(out.join("config.echo").exists());
        assert!(out.join("metrics.json").exists());
        assert!(out.join("events.csv").exists());
        let ds = data::load_dataset(&out.join("dataset.json")).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_types, 1);
    }

    #[test]
    fn missing_section_is_a_config_error() {
        let out = tmp("missing");
        let err = run(&cli(Command::Simulate, vec![], &out)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let out = tmp("nodata");
        let sets = vec!["data.dataset=does-not-exist.json".to_string()];
        let err = run(&cli(Command::Train, sets, &out)).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
