//! The forecasting variant on a synthetic two-channel series: train, compare
//! against the repeat-last-value baseline, forecast in original units.
//!
//! Run with: cargo run --release --example forecast_series

use hawkes_attention::timeseries::{self, SeriesDataset, TsConfig, TsModelState, TsTrainConfig};

fn main() -> hawkes_attention::Result<()> {
    // sinusoid + trend with light noise, sampled on a regular grid
    let n = 1600;
    let timestamps: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut values = Vec::with_capacity(n * 2);
    let mut noise = 0.7f64;
    for i in 0..n {
        noise = (noise * 1103515245.0 + 12345.0) % 1.0;
        values.push((i as f64 * 0.07).sin() + 0.002 * i as f64 + 0.02 * (noise - 0.5));
        values.push((i as f64 * 0.11).cos() - 0.001 * i as f64);
    }
    let ds = SeriesDataset::new(timestamps, values, 2, (0.7, 0.1, 0.2))?;

    let config = TsConfig {
        input_len: 96,
        horizon: 24,
        stride: 6,
        ..TsConfig::default()
    };
    let mut state = TsModelState::init(config, ds.channels, 0)?;
    let cfg = TsTrainConfig {
        max_epochs: 10,
        ..TsTrainConfig::default()
    };
    let ckpt = std::env::temp_dir().join("forecast_series.ckpt");
    let report = timeseries::ts_fit(&mut state, &ds, &cfg, &ckpt)?;
    println!(
        "trained {} epochs (best valid MSE {:.4})",
        report.stopping_epoch, report.best_valid_mse
    );

    let (mse, mae) = timeseries::ts_evaluate(&state, &ds)?;
    let naive = timeseries::naive_last_value_mse(&ds, state.config.input_len, state.config.horizon)?;
    println!("test MSE {mse:.4}, MAE {mae:.4} (naive last-value MSE {naive:.4})");

    let start = ds.test_range.0;
    let forecast = timeseries::forecast_denormalized(&state, &ds, start)?;
    println!("first forecast step (original units): {:.3}, {:.3}", forecast[0], forecast[1]);
    let truth = (
        ds.values[(start + state.config.input_len) * 2],
        ds.values[(start + state.config.input_len) * 2 + 1],
    );
    println!("observed:                              {:.3}, {:.3}", truth.0, truth.1);
    Ok(())
}
