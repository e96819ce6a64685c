//! Fit the attention model on synthetic Hawkes data and compare its held-out
//! likelihood against the generating process.
//!
//! Run with: cargo run --release --example train_event_model

use hawkes_attention::data::{split_indices, QuadratureMode};
use hawkes_attention::hawkes::{self, HawkesParams};
use hawkes_attention::kernels::{KernelConfig, KernelMode};
use hawkes_attention::model::{ModelConfig, ModelState, ProbePolicy};
use hawkes_attention::train::{self, TrainConfig};

fn main() -> hawkes_attention::Result<()> {
    let params = HawkesParams::new(vec![0.2, 0.1], vec![0.2, 0.05, 0.1, 0.15], vec![0.5; 4])?;
    let ds = hawkes::simulate_dataset(&params, 60, 30.0, 3)?;
    println!("{} sequences, {} events", ds.len(), ds.total_events());

    let (tr, va, te) = split_indices(ds.len(), (0.8, 0.1, 0.1), 0)?;
    let train_ds = ds.subset(&tr, "train");
    let valid_ds = ds.subset(&va, "valid");
    let test_ds = ds.subset(&te, "test");

    // a small model is plenty for two event types
    let config = ModelConfig {
        d_model: 16,
        d_k: 16,
        d_v: 16,
        d_ff: 32,
        dropout: 0.1,
        probe_policy: ProbePolicy::PerType,
        kernel: KernelConfig {
            mode: KernelMode::PerType,
            width: 8,
            depth: 2,
        },
        ..ModelConfig::defaults(ds.num_types)
    };
    let mut state = ModelState::init(config, 0)?;

    let cfg = TrainConfig {
        max_epochs: 30,
        patience: 6,
        s_mc: 10,
        ..TrainConfig::default()
    };
    let ckpt = std::env::temp_dir().join("train_event_model.ckpt");
    let report = train::fit(&mut state, &train_ds, &valid_ds, &cfg, &ckpt)?;
    println!(
        "stopped at epoch {} (best epoch {}), wall time {:.1}s",
        report.stopping_epoch, report.best_epoch, report.wall_time_secs
    );
    for (e, (t, v)) in report.train_nll.iter().zip(&report.valid_nll).enumerate() {
        if e % 5 == 0 {
            println!("  epoch {:>3}: train {:.4}  valid {:.4}", e + 1, t, v);
        }
    }

    let model_nll = train::dataset_nll(&state, &test_ds, 50)?;
    let oracle_nll: f64 = test_ds
        .sequences
        .iter()
        .map(|s| hawkes::exact_nll(&params, s).unwrap())
        .sum::<f64>()
        / test_ds.total_events() as f64;
    println!("test NLL per event: model {model_nll:.4} vs generator {oracle_nll:.4}");

    // sanity: the batching machinery is exact for constant integrands
    let b = hawkes_attention::data::batch(&test_ds, &[0], 20, QuadratureMode::Midpoint, 0)?;
    println!("midpoint batch: {} events in row 0", b.row(0).times.len());
    Ok(())
}
