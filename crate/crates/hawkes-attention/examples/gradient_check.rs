//! Verify the analytic NLL gradient against central finite differences on a
//! small instance, for every parameter tensor.
//!
//! Run with: cargo run --release --example gradient_check

use hawkes_attention::data::{batch, EventDataset, EventSequence, QuadratureMode};
use hawkes_attention::kernels::{KernelConfig, KernelMode};
use hawkes_attention::model::{ModelConfig, ModelState, ProbePolicy};
use hawkes_attention::train;

fn main() -> hawkes_attention::Result<()> {
    let config = ModelConfig {
        d_model: 4,
        d_k: 4,
        d_v: 4,
        heads: 2,
        layers: 1,
        d_ff: 8,
        dropout: 0.0,
        probe_policy: ProbePolicy::PerType,
        kernel: KernelConfig {
            mode: KernelMode::PerType,
            width: 4,
            depth: 2,
        },
        ..ModelConfig::defaults(2)
    };
    let state = ModelState::init(config, 7)?;

    let seq = EventSequence::new(vec![0.3, 0.8, 1.1, 1.9, 2.4], vec![0, 1, 1, 0, 1])?;
    let ds = EventDataset::new(2, vec![seq], "toy")?;
    let b = batch(&ds, &[0], 4, QuadratureMode::Midpoint, 0)?;

    let report = train::grad_check(&state, &b, 1e-4)?;
    for (name, err) in &report.per_tensor {
        println!("{name:<28} {err:.3e}");
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}) -> {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    Ok(())
}
