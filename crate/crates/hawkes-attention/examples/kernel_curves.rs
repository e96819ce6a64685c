//! Export learned kernel curves and the attention-mixed effective kernels.
//!
//! Run with: cargo run --release --example kernel_curves

use hawkes_attention::data::EventSequence;
use hawkes_attention::kernels;
use hawkes_attention::model::{self, ModelConfig, ModelState};

fn main() -> hawkes_attention::Result<()> {
    let config = ModelConfig {
        d_model: 16,
        d_k: 16,
        d_v: 16,
        d_ff: 32,
        ..ModelConfig::defaults(2)
    };
    let mut state = ModelState::init(config, 4)?;
    state.kernels.set_dt_scale(0.8)?;

    // raw φ curves per (head, type)
    let grid: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
    let out = std::env::temp_dir().join("kernel_curves.csv");
    kernels::export_curves(&state.kernels, &grid, &out)?;
    println!("wrote {}", out.display());
    for head in 0..2 {
        for ty in 0..2 {
            let phi = kernels::eval_values(&state.kernels, head, ty, &[0.0, 0.5, 1.0, 2.0])?;
            println!(
                "phi[head {head}, type {ty}] at dt 0/.5/1/2: {:.3} {:.3} {:.3} {:.3}",
                phi[0], phi[1], phi[2], phi[3]
            );
        }
    }

    // effective kernels mix the per-head curves with attention-derived
    // coefficients measured at a reference position
    let seq = EventSequence::new(vec![0.2, 0.9, 1.5, 2.2, 3.0], vec![0, 1, 0, 1, 0])?;
    let ek = model::effective_kernel(&state, &seq, 4, 1, 0, &grid)?;
    println!("effective kernel 1 -> 0 at position 4:");
    println!("  per-head coefficients: {:?}", ek.coefficients);
    println!(
        "  mixed curve at dt 0/1/2: {:.4} {:.4} {:.4}",
        ek.mixed[0], ek.mixed[10], ek.mixed[20]
    );
    Ok(())
}
