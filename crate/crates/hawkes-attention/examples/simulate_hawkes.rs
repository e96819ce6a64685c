//! Classical exponential Hawkes: stability, simulation, and the exact
//! likelihood oracle.
//!
//! Run with: cargo run --release --example simulate_hawkes

use hawkes_attention::data::EventSequence;
use hawkes_attention::hawkes::{self, HawkesParams};

fn main() -> hawkes_attention::Result<()> {
    // two types: type 0 self-excites strongly, type 1 cross-excites type 0
    let params = HawkesParams::new(
        vec![0.3, 0.2],
        vec![0.5, 0.3, 0.1, 0.4],
        vec![1.0, 1.0, 2.0, 1.5],
    )?;
    println!(
        "branching spectral radius: {:.3} (stable: {})",
        params.branching_spectral_radius(),
        params.is_stable()
    );

    let horizon = 200.0;
    let events = hawkes::simulate(&params, horizon, 7);
    println!("simulated {} events over [0, {horizon}]", events.len());
    println!("first five: {:?}", &events[..5.min(events.len())]);

    let times: Vec<f64> = events.iter().map(|e| e.0).collect();
    let types: Vec<usize> = events.iter().map(|e| e.1).collect();
    let seq = EventSequence::new(times, types)?;

    let nll = hawkes::exact_nll(&params, &seq)?;
    println!("exact NLL: {:.4} ({:.4} per event)", nll, nll / seq.len() as f64);

    // under the generating model, total-compensator increments between
    // events are unit-exponential; their mean should sit near 1
    let incs = hawkes::compensator_increments(&params, &seq);
    let mean = incs.iter().sum::<f64>() / incs.len() as f64;
    println!("time-rescaling residual mean: {mean:.4} (expect ~1)");

    // the intensity jumps by alpha at each event and decays in between
    let lam_before = hawkes::intensity(&params, &seq.prefix(1), seq.times()[1], 0)?;
    let lam_after = hawkes::intensity(&params, &seq.prefix(2), seq.times()[1], 0)?;
    println!(
        "intensity of type 0 at the second event: {lam_before:.4} -> {lam_after:.4} (jump {:.4})",
        lam_after - lam_before
    );
    Ok(())
}
