//! Next-event prediction by thinning: sample candidate times from the model
//! intensity, average them, and pick the type by intensity argmax.
//!
//! Run with: cargo run --release --example predict_events

use hawkes_attention::hawkes::{self, HawkesParams};
use hawkes_attention::infer::{self, PredictionConfig, SequenceOracle};
use hawkes_attention::model::{ModelConfig, ModelState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hawkes_attention::Result<()> {
    let params = HawkesParams::new(vec![0.4, 0.3], vec![0.5, 0.2, 0.3, 0.4], vec![1.0, 1.0, 2.0, 1.5])?;
    let ds = hawkes::simulate_dataset(&params, 4, 15.0, 5)?;
    let config = ModelConfig {
        d_model: 16,
        d_k: 16,
        d_v: 16,
        d_ff: 32,
        ..ModelConfig::defaults(2)
    };
    // an untrained model still predicts; training sharpens the estimates
    let mut state = ModelState::init(config, 1)?;
    state.kernels.set_dt_scale(ds.mean_inter_event_time())?;

    let cfg = PredictionConfig {
        n_samples: 50,
        ..PredictionConfig::default()
    };
    let seq = &ds.sequences[0];
    let mut oracle = SequenceOracle::new(&state, seq.times(), seq.types())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    println!("sequence of {} events; rolling one-step predictions:", seq.len());
    for hist in 1..seq.len().min(6) {
        let p = infer::predict_next(&mut oracle, hist, &cfg, Some(seq.times()[hist]), &mut rng)?;
        println!(
            "  after {hist} events (t = {:.3}): predicted next t = {:.3} type {} | observed t = {:.3} type {}",
            seq.times()[hist - 1],
            p.time,
            p.ty,
            seq.times()[hist],
            seq.types()[hist]
        );
    }

    let (report, _records) = infer::evaluate(&state, &ds, &cfg)?;
    println!(
        "dataset metrics: time RMSE {:.3}, type error {:.1}%, NLL/event {:.3}",
        report.time_rmse, report.type_error_rate, report.nll_per_event
    );
    Ok(())
}
