//! Next-event prediction and evaluation.
//!
//! Next-event times are point estimates under squared loss: the mean of
//! thinning samples drawn from the model's intensity. Types are the argmax
//! of the per-type intensity at an evaluation timestamp (the observed next
//! time by default, the predicted time optionally). Thinning uses an adaptive
//! upper bound `bound_factor · Σ_c λ_c(frontier)` re-tightened at every
//! rejected proposal; since learned intensities are not guaranteed monotone
//! between events, debug builds assert the bound was never exceeded.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventDataset;
use crate::error::{Error, Result};
use crate::model::{self, EncodeOutput, Forward, ModelState, ProbePolicy, ProbeQuery, ProbeSpec};
use crate::rng;
use crate::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeTimestamp {
    /// Condition the type argmax on the observed next time (default).
    TrueTime,
    /// Condition on the predicted time instead.
    PredictedTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    /// Thinning draws averaged per time prediction.
    pub n_samples: usize,
    /// Multiplier on the frontier intensity for the thinning bound.
    pub bound_factor: f64,
    pub max_rejections: usize,
    /// Sampling horizon, in multiples of the model's mean inter-event time.
    pub horizon_cap: f64,
    pub type_from: TypeTimestamp,
    /// Quadrature samples per interval for the report's NLL.
    pub s_mc: usize,
    pub seed: u64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig {
            n_samples: 50,
            bound_factor: 5.0,
            max_rejections: 10_000,
            horizon_cap: 20.0,
            type_from: TypeTimestamp::TrueTime,
            s_mc: 20,
            seed: 0,
        }
    }
}

impl PredictionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0
            || !(self.bound_factor > 0.0)
            || self.max_rejections == 0
            || !(self.horizon_cap > 0.0)
            || self.s_mc == 0
        {
            return Err(Error::Config("prediction config fields must be positive".into()));
        }
        Ok(())
    }
}

/// A sequence encoded once, supporting many cheap intensity queries.
///
/// The event pass stays on a long-lived tape; each probe query appends a few
/// ops, reads the values, and rolls the tape back to the mark, so repeated
/// thinning proposals reuse the same code path as training without growth.
pub struct SequenceOracle<'a> {
    state: &'a ModelState,
    fwd: Forward,
    enc: EncodeOutput,
    times: Vec<f64>,
    types: Vec<usize>,
}

impl<'a> SequenceOracle<'a> {
    pub fn new(state: &'a ModelState, times: &[f64], types: &[usize]) -> Result<Self> {
        let mut fwd = Forward::new(state, false);
        let mut no_drop = None;
        let enc = model::encode(&mut fwd, times, types, &mut no_drop)?;
        Ok(SequenceOracle {
            state,
            fwd,
            enc,
            times: times.to_vec(),
            types: types.to_vec(),
        })
    }

    pub fn frontier(&self, hist_len: usize) -> f64 {
        if hist_len == 0 {
            0.0
        } else {
            self.times[hist_len - 1]
        }
    }

    /// Per-type intensities at time `t` given the first `hist_len` events.
    /// `strict_time` hides history events whose timestamp equals `t`; the
    /// frontier evaluation uses `false` (right-continuous convention).
    pub fn intensities_at(&mut self, hist_len: usize, t: f64, strict_time: bool) -> Result<Vec<f64>> {
        let policy = self.state.config.probe_policy;
        let k = self.state.config.num_types;
        let probes: Vec<ProbeSpec> = match policy {
            ProbePolicy::LastEvent => {
                let query = if hist_len == 0 {
                    ProbeQuery::Boot
                } else {
                    ProbeQuery::Type(self.types[hist_len - 1])
                };
                vec![ProbeSpec { t, hist_len, query }]
            }
            ProbePolicy::PerType => (0..k)
                .map(|c| ProbeSpec {
                    t,
                    hist_len,
                    query: ProbeQuery::Type(c),
                })
                .collect(),
        };
        let mark = self.fwd.tape.mark();
        let mut no_drop = None;
        let hidden = model::encode_probes_impl(
            &mut self.fwd,
            &self.enc,
            &self.times,
            &self.types,
            &probes,
            strict_time,
            false,
            &mut no_drop,
        )?;
        let lam = model::intensities(&mut self.fwd, hidden)?;
        let values = self.fwd.tape.value(lam).data().to_vec();
        self.fwd.tape.rollback(mark);
        Ok(match policy {
            ProbePolicy::LastEvent => values,
            ProbePolicy::PerType => (0..k).map(|c| values[c * k + c]).collect(),
        })
    }

    pub fn total_intensity_at(&mut self, hist_len: usize, t: f64, strict_time: bool) -> Result<f64> {
        Ok(self.intensities_at(hist_len, t, strict_time)?.iter().sum())
    }
}

/// One accepted thinning draw: `(time, truncated)`. `total_at` evaluates the
/// total intensity at a candidate strictly after the frontier;
/// `initial_total` is the (right-continuous) total at the frontier itself.
pub fn sample_next_from(
    mut total_at: impl FnMut(f64) -> Result<f64>,
    initial_total: f64,
    frontier: f64,
    cap: f64,
    cfg: &PredictionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, bool)> {
    let mut s = frontier;
    let mut bound = cfg.bound_factor * initial_total;
    let mut rejections = 0usize;
    loop {
        if bound <= 0.0 {
            return Ok((cap, true));
        }
        let delta = -rng::uniform_open_closed(rng).ln() / bound;
        let cand = s + delta;
        if cand > cap {
            return Ok((cap, true));
        }
        let total = total_at(cand)?;
        let ratio = total / bound;
        #[cfg(debug_assertions)]
        assert!(
            ratio <= 1.0 + 1e-9,
            "thinning bound violated (ratio {ratio}); bound_factor too small for a rising intensity"
        );
        if rng::uniform01(rng) < ratio {
            return Ok((cand, false));
        }
        // re-tighten at the rejected point and continue from it
        s = cand;
        bound = cfg.bound_factor * total;
        rejections += 1;
        if rejections >= cfg.max_rejections {
            return Err(Error::RejectionLimit { max: cfg.max_rejections });
        }
    }
}

/// Draws one next-event time for the model given `hist_len` observed events.
pub fn sample_next(
    oracle: &mut SequenceOracle<'_>,
    hist_len: usize,
    cfg: &PredictionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, bool)> {
    let frontier = oracle.frontier(hist_len);
    let cap = frontier + cfg.horizon_cap * oracle.state.kernels.dt_scale();
    let initial = oracle.total_intensity_at(hist_len, frontier, false)?;
    sample_next_from(
        |t| oracle.total_intensity_at(hist_len, t, true),
        initial,
        frontier,
        cap,
        cfg,
        rng,
    )
}

/// Point prediction of the next event.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub time: f64,
    pub ty: usize,
    /// Fraction of thinning draws that hit the horizon cap.
    pub truncation_fraction: f64,
}

/// Mean-of-samples time estimate plus intensity-argmax type estimate.
/// `true_time` supplies the conditioning timestamp under
/// [`TypeTimestamp::TrueTime`]; when absent the predicted time is used.
pub fn predict_next(
    oracle: &mut SequenceOracle<'_>,
    hist_len: usize,
    cfg: &PredictionConfig,
    true_time: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction> {
    cfg.validate()?;
    let mut sum = 0.0;
    let mut truncated = 0usize;
    for _ in 0..cfg.n_samples {
        let (t, trunc) = sample_next(oracle, hist_len, cfg, rng)?;
        sum += t;
        truncated += trunc as usize;
    }
    let time = sum / cfg.n_samples as f64;

    let eval_time = match (cfg.type_from, true_time) {
        (TypeTimestamp::TrueTime, Some(t)) => t,
        _ => time,
    };
    let lam = oracle.intensities_at(hist_len, eval_time.max(oracle.frontier(hist_len)), false)?;
    let ty = lam
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(c, _)| c)
        .unwrap_or(0);
    Ok(Prediction {
        time,
        ty,
        truncation_fraction: truncated as f64 / cfg.n_samples as f64,
    })
}

/// One row of the per-prediction CSV dump.
#[derive(Clone, Debug, Serialize)]
pub struct PredictionRecord {
    pub seq_id: usize,
    pub position: usize,
    pub true_time: f64,
    pub pred_time: f64,
    pub true_type: usize,
    pub pred_type: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub time_rmse: f64,
    /// Percent of mispredicted types, in [0, 100].
    pub type_error_rate: f64,
    /// Per-event NLL under midpoint quadrature.
    pub nll_per_event: f64,
    pub n_sequences: usize,
    pub n_predictions: usize,
    pub per_sequence_counts: Vec<usize>,
    pub truncation_fraction: f64,
    pub config: PredictionConfig,
}

pub(crate) fn metrics_from_records(records: &[PredictionRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let mse: f64 = records
        .iter()
        .map(|r| (r.pred_time - r.true_time) * (r.pred_time - r.true_time))
        .sum::<f64>()
        / records.len() as f64;
    let errors = records.iter().filter(|r| r.pred_type != r.true_type).count();
    (mse.sqrt(), 100.0 * errors as f64 / records.len() as f64)
}

/// Rolling next-event prediction over every prefix of every sequence.
/// Per-sequence seeds derive from the root seed and the sequence index, so
/// results do not depend on evaluation order.
pub fn evaluate(
    state: &ModelState,
    ds: &EventDataset,
    cfg: &PredictionConfig,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    cfg.validate()?;
    if ds.sequences.iter().any(|s| s.len() < 2) {
        return Err(Error::Contract("evaluation needs sequences of length >= 2".into()));
    }
    let mut records = Vec::new();
    let mut per_sequence_counts = Vec::with_capacity(ds.len());
    let mut trunc_sum = 0.0;
    let mut trunc_n = 0usize;

    for (si, seq) in ds.sequences.iter().enumerate() {
        let mut oracle = SequenceOracle::new(state, seq.times(), seq.types())?;
        let mut count = 0usize;
        for hist in 1..seq.len() {
            let mut lane = rng::derive(cfg.seed, 5, ((si as u64) << 20) | hist as u64);
            let p = predict_next(&mut oracle, hist, cfg, Some(seq.times()[hist]), &mut lane)?;
            records.push(PredictionRecord {
                seq_id: si,
                position: hist,
                true_time: seq.times()[hist],
                pred_time: p.time,
                true_type: seq.types()[hist],
                pred_type: p.ty,
            });
            trunc_sum += p.truncation_fraction;
            trunc_n += 1;
            count += 1;
        }
        per_sequence_counts.push(count);
    }

    let (time_rmse, type_error_rate) = metrics_from_records(&records);
    let nll_per_event = train::dataset_nll(state, ds, cfg.s_mc)?;
    let report = EvalReport {
        time_rmse,
        type_error_rate,
        nll_per_event,
        n_sequences: ds.len(),
        n_predictions: records.len(),
        per_sequence_counts,
        truncation_fraction: if trunc_n == 0 { 0.0 } else { trunc_sum / trunc_n as f64 },
        config: cfg.clone(),
    };
    Ok((report, records))
}

/// CSV dump of per-prediction results.
pub fn write_predictions_csv(records: &[PredictionRecord], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("seq_id,position,true_time,pred_time,true_type,pred_type\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seq_id, r.position, r.true_time, r.pred_time, r.true_type, r.pred_type
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EventSequence;
    use crate::hawkes;
    use crate::kernels::{KernelConfig, KernelMode};
    use crate::model::ModelConfig;

    fn small_config(num_types: usize) -> ModelConfig {
        ModelConfig {
            num_types,
            d_model: 4,
            d_k: 4,
            d_v: 4,
            heads: 2,
            layers: 1,
            d_ff: 8,
            use_pe: false,
            use_rnn: false,
            d_rnn: 4,
            dropout: 0.0,
            probe_policy: ProbePolicy::LastEvent,
            kernel: KernelConfig {
                mode: KernelMode::PerType,
                width: 4,
                depth: 2,
            },
        }
    }

    /// Model whose total intensity is the constant `rate`, split over types.
    fn constant_model(num_types: usize, rate: f64) -> ModelState {
        let mut state = ModelState::init(small_config(num_types), 3).unwrap();
        for x in state.out_a.data_mut() {
            *x = 0.0;
        }
        let per = rate / num_types as f64;
        let inv = (per.exp() - 1.0f64).ln();
        for x in state.out_mu.data_mut() {
            *x = inv;
        }
        state.kernels.set_dt_scale(1.0 / rate).unwrap();
        state
    }

    #[test]
    fn constant_rate_gap_mean() {
        let state = constant_model(1, 2.0);
        let mut oracle = SequenceOracle::new(&state, &[0.5], &[0]).unwrap();
        let cfg = PredictionConfig::default();
        let mut r = rng::derive(7, 0, 0);
        let n = 2000;
        let mut sum = 0.0;
        for _ in 0..n {
            let (t, trunc) = sample_next(&mut oracle, 1, &cfg, &mut r).unwrap();
            assert!(!trunc);
            sum += t - 0.5;
        }
        let mean = sum / n as f64;
        let se = 0.5 / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "thinning bound violated")]
    fn underestimated_bound_panics_in_debug() {
        let state = constant_model(1, 2.0);
        let mut oracle = SequenceOracle::new(&state, &[0.5], &[0]).unwrap();
        let cfg = PredictionConfig {
            bound_factor: 0.2,
            ..PredictionConfig::default()
        };
        let mut r = rng::derive(1, 0, 0);
        let _ = sample_next(&mut oracle, 1, &cfg, &mut r);
    }

    #[test]
    fn sampling_is_deterministic() {
        let state = ModelState::init(small_config(2), 9).unwrap();
        let times = [0.3, 0.9, 1.4];
        let types = [0usize, 1, 0];
        let cfg = PredictionConfig::default();
        let draw = || {
            let mut oracle = SequenceOracle::new(&state, &times, &types).unwrap();
            let mut r = rng::derive(5, 0, 0);
            (0..20)
                .map(|_| sample_next(&mut oracle, 3, &cfg, &mut r).unwrap().0)
                .collect::<Vec<f64>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn predicted_time_is_never_before_frontier() {
        let state = ModelState::init(small_config(2), 11).unwrap();
        let times = [0.3, 0.9, 1.4];
        let types = [0usize, 1, 0];
        let mut oracle = SequenceOracle::new(&state, &times, &types).unwrap();
        let cfg = PredictionConfig {
            n_samples: 10,
            ..PredictionConfig::default()
        };
        for hist in 1..=3usize {
            let mut r = rng::derive(2, 0, hist as u64);
            let p = predict_next(&mut oracle, hist, &cfg, None, &mut r).unwrap();
            assert!(p.time >= times[hist - 1]);
        }
    }

    #[test]
    fn constant_intensity_prediction_hits_exponential_mean() {
        let state = constant_model(1, 2.0);
        let mut oracle = SequenceOracle::new(&state, &[1.0], &[0]).unwrap();
        let cfg = PredictionConfig {
            n_samples: 4000,
            ..PredictionConfig::default()
        };
        let mut r = rng::derive(3, 0, 0);
        let p = predict_next(&mut oracle, 1, &cfg, None, &mut r).unwrap();
        assert_eq!(p.ty, 0);
        let se = 0.5 / (cfg.n_samples as f64).sqrt();
        assert!((p.time - 1.5).abs() < 4.0 * se, "time {}", p.time);
        assert!(p.truncation_fraction < 0.001);
    }

    #[test]
    fn dominant_type_wins_argmax() {
        let mut state = constant_model(2, 2.0);
        // tilt the base rates: λ_0 >> λ_1
        state.out_mu.data_mut()[0] = 2.0;
        state.out_mu.data_mut()[1] = -6.0;
        let mut oracle = SequenceOracle::new(&state, &[0.4], &[1]).unwrap();
        let cfg = PredictionConfig {
            n_samples: 5,
            ..PredictionConfig::default()
        };
        let mut r = rng::derive(4, 0, 0);
        let p = predict_next(&mut oracle, 1, &cfg, Some(0.9), &mut r).unwrap();
        assert_eq!(p.ty, 0);
    }

    #[test]
    fn more_samples_reduce_estimator_variance() {
        let state = constant_model(1, 2.0);
        let mut oracle = SequenceOracle::new(&state, &[0.2], &[0]).unwrap();
        let mut variance_of = |n_samples: usize, seed_base: u64| {
            let cfg = PredictionConfig {
                n_samples,
                ..PredictionConfig::default()
            };
            let reps = 100;
            let mut vals = Vec::with_capacity(reps);
            for rep in 0..reps {
                let mut r = rng::derive(seed_base, rep as u64, n_samples as u64);
                vals.push(predict_next(&mut oracle, 1, &cfg, None, &mut r).unwrap().time);
            }
            let mean = vals.iter().sum::<f64>() / reps as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / reps as f64
        };
        let v1 = variance_of(1, 17);
        let v50 = variance_of(50, 17);
        assert!(v50 < v1, "var(50)={v50} not below var(1)={v1}");
    }

    #[test]
    fn thinning_matches_classical_simulator_rate() {
        // drive the generic thinning loop with exact exponential-Hawkes
        // intensities and compare against the closed-form stationary rate
        let p = hawkes::HawkesParams::new(vec![0.5], vec![0.8], vec![1.0]).unwrap();
        let cfg = PredictionConfig {
            bound_factor: 1.0, // exact bound: the intensity decays between events
            horizon_cap: f64::INFINITY,
            ..PredictionConfig::default()
        };
        let horizon = 2000.0;
        let mut rates = Vec::new();
        for seed in 0..10u64 {
            let mut r = rng::derive(seed, 9, 0);
            let mut times: Vec<f64> = Vec::new();
            let mut types: Vec<usize> = Vec::new();
            loop {
                let frontier = times.last().copied().unwrap_or(0.0);
                let hist = EventSequence::new(times.clone(), types.clone()).ok();
                let lam_at = |t: f64| -> f64 {
                    match &hist {
                        Some(h) => hawkes::intensity(&p, h, t, 0).unwrap(),
                        None => p.mu()[0],
                    }
                };
                let initial = lam_at(frontier);
                let (t, trunc) =
                    sample_next_from(|t| Ok(lam_at(t)), initial, frontier, horizon, &cfg, &mut r).unwrap();
                if trunc {
                    break;
                }
                times.push(t);
                types.push(0);
            }
            rates.push(times.len() as f64 / horizon);
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean - 2.5).abs() / 2.5 < 0.05, "rate {mean}");
    }

    #[test]
    fn perfect_predictions_metricize_to_zero() {
        let records = vec![
            PredictionRecord {
                seq_id: 0,
                position: 1,
                true_time: 0.7,
                pred_time: 0.7,
                true_type: 1,
                pred_type: 1,
            },
            PredictionRecord {
                seq_id: 0,
                position: 2,
                true_time: 1.1,
                pred_time: 1.1,
                true_type: 0,
                pred_type: 0,
            },
        ];
        let (rmse, err) = metrics_from_records(&records);
        assert_eq!(rmse, 0.0);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn single_type_dataset_has_zero_error_rate() {
        let state = constant_model(1, 1.5);
        let ds = EventDataset::new(
            1,
            vec![
                EventSequence::new(vec![0.4, 1.0, 1.7], vec![0, 0, 0]).unwrap(),
                EventSequence::new(vec![0.2, 0.9], vec![0, 0]).unwrap(),
            ],
            "single",
        )
        .unwrap();
        let cfg = PredictionConfig {
            n_samples: 5,
            s_mc: 5,
            ..PredictionConfig::default()
        };
        let (report, records) = evaluate(&state, &ds, &cfg).unwrap();
        assert_eq!(report.type_error_rate, 0.0);
        assert_eq!(report.n_predictions, 3);
        assert_eq!(report.per_sequence_counts, vec![2, 1]);
        assert_eq!(records.len(), 3);
        assert!(report.nll_per_event.is_finite());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let state = ModelState::init(small_config(2), 21).unwrap();
        let ds = EventDataset::new(
            2,
            vec![EventSequence::new(vec![0.3, 0.8, 1.6], vec![0, 1, 0]).unwrap()],
            "det",
        )
        .unwrap();
        let cfg = PredictionConfig {
            n_samples: 8,
            s_mc: 4,
            ..PredictionConfig::default()
        };
        let (r1, rec1) = evaluate(&state, &ds, &cfg).unwrap();
        let (r2, rec2) = evaluate(&state, &ds, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(rec1.len(), rec2.len());
        for (a, b) in rec1.iter().zip(&rec2) {
            assert_eq!(a.pred_time.to_bits(), b.pred_time.to_bits());
            assert_eq!(a.pred_type, b.pred_type);
        }
    }

    #[test]
    fn short_sequences_rejected() {
        let state = constant_model(1, 1.0);
        let ds = EventDataset::new(1, vec![EventSequence::new(vec![0.4], vec![0]).unwrap()], "short").unwrap();
        assert!(evaluate(&state, &ds, &PredictionConfig::default()).is_err());
    }
}
