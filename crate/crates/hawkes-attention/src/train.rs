//! Likelihood objective, optimizer, training loop, checkpoints, and the
//! gradient-check harness.
//!
//! The loss of a batch is
//! `(-Σ_events log λ_{c_i}(t_i) + Σ_intervals Σ_s w_s Σ_c λ_c(τ_s)) / #events`;
//! per-event normalization keeps learning rates transferable across batch
//! sizes. Event-term intensities are read at event positions with the event's
//! own type as query; the survival integral is estimated at the batch's
//! quadrature nodes through probe positions. Validation always uses midpoint
//! nodes with dropout off, so early stopping sees a noise-free criterion.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, BatchedEvents, EventDataset, QuadratureMode, RowView};
use crate::error::{Error, Result};
use crate::model::{self, Dropout, Forward, ModelConfig, ModelState, ProbePolicy};
use crate::rng;
use crate::tensor::{rel_error, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Monte Carlo samples per inter-event interval.
    pub s_mc: usize,
    pub seed: u64,
    pub quadrature: QuadratureMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            dropout: 0.1,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            s_mc: 20,
            seed: 0,
            quadrature: QuadratureMode::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("learning_rate, batch_size, max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.s_mc == 0 {
            return Err(Error::Config("s_mc must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) struct DropoutPlan {
    pub rate: f64,
    pub seed: u64,
    pub lane_base: u64,
}

/// Loss and per-parameter gradients of one batch.
pub struct LossGrads {
    /// Per-event normalized loss.
    pub loss: f64,
    /// Aligned with `ModelState::named_params`; empty when grads were off.
    pub grads: Vec<Vec<f64>>,
    pub events: usize,
}

/// Negative log-likelihood of a batch (per event, no gradients).
pub fn nll(state: &ModelState, batch: &BatchedEvents) -> Result<f64> {
    Ok(nll_batch(state, batch, false, None)?.loss)
}

/// Loss plus per-parameter gradients (no dropout), for custom training loops.
pub fn nll_with_grads(state: &ModelState, batch: &BatchedEvents) -> Result<LossGrads> {
    nll_batch(state, batch, true, None)
}

pub(crate) fn nll_batch(
    state: &ModelState,
    batch: &BatchedEvents,
    compute_grads: bool,
    dropout: Option<&DropoutPlan>,
) -> Result<LossGrads> {
    let total_events = batch.total_events();
    let inv = 1.0 / total_events as f64;
    let mut loss_sum = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();

    for b in 0..batch.batch {
        let row = batch.row(b);
        let mut fwd = Forward::new(state, compute_grads);
        let mut drop = dropout.and_then(|p| Dropout::new(p.rate, p.seed, p.lane_base.wrapping_add(b as u64)));
        let loss_var = row_nll(&mut fwd, row, &mut drop)?;
        let value = fwd.tape.value(loss_var).item()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { index: b });
        }
        loss_sum += value;

        if compute_grads {
            fwd.tape.backward(loss_var)?;
            let vars = fwd.bound.param_vars();
            if grads.is_empty() {
                grads = vars
                    .iter()
                    .map(|v| vec![0.0; fwd.tape.value(*v).numel()])
                    .collect();
            }
            for (acc, v) in grads.iter_mut().zip(&vars) {
                if let Some(g) = fwd.tape.grad(*v) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x * inv;
                    }
                }
            }
        }
    }

    Ok(LossGrads {
        loss: loss_sum * inv,
        grads,
        events: total_events,
    })
}

/// Unnormalized NLL of one row as a tape variable.
fn row_nll(
    fwd: &mut Forward,
    row: RowView<'_>,
    drop: &mut Option<Dropout>,
) -> Result<crate::tensor::Var> {
    let cfg = fwd.config.clone();
    let m = row.times.len();

    let enc = model::encode(fwd, row.times, row.types, drop)?;
    let lam_events = model::intensities(fwd, enc.events_hidden)?;
    let event_idx: Vec<usize> = (0..m).map(|j| j * cfg.num_types + row.types[j]).collect();
    let lam_at_events = fwd.tape.gather_elems(lam_events, &event_idx)?;
    let logs = fwd.tape.log(lam_at_events);
    let event_sum = fwd.tape.sum_all(logs);

    let probes = model::integral_probes(
        row.times,
        row.types,
        row.mc_times,
        row.s_samples,
        cfg.probe_policy,
        cfg.num_types,
    );
    let hidden = model::encode_probes(fwd, &enc, row.times, row.types, &probes, true, drop)?;
    let lam_probes = model::intensities(fwd, hidden)?;
    let integral = match cfg.probe_policy {
        ProbePolicy::LastEvent => {
            let totals = fwd.tape.sum_last(lam_probes)?;
            let w = Tensor::vector(row.mc_weights.to_vec());
            let weighted = fwd.tape.mul_const(totals, &w)?;
            fwd.tape.sum_all(weighted)
        }
        ProbePolicy::PerType => {
            // probe order is node-major, candidate-minor; probe p queried
            // with candidate p % K and contributes λ of that type only
            let k = cfg.num_types;
            let idx: Vec<usize> = (0..probes.len()).map(|p| p * k + (p % k)).collect();
            let per_candidate = fwd.tape.gather_elems(lam_probes, &idx)?;
            let mut w = Vec::with_capacity(probes.len());
            for &wi in row.mc_weights {
                for _ in 0..k {
                    w.push(wi);
                }
            }
            let weighted = fwd.tape.mul_const(per_candidate, &Tensor::vector(w))?;
            fwd.tape.sum_all(weighted)
        }
    };

    fwd.tape.sub(integral, event_sum)
}

/// Per-event NLL of a whole dataset under midpoint quadrature (no dropout).
pub fn dataset_nll(state: &ModelState, ds: &EventDataset, s_mc: usize) -> Result<f64> {
    let mut loss_sum = 0.0;
    let mut events = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(32) {
        let b = data::batch(ds, chunk, s_mc, QuadratureMode::Midpoint, 0)?;
        let lg = nll_batch(state, &b, false, None)?;
        loss_sum += lg.loss * lg.events as f64;
        events += lg.events;
    }
    Ok(loss_sum / events as f64)
}

/// Monte Carlo NLL of one row under an arbitrary intensity oracle
/// `lambda(hist_len, t) -> [K]`. Shares the quadrature convention with the
/// neural loss, so closed-form models can cross-check the estimator.
pub fn mc_nll_with_intensity(row: RowView<'_>, lambda: impl Fn(usize, f64) -> Vec<f64>) -> f64 {
    let mut event_sum = 0.0;
    for (i, (&t, &c)) in row.times.iter().zip(row.types).enumerate() {
        event_sum += lambda(i, t)[c].ln();
    }
    let mut integral = 0.0;
    for i in 0..row.times.len() {
        for s in 0..row.s_samples {
            let idx = i * row.s_samples + s;
            let w = row.mc_weights[idx];
            if w == 0.0 {
                continue;
            }
            integral += w * lambda(i, row.mc_times[idx]).iter().sum::<f64>();
        }
    }
    -event_sum + integral
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Vec<f64>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((m, v), ((_, tensor), g)) in self
            .m
            .iter_mut()
            .zip(&mut self.v)
            .zip(params.iter_mut().zip(grads))
        {
            let data = tensor.data_mut();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Early-stopping bookkeeping: strict improvement resets the counter; after
/// `patience` stale epochs the loop stops.
pub struct EarlyStop {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop_now)` for a 1-based epoch.
    pub fn observe(&mut self, epoch: usize, value: f64) -> (bool, bool) {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Everything `fit` reports. `wall_time_secs` is the only non-deterministic
/// field; the metrics payload written by the CLI excludes it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_nll: Vec<f64>,
    pub valid_nll: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub stopping_epoch: usize,
    pub checkpoint: String,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// The deterministic portion, for byte-comparable metrics files.
    pub fn metrics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "train_nll": self.train_nll,
            "valid_nll": self.valid_nll,
            "best_epoch": self.best_epoch,
            "best_valid_nll": self.best_valid_nll,
            "stopping_epoch": self.stopping_epoch,
            "checkpoint": self.checkpoint,
        })
    }
}

/// Trains `state` in place. The best-validation checkpoint is kept at
/// `checkpoint_path` and restored into `state` before returning.
pub fn fit(
    state: &mut ModelState,
    train: &EventDataset,
    valid: &EventDataset,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if valid.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let start = Instant::now();
    state.kernels.set_dt_scale(train.mean_inter_event_time())?;

    let n = train.len();
    // For datasets smaller than the configured batch, scale the batch down
    // so an epoch still makes several optimizer steps instead of one
    // full-batch step.
    let batch_size = if n < cfg.batch_size {
        n.div_ceil(8).max(1)
    } else {
        cfg.batch_size
    };
    let sizes: Vec<usize> = state.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, &sizes);
    let mut stopper = EarlyStop::new(cfg.patience);

    let mut train_curve = Vec::new();
    let mut valid_curve = Vec::new();
    let mut stopping_epoch = cfg.max_epochs;
    let mut have_checkpoint = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::derive(cfg.seed, 3, epoch as u64);
        rng::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_events = 0usize;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let quad_seed = cfg.seed ^ ((epoch as u64) << 32) ^ bi as u64;
            let b = data::batch(train, chunk, cfg.s_mc, cfg.quadrature, quad_seed)?;
            let plan = DropoutPlan {
                rate: cfg.dropout,
                seed: cfg.seed,
                lane_base: ((epoch as u64) << 40) ^ ((bi as u64) << 20),
            };
            let lg = match nll_batch(state, &b, true, Some(&plan)) {
                Ok(lg) => lg,
                Err(Error::NonFiniteLoss { .. }) => {
                    if have_checkpoint {
                        *state = load_checkpoint(checkpoint_path)?;
                    }
                    return Err(Error::Diverged { epoch });
                }
                Err(e) => return Err(e),
            };
            epoch_loss += lg.loss * lg.events as f64;
            epoch_events += lg.events;
            let mut params = state.named_params_mut();
            adam.step(&mut params, &lg.grads);
        }
        train_curve.push(epoch_loss / epoch_events as f64);

        let v = match dataset_nll(state, valid, cfg.s_mc) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFiniteLoss { .. }) => {
                if have_checkpoint {
                    *state = load_checkpoint(checkpoint_path)?;
                }
                return Err(Error::Diverged { epoch });
            }
            Err(e) => return Err(e),
        };
        valid_curve.push(v);
        let (improved, stop) = stopper.observe(epoch, v);
        if improved {
            save_checkpoint(state, checkpoint_path)?;
            have_checkpoint = true;
        }
        if stop {
            stopping_epoch = epoch;
            break;
        }
    }

    if have_checkpoint {
        *state = load_checkpoint(checkpoint_path)?;
    }
    let (best_epoch, best_valid_nll) = stopper.best();
    Ok(TrainReport {
        train_nll: train_curve,
        valid_nll: valid_curve,
        best_epoch,
        best_valid_nll,
        stopping_epoch,
        checkpoint: checkpoint_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor, in `named_params` order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference verification of the full NLL gradient. Requires a
/// batch built with midpoint quadrature; dropout stays off. Failures are
/// reported, not thrown.
pub fn grad_check(state: &ModelState, batch: &BatchedEvents, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_impl(state, batch, tolerance, None)
}

pub(crate) fn grad_check_impl(
    state: &ModelState,
    batch: &BatchedEvents,
    tolerance: f64,
    corrupt_tensor: Option<usize>,
) -> Result<GradCheckReport> {
    const H: f64 = 1e-5;
    let analytic = nll_batch(state, batch, true, None)?;
    let names: Vec<String> = state.named_params().iter().map(|(n, _)| n.clone()).collect();

    let mut per_tensor = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let numel = state.named_params()[pi].1.numel();
        if numel == 0 {
            continue; // zero-parameter tensors are excluded from the report
        }
        let mut tensor_worst = 0.0f64;
        for ei in 0..numel {
            let mut a = analytic.grads[pi][ei];
            if corrupt_tensor == Some(pi) {
                a += 0.1;
            }
            let mut plus = state.clone();
            plus.named_params_mut()[pi].1.data_mut()[ei] += H;
            let mut minus = state.clone();
            minus.named_params_mut()[pi].1.data_mut()[ei] -= H;
            let lp = nll_batch(&plus, batch, false, None)?.loss;
            let lm = nll_batch(&minus, batch, false, None)?.loss;
            let numeric = (lp - lm) / (2.0 * H);
            tensor_worst = tensor_worst.max(rel_error(a, numeric));
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((name.clone(), tensor_worst));
    }

    Ok(GradCheckReport {
        per_tensor,
        max_rel_error: worst,
        tolerance,
        passed: worst < tolerance,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"HAWKATTN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    dt_scale: f64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Binary container: magic, version, JSON header (config echo + tensor
/// manifest + kernel standardization scalar), then raw little-endian f64
/// payload in manifest order. Round-trips bit-exactly.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let named = state.named_params();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        dt_scale: state.kernels.dt_scale(),
        tensors: named
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in &named {
        for x in t.data() {
            file.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut state = ModelState::init(header.config, 0)?;
    state.kernels.set_dt_scale(header.dt_scale)?;
    {
        let mut named = state.named_params_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest has {} tensors, model has {}",
                header.tensors.len(),
                named.len()
            )));
        }
        for (entry, (name, tensor)) in header.tensors.iter().zip(named.iter_mut()) {
            if &entry.name != name || entry.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: file has {} {:?}, model expects {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    tensor.shape()
                )));
            }
            let mut buf = vec![0u8; tensor.numel() * 8];
            file.read_exact(&mut buf)?;
            for (i, chunk) in buf.chunks_exact(8).enumerate() {
                tensor.data_mut()[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EventSequence;
    use crate::hawkes;
    use crate::kernels::{KernelConfig, KernelMode};
    use crate::tensor::softplus_scalar;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("ha-train-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            num_types: 2,
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

    fn toy_batch(s_mc: usize) -> BatchedEvents {
        let ds = EventDataset::new(
            2,
            vec![EventSequence::new(vec![0.3, 0.8, 1.1, 1.9, 2.4], vec![0, 1, 1, 0, 1]).unwrap()],
            "toy",
        )
        .unwrap();
        data::batch(&ds, &[0], s_mc, QuadratureMode::Midpoint, 0).unwrap()
    }

    /// Constant λ makes the quadrature exact for any S: loss is
    /// (-n log r + r T) / n without Monte Carlo error.
    #[test]
    fn constant_intensity_loss_is_exact() {
        let mut cfg = toy_config();
        cfg.num_types = 1;
        let mut state = ModelState::init(cfg, 1).unwrap();
        let r: f64 = 1.7;
        for x in state.out_a.data_mut() {
            *x = 0.0;
        }
        state.out_mu.data_mut()[0] = (r.exp() - 1.0f64).ln(); // softplus inverse
        assert!((softplus_scalar(state.out_mu.data()[0]) - r).abs() < 1e-12);

        let times = vec![0.4, 0.9, 1.3, 2.0];
        let t_end = 2.0;
        let n = times.len() as f64;
        let ds = EventDataset::new(1, vec![EventSequence::new(times, vec![0; 4]).unwrap()], "c").unwrap();
        for s in [1, 7, 20] {
            let b = data::batch(&ds, &[0], s, QuadratureMode::Midpoint, 0).unwrap();
            let loss = nll(&state, &b).unwrap();
            let expected = (-n * r.ln() + r * t_end) / n;
            assert!((loss - expected).abs() < 1e-12, "s={s}: {loss} vs {expected}");
        }
    }

    #[test]
    fn mc_estimator_matches_classical_oracle() {
        let p = hawkes::HawkesParams::new(vec![0.4, 0.2], vec![0.3, 0.6, 0.5, 0.2], vec![1.0, 2.0, 0.8, 1.5]).unwrap();
        let ds = hawkes::simulate_dataset(&p, 1, 30.0, 42).unwrap();
        let seq = &ds.sequences[0];
        assert!(seq.len() >= 20, "want a reasonably long sequence, got {}", seq.len());
        let exact = hawkes::exact_nll(&p, seq).unwrap();

        let lambda = |hist: usize, t: f64| -> Vec<f64> {
            let mut lam = p.mu().to_vec();
            for (&tk, &ck) in seq.times()[..hist].iter().zip(&seq.types()[..hist]) {
                for (c, l) in lam.iter_mut().enumerate() {
                    *l += p.alpha(c, ck) * (-p.beta(c, ck) * (t - tk)).exp();
                }
            }
            lam
        };

        let b1000 = data::batch(&ds, &[0], 1000, QuadratureMode::Uniform, 5).unwrap();
        let mc = mc_nll_with_intensity(b1000.row(0), lambda);
        assert!((mc - exact).abs() / exact.abs() < 0.01, "S=1000: {mc} vs {exact}");

        let b20 = data::batch(&ds, &[0], 20, QuadratureMode::Uniform, 5).unwrap();
        let mc20 = mc_nll_with_intensity(b20.row(0), lambda);
        assert!((mc20 - exact).abs() / exact.abs() < 0.10, "S=20: {mc20} vs {exact}");
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let state = ModelState::init(toy_config(), 7).unwrap();
        let b = toy_batch(4);
        let report = grad_check(&state, &b, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
        assert_eq!(report.per_tensor.len(), state.named_params().len());
    }

    #[test]
    fn toy_gradients_with_rnn_and_pe_and_per_type() {
        let mut cfg = toy_config();
        cfg.use_rnn = true;
        cfg.use_pe = true;
        cfg.probe_policy = ProbePolicy::PerType;
        let state = ModelState::init(cfg, 8).unwrap();
        let b = toy_batch(2);
        let report = grad_check(&state, &b, 1e-4).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let state = ModelState::init(toy_config(), 7).unwrap();
        let b = toy_batch(2);
        let report = grad_check_impl(&state, &b, 1e-4, Some(0)).unwrap();
        assert!(!report.passed);
        assert!(report.per_tensor[0].1 > 1e-2, "harness too dull: {}", report.per_tensor[0].1);
    }

    #[test]
    fn nll_invariant_under_batch_order() {
        let state = ModelState::init(toy_config(), 3).unwrap();
        let ds = EventDataset::new(
            2,
            vec![
                EventSequence::new(vec![0.3, 0.8, 1.1], vec![0, 1, 1]).unwrap(),
                EventSequence::new(vec![0.2, 0.9], vec![1, 0]).unwrap(),
            ],
            "two",
        )
        .unwrap();
        let a = data::batch(&ds, &[0, 1], 5, QuadratureMode::Midpoint, 0).unwrap();
        let b = data::batch(&ds, &[1, 0], 5, QuadratureMode::Midpoint, 0).unwrap();
        let la = nll(&state, &a).unwrap();
        let lb = nll(&state, &b).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn quadrature_error_shrinks_quadratically_in_s() {
        let state = ModelState::init(toy_config(), 5).unwrap();
        let ds = EventDataset::new(
            2,
            vec![EventSequence::new(vec![0.5, 1.4, 2.6], vec![0, 1, 0]).unwrap()],
            "one",
        )
        .unwrap();
        let loss_at = |s: usize| {
            let b = data::batch(&ds, &[0], s, QuadratureMode::Midpoint, 0).unwrap();
            nll(&state, &b).unwrap()
        };
        let reference = loss_at(512);
        let e1 = (loss_at(8) - reference).abs();
        let e2 = (loss_at(16) - reference).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn early_stop_patience_one_stops_at_epoch_two() {
        let mut es = EarlyStop::new(1);
        assert_eq!(es.observe(1, 5.0), (true, false));
        assert_eq!(es.observe(2, 6.0), (false, true));
        assert_eq!(es.best(), (1, 5.0));
    }

    #[test]
    fn early_stop_counts_stale_epochs() {
        let mut es = EarlyStop::new(3);
        es.observe(1, 5.0);
        assert_eq!(es.observe(2, 5.1), (false, false));
        assert_eq!(es.observe(3, 4.0), (true, false));
        assert_eq!(es.observe(4, 4.2), (false, false));
        assert_eq!(es.observe(5, 4.3), (false, false));
        assert_eq!(es.observe(6, 4.1), (false, true));
        assert_eq!(es.best(), (3, 4.0));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut state = ModelState::init(toy_config(), 11).unwrap();
        state.kernels.set_dt_scale(0.37).unwrap();
        let path = tmp("roundtrip.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kernels.dt_scale().to_bits(), state.kernels.dt_scale().to_bits());
        for ((na, ta), (nb, tb)) in state.named_params().iter().zip(loaded.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "mismatch in {na}");
            }
        }
        let b = toy_batch(3);
        let before = nll(&state, &b).unwrap();
        let after = nll(&loaded, &b).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn fit_is_deterministic_and_improves() {
        let p = hawkes::HawkesParams::new(vec![0.4, 0.3], vec![0.5, 0.2, 0.3, 0.4], vec![1.0, 1.0, 2.0, 1.5]).unwrap();
        let train_ds = hawkes::simulate_dataset(&p, 12, 6.0, 1).unwrap();
        let valid_ds = hawkes::simulate_dataset(&p, 3, 6.0, 2).unwrap();
        let mut mc = toy_config();
        mc.d_model = 8;
        mc.d_k = 8;
        mc.d_v = 8;
        mc.d_ff = 16;
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            weight_decay: 0.0,
            dropout: 0.1,
            batch_size: 4,
            max_epochs: 8,
            patience: 8,
            s_mc: 5,
            seed: 9,
            quadrature: QuadratureMode::Uniform,
        };
        let run = |dir: &str| {
            let sub = tmp(dir);
            std::fs::create_dir_all(&sub).unwrap();
            let mut state = ModelState::init(mc.clone(), 21).unwrap();
            fit(&mut state, &train_ds, &valid_ds, &cfg, &sub.join("checkpoint.bin")).unwrap()
        };
        let r1 = run("fit_a");
        let r2 = run("fit_b");
        assert_eq!(
            serde_json::to_string(&r1.metrics_json()).unwrap(),
            serde_json::to_string(&r2.metrics_json()).unwrap()
        );
        assert!(r1.train_nll.last().unwrap() < r1.train_nll.first().unwrap());
    }

    #[test]
    fn overfit_smoke_improves_twenty_percent() {
        // regression anchor: on a small dataset the train NLL must drop by
        // at least 20% from the first epoch to the best epoch
        let p = hawkes::HawkesParams::new(vec![0.4, 0.3], vec![0.5, 0.2, 0.3, 0.4], vec![1.0, 1.0, 2.0, 1.5]).unwrap();
        let train_ds = hawkes::simulate_dataset(&p, 20, 6.0, 4).unwrap();
        let valid_ds = hawkes::simulate_dataset(&p, 4, 6.0, 5).unwrap();
        let mut mc = toy_config();
        mc.d_model = 8;
        mc.d_k = 8;
        mc.d_v = 8;
        mc.d_ff = 16;
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            weight_decay: 0.0,
            dropout: 0.0,
            batch_size: 4,
            max_epochs: 40,
            patience: 40,
            s_mc: 5,
            seed: 2,
            quadrature: QuadratureMode::Uniform,
        };
        let mut state = ModelState::init(mc, 3).unwrap();
        let rep = fit(&mut state, &train_ds, &valid_ds, &cfg, &tmp("overfit.bin")).unwrap();
        let first = rep.train_nll[0];
        let best = rep.train_nll.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            best <= 0.8 * first,
            "train NLL {first} -> {best}: less than 20% improvement"
        );
    }

    #[test]
    fn divergence_aborts_and_keeps_last_good_checkpoint() {
        let p = hawkes::HawkesParams::new(vec![0.4], vec![0.2], vec![1.0]).unwrap();
        let train_ds = hawkes::simulate_dataset(&p, 6, 6.0, 7).unwrap();
        let valid_ds = hawkes::simulate_dataset(&p, 2, 6.0, 8).unwrap();
        let mut mc = toy_config();
        mc.num_types = 1;
        let cfg = TrainConfig {
            learning_rate: 1e8, // guaranteed blow-up
            weight_decay: 0.0,
            dropout: 0.0,
            batch_size: 6,
            max_epochs: 10,
            patience: 10,
            s_mc: 3,
            seed: 0,
            quadrature: QuadratureMode::Midpoint,
        };
        let path = tmp("diverge.bin");
        let _ = std::fs::remove_file(&path);
        let mut state = ModelState::init(mc, 1).unwrap();
        match fit(&mut state, &train_ds, &valid_ds, &cfg, &path) {
            Err(Error::Diverged { epoch }) => {
                assert!(epoch >= 1);
                // a checkpoint from before the blow-up survives if any epoch
                // completed; either way the file must not hold NaN weights
                if path.exists() {
                    let restored = load_checkpoint(&path).unwrap();
                    for (_, t) in restored.named_params() {
                        assert!(t.data().iter().all(|x| x.is_finite()));
                    }
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fit_rejects_empty_validation() {
        let ds = EventDataset::new(1, vec![EventSequence::new(vec![0.1], vec![0]).unwrap()], "t").unwrap();
        let empty = EventDataset::new(1, vec![], "e").unwrap();
        let mut state = ModelState::init(toy_config(), 0).unwrap();
        let err = fit(&mut state, &ds, &empty, &TrainConfig::default(), &tmp("nope.bin"));
        assert!(err.is_err());
    }
}
