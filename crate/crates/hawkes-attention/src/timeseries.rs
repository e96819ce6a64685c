//! Encoder-only forecasting variant for continuous multivariate series.
//!
//! The observation vector at each timestamp projects to one token; the same
//! causal attention blocks as the event model run over the window, except
//! that queries, keys, and values each get their own kernel network over
//! `Δt` (one per head, shared across channels) and positional encodings are
//! never added — elapsed time is the only order signal. A linear head maps
//! the flattened encoder output to the forecast horizon. Metrics are
//! computed in normalized units; normalization statistics come from the
//! training range only.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{BoundKernels, KernelBank, KernelConfig, KernelMode};
use crate::model::{attention_block, uniform_matrix, BoundLayer, Dropout, LayerParams};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{Adam, EarlyStop};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsConfig {
    /// Input window length.
    pub input_len: usize,
    /// Forecast horizon.
    pub horizon: usize,
    /// Window stride for training/validation windows.
    pub stride: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub kernel_width: usize,
    pub kernel_depth: usize,
}

impl Default for TsConfig {
    fn default() -> Self {
        TsConfig {
            input_len: 96,
            horizon: 24,
            stride: 1,
            d_model: 8,
            d_k: 8,
            d_v: 8,
            heads: 2,
            layers: 2,
            d_ff: 64,
            dropout: 0.1,
            kernel_width: 4,
            kernel_depth: 2,
        }
    }
}

/// A multivariate series with chronological splits and train-range
/// normalization statistics.
#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub timestamps: Vec<f64>,
    /// `N×C` row-major.
    pub values: Vec<f64>,
    pub channels: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub train_range: (usize, usize),
    pub valid_range: (usize, usize),
    pub test_range: (usize, usize),
}

impl SeriesDataset {
    /// Splits chronologically by the given fractions and computes per-channel
    /// statistics over the training range.
    pub fn new(timestamps: Vec<f64>, values: Vec<f64>, channels: usize, split: (f64, f64, f64)) -> Result<Self> {
        let n = timestamps.len();
        if channels == 0 || values.len() != n * channels {
            return Err(Error::Contract(format!(
                "series shape mismatch: {} timestamps, {} values, {} channels",
                n,
                values.len(),
                channels
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("series timestamps must be strictly increasing".into()));
        }
        let sum = split.0 + split.1 + split.2;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("split fractions sum to {sum}")));
        }
        let b1 = (n as f64 * split.0).round() as usize;
        let b2 = (n as f64 * (split.0 + split.1)).round() as usize;
        let mut norm_mean = vec![0.0; channels];
        let mut norm_std = vec![0.0; channels];
        for c in 0..channels {
            let xs: Vec<f64> = (0..b1).map(|i| values[i * channels + c]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len().max(1) as f64;
            norm_mean[c] = mean;
            norm_std[c] = var.sqrt().max(1e-8);
        }
        Ok(SeriesDataset {
            timestamps,
            values,
            channels,
            norm_mean,
            norm_std,
            train_range: (0, b1),
            valid_range: (b1, b2),
            test_range: (b2, n),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn normalized(&self, idx: usize, c: usize) -> f64 {
        (self.values[idx * self.channels + c] - self.norm_mean[c]) / self.norm_std[c]
    }

    pub fn denormalize(&self, c: usize, x: f64) -> f64 {
        x * self.norm_std[c] + self.norm_mean[c]
    }

    /// Mean timestamp gap over the training range (kernel standardization).
    pub fn train_mean_gap(&self) -> f64 {
        let (lo, hi) = self.train_range;
        if hi - lo < 2 {
            return 1.0;
        }
        (self.timestamps[hi - 1] - self.timestamps[lo]) / (hi - lo - 1) as f64
    }
}

/// CSV input: header required, first column timestamp, remaining columns are
/// channels.
pub fn load_series_csv(path: &Path, split: (f64, f64, f64)) -> Result<SeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        context: path.display().to_string(),
        message: "empty file".into(),
    })?;
    let channels = header.split(',').count().saturating_sub(1);
    if channels == 0 {
        return Err(Error::Parse {
            context: path.display().to_string(),
            message: "need a timestamp column plus at least one channel".into(),
        });
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channels + 1 {
            return Err(Error::Parse {
                context: format!("{} line {}", path.display(), ln + 2),
                message: format!("expected {} fields, got {}", channels + 1, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                context: format!("{} line {}", path.display(), ln + 2),
                message: format!("bad number {s:?}"),
            })
        };
        timestamps.push(parse(fields[0])?);
        for f in &fields[1..] {
            values.push(parse(f)?);
        }
    }
    SeriesDataset::new(timestamps, values, channels, split)
}

/// Sliding-window starts over `[lo, hi)`: the input block is
/// `[start, start+I)` and the target block `[start+I, start+I+P)`.
pub fn ts_window(range: (usize, usize), input_len: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    let (lo, hi) = range;
    let n = hi.saturating_sub(lo);
    if n < input_len + horizon {
        return Err(Error::Contract(format!(
            "series range of {n} steps is shorter than input {input_len} + horizon {horizon}"
        )));
    }
    if stride == 0 {
        return Err(Error::Contract("stride must be positive".into()));
    }
    Ok((lo..=hi - input_len - horizon).step_by(stride).collect())
}

/// Learnable state of the forecasting variant.
#[derive(Clone, Debug)]
pub struct TsModelState {
    pub config: TsConfig,
    pub channels: usize,
    pub val_w: Tensor, // [C × d_model]
    pub val_b: Tensor, // [d_model]
    pub layers: Vec<LayerParams>,
    pub head_w: Tensor, // [I·d_model × P·C]
    pub head_b: Tensor, // [P·C]
    pub bank_q: KernelBank,
    pub bank_k: KernelBank,
    pub bank_v: KernelBank,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
}

impl TsModelState {
    pub fn init(config: TsConfig, channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 || config.input_len == 0 || config.horizon == 0 {
            return Err(Error::Config("channels, input_len, horizon must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let kc = KernelConfig {
            mode: KernelMode::Shared,
            width: config.kernel_width,
            depth: config.kernel_depth,
        };
        let cb = 1.0 / (channels as f64).sqrt();
        let hb = 1.0 / ((config.input_len * d) as f64).sqrt();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams::init(d, config.d_k, config.d_v, config.heads, config.d_ff, &mut rng));
        }
        Ok(TsModelState {
            channels,
            val_w: uniform_matrix(channels, d, cb, &mut rng),
            val_b: Tensor::vector(vec![0.0; d]),
            layers,
            head_w: uniform_matrix(config.input_len * d, config.horizon * channels, hb, &mut rng),
            head_b: Tensor::vector(vec![0.0; config.horizon * channels]),
            bank_q: KernelBank::init(kc, config.heads, 1, &mut rng),
            bank_k: KernelBank::init(kc, config.heads, 1, &mut rng),
            bank_v: KernelBank::init(kc, config.heads, 1, &mut rng),
            norm_mean: vec![0.0; channels],
            norm_std: vec![1.0; channels],
            config,
        })
    }

    pub fn set_dt_scale(&mut self, scale: f64) -> Result<()> {
        self.bank_q.set_dt_scale(scale)?;
        self.bank_k.set_dt_scale(scale)?;
        self.bank_v.set_dt_scale(scale)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("val_proj.w".into(), &self.val_w),
            ("val_proj.b".into(), &self.val_b),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            lp.push_named(&format!("layer{l}"), &mut out);
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        for (prefix, bank) in [("phi_q", &self.bank_q), ("phi_k", &self.bank_k), ("phi_v", &self.bank_v)] {
            for (name, t) in bank.named_params() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("val_proj.w".into(), &mut self.val_w),
            ("val_proj.b".into(), &mut self.val_b),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            lp.push_named_mut(&format!("layer{l}"), &mut out);
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        for (prefix, bank) in [
            ("phi_q", &mut self.bank_q),
            ("phi_k", &mut self.bank_k),
            ("phi_v", &mut self.bank_v),
        ] {
            for (name, t) in bank.named_params_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub struct TsForward {
    pub tape: Tape,
    pub val_w: Var,
    pub val_b: Var,
    pub layers: Vec<BoundLayer>,
    pub head_w: Var,
    pub head_b: Var,
    pub bq: BoundKernels,
    pub bk: BoundKernels,
    pub bv: BoundKernels,
    config: TsConfig,
}

impl TsForward {
    pub fn new(state: &TsModelState, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let val_w = tape.leaf(state.val_w.clone(), trainable);
        let val_b = tape.leaf(state.val_b.clone(), trainable);
        let layers = state
            .layers
            .iter()
            .map(|lp| BoundLayer::bind(lp, &mut tape, trainable))
            .collect();
        let head_w = tape.leaf(state.head_w.clone(), trainable);
        let head_b = tape.leaf(state.head_b.clone(), trainable);
        let bq = BoundKernels::bind(&state.bank_q, &mut tape, trainable);
        let bk = BoundKernels::bind(&state.bank_k, &mut tape, trainable);
        let bv = BoundKernels::bind(&state.bank_v, &mut tape, trainable);
        TsForward {
            tape,
            val_w,
            val_b,
            layers,
            head_w,
            head_b,
            bq,
            bk,
            bv,
            config: state.config.clone(),
        }
    }

    /// Vars aligned with `TsModelState::named_params`.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.val_w, self.val_b];
        for lp in &self.layers {
            out.extend(lp.param_vars());
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out.extend(self.bq.param_vars());
        out.extend(self.bk.param_vars());
        out.extend(self.bv.param_vars());
        out
    }
}

/// Causal encoder over one normalized input block `[I×C]` at the given
/// timestamps. Returns hidden states `[I × d_model]`.
pub fn ts_encode(
    fwd: &mut TsForward,
    block: &Tensor,
    timestamps: &[f64],
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    let cfg = fwd.config.clone();
    let i_len = timestamps.len();
    if block.shape() != [i_len, fwd.tape.value(fwd.val_w).shape()[0]] {
        return Err(Error::Contract(format!(
            "input block shape {:?} does not match {} steps × channels",
            block.shape(),
            i_len
        )));
    }
    let tape = &mut fwd.tape;
    let x = tape.constant(block.clone());
    let mut h = tape.matmul(x, fwd.val_w)?;
    h = tape.add_bias(h, fwd.val_b)?;

    // strictly causal pairs over the window
    let mut dts = Vec::new();
    let mut positions = Vec::new();
    let mut mask = vec![false; i_len * i_len];
    for j in 0..i_len {
        for k in 0..j {
            dts.push(timestamps[j] - timestamps[k]);
            positions.push(j * i_len + k);
            mask[j * i_len + k] = true;
        }
    }
    let zeros = vec![0usize; dts.len()];
    let shape = vec![i_len, i_len];
    let mut phi_q = Vec::with_capacity(cfg.heads);
    let mut phi_k = Vec::with_capacity(cfg.heads);
    let mut phi_v = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        phi_q.push(fwd.bq.eval_assembled(tape, head, &zeros, &dts, Some(&positions), shape.clone())?);
        phi_k.push(fwd.bk.eval_assembled(tape, head, &zeros, &dts, Some(&positions), shape.clone())?);
        phi_v.push(fwd.bv.eval_assembled(tape, head, &zeros, &dts, Some(&positions), shape.clone())?);
    }

    for lp in &fwd.layers {
        h = attention_block(
            tape, lp, cfg.heads, cfg.d_k, h, h, &phi_q, &phi_k, &phi_v, &mask, dropout, None,
        )?;
    }
    Ok(h)
}

/// Linear forecast head: flatten `[I × d_model]`, map to `[P × C]`
/// (normalized units).
pub fn ts_forecast(fwd: &mut TsForward, hidden: Var) -> Result<Var> {
    let cfg = fwd.config.clone();
    let tape = &mut fwd.tape;
    let numel = tape.value(hidden).numel();
    let flat = tape.reshape(hidden, vec![1, numel])?;
    let out = tape.matmul(flat, fwd.head_w)?;
    let out = tape.add_bias(out, fwd.head_b)?;
    let channels = tape.value(fwd.head_b).numel() / cfg.horizon;
    tape.reshape(out, vec![cfg.horizon, channels])
}

/// Forecast in original units for a window starting at `start`.
pub fn forecast_denormalized(state: &TsModelState, ds: &SeriesDataset, start: usize) -> Result<Vec<f64>> {
    let (block, stamps) = input_block(state, ds, start);
    let mut fwd = TsForward::new(state, false);
    let mut nd = None;
    let hidden = ts_encode(&mut fwd, &block, &stamps, &mut nd)?;
    let pred = ts_forecast(&mut fwd, hidden)?;
    let vals = fwd.tape.value(pred).data();
    Ok(vals
        .iter()
        .enumerate()
        .map(|(i, &x)| state.norm_std[i % state.channels] * x + state.norm_mean[i % state.channels])
        .collect())
}

fn input_block(state: &TsModelState, ds: &SeriesDataset, start: usize) -> (Tensor, Vec<f64>) {
    let i_len = state.config.input_len;
    let c = ds.channels;
    let mut data = Vec::with_capacity(i_len * c);
    for idx in start..start + i_len {
        for ch in 0..c {
            data.push((ds.values[idx * c + ch] - state.norm_mean[ch]) / state.norm_std[ch]);
        }
    }
    (
        Tensor::new(vec![i_len, c], data).unwrap(),
        ds.timestamps[start..start + i_len].to_vec(),
    )
}

fn target_block(state: &TsModelState, ds: &SeriesDataset, start: usize) -> Tensor {
    let i_len = state.config.input_len;
    let p = state.config.horizon;
    let c = ds.channels;
    let mut data = Vec::with_capacity(p * c);
    for idx in start + i_len..start + i_len + p {
        for ch in 0..c {
            data.push((ds.values[idx * c + ch] - state.norm_mean[ch]) / state.norm_std[ch]);
        }
    }
    Tensor::new(vec![p, c], data).unwrap()
}

/// Squared-error loss of one window as a tape variable (normalized units).
fn window_mse(fwd: &mut TsForward, state: &TsModelState, ds: &SeriesDataset, start: usize, dropout: &mut Option<Dropout>) -> Result<Var> {
    let (block, stamps) = input_block(state, ds, start);
    let hidden = ts_encode(fwd, &block, &stamps, dropout)?;
    let pred = ts_forecast(fwd, hidden)?;
    let target = fwd.tape.constant(target_block(state, ds, start));
    let diff = fwd.tape.sub(pred, target)?;
    let sq = fwd.tape.mul(diff, diff)?;
    let sum = fwd.tape.sum_all(sq);
    let n = state.config.horizon * ds.channels;
    Ok(fwd.tape.scale(sum, 1.0 / n as f64))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsTrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TsTrainConfig {
    fn default() -> Self {
        TsTrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TsTrainReport {
    pub train_mse: Vec<f64>,
    pub valid_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub stopping_epoch: usize,
    pub checkpoint: String,
    pub wall_time_secs: f64,
}

impl TsTrainReport {
    pub fn metrics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "train_mse": self.train_mse,
            "valid_mse": self.valid_mse,
            "best_epoch": self.best_epoch,
            "best_valid_mse": self.best_valid_mse,
            "stopping_epoch": self.stopping_epoch,
            "checkpoint": self.checkpoint,
        })
    }
}

/// MSE training with Adam and early stopping on the validation windows.
pub fn ts_fit(
    state: &mut TsModelState,
    ds: &SeriesDataset,
    cfg: &TsTrainConfig,
    checkpoint_path: &Path,
) -> Result<TsTrainReport> {
    let start_time = std::time::Instant::now();
    state.norm_mean = ds.norm_mean.clone();
    state.norm_std = ds.norm_std.clone();
    state.set_dt_scale(ds.train_mean_gap())?;

    let tc = &state.config;
    let train_windows = ts_window(ds.train_range, tc.input_len, tc.horizon, tc.stride)?;
    let valid_windows = ts_window(ds.valid_range, tc.input_len, tc.horizon, tc.stride)
        .unwrap_or_else(|_| Vec::new());
    if valid_windows.is_empty() {
        return Err(Error::Contract("validation range yields no windows".into()));
    }

    let sizes: Vec<usize> = state.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, &sizes);
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut train_curve = Vec::new();
    let mut valid_curve = Vec::new();
    let mut stopping_epoch = cfg.max_epochs;
    let mut have_checkpoint = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order = train_windows.clone();
        let mut shuffle_rng = rng::derive(cfg.seed, 6, epoch as u64);
        rng::shuffle(&mut order, &mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let inv = 1.0 / chunk.len() as f64;
            for (wi, &w) in chunk.iter().enumerate() {
                let mut fwd = TsForward::new(state, true);
                let mut drop = Dropout::new(
                    state.config.dropout,
                    cfg.seed,
                    ((epoch as u64) << 40) ^ ((bi as u64) << 20) ^ wi as u64,
                );
                let loss = window_mse(&mut fwd, state, ds, w, &mut drop)?;
                let value = fwd.tape.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                epoch_loss += value;
                count += 1;
                fwd.tape.backward(loss)?;
                for (acc, v) in grads.iter_mut().zip(fwd.param_vars()) {
                    if let Some(g) = fwd.tape.grad(v) {
                        for (a, x) in acc.iter_mut().zip(g) {
                            *a += x * inv;
                        }
                    }
                }
            }
            let mut params = state.named_params_mut();
            adam.step(&mut params, &grads);
        }
        train_curve.push(epoch_loss / count as f64);

        let (v_mse, _) = ts_metrics(state, ds, &valid_windows)?;
        valid_curve.push(v_mse);
        let (improved, stop) = stopper.observe(epoch, v_mse);
        if improved {
            save_ts_checkpoint(state, checkpoint_path)?;
            have_checkpoint = true;
        }
        if stop {
            stopping_epoch = epoch;
            break;
        }
    }

    if have_checkpoint {
        *state = load_ts_checkpoint(checkpoint_path)?;
    }
    let (best_epoch, best_valid_mse) = stopper.best();
    Ok(TsTrainReport {
        train_mse: train_curve,
        valid_mse: valid_curve,
        best_epoch,
        best_valid_mse,
        stopping_epoch,
        checkpoint: checkpoint_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        wall_time_secs: start_time.elapsed().as_secs_f64(),
    })
}

fn ts_metrics(state: &TsModelState, ds: &SeriesDataset, windows: &[usize]) -> Result<(f64, f64)> {
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for &w in windows {
        let (block, stamps) = input_block(state, ds, w);
        let mut fwd = TsForward::new(state, false);
        let mut nd = None;
        let hidden = ts_encode(&mut fwd, &block, &stamps, &mut nd)?;
        let pred = ts_forecast(&mut fwd, hidden)?;
        let target = target_block(state, ds, w);
        for (p, t) in fwd.tape.value(pred).data().iter().zip(target.data()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
            n += 1;
        }
    }
    Ok((se / n as f64, ae / n as f64))
}

/// Normalized MSE and MAE over all test windows (stride 1).
pub fn ts_evaluate(state: &TsModelState, ds: &SeriesDataset) -> Result<(f64, f64)> {
    let windows = ts_window(ds.test_range, state.config.input_len, state.config.horizon, 1)?;
    ts_metrics(state, ds, &windows)
}

/// Normalized MSE of the repeat-last-value predictor over the same windows;
/// the reference any trained model must beat.
pub fn naive_last_value_mse(ds: &SeriesDataset, input_len: usize, horizon: usize) -> Result<f64> {
    let windows = ts_window(ds.test_range, input_len, horizon, 1)?;
    let c = ds.channels;
    let mut se = 0.0;
    let mut n = 0usize;
    for &w in &windows {
        for ch in 0..c {
            let last = (ds.values[(w + input_len - 1) * c + ch] - ds.norm_mean[ch]) / ds.norm_std[ch];
            for h in 0..horizon {
                let t = (ds.values[(w + input_len + h) * c + ch] - ds.norm_mean[ch]) / ds.norm_std[ch];
                se += (last - t) * (last - t);
                n += 1;
            }
        }
    }
    Ok(se / n as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints (same container as the event model, different magic)
// ---------------------------------------------------------------------------

const TS_MAGIC: &[u8; 8] = b"HAWKSERS";
const TS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TsHeader {
    version: u32,
    config: TsConfig,
    channels: usize,
    dt_scale: f64,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_ts_checkpoint(state: &TsModelState, path: &Path) -> Result<()> {
    let named = state.named_params();
    let header = TsHeader {
        version: TS_VERSION,
        config: state.config.clone(),
        channels: state.channels,
        dt_scale: state.bank_q.dt_scale(),
        norm_mean: state.norm_mean.clone(),
        norm_std: state.norm_std.clone(),
        tensors: named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(TS_MAGIC)?;
    file.write_all(&TS_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, t) in &named {
        for x in t.data() {
            file.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_ts_checkpoint(path: &Path) -> Result<TsModelState> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != TS_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a series checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != TS_VERSION {
        return Err(Error::Checkpoint("unsupported series checkpoint version".into()));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: TsHeader = serde_json::from_slice(&header_bytes)?;

    let mut state = TsModelState::init(header.config, header.channels, 0)?;
    state.set_dt_scale(header.dt_scale)?;
    state.norm_mean = header.norm_mean;
    state.norm_std = header.norm_std;
    {
        let mut named = state.named_params_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::Checkpoint("tensor manifest mismatch".into()));
        }
        for ((ename, eshape), (name, tensor)) in header.tensors.iter().zip(named.iter_mut()) {
            if ename != name || eshape != tensor.shape() {
                return Err(Error::Checkpoint(format!("tensor mismatch at {ename}")));
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
