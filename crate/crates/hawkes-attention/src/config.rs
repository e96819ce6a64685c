//! Run configuration: one TOML document with flat sections, strict keys,
//! `--set section.key=value` overrides, and a resolved echo written next to
//! every run's artifacts so any run can be reproduced from its output
//! directory alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::QuadratureMode;
use crate::error::{Error, Result};
use crate::hawkes::HawkesParams;
use crate::infer::{PredictionConfig, TypeTimestamp};
use crate::kernels::{KernelConfig, KernelMode};
use crate::model::{ModelConfig, ProbePolicy};
use crate::timeseries::{TsConfig, TsTrainConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub hawkes: Option<HawkesSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub kernels: KernelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub gradcheck: GradCheckSection,
    #[serde(default)]
    pub export: ExportSection,
    #[serde(default)]
    pub ts: TsSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Single dataset split by `split`/`split_seed`; alternatively give
    /// explicit `train`/`valid`/`test` paths.
    pub dataset: Option<String>,
    pub train: Option<String>,
    pub valid: Option<String>,
    pub test: Option<String>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub split_seed: u64,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: None,
            train: None,
            valid: None,
            test: None,
            split: default_split(),
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HawkesSection {
    pub mu: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub horizon: f64,
    pub n_sequences: usize,
}

impl HawkesSection {
    pub fn params(&self) -> Result<HawkesParams> {
        let k = self.mu.len();
        let flatten = |rows: &[Vec<f64>], what: &str| -> Result<Vec<f64>> {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(Error::Config(format!("hawkes.{what} must be a {k}x{k} matrix")));
            }
            Ok(rows.iter().flatten().copied().collect())
        };
        HawkesParams::new(self.mu.clone(), flatten(&self.alpha, "alpha")?, flatten(&self.beta, "beta")?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d64")]
    pub d_model: usize,
    #[serde(default = "d64")]
    pub d_k: usize,
    #[serde(default = "d64")]
    pub d_v: usize,
    #[serde(default = "d2")]
    pub heads: usize,
    #[serde(default = "d2")]
    pub layers: usize,
    #[serde(default = "d128")]
    pub d_ff: usize,
    #[serde(default)]
    pub use_pe: bool,
    #[serde(default)]
    pub use_rnn: bool,
    #[serde(default = "d64")]
    pub d_rnn: usize,
    #[serde(default)]
    pub probe_policy: ProbePolicy,
    /// Parameter initialization seed; the global seed drives everything else.
    #[serde(default)]
    pub init_seed: u64,
    /// Checkpoint consumed by eval/predict/export-kernels.
    pub checkpoint: Option<String>,
}

fn d2() -> usize {
    2
}
fn d64() -> usize {
    64
}
fn d128() -> usize {
    128
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            d_k: 64,
            d_v: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
            use_pe: false,
            use_rnn: false,
            d_rnn: 64,
            probe_policy: ProbePolicy::PerType,
            init_seed: 0,
            checkpoint: None,
        }
    }
}

impl Default for ProbePolicy {
    fn default() -> Self {
        ProbePolicy::PerType
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub mode: KernelMode,
    #[serde(default = "d8")]
    pub width: usize,
    #[serde(default = "d2")]
    pub depth: usize,
}

fn d8() -> usize {
    8
}

impl Default for KernelMode {
    fn default() -> Self {
        KernelMode::PerType
    }
}

impl Default for KernelSection {
    fn default() -> Self {
        let k = KernelConfig::default();
        KernelSection {
            mode: k.mode,
            width: k.width,
            depth: k.depth,
        }
    }
}

/// Mirrors `TrainConfig` field names exactly; `seed` falls back to the
/// global seed when absent.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "d256")]
    pub batch_size: usize,
    #[serde(default = "d200")]
    pub max_epochs: usize,
    #[serde(default = "d10")]
    pub patience: usize,
    #[serde(default = "d20")]
    pub s_mc: usize,
    pub seed: Option<u64>,
    #[serde(default = "default_quadrature")]
    pub quadrature: QuadratureMode,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-3
}
fn default_dropout() -> f64 {
    0.1
}
fn d256() -> usize {
    256
}
fn d200() -> usize {
    200
}
fn d10() -> usize {
    10
}
fn d20() -> usize {
    20
}
fn default_quadrature() -> QuadratureMode {
    QuadratureMode::Uniform
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            dropout: default_dropout(),
            batch_size: d256(),
            max_epochs: d200(),
            patience: d10(),
            s_mc: d20(),
            seed: None,
            quadrature: default_quadrature(),
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, global_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            s_mc: self.s_mc,
            seed: self.seed.unwrap_or(global_seed),
            quadrature: self.quadrature,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    #[serde(default = "d50")]
    pub n_samples: usize,
    #[serde(default = "default_bound_factor")]
    pub bound_factor: f64,
    #[serde(default = "d10000")]
    pub max_rejections: usize,
    #[serde(default = "default_horizon_cap")]
    pub horizon_cap: f64,
    #[serde(default)]
    pub type_from: TypeTimestamp,
    #[serde(default = "d20")]
    pub s_mc: usize,
    pub seed: Option<u64>,
}

fn d50() -> usize {
    50
}
fn d10000() -> usize {
    10_000
}
fn default_bound_factor() -> f64 {
    5.0
}
fn default_horizon_cap() -> f64 {
    20.0
}

impl Default for TypeTimestamp {
    fn default() -> Self {
        TypeTimestamp::TrueTime
    }
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            n_samples: d50(),
            bound_factor: default_bound_factor(),
            max_rejections: d10000(),
            horizon_cap: default_horizon_cap(),
            type_from: TypeTimestamp::TrueTime,
            s_mc: d20(),
            seed: None,
        }
    }
}

impl PredictSection {
    pub fn to_prediction_config(&self, global_seed: u64) -> PredictionConfig {
        PredictionConfig {
            n_samples: self.n_samples,
            bound_factor: self.bound_factor,
            max_rejections: self.max_rejections,
            horizon_cap: self.horizon_cap,
            type_from: self.type_from,
            s_mc: self.s_mc,
            seed: self.seed.unwrap_or(global_seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    #[serde(default = "d5")]
    pub max_events: usize,
    #[serde(default = "d4")]
    pub s_mc: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub sequence_index: usize,
}

fn d4() -> usize {
    4
}
fn d5() -> usize {
    5
}
fn default_tolerance() -> f64 {
    1e-4
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            max_events: 5,
            s_mc: 4,
            tolerance: 1e-4,
            sequence_index: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    /// Grid spans `[0, grid_max]`; defaults to 3x the model's dt scale.
    pub grid_max: Option<f64>,
    #[serde(default = "d50")]
    pub grid_points: usize,
    /// Reference dataset for effective-kernel coefficients (falls back to
    /// `data.dataset`).
    pub dataset: Option<String>,
    #[serde(default)]
    pub sequence_index: usize,
    /// Reference position; defaults to the sequence's last index.
    pub position: Option<usize>,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            grid_max: None,
            grid_points: 50,
            dataset: None,
            sequence_index: 0,
            position: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsSection {
    pub series: Option<String>,
    #[serde(default = "default_ts_split")]
    pub split: [f64; 3],
    #[serde(default = "d96")]
    pub input_len: usize,
    #[serde(default = "d24")]
    pub horizon: usize,
    #[serde(default = "d1")]
    pub stride: usize,
    #[serde(default = "d8")]
    pub d_model: usize,
    #[serde(default = "d8")]
    pub d_k: usize,
    #[serde(default = "d8")]
    pub d_v: usize,
    #[serde(default = "d2")]
    pub heads: usize,
    #[serde(default = "d2")]
    pub layers: usize,
    #[serde(default = "d64")]
    pub d_ff: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "d4")]
    pub kernel_width: usize,
    #[serde(default = "d2")]
    pub kernel_depth: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "d32")]
    pub batch_size: usize,
    #[serde(default = "d10")]
    pub max_epochs: usize,
    #[serde(default = "d3")]
    pub patience: usize,
    pub checkpoint: Option<String>,
}

fn d1() -> usize {
    1
}
fn d3() -> usize {
    3
}
fn d24() -> usize {
    24
}
fn d32() -> usize {
    32
}
fn d96() -> usize {
    96
}
fn default_ts_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

impl Default for TsSection {
    fn default() -> Self {
        TsSection {
            series: None,
            split: default_ts_split(),
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
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            checkpoint: None,
        }
    }
}

impl TsSection {
    pub fn to_ts_config(&self) -> TsConfig {
        TsConfig {
            input_len: self.input_len,
            horizon: self.horizon,
            stride: self.stride,
            d_model: self.d_model,
            d_k: self.d_k,
            d_v: self.d_v,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            kernel_width: self.kernel_width,
            kernel_depth: self.kernel_depth,
        }
    }

    pub fn to_ts_train_config(&self, global_seed: u64) -> TsTrainConfig {
        TsTrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: global_seed,
        }
    }
}

impl RunConfig {
    /// Model configuration for `num_types` event types, combining the
    /// `[model]`, `[kernels]`, and `[train]` (dropout) sections.
    pub fn model_config(&self, num_types: usize) -> ModelConfig {
        ModelConfig {
            num_types,
            d_model: self.model.d_model,
            d_k: self.model.d_k,
            d_v: self.model.d_v,
            heads: self.model.heads,
            layers: self.model.layers,
            d_ff: self.model.d_ff,
            use_pe: self.model.use_pe,
            use_rnn: self.model.use_rnn,
            d_rnn: self.model.d_rnn,
            dropout: self.train.dropout,
            probe_policy: self.model.probe_policy,
            kernel: KernelConfig {
                mode: self.kernels.mode,
                width: self.kernels.width,
                depth: self.kernels.depth,
            },
        }
    }

    /// Resolved-config echo: a TOML document sufficient to reproduce the run.
    pub fn echo(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("echo serialization: {e}")))
    }
}

/// Parses one `--set section.key=value` override: the value is interpreted
/// as a TOML literal when possible, falling back to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {spec:?}")))?;
    let keys: Vec<String> = path.split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::Config(format!("--set has an empty key segment: {spec:?}")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((keys, value))
}

fn apply_override(table: &mut toml::Table, keys: &[String], value: toml::Value) -> Result<()> {
    if keys.len() == 1 {
        table.insert(keys[0].clone(), value);
        return Ok(());
    }
    let entry = table
        .entry(keys[0].clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(inner) => apply_override(inner, &keys[1..], value),
        _ => Err(Error::Config(format!("--set path {} crosses a non-table value", keys.join(".")))),
    }
}

/// Loads the TOML config (or starts from defaults), applies `--set`
/// overrides, then the `--out`/`--seed` flags. Unknown keys are rejected.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    out: Option<&str>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for spec in sets {
        let (keys, value) = parse_override(spec)?;
        apply_override(&mut table, &keys, value)?;
    }
    let mut config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(o) = out {
        config.out_dir = Some(o.to_string());
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}
