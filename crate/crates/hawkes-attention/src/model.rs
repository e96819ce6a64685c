//! The time-modulated attention network over event sequences.
//!
//! Events embed by type; queries, keys, and values at lag `Δt = t_j - t_k`
//! are the projected embeddings multiplied by learned kernels — the query by
//! the target type's kernel `φ_{c_j}(Δt)`, key and value by the source type's
//! kernel `φ_{c_k}(Δt)`. Because kernels are scalar, the score of a pair
//! factors as `φ_q · φ_k · (W_Q x_j)·(W_K x_k) / √d_k`, which is how the
//! blocks below compute it. Masked softmax restricts each position to
//! strictly earlier events; an event's representation therefore depends only
//! on its own embedding and its past.
//!
//! Intensities at arbitrary (non-event) times are produced by probe
//! positions: virtual events carrying a query embedding, attending to the
//! per-layer outputs of the real events but never serving as keys. A probe at
//! an event's own time with the same query type reproduces that event's
//! hidden state exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EventSequence;
use crate::error::{Error, Result};
use crate::kernels::{self, BoundKernels, KernelBank, KernelConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

/// How queries are built at non-event probe times.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePolicy {
    /// Query with the most recent event's type (learned boot embedding in the
    /// first interval). One probe per quadrature node. Cheap, but the
    /// survival integral then measures a different intensity than the event
    /// term (which queries with the event's own type), and training learns
    /// to widen that gap: reported likelihoods sink below any true model's.
    /// Kept for cost experiments; not a valid training objective.
    LastEvent,
    /// One probe per candidate type per node; the intensity of type `c` is
    /// read from the probe that queried with `c`. This matches the event
    /// term's own-type query, making the loss a genuine likelihood. Default.
    PerType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_types: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub use_pe: bool,
    pub use_rnn: bool,
    pub d_rnn: usize,
    pub dropout: f64,
    pub probe_policy: ProbePolicy,
    pub kernel: KernelConfig,
}

impl ModelConfig {
    pub fn defaults(num_types: usize) -> Self {
        ModelConfig {
            num_types,
            d_model: 64,
            d_k: 64,
            d_v: 64,
            heads: 2,
            layers: 2,
            d_ff: 128,
            use_pe: false,
            use_rnn: false,
            d_rnn: 64,
            dropout: 0.1,
            probe_policy: ProbePolicy::PerType,
            kernel: KernelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.d_model < 2 || self.heads == 0 || self.layers == 0 {
            return Err(Error::Config(format!(
                "degenerate model dimensions: K={}, d_model={}, H={}, L={}",
                self.num_types, self.d_model, self.heads, self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One encoder layer: per-head projections, output projection, FFN, norms.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_q: Vec<Tensor>, // per head, [d_model × d_k]
    pub w_k: Vec<Tensor>, // per head, [d_model × d_k]
    pub w_v: Vec<Tensor>, // per head, [d_model × d_v]
    pub w_o: Tensor,      // [H·d_v × d_model]
    pub ffn_w1: Tensor,   // [d_model × d_ff]
    pub ffn_b1: Tensor,   // [d_ff]
    pub ffn_w2: Tensor,   // [d_ff × d_model]
    pub ffn_b2: Tensor,   // [d_model]
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

/// Gated recurrent refinement over encoder outputs.
#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w_z: Tensor, // [d_model × d_rnn]
    pub u_z: Tensor, // [d_rnn × d_rnn]
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_n: Tensor,
    pub u_n: Tensor,
    pub b_n: Tensor,
    pub w_out: Tensor, // [d_rnn × d_model]
    pub b_out: Tensor,
}

/// All learnable state of the event model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embedding: Tensor, // [K × d_model]
    /// Query embedding for "no previous event yet" probes.
    pub boot: Tensor, // [1 × d_model]
    pub layers: Vec<LayerParams>,
    pub rnn: Option<RnnParams>,
    pub out_mu: Tensor, // [K]
    pub out_a: Tensor,  // [d_model × K]
    pub kernels: KernelBank,
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

impl LayerParams {
    pub(crate) fn init(d_model: usize, d_k: usize, d_v: usize, heads: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let wb = 1.0 / (d_model as f64).sqrt();
        let ob = 1.0 / ((heads * d_v) as f64).sqrt();
        let fb = 1.0 / (d_ff as f64).sqrt();
        LayerParams {
            w_q: (0..heads).map(|_| uniform_matrix(d_model, d_k, wb, rng)).collect(),
            w_k: (0..heads).map(|_| uniform_matrix(d_model, d_k, wb, rng)).collect(),
            w_v: (0..heads).map(|_| uniform_matrix(d_model, d_v, wb, rng)).collect(),
            w_o: uniform_matrix(heads * d_v, d_model, ob, rng),
            ffn_w1: uniform_matrix(d_model, d_ff, wb, rng),
            ffn_b1: Tensor::vector(vec![0.0; d_ff]),
            ffn_w2: uniform_matrix(d_ff, d_model, fb, rng),
            ffn_b2: Tensor::vector(vec![0.0; d_model]),
            ln1_g: Tensor::vector(vec![1.0; d_model]),
            ln1_b: Tensor::vector(vec![0.0; d_model]),
            ln2_g: Tensor::vector(vec![1.0; d_model]),
            ln2_b: Tensor::vector(vec![0.0; d_model]),
        }
    }

    pub(crate) fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for h in 0..self.w_q.len() {
            out.push((format!("{prefix}.h{h}.w_q"), &self.w_q[h]));
            out.push((format!("{prefix}.h{h}.w_k"), &self.w_k[h]));
            out.push((format!("{prefix}.h{h}.w_v"), &self.w_v[h]));
        }
        out.push((format!("{prefix}.w_o"), &self.w_o));
        out.push((format!("{prefix}.ffn.w1"), &self.ffn_w1));
        out.push((format!("{prefix}.ffn.b1"), &self.ffn_b1));
        out.push((format!("{prefix}.ffn.w2"), &self.ffn_w2));
        out.push((format!("{prefix}.ffn.b2"), &self.ffn_b2));
        out.push((format!("{prefix}.ln1.g"), &self.ln1_g));
        out.push((format!("{prefix}.ln1.b"), &self.ln1_b));
        out.push((format!("{prefix}.ln2.g"), &self.ln2_g));
        out.push((format!("{prefix}.ln2.b"), &self.ln2_b));
    }

    pub(crate) fn push_named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let heads = self.w_q.len();
        let mut qs = self.w_q.iter_mut();
        let mut ks = self.w_k.iter_mut();
        let mut vs = self.w_v.iter_mut();
        for h in 0..heads {
            out.push((format!("{prefix}.h{h}.w_q"), qs.next().unwrap()));
            out.push((format!("{prefix}.h{h}.w_k"), ks.next().unwrap()));
            out.push((format!("{prefix}.h{h}.w_v"), vs.next().unwrap()));
        }
        out.push((format!("{prefix}.w_o"), &mut self.w_o));
        out.push((format!("{prefix}.ffn.w1"), &mut self.ffn_w1));
        out.push((format!("{prefix}.ffn.b1"), &mut self.ffn_b1));
        out.push((format!("{prefix}.ffn.w2"), &mut self.ffn_w2));
        out.push((format!("{prefix}.ffn.b2"), &mut self.ffn_b2));
        out.push((format!("{prefix}.ln1.g"), &mut self.ln1_g));
        out.push((format!("{prefix}.ln1.b"), &mut self.ln1_b));
        out.push((format!("{prefix}.ln2.g"), &mut self.ln2_g));
        out.push((format!("{prefix}.ln2.b"), &mut self.ln2_b));
    }
}

impl BoundLayer {
    pub(crate) fn bind(lp: &LayerParams, tape: &mut Tape, trainable: bool) -> Self {
        let mut lease = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let mut interleaved: Vec<(Var, Var, Var)> = Vec::with_capacity(lp.w_q.len());
        for h in 0..lp.w_q.len() {
            let q = lease(&lp.w_q[h]);
            let k = lease(&lp.w_k[h]);
            let v = lease(&lp.w_v[h]);
            interleaved.push((q, k, v));
        }
        BoundLayer {
            w_q: interleaved.iter().map(|x| x.0).collect(),
            w_k: interleaved.iter().map(|x| x.1).collect(),
            w_v: interleaved.iter().map(|x| x.2).collect(),
            w_o: lease(&lp.w_o),
            ffn_w1: lease(&lp.ffn_w1),
            ffn_b1: lease(&lp.ffn_b1),
            ffn_w2: lease(&lp.ffn_w2),
            ffn_b2: lease(&lp.ffn_b2),
            ln1_g: lease(&lp.ln1_g),
            ln1_b: lease(&lp.ln1_b),
            ln2_g: lease(&lp.ln2_g),
            ln2_b: lease(&lp.ln2_b),
        }
    }

    pub(crate) fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for h in 0..self.w_q.len() {
            out.push(self.w_q[h]);
            out.push(self.w_k[h]);
            out.push(self.w_v[h]);
        }
        out.extend([
            self.w_o,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln1_g,
            self.ln1_b,
            self.ln2_g,
            self.ln2_b,
        ]);
        out
    }
}

impl ModelState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let embedding = uniform_matrix(config.num_types, d, emb_bound, &mut rng);
        let boot = uniform_matrix(1, d, emb_bound, &mut rng);

        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams::init(d, config.d_k, config.d_v, config.heads, config.d_ff, &mut rng));
        }

        let rnn = if config.use_rnn {
            let wb = 1.0 / (d as f64).sqrt();
            let ub = 1.0 / (config.d_rnn as f64).sqrt();
            Some(RnnParams {
                w_z: uniform_matrix(d, config.d_rnn, wb, &mut rng),
                u_z: uniform_matrix(config.d_rnn, config.d_rnn, ub, &mut rng),
                b_z: Tensor::vector(vec![0.0; config.d_rnn]),
                w_r: uniform_matrix(d, config.d_rnn, wb, &mut rng),
                u_r: uniform_matrix(config.d_rnn, config.d_rnn, ub, &mut rng),
                b_r: Tensor::vector(vec![0.0; config.d_rnn]),
                w_n: uniform_matrix(d, config.d_rnn, wb, &mut rng),
                u_n: uniform_matrix(config.d_rnn, config.d_rnn, ub, &mut rng),
                b_n: Tensor::vector(vec![0.0; config.d_rnn]),
                w_out: uniform_matrix(config.d_rnn, d, ub, &mut rng),
                b_out: Tensor::vector(vec![0.0; d]),
            })
        } else {
            None
        };

        let out_mu = Tensor::vector(vec![0.0; config.num_types]);
        let out_a = uniform_matrix(d, config.num_types, emb_bound, &mut rng);
        let kernels = KernelBank::init(config.kernel, config.heads, config.num_types, &mut rng);

        Ok(ModelState {
            config,
            embedding,
            boot,
            layers,
            rnn,
            out_mu,
            out_a,
            kernels,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("boot".into(), &self.boot),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            lp.push_named(&format!("layer{l}"), &mut out);
        }
        if let Some(r) = &self.rnn {
            out.push(("rnn.w_z".into(), &r.w_z));
            out.push(("rnn.u_z".into(), &r.u_z));
            out.push(("rnn.b_z".into(), &r.b_z));
            out.push(("rnn.w_r".into(), &r.w_r));
            out.push(("rnn.u_r".into(), &r.u_r));
            out.push(("rnn.b_r".into(), &r.b_r));
            out.push(("rnn.w_n".into(), &r.w_n));
            out.push(("rnn.u_n".into(), &r.u_n));
            out.push(("rnn.b_n".into(), &r.b_n));
            out.push(("rnn.w_out".into(), &r.w_out));
            out.push(("rnn.b_out".into(), &r.b_out));
        }
        out.push(("intensity.mu".into(), &self.out_mu));
        out.push(("intensity.a".into(), &self.out_a));
        out.extend(self.kernels.named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("boot".into(), &mut self.boot),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            lp.push_named_mut(&format!("layer{l}"), &mut out);
        }
        if let Some(r) = &mut self.rnn {
            out.push(("rnn.w_z".into(), &mut r.w_z));
            out.push(("rnn.u_z".into(), &mut r.u_z));
            out.push(("rnn.b_z".into(), &mut r.b_z));
            out.push(("rnn.w_r".into(), &mut r.w_r));
            out.push(("rnn.u_r".into(), &mut r.u_r));
            out.push(("rnn.b_r".into(), &mut r.b_r));
            out.push(("rnn.w_n".into(), &mut r.w_n));
            out.push(("rnn.u_n".into(), &mut r.u_n));
            out.push(("rnn.b_n".into(), &mut r.b_n));
            out.push(("rnn.w_out".into(), &mut r.w_out));
            out.push(("rnn.b_out".into(), &mut r.b_out));
        }
        out.push(("intensity.mu".into(), &mut self.out_mu));
        out.push(("intensity.a".into(), &mut self.out_a));
        out.extend(self.kernels.named_params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Relabel the type vocabulary: `perm[c]` is the new id of old type `c`.
    /// Embedding rows, intensity head rows, and per-type kernels move
    /// together, so the likelihood of a relabeled dataset is unchanged.
    pub fn permute_types(&mut self, perm: &[usize]) {
        let k = self.config.num_types;
        let d = self.config.d_model;
        let mut emb = self.embedding.clone();
        let mut mu = self.out_mu.clone();
        let mut a = self.out_a.clone();
        for c in 0..k {
            let pc = perm[c];
            emb.data_mut()[pc * d..(pc + 1) * d].copy_from_slice(&self.embedding.data()[c * d..(c + 1) * d]);
            mu.data_mut()[pc] = self.out_mu.data()[c];
            for r in 0..d {
                a.data_mut()[r * k + pc] = self.out_a.data()[r * k + c];
            }
        }
        self.embedding = emb;
        self.out_mu = mu;
        self.out_a = a;
        self.kernels.permute_types(perm);
    }
}

// ---------------------------------------------------------------------------
// Tape binding
// ---------------------------------------------------------------------------

pub struct BoundLayer {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

pub struct BoundRnn {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Model parameters leased onto a tape. Var order mirrors
/// [`ModelState::named_params`] exactly; see [`BoundModel::param_vars`].
pub struct BoundModel {
    pub embedding: Var,
    pub boot: Var,
    pub layers: Vec<BoundLayer>,
    pub rnn: Option<BoundRnn>,
    pub out_mu: Var,
    pub out_a: Var,
    pub kernels: BoundKernels,
}

impl BoundModel {
    pub fn bind(state: &ModelState, tape: &mut Tape, trainable: bool) -> Self {
        let mut lease = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let embedding = lease(&state.embedding);
        let boot = lease(&state.boot);
        let layers = state
            .layers
            .iter()
            .map(|lp| BoundLayer::bind(lp, tape, trainable))
            .collect();
        let mut lease = |t: &Tensor| tape.leaf(t.clone(), trainable);
        let rnn = state.rnn.as_ref().map(|r| BoundRnn {
            w_z: lease(&r.w_z),
            u_z: lease(&r.u_z),
            b_z: lease(&r.b_z),
            w_r: lease(&r.w_r),
            u_r: lease(&r.u_r),
            b_r: lease(&r.b_r),
            w_n: lease(&r.w_n),
            u_n: lease(&r.u_n),
            b_n: lease(&r.b_n),
            w_out: lease(&r.w_out),
            b_out: lease(&r.b_out),
        });
        let out_mu = lease(&state.out_mu);
        let out_a = lease(&state.out_a);
        let kernels = BoundKernels::bind(&state.kernels, tape, trainable);
        BoundModel {
            embedding,
            boot,
            layers,
            rnn,
            out_mu,
            out_a,
            kernels,
        }
    }

    /// Vars aligned with [`ModelState::named_params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding, self.boot];
        for lp in &self.layers {
            out.extend(lp.param_vars());
        }
        if let Some(r) = &self.rnn {
            out.extend([
                r.w_z, r.u_z, r.b_z, r.w_r, r.u_r, r.b_r, r.w_n, r.u_n, r.b_n, r.w_out, r.b_out,
            ]);
        }
        out.push(self.out_mu);
        out.push(self.out_a);
        out.extend(self.kernels.param_vars());
        out
    }
}

/// One forward pass: a fresh tape with the model bound onto it.
pub struct Forward {
    pub tape: Tape,
    pub bound: BoundModel,
    pub config: ModelConfig,
}

impl Forward {
    pub fn new(state: &ModelState, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(state, &mut tape, trainable);
        Forward {
            tape,
            bound,
            config: state.config.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-dropout mask source. Masks are sampled outside the tape and
/// applied as constants, so backward stays deterministic given the draws.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    /// `None` when the rate is zero (no masks, no rng draws).
    pub fn new(rate: f64, seed: u64, lane: u64) -> Option<Dropout> {
        if rate <= 0.0 {
            None
        } else {
            Some(Dropout {
                rate,
                rng: rng::derive(seed, 2, lane),
            })
        }
    }

    fn mask(&mut self, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - self.rate);
        let data: Vec<f64> = (0..numel)
            .map(|_| {
                if rng::uniform01(&mut self.rng) < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }
}

// ---------------------------------------------------------------------------
// Shared building blocks
// ---------------------------------------------------------------------------

/// Classic sinusoidal positional encodings for the given position indices.
pub fn positional_encoding(positions: &[usize], d: usize) -> Tensor {
    let mut data = vec![0.0; positions.len() * d];
    for (r, &pos) in positions.iter().enumerate() {
        for j in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[r * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![positions.len(), d], data).unwrap()
}

/// Flattened (query, key) pair lists driving kernel evaluation and masking.
struct PairSet {
    dts: Vec<f64>,
    q_types: Vec<usize>,
    k_types: Vec<usize>,
    positions: Vec<usize>,
    mask: Vec<bool>,
    n_q: usize,
    n_k: usize,
}

fn event_pairs(times: &[f64], types: &[usize]) -> PairSet {
    let m = times.len();
    let mut p = PairSet {
        dts: Vec::new(),
        q_types: Vec::new(),
        k_types: Vec::new(),
        positions: Vec::new(),
        mask: vec![false; m * m],
        n_q: m,
        n_k: m,
    };
    for j in 0..m {
        for k in 0..j {
            p.dts.push(times[j] - times[k]);
            p.q_types.push(types[j]);
            p.k_types.push(types[k]);
            p.positions.push(j * m + k);
            p.mask[j * m + k] = true;
        }
    }
    p
}

/// A virtual query position: time, visible history length, query embedding.
#[derive(Clone, Copy, Debug)]
pub struct ProbeSpec {
    pub t: f64,
    /// Events with index below this are visible.
    pub hist_len: usize,
    pub query: ProbeQuery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeQuery {
    Type(usize),
    /// First-interval stand-in for "no previous event type".
    Boot,
}

fn probe_pairs(times: &[f64], types: &[usize], probes: &[ProbeSpec], strict_time: bool) -> PairSet {
    let m = times.len();
    let n_q = probes.len();
    let mut p = PairSet {
        dts: Vec::new(),
        q_types: Vec::new(),
        k_types: Vec::new(),
        positions: Vec::new(),
        mask: vec![false; n_q * m],
        n_q,
        n_k: m,
    };
    for (pi, probe) in probes.iter().enumerate() {
        let q_type = match probe.query {
            ProbeQuery::Type(c) => c,
            ProbeQuery::Boot => 0, // never used: an empty history has no pairs
        };
        for k in 0..probe.hist_len {
            if strict_time && times[k] >= probe.t {
                continue;
            }
            p.dts.push(probe.t - times[k]);
            p.q_types.push(q_type);
            p.k_types.push(types[k]);
            p.positions.push(pi * m + k);
            p.mask[pi * m + k] = true;
        }
    }
    p
}

/// Per-head kernel matrices `[n_q × n_k]` for one pair set. The key kernel
/// matrix doubles as the value kernel matrix: both are the source type's
/// kernel at the same lag.
fn kernel_matrices(tape: &mut Tape, bk: &BoundKernels, heads: usize, pairs: &PairSet) -> Result<(Vec<Var>, Vec<Var>)> {
    let shape = vec![pairs.n_q, pairs.n_k];
    let mut phi_q = Vec::with_capacity(heads);
    let mut phi_k = Vec::with_capacity(heads);
    for h in 0..heads {
        phi_q.push(bk.eval_assembled(tape, h, &pairs.q_types, &pairs.dts, Some(&pairs.positions), shape.clone())?);
        phi_k.push(bk.eval_assembled(tape, h, &pairs.k_types, &pairs.dts, Some(&pairs.positions), shape.clone())?);
    }
    Ok((phi_q, phi_k))
}

/// One encoder block: multi-head time-modulated attention, output projection,
/// residual + norm, FFN, residual + norm. `attn_out` collects the post-softmax
/// weights per head when provided.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_block(
    tape: &mut Tape,
    lp: &BoundLayer,
    heads: usize,
    d_k: usize,
    queries: Var,
    keys: Var,
    phi_q: &[Var],
    phi_k: &[Var],
    phi_v: &[Var],
    mask: &[bool],
    dropout: &mut Option<Dropout>,
    mut attn_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let pq = tape.matmul(queries, lp.w_q[h])?;
        let pk = tape.matmul(keys, lp.w_k[h])?;
        let pv = tape.matmul(keys, lp.w_v[h])?;
        let pk_t = tape.transpose(pk)?;
        let base = tape.matmul(pq, pk_t)?;
        let modulated = tape.mul(base, phi_q[h])?;
        let modulated = tape.mul(modulated, phi_k[h])?;
        let scores = tape.scale(modulated, scale);
        let attn = tape.softmax_masked(scores, mask)?;
        if let Some(sink) = attn_out.as_deref_mut() {
            sink.push(attn);
        }
        let attn = match dropout {
            Some(dp) => {
                let shape = tape.value(attn).shape().to_vec();
                let m = dp.mask(shape);
                tape.mul_const(attn, &m)?
            }
            None => attn,
        };
        let weighted = tape.mul(attn, phi_v[h])?;
        head_outputs.push(tape.matmul(weighted, pv)?);
    }
    let concat = tape.concat_last(&head_outputs)?;
    let projected = tape.matmul(concat, lp.w_o)?;
    let res1 = tape.add(queries, projected)?;
    let normed1 = tape.layer_norm(res1, lp.ln1_g, lp.ln1_b)?;

    let h1 = tape.matmul(normed1, lp.ffn_w1)?;
    let h1 = tape.add_bias(h1, lp.ffn_b1)?;
    let h1 = tape.relu(h1);
    let h1 = match dropout {
        Some(dp) => {
            let shape = tape.value(h1).shape().to_vec();
            let m = dp.mask(shape);
            tape.mul_const(h1, &m)?
        }
        None => h1,
    };
    let h2 = tape.matmul(h1, lp.ffn_w2)?;
    let h2 = tape.add_bias(h2, lp.ffn_b2)?;
    let res2 = tape.add(normed1, h2)?;
    tape.layer_norm(res2, lp.ln2_g, lp.ln2_b)
}

// ---------------------------------------------------------------------------
// Event and probe encoding
// ---------------------------------------------------------------------------

/// Everything the event pass produces that later passes need.
pub struct EncodeOutput {
    /// `layers+1` entries: the input to layer `l` is `layer_inputs[l]`; the
    /// last entry is the attention stack's output (pre-refinement).
    pub layer_inputs: Vec<Var>,
    /// Final event representations, after optional recurrent refinement.
    pub events_hidden: Var,
    /// Post-softmax attention weights per `[layer][head]`, `[m × m]`.
    pub attention: Vec<Vec<Var>>,
    /// Recurrent state after each event, when refinement is enabled.
    pub rnn_states: Option<Vec<Var>>,
    pub len: usize,
}

/// Runs the encoder stack over one sequence.
pub fn encode(
    fwd: &mut Forward,
    times: &[f64],
    types: &[usize],
    dropout: &mut Option<Dropout>,
) -> Result<EncodeOutput> {
    let cfg = fwd.config.clone();
    let tape = &mut fwd.tape;
    let bound = &fwd.bound;
    let m = times.len();

    let mut x = tape.gather_rows(bound.embedding, types)?;
    if cfg.use_pe {
        let positions: Vec<usize> = (0..m).collect();
        let pe = tape.constant(positional_encoding(&positions, cfg.d_model));
        x = tape.add(x, pe)?;
    }

    let pairs = event_pairs(times, types);
    let (phi_q, phi_k) = kernel_matrices(tape, &bound.kernels, cfg.heads, &pairs)?;

    let mut layer_inputs = vec![x];
    let mut attention = Vec::with_capacity(cfg.layers);
    for lp in &bound.layers {
        let current = *layer_inputs.last().unwrap();
        let mut attn_sink = Vec::with_capacity(cfg.heads);
        let next = attention_block(
            tape,
            lp,
            cfg.heads,
            cfg.d_k,
            current,
            current,
            &phi_q,
            &phi_k,
            &phi_k,
            &pairs.mask,
            dropout,
            Some(&mut attn_sink),
        )?;
        attention.push(attn_sink);
        layer_inputs.push(next);
    }

    let pre_refined = *layer_inputs.last().unwrap();
    let (events_hidden, rnn_states) = match &bound.rnn {
        Some(r) => {
            let (refined, states) = rnn_refine(tape, r, &cfg, pre_refined, m)?;
            (refined, Some(states))
        }
        None => (pre_refined, None),
    };

    Ok(EncodeOutput {
        layer_inputs,
        events_hidden,
        attention,
        rnn_states,
        len: m,
    })
}

/// One gated recurrent step: returns the updated state.
fn gru_step(tape: &mut Tape, r: &BoundRnn, x: Var, s: Var, ones: Var) -> Result<Var> {
    let z = {
        let a = tape.matmul(x, r.w_z)?;
        let b = tape.matmul(s, r.u_z)?;
        let sum = tape.add(a, b)?;
        let sum = tape.add_bias(sum, r.b_z)?;
        tape.sigmoid(sum)
    };
    let rr = {
        let a = tape.matmul(x, r.w_r)?;
        let b = tape.matmul(s, r.u_r)?;
        let sum = tape.add(a, b)?;
        let sum = tape.add_bias(sum, r.b_r)?;
        tape.sigmoid(sum)
    };
    let n = {
        let gated = tape.mul(rr, s)?;
        let a = tape.matmul(x, r.w_n)?;
        let b = tape.matmul(gated, r.u_n)?;
        let sum = tape.add(a, b)?;
        let sum = tape.add_bias(sum, r.b_n)?;
        tape.tanh(sum)
    };
    let keep = tape.sub(ones, z)?;
    let kept = tape.mul(keep, s)?;
    let new = tape.mul(z, n)?;
    tape.add(kept, new)
}

/// Recurrent refinement over event outputs: residual projection of the
/// running state back into each event representation.
fn rnn_refine(tape: &mut Tape, r: &BoundRnn, cfg: &ModelConfig, events: Var, m: usize) -> Result<(Var, Vec<Var>)> {
    let ones = tape.constant(Tensor::matrix(1, cfg.d_rnn, vec![1.0; cfg.d_rnn]).unwrap());
    let mut s = tape.constant(Tensor::matrix(1, cfg.d_rnn, vec![0.0; cfg.d_rnn]).unwrap());
    let mut states = Vec::with_capacity(m);
    let mut refined_rows = Vec::with_capacity(m);
    for j in 0..m {
        let y = tape.gather_rows(events, &[j])?;
        s = gru_step(tape, r, y, s, ones)?;
        states.push(s);
        let proj = tape.matmul(s, r.w_out)?;
        let proj = tape.add_bias(proj, r.b_out)?;
        refined_rows.push(tape.add(y, proj)?);
    }
    let refined = tape.concat_rows(&refined_rows)?;
    Ok((refined, states))
}

/// Encodes probe positions against a finished event pass.
///
/// Probes attend at layer `l` to the events' layer-`l` inputs, exactly as a
/// real event at the same slot would; `strict_time` additionally hides
/// history events at a timestamp equal to the probe's.
pub fn encode_probes(
    fwd: &mut Forward,
    enc: &EncodeOutput,
    times: &[f64],
    types: &[usize],
    probes: &[ProbeSpec],
    strict_time: bool,
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    encode_probes_impl(fwd, enc, times, types, probes, strict_time, true, dropout)
}

/// `bounded = false` lifts the interval-end check for probes reaching past
/// the last observed event (prediction-time sampling).
#[allow(clippy::too_many_arguments)]
pub(crate) fn encode_probes_impl(
    fwd: &mut Forward,
    enc: &EncodeOutput,
    times: &[f64],
    types: &[usize],
    probes: &[ProbeSpec],
    strict_time: bool,
    bounded: bool,
    dropout: &mut Option<Dropout>,
) -> Result<Var> {
    let cfg = fwd.config.clone();
    let m = times.len();
    for (i, p) in probes.iter().enumerate() {
        if p.hist_len > m {
            return Err(Error::Contract(format!("probe {i}: hist_len {} > {}", p.hist_len, m)));
        }
        if p.hist_len > 0 && p.t < times[p.hist_len - 1] {
            return Err(Error::Contract(format!(
                "probe {i} at t = {} precedes its interval start {}",
                p.t,
                times[p.hist_len - 1]
            )));
        }
        if bounded && p.hist_len < m && p.t > times[p.hist_len] {
            return Err(Error::Contract(format!(
                "probe {i} at t = {} exceeds its interval end {}",
                p.t,
                times[p.hist_len]
            )));
        }
    }

    let tape = &mut fwd.tape;
    let bound = &fwd.bound;

    // query embeddings; Boot indexes the extra row appended after the table
    let table = tape.concat_rows(&[bound.embedding, bound.boot])?;
    let indices: Vec<usize> = probes
        .iter()
        .map(|p| match p.query {
            ProbeQuery::Type(c) => c,
            ProbeQuery::Boot => cfg.num_types,
        })
        .collect();
    let mut x = tape.gather_rows(table, &indices)?;
    if cfg.use_pe {
        let positions: Vec<usize> = probes.iter().map(|p| p.hist_len).collect();
        let pe = tape.constant(positional_encoding(&positions, cfg.d_model));
        x = tape.add(x, pe)?;
    }

    let pairs = probe_pairs(times, types, probes, strict_time);
    let (phi_q, phi_k) = kernel_matrices(tape, &bound.kernels, cfg.heads, &pairs)?;

    for (lp, keys) in bound.layers.iter().zip(&enc.layer_inputs) {
        x = attention_block(
            tape, lp, cfg.heads, cfg.d_k, x, *keys, &phi_q, &phi_k, &phi_k, &pairs.mask, dropout, None,
        )?;
    }

    if let Some(r) = &bound.rnn {
        let states = enc.rnn_states.as_ref().expect("rnn states captured during encode");
        let ones = tape.constant(Tensor::matrix(1, cfg.d_rnn, vec![1.0; cfg.d_rnn]).unwrap());
        let zero_state = tape.constant(Tensor::matrix(1, cfg.d_rnn, vec![0.0; cfg.d_rnn]).unwrap());
        let mut rows = Vec::with_capacity(probes.len());
        for (pi, p) in probes.iter().enumerate() {
            let y = tape.gather_rows(x, &[pi])?;
            let prev = if p.hist_len == 0 { zero_state } else { states[p.hist_len - 1] };
            let s = gru_step(tape, r, y, prev, ones)?;
            let proj = tape.matmul(s, r.w_out)?;
            let proj = tape.add_bias(proj, r.b_out)?;
            rows.push(tape.add(y, proj)?);
        }
        x = tape.concat_rows(&rows)?;
    }

    Ok(x)
}

/// Softplus intensity head: `λ_c = softplus(μ_c + a_c · h)` for every type.
pub fn intensities(fwd: &mut Forward, hidden: Var) -> Result<Var> {
    let pre = fwd.tape.matmul(hidden, fwd.bound.out_a)?;
    let pre = fwd.tape.add_bias(pre, fwd.bound.out_mu)?;
    Ok(fwd.tape.softplus(pre))
}

// ---------------------------------------------------------------------------
// Effective kernels
// ---------------------------------------------------------------------------

/// Attention-mixed kernel curves for one (source, target) pair, measured at a
/// reference position of a reference sequence.
#[derive(Clone, Debug, Serialize)]
pub struct EffectiveKernel {
    pub source: usize,
    pub target: usize,
    /// Mixing coefficient per head at the reference context.
    pub coefficients: Vec<f64>,
    pub grid: Vec<f64>,
    /// `coefficients[h] · φ_source^(h)(grid)`.
    pub per_head: Vec<Vec<f64>>,
    /// Sum of the per-head curves.
    pub mixed: Vec<f64>,
}

/// Linear mixture of per-head kernel curves.
pub fn mix_effective(coefficients: &[f64], curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (c, curve) in coefficients.iter().zip(curves) {
        for (o, v) in out.iter_mut().zip(curve) {
            *o += c * v;
        }
    }
    out
}

/// Measures mixing coefficients at the first attention layer of a reference
/// position `j`: each head's coefficient is the mean, over history events of
/// the source type, of the attention weight times the linear path from that
/// event's value vector through the output projection into the target's
/// intensity readout. The curves are context-conditional by construction.
pub fn effective_kernel(
    state: &ModelState,
    seq: &EventSequence,
    position: usize,
    source: usize,
    target: usize,
    grid: &[f64],
) -> Result<EffectiveKernel> {
    let cfg = &state.config;
    let m = seq.len();
    if position == 0 || position >= m {
        return Err(Error::Contract(format!(
            "reference position {position} invalid for a {m}-event sequence"
        )));
    }
    if source >= cfg.num_types || target >= cfg.num_types {
        return Err(Error::Contract("source/target type out of range".into()));
    }

    let mut fwd = Forward::new(state, false);
    let mut no_drop = None;
    let enc = encode(&mut fwd, seq.times(), seq.types(), &mut no_drop)?;
    let x0 = fwd.tape.value(enc.layer_inputs[0]).data().to_vec();
    let d = cfg.d_model;
    let k_types = cfg.num_types;

    let mut coefficients = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let attn = fwd.tape.value(enc.attention[0][h]).data().to_vec();
        let w_v = &state.layers[0].w_v[h];
        let w_o = &state.layers[0].w_o;
        // a_c projected back through the output projection's head-h block
        let mut head_dir = vec![0.0; cfg.d_v];
        for dv in 0..cfg.d_v {
            for dm in 0..d {
                head_dir[dv] += w_o.data()[(h * cfg.d_v + dv) * d + dm] * state.out_a.data()[dm * k_types + target];
            }
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in 0..position {
            if seq.types()[k] != source {
                continue;
            }
            // value path of event k without the kernel factor
            let xk = &x0[k * d..(k + 1) * d];
            let mut contrib = 0.0;
            for dv in 0..cfg.d_v {
                let mut v = 0.0;
                for dm in 0..d {
                    v += xk[dm] * w_v.data()[dm * cfg.d_v + dv];
                }
                contrib += v * head_dir[dv];
            }
            acc += attn[position * m + k] * contrib;
            count += 1;
        }
        coefficients.push(if count == 0 { 0.0 } else { acc / count as f64 });
    }

    let mut per_head = Vec::with_capacity(cfg.heads);
    for (h, &c) in coefficients.iter().enumerate() {
        let phis = kernels::eval_values(&state.kernels, h, source, grid)?;
        per_head.push(phis.into_iter().map(|p| c * p).collect());
    }
    let mixed = mix_effective(&vec![1.0; cfg.heads], &per_head);

    Ok(EffectiveKernel {
        source,
        target,
        coefficients,
        grid: grid.to_vec(),
        per_head,
        mixed,
    })
}

// ---------------------------------------------------------------------------

/// Probe list for the survival integral of one row, in node order.
/// `last_event` yields one probe per node; `per_type` yields `K` probes per
/// node (candidate-major within a node) and the caller reads `λ_c` from the
/// probe that queried with `c`.
pub fn integral_probes(
    times: &[f64],
    types: &[usize],
    mc_times: &[f64],
    s_samples: usize,
    policy: ProbePolicy,
    num_types: usize,
) -> Vec<ProbeSpec> {
    let mut probes = Vec::new();
    for i in 0..times.len() {
        for s in 0..s_samples {
            let t = mc_times[i * s_samples + s];
            match policy {
                ProbePolicy::LastEvent => {
                    let query = if i == 0 {
                        ProbeQuery::Boot
                    } else {
                        ProbeQuery::Type(types[i - 1])
                    };
                    probes.push(ProbeSpec { t, hist_len: i, query });
                }
                ProbePolicy::PerType => {
                    for c in 0..num_types {
                        probes.push(ProbeSpec {
                            t,
                            hist_len: i,
                            query: ProbeQuery::Type(c),
                        });
                    }
                }
            }
        }
    }
    probes
}
