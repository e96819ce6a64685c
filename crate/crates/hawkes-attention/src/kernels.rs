//! Learned influence kernels over elapsed time.
//!
//! Each kernel is a scalar-in scalar-out MLP (tanh hidden layers, linear
//! output). In per-type mode every (head, type) pair owns one; in shared mode
//! each head owns a single kernel used for all types. Kernels are shared
//! across attention layers. Outputs are unconstrained in sign — temporal
//! influence may inhibit as well as excite.
//!
//! Elapsed times are divided by `dt_scale` (the training-set mean inter-event
//! gap) before entering the MLP, so kernel shapes are comparable across
//! datasets with different natural time units.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    PerType,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub mode: KernelMode,
    /// Hidden units per layer.
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            mode: KernelMode::PerType,
            width: 8,
            depth: 2,
        }
    }
}

/// One scalar MLP: `(weight [in×out], bias [out])` per layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    fn init(width: usize, depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = 1;
        for _ in 0..depth {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * width).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push((
                Tensor::matrix(fan_in, width, w).unwrap(),
                Tensor::vector(vec![0.0; width]),
            ));
            fan_in = width;
        }
        // output starts near the constant kernel φ ≈ 1: unit bias, small weights
        let bound = 0.1 / (width as f64).sqrt();
        let w: Vec<f64> = (0..width).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push((
            Tensor::matrix(width, 1, w).unwrap(),
            Tensor::vector(vec![1.0]),
        ));
        Mlp { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.numel() + b.numel()).sum()
    }
}

/// The full collection of kernel networks plus the Δt standardization scalar.
#[derive(Clone, Debug)]
pub struct KernelBank {
    config: KernelConfig,
    heads: usize,
    num_types: usize,
    dt_scale: f64,
    mlps: Vec<Mlp>,
}

impl KernelBank {
    pub fn init(config: KernelConfig, heads: usize, num_types: usize, rng: &mut ChaCha8Rng) -> Self {
        let count = match config.mode {
            KernelMode::PerType => heads * num_types,
            KernelMode::Shared => heads,
        };
        let mlps = (0..count).map(|_| Mlp::init(config.width, config.depth, rng)).collect();
        KernelBank {
            config,
            heads,
            num_types,
            dt_scale: 1.0,
            mlps,
        }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn dt_scale(&self) -> f64 {
        self.dt_scale
    }

    pub fn set_dt_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0) {
            return Err(Error::Contract(format!("dt_scale must be positive, got {scale}")));
        }
        self.dt_scale = scale;
        Ok(())
    }

    /// Parameters of one kernel network (p_φ).
    pub fn params_per_mlp(&self) -> usize {
        self.mlps[0].param_count()
    }

    pub fn param_count(&self) -> usize {
        self.mlps.iter().map(Mlp::param_count).sum()
    }

    fn mlp_index(&self, head: usize, ty: usize) -> Result<usize> {
        if head >= self.heads || ty >= self.num_types {
            return Err(Error::Contract(format!(
                "kernel lookup (head {head}, type {ty}) out of range ({} heads, {} types)",
                self.heads, self.num_types
            )));
        }
        Ok(match self.config.mode {
            KernelMode::PerType => head * self.num_types + ty,
            KernelMode::Shared => head,
        })
    }

    /// Pin every kernel to the constant function `value` by zeroing the
    /// output weights and setting the output bias. Used by the φ ≡ 1
    /// reduction that recovers time-unaware attention.
    pub fn pin_constant(&mut self, value: f64) {
        for mlp in &mut self.mlps {
            let last = mlp.layers.len() - 1;
            let (w, b) = &mut mlp.layers[last];
            for x in w.data_mut() {
                *x = 0.0;
            }
            b.data_mut()[0] = value;
        }
    }

    /// Copy head `h`'s type-0 kernel over all types, making per-type mode
    /// functionally identical to shared mode.
    pub fn tie_types(&mut self) {
        if self.config.mode != KernelMode::PerType {
            return;
        }
        for h in 0..self.heads {
            let proto = self.mlps[h * self.num_types].clone();
            for c in 1..self.num_types {
                self.mlps[h * self.num_types + c] = proto.clone();
            }
        }
    }

    /// Reorder per-type kernels under a type relabeling (`perm[c]` is the new
    /// id of old type `c`).
    pub fn permute_types(&mut self, perm: &[usize]) {
        if self.config.mode != KernelMode::PerType {
            return;
        }
        let mut next = self.mlps.clone();
        for h in 0..self.heads {
            for c in 0..self.num_types {
                next[h * self.num_types + perm[c]] = self.mlps[h * self.num_types + c].clone();
            }
        }
        self.mlps = next;
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, mlp) in self.mlps.iter().enumerate() {
            let tag = self.mlp_tag(i);
            for (li, (w, b)) in mlp.layers.iter().enumerate() {
                out.push((format!("kernel.{tag}.l{li}.w"), w));
                out.push((format!("kernel.{tag}.l{li}.b"), b));
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let tags: Vec<String> = (0..self.mlps.len()).map(|i| self.mlp_tag(i)).collect();
        let mut out = Vec::new();
        for (mlp, tag) in self.mlps.iter_mut().zip(tags) {
            for (li, (w, b)) in mlp.layers.iter_mut().enumerate() {
                out.push((format!("kernel.{tag}.l{li}.w"), w));
                out.push((format!("kernel.{tag}.l{li}.b"), b));
            }
        }
        out
    }

    fn mlp_tag(&self, i: usize) -> String {
        match self.config.mode {
            KernelMode::PerType => format!("h{}.t{}", i / self.num_types, i % self.num_types),
            KernelMode::Shared => format!("h{i}"),
        }
    }
}

/// Kernel parameters leased onto a tape for one forward pass.
pub struct BoundKernels {
    vars: Vec<Vec<(Var, Var)>>,
    mode: KernelMode,
    heads: usize,
    num_types: usize,
    dt_scale: f64,
}

impl BoundKernels {
    pub fn bind(bank: &KernelBank, tape: &mut Tape, trainable: bool) -> Self {
        let vars = bank
            .mlps
            .iter()
            .map(|mlp| {
                mlp.layers
                    .iter()
                    .map(|(w, b)| (tape.leaf(w.clone(), trainable), tape.leaf(b.clone(), trainable)))
                    .collect()
            })
            .collect();
        BoundKernels {
            vars,
            mode: bank.config.mode,
            heads: bank.heads,
            num_types: bank.num_types,
            dt_scale: bank.dt_scale,
        }
    }

    /// Vars in `named_params` order, for gradient extraction.
    pub fn param_vars(&self) -> Vec<Var> {
        self.vars
            .iter()
            .flat_map(|layers| layers.iter().flat_map(|(w, b)| [*w, *b]))
            .collect()
    }

    fn mlp_index(&self, head: usize, ty: usize) -> Result<usize> {
        if head >= self.heads || ty >= self.num_types {
            return Err(Error::Contract(format!(
                "kernel lookup (head {head}, type {ty}) out of range ({} heads, {} types)",
                self.heads, self.num_types
            )));
        }
        Ok(match self.mode {
            KernelMode::PerType => head * self.num_types + ty,
            KernelMode::Shared => head,
        })
    }

    fn forward_mlp(&self, tape: &mut Tape, idx: usize, xs: &[f64]) -> Result<Var> {
        let n = xs.len();
        let scaled: Vec<f64> = xs.iter().map(|x| x / self.dt_scale).collect();
        let mut h = tape.constant(Tensor::matrix(n, 1, scaled)?);
        let last = self.vars[idx].len() - 1;
        for (li, (w, b)) in self.vars[idx].iter().enumerate() {
            h = tape.matmul(h, *w)?;
            h = tape.add_bias(h, *b)?;
            if li < last {
                h = tape.tanh(h);
            }
        }
        tape.reshape(h, vec![n])
    }

    /// φ for head `head` at entries `(dts[i], types[i])`, returned as a flat
    /// `[n]` tensor. Entries are grouped by kernel network, each group runs
    /// as one batch, and results scatter back to entry order.
    pub fn eval(&self, tape: &mut Tape, head: usize, types: &[usize], dts: &[f64]) -> Result<Var> {
        if types.len() != dts.len() {
            return Err(Error::Contract(format!(
                "kernel eval: {} types vs {} dts",
                types.len(),
                dts.len()
            )));
        }
        self.eval_assembled(tape, head, types, dts, None, vec![dts.len()])
    }

    /// Same as [`BoundKernels::eval`] but scatters entry `i` to flat position
    /// `positions[i]` of a zero tensor of `shape`. Positions not covered stay
    /// zero (they correspond to masked attention slots).
    pub fn eval_assembled(
        &self,
        tape: &mut Tape,
        head: usize,
        types: &[usize],
        dts: &[f64],
        positions: Option<&[usize]>,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let n = dts.len();
        if n == 0 {
            return Ok(tape.constant(Tensor::zeros(shape)));
        }
        // bucket entry indices by kernel network
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); self.vars.len()];
        for (i, &ty) in types.iter().enumerate() {
            buckets[self.mlp_index(head, ty)?].push(i);
        }
        let mut parts = Vec::new();
        let mut maps = Vec::new();
        for (idx, entries) in buckets.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            let xs: Vec<f64> = entries.iter().map(|&i| dts[i]).collect();
            let part = self.forward_mlp(tape, idx, &xs)?;
            let map: Vec<usize> = entries
                .iter()
                .map(|&i| positions.map_or(i, |p| p[i]))
                .collect();
            parts.push(part);
            maps.push(map);
        }
        tape.assemble(&parts, &maps, shape)
    }
}

/// Value-only kernel evaluation for one (head, type); runs the same tape code
/// path as training, so exported curves match model internals bitwise.
pub fn eval_values(bank: &KernelBank, head: usize, ty: usize, dts: &[f64]) -> Result<Vec<f64>> {
    bank.mlp_index(head, ty)?; // surface range errors eagerly
    let mut tape = Tape::new();
    let bound = BoundKernels::bind(bank, &mut tape, false);
    let out = bound.eval(&mut tape, head, &vec![ty; dts.len()], dts)?;
    Ok(tape.value(out).data().to_vec())
}

/// CSV export of raw kernel curves: `head,type,dt,phi`, one row per
/// (head, type, grid point). Shared mode writes a single `type=-1` row set
/// per head.
pub fn export_curves(bank: &KernelBank, grid: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("head,type,dt,phi\n");
    render_curves(bank, grid, &mut out)?;
    std::fs::write(path, out)?;
    Ok(())
}

pub(crate) fn render_curves(bank: &KernelBank, grid: &[f64], out: &mut String) -> Result<()> {
    if grid.is_empty() || grid[0] < 0.0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(
            "kernel grid must be non-negative and strictly increasing".into(),
        ));
    }
    match bank.config.mode {
        KernelMode::PerType => {
            for h in 0..bank.heads {
                for c in 0..bank.num_types {
                    let phis = eval_values(bank, h, c, grid)?;
                    for (dt, phi) in grid.iter().zip(phis) {
                        out.push_str(&format!("{h},{c},{dt},{phi}\n"));
                    }
                }
            }
        }
        KernelMode::Shared => {
            for h in 0..bank.heads {
                let phis = eval_values(bank, h, 0, grid)?;
                for (dt, phi) in grid.iter().zip(phis) {
                    out.push_str(&format!("{h},-1,{dt},{phi}\n"));
                }
            }
        }
    }
    Ok(())
}
