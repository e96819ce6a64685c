//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! All learnable parameters and every differentiable intermediate live on a
//! [`Tape`]: operations record themselves in topological order during the
//! forward pass, and [`Tape::backward`] replays them once in reverse,
//! accumulating gradients into each node. Handles ([`Var`]) are plain indices
//! into the tape, so they are `Copy` and cheap to pass around.
//!
//! Broadcasting is deliberately restricted to scalars and trailing vectors
//! (`add_bias`, `mul_rowvec`, `mul_scalar_var`); everything else is an
//! explicit reshape. Randomness (dropout) never lives on the tape — masks are
//! generated outside and applied with [`Tape::mul_const`], which keeps the
//! backward pass deterministic: two backward runs over identical inputs
//! produce bit-identical gradients.

use crate::error::{Error, Result};

/// A dense row-major f64 tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar-valued accessor; errors unless the tensor has exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Extent snapshot returned by [`Tape::mark`].
#[derive(Clone, Copy, Debug)]
pub struct TapeMark {
    nodes: usize,
    ops: usize,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

enum Op {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    AddBias { a: usize, bias: usize, out: usize, d: usize },
    MulRowVec { a: usize, v: usize, out: usize, d: usize },
    MulScalarVar { a: usize, s: usize, out: usize },
    Scale { a: usize, c: f64, out: usize },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, out: usize, r: usize, c: usize },
    SumAll { a: usize, out: usize },
    SumLast { a: usize, out: usize, n: usize },
    MeanLast { a: usize, out: usize, n: usize },
    ConcatLast { parts: Vec<usize>, widths: Vec<usize>, rows: usize, out: usize },
    ConcatRows { parts: Vec<usize>, sizes: Vec<usize>, out: usize },
    Reshape { a: usize, out: usize },
    Exp { a: usize, out: usize },
    Log { a: usize, out: usize },
    Relu { a: usize, out: usize },
    Tanh { a: usize, out: usize },
    Sigmoid { a: usize, out: usize },
    Softplus { a: usize, out: usize },
    SoftmaxMasked { a: usize, out: usize, n: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, out: usize, d: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: usize, out: usize, indices: Vec<usize>, d: usize },
    GatherElems { a: usize, out: usize, indices: Vec<usize> },
    Assemble { parts: Vec<usize>, maps: Vec<Vec<usize>>, out: usize },
}

/// Records a forward computation and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
}

/// Numerically stable log(1 + e^x).
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf node. Gradients are accumulated only for nodes created
    /// with `requires_grad = true` or derived from one.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
        });
        Var(id)
    }

    /// Adds a non-differentiable constant (masks, quadrature weights, data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Snapshot of the tape's extent, for [`Tape::rollback`].
    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            ops: self.ops.len(),
        }
    }

    /// Discards every node and op recorded after `mark`. Vars created after
    /// the mark become invalid; earlier Vars are untouched. This lets a
    /// long-lived forward pass host many short-lived probe computations
    /// without growing.
    pub fn rollback(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.ops.truncate(mark.ops);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
        });
        id
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise binary ----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        let out = self.push(t, rg);
        self.ops.push(Op::Add { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        let out = self.push(t, rg);
        self.ops.push(Op::Sub { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(b);
        let out = self.push(t, rg);
        self.ops.push(Op::Mul { a: a.0, b: b.0, out });
        Ok(Var(out))
    }

    /// Elementwise product with a constant tensor (dropout masks, quadrature
    /// weights, 0/1 indicator matrices).
    pub fn mul_const(&mut self, a: Var, factor: &Tensor) -> Result<Var> {
        let c = self.constant(factor.clone());
        self.mul(a, c)
    }

    /// `[.. × d] + [d]`: broadcast a vector over the trailing axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(bias).numel();
        if self.value(bias).shape().len() != 1 || self.value(a).last_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let bv = self.value(bias).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(bias);
        let out = self.push(t, rg);
        self.ops.push(Op::AddBias { a: a.0, bias: bias.0, out, d });
        Ok(Var(out))
    }

    /// `[.. × d] ⊙ [d]`: broadcast-multiply by a vector over the trailing axis.
    pub fn mul_rowvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let d = self.value(v).numel();
        if self.value(v).shape().len() != 1 || self.value(a).last_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "mul_rowvec",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let vv = self.value(v).data().to_vec();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vv[i % d])
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(v);
        let out = self.push(t, rg);
        self.ops.push(Op::MulRowVec { a: a.0, v: v.0, out, d });
        Ok(Var(out))
    }

    /// Broadcast-multiply by a single-element tensor variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * sv).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a) || self.needs(s);
        let out = self.push(t, rg);
        self.ops.push(Op::MulScalarVar { a: a.0, s: s.0, out });
        Ok(Var(out))
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::Scale { a: a.0, c, out });
        Var(out)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        let rg = self.needs(a) || self.needs(b);
        let out = self.push(t, rg);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out, m, k, n });
        Ok(Var(out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor { shape: vec![c, r], data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::Transpose { a: a.0, out, r, c });
        Ok(Var(out))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        let out = self.push(Tensor::scalar(s), rg);
        self.ops.push(Op::SumAll { a: a.0, out });
        Var(out)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(a).shape().is_empty() {
            return Err(Error::Contract("sum_last on 0-d tensor".into()));
        }
        let rows = self.value(a).numel() / n;
        let src = self.value(a).data();
        let data: Vec<f64> = (0..rows).map(|r| src[r * n..(r + 1) * n].iter().sum()).collect();
        let mut shape = self.value(a).shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor { shape, data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::SumLast { a: a.0, out, n });
        Ok(Var(out))
    }

    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if n == 0 {
            return Err(Error::Contract("mean_last over empty axis".into()));
        }
        let rows = self.value(a).numel() / n;
        let src = self.value(a).data();
        let data: Vec<f64> = (0..rows)
            .map(|r| src[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let mut shape = self.value(a).shape.clone();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor { shape, data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::MeanLast { a: a.0, out, n });
        Ok(Var(out))
    }

    // ---- structural ----

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2("concat_last")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_last")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let t = Tensor { shape: vec![rows, total], data };
        let rg = parts.iter().any(|&p| self.needs(p));
        let out = self.push(t, rg);
        self.ops.push(Op::ConcatLast {
            parts: parts.iter().map(|p| p.0).collect(),
            widths,
            rows,
            out,
        });
        Ok(Var(out))
    }

    /// Concatenate 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.value(parts[0]).dims2("concat_rows")?;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            sizes.push(r * c);
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor { shape: vec![rows, cols], data };
        let rg = parts.iter().any(|&p| self.needs(p));
        let out = self.push(t, rg);
        self.ops.push(Op::ConcatRows {
            parts: parts.iter().map(|p| p.0).collect(),
            sizes,
            out,
        });
        Ok(Var(out))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.value(a).shape().to_vec(),
                rhs: shape,
            });
        }
        let t = Tensor { shape, data: self.value(a).data().to_vec() };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::Reshape { a: a.0, out });
        Ok(Var(out))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl Fn(usize, usize) -> Op) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(make(a.0, out));
        Var(out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |a, out| Op::Exp { a, out })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |a, out| Op::Log { a, out })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |a, out| Op::Relu { a, out })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |a, out| Op::Tanh { a, out })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, |a, out| Op::Sigmoid { a, out })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_scalar, |a, out| Op::Softplus { a, out })
    }

    // ---- attention pieces ----

    /// Row-wise softmax over the trailing axis with a boolean keep-mask.
    ///
    /// Masked entries get weight exactly 0. Rows with no unmasked entry
    /// return all zeros (the "no history, zero context" convention) rather
    /// than NaN. Max-subtraction keeps large scores finite.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let numel = self.value(a).numel();
        if mask.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked",
                lhs: self.value(a).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let n = self.value(a).last_dim();
        let rows = numel / n;
        let src = self.value(a).data();
        let mut data = vec![0.0; numel];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mrow = &mask[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (x, &keep) in row.iter().zip(mrow) {
                if keep && *x > mx {
                    mx = *x;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let out_row = &mut data[r * n..(r + 1) * n];
            let mut sum = 0.0;
            for ((o, x), &keep) in out_row.iter_mut().zip(row).zip(mrow) {
                if keep {
                    *o = (x - mx).exp();
                    sum += *o;
                }
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::SoftmaxMasked { a: a.0, out, n });
        Ok(Var(out))
    }

    /// Layer normalization over the trailing axis followed by a learned
    /// affine map. Population variance, epsilon-stabilized.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let d = self.value(x).last_dim();
        if d < 2 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = vec![0.0; rows * d];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor { shape: self.value(x).shape.clone(), data };
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        let out = self.push(t, rg);
        self.ops.push(Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            out,
            d,
            mean: means,
            inv_std: inv_stds,
        });
        Ok(Var(out))
    }

    // ---- indexed access ----

    /// Gather rows of a 2-D tensor; the backward pass scatter-adds.
    /// This is the embedding lookup.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("gather_rows")?;
        for &i in indices {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "gather_rows index {} out of range ({} rows)",
                    i, rows
                )));
            }
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor { shape: vec![indices.len(), d], data };
        let rg = self.needs(table);
        let out = self.push(t, rg);
        self.ops.push(Op::GatherRows {
            table: table.0,
            out,
            indices: indices.to_vec(),
            d,
        });
        Ok(Var(out))
    }

    /// Gather scalar elements by flat index into a 1-D result.
    pub fn gather_elems(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let numel = self.value(a).numel();
        for &i in indices {
            if i >= numel {
                return Err(Error::Contract(format!(
                    "gather_elems index {} out of range ({} elements)",
                    i, numel
                )));
            }
        }
        let src = self.value(a).data();
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let t = Tensor::vector(data);
        let rg = self.needs(a);
        let out = self.push(t, rg);
        self.ops.push(Op::GatherElems { a: a.0, out, indices: indices.to_vec() });
        Ok(Var(out))
    }

    /// Scatter parts into a zero-initialized tensor at fixed flat positions.
    /// `maps[p][i]` is the destination of element `i` of part `p`; positions
    /// not covered stay zero. Destinations must not collide.
    pub fn assemble(&mut self, parts: &[Var], maps: &[Vec<usize>], shape: Vec<usize>) -> Result<Var> {
        if parts.len() != maps.len() {
            return Err(Error::Contract("assemble: parts/maps length mismatch".into()));
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for (&p, map) in parts.iter().zip(maps) {
            let src = self.value(p).data();
            if src.len() != map.len() {
                return Err(Error::Contract(format!(
                    "assemble: part has {} elements, map has {}",
                    src.len(),
                    map.len()
                )));
            }
            for (x, &dst) in src.iter().zip(map) {
                if dst >= numel {
                    return Err(Error::Contract(format!(
                        "assemble destination {} out of range ({})",
                        dst, numel
                    )));
                }
                data[dst] = *x;
            }
        }
        let t = Tensor { shape, data };
        let rg = parts.iter().any(|&p| self.needs(p));
        let out = self.push(t, rg);
        self.ops.push(Op::Assemble {
            parts: parts.iter().map(|p| p.0).collect(),
            maps: maps.to_vec(),
            out,
        });
        Ok(Var(out))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Visits every recorded op exactly once
    /// in reverse order; repeated calls without [`Tape::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Seed-pass gradients live in a scratch table so unreachable nodes
        // stay untouched. A node's gradient is complete by the time its
        // producing op is visited (all consumers come later on the tape), so
        // each op takes its output gradient by move; only leaf gradients
        // survive the loop and accumulate into node.grad.
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for op_idx in (0..self.ops.len()).rev() {
            self.backward_op(op_idx, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.requires_grad {
                    let acc = node
                        .grad
                        .get_or_insert_with(|| vec![0.0; node.value.numel()]);
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, op_idx: usize, grads: &mut [Option<Vec<f64>>]) {
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        match &self.ops[op_idx] {
            Op::Add { a, b, out } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y;
                }
                let gb = acc(grads, *b, g.len());
                for (x, y) in gb.iter_mut().zip(&g) {
                    *x += y;
                }
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y;
                }
                let gb = acc(grads, *b, g.len());
                for (x, y) in gb.iter_mut().zip(&g) {
                    *x -= y;
                }
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), z) in ga.iter_mut().zip(&g).zip(bv) {
                    *x += y * z;
                }
                let gb = acc(grads, *b, g.len());
                for ((x, y), z) in gb.iter_mut().zip(&g).zip(av) {
                    *x += y * z;
                }
            }
            Op::AddBias { a, bias, out, d } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y;
                }
                let gb = acc(grads, *bias, *d);
                for (i, y) in g.iter().enumerate() {
                    gb[i % d] += y;
                }
            }
            Op::MulRowVec { a, v, out, d } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let vv = self.nodes[*v].value.data();
                let ga = acc(grads, *a, g.len());
                for (i, (x, y)) in ga.iter_mut().zip(&g).enumerate() {
                    *x += y * vv[i % d];
                }
                let gv = acc(grads, *v, *d);
                for (i, y) in g.iter().enumerate() {
                    gv[i % d] += y * av[i];
                }
            }
            Op::MulScalarVar { a, s, out } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let sv = self.nodes[*s].value.data()[0];
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y * sv;
                }
                let gs = acc(grads, *s, 1);
                gs[0] += g.iter().zip(av).map(|(y, x)| y * x).sum::<f64>();
            }
            Op::Scale { a, c, out } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y * c;
                }
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                // dA = g · Bᵀ; materialize Bᵀ so the inner loop is contiguous
                if self.nodes[*a].requires_grad || grads[*a].is_some() {
                    let mut bt = vec![0.0; k * n];
                    for kk in 0..*k {
                        for j in 0..*n {
                            bt[j * k + kk] = bv[kk * n + j];
                        }
                    }
                    let ga = acc(grads, *a, m * k);
                    matmul_into(&g, &bt, ga, *m, *n, *k);
                }
                // dB = Aᵀ · g
                if self.nodes[*b].requires_grad || grads[*b].is_some() {
                    let mut at = vec![0.0; m * k];
                    for i in 0..*m {
                        for kk in 0..*k {
                            at[kk * m + i] = av[i * k + kk];
                        }
                    }
                    let gb = acc(grads, *b, k * n);
                    matmul_into(&at, &g, gb, *k, *m, *n);
                }
            }
            Op::Transpose { a, out, r, c } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, r * c);
                // out is [c×r]; route g back
                for i in 0..*c {
                    for j in 0..*r {
                        ga[j * c + i] += g[i * r + j];
                    }
                }
            }
            Op::SumAll { a, out } => {
                let g = out_grad!(*out)[0];
                let len = self.nodes[*a].value.numel();
                let ga = acc(grads, *a, len);
                for x in ga.iter_mut() {
                    *x += g;
                }
            }
            Op::SumLast { a, out, n } => {
                let g = out_grad!(*out);
                let len = self.nodes[*a].value.numel();
                let ga = acc(grads, *a, len);
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / n];
                }
            }
            Op::MeanLast { a, out, n } => {
                let g = out_grad!(*out);
                let len = self.nodes[*a].value.numel();
                let inv = 1.0 / *n as f64;
                let ga = acc(grads, *a, len);
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i / n] * inv;
                }
            }
            Op::ConcatLast { parts, widths, rows, out } => {
                let g = out_grad!(*out);
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    let gp = acc(grads, p, rows * w);
                    for r in 0..*rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts, sizes, out } => {
                let g = out_grad!(*out);
                let mut off = 0;
                for (&p, &sz) in parts.iter().zip(sizes) {
                    let gp = acc(grads, p, sz);
                    for (x, y) in gp.iter_mut().zip(&g[off..off + sz]) {
                        *x += y;
                    }
                    off += sz;
                }
            }
            Op::Reshape { a, out } => {
                let g = out_grad!(*out);
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&g) {
                    *x += y;
                }
            }
            Op::Exp { a, out } => {
                let g = out_grad!(*out);
                let ov = self.nodes[*out].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), o) in ga.iter_mut().zip(&g).zip(ov) {
                    *x += y * o;
                }
            }
            Op::Log { a, out } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(&g).zip(av) {
                    *x += y / v;
                }
            }
            Op::Relu { a, out } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(&g).zip(av) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Tanh { a, out } => {
                let g = out_grad!(*out);
                let ov = self.nodes[*out].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), o) in ga.iter_mut().zip(&g).zip(ov) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Sigmoid { a, out } => {
                let g = out_grad!(*out);
                let ov = self.nodes[*out].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), o) in ga.iter_mut().zip(&g).zip(ov) {
                    *x += y * o * (1.0 - o);
                }
            }
            Op::Softplus { a, out } => {
                let g = out_grad!(*out);
                let av = self.nodes[*a].value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(&g).zip(av) {
                    *x += y * sigmoid_scalar(*v);
                }
            }
            Op::SoftmaxMasked { a, out, n } => {
                let g = out_grad!(*out);
                let yv = self.nodes[*out].value.data();
                let rows = yv.len() / n;
                let ga = acc(grads, *a, yv.len());
                for r in 0..rows {
                    let y = &yv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    let dst = &mut ga[r * n..(r + 1) * n];
                    for ((d, yi), gi) in dst.iter_mut().zip(y).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, out, d, mean, inv_std } => {
                let g = out_grad!(*out);
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                let rows = xv.len() / d;
                let df = *d as f64;
                {
                    let gx = acc(grads, *x, xv.len());
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let inv = inv_std[r];
                        let mu = mean[r];
                        // dxhat = g ⊙ gain
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..*d {
                            let dxh = gr[j] * gv[j];
                            let xh = (xr[j] - mu) * inv;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xh;
                        }
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..*d {
                            let dxh = gr[j] * gv[j];
                            let xh = (xr[j] - mu) * inv;
                            dst[j] += inv * (dxh - sum_dxhat / df - xh * sum_dxhat_xhat / df);
                        }
                    }
                }
                {
                    let gg = acc(grads, *gain, *d);
                    for r in 0..rows {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..*d {
                            gg[j] += gr[j] * (xr[j] - mean[r]) * inv_std[r];
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, *d);
                    for r in 0..rows {
                        for j in 0..*d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, out, indices, d } => {
                let g = out_grad!(*out);
                let len = self.nodes[*table].value.numel();
                let gt = acc(grads, *table, len);
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..*d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::GatherElems { a, out, indices } => {
                let g = out_grad!(*out);
                let len = self.nodes[*a].value.numel();
                let ga = acc(grads, *a, len);
                for (x, &i) in g.iter().zip(indices) {
                    ga[i] += x;
                }
            }
            Op::Assemble { parts, maps, out } => {
                let g = out_grad!(*out);
                for (&p, map) in parts.iter().zip(maps) {
                    let gp = acc(grads, p, map.len());
                    for (x, &dst) in gp.iter_mut().zip(map) {
                        *x += g[dst];
                    }
                }
            }
        }
    }
}

/// `out += a · b` for row-major 2-D buffers. ikj loop order so the inner
/// loop runs over contiguous slices.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// Relative error with an absolute floor of 1, the form used by all
/// finite-difference checks in this crate.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central finite difference of a scalar function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-4;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    /// Finite-difference check of d(sum of graph output)/d(inputs) for a
    /// graph builder over raw input vectors.
    fn check_grad(
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        shapes: &[Vec<usize>],
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| rand_vec(&mut rng, s.iter().product()))
            .collect();

        let eval = |inputs: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .zip(shapes)
                .map(|(d, s)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true))
                .collect();
            let out = build(&mut tape, &vars);
            let loss = tape.sum_all(out);
            tape.value(loss).item().unwrap()
        };

        // analytic
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(shapes)
            .map(|(d, s)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap(), true))
            .collect();
        let out = build(&mut tape, &vars);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();

        let mut worst = 0.0_f64;
        for (vi, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap().to_vec();
            for ei in 0..analytic.len() {
                let mut plus = inputs.clone();
                plus[vi][ei] += FD_H;
                let mut minus = inputs.clone();
                minus[vi][ei] -= FD_H;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_H);
                worst = worst.max(rel_error(analytic[ei], numeric));
            }
        }
        worst
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_col() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let worst = check_grad(
                |t, v| t.matmul(v[0], v[1]).unwrap(),
                &[vec![3, 4], vec![4, 2]],
                seed,
            );
            assert!(worst < 1e-6, "matmul rel err {worst}");
        }
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![5.0]));
        let y = t.softmax_masked(a, &[true]).unwrap();
        assert_eq!(t.value(y).data(), &[1.0]);
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.softmax_masked(a, &[true, true]).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_scores_stable() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1000.0, 999.0]));
        let y = t.softmax_masked(a, &[true, true]).unwrap();
        let d = t.value(y).data();
        assert!(d.iter().all(|x| x.is_finite()));
        let ratio = d[1] / d[0];
        assert!((ratio - (-1.0f64).exp()).abs() < 1e-12, "ratio {ratio}");
    }

    #[test]
    fn softmax_masked_entries_exactly_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t
            .softmax_masked(a, &[true, false, true, false, false, false])
            .unwrap();
        let d = t.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        // fully masked row is all zeros, not NaN
        assert_eq!(&d[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_gradient() {
        let worst = check_grad(
            |t, v| {
                let mask = vec![true, true, false, true, true, true, true, false];
                let y = t.softmax_masked(v[0], &mask).unwrap();
                // weight the outputs so the gradient is not trivially zero
                let w = Tensor::matrix(2, 4, vec![0.3, -1.0, 0.7, 2.0, 1.5, -0.2, 0.4, 0.9]).unwrap();
                t.mul_const(y, &w).unwrap()
            },
            &[vec![2, 4]],
            7,
        );
        assert!(worst < FD_TOL, "softmax rel err {worst}");
    }

    #[test]
    fn softplus_reference_points() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 50.0, -50.0]));
        let y = t.softplus(a);
        let d = t.value(y).data();
        assert!((d[0] - 2.0f64.ln()).abs() < 1e-12);
        assert!((d[1] - 50.0).abs() < 1e-9);
        assert!(d[2] > 0.0 && (d[2] - (-50.0f64).exp()).abs() < 1e-20);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap());
        let g = t.constant(Tensor::vector(vec![1.0; 4]));
        let b = t.constant(Tensor::vector(vec![0.0; 4]));
        let y = t.layer_norm(x, g, b).unwrap();
        for v in t.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![-1.0, 1.0]).unwrap());
        let g = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.layer_norm(x, g, b).unwrap();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        let d = t.value(y).data();
        assert!((d[0] + expected).abs() < 1e-12);
        assert!((d[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient() {
        let worst = check_grad(
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
            &[vec![3, 5], vec![5], vec![5]],
            11,
        );
        assert!(worst < 1e-5, "layer_norm rel err {worst}");
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(3, 3, (0..9).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap(), true);
            let w = t.leaf(Tensor::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap(), true);
            let y = t.matmul(x, w).unwrap();
            let z = t.tanh(y);
            let mask = vec![true, true, false, true, true, true, false, true, true];
            let sm = t.softmax_masked(z, &mask).unwrap();
            let loss = t.sum_all(sm);
            t.backward(loss).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn unary_and_broadcast_gradients() {
        // exp/log/relu/tanh/sigmoid/softplus chained with broadcasts
        let worst = check_grad(
            |t, v| {
                let e = t.exp(v[0]);
                let sp = t.softplus(e);
                let lg = t.log(sp);
                let th = t.tanh(lg);
                let sg = t.sigmoid(th);
                let wb = t.add_bias(sg, v[1]).unwrap();
                let wv = t.mul_rowvec(wb, v[2]).unwrap();
                t.mul_scalar_var(wv, v[3]).unwrap()
            },
            &[vec![3, 4], vec![4], vec![4], vec![1]],
            3,
        );
        assert!(worst < FD_TOL, "unary chain rel err {worst}");
    }

    #[test]
    fn relu_gradient_off_kink() {
        // keep inputs away from 0 where the subgradient is ambiguous
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let x: f64 = rng.gen_range(0.2..2.0);
                if rng.gen_bool(0.5) {
                    x
                } else {
                    -x
                }
            })
            .collect();
        let eval = |d: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(d.to_vec()), true);
            let r = t.relu(x);
            let s = t.sum_all(r);
            (t, x, s)
        };
        let (mut t, x, s) = eval(&data);
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap().to_vec();
        for i in 0..data.len() {
            let mut dp = data.clone();
            dp[i] += FD_H;
            let mut dm = data.clone();
            dm[i] -= FD_H;
            let (tp, _, sp) = eval(&dp);
            let (tm, _, sm) = eval(&dm);
            let num = (tp.value(sp).item().unwrap() - tm.value(sm).item().unwrap()) / (2.0 * FD_H);
            assert!(rel_error(g[i], num) < FD_TOL);
        }
    }

    #[test]
    fn structural_op_gradients() {
        let worst = check_grad(
            |t, v| {
                let c = t.concat_last(&[v[0], v[1]]).unwrap();
                let r = t.concat_rows(&[c, v[2]]).unwrap();
                let tr = t.transpose(r).unwrap();
                let s = t.sum_last(tr).unwrap();
                let m = t.mean_last(s).unwrap();
                t.reshape(m, vec![1, 1]).unwrap()
            },
            &[vec![2, 2], vec![2, 3], vec![1, 5]],
            13,
        );
        assert!(worst < FD_TOL, "structural rel err {worst}");
    }

    #[test]
    fn gather_and_assemble_gradients() {
        let worst = check_grad(
            |t, v| {
                let rows = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
                let elems = t.gather_elems(rows, &[0, 3, 5]).unwrap();
                let part2 = t.gather_elems(v[1], &[1, 2]).unwrap();
                t.assemble(
                    &[elems, part2],
                    &[vec![0, 2, 4], vec![1, 5]],
                    vec![2, 3],
                )
                .unwrap()
            },
            &[vec![3, 2], vec![4]],
            17,
        );
        assert!(worst < FD_TOL, "gather/assemble rel err {worst}");
    }

    #[test]
    fn add_sub_scale_gradients() {
        let worst = check_grad(
            |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let b = t.sub(a, v[0]).unwrap();
                let c = t.scale(b, -2.5);
                t.mul(c, a).unwrap()
            },
            &[vec![2, 3], vec![2, 3]],
            19,
        );
        assert!(worst < FD_TOL, "add/sub/scale rel err {worst}");
    }

    #[test]
    fn many_random_primitive_trials() {
        // 20+ random trials mixing primitives, as contracted.
        for seed in 0..24 {
            let worst = check_grad(
                |t, v| {
                    let h = t.matmul(v[0], v[1]).unwrap();
                    let h = t.tanh(h);
                    let h = t.add_bias(h, v[2]).unwrap();
                    let s = t.softplus(h);
                    t.sum_last(s).unwrap()
                },
                &[vec![4, 3], vec![3, 5], vec![5]],
                100 + seed,
            );
            assert!(worst < FD_TOL, "trial {seed} rel err {worst}");
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
            proptest::collection::vec((-30.0f64..30.0, proptest::bool::ANY), 1..6),
            1..5,
        )) {
            let n = rows.iter().map(Vec::len).max().unwrap();
            let mut data = Vec::new();
            let mut mask = Vec::new();
            for row in &rows {
                for j in 0..n {
                    let (x, keep) = row.get(j).copied().unwrap_or((0.0, false));
                    data.push(x);
                    mask.push(keep);
                }
            }
            let mut t = Tape::new();
            let a = t.constant(Tensor::new(vec![rows.len(), n], data).unwrap());
            let y = t.softmax_masked(a, &mask).unwrap();
            let d = t.value(y).data();
            for (r, row) in rows.iter().enumerate() {
                let sum: f64 = d[r * n..(r + 1) * n].iter().sum();
                if row.iter().any(|&(_, keep)| keep) {
                    proptest::prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", r, sum);
                } else {
                    proptest::prop_assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn no_nan_from_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-500.0..500.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(8, 8, data).unwrap());
        let sm = t.softmax_masked(x, &vec![true; 64]).unwrap();
        let sp = t.softplus(x);
        assert!(t.value(sm).data().iter().all(|v| !v.is_nan()));
        assert!(t.value(sp).data().iter().all(|v| !v.is_nan()));
    }
}
