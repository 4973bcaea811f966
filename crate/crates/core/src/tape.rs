//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward math is expressed through [`Tape`] methods that return [`Var`]
//! handles. Each op eagerly computes its value and, when any input needs a
//! gradient, records itself for the backward sweep. A tape built with
//! [`Tape::inference`] never records anything and acts as a plain evaluator.
//!
//! Trainable [`Parameter`]s enter the tape via [`Tape::param`]; frozen ones
//! come in as constants, so gradients structurally cannot reach them.

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::Rng;
use std::collections::HashMap;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Additive pre-softmax mask value for padded attention columns. Large enough
/// that `exp(x - max)` underflows to exactly 0.0, small enough to stay finite.
pub const NEG_MASK: f64 = -1.0e30;

#[derive(Debug, Clone)]
enum Op {
    Matmul {
        a: usize,
        b: usize,
    },
    MatmulNT {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        r: usize,
    },
    AddCol {
        a: usize,
        c: usize,
    },
    SubCol {
        a: usize,
        c: usize,
    },
    Scale {
        a: usize,
        k: f64,
    },
    ScaleByVar {
        a: usize,
        s: usize,
    },
    Tanh {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    SoftmaxRows {
        a: usize,
    },
    LseRows {
        a: usize,
    },
    LseCols {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
    },
    GatherElems {
        a: usize,
        idx: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<usize>,
        widths: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<usize>,
        heights: Vec<usize>,
    },
    NarrowCols {
        a: usize,
        start: usize,
    },
    Transpose {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, keyed by parameter name in
/// lease order (deterministic).
#[derive(Debug, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    // (node id, parameter name) in lease order
    param_vars: Vec<(usize, String)>,
    param_lookup: HashMap<String, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            param_lookup: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that records nothing: params enter as constants, ops evaluate
    /// eagerly. Used for all prediction / frozen-forward paths.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None, false)
    }

    /// Lease a parameter onto the tape. Trainable parameters become gradient
    /// leaves; frozen ones become constants. Leasing the same name twice
    /// returns the original var so tied weights accumulate correctly.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.param_lookup.get(&p.name) {
            return v;
        }
        let trainable = p.trainable && self.grad_enabled;
        let v = self.push(p.tensor.clone(), None, trainable);
        if trainable {
            self.param_vars.push((v.id, p.name.clone()));
            self.param_lookup.insert(p.name.clone(), v);
        }
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.id].value;
        (t.rows(), t.cols())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        self.grad_enabled && ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn emit(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        if self.needs(inputs) {
            self.push(value, Some(op), true)
        } else {
            self.push(value, None, false)
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.shape(v)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.id].value.shape.clone(),
            rhs: self.nodes[b.id].value.shape.clone(),
        }
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// `[m,k] · [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = mm(
            &self.nodes[a.id].value.data,
            m,
            k,
            &self.nodes[b.id].value.data,
            n,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.emit(t, Op::Matmul { a: a.id, b: b.id }, &[a.id, b.id]))
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let out = mm_nt(
            &self.nodes[a.id].value.data,
            m,
            k,
            &self.nodes[b.id].value.data,
            n,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.emit(t, Op::MatmulNT { a: a.id, b: b.id }, &[a.id, b.id]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch(name, a, b));
        }
        let (m, n) = self.dims(a);
        let data = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.id].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.emit(t, op(a.id, b.id), &[a.id, b.id]))
    }

    /// Broadcast bias add: `[m,n] + [1,n]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(r) != (1, n) {
            return Err(self.mismatch("add_row", a, r));
        }
        let row = self.nodes[r.id].value.data.clone();
        let mut data = self.nodes[a.id].value.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row[j];
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.emit(t, Op::AddRow { a: a.id, r: r.id }, &[a.id, r.id]))
    }

    /// Broadcast column add: `[m,n] + [m,1]`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_broadcast("add_col", a, c, 1.0)
    }

    /// Broadcast column subtract: `[m,n] − [m,1]`.
    pub fn sub_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_broadcast("sub_col", a, c, -1.0)
    }

    fn col_broadcast(&mut self, name: &'static str, a: Var, c: Var, sign: f64) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(c) != (m, 1) {
            return Err(self.mismatch(name, a, c));
        }
        let col = self.nodes[c.id].value.data.clone();
        let mut data = self.nodes[a.id].value.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += sign * col[i];
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        let op = if sign > 0.0 {
            Op::AddCol { a: a.id, c: c.id }
        } else {
            Op::SubCol { a: a.id, c: c.id }
        };
        Ok(self.emit(t, op, &[a.id, c.id]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (m, n) = self.dims(a);
        let data = self.nodes[a.id].value.data.iter().map(|&x| x * k).collect();
        let t = Tensor::matrix(m, n, data).expect("scale preserves shape");
        self.emit(t, Op::Scale { a: a.id, k }, &[a.id])
    }

    /// Elementwise multiply by a `[1,1]` scalar var.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(self.mismatch("scale_by", a, s));
        }
        let k = self.nodes[s.id].value.data[0];
        let (m, n) = self.dims(a);
        let data = self.nodes[a.id].value.data.iter().map(|&x| x * k).collect();
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.emit(t, Op::ScaleByVar { a: a.id, s: s.id }, &[a.id, s.id]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), |a| Op::Sigmoid { a })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_fwd, |a| Op::Gelu { a })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var {
        let (m, n) = self.dims(a);
        let data = self.nodes[a.id].value.data.iter().map(|&x| f(x)).collect();
        let t = Tensor::matrix(m, n, data).expect("map preserves shape");
        self.emit(t, op(a.id), &[a.id])
    }

    /// Row-wise softmax with max-shift.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.id].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let t = Tensor::matrix(m, n, data).expect("softmax preserves shape");
        self.emit(t, Op::SoftmaxRows { a: a.id }, &[a.id])
    }

    /// `log Σ exp` over each row → `[m,1]`.
    pub fn lse_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.id].value.data;
        let data: Vec<f64> = (0..m).map(|i| lse(&x[i * n..(i + 1) * n])).collect();
        let t = Tensor::matrix(m, 1, data).expect("lse rows");
        self.emit(t, Op::LseRows { a: a.id }, &[a.id])
    }

    /// `log Σ exp` over each column → `[1,n]`.
    pub fn lse_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.id].value.data;
        let data: Vec<f64> = (0..n)
            .map(|j| {
                let col: Vec<f64> = (0..m).map(|i| x[i * n + j]).collect();
                lse(&col)
            })
            .collect();
        let t = Tensor::matrix(1, n, data).expect("lse cols");
        self.emit(t, Op::LseCols { a: a.id }, &[a.id])
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.dims(beta) != (1, n) {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xd = &self.nodes[x.id].value.data;
        let g = &self.nodes[gamma.id].value.data;
        let b = &self.nodes[beta.id].value.data;
        let mut data = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        let op = Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            mean: means,
            rstd: rstds,
        };
        Ok(self.emit(t, op, &[x.id, gamma.id, beta.id]))
    }

    /// Row lookup (embedding, row slicing, reversal): duplicates allowed,
    /// gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::IndexOutOfRange {
                what: "gather_rows",
                index: bad,
                limit: m,
            });
        }
        let x = &self.nodes[a.id].value.data;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let t = Tensor::matrix(idx.len(), n, data)?;
        Ok(self.emit(
            t,
            Op::GatherRows {
                a: a.id,
                idx: idx.to_vec(),
            },
            &[a.id],
        ))
    }

    /// Flat-index element gather → `[1, len]`.
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let numel = self.nodes[a.id].value.numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
            return Err(Error::IndexOutOfRange {
                what: "gather_elems",
                index: bad,
                limit: numel,
            });
        }
        let x = &self.nodes[a.id].value.data;
        let data: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let t = Tensor::matrix(1, idx.len(), data)?;
        Ok(self.emit(
            t,
            Op::GatherElems {
                a: a.id,
                idx: idx.to_vec(),
            },
            &[a.id],
        ))
    }

    /// Concatenate along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Data("concat_cols: empty part list".into()));
        }
        let m = self.dims(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let x = &self.nodes[p.id].value.data;
                data.extend_from_slice(&x[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(m, total, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.emit(
            t,
            Op::ConcatCols {
                parts: ids.clone(),
                widths,
            },
            &ids,
        ))
    }

    /// Stack along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Data("concat_rows: empty part list".into()));
        }
        let n = self.dims(parts[0]).1;
        let mut heights = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            heights.push(pm);
            data.extend_from_slice(&self.nodes[p.id].value.data);
        }
        let total: usize = heights.iter().sum();
        let t = Tensor::matrix(total, n, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.emit(
            t,
            Op::ConcatRows {
                parts: ids.clone(),
                heights,
            },
            &ids,
        ))
    }

    /// Column slice `[m, start..start+len]`.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "narrow_cols",
                index: start + len,
                limit: n,
            });
        }
        let x = &self.nodes[a.id].value.data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        Ok(self.emit(t, Op::NarrowCols { a: a.id, start }, &[a.id]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = &self.nodes[a.id].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, data).expect("transpose");
        self.emit(t, Op::Transpose { a: a.id }, &[a.id])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].value.data.iter().sum();
        let t = Tensor::scalar(s);
        self.emit(t, Op::SumAll { a: a.id }, &[a.id])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].value.numel();
        let s: f64 = self.nodes[a.id].value.data.iter().sum();
        let t = Tensor::scalar(s / n as f64);
        self.emit(t, Op::MeanAll { a: a.id }, &[a.id])
    }

    /// Inverted-scaling dropout; train-mode only — callers skip it entirely
    /// in eval mode.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut StdRng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (m, n) = self.dims(a);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.nodes[a.id]
            .value
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &k)| x * k)
            .collect();
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.emit(t, Op::Dropout { a: a.id, mask }, &[a.id]))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// One reverse sweep from a scalar loss. Returns gradients for every
    /// trainable parameter reachable from the loss; consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Data(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Data(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.id].value.shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(op) = self.nodes[id].op.clone() {
                self.propagate(&op, id, &g, &mut grads);
            } else {
                grads[id] = Some(g); // leaf: keep for parameter collection
            }
        }

        let mut out = Gradients::default();
        for (node_id, name) in &self.param_vars {
            let t = &self.nodes[*node_id].value;
            let g = grads[*node_id]
                .take()
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            out.insert(name.clone(), Tensor::matrix(t.rows(), t.cols(), g)?);
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, out_id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| -> &Tensor { &self.nodes[id].value };
        let wants = |id: usize| self.nodes[id].needs_grad;
        let accum =
            |id: usize, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| match &mut grads[id] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            };

        match op {
            Op::Matmul { a, b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    let da = mm_nt(g, m, n, &val(*b).data, k);
                    accum(*a, da, grads);
                }
                if wants(*b) {
                    let db = mm_tn(&val(*a).data, m, k, g, n);
                    accum(*b, db, grads);
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if wants(*a) {
                    let da = mm(g, m, n, &val(*b).data, k);
                    accum(*a, da, grads);
                }
                if wants(*b) {
                    let db = mm_tn(g, m, n, &val(*a).data, k);
                    accum(*b, db, grads);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accum(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    accum(*b, g.to_vec(), grads);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accum(*a, g.to_vec(), grads);
                }
                if wants(*b) {
                    accum(*b, g.iter().map(|x| -x).collect(), grads);
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let da = g
                        .iter()
                        .zip(&val(*b).data)
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    accum(*a, da, grads);
                }
                if wants(*b) {
                    let db = g
                        .iter()
                        .zip(&val(*a).data)
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    accum(*b, db, grads);
                }
            }
            Op::AddRow { a, r } => {
                let n = val(*r).cols();
                let m = val(*a).rows();
                if wants(*a) {
                    accum(*a, g.to_vec(), grads);
                }
                if wants(*r) {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    accum(*r, dr, grads);
                }
            }
            Op::AddCol { a, c } | Op::SubCol { a, c } => {
                let sign = if matches!(op, Op::AddCol { .. }) {
                    1.0
                } else {
                    -1.0
                };
                let (m, n) = (val(*a).rows(), val(*a).cols());
                if wants(*a) {
                    accum(*a, g.to_vec(), grads);
                }
                if wants(*c) {
                    let dc: Vec<f64> = (0..m)
                        .map(|i| sign * g[i * n..(i + 1) * n].iter().sum::<f64>())
                        .collect();
                    accum(*c, dc, grads);
                }
            }
            Op::Scale { a, k } => {
                if wants(*a) {
                    accum(*a, g.iter().map(|x| x * k).collect(), grads);
                }
            }
            Op::ScaleByVar { a, s } => {
                let k = val(*s).data[0];
                if wants(*a) {
                    accum(*a, g.iter().map(|x| x * k).collect(), grads);
                }
                if wants(*s) {
                    let ds: f64 = g.iter().zip(&val(*a).data).map(|(&gi, &ai)| gi * ai).sum();
                    accum(*s, vec![ds], grads);
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let y = &val(out_id).data;
                    let da = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accum(*a, da, grads);
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    let y = &val(out_id).data;
                    let da = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accum(*a, da, grads);
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let x = &val(*a).data;
                    let da = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| gi * gelu_bwd(xi))
                        .collect();
                    accum(*a, da, grads);
                }
            }
            Op::SoftmaxRows { a } => {
                if wants(*a) {
                    let y = &val(out_id).data;
                    let (m, n) = (val(out_id).rows(), val(out_id).cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yi = &y[i * n..(i + 1) * n];
                        let gi = &g[i * n..(i + 1) * n];
                        let dot: f64 = yi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            da[i * n + j] = yi[j] * (gi[j] - dot);
                        }
                    }
                    accum(*a, da, grads);
                }
            }
            Op::LseRows { a } => {
                if wants(*a) {
                    let x = val(*a);
                    let l = &val(out_id).data;
                    let (m, n) = (x.rows(), x.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i] * (x.data[i * n + j] - l[i]).exp();
                        }
                    }
                    accum(*a, da, grads);
                }
            }
            Op::LseCols { a } => {
                if wants(*a) {
                    let x = val(*a);
                    let l = &val(out_id).data;
                    let (m, n) = (x.rows(), x.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j] * (x.data[i * n + j] - l[j]).exp();
                        }
                    }
                    accum(*a, da, grads);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xt = val(*x);
                let (m, n) = (xt.rows(), xt.cols());
                let gam = &val(*gamma).data;
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let xhat = (xt.data[i * n + j] - mean[i]) * rstd[i];
                            dg[j] += g[i * n + j] * xhat;
                        }
                    }
                    accum(*gamma, dg, grads);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    accum(*beta, db, grads);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut sum_gg = 0.0;
                        let mut sum_gg_xhat = 0.0;
                        for j in 0..n {
                            let gg = g[i * n + j] * gam[j];
                            let xhat = (xt.data[i * n + j] - mean[i]) * rstd[i];
                            sum_gg += gg;
                            sum_gg_xhat += gg * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let gg = g[i * n + j] * gam[j];
                            let xhat = (xt.data[i * n + j] - mean[i]) * rstd[i];
                            dx[i * n + j] =
                                rstd[i] * (gg - inv_n * sum_gg - xhat * inv_n * sum_gg_xhat);
                        }
                    }
                    accum(*x, dx, grads);
                }
            }
            Op::GatherRows { a, idx } => {
                if wants(*a) {
                    let (m, n) = (val(*a).rows(), val(*a).cols());
                    let mut da = vec![0.0; m * n];
                    for (pos, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[i * n + j] += g[pos * n + j];
                        }
                    }
                    accum(*a, da, grads);
                }
            }
            Op::GatherElems { a, idx } => {
                if wants(*a) {
                    let mut da = vec![0.0; val(*a).numel()];
                    for (pos, &i) in idx.iter().enumerate() {
                        da[i] += g[pos];
                    }
                    accum(*a, da, grads);
                }
            }
            Op::ConcatCols { parts, widths } => {
                let m = val(out_id).rows();
                let total = val(out_id).cols();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if wants(p) {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accum(p, dp, grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts, heights } => {
                let n = val(out_id).cols();
                let mut offset = 0;
                for (&p, &h) in parts.iter().zip(heights) {
                    if wants(p) {
                        accum(p, g[offset * n..(offset + h) * n].to_vec(), grads);
                    }
                    offset += h;
                }
            }
            Op::NarrowCols { a, start } => {
                if wants(*a) {
                    let (m, n) = (val(*a).rows(), val(*a).cols());
                    let len = val(out_id).cols();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accum(*a, da, grads);
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let (m, n) = (val(*a).rows(), val(*a).cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    accum(*a, da, grads);
                }
            }
            Op::SumAll { a } => {
                if wants(*a) {
                    accum(*a, vec![g[0]; val(*a).numel()], grads);
                }
            }
            Op::MeanAll { a } => {
                if wants(*a) {
                    let k = g[0] / val(*a).numel() as f64;
                    accum(*a, vec![k; val(*a).numel()], grads);
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let da = g.iter().zip(mask).map(|(&gi, &ki)| gi * ki).collect();
                    accum(*a, da, grads);
                }
            }
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// `[m,k] · [k,n]`, ikj loop over contiguous rows.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `[m,k] · [n,k]ᵀ`, row-dot form.
fn mm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `[m,k]ᵀ · [m,n] → [k,n]`.
fn mm_tn(a: &[f64], m: usize, k: usize, c: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let crow = &c[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
    out
}

fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797884560802865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn lse_of_zero_and_ln3_is_ln4() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 3.0f64.ln()]));
        let y = tape.lse_rows(x);
        assert!((tape.value(y).item() - 4.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dropout_rate_validated() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 2));
        let mut rng = rand::SeedableRng::seed_from_u64(1);
        assert!(tape.dropout(a, 1.0, &mut rng).is_err());
        assert!(tape.dropout(a, -0.1, &mut rng).is_err());
    }

    #[test]
    fn linear_map_gradient_is_input_broadcast() {
        // loss = sum(x · W) with W trainable: dW[i][j] = sum over rows of x[:,i]
        let w = Parameter::trainable(
            "w",
            Tensor::matrix(2, 2, vec![0.5, -0.2, 0.1, 0.3]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let wv = tape.param(&w);
        let y = tape.matmul(x, wv).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        assert_eq!(gw.data, vec![2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn frozen_param_receives_no_grad() {
        let w = Parameter::frozen("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let loss = tape.sum_all(wv);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get("w").is_none());
        assert!(grads.is_empty());
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let w = Parameter::trainable("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        assert!(tape.backward(wv).is_err()); // non-scalar

        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let loss = tape.sum_all(wv);
        assert!(tape.backward(loss).is_ok());
        assert!(tape.backward(loss).is_err()); // consumed
    }

    #[test]
    fn tied_lease_accumulates_both_uses() {
        // loss = sum(w) + sum(w*w): dw = 1 + 2w
        let w = Parameter::trainable("w", Tensor::row(vec![3.0]));
        let mut tape = Tape::new();
        let w1 = tape.param(&w);
        let w2 = tape.param(&w); // same var returned
        assert_eq!(w1, w2);
        let sq = tape.mul(w1, w2).unwrap();
        let s1 = tape.sum_all(w1);
        let s2 = tape.sum_all(sq);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data, vec![7.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let w = Parameter::trainable("w", Tensor::row(vec![1.0, 2.0]));
        let mut tape = Tape::inference();
        let wv = tape.param(&w);
        let y = tape.tanh(wv);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_empty());
    }
}
