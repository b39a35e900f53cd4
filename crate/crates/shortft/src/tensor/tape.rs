//! Per-forward-pass Wengert tape.
//!
//! Ops record their inputs and forward values; `backward` walks the node list
//! in reverse and accumulates gradients for every registered parameter leaf.
//! The op set is closed: anything fancier (one-hot lookups, finite-difference
//! stencils) is composed out of these primitives with constant tensors.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{dgemm_rowmajor, dims2, Tensor};

/// Stable identity of a parameter tensor across tapes.
///
/// Components carve up the u32 space so ids never collide: see the
/// constructors in `models`, `shortcut` and `rewards`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

impl ParamId {
    /// Reserved id for gradient-check probes.
    pub const PROBE: ParamId = ParamId(u32::MAX);
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[B, N] + [N]` (bias broadcast down rows).
    AddRow(Var, Var),
    /// `[B, N] + [B, 1]` (per-row scalar broadcast across columns).
    AddCol(Var, Var),
    Mul(Var, Var),
    /// `mul * x + add`, elementwise with scalar coefficients.
    Affine {
        x: Var,
        mul: f64,
        add: f64,
    },
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    /// Full reduction to a scalar.
    Mean(Var),
    Sum(Var),
    /// `[B, N] -> [B, 1]` row sums.
    SumRows(Var),
    /// Concatenate 2-D tensors along columns.
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Horizontal flip of images stored row-major as `[B, h*w]`.
    HFlip {
        x: Var,
        h: usize,
        w: usize,
    },
    StopGrad(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter id, in id order.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over all entries, in id order.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(s);
        }
    }

    /// Byte image used by determinism tests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (id, g) in &self.grads {
            out.extend_from_slice(&id.0.to_le_bytes());
            out.extend_from_slice(&(g.shape().len() as u32).to_le_bytes());
            for &d in g.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in g.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn insert(&mut self, id: ParamId, g: Tensor) {
        self.grads.insert(id, g);
    }
}

/// Recording tape. One per forward/backward pass; parameters are immutable
/// while a tape that references them is alive.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Grad-enabled leaf. Repeated registration of the same id returns the
    /// same node, so a parameter used at many chain steps accumulates one
    /// gradient entry.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: value.clone(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), value, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        self.push(Op::Add(a, b), value, "add")
    }

    /// `[B, N] + [N]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (rows, cols) = dims2(ta, "add_row")?;
        if tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(ta.data()[r * cols + c] + tb.data()[c]);
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], data);
        self.push(Op::AddRow(a, bias), value, "add_row")
    }

    /// `[B, N] + [B, 1]`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (rows, cols) = dims2(ta, "add_col")?;
        if tc.shape() != [rows, 1] {
            return Err(Error::ShapeMismatch {
                op: "add_col",
                lhs: ta.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let add = tc.data()[r];
            for c in 0..cols {
                data.push(ta.data()[r * cols + c] + add);
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], data);
        self.push(Op::AddCol(a, col), value, "add_col")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data);
        self.push(Op::Mul(a, b), value, "mul")
    }

    /// `mul * x + add` elementwise.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| mul * v + add).collect();
        let value = Tensor::from_vec(self.value(x).shape().to_vec(), data);
        self.push(Op::Affine { x, mul, add }, value, "affine")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, f64::tanh);
        self.push(Op::Tanh(x), value, "tanh")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, |v| v * sigmoid(v));
        self.push(Op::Silu(x), value, "silu")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, f64::exp);
        self.push(Op::Exp(x), value, "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, f64::ln);
        self.push(Op::Ln(x), value, "ln")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, f64::sqrt);
        self.push(Op::Sqrt(x), value, "sqrt")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.map_unary(x, |v| v * v);
        self.push(Op::Square(x), value, "square")
    }

    fn map_unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_vec(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    /// Mean over every element, to a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(Op::Mean(x), value, "mean")
    }

    /// Sum over every element, to a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value, "sum")
    }

    /// `[B, N] -> [B, 1]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "sum_rows")?;
        let data = (0..rows)
            .map(|r| self.value(x).data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let value = Tensor::from_vec(vec![rows, 1], data);
        self.push(Op::SumRows(x), value, "sum_rows")
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument {
                what: "concat_cols",
                why: "no inputs".into(),
            });
        }
        let rows = dims2(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![rows, total], data);
        self.push(Op::ConcatCols(parts.to_vec()), value, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "slice_cols")?;
        if start + len > cols {
            return Err(Error::InvalidArgument {
                what: "slice_cols",
                why: format!("range {start}..{} out of {cols} columns", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], data);
        self.push(Op::SliceCols { x, start, len }, value, "slice_cols")
    }

    /// Mirror images along their width. `x` is `[B, h*w]` row-major.
    pub fn hflip(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "hflip")?;
        if cols != h * w {
            return Err(Error::ShapeMismatch {
                op: "hflip",
                lhs: vec![rows, cols],
                rhs: vec![h, w],
            });
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..rows {
            for i in 0..h {
                for j in 0..w {
                    data[b * cols + i * w + j] = src[b * cols + i * w + (w - 1 - j)];
                }
            }
        }
        let value = Tensor::from_vec(vec![rows, cols], data);
        self.push(Op::HFlip { x, h, w }, value, "hflip")
    }

    /// Identity forward; blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node {
            op: Op::StopGrad(x),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar output. Returns gradients for every
    /// parameter leaf registered on the tape; parameters that the output does
    /// not depend on get exact zeros.
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument {
                what: "backward",
                why: "output is not on this tape".into(),
            });
        }
        let out_val = &self.nodes[output.0].value;
        if !out_val.is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: out_val.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Const | Op::Param(_) => {
                    grads[idx] = Some(g); // keep for collection below
                }
                Op::MatMul(a, b) => {
                    let ta = &self.nodes[a.0].value;
                    let tb = &self.nodes[b.0].value;
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    {
                        let ga = grad_buf(&mut grads, a.0, m * k);
                        // dA = dC @ B^T
                        unsafe {
                            matrixmultiply::dgemm(
                                m,
                                n,
                                k,
                                1.0,
                                g.as_ptr(),
                                n as isize,
                                1,
                                tb.data().as_ptr(),
                                1,
                                n as isize,
                                1.0,
                                ga.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    {
                        let gb = grad_buf(&mut grads, b.0, k * n);
                        // dB = A^T @ dC
                        unsafe {
                            matrixmultiply::dgemm(
                                k,
                                m,
                                n,
                                1.0,
                                ta.data().as_ptr(),
                                1,
                                k as isize,
                                g.as_ptr(),
                                n as isize,
                                1,
                                1.0,
                                gb.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, a.0, &g);
                    let cols = self.nodes[bias.0].value.len();
                    let gb = grad_buf(&mut grads, bias.0, cols);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                }
                Op::AddCol(a, col) => {
                    accumulate(&mut grads, a.0, &g);
                    let rows = self.nodes[col.0].value.shape()[0];
                    let cols = g.len() / rows;
                    let gc = grad_buf(&mut grads, col.0, rows);
                    for r in 0..rows {
                        gc[r] += g[r * cols..(r + 1) * cols].iter().sum::<f64>();
                    }
                }
                Op::Mul(a, b) => {
                    let tb = self.nodes[b.0].value.clone();
                    let ta = self.nodes[a.0].value.clone();
                    {
                        let ga = grad_buf(&mut grads, a.0, g.len());
                        for (i, v) in g.iter().enumerate() {
                            ga[i] += v * tb.data()[i];
                        }
                    }
                    {
                        let gb = grad_buf(&mut grads, b.0, g.len());
                        for (i, v) in g.iter().enumerate() {
                            gb[i] += v * ta.data()[i];
                        }
                    }
                }
                Op::Affine { x, mul, .. } => {
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += mul * v;
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[idx].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += v * (1.0 - y.data()[i] * y.data()[i]);
                    }
                }
                Op::Silu(x) => {
                    let tx = self.nodes[x.0].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        let s = sigmoid(tx.data()[i]);
                        gx[i] += v * s * (1.0 + tx.data()[i] * (1.0 - s));
                    }
                }
                Op::Exp(x) => {
                    let y = self.nodes[idx].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += v * y.data()[i];
                    }
                }
                Op::Ln(x) => {
                    let tx = self.nodes[x.0].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += v / tx.data()[i];
                    }
                }
                Op::Sqrt(x) => {
                    let y = self.nodes[idx].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += v / (2.0 * y.data()[i]);
                    }
                }
                Op::Square(x) => {
                    let tx = self.nodes[x.0].value.clone();
                    let gx = grad_buf(&mut grads, x.0, g.len());
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += 2.0 * tx.data()[i] * v;
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gx = grad_buf(&mut grads, x.0, n);
                    let v = g[0] / n as f64;
                    for e in gx.iter_mut() {
                        *e += v;
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gx = grad_buf(&mut grads, x.0, n);
                    for e in gx.iter_mut() {
                        *e += g[0];
                    }
                }
                Op::SumRows(x) => {
                    let (rows, cols) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let gx = grad_buf(&mut grads, x.0, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[r];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = self.nodes[parts[0].0].value.shape()[0];
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.shape()[1])
                        .collect();
                    let total: usize = widths.iter().sum();
                    let mut offset = 0;
                    for (p, w) in parts.iter().zip(&widths) {
                        let gp = grad_buf(&mut grads, p.0, rows * w);
                        for r in 0..rows {
                            for c in 0..*w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (start, len) = (*start, *len);
                    let (rows, cols) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let gx = grad_buf(&mut grads, x.0, rows * cols);
                    for r in 0..rows {
                        for c in 0..len {
                            gx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::HFlip { x, h, w } => {
                    let (h, w) = (*h, *w);
                    let rows = self.nodes[x.0].value.shape()[0];
                    let cols = h * w;
                    let gx = grad_buf(&mut grads, x.0, rows * cols);
                    for b in 0..rows {
                        for i in 0..h {
                            for j in 0..w {
                                gx[b * cols + i * w + (w - 1 - j)] += g[b * cols + i * w + j];
                            }
                        }
                    }
                }
                Op::StopGrad(_) => {
                    // barrier: nothing flows upstream
                }
            }
        }

        let mut map = GradMap::default();
        for (&id, &var) in &self.param_vars {
            let value = &self.nodes[var.0].value;
            let g = match &grads[var.0] {
                Some(g) => Tensor::from_vec(value.shape().to_vec(), g.clone()),
                None => value.zeros_like(),
            };
            let g = g.check_finite("backward")?;
            map.insert(id, g);
        }
        Ok(map)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let buf = grad_buf(grads, idx, g.len());
    for (e, v) in buf.iter_mut().zip(g) {
        *e += v;
    }
}
