//! Recorded operation tape with reverse-mode gradient accumulation.
//!
//! A `Tape` is built during one forward pass and consumed by `backward`,
//! which pushes parameter gradients into the owning `ParameterStore`.
//! All forward math is straight-line `f64`; identical inputs produce
//! bitwise-identical outputs.

use crate::error::{Error, Result};
use crate::numerics::{matmul_into, ParameterStore, Tensor2D};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeId(usize);

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact-erf form: `0.5 * x * (1 + erf(x / sqrt(2)))`.
    Gelu,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit added to masked-out attention keys. Finite so downstream math
/// stays NaN-free even when a row has no unmasked key.
pub const MASKED_LOGIT: f64 = -1e30;

enum Op {
    Constant,
    Param(String),
    Matmul(TapeId, TapeId),
    Add(TapeId, TapeId),
    Sub(TapeId, TapeId),
    MulElem(TapeId, TapeId),
    AddRowBroadcast(TapeId, TapeId),
    Scale(TapeId, f64),
    Transpose(TapeId),
    SoftmaxRows(TapeId),
    LayerNorm {
        x: TapeId,
        gain: TapeId,
        bias: TapeId,
        eps: f64,
    },
    Activation(TapeId, Activation),
    GatherRows {
        x: TapeId,
        indices: Vec<usize>,
    },
    SliceRows {
        x: TapeId,
        start: usize,
    },
    SliceCols {
        x: TapeId,
        start: usize,
    },
    ConcatRows(Vec<TapeId>),
    ConcatCols(Vec<TapeId>),
    MeanRows(TapeId),
    MaxRows(TapeId),
    SumAll(TapeId),
    MulConst(TapeId, Vec<f64>),
    AddConst(TapeId),
    BceWithLogitsMean {
        logits: TapeId,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: TapeId,
        target: usize,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Forward-pass recording; one tape per forward, freed by `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> TapeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        TapeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: TapeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TapeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn to_tensor(&self, id: TapeId) -> Tensor2D {
        let n = &self.nodes[id.0];
        Tensor2D::from_vec(n.rows, n.cols, n.value.clone()).expect("node shape consistent")
    }

    pub fn scalar(&self, id: TapeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if n.rows != 1 || n.cols != 1 {
            return Err(Error::shape(
                "scalar",
                "1x1",
                format!("{}x{}", n.rows, n.cols),
            ));
        }
        Ok(n.value[0])
    }

    fn shape_str(&self, id: TapeId) -> String {
        let (r, c) = self.dims(id);
        format!("{r}x{c}")
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, t: &Tensor2D) -> TapeId {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Constant)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<TapeId> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "constant_from",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(self.push(rows, cols, data, Op::Constant))
    }

    /// Record a named parameter leaf; `backward` accumulates into its grad.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<TapeId> {
        let t = store.get(name)?;
        Ok(self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            Op::Param(name.to_string()),
        ))
    }

    pub fn matmul(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape_str(a), self.shape_str(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        Ok(self.push(m, n, out, Op::Matmul(a, b)))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: TapeId, b: TapeId) -> Result<(usize, usize)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(Error::shape(op, self.shape_str(a), self.shape_str(b)));
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (r, c) = self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (r, c) = self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    pub fn mul_elem(&mut self, a: TapeId, b: TapeId) -> Result<TapeId> {
        let (r, c) = self.binary_same_shape("mul_elem", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, out, Op::MulElem(a, b)))
    }

    /// Add a `1 x cols` row vector to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: TapeId, row: TapeId) -> Result<TapeId> {
        let (r, c) = self.dims(a);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(Error::shape(
                "add_row_broadcast",
                self.shape_str(a),
                self.shape_str(row),
            ));
        }
        let rowv = self.nodes[row.0].value.clone();
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.chunks_mut(c) {
            for (o, rv) in chunk.iter_mut().zip(&rowv) {
                *o += rv;
            }
        }
        Ok(self.push(r, c, out, Op::AddRowBroadcast(a, row)))
    }

    pub fn scale(&mut self, a: TapeId, factor: f64) -> TapeId {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        self.push(r, c, out, Op::Scale(a, factor))
    }

    pub fn transpose(&mut self, a: TapeId) -> TapeId {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a))
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: TapeId) -> Result<TapeId> {
        let (r, c) = self.dims(a);
        if c < 1 {
            return Err(Error::invalid("softmax_rows: zero columns"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[a.0].value[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(r, c, out, Op::SoftmaxRows(a)))
    }

    /// Per-row standardization followed by the affine `gain, bias` transform.
    pub fn layer_norm(&mut self, x: TapeId, gain: TapeId, bias: TapeId, eps: f64) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.dims(id);
            if gr != 1 || gc != c {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} for {}", self.shape_str(x)),
                    self.shape_str(id),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                let xhat = (row[j] - mean) * inv_std;
                orow[j] = self.nodes[gain.0].value[j] * xhat + self.nodes[bias.0].value[j];
            }
        }
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn activation(&mut self, x: TapeId, kind: Activation) -> TapeId {
        let (r, c) = self.dims(x);
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Gelu => gelu(v),
            })
            .collect();
        self.push(r, c, out, Op::Activation(x, kind))
    }

    /// Gather rows of `x` by index; used for embedding lookup and for
    /// broadcasting per-kernel vectors over segment rows.
    pub fn gather_rows(&mut self, x: TapeId, indices: &[usize]) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                r
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&self.nodes[x.0].value[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            indices.len(),
            c,
            out,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: TapeId, start: usize, len: usize) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        if start + len > r || len == 0 {
            return Err(Error::invalid(format!(
                "slice_rows: rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TapeId, start: usize, len: usize) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!(
                "slice_cols: cols {start}..{} out of range for {c} cols",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[x.0].value[i * c + start..i * c + start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[TapeId]) -> Result<TapeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let (_, c) = self.dims(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape_str(parts[0]),
                    self.shape_str(p),
                ));
            }
            rows += pr;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[TapeId]) -> Result<TapeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let (r, _) = self.dims(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape_str(parts[0]),
                    self.shape_str(p),
                ));
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let (_, pc) = self.dims(p);
                out.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Column-wise mean over rows, producing `1 x cols`.
    pub fn mean_rows(&mut self, x: TapeId) -> TapeId {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.nodes[x.0].value[i * c + j];
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        self.push(1, c, out, Op::MeanRows(x))
    }

    /// Column-wise max over rows, producing `1 x cols`. Ties route the
    /// gradient to the first maximal row.
    pub fn max_rows(&mut self, x: TapeId) -> TapeId {
        let (r, c) = self.dims(x);
        let v = &self.nodes[x.0].value;
        let mut out = v[..c].to_vec();
        for i in 1..r {
            for j in 0..c {
                if v[i * c + j] > out[j] {
                    out[j] = v[i * c + j];
                }
            }
        }
        self.push(1, c, out, Op::MaxRows(x))
    }

    pub fn sum_all(&mut self, x: TapeId) -> TapeId {
        let s = self.nodes[x.0].value.iter().sum::<f64>();
        self.push(1, 1, vec![s], Op::SumAll(x))
    }

    /// Elementwise multiply by a constant mask (dropout, query zeroing).
    pub fn mul_const(&mut self, x: TapeId, mask: Vec<f64>) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        if mask.len() != r * c {
            return Err(Error::shape(
                "mul_const",
                self.shape_str(x),
                format!("{} values", mask.len()),
            ));
        }
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        Ok(self.push(r, c, out, Op::MulConst(x, mask)))
    }

    /// Elementwise add a constant matrix (position tables, logit masks).
    pub fn add_const(&mut self, x: TapeId, addend: Vec<f64>) -> Result<TapeId> {
        let (r, c) = self.dims(x);
        if addend.len() != r * c {
            return Err(Error::shape(
                "add_const",
                self.shape_str(x),
                format!("{} values", addend.len()),
            ));
        }
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&addend)
            .map(|(v, a)| v + a)
            .collect();
        Ok(self.push(r, c, out, Op::AddConst(x)))
    }

    /// Mean over entries of the stable binary cross-entropy on
    /// `sigmoid(logits)` against 0/1 targets. Returns a `1 x 1` scalar.
    pub fn bce_with_logits_mean(&mut self, logits: TapeId, targets: &[f64]) -> Result<TapeId> {
        let (r, c) = self.dims(logits);
        if targets.len() != r * c {
            return Err(Error::shape(
                "bce_with_logits_mean",
                self.shape_str(logits),
                format!("{} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::invalid(format!(
                "bce_with_logits_mean: target {bad} outside {{0,1}}"
            )));
        }
        let mut total = 0.0;
        for (&z, &y) in self.nodes[logits.0].value.iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = total / targets.len() as f64;
        Ok(self.push(
            1,
            1,
            vec![value],
            Op::BceWithLogitsMean {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Cross-entropy of a softmax over a single `1 x C` logit row against
    /// the `target` class index. Returns a `1 x 1` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: TapeId, target: usize) -> Result<TapeId> {
        let (r, c) = self.dims(logits);
        if r != 1 {
            return Err(Error::shape("softmax_cross_entropy", "1xC", self.shape_str(logits)));
        }
        if target >= c {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: target {target} >= {c} classes"
            )));
        }
        let row = &self.nodes[logits.0].value;
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        let value = lse - row[target];
        Ok(self.push(1, 1, vec![value], Op::SoftmaxCrossEntropy { logits, target }))
    }

    /// Reverse pass from a `1 x 1` loss node. Gradients of parameter leaves
    /// are accumulated into `store` (so repeated passes without
    /// `zero_grads` add up); parameters the loss never touched receive
    /// nothing. Consumes the tape.
    pub fn backward(self, loss: TapeId, store: &mut ParameterStore) -> Result<()> {
        {
            let n = &self.nodes[loss.0];
            if n.rows != 1 || n.cols != 1 {
                return Err(Error::shape(
                    "backward",
                    "1x1 loss",
                    format!("{}x{}", n.rows, n.cols),
                ));
            }
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Take this node's gradient out so inputs can be borrowed mutably.
            let dy = std::mem::take(&mut grads[idx]);
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    store.accumulate_grad(name, &dy)?;
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let n = self.nodes[b.0].cols;
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // dA[i][p] += dot(dY[i], B[p]); dB[p] += A[i][p] * dY[i]
                    {
                        let da = &mut grads[a.0];
                        for i in 0..m {
                            let dyrow = &dy[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for (dv, bb) in dyrow.iter().zip(brow) {
                                    s += dv * bb;
                                }
                                darow[p] += s;
                            }
                        }
                    }
                    {
                        let db = &mut grads[b.0];
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            let dyrow = &dy[i * n..(i + 1) * n];
                            for (p, &ap) in arow.iter().enumerate() {
                                if ap == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[p * n..(p + 1) * n];
                                for (d, dv) in dbrow.iter_mut().zip(dyrow) {
                                    *d += ap * dv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    for (g, d) in grads[b.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    for (g, d) in grads[b.0].iter_mut().zip(&dy) {
                        *g -= d;
                    }
                }
                Op::MulElem(a, b) => {
                    let (a, b) = (*a, *b);
                    for (i, &d) in dy.iter().enumerate() {
                        grads[a.0][i] += d * self.nodes[b.0].value[i];
                    }
                    for (i, &d) in dy.iter().enumerate() {
                        grads[b.0][i] += d * self.nodes[a.0].value[i];
                    }
                }
                Op::AddRowBroadcast(a, row) => {
                    let c = node.cols;
                    for (g, d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let drow = &mut grads[row.0];
                    for chunk in dy.chunks(c) {
                        for (g, d) in drow.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    for (g, d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += factor * d;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.rows, node.cols);
                    let da = &mut grads[a.0];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += dy[i * c + j];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = (node.rows, node.cols);
                    let y = &node.value;
                    let da = &mut grads[a.0];
                    for i in 0..r {
                        let yrow = &y[i * c..(i + 1) * c];
                        let dyrow = &dy[i * c..(i + 1) * c];
                        let s: f64 = yrow.iter().zip(dyrow).map(|(yv, dv)| yv * dv).sum();
                        let darow = &mut da[i * c..(i + 1) * c];
                        for j in 0..c {
                            darow[j] += yrow[j] * (dyrow[j] - s);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (r, c) = (node.rows, node.cols);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    for i in 0..r {
                        let xrow = &xv[i * c..(i + 1) * c];
                        let dyrow = &dy[i * c..(i + 1) * c];
                        let mean = xrow.iter().sum::<f64>() / c as f64;
                        let var =
                            xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = dyrow[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * inv_std;
                            let dxhat = dyrow[j] * gv[j];
                            grads[x.0][i * c + j] +=
                                inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            grads[gain.0][j] += dyrow[j] * xhat;
                            grads[bias.0][j] += dyrow[j];
                        }
                    }
                }
                Op::Activation(x, kind) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = &mut grads[x.0];
                    match kind {
                        Activation::Relu => {
                            for (i, &d) in dy.iter().enumerate() {
                                if xv[i] > 0.0 {
                                    dx[i] += d;
                                }
                            }
                        }
                        Activation::Gelu => {
                            for (i, &d) in dy.iter().enumerate() {
                                dx[i] += d * gelu_grad(xv[i]);
                            }
                        }
                    }
                }
                Op::GatherRows { x, indices } => {
                    let c = node.cols;
                    let dx = &mut grads[x.0];
                    for (i, &src) in indices.iter().enumerate() {
                        let drow = &dy[i * c..(i + 1) * c];
                        let xrow = &mut dx[src * c..(src + 1) * c];
                        for (g, d) in xrow.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.cols;
                    let dst = &mut grads[x.0][start * c..(start + node.rows) * c];
                    for (g, d) in dst.iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, len) = (node.rows, node.cols);
                    let xc = self.nodes[x.0].cols;
                    let dx = &mut grads[x.0];
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * xc + start + j] += dy[i * len + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].rows;
                        let src = &dy[offset * c..(offset + pr) * c];
                        for (g, d) in grads[p.0].iter_mut().zip(src) {
                            *g += d;
                        }
                        offset += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, c) = (node.rows, node.cols);
                    for i in 0..r {
                        let mut offset = 0;
                        for &p in parts {
                            let pc = self.nodes[p.0].cols;
                            let dst = &mut grads[p.0][i * pc..(i + 1) * pc];
                            for (g, d) in dst.iter_mut().zip(&dy[i * c + offset..i * c + offset + pc])
                            {
                                *g += d;
                            }
                            offset += pc;
                        }
                    }
                }
                Op::MeanRows(x) => {
                    let r = self.nodes[x.0].rows;
                    let c = node.cols;
                    let w = 1.0 / r as f64;
                    let dx = &mut grads[x.0];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += dy[j] * w;
                        }
                    }
                }
                Op::MaxRows(x) => {
                    // Recompute first-argmax per column; matches forward.
                    let r = self.nodes[x.0].rows;
                    let c = node.cols;
                    let xv = &self.nodes[x.0].value;
                    let dx = &mut grads[x.0];
                    for j in 0..c {
                        let mut best = 0;
                        for i in 1..r {
                            if xv[i * c + j] > xv[best * c + j] {
                                best = i;
                            }
                        }
                        dx[best * c + j] += dy[j];
                    }
                }
                Op::SumAll(x) => {
                    for g in grads[x.0].iter_mut() {
                        *g += dy[0];
                    }
                }
                Op::MulConst(x, mask) => {
                    for ((g, d), m) in grads[x.0].iter_mut().zip(&dy).zip(mask) {
                        *g += d * m;
                    }
                }
                Op::AddConst(x) => {
                    for (g, d) in grads[x.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::BceWithLogitsMean { logits, targets } => {
                    let zv = &self.nodes[logits.0].value;
                    let w = dy[0] / targets.len() as f64;
                    let dz = &mut grads[logits.0];
                    for i in 0..targets.len() {
                        dz[i] += w * (sigmoid(zv[i]) - targets[i]);
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let zv = &self.nodes[logits.0].value;
                    let m = zv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = zv.iter().map(|&z| (z - m).exp()).sum();
                    let dz = &mut grads[logits.0];
                    for (i, &z) in zv.iter().enumerate() {
                        let p = (z - m).exp() / sum;
                        dz[i] += dy[0] * (p - if i == *target { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Tape handles for one attention block's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParamIds {
    pub wq: TapeId,
    pub bq: TapeId,
    pub wk: TapeId,
    pub bk: TapeId,
    pub wv: TapeId,
    pub bv: TapeId,
    pub wo: TapeId,
    pub bo: TapeId,
}

impl AttentionParamIds {
    /// Register `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}` from the store.
    pub fn register(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> Result<Self> {
        Ok(AttentionParamIds {
            wq: tape.param(store, &format!("{prefix}.wq"))?,
            bq: tape.param(store, &format!("{prefix}.bq"))?,
            wk: tape.param(store, &format!("{prefix}.wk"))?,
            bk: tape.param(store, &format!("{prefix}.bk"))?,
            wv: tape.param(store, &format!("{prefix}.wv"))?,
            bv: tape.param(store, &format!("{prefix}.bv"))?,
            wo: tape.param(store, &format!("{prefix}.wo"))?,
            bo: tape.param(store, &format!("{prefix}.bo"))?,
        })
    }
}

/// Scaled dot-product self-attention with per-head Q/K/V/O projections.
///
/// Masked rows are removed from the key set (finite `MASKED_LOGIT` added
/// before softmax) and zeroed as queries, so they neither influence nor
/// produce output.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: TapeId,
    params: &AttentionParamIds,
    heads: usize,
    mask: &[bool],
) -> Result<TapeId> {
    let (rows, _) = tape.dims(x);
    multi_head_attention_blocks(tape, x, params, heads, mask, &[(0, rows)])
}

/// Block-diagonal variant: projections are shared over all rows, attention
/// runs independently inside each `(start, end)` block. With one block
/// covering every row this is plain self-attention; disjoint blocks encode
/// many segments in a single batched pass.
pub fn multi_head_attention_blocks(
    tape: &mut Tape,
    x: TapeId,
    params: &AttentionParamIds,
    heads: usize,
    mask: &[bool],
    blocks: &[(usize, usize)],
) -> Result<TapeId> {
    let (rows, d_model) = tape.dims(x);
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::invalid(format!(
            "multi_head_attention: d_model {d_model} not divisible by {heads} heads"
        )));
    }
    if mask.len() != rows {
        return Err(Error::shape(
            "multi_head_attention",
            format!("{rows} rows"),
            format!("{} mask entries", mask.len()),
        ));
    }
    let mut expected = 0;
    for &(start, end) in blocks {
        if start != expected || end <= start {
            return Err(Error::invalid(format!(
                "multi_head_attention: blocks must partition the rows, got {start}..{end}"
            )));
        }
        expected = end;
    }
    if expected != rows {
        return Err(Error::invalid(format!(
            "multi_head_attention: blocks cover {expected} of {rows} rows"
        )));
    }
    let d_head = d_model / heads;

    let q = tape.matmul(x, params.wq)?;
    let q = tape.add_row_broadcast(q, params.bq)?;
    let k = tape.matmul(x, params.wk)?;
    let k = tape.add_row_broadcast(k, params.bk)?;
    let v = tape.matmul(x, params.wv)?;
    let v = tape.add_row_broadcast(v, params.bv)?;

    let mut heads_cols = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        heads_cols.push((qh, kh, vh));
    }

    let mut block_outputs = Vec::with_capacity(blocks.len());
    for &(start, end) in blocks {
        let len = end - start;
        // Additive key mask local to the block, shared by its heads.
        let mut key_mask = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                if !mask[start + j] {
                    key_mask[i * len + j] = MASKED_LOGIT;
                }
            }
        }
        let mut head_outputs = Vec::with_capacity(heads);
        for &(qh, kh, vh) in &heads_cols {
            let qb = tape.slice_rows(qh, start, len)?;
            let kb = tape.slice_rows(kh, start, len)?;
            let vb = tape.slice_rows(vh, start, len)?;
            let kt = tape.transpose(kb);
            let logits = tape.matmul(qb, kt)?;
            let logits = tape.scale(logits, 1.0 / (d_head as f64).sqrt());
            let logits = tape.add_const(logits, key_mask.clone())?;
            let weights = tape.softmax_rows(logits)?;
            head_outputs.push(tape.matmul(weights, vb)?);
        }
        block_outputs.push(tape.concat_cols(&head_outputs)?);
    }
    let merged = tape.concat_rows(&block_outputs)?;
    let out = tape.matmul(merged, params.wo)?;
    let out = tape.add_row_broadcast(out, params.bo)?;

    // Zero masked query rows.
    let mut query_mask = vec![1.0; rows * d_model];
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            query_mask[i * d_model..(i + 1) * d_model].fill(0.0);
        }
    }
    tape.mul_const(out, query_mask)
}
