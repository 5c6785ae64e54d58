//! Reverse-mode automatic differentiation over dense f64 arrays.
//!
//! A [`Tape`] records every operation applied during the forward pass and
//! replays them in reverse to accumulate gradients. Everything is 64-bit and
//! single-threaded; graphs are built, differentiated once, and dropped.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("array data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward has already run on this tape")]
    BackwardAlreadyRun,
    #[error("no gradient for {what}; run backward first")]
    MissingGrad { what: String },
    #[error("embedding index {index} out of range for table with {rows} rows")]
    EmbedIndexOutOfRange { index: usize, rows: usize },
}

/// Dense row-major array of f64 values.
///
/// Shape `[n]` is a vector, `[r, c]` a matrix, `[1]` doubles as a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AdError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(AdError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Array::zeros(vec![n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows of a matrix, or 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix, or the length of a vector.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    /// a @ b^T with a: [m,k], b: [n,k].
    MatmulTb(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Broadcast add of a row vector: [r,c] + [c].
    AddRow(VarId, VarId),
    /// Broadcast multiply by a row vector: [r,c] * [c].
    MulRow(VarId, VarId),
    Scale(VarId, f64),
    Tanh(VarId),
    Relu(VarId),
    Softmax(VarId),
    LogSoftmax(VarId),
    Embed {
        table: VarId,
        indices: Vec<usize>,
    },
    ConcatRows(VarId, VarId),
    ConcatCols(VarId, VarId),
    Sum(VarId),
    Mean(VarId),
    /// -(1/T) * sum_t logp[t, targets[t]]
    NllMean {
        logp: VarId,
        targets: Vec<usize>,
    },
    /// Scalar node whose gradient w.r.t. its single input was computed
    /// externally during the forward pass (used for the CTC loss, whose
    /// forward-backward recursion lives outside the tape).
    ScalarExternal {
        input: VarId,
        input_grad: Array,
    },
}

struct Node {
    value: Array,
    op: Op,
    trainable: bool,
}

/// Records a computation graph; topological order is insertion order.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Array, op: Op, trainable: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            trainable,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (input data, masks, frozen teacher outputs).
    pub fn leaf(&mut self, value: Array) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient after [`Tape::backward`].
    pub fn param(&mut self, value: Array) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: VarId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Array> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let out = matmul_raw(va, vb, false);
        Ok(self.push(out, Op::Matmul(a, b), false))
    }

    /// a @ b^T; a: [m,k], b: [n,k] -> [m,n].
    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[1] {
            return Err(AdError::ShapeMismatch {
                op: "matmul_tb",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let out = matmul_raw(va, vb, true);
        Ok(self.push(out, Op::MatmulTb(a, b), false))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        self.elementwise(a, b, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        self.elementwise(a, b, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        self.elementwise(a, b, "mul")
    }

    fn elementwise(&mut self, a: VarId, b: VarId, which: &'static str) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(AdError::ShapeMismatch {
                op: which,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data: Vec<f64> = match which {
            "add" => va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect(),
            "sub" => va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect(),
            _ => va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect(),
        };
        let out = Array {
            shape: va.shape.clone(),
            data,
        };
        let op = match which {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(out, op, false))
    }

    /// Broadcast-add a row vector (bias) to every row of a matrix.
    pub fn add_row(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_vector() || va.shape[1] != vb.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "add_row",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let cols = va.shape[1];
        let mut out = va.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v += vb.data[i % cols];
        }
        Ok(self.push(out, Op::AddRow(a, b), false))
    }

    /// Broadcast-multiply every row of a matrix by a row vector.
    pub fn mul_row(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_vector() || va.shape[1] != vb.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "mul_row",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let cols = va.shape[1];
        let mut out = va.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v *= vb.data[i % cols];
        }
        Ok(self.push(out, Op::MulRow(a, b), false))
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v *= s;
        }
        self.push(out, Op::Scale(a, s), false)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a), false)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let mut out = self.value(a).clone();
        for v in out.data.iter_mut() {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(a), false)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = va.clone();
        for r in 0..rows {
            softmax_row(&mut out.data[r * cols..(r + 1) * cols]);
        }
        self.push(out, Op::Softmax(a), false)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = va.clone();
        for r in 0..rows {
            log_softmax_row(&mut out.data[r * cols..(r + 1) * cols]);
        }
        self.push(out, Op::LogSoftmax(a), false)
    }

    /// Row lookup: out[i, :] = table[indices[i], :].
    pub fn embed(&mut self, table: VarId, indices: &[usize]) -> Result<VarId, AdError> {
        let vt = self.value(table);
        if !vt.is_matrix() {
            return Err(AdError::BadShape {
                op: "embed",
                expected: "2-d table",
                got: vt.shape.clone(),
            });
        }
        let (rows, cols) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(AdError::EmbedIndexOutOfRange { index: ix, rows });
            }
            data.extend_from_slice(&vt.data[ix * cols..(ix + 1) * cols]);
        }
        let out = Array {
            shape: vec![indices.len(), cols],
            data,
        };
        Ok(self.push(
            out,
            Op::Embed {
                table,
                indices: indices.to_vec(),
            },
            false,
        ))
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape[1] != vb.shape[1] {
            return Err(AdError::ShapeMismatch {
                op: "concat_rows",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let out = Array {
            shape: vec![va.shape[0] + vb.shape[0], va.shape[1]],
            data,
        };
        Ok(self.push(out, Op::ConcatRows(a, b), false))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId, AdError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_matrix() || !vb.is_matrix() || va.shape[0] != vb.shape[0] {
            return Err(AdError::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (r, c1, c2) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut data = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            data.extend_from_slice(&va.data[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&vb.data[i * c2..(i + 1) * c2]);
        }
        let out = Array {
            shape: vec![r, c1 + c2],
            data,
        };
        Ok(self.push(out, Op::ConcatCols(a, b), false))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Array::scalar(s), Op::Sum(a), false)
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let s: f64 = va.data.iter().sum::<f64>() / va.numel() as f64;
        self.push(Array::scalar(s), Op::Mean(a), false)
    }

    /// Mean negative log-likelihood of per-row targets over log-probs.
    pub fn nll_mean(&mut self, logp: VarId, targets: &[usize]) -> Result<VarId, AdError> {
        let v = self.value(logp);
        if !v.is_matrix() || v.shape[0] != targets.len() {
            return Err(AdError::BadShape {
                op: "nll_mean",
                expected: "2-d log-probs with one row per target",
                got: v.shape.clone(),
            });
        }
        let cols = v.shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(AdError::EmbedIndexOutOfRange {
                index: t,
                rows: cols,
            });
        }
        let mut s = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            s -= v.data[r * cols + t];
        }
        let out = Array::scalar(s / targets.len() as f64);
        Ok(self.push(
            out,
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
            },
            false,
        ))
    }

    /// Scalar node with an externally-computed input gradient. The caller
    /// supplies `value` = f(input) and `input_grad` = df/d(input), both
    /// evaluated at the current input value.
    pub fn scalar_external(
        &mut self,
        input: VarId,
        value: f64,
        input_grad: Array,
    ) -> Result<VarId, AdError> {
        if input_grad.shape != self.value(input).shape {
            return Err(AdError::ShapeMismatch {
                op: "scalar_external",
                lhs: self.value(input).shape.clone(),
                rhs: input_grad.shape,
            });
        }
        Ok(self.push(
            Array::scalar(value),
            Op::ScalarExternal { input, input_grad },
            false,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) for every node reachable from `loss`.
    /// A tape can be differentiated exactly once.
    pub fn backward(&mut self, loss: VarId) -> Result<(), AdError> {
        if self.backward_done {
            return Err(AdError::BackwardAlreadyRun);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AdError::NonScalarLoss {
                shape: lv.shape.clone(),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Array::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Whether a trainable leaf has a gradient (backward ran and reached it).
    pub fn has_grad(&self, id: VarId) -> bool {
        self.grads[id.0].is_some()
    }

    pub fn is_trainable(&self, id: VarId) -> bool {
        self.nodes[id.0].trainable
    }

    fn accumulate(&mut self, id: VarId, delta: &Array) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data.iter_mut().zip(&delta.data) {
                    *gv += dv;
                }
            }
            None => self.grads[id.0] = Some(delta.clone()),
        }
    }

    fn accumulate_fn(&mut self, id: VarId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(Array::zeros(shape.to_vec()));
        }
        f(&mut self.grads[id.0].as_mut().unwrap().data);
    }

    fn propagate(&mut self, idx: usize, g: &Array) {
        // `g` is d(loss)/d(node idx); push contributions into its inputs.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let da = matmul_raw(g, &vb, true); // g @ b^T
                let db = matmul_t_raw(&va, g); // a^T @ g
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MatmulTb(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let da = matmul_raw(g, &vb, false); // g @ b
                let db = matmul_t_raw(g, &va); // g^T @ a
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let mut neg = g.clone();
                for v in neg.data.iter_mut() {
                    *v = -*v;
                }
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let mut da = g.clone();
                for (v, x) in da.data.iter_mut().zip(&vb.data) {
                    *v *= x;
                }
                let mut db = g.clone();
                for (v, x) in db.data.iter_mut().zip(&va.data) {
                    *v *= x;
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let cols = self.value(b).shape[0];
                self.accumulate(a, g);
                let gd = g.data.clone();
                self.accumulate_fn(b, &[cols], |gb| {
                    for (i, v) in gd.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a).clone(), self.value(b).clone());
                let cols = vb.shape[0];
                let mut da = g.clone();
                for (i, v) in da.data.iter_mut().enumerate() {
                    *v *= vb.data[i % cols];
                }
                self.accumulate(a, &da);
                let gd = g.data.clone();
                self.accumulate_fn(b, &[cols], |gb| {
                    for (i, v) in gd.iter().enumerate() {
                        gb[i % cols] += v * va.data[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                let mut da = g.clone();
                for v in da.data.iter_mut() {
                    *v *= s;
                }
                self.accumulate(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[idx].value.data.clone();
                let mut da = g.clone();
                for (v, yv) in da.data.iter_mut().zip(&y) {
                    *v *= 1.0 - yv * yv;
                }
                self.accumulate(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.value(a).data.clone();
                let mut da = g.clone();
                for (v, xv) in da.data.iter_mut().zip(&x) {
                    if *xv <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone();
                let (rows, cols) = (y.rows(), y.cols());
                let mut da = Array::zeros(y.shape.clone());
                for r in 0..rows {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..cols {
                        da.data[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(a, &da);
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let y = self.nodes[idx].value.clone(); // log-softmax output
                let (rows, cols) = (y.rows(), y.cols());
                let mut da = Array::zeros(y.shape.clone());
                for r in 0..rows {
                    let yr = &y.data[r * cols..(r + 1) * cols];
                    let gr = &g.data[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        da.data[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(a, &da);
            }
            Op::Embed { table, indices } => {
                let table = *table;
                let indices = indices.clone();
                let cols = self.value(table).shape[1];
                let shape = self.value(table).shape.clone();
                let gd = g.data.clone();
                self.accumulate_fn(table, &shape, |gt| {
                    for (row, &ix) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gt[ix * cols + c] += gd[row * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let (a, b) = (*a, *b);
                let ra = self.value(a).shape[0];
                let cols = self.value(a).shape[1];
                let (ga, gb) = g.data.split_at(ra * cols);
                let da = Array {
                    shape: self.value(a).shape.clone(),
                    data: ga.to_vec(),
                };
                let db = Array {
                    shape: self.value(b).shape.clone(),
                    data: gb.to_vec(),
                };
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
                let (r, c1, c2) = (sa[0], sa[1], sb[1]);
                let mut da = Array::zeros(sa);
                let mut db = Array::zeros(sb);
                for i in 0..r {
                    for c in 0..c1 {
                        da.data[i * c1 + c] = g.data[i * (c1 + c2) + c];
                    }
                    for c in 0..c2 {
                        db.data[i * c2 + c] = g.data[i * (c1 + c2) + c1 + c];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = Array::filled(self.value(a).shape.clone(), g.data[0]);
                self.accumulate(a, &da);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.value(a).numel() as f64;
                let da = Array::filled(self.value(a).shape.clone(), g.data[0] / n);
                self.accumulate(a, &da);
            }
            Op::NllMean { logp, targets } => {
                let logp = *logp;
                let targets = targets.clone();
                let shape = self.value(logp).shape.clone();
                let cols = shape[1];
                let scale = g.data[0] / targets.len() as f64;
                self.accumulate_fn(logp, &shape, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * cols + t] -= scale;
                    }
                });
            }
            Op::ScalarExternal { input, input_grad } => {
                let input = *input;
                let mut da = input_grad.clone();
                for v in da.data.iter_mut() {
                    *v *= g.data[0];
                }
                self.accumulate(input, &da);
            }
        }
    }
}

/// Apply one SGD update to a flat parameter slice.
pub fn sgd_step_slice(theta: &mut [f64], grad: &[f64], lr: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
}

fn matmul_raw(a: &Array, b: &Array, transpose_b: bool) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = if transpose_b { b.shape[0] } else { b.shape[1] };
    let mut out = Array::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                let bv = if transpose_b {
                    b.data[j * k + p]
                } else {
                    b.data[p * n + j]
                };
                s += a.data[i * k + p] * bv;
            }
            out.data[i * n + j] = s;
        }
    }
    out
}

/// a^T @ b with a: [m,k], b: [m,n] -> [k,n].
fn matmul_t_raw(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = Array::zeros(vec![k, n]);
    for p in 0..m {
        for i in 0..k {
            let av = a.data[p * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += av * b.data[p * n + j];
            }
        }
    }
    out
}

pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lz = max + z.ln();
    for v in row.iter_mut() {
        *v -= lz;
    }
}
