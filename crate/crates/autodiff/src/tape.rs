use crate::error::{AutodiffError, Result};
use crate::gemm::gemm;
use crate::params::{ParamGrads, ParamId, ParameterSet};
use crate::tensor::{cols_of, rows_of, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Primitive operations. Shapes are read as `[rows, cols]` with leading
/// dimensions folded into rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Constant input; receives no gradient.
    Leaf,
    /// Tensor borrowed from the tape's [`ParameterSet`].
    Param(ParamId),
    /// `op(a) · op(b)`, where the flags transpose the stored operand.
    MatMul { a_t: bool, b_t: bool },
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// `x[r, c] + b[c]` with `b` broadcast over rows.
    AddRow,
    /// Elementwise product of two same-shape tensors.
    Mul,
    /// Column-wise concatenation of inputs with equal row counts.
    ConcatCols,
    SliceCols { start: usize, len: usize },
    /// Repeats a single row `n` times.
    RepeatRows(usize),
    Relu,
    LeakyRelu(f64),
    Tanh,
    SoftmaxRows,
    /// Inputs `x[r, c]`, `gamma[c]`, `beta[c]`; normalizes each row.
    LayerNorm { eps: f64 },
    /// `[r, c] -> [1, c]`.
    MeanRows,
    Scale(f64),
    /// `scale * x + shift`, elementwise.
    Affine { scale: f64, shift: f64 },
    /// Sum of all elements, shape `[1]`.
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh => "tanh",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows => "mean_rows",
            Op::Scale(_) => "scale",
            Op::Affine { .. } => "affine",
            Op::Sum => "sum",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    /// `None` for parameter leaves, whose data lives in the parameter set.
    value: Option<Vec<f64>>,
    /// Layer norm keeps its normalized rows followed by the per-row inverse
    /// standard deviations.
    cache: Vec<f64>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated.
///
/// A tape is built fresh for every forward pass and borrows the parameters
/// it reads; it is single-threaded, but independent tapes may run on
/// separate threads over shared read-only parameters.
pub struct Tape<'p> {
    params: Option<&'p ParameterSet>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

fn mismatch(op: &Op, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn arity(op: &Op, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(AutodiffError::Arity {
            op: op.name(),
            expected,
            actual,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameters; only constant leaves are available.
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParameterSet) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> Option<&'p ParameterSet> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Vec<f64>) -> NodeId {
        self.push_cached(op, inputs, shape, value, Vec::new())
    }

    fn push_cached(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        value: Vec<f64>,
        cache: Vec<f64>,
    ) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: Some(value),
            cache,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape,
            value: Some(t.into_data()),
            cache: Vec::new(),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let params = self
            .params
            .ok_or_else(|| AutodiffError::UnknownParameter(format!("#{}", id.0)))?;
        if id.0 >= params.len() {
            return Err(AutodiffError::UnknownParameter(format!("#{}", id.0)));
        }
        if let Some(n) = self.param_nodes[id.0] {
            return Ok(n);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            inputs: Vec::new(),
            shape: params.tensor(id).shape().to_vec(),
            value: None,
            cache: Vec::new(),
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        Ok(n)
    }

    pub fn param_named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .and_then(|p| p.id(name))
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        self.param(id)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match (&node.value, node.op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self
                .params
                .expect("parameter node without parameter set")
                .tensor(pid)
                .data(),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("recorded nodes keep shape and data in sync")
    }

    /// Applies one primitive to previously recorded nodes.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.node(i)?;
        }
        match op {
            Op::Leaf | Op::Param(_) => Err(AutodiffError::Arity {
                op: op.name(),
                expected: 0,
                actual: inputs.len(),
            }),
            Op::MatMul { a_t, b_t } => {
                arity(&op, 2, inputs.len())?;
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                let (ra, ca) = (rows_of(sa), cols_of(sa));
                let (rb, cb) = (rows_of(sb), cols_of(sb));
                let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
                let (k2, n) = if b_t { (cb, rb) } else { (rb, cb) };
                if k != k2 {
                    return Err(mismatch(&op, sa, sb));
                }
                let mut out = vec![0.0; m * n];
                gemm(
                    m,
                    k,
                    n,
                    self.value(inputs[0]),
                    a_t,
                    self.value(inputs[1]),
                    b_t,
                    &mut out,
                    false,
                );
                Ok(self.push(op, inputs.to_vec(), vec![m, n], out))
            }
            Op::Add | Op::Mul => {
                arity(&op, 2, inputs.len())?;
                let (sa, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                if sa != sb {
                    return Err(mismatch(&op, sa, sb));
                }
                let shape = sa.to_vec();
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let out = if op == Op::Add {
                    a.iter().zip(b).map(|(x, y)| x + y).collect()
                } else {
                    a.iter().zip(b).map(|(x, y)| x * y).collect()
                };
                Ok(self.push(op, inputs.to_vec(), shape, out))
            }
            Op::AddRow => {
                arity(&op, 2, inputs.len())?;
                let (sx, sb) = (self.shape(inputs[0]), self.shape(inputs[1]));
                let c = cols_of(sx);
                if rows_of(sb) != 1 || cols_of(sb) != c {
                    return Err(mismatch(&op, sx, sb));
                }
                let shape = vec![rows_of(sx), c];
                let b = self.value(inputs[1]);
                let mut out = self.value(inputs[0]).to_vec();
                for row in out.chunks_mut(c.max(1)) {
                    add_into(row, b);
                }
                Ok(self.push(op, inputs.to_vec(), shape, out))
            }
            Op::ConcatCols => {
                if inputs.is_empty() {
                    return Err(AutodiffError::Arity {
                        op: op.name(),
                        expected: 1,
                        actual: 0,
                    });
                }
                let r = rows_of(self.shape(inputs[0]));
                let mut total = 0;
                for &i in inputs {
                    let s = self.shape(i);
                    if rows_of(s) != r {
                        return Err(mismatch(&op, self.shape(inputs[0]), s));
                    }
                    total += cols_of(s);
                }
                let mut out = vec![0.0; r * total];
                let mut offset = 0;
                for &i in inputs {
                    let c = cols_of(self.shape(i));
                    let v = self.value(i);
                    for row in 0..r {
                        out[row * total + offset..row * total + offset + c]
                            .copy_from_slice(&v[row * c..(row + 1) * c]);
                    }
                    offset += c;
                }
                Ok(self.push(op, inputs.to_vec(), vec![r, total], out))
            }
            Op::SliceCols { start, len } => {
                arity(&op, 1, inputs.len())?;
                let s = self.shape(inputs[0]);
                let (r, c) = (rows_of(s), cols_of(s));
                if start + len > c {
                    return Err(mismatch(&op, s, &[start, len]));
                }
                let v = self.value(inputs[0]);
                let mut out = Vec::with_capacity(r * len);
                for row in 0..r {
                    out.extend_from_slice(&v[row * c + start..row * c + start + len]);
                }
                Ok(self.push(op, inputs.to_vec(), vec![r, len], out))
            }
            Op::RepeatRows(n) => {
                arity(&op, 1, inputs.len())?;
                let s = self.shape(inputs[0]);
                if rows_of(s) != 1 {
                    return Err(mismatch(&op, s, &[1, cols_of(s)]));
                }
                let c = cols_of(s);
                let v = self.value(inputs[0]);
                let mut out = Vec::with_capacity(n * c);
                for _ in 0..n {
                    out.extend_from_slice(v);
                }
                Ok(self.push(op, inputs.to_vec(), vec![n, c], out))
            }
            Op::Relu | Op::LeakyRelu(_) | Op::Tanh | Op::Scale(_) | Op::Affine { .. } => {
                arity(&op, 1, inputs.len())?;
                let shape = self.shape(inputs[0]).to_vec();
                let x = self.value(inputs[0]);
                let out = match op {
                    Op::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                    Op::LeakyRelu(slope) => x
                        .iter()
                        .map(|&v| if v > 0.0 { v } else { slope * v })
                        .collect(),
                    Op::Tanh => x.iter().map(|v| v.tanh()).collect(),
                    Op::Scale(s) => x.iter().map(|v| v * s).collect(),
                    Op::Affine { scale, shift } => x.iter().map(|v| scale * v + shift).collect(),
                    _ => unreachable!(),
                };
                Ok(self.push(op, inputs.to_vec(), shape, out))
            }
            Op::SoftmaxRows => {
                arity(&op, 1, inputs.len())?;
                let s = self.shape(inputs[0]);
                let (r, c) = (rows_of(s), cols_of(s));
                let x = self.value(inputs[0]);
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    let xs = &x[row * c..(row + 1) * c];
                    let ys = &mut out[row * c..(row + 1) * c];
                    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (y, &v) in ys.iter_mut().zip(xs) {
                        *y = (v - max).exp();
                        total += *y;
                    }
                    for y in ys.iter_mut() {
                        *y /= total;
                    }
                }
                Ok(self.push(op, inputs.to_vec(), vec![r, c], out))
            }
            Op::LayerNorm { eps } => {
                arity(&op, 3, inputs.len())?;
                let s = self.shape(inputs[0]);
                let (r, c) = (rows_of(s), cols_of(s));
                for &p in &inputs[1..] {
                    let sp = self.shape(p);
                    if rows_of(sp) != 1 || cols_of(sp) != c {
                        return Err(mismatch(&op, s, sp));
                    }
                }
                let x = self.value(inputs[0]);
                let (gamma, beta) = (self.value(inputs[1]), self.value(inputs[2]));
                let mut out = vec![0.0; r * c];
                let mut cache = vec![0.0; r * c + r];
                for row in 0..r {
                    let xs = &x[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    cache[r * c + row] = inv;
                    for j in 0..c {
                        let xhat = (xs[j] - mean) * inv;
                        cache[row * c + j] = xhat;
                        out[row * c + j] = gamma[j] * xhat + beta[j];
                    }
                }
                Ok(self.push_cached(op, inputs.to_vec(), vec![r, c], out, cache))
            }
            Op::MeanRows => {
                arity(&op, 1, inputs.len())?;
                let s = self.shape(inputs[0]);
                let (r, c) = (rows_of(s), cols_of(s));
                let x = self.value(inputs[0]);
                let mut out = vec![0.0; c];
                for row in x.chunks(c.max(1)).take(r) {
                    add_into(&mut out, row);
                }
                let inv = 1.0 / r.max(1) as f64;
                for v in &mut out {
                    *v *= inv;
                }
                Ok(self.push(op, inputs.to_vec(), vec![1, c], out))
            }
            Op::Sum => {
                arity(&op, 1, inputs.len())?;
                let total = self.value(inputs[0]).iter().sum();
                Ok(self.push(op, inputs.to_vec(), vec![1], vec![total]))
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { a_t: false, b_t: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul { a_t: false, b_t: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow, &[x, bias])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::ConcatCols, parts)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::SliceCols { start, len }, &[x])
    }

    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        self.apply(Op::RepeatRows(n), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.apply(Op::LeakyRelu(slope), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::MeanRows, &[x])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Op::Scale(s), &[x])
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    /// Gradient of a scalar (`[1]`-shaped) node with respect to every
    /// parameter. Parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<ParamGrads> {
        let shape = self.node(loss)?.shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(AutodiffError::NonFinite("loss".into()));
        }
        self.backward_from(&[(loss, &[1.0][..])])
    }

    /// Reverse pass seeded with explicit upstream gradients for any number
    /// of nodes (vector-Jacobian product).
    pub fn backward_from(&self, seeds: &[(NodeId, &[f64])]) -> Result<ParamGrads> {
        let mut out = self
            .params
            .map(ParamGrads::zeros_like)
            .unwrap_or_else(|| ParamGrads::from_vecs(Vec::new()));
        self.backward_accumulate(seeds, &mut out)?;
        Ok(out)
    }

    /// Like [`Tape::backward_from`], but adds the parameter gradients into
    /// `out`, which must be shaped like this tape's parameter set.
    pub fn backward_accumulate(&self, seeds: &[(NodeId, &[f64])], out: &mut ParamGrads) -> Result<()> {
        let expected = self.params.map_or(0, |p| p.len());
        if out.len() != expected {
            return Err(AutodiffError::Arity {
                op: "backward_accumulate",
                expected,
                actual: out.len(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(id, g) in seeds {
            let node = self.node(id)?;
            let n = node.shape.iter().product::<usize>();
            if g.len() != n {
                return Err(mismatch(&Op::Leaf, &node.shape, &[g.len()]));
            }
            add_into(grads[id.0].get_or_insert_with(|| vec![0.0; n]), g);
            last = last.max(id.0);
        }

        for idx in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            // Interior gradients are dropped once propagated.
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
        }

        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if let Some(g) = &grads[n.0] {
                    let dst = out.get_mut(ParamId(pid));
                    if dst.len() != g.len() {
                        return Err(mismatch(&Op::Param(ParamId(pid)), &[dst.len()], &[g.len()]));
                    }
                    add_into(dst, g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let inputs = &node.inputs;
        let wants = |i: usize| self.nodes[inputs[i].0].needs_grad;
        let size = |i: usize| self.nodes[inputs[i].0].shape.iter().product::<usize>();
        macro_rules! slot {
            ($i:expr) => {{
                let n = size($i);
                grads[inputs[$i].0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a_t, b_t } => {
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let sa = &self.nodes[inputs[0].0].shape;
                let (ra, ca) = (rows_of(sa), cols_of(sa));
                let (m, k) = if a_t { (ca, ra) } else { (ra, ca) };
                let n = node.shape[1];
                if wants(0) {
                    let da = slot!(0);
                    if a_t {
                        gemm(k, n, m, b, b_t, dy, true, da, true);
                    } else {
                        gemm(m, n, k, dy, false, b, !b_t, da, true);
                    }
                }
                if wants(1) {
                    let db = slot!(1);
                    if b_t {
                        gemm(n, m, k, dy, true, a, a_t, db, true);
                    } else {
                        gemm(k, m, n, a, !a_t, dy, false, db, true);
                    }
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if wants(i) {
                        add_into(slot!(i), dy);
                    }
                }
            }
            Op::AddRow => {
                if wants(0) {
                    add_into(slot!(0), dy);
                }
                if wants(1) {
                    let c = node.shape[1];
                    let db = slot!(1);
                    for row in dy.chunks(c.max(1)) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul => {
                for (i, other) in [(0usize, 1usize), (1, 0)] {
                    if wants(i) {
                        let o = self.value(inputs[other]);
                        let d = slot!(i);
                        for ((d, g), v) in d.iter_mut().zip(dy).zip(o) {
                            *d += g * v;
                        }
                    }
                }
            }
            Op::ConcatCols => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let c = cols_of(&self.nodes[inputs[i].0].shape);
                    if wants(i) {
                        let d = slot!(i);
                        for row in 0..r {
                            add_into(
                                &mut d[row * c..(row + 1) * c],
                                &dy[row * total + offset..row * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { start, len } => {
                if wants(0) {
                    let c = cols_of(&self.nodes[inputs[0].0].shape);
                    let r = node.shape[0];
                    let d = slot!(0);
                    for row in 0..r {
                        add_into(
                            &mut d[row * c + start..row * c + start + len],
                            &dy[row * len..(row + 1) * len],
                        );
                    }
                }
            }
            Op::RepeatRows(_) => {
                if wants(0) {
                    let c = node.shape[1];
                    let d = slot!(0);
                    for row in dy.chunks(c.max(1)) {
                        add_into(d, row);
                    }
                }
            }
            Op::Relu => {
                if wants(0) {
                    let x = self.value(inputs[0]);
                    let d = slot!(0);
                    for ((d, g), v) in d.iter_mut().zip(dy).zip(x) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::LeakyRelu(slope) => {
                if wants(0) {
                    let x = self.value(inputs[0]);
                    let d = slot!(0);
                    for ((d, g), v) in d.iter_mut().zip(dy).zip(x) {
                        *d += if *v > 0.0 { *g } else { slope * g };
                    }
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let y = node.value.as_deref().expect("tanh output");
                    let d = slot!(0);
                    for ((d, g), y) in d.iter_mut().zip(dy).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Scale(s) | Op::Affine { scale: s, .. } => {
                if wants(0) {
                    let d = slot!(0);
                    for (d, g) in d.iter_mut().zip(dy) {
                        *d += s * g;
                    }
                }
            }
            Op::SoftmaxRows => {
                if wants(0) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let y = node.value.as_deref().expect("softmax output");
                    let d = slot!(0);
                    for row in 0..r {
                        let ys = &y[row * c..(row + 1) * c];
                        let gs = &dy[row * c..(row + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[row * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { .. } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let xhat = &node.cache[..r * c];
                let inv = &node.cache[r * c..];
                if wants(1) {
                    let dg = slot!(1);
                    for row in 0..r {
                        for j in 0..c {
                            dg[j] += dy[row * c + j] * xhat[row * c + j];
                        }
                    }
                }
                if wants(2) {
                    let db = slot!(2);
                    for row in dy.chunks(c.max(1)) {
                        add_into(db, row);
                    }
                }
                if wants(0) {
                    let gamma = self.value(inputs[1]);
                    let dx = slot!(0);
                    let mut dxhat = vec![0.0; c];
                    for row in 0..r {
                        let xh = &xhat[row * c..(row + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = dy[row * c + j] * gamma[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            dx[row * c + j] += inv[row] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::MeanRows => {
                if wants(0) {
                    let c = node.shape[1];
                    let d = slot!(0);
                    let r = d.len() / c.max(1);
                    let inv = 1.0 / r.max(1) as f64;
                    for row in d.chunks_mut(c.max(1)) {
                        for (x, g) in row.iter_mut().zip(dy) {
                            *x += g * inv;
                        }
                    }
                }
            }
            Op::Sum => {
                if wants(0) {
                    let g = dy[0];
                    for x in slot!(0).iter_mut() {
                        *x += g;
                    }
                }
            }
        }
    }
}
