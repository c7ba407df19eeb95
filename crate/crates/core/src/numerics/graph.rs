//! Reverse-mode computation graph.
//!
//! Nodes are appended in topological order; `evaluate` runs them forward,
//! `backward` walks the tape in reverse and accumulates gradients into the
//! parameter slots. Graphs are rebuilt per sequence, so shapes are fixed and
//! checked at construction time.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, real, Scalar, Tensor};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} (embedding): id {id} at position {index} out of range for table with {rows} rows")]
    EmbeddingIdOutOfRange {
        node: NodeId,
        index: usize,
        id: usize,
        rows: usize,
    },
    #[error("node {node} ({op}): non-finite value produced")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("input '{0}' not bound before evaluation")]
    UnboundInput(String),
    #[error("no input named '{0}' in graph")]
    UnknownInput(String),
    #[error("backward target node {0} is not scalar")]
    NonScalarLoss(NodeId),
    #[error("cross-entropy has no trainable targets (empty loss mask)")]
    NoTrainableTargets,
    #[error("graph has not been evaluated; call evaluate before backward")]
    NotEvaluated,
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Parameter(String),
    Constant,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Embedding { table: NodeId, ids: Vec<usize> },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { x: NodeId },
    Dropout { x: NodeId, p: f64 },
    Reshape { x: NodeId },
    Transpose { x: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    RotatePairs { x: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
    Sum { x: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::Constant => "constant",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Embedding { .. } => "embedding",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::RotatePairs { .. } => "rotate_pairs",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

/// Whether dropout layers are live. Everything else is mode-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<T: Scalar> {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Option<Tensor<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<NodeId>,
    input_ids: HashMap<String, NodeId>,
    mode: Mode,
    dropout_seed: u64,
    eval_count: u64,
    dropout_masks: Vec<Option<Vec<T>>>,
    check_finite: bool,
    evaluated: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            input_ids: HashMap::new(),
            mode,
            dropout_seed: 0,
            eval_count: 0,
            dropout_masks: Vec::new(),
            check_finite: cfg!(debug_assertions),
            evaluated: false,
        }
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    /// Override the debug-mode finiteness scan.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor<T>>) -> NodeId {
        let id = self.ops.len();
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(value);
        self.grads.push(None);
        self.dropout_masks.push(None);
        id
    }

    fn mismatch(&self, op: &'static str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch {
            node: self.ops.len(),
            op,
            detail,
        }
    }

    // ---- leaf nodes -------------------------------------------------------

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Input(name.to_string()), shape.to_vec(), None);
        self.input_ids.insert(name.to_string(), id);
        id
    }

    pub fn parameter(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Parameter(name.to_string()), shape, Some(value));
        self.params.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::Matmul { a, b }, shape, None))
    }

    /// Elementwise add; `b` may also be a row vector broadcast over rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.broadcast_shape("add", a, b)?;
        Ok(self.push(Op::Add { a, b }, shape, None))
    }

    /// Elementwise multiply; `b` may be a broadcast row vector.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.broadcast_shape("mul", a, b)?;
        Ok(self.push(Op::Mul { a, b }, shape, None))
    }

    fn broadcast_shape(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>, NumericsError> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        let ok = sa == sb || (is_row_vector(sb) && row_len(sb) == last_dim(sa));
        if !ok {
            return Err(self.mismatch(name, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.clone())
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shapes[x].clone();
        self.push(Op::Scale { x, factor }, shape, None)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let st = &self.shapes[table];
        if st.len() != 2 {
            return Err(self.mismatch("embedding", format!("table shape {st:?}")));
        }
        let rows = st[0];
        let dim = st[1];
        if let Some((index, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= rows) {
            return Err(NumericsError::EmbeddingIdOutOfRange {
                node: self.ops.len(),
                index,
                id,
                rows,
            });
        }
        let shape = vec![ids.len(), dim];
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            shape,
            None,
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let s = &self.shapes[x];
        if s.is_empty() || s.len() > 2 {
            return Err(self.mismatch("softmax", format!("{s:?}")));
        }
        let shape = s.clone();
        Ok(self.push(Op::Softmax { x }, shape, None))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, NumericsError> {
        let n = last_dim(&self.shapes[x]);
        if row_len(&self.shapes[gain]) != n || row_len(&self.shapes[bias]) != n {
            return Err(self.mismatch(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    self.shapes[x], self.shapes[gain], self.shapes[bias]
                ),
            ));
        }
        let shape = self.shapes[x].clone();
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, None))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x].clone();
        self.push(Op::Gelu { x }, shape, None)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(self.mismatch("dropout", format!("p = {p} outside [0, 1)")));
        }
        let shape = self.shapes[x].clone();
        Ok(self.push(Op::Dropout { x, p }, shape, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let len: usize = self.shapes[x].iter().product();
        if shape.iter().product::<usize>() != len {
            return Err(self.mismatch(
                "reshape",
                format!("{:?} -> {:?}", self.shapes[x], shape),
            ));
        }
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), None))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let s = &self.shapes[x];
        if s.len() != 2 {
            return Err(self.mismatch("transpose", format!("{s:?}")));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose { x }, shape, None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(self.mismatch("concat_cols", "no parts".into()));
        }
        let m = self.shapes[parts[0]][0];
        let mut total = 0;
        for &p in parts {
            let s = &self.shapes[p];
            if s.len() != 2 || s[0] != m {
                return Err(self.mismatch("concat_cols", format!("part shape {s:?}")));
            }
            total += s[1];
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![m, total],
            None,
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let s = &self.shapes[x];
        if s.len() != 2 || start + len > s[1] {
            return Err(self.mismatch(
                "slice_cols",
                format!("{s:?} sliced at {start}..{}", start + len),
            ));
        }
        let shape = vec![s[0], len];
        Ok(self.push(Op::SliceCols { x, start, len }, shape, None))
    }

    /// Maps each pair (x0, x1) to (-x1, x0); the 90-degree building block of
    /// rotary position encoding.
    pub fn rotate_pairs(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let n = last_dim(&self.shapes[x]);
        if n % 2 != 0 {
            return Err(self.mismatch("rotate_pairs", format!("odd last dim {n}")));
        }
        let shape = self.shapes[x].clone();
        Ok(self.push(Op::RotatePairs { x }, shape, None))
    }

    /// Mean over masked rows of -log softmax(logits)[target].
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, NumericsError> {
        let s = &self.shapes[logits];
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(self.mismatch(
                "cross_entropy",
                format!("logits {s:?}, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::NoTrainableTargets);
        }
        let vocab = s[1];
        for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if m && t >= vocab {
                return Err(NumericsError::EmbeddingIdOutOfRange {
                    node: self.ops.len(),
                    index: i,
                    id: t,
                    rows: vocab,
                });
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            vec![1],
            None,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }, vec![1], None)
    }

    // ---- execution --------------------------------------------------------

    /// Bind the named inputs and run the forward pass, returning the
    /// requested outputs. Deterministic given inputs, parameters, and the
    /// dropout seed.
    pub fn evaluate(
        &mut self,
        inputs: &[(&str, Tensor<T>)],
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor<T>>, NumericsError> {
        for (name, tensor) in inputs {
            let &id = self
                .input_ids
                .get(*name)
                .ok_or_else(|| NumericsError::UnknownInput((*name).to_string()))?;
            if tensor.shape() != self.shapes[id].as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    node: id,
                    op: "input",
                    detail: format!(
                        "bound {:?}, declared {:?}",
                        tensor.shape(),
                        self.shapes[id]
                    ),
                });
            }
            self.values[id] = Some(tensor.clone());
        }
        self.eval_count += 1;
        for id in 0..self.ops.len() {
            self.forward_node(id)?;
        }
        self.evaluated = true;
        outputs
            .iter()
            .map(|&id| {
                self.values[id]
                    .clone()
                    .ok_or(NumericsError::NotEvaluated)
            })
            .collect()
    }

    fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("value computed in order")
    }

    fn forward_node(&mut self, id: NodeId) -> Result<(), NumericsError> {
        let op = self.ops[id].clone();
        let out = match &op {
            Op::Input(name) => {
                if self.values[id].is_none() {
                    return Err(NumericsError::UnboundInput(name.clone()));
                }
                return Ok(());
            }
            Op::Parameter(_) | Op::Constant => return Ok(()),
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut out = Tensor::zeros(&[m, n]);
                matmul_nn_acc(out.data_mut(), ta.data(), tb.data(), m, k, n);
                out
            }
            Op::Add { a, b } => broadcast_zip(self.value(*a), self.value(*b), |x, y| x + y),
            Op::Mul { a, b } => broadcast_zip(self.value(*a), self.value(*b), |x, y| x * y),
            Op::Scale { x, factor } => {
                let f = real::<T>(*factor);
                self.value(*x).map(|v| v * f)
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let dim = t.cols();
                let mut out = Tensor::zeros(&[ids.len(), dim]);
                for (i, &id_) in ids.iter().enumerate() {
                    out.row_mut(i).copy_from_slice(t.row(id_));
                }
                out
            }
            Op::Softmax { x } => softmax_rows(self.value(*x)),
            Op::LayerNorm { x, gain, bias, eps } => {
                layer_norm_rows(self.value(*x), self.value(*gain), self.value(*bias), *eps)
            }
            Op::Gelu { x } => self.value(*x).map(gelu_tanh),
            Op::Dropout { x, p } => {
                if self.mode == Mode::Eval || *p == 0.0 {
                    self.dropout_masks[id] = None;
                    self.value(*x).clone()
                } else {
                    let seed = self
                        .dropout_seed
                        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                        .wrapping_add(id as u64)
                        .wrapping_add(self.eval_count << 32);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let keep = 1.0 - *p;
                    let scale = real::<T>(1.0 / keep);
                    let x_t = self.value(*x);
                    let mask: Vec<T> = (0..x_t.len())
                        .map(|_| {
                            if rng.random_bool(keep) {
                                scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let data = x_t
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(&v, &m)| v * m)
                        .collect();
                    let out = Tensor::new(x_t.shape().to_vec(), data);
                    self.dropout_masks[id] = Some(mask);
                    out
                }
            }
            Op::Reshape { x } => self.value(*x).reshaped(self.shapes[id].clone()),
            Op::Transpose { x } => self.value(*x).transposed(),
            Op::ConcatCols { parts } => {
                let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
                let m = tensors[0].rows();
                let total: usize = tensors.iter().map(|t| t.cols()).sum();
                let mut out = Tensor::zeros(&[m, total]);
                for i in 0..m {
                    let row = out.row_mut(i);
                    let mut at = 0;
                    for t in &tensors {
                        let c = t.cols();
                        row[at..at + c].copy_from_slice(t.row(i));
                        at += c;
                    }
                }
                out
            }
            Op::SliceCols { x, start, len } => {
                let t = self.value(*x);
                let m = t.rows();
                let mut out = Tensor::zeros(&[m, *len]);
                for i in 0..m {
                    out.row_mut(i)
                        .copy_from_slice(&t.row(i)[*start..*start + *len]);
                }
                out
            }
            Op::RotatePairs { x } => {
                let t = self.value(*x);
                let mut out = Tensor::zeros(t.shape());
                let (src, dst) = (t.data(), out.data_mut());
                for k in (0..src.len()).step_by(2) {
                    dst[k] = -src[k + 1];
                    dst[k + 1] = src[k];
                }
                out
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let l = self.value(*logits);
                let count = mask.iter().filter(|&&m| m).count();
                let mut total = T::zero();
                for i in 0..l.rows() {
                    if !mask[i] {
                        continue;
                    }
                    total += nll_row(l.row(i), targets[i]);
                }
                Tensor::scalar(total / real::<T>(count as f64))
            }
            Op::Sum { x } => {
                let mut acc = T::zero();
                for &v in self.value(*x).data() {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
        };
        if self.check_finite && !out.all_finite() {
            return Err(NumericsError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.values[id] = Some(out);
        Ok(())
    }

    /// Reverse pass from a scalar loss. Parameters not reached by the loss
    /// end up with zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if !self.evaluated {
            return Err(NumericsError::NotEvaluated);
        }
        if self.shapes[loss].iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarLoss(loss));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(Tensor::filled(&self.shapes[loss], T::one()));

        for id in (0..self.ops.len()).rev() {
            let Some(grad_out) = self.grads[id].take() else {
                continue;
            };
            let op = self.ops[id].clone();
            match &op {
                Op::Input(_) | Op::Parameter(_) | Op::Constant => {
                    self.grads[id] = Some(grad_out);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let mut ga = Tensor::zeros(&[m, k]);
                    matmul_nt_acc(ga.data_mut(), grad_out.data(), tb.data(), m, n, k);
                    let mut gb = Tensor::zeros(&[k, n]);
                    matmul_tn_acc(gb.data_mut(), ta.data(), grad_out.data(), k, m, n);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::Add { a, b } => {
                    self.accumulate(*a, grad_out.clone());
                    let gb = reduce_to_shape(&grad_out, &self.shapes[*b]);
                    self.accumulate(*b, gb);
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                    let ga = broadcast_zip(&grad_out, &tb, |g, y| g * y);
                    let gb_full = broadcast_zip(&grad_out, &ta, |g, x| g * x);
                    let gb = reduce_to_shape(&gb_full, &self.shapes[*b]);
                    self.accumulate(*a, ga);
                    self.accumulate(*b, gb);
                }
                Op::Scale { x, factor } => {
                    let f = real::<T>(*factor);
                    self.accumulate(*x, grad_out.map(|g| g * f));
                }
                Op::Embedding { table, ids } => {
                    let mut gt = Tensor::zeros(&self.shapes[*table]);
                    let dim = gt.cols();
                    for (i, &id_) in ids.iter().enumerate() {
                        let src = grad_out.row(i);
                        let dst = &mut gt.row_mut(id_)[..dim];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    self.accumulate(*table, gt);
                }
                Op::Softmax { x } => {
                    let y = self.value(id).clone();
                    let mut gx = Tensor::zeros(y.shape());
                    let n = y.cols();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &grad_out.data()[i * n..(i + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += gr[j] * yr[j];
                        }
                        let out = gx.row_mut(i);
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(*x, gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (gx, ggain, gbias) = layer_norm_backward(
                        self.value(*x),
                        self.value(*gain),
                        &grad_out,
                        *eps,
                    );
                    self.accumulate(*x, gx);
                    let ggain = reduce_to_shape(&ggain, &self.shapes[*gain]);
                    let gbias = reduce_to_shape(&gbias, &self.shapes[*bias]);
                    self.accumulate(*gain, ggain);
                    self.accumulate(*bias, gbias);
                }
                Op::Gelu { x } => {
                    let xt = self.value(*x).clone();
                    let data = xt
                        .data()
                        .iter()
                        .zip(grad_out.data())
                        .map(|(&v, &g)| g * gelu_tanh_deriv(v))
                        .collect();
                    self.accumulate(*x, Tensor::new(xt.shape().to_vec(), data));
                }
                Op::Dropout { x, .. } => {
                    let gx = match &self.dropout_masks[id] {
                        None => grad_out.clone(),
                        Some(mask) => {
                            let data = grad_out
                                .data()
                                .iter()
                                .zip(mask)
                                .map(|(&g, &m)| g * m)
                                .collect();
                            Tensor::new(grad_out.shape().to_vec(), data)
                        }
                    };
                    self.accumulate(*x, gx);
                }
                Op::Reshape { x } => {
                    let gx = grad_out.reshaped(self.shapes[*x].clone());
                    self.accumulate(*x, gx);
                }
                Op::Transpose { x } => {
                    self.accumulate(*x, grad_out.transposed());
                }
                Op::ConcatCols { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let c = self.shapes[p][1];
                        let m = self.shapes[p][0];
                        let mut gp = Tensor::zeros(&[m, c]);
                        for i in 0..m {
                            gp.row_mut(i)
                                .copy_from_slice(&grad_out.row(i)[at..at + c]);
                        }
                        at += c;
                        self.accumulate(p, gp);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Tensor::zeros(&self.shapes[*x]);
                    for i in 0..gx.rows() {
                        gx.row_mut(i)[*start..*start + *len].copy_from_slice(grad_out.row(i));
                    }
                    self.accumulate(*x, gx);
                }
                Op::RotatePairs { x } => {
                    // Transpose of (x0, x1) -> (-x1, x0): (g0, g1) -> (g1, -g0).
                    let mut gx = Tensor::zeros(&self.shapes[*x]);
                    let (g, dst) = (grad_out.data(), gx.data_mut());
                    for k in (0..g.len()).step_by(2) {
                        dst[k] = g[k + 1];
                        dst[k + 1] = -g[k];
                    }
                    self.accumulate(*x, gx);
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let l = self.value(*logits).clone();
                    let count = mask.iter().filter(|&&m| m).count();
                    let inv = grad_out.scalar_value() / real::<T>(count as f64);
                    let mut gl = Tensor::zeros(l.shape());
                    for i in 0..l.rows() {
                        if !mask[i] {
                            continue;
                        }
                        let probs = softmax_row(l.row(i));
                        let out = gl.row_mut(i);
                        for (j, p) in probs.iter().enumerate() {
                            out[j] = *p * inv;
                        }
                        out[targets[i]] -= inv;
                    }
                    self.accumulate(*logits, gl);
                }
                Op::Sum { x } => {
                    let g = grad_out.scalar_value();
                    self.accumulate(*x, Tensor::filled(&self.shapes[*x], g));
                }
            }
        }

        // Unused parameters still get a (zero) gradient of matching shape.
        for &p in &self.params.clone() {
            if self.grads[p].is_none() {
                self.grads[p] = Some(Tensor::zeros(&self.shapes[p]));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor<T>) {
        match self.grads[id].as_mut() {
            Some(existing) => {
                for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                    *d += *s;
                }
            }
            None => self.grads[id] = Some(g),
        }
    }

    // ---- parameter access -------------------------------------------------

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    pub fn param_name(&self, id: NodeId) -> Option<&str> {
        match &self.ops[id] {
            Op::Parameter(name) => Some(name),
            _ => None,
        }
    }

    pub fn param_id(&self, name: &str) -> Result<NodeId, NumericsError> {
        self.params
            .iter()
            .copied()
            .find(|&p| self.param_name(p) == Some(name))
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn param_value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("parameter value")
    }

    pub fn param_value_mut(&mut self, id: NodeId) -> &mut Tensor<T> {
        self.values[id].as_mut().expect("parameter value")
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }

    /// Named parameter gradients after a backward pass.
    pub fn named_grads(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|&p| {
                let name = self.param_name(p).unwrap_or_default().to_string();
                let grad = self
                    .grads[p]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[p]));
                (name, grad)
            })
            .collect()
    }
}

fn is_row_vector(shape: &[usize]) -> bool {
    shape.len() == 1 || (shape.len() == 2 && shape[0] == 1)
}

fn row_len(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&0)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&0)
}

/// Apply `f` pairwise, broadcasting `b` over rows of `a` when `b` is a row
/// vector. Result takes `a`'s shape.
fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let n = b.len();
    let mut out = Tensor::zeros(a.shape());
    for (i, chunk) in a.data().chunks(n).enumerate() {
        let dst = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            dst[j] = f(chunk[j], b.data()[j]);
        }
    }
    out
}

/// Column-sum a gradient down to a broadcast row-vector shape if needed.
fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let n = shape.iter().product::<usize>();
    let mut out = Tensor::zeros(shape);
    for chunk in grad.data().chunks(n) {
        for (d, s) in out.data_mut().iter_mut().zip(chunk) {
            *d += *s;
        }
    }
    out
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for v in &out {
        sum += *v;
    }
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for chunk in x.data().chunks(n) {
        data.extend(softmax_row(chunk));
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// -log softmax(row)[target], computed through a stable log-sum-exp.
fn nll_row<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln() - row[target]
}

fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let n = x.cols();
    let inv_n = real::<T>(1.0 / n as f64);
    let epst = real::<T>(eps);
    let mut out = Tensor::zeros(x.shape());
    for (i, row) in x.data().chunks(n).enumerate() {
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = (var + epst).sqrt().recip();
        let dst = &mut out.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            dst[j] = (row[j] - mean) * inv_std * gain.data()[j] + bias.data()[j];
        }
    }
    out
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.cols();
    let inv_n = real::<T>(1.0 / n as f64);
    let epst = real::<T>(eps);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggain = Tensor::zeros(&[n]);
    let mut gbias = Tensor::zeros(&[n]);
    for (i, row) in x.data().chunks(n).enumerate() {
        let g_row = &grad_out.data()[i * n..(i + 1) * n];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let inv_std = (var + epst).sqrt().recip();

        // xhat_j = (x_j - mean) * inv_std
        // dx = inv_std * (gy*g - mean(gy*g) - xhat * mean(gy*g*xhat))
        let mut mean_gg = T::zero();
        let mut mean_ggx = T::zero();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let gg = g_row[j] * gain.data()[j];
            mean_gg += gg;
            mean_ggx += gg * xhat;
            ggain.data_mut()[j] += g_row[j] * xhat;
            gbias.data_mut()[j] += g_row[j];
        }
        mean_gg = mean_gg * inv_n;
        mean_ggx = mean_ggx * inv_n;
        let dst = &mut gx.data_mut()[i * n..(i + 1) * n];
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            let gg = g_row[j] * gain.data()[j];
            dst[j] = (gg - mean_gg - xhat * mean_ggx) * inv_std;
        }
    }
    (gx, ggain, gbias)
}

fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = real::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = real::<T>(0.044715);
    let half = real::<T>(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_tanh_deriv<T: Scalar>(x: T) -> T {
    let c = real::<T>(0.797_884_560_802_865_4);
    let k = real::<T>(0.044715);
    let half = real::<T>(0.5);
    let three = real::<T>(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}
