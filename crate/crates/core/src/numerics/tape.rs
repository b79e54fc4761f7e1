//! Define-by-run reverse-mode differentiation over [`RealMat`] values.
//!
//! Arithmetic primitives: matmul, add (optionally broadcasting a bias row), elementwise
//! mul, tanh, sigmoid, ReLU, row softmax, row layer-norm, conv2d, LSTM cell and MSE.
//! Structural helpers (scale by a constant, reshape, row concatenation, column slice)
//! only move or rescale values.
//!
//! Nodes are appended in evaluation order, so the node list is already a topological
//! order and the backward pass is a single reverse sweep.

use super::ops::{self, ConvGeom};
use super::{NumericsError, RealMat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { a: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    LstmCell { x: Var, h: Var, c: Var, w: Var, b: Var },
    Mse { pred: Var, target: Var },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::LstmCell { .. } => "lstm_cell",
            Op::Mse { .. } => "mse",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Scale { a, .. }
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows { a, .. }
            | Op::Reshape(a)
            | Op::SliceCols { a, .. } => vec![*a],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LstmCell { x, h, c, w, b } => vec![*x, *h, *c, *w, *b],
            Op::Mse { pred, target } => vec![*pred, *target],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: RealMat,
    op: Op,
    needs_grad: bool,
    is_param: bool,
    /// Op-specific forward cache (LSTM gates).
    aux: Option<RealMat>,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Adjoints of every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<(Var, RealMat)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&RealMat> {
        self.grads
            .binary_search_by_key(&var, |(v, _)| *v)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &RealMat)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for (_, g) in &mut self.grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
}

fn eval(nodes: &[Node], op: &Op) -> (RealMat, Option<RealMat>) {
    let v = |x: &Var| &nodes[x.0].value;
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul { a, b, trans_b } => {
            let out = if *trans_b {
                v(a).matmul_t(v(b))
            } else {
                v(a).matmul(v(b))
            };
            (out, None)
        }
        Op::Add { a, b } => {
            let (x, y) = (v(a), v(b));
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            let mut out = x.clone();
            for (o, y) in out.data_mut().iter_mut().zip(y.data()) {
                *o += y;
            }
            (out, None)
        }
        Op::AddBias { a, bias } => {
            let mut out = v(a).clone();
            assert_eq!(v(bias).rows(), 1, "bias must be a single row");
            ops::add_row_bias(&mut out, v(bias).data());
            (out, None)
        }
        Op::Mul { a, b } => {
            let (x, y) = (v(a), v(b));
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            let mut out = x.clone();
            for (o, y) in out.data_mut().iter_mut().zip(y.data()) {
                *o *= y;
            }
            (out, None)
        }
        Op::Scale { a, k } => (v(a).scale(*k), None),
        Op::Tanh(a) => (v(a).map(f64::tanh), None),
        Op::Sigmoid(a) => (v(a).map(ops::sigmoid), None),
        Op::Relu(a) => (v(a).map(ops::relu), None),
        Op::SoftmaxRows(a) => (ops::softmax_rows(v(a)), None),
        Op::LayerNormRows { a, eps } => (ops::layer_norm_rows(v(a), *eps), None),
        Op::Conv2d { x, w, b, geom } => (ops::conv2d(v(x), v(w), v(b).data(), geom), None),
        Op::LstmCell { x, h, c, w, b } => {
            let step = ops::lstm_cell(v(x), v(h), v(c), v(w), v(b).data());
            let n = step.h.rows();
            let hidden = step.h.cols();
            let mut out = RealMat::zeros(n, 2 * hidden);
            for r in 0..n {
                out.row_mut(r)[..hidden].copy_from_slice(step.h.row(r));
                out.row_mut(r)[hidden..].copy_from_slice(step.c.row(r));
            }
            (out, Some(step.gates))
        }
        Op::Mse { pred, target } => {
            let (p, t) = (v(pred), v(target));
            assert_eq!(p.shape(), t.shape(), "mse shape mismatch");
            (RealMat::scalar(ops::mse(p.data(), t.data())), None)
        }
        Op::Reshape(_) => unreachable!("reshape carries its own shape"),
        Op::ConcatRows(parts) => {
            let mats: Vec<&RealMat> = parts.iter().map(v).collect();
            (RealMat::vstack(&mats), None)
        }
        Op::SliceCols { .. } => unreachable!("slice carries its own width"),
    }
}

fn accumulate(slot: &mut Option<RealMat>, delta: RealMat) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: RealMat) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: RealMat) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &RealMat {
        &self.nodes[var.0].value
    }

    fn push_leaf(&mut self, value: RealMat, is_param: bool) -> Var {
        self.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: is_param,
            is_param,
            aux: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !node.value.is_finite() {
            self.first_nonfinite = Some((idx, node.op.name()));
        }
        self.nodes.push(node);
        Var(idx)
    }

    fn record(&mut self, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|x| self.nodes[x.0].needs_grad);
        let (value, aux) = eval(&self.nodes, &op);
        self.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
            aux,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul {
            a,
            b,
            trans_b: false,
        })
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Add { a, b })
    }

    /// Adds the single-row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        self.record(Op::AddBias { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.record(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.record(Op::Scale { a, k })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        self.record(Op::LayerNormRows { a, eps })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        self.record(Op::Conv2d { x, w, b, geom })
    }

    /// One LSTM step. Output is `rows × 2H` holding `[h', c']`; use
    /// [`Tape::slice_cols`] to split it.
    pub fn lstm_cell(&mut self, x: Var, h: Var, c: Var, w: Var, b: Var) -> Var {
        self.record(Op::LstmCell { x, h, c, w, b })
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        self.record(Op::Mse { pred, target })
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .reshaped(rows, cols)
            .expect("reshape size mismatch");
        let needs_grad = self.nodes[a.0].needs_grad;
        self.push(Node {
            value,
            op: Op::Reshape(a),
            needs_grad,
            is_param: false,
            aux: None,
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let src = &self.nodes[a.0].value;
        assert!(start + width <= src.cols(), "slice out of range");
        let value = RealMat::from_fn(src.rows(), width, |r, c| src.get(r, start + c));
        let needs_grad = self.nodes[a.0].needs_grad;
        self.push(Node {
            value,
            op: Op::SliceCols { a, start },
            needs_grad,
            is_param: false,
            aux: None,
        })
    }

    /// First node whose value contained NaN or ±∞, if any.
    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.first_nonfinite {
            Some((node, op)) => Err(NumericsError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    /// Re-evaluates every recorded op from the stored leaves and checks the outputs are
    /// bit-identical to the recorded ones. Returns the first mismatching node.
    pub fn replay(&self) -> Result<(), usize> {
        let mut scratch: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Reshape(a) => {
                    let src: &RealMat = &scratch[a.0].value;
                    src.clone()
                        .reshaped(node.value.rows(), node.value.cols())
                        .map_err(|_| i)?
                }
                Op::SliceCols { a, start } => {
                    let src: &RealMat = &scratch[a.0].value;
                    RealMat::from_fn(src.rows(), node.value.cols(), |r, c| src.get(r, start + c))
                }
                op => eval(&scratch, op).0,
            };
            let same = value.shape() == node.value.shape()
                && value
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(i);
            }
            scratch.push(Node {
                value,
                op: node.op.clone(),
                needs_grad: node.needs_grad,
                is_param: node.is_param,
                aux: None,
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`; returns the adjoint of every parameter leaf
    /// (zeros for parameters the loss does not depend on).
    pub fn grad(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss(loss_node.value.shape()));
        }
        self.check_finite()?;

        let mut adj: Vec<Option<RealMat>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(RealMat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop(node, &g, &mut adj);
            // Keep nothing for interior nodes.
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_param)
            .map(|(i, n)| {
                let g = adj
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| RealMat::zeros(n.value.rows(), n.value.cols()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &RealMat, adj: &mut [Option<RealMat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (am, bm) = (val(*a), val(*b));
                if self.wants(*a) {
                    // dA = G · Bᵀ  (or G · B when b is already transposed)
                    let da = if *trans_b { g.matmul(bm) } else { g.matmul_t(bm) };
                    accumulate(&mut adj[a.0], da);
                }
                if self.wants(*b) {
                    let db = if *trans_b {
                        // C = A Bᵀ  ⇒  dB = Gᵀ A
                        let mut out = RealMat::zeros(bm.rows(), bm.cols());
                        ops::gemm(
                            g.cols(),
                            g.rows(),
                            am.cols(),
                            1.0,
                            g.data(),
                            true,
                            am.data(),
                            false,
                            0.0,
                            out.data_mut(),
                        );
                        out
                    } else {
                        let mut out = RealMat::zeros(bm.rows(), bm.cols());
                        ops::gemm(
                            am.cols(),
                            am.rows(),
                            g.cols(),
                            1.0,
                            am.data(),
                            true,
                            g.data(),
                            false,
                            0.0,
                            out.data_mut(),
                        );
                        out
                    };
                    accumulate(&mut adj[b.0], db);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], g.clone());
                }
            }
            Op::AddBias { a, bias } => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], g.clone());
                }
                if self.wants(*bias) {
                    accumulate(&mut adj[bias.0], column_sums(g));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut adj[a.0], hadamard(g, val(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], hadamard(g, val(*a)));
                }
            }
            Op::Scale { a, k } => accumulate(&mut adj[a.0], g.scale(*k)),
            Op::Tanh(a) => {
                let d = zip_map(g, &node.value, |g, y| g * (1.0 - y * y));
                accumulate(&mut adj[a.0], d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |g, y| g * y * (1.0 - y));
                accumulate(&mut adj[a.0], d);
            }
            Op::Relu(a) => {
                let d = zip_map(g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                accumulate(&mut adj[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = RealMat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (o, (y, g)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = y * (g - dot);
                    }
                }
                accumulate(&mut adj[a.0], d);
            }
            Op::LayerNormRows { a, eps } => {
                let x = val(*a);
                let y = &node.value;
                let mut d = RealMat::zeros(x.rows(), x.cols());
                let n = x.cols() as f64;
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for (o, (g, y)) in d.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = inv * (g - g_mean - y * gy_mean);
                    }
                }
                accumulate(&mut adj[a.0], d);
            }
            Op::Conv2d { x, w, b, geom } => {
                if self.wants(*b) {
                    accumulate(&mut adj[b.0], column_sums(g));
                }
                let needs_x = self.wants(*x);
                let needs_w = self.wants(*w);
                if needs_w {
                    let cols = ops::im2col(val(*x), geom);
                    let mut dw = RealMat::zeros(geom.patch_len(), geom.out_c);
                    ops::gemm(
                        cols.cols(),
                        cols.rows(),
                        g.cols(),
                        1.0,
                        cols.data(),
                        true,
                        g.data(),
                        false,
                        0.0,
                        dw.data_mut(),
                    );
                    accumulate(&mut adj[w.0], dw);
                }
                if needs_x {
                    let dcols = g.matmul_t(val(*w));
                    accumulate(&mut adj[x.0], ops::col2im(&dcols, geom));
                }
            }
            Op::LstmCell { x, h, c, w, b } => {
                self.backprop_lstm(node, g, [*x, *h, *c, *w, *b], adj);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred), val(*target));
                let k = 2.0 * g.get(0, 0) / p.len() as f64;
                if self.wants(*pred) {
                    accumulate(&mut adj[pred.0], zip_map(p, t, |p, t| k * (p - t)));
                }
                if self.wants(*target) {
                    accumulate(&mut adj[target.0], zip_map(p, t, |p, t| k * (t - p)));
                }
            }
            Op::Reshape(a) => {
                let src = val(*a);
                let d = g.clone().reshaped(src.rows(), src.cols()).expect("reshape");
                accumulate(&mut adj[a.0], d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if self.wants(*p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut adj[p.0], g.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::SliceCols { a, start } => {
                let src = val(*a);
                let mut d = RealMat::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(&mut adj[a.0], d);
            }
        }
    }

    fn backprop_lstm(&self, node: &Node, g: &RealMat, ins: [Var; 5], adj: &mut [Option<RealMat>]) {
        let [x, h, c, w, b] = ins;
        let (xm, hm, cm, wm) = (
            &self.nodes[x.0].value,
            &self.nodes[h.0].value,
            &self.nodes[c.0].value,
            &self.nodes[w.0].value,
        );
        let gates = node.aux.as_ref().expect("lstm gates cached");
        let n = xm.rows();
        let hidden = hm.cols();
        let input = xm.cols();
        let mut dz = RealMat::zeros(n, 4 * hidden);
        let mut dc_prev = RealMat::zeros(n, hidden);
        for r in 0..n {
            let gr = gates.row(r);
            let out = node.value.row(r);
            let c_new = &out[hidden..];
            let (gh, gc) = (&g.row(r)[..hidden], &g.row(r)[hidden..]);
            for j in 0..hidden {
                let (ig, fg, gg, og) = (gr[j], gr[hidden + j], gr[2 * hidden + j], gr[3 * hidden + j]);
                let tc = c_new[j].tanh();
                let dc = gc[j] + gh[j] * og * (1.0 - tc * tc);
                let d_o = gh[j] * tc;
                let d_i = dc * gg;
                let d_g = dc * ig;
                let d_f = dc * cm.get(r, j);
                dc_prev.set(r, j, dc * fg);
                let dzr = dz.row_mut(r);
                dzr[j] = d_i * ig * (1.0 - ig);
                dzr[hidden + j] = d_f * fg * (1.0 - fg);
                dzr[2 * hidden + j] = d_g * (1.0 - gg * gg);
                dzr[3 * hidden + j] = d_o * og * (1.0 - og);
            }
        }
        if self.wants(c) {
            accumulate(&mut adj[c.0], dc_prev);
        }
        if self.wants(b) {
            accumulate(&mut adj[b.0], column_sums(&dz));
        }
        if self.wants(w) {
            let mut xh = RealMat::zeros(n, input + hidden);
            for r in 0..n {
                xh.row_mut(r)[..input].copy_from_slice(xm.row(r));
                xh.row_mut(r)[input..].copy_from_slice(hm.row(r));
            }
            let mut dw = RealMat::zeros(input + hidden, 4 * hidden);
            ops::gemm(
                input + hidden,
                n,
                4 * hidden,
                1.0,
                xh.data(),
                true,
                dz.data(),
                false,
                0.0,
                dw.data_mut(),
            );
            accumulate(&mut adj[w.0], dw);
        }
        if self.wants(x) || self.wants(h) {
            let dxh = dz.matmul_t(wm);
            if self.wants(x) {
                let dx = RealMat::from_fn(n, input, |r, j| dxh.get(r, j));
                accumulate(&mut adj[x.0], dx);
            }
            if self.wants(h) {
                let dh = RealMat::from_fn(n, hidden, |r, j| dxh.get(r, input + j));
                accumulate(&mut adj[h.0], dh);
            }
        }
    }
}

fn column_sums(g: &RealMat) -> RealMat {
    let mut out = RealMat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn hadamard(a: &RealMat, b: &RealMat) -> RealMat {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &RealMat, b: &RealMat, f: impl Fn(f64, f64) -> f64) -> RealMat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    RealMat::from_vec(a.rows(), a.cols(), data).expect("zip_map shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(RealMat::scalar(3.0));
        let y = t.mul(x, x);
        let g = t.grad(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn unused_param_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(RealMat::scalar(3.0));
        let p = t.param(RealMat::filled(2, 2, 1.5));
        let y = t.tanh(x);
        let g = t.grad(y).unwrap();
        assert_eq!(g.get(p).unwrap(), &RealMat::zeros(2, 2));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(RealMat::filled(2, 1, 1.0));
        let y = t.tanh(x);
        assert!(matches!(t.grad(y), Err(NumericsError::NonScalarLoss((2, 1)))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut t = Tape::new();
        let x = t.param(RealMat::scalar(f64::INFINITY));
        let z = t.constant(RealMat::scalar(0.0));
        let y = t.mul(x, z); // inf * 0 = NaN
        let loss = t.mse(y, z);
        match t.grad(loss) {
            Err(NumericsError::NonFinite { node, .. }) => assert_eq!(node, x.index()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::new();
        let a = t.param(RealMat::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3));
        let b = t.param(RealMat::from_fn(4, 2, |r, c| (r * c) as f64 * 0.1 - 0.2));
        let m = t.matmul(a, b);
        let s = t.softmax_rows(m);
        let l = t.layer_norm_rows(s, 1e-5);
        let sl = t.slice_cols(l, 1, 1);
        let c = t.concat_rows(&[sl, sl]);
        let r = t.reshape(c, 2, 3);
        let target = t.constant(RealMat::zeros(2, 3));
        let _ = t.mse(r, target);
        assert_eq!(t.replay(), Ok(()));
    }
}
