//! Reverse-mode autodiff tape.
//!
//! Ops append nodes to the tape; `backward` runs a single reverse sweep in
//! node-creation order, so gradient accumulation order is fixed and the same
//! graph always produces bit-identical gradients. Every op checks its result
//! for NaN/Inf and errors with the op name on failure.

use std::rc::Rc;

use super::{topk_binary_mask, Tensor};
use crate::error::{EcfError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-output-row aggregation plan: `(source_row, weight)` pairs.
pub type RowGroups = Rc<Vec<Vec<(u32, f64)>>>;

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    RowCosine {
        a: Var,
        b: Var,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    RowSoftmax {
        x: Var,
        temp: f64,
    },
    RowLogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    GatherRows {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    AggregateRows {
        x: Var,
        groups: RowGroups,
    },
    Detach(Var),
    /// Forward: exact binary top-k mask. Backward: tempered-softmax Jacobian.
    StraightThroughTopk {
        scores: Var,
        temp: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Growable computation record. One tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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
        }
    }

    /// Tracked input: receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Untracked input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("constant")?;
        Ok(self.push(value, Op::Constant, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar_value on non-scalar node");
        t.data()[0]
    }

    /// Gradient of the last `backward` root w.r.t. `v`. None if the node
    /// is untracked or unreached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    // ---- elementwise binary ops (rows/cols broadcast when one dim is 1) ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_zip("add", a, b, |x, y| x + y)?;
        self.push_op(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_zip("sub", a, b, |x, y| x - y)?;
        self.push_op(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_zip("mul", a, b, |x, y| x * y)?;
        self.push_op(out, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_zip("div", a, b, |x, y| x / y)?;
        self.push_op(out, Op::Div(a, b), "div")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v += s);
        self.push_op(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push_op(out, Op::MulScalar(a, s), "mul_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = -*v);
        self.push_op(out, Op::Neg(a), "neg")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(EcfError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", ar, ac, br, bc),
            });
        }
        let mut out = Tensor::zeros(ar, bc);
        matmul_nn_acc(self.value(a), self.value(b), &mut out);
        self.push_op(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transposed();
        self.push_op(out, Op::Transpose(a), "transpose")
    }

    /// Pairwise cosine of rows: (n x d, z x d) -> n x z. Norms are guarded
    /// with +1e-12 so zero rows stay finite.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ad) = self.value(a).shape();
        let (br, bd) = self.value(b).shape();
        if ad != bd {
            return Err(EcfError::ShapeMismatch {
                op: "row_cosine",
                detail: format!("{}x{} vs {}x{}", ar, ad, br, bd),
            });
        }
        let norm_a = guarded_row_norms(self.value(a));
        let norm_b = guarded_row_norms(self.value(b));
        let mut out = Tensor::zeros(ar, br);
        for i in 0..ar {
            let ra = self.value(a).row(i);
            for c in 0..br {
                let v = dot(ra, self.value(b).row(c)) / (norm_a[i] * norm_b[c]);
                out.set(i, c, v);
            }
        }
        self.push_op(
            out,
            Op::RowCosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            "row_cosine",
        )
    }

    // ---- elementwise unary ops ----

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, sigmoid);
        self.push_op(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, f64::exp);
        self.push_op(out, Op::Exp(a), "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, f64::ln);
        self.push_op(out, Op::Ln(a), "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, f64::sqrt);
        self.push_op(out, Op::Sqrt(a), "sqrt")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |v| v.max(0.0));
        self.push_op(out, Op::Relu(a), "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, f64::abs);
        self.push_op(out, Op::Abs(a), "abs")
    }

    /// ln(1 + e^x), computed as max(x,0) + ln1p(e^-|x|) for stability.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.map_unary(a, |v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push_op(out, Op::Softplus(a), "softplus")
    }

    // ---- row-wise softmax family ----

    /// Row softmax of `x / temp`. Temperature must be strictly positive.
    pub fn row_softmax(&mut self, x: Var, temp: f64) -> Result<Var> {
        check_temp(temp)?;
        let out = softmax_forward(self.value(x), temp);
        self.push_op(out, Op::RowSoftmax { x, temp }, "row_softmax")
    }

    /// Numerically stable log of the row softmax (temperature 1).
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut out = Tensor::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            let row = v.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for (c, &x) in row.iter().enumerate() {
                out.set(r, c, x - mx - lse);
            }
        }
        self.push_op(out, Op::RowLogSoftmax(x), "row_log_softmax")
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// n x k -> n x 1, summing each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            out.data_mut()[r] = v.row(r).iter().sum();
        }
        self.push_op(out, Op::RowSum(a), "row_sum")
    }

    /// n x k -> n x 1, averaging each row.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols() as f64;
        let mut out = Tensor::zeros(v.rows(), 1);
        for r in 0..v.rows() {
            out.data_mut()[r] = v.row(r).iter().sum::<f64>() / cols;
        }
        self.push_op(out, Op::RowMean(a), "row_mean")
    }

    // ---- structural ops ----

    /// Picks rows by index; duplicates allowed (gradients accumulate).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(EcfError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {} out of {}", bad, v.rows()),
            });
        }
        let mut out = Tensor::zeros(idx.len(), v.cols());
        for (o, &src) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(v.row(src));
        }
        self.push_op(
            out,
            Op::GatherRows {
                x,
                idx: Rc::new(idx),
            },
            "gather_rows",
        )
    }

    /// Weighted sums of rows: output row r = sum of w * x[src] over
    /// `groups[r]`. An empty group yields a zero row.
    pub fn aggregate_rows(&mut self, x: Var, groups: RowGroups) -> Result<Var> {
        let v = self.value(x);
        for g in groups.iter() {
            if let Some(&(bad, _)) = g.iter().find(|&&(i, _)| i as usize >= v.rows()) {
                return Err(EcfError::ShapeMismatch {
                    op: "aggregate_rows",
                    detail: format!("row {} out of {}", bad, v.rows()),
                });
            }
        }
        let mut out = Tensor::zeros(groups.len(), v.cols());
        for (r, g) in groups.iter().enumerate() {
            let orow = out.row_mut(r);
            for &(src, w) in g {
                for (o, &xv) in orow.iter_mut().zip(v.row(src as usize)) {
                    *o += w * xv;
                }
            }
        }
        self.push_op(out, Op::AggregateRows { x, groups }, "aggregate_rows")
    }

    /// Identity forward; gradient flow stops here.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).clone();
        Ok(self.push(out, Op::Detach(a), false))
    }

    /// Hard top-k row mask (exactly k ones, ties toward the lower index).
    /// Backward substitutes the Jacobian of the tempered row softmax.
    pub fn straight_through_topk(&mut self, scores: Var, k: usize, temp: f64) -> Result<Var> {
        check_temp(temp)?;
        let mask = topk_binary_mask(self.value(scores), k)?;
        self.push_op(
            mask,
            Op::StraightThroughTopk { scores, temp },
            "straight_through_topk",
        )
    }

    // ---- backward ----

    /// Reverse sweep from a 1x1 root. Overwrites any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(EcfError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be 1x1, got {:?}", self.value(root).shape()),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    // ---- forward helpers ----

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = f(*x));
        out
    }

    fn broadcast_zip(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        let shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let mut out = Tensor::zeros(shape.0, shape.1);
        broadcast_each(shape, av, bv, |r, c, x, y| out.set(r, c, f(x, y)));
        Ok(out)
    }
}

type Grads = [Option<Tensor>];

fn propagate(nodes: &[Node], grads: &mut Grads, node: usize, g: &Tensor) {
    let value = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &nodes[node].op {
        Op::Leaf | Op::Constant | Op::Detach(_) => {}
        &Op::Add(a, b) => {
            accumulate_reduced(nodes, grads, a, g, 1.0);
            accumulate_reduced(nodes, grads, b, g, 1.0);
        }
        &Op::Sub(a, b) => {
            accumulate_reduced(nodes, grads, a, g, 1.0);
            accumulate_reduced(nodes, grads, b, g, -1.0);
        }
        &Op::Mul(a, b) => {
            if needs(nodes, a) {
                let ga = bcast_partial(g, value(a), value(b), |_, bv| bv, true);
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let gb = bcast_partial(g, value(a), value(b), |av, _| av, false);
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Div(a, b) => {
            if needs(nodes, a) {
                let ga = bcast_partial(g, value(a), value(b), |_, bv| 1.0 / bv, true);
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let gb = bcast_partial(g, value(a), value(b), |av, bv| -av / (bv * bv), false);
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::AddScalar(a) => accumulate_reduced(nodes, grads, a, g, 1.0),
        &Op::MulScalar(a, s) => accumulate_reduced(nodes, grads, a, g, s),
        &Op::Neg(a) => accumulate_reduced(nodes, grads, a, g, -1.0),
        &Op::MatMul(a, b) => {
            if needs(nodes, a) {
                let mut ga = Tensor::zeros(value(a).rows(), value(a).cols());
                matmul_nt_acc(g, value(b), &mut ga);
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let mut gb = Tensor::zeros(value(b).rows(), value(b).cols());
                matmul_tn_acc(value(a), g, &mut gb);
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Transpose(a) => {
            let ga = g.transposed();
            accumulate(nodes, grads, a, ga);
        }
        Op::RowCosine { a, b, norm_a, norm_b } => {
            let (a, b) = (*a, *b);
            let av = value(a);
            let bv = value(b);
            let cos = &nodes[node].value;
            if needs(nodes, a) {
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let grow = g.row(i);
                    let crow = cos.row(i);
                    let garow = ga.row_mut(i);
                    let mut along = 0.0;
                    for c in 0..bv.rows() {
                        let w = grow[c] / (norm_a[i] * norm_b[c]);
                        axpy(w, bv.row(c), garow);
                        along += grow[c] * crow[c];
                    }
                    axpy(-along / (norm_a[i] * norm_a[i]), av.row(i), garow);
                }
                accumulate(nodes, grads, a, ga);
            }
            if needs(nodes, b) {
                let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                let mut along = vec![0.0; bv.rows()];
                for i in 0..av.rows() {
                    let grow = g.row(i);
                    let crow = cos.row(i);
                    for c in 0..bv.rows() {
                        let w = grow[c] / (norm_a[i] * norm_b[c]);
                        axpy(w, av.row(i), gb.row_mut(c));
                        along[c] += grow[c] * crow[c];
                    }
                }
                for c in 0..bv.rows() {
                    let scale = -along[c] / (norm_b[c] * norm_b[c]);
                    let brow: Vec<f64> = bv.row(c).to_vec();
                    axpy(scale, &brow, gb.row_mut(c));
                }
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Sigmoid(a) => {
            let y = &nodes[node].value;
            let ga = zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv));
            accumulate(nodes, grads, a, ga);
        }
        &Op::Exp(a) => {
            let y = &nodes[node].value;
            let ga = zip_map(g, y, |gv, yv| gv * yv);
            accumulate(nodes, grads, a, ga);
        }
        &Op::Ln(a) => {
            let ga = zip_map(g, value(a), |gv, xv| gv / xv);
            accumulate(nodes, grads, a, ga);
        }
        &Op::Sqrt(a) => {
            let y = &nodes[node].value;
            let ga = zip_map(g, y, |gv, yv| gv * 0.5 / yv);
            accumulate(nodes, grads, a, ga);
        }
        &Op::Relu(a) => {
            let ga = zip_map(g, value(a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
            accumulate(nodes, grads, a, ga);
        }
        &Op::Abs(a) => {
            let ga = zip_map(g, value(a), |gv, xv| gv * sign(xv));
            accumulate(nodes, grads, a, ga);
        }
        &Op::Softplus(a) => {
            let ga = zip_map(g, value(a), |gv, xv| gv * sigmoid(xv));
            accumulate(nodes, grads, a, ga);
        }
        &Op::RowSoftmax { x, temp } => {
            let s = &nodes[node].value;
            let ga = softmax_backward(g, s, temp);
            accumulate(nodes, grads, x, ga);
        }
        &Op::RowLogSoftmax(x) => {
            let l = &nodes[node].value;
            let mut ga = Tensor::zeros(l.rows(), l.cols());
            for r in 0..l.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for c in 0..l.cols() {
                    ga.set(r, c, g.get(r, c) - l.get(r, c).exp() * gsum);
                }
            }
            accumulate(nodes, grads, x, ga);
        }
        &Op::Sum(a) => {
            let (r, c) = value(a).shape();
            accumulate(nodes, grads, a, Tensor::filled(r, c, g.data()[0]));
        }
        &Op::Mean(a) => {
            let (r, c) = value(a).shape();
            let v = g.data()[0] / (r * c) as f64;
            accumulate(nodes, grads, a, Tensor::filled(r, c, v));
        }
        &Op::RowSum(a) => {
            let (r, c) = value(a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let gv = g.data()[i];
                ga.row_mut(i).iter_mut().for_each(|o| *o = gv);
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::RowMean(a) => {
            let (r, c) = value(a).shape();
            let mut ga = Tensor::zeros(r, c);
            for i in 0..r {
                let gv = g.data()[i] / c as f64;
                ga.row_mut(i).iter_mut().for_each(|o| *o = gv);
            }
            accumulate(nodes, grads, a, ga);
        }
        Op::GatherRows { x, idx } => {
            let x = *x;
            let (r, c) = value(x).shape();
            let mut ga = Tensor::zeros(r, c);
            for (o, &src) in idx.iter().enumerate() {
                axpy(1.0, g.row(o), ga.row_mut(src));
            }
            accumulate(nodes, grads, x, ga);
        }
        Op::AggregateRows { x, groups } => {
            let x = *x;
            let (r, c) = value(x).shape();
            let mut ga = Tensor::zeros(r, c);
            for (o, group) in groups.iter().enumerate() {
                for &(src, w) in group {
                    axpy(w, g.row(o), ga.row_mut(src as usize));
                }
            }
            accumulate(nodes, grads, x, ga);
        }
        &Op::StraightThroughTopk { scores, temp } => {
            let soft = softmax_forward(value(scores), temp);
            let ga = softmax_backward(g, &soft, temp);
            accumulate(nodes, grads, scores, ga);
        }
    }
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].needs_grad
}

fn accumulate(nodes: &[Node], grads: &mut Grads, v: Var, g: Tensor) {
    if !needs(nodes, v) {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Accumulates `scale * g` into `v`, summing over broadcast dims.
fn accumulate_reduced(nodes: &[Node], grads: &mut Grads, v: Var, g: &Tensor, scale: f64) {
    if !needs(nodes, v) {
        return;
    }
    let target = nodes[v.0].value.shape();
    accumulate(nodes, grads, v, reduce_to_shape(g, target, scale));
}

/// Gradient for one operand of a broadcast binary op: g * f(a, b), reduced
/// onto that operand's shape (`first` picks which).
fn bcast_partial(
    g: &Tensor,
    av: &Tensor,
    bv: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    first: bool,
) -> Tensor {
    let mut full = Tensor::zeros(g.rows(), g.cols());
    broadcast_each(g.shape(), av, bv, |r, c, x, y| {
        full.set(r, c, g.get(r, c) * f(x, y));
    });
    let target = if first { av.shape() } else { bv.shape() };
    reduce_to_shape(&full, target, 1.0)
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            vec![*a, *b]
        }
        Op::RowCosine { a, b, .. } => vec![*a, *b],
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Neg(a)
        | Op::Transpose(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::Softplus(a)
        | Op::RowLogSoftmax(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowSum(a)
        | Op::RowMean(a)
        | Op::Detach(a) => vec![*a],
        Op::RowSoftmax { x, .. }
        | Op::GatherRows { x, .. }
        | Op::AggregateRows { x, .. }
        | Op::StraightThroughTopk { scores: x, .. } => vec![*x],
    }
}

fn check_temp(temp: f64) -> Result<()> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(EcfError::Config(format!(
            "temperature must be strictly positive, got {}",
            temp
        )));
    }
    Ok(())
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(EcfError::ShapeMismatch {
            op,
            detail: format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1),
        }),
    }
}

fn broadcast_each(
    shape: (usize, usize),
    a: &Tensor,
    b: &Tensor,
    mut f: impl FnMut(usize, usize, f64, f64),
) {
    for r in 0..shape.0 {
        let ar = if a.rows() == 1 { 0 } else { r };
        let br = if b.rows() == 1 { 0 } else { r };
        for c in 0..shape.1 {
            let ac = if a.cols() == 1 { 0 } else { c };
            let bc = if b.cols() == 1 { 0 } else { c };
            f(r, c, a.get(ar, ac), b.get(br, bc));
        }
    }
}

/// Sums `g` over any dim where `target` is 1 and scales by `scale`.
fn reduce_to_shape(g: &Tensor, target: (usize, usize), scale: f64) -> Tensor {
    let mut out = Tensor::zeros(target.0, target.1);
    for r in 0..g.rows() {
        let tr = if target.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let tc = if target.1 == 1 { 0 } else { c };
            let v = out.get(tr, tc) + scale * g.get(r, c);
            out.set(tr, tc, v);
        }
    }
    out
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), other.shape());
    let mut out = Tensor::zeros(g.rows(), g.cols());
    for ((o, &gv), &xv) in out.data_mut().iter_mut().zip(g.data()).zip(other.data()) {
        *o = f(gv, xv);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(w: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += w * v;
    }
}

fn guarded_row_norms(t: &Tensor) -> Vec<f64> {
    const NORM_GUARD: f64 = 1e-12;
    (0..t.rows())
        .map(|i| dot(t.row(i), t.row(i)).sqrt() + NORM_GUARD)
        .collect()
}

fn softmax_forward(x: &Tensor, temp: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = ((v - mx) / temp).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
}

fn softmax_backward(g: &Tensor, soft: &Tensor, temp: f64) -> Tensor {
    let mut out = Tensor::zeros(soft.rows(), soft.cols());
    for r in 0..soft.rows() {
        let inner: f64 = g
            .row(r)
            .iter()
            .zip(soft.row(r))
            .map(|(&gv, &sv)| gv * sv)
            .sum();
        let orow = out.row_mut(r);
        for ((o, &gv), &sv) in orow.iter_mut().zip(g.row(r)).zip(soft.row(r)) {
            *o = sv * (gv - inner) / temp;
        }
    }
    out
}

// ---- raw matmul kernels (accumulating) ----

/// out += a * b
fn matmul_nn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k) = a.shape();
    let m = b.cols();
    debug_assert_eq!(out.shape(), (n, m));
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av != 0.0 {
                axpy(av, b.row(p), orow);
            }
        }
    }
}

/// out += a * b^T
fn matmul_nt_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let n = a.rows();
    let k = b.rows();
    debug_assert_eq!(a.cols(), b.cols());
    debug_assert_eq!(out.shape(), (n, k));
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, o) in orow.iter_mut().enumerate().take(k) {
            *o += dot(arow, b.row(p));
        }
    }
}

/// out += a^T * b
fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (n, k) = a.shape();
    let m = b.cols();
    debug_assert_eq!(out.shape(), (k, m));
    for i in 0..n {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av != 0.0 {
                axpy(av, brow, out.row_mut(p));
            }
        }
    }
    let _ = m;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_forward_matches_hand_result() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape
            .leaf(t(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]))
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3)).unwrap();
        let b = tape.leaf(Tensor::zeros(2, 2)).unwrap();
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn row_cosine_of_row_with_itself_is_one() {
        let mut tape = Tape::new();
        let v = tape
            .leaf(t(2, 3, &[0.3, -0.2, 0.9, 1.5, 0.1, -0.4]))
            .unwrap();
        let c = tape.row_cosine(v, v).unwrap();
        assert!((tape.value(c).get(0, 0) - 1.0).abs() < 1e-9);
        assert!((tape.value(c).get(1, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn row_cosine_of_orthogonal_rows_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 0.0])).unwrap();
        let b = tape.leaf(t(1, 2, &[0.0, 2.5])).unwrap();
        let c = tape.row_cosine(a, b).unwrap();
        assert!(tape.value(c).get(0, 0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(t(2, 3, &[0.1, 5.0, -2.0, 100.0, 100.0, 99.0]))
            .unwrap();
        let s = tape.row_softmax(x, 2.0).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 3)).unwrap();
        assert!(tape.row_softmax(x, 0.0).is_err());
        assert!(tape.row_softmax(x, -1.0).is_err());
    }

    #[test]
    fn ln_of_zero_is_rejected_as_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 0.0])).unwrap();
        assert!(matches!(
            tape.ln(x),
            Err(EcfError::NonFinite { op: "ln" })
        ));
    }

    #[test]
    fn straight_through_forward_is_exactly_binary() {
        let mut tape = Tape::new();
        let s = tape
            .leaf(t(2, 4, &[0.9, 0.1, 0.5, 0.3, -1.0, -2.0, -0.5, -0.1]))
            .unwrap();
        let m = tape.straight_through_topk(s, 2, 2.0).unwrap();
        assert_eq!(
            tape.value(m).data(),
            &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn straight_through_rejects_zero_k() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(1, 3)).unwrap();
        assert!(tape.straight_through_topk(s, 0, 2.0).is_err());
    }

    #[test]
    fn straight_through_backward_matches_softmax_jacobian() {
        // d/ds sum(mask * w) must equal d/ds sum(softmax(s/T) * w).
        let s0 = t(1, 3, &[0.2, -0.4, 0.7]);
        let w = t(1, 3, &[1.0, 2.0, 3.0]);
        let temp = 2.0;

        let mut tape = Tape::new();
        let s = tape.leaf(s0.clone()).unwrap();
        let wc = tape.constant(w.clone()).unwrap();
        let m = tape.straight_through_topk(s, 1, temp).unwrap();
        let prod = tape.mul(m, wc).unwrap();
        let root = tape.sum(prod).unwrap();
        tape.backward(root).unwrap();
        let st_grad = tape.grad(s).unwrap().clone();

        let mut tape2 = Tape::new();
        let s2 = tape2.leaf(s0).unwrap();
        let wc2 = tape2.constant(w).unwrap();
        let soft = tape2.row_softmax(s2, temp).unwrap();
        let prod2 = tape2.mul(soft, wc2).unwrap();
        let root2 = tape2.sum(prod2).unwrap();
        tape2.backward(root2).unwrap();
        let soft_grad = tape2.grad(s2).unwrap().clone();

        for (a, b) in st_grad.data().iter().zip(soft_grad.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        // y = x * detach(x): dy/dx must be detach(x), not 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[3.0, -2.0])).unwrap();
        let d = tape.detach(x).unwrap();
        let y = tape.mul(x, d).unwrap();
        let root = tape.sum(y).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -2.0]);
    }

    #[test]
    fn detach_composite_forward_value_and_adjoint() {
        // m_hat = soft + detach(hard - soft): forward equals hard up to
        // re-association, adjoint equals the adjoint of soft.
        let s0 = t(1, 3, &[0.6, 0.1, 0.3]);
        let mut tape = Tape::new();
        let s = tape.leaf(s0.clone()).unwrap();
        let soft = tape.row_softmax(s, 2.0).unwrap();
        let hard = tape.straight_through_topk(s, 1, 2.0).unwrap();
        let soft_stop = tape.detach(soft).unwrap();
        let diff = tape.sub(hard, soft_stop).unwrap();
        let diff_stop = tape.detach(diff).unwrap();
        let m_hat = tape.add(soft, diff_stop).unwrap();
        for i in 0..3 {
            let expect =
                tape.value(soft).data()[i] + (tape.value(hard).data()[i] - tape.value(soft).data()[i]);
            assert!((tape.value(m_hat).data()[i] - expect).abs() < 1e-15);
        }
        let root = tape.sum(m_hat).unwrap();
        tape.backward(root).unwrap();
        let got = tape.grad(s).unwrap().clone();

        let mut tape2 = Tape::new();
        let s2 = tape2.leaf(s0).unwrap();
        let soft2 = tape2.row_softmax(s2, 2.0).unwrap();
        let root2 = tape2.sum(soft2).unwrap();
        tape2.backward(root2).unwrap();
        for (a, b) in got.data().iter().zip(tape2.grad(s2).unwrap().data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_is_bit_identical_across_runs() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape
                .leaf(t(
                    3,
                    4,
                    &[
                        0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, 1.1, -1.2,
                    ],
                ))
                .unwrap();
            let b = tape
                .leaf(t(4, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]))
                .unwrap();
            let c = tape.matmul(a, b).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let sm = tape.row_softmax(s, 1.5).unwrap();
            let root = tape.sum(sm).unwrap();
            tape.backward(root).unwrap();
            (
                tape.grad(a).unwrap().clone(),
                tape.grad(b).unwrap().clone(),
            )
        };
        let (ga1, gb1) = build();
        let (ga2, gb2) = build();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // (2x3) + (1x3): the row-vector grad is the column sum of g.
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape.leaf(t(1, 3, &[10.0, 20.0, 30.0])).unwrap();
        let y = tape.add(a, b).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
        );
        let root = tape.sum(y).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3)).unwrap();
        let b = tape.leaf(Tensor::zeros(3, 2)).unwrap();
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let gathered = tape.gather_rows(x, vec![1, 1, 2]).unwrap();
        let root = tape.sum(gathered).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(3, 2)).unwrap();
        assert!(tape.gather_rows(x, vec![0, 3]).is_err());
    }

    #[test]
    fn aggregate_rows_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let groups: RowGroups = Rc::new(vec![vec![(0, 0.5), (2, 0.5)], vec![]]);
        let agg = tape.aggregate_rows(x, groups).unwrap();
        assert_eq!(tape.value(agg).data(), &[3.0, 4.0, 0.0, 0.0]);
        let root = tape.sum(agg).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[0.5, 0.5, 0.0, 0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn softplus_matches_direct_formula_in_safe_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[-2.0, 0.0, 3.0])).unwrap();
        let y = tape.softplus(x).unwrap();
        for (got, &xv) in tape.value(y).data().iter().zip(&[-2.0, 0.0, 3.0]) {
            let direct = (1.0 + f64::exp(xv)).ln();
            assert!((got - direct).abs() < 1e-12);
        }
        // Large negative input must not underflow to -inf.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 1, &[-800.0])).unwrap();
        let y = tape.softplus(x).unwrap();
        assert!(tape.value(y).data()[0] >= 0.0);
    }
}
