use std::cell::RefCell;

use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Deliberate backward-rule corruptions used to prove that the gradient
/// checker catches broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The sigmoid backward rule returns twice the true derivative.
    DoubleSigmoidGrad,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Affine(usize, f64),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    SumAll(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SlotScores(usize, usize),
    SlotRead(usize, usize),
    SlotUpdate {
        slots: usize,
        forget: usize,
        write: usize,
        content: usize,
    },
    StackSlots(Vec<usize>),
    RepeatBatch(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass so that a single backward pass
/// can replay them in reverse.
///
/// A tape is single-threaded and meant to live for one training step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Option<Fault>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: RefCell::default(),
            fault: Some(fault),
        }
    }

    /// Places a tensor on the tape as a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to another tape"
        );
    }

    /// Runs reverse-mode differentiation from a scalar output.
    ///
    /// Gradients accumulate additively at nodes with fan-out. Every recorded
    /// operation up to `out` is visited once, in reverse recording order.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        self.check_owner(out);
        let nodes = self.nodes.borrow();
        if nodes[out.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, got shape {:?}",
                nodes[out.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.id + 1];
        grads[out.id] = Some(vec![1.0]);
        for id in (0..=out.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop_node(&nodes, id, &g, &mut grads, self.fault);
            // Interior buffers are dead once propagated; only leaves are
            // reported back.
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.map(|g| Tensor::from_parts(nodes[id].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradient buffers produced by [`Tape::backward`] for the leaves of the
/// tape. Interior results are not retained.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to the leaf `v`; `None` when `v`
    /// does not influence the seed or is not a leaf.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of the seed with respect to the leaf `v`, zero-filled when
    /// `v` does not influence the seed.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
/// `op(x)` optionally transposes. Shapes are those of `op(a)` `[m, k]` and
/// `op(b)` `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the buffers hold exactly the m*k, k*n and m*n elements the
    // strides above address, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = *t.shape().last().unwrap();
    (t.numel() / cols, cols)
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<Fault>,
) {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let p = bv.shape()[1];
            gemm(
                m,
                p,
                k,
                g,
                false,
                bv.data(),
                true,
                1.0,
                acc(grads, a, m * k),
            );
            gemm(
                k,
                m,
                p,
                av.data(),
                true,
                g,
                false,
                1.0,
                acc(grads, b, k * p),
            );
        }
        &Op::Add(a, b) => {
            for (d, x) in acc(grads, a, g.len()).iter_mut().zip(g) {
                *d += x;
            }
            for (d, x) in acc(grads, b, g.len()).iter_mut().zip(g) {
                *d += x;
            }
        }
        &Op::Sub(a, b) => {
            for (d, x) in acc(grads, a, g.len()).iter_mut().zip(g) {
                *d += x;
            }
            for (d, x) in acc(grads, b, g.len()).iter_mut().zip(g) {
                *d -= x;
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            for ((d, x), y) in acc(grads, a, g.len()).iter_mut().zip(g).zip(bv) {
                *d += x * y;
            }
            for ((d, x), y) in acc(grads, b, g.len()).iter_mut().zip(g).zip(av) {
                *d += x * y;
            }
        }
        &Op::AddRow(a, b) => {
            for (d, x) in acc(grads, a, g.len()).iter_mut().zip(g) {
                *d += x;
            }
            let p = val(b).numel();
            let db = acc(grads, b, p);
            for row in g.chunks_exact(p) {
                for (d, x) in db.iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        &Op::MulCol(a, c) => {
            let (av, cv) = (val(a), val(c).data());
            let (m, p) = rows_cols(av);
            {
                let da = acc(grads, a, m * p);
                for i in 0..m {
                    for j in 0..p {
                        da[i * p + j] += g[i * p + j] * cv[i];
                    }
                }
            }
            let dc = acc(grads, c, m);
            for i in 0..m {
                let row = &av.data()[i * p..(i + 1) * p];
                dc[i] += row
                    .iter()
                    .zip(&g[i * p..(i + 1) * p])
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
            }
        }
        &Op::Affine(a, alpha) => {
            for (d, x) in acc(grads, a, g.len()).iter_mut().zip(g) {
                *d += alpha * x;
            }
        }
        &Op::Unary(a, f) => {
            let y = nodes[id].value.data();
            let scale = match (f, fault) {
                (Unary::Sigmoid, Some(Fault::DoubleSigmoidGrad)) => 2.0,
                _ => 1.0,
            };
            for ((d, x), yv) in acc(grads, a, g.len()).iter_mut().zip(g).zip(y) {
                *d += scale * x * f.derivative_from_output(*yv);
            }
        }
        &Op::SoftmaxRows(a) => {
            let y = &nodes[id].value;
            let (m, n) = rows_cols(y);
            let da = acc(grads, a, m * n);
            for i in 0..m {
                let yr = &y.data()[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for j in 0..n {
                    da[i * n + j] += yr[j] * (gr[j] - dot);
                }
            }
        }
        &Op::ConcatCols(a, b) => {
            let (m, p) = rows_cols(val(a));
            let q = val(b).shape()[1];
            {
                let da = acc(grads, a, m * p);
                for i in 0..m {
                    for j in 0..p {
                        da[i * p + j] += g[i * (p + q) + j];
                    }
                }
            }
            let db = acc(grads, b, m * q);
            for i in 0..m {
                for j in 0..q {
                    db[i * q + j] += g[i * (p + q) + p + j];
                }
            }
        }
        &Op::SliceCols(a, start) => {
            let (m, p) = rows_cols(val(a));
            let w = nodes[id].value.shape()[1];
            let da = acc(grads, a, m * p);
            for i in 0..m {
                for j in 0..w {
                    da[i * p + start + j] += g[i * w + j];
                }
            }
        }
        Op::SumAll(inputs) => {
            for &a in inputs {
                let n = val(a).numel();
                for d in acc(grads, a, n).iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::GatherRows(table, idx) => {
            let (r, d) = rows_cols(val(*table));
            let dt = acc(grads, *table, r * d);
            for (row, &k) in idx.iter().enumerate() {
                for j in 0..d {
                    dt[k * d + j] += g[row * d + j];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = *val(*logits).shape().last().unwrap();
            let dl = acc(grads, *logits, probs.len());
            for (row, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                for j in 0..v {
                    let onehot = if j == t { 1.0 } else { 0.0 };
                    dl[row * v + j] += g[0] * w * (probs[row * v + j] - onehot);
                }
            }
        }
        &Op::SlotScores(slots, q) => {
            let (mv, qv) = (val(slots), val(q));
            let [b, n, d] = dims3(mv);
            {
                let dm = acc(grads, slots, b * n * d);
                for bi in 0..b {
                    for i in 0..n {
                        let gs = g[bi * n + i];
                        let base = (bi * n + i) * d;
                        for k in 0..d {
                            dm[base + k] += gs * qv.data()[bi * d + k];
                        }
                    }
                }
            }
            let dq = acc(grads, q, b * d);
            for bi in 0..b {
                for i in 0..n {
                    let gs = g[bi * n + i];
                    let base = (bi * n + i) * d;
                    for k in 0..d {
                        dq[bi * d + k] += gs * mv.data()[base + k];
                    }
                }
            }
        }
        &Op::SlotRead(w, slots) => {
            let (wv, mv) = (val(w), val(slots));
            let [b, n, d] = dims3(mv);
            {
                let dw = acc(grads, w, b * n);
                for bi in 0..b {
                    for i in 0..n {
                        let base = (bi * n + i) * d;
                        dw[bi * n + i] += (0..d)
                            .map(|k| mv.data()[base + k] * g[bi * d + k])
                            .sum::<f64>();
                    }
                }
            }
            let dm = acc(grads, slots, b * n * d);
            for bi in 0..b {
                for i in 0..n {
                    let a = wv.data()[bi * n + i];
                    let base = (bi * n + i) * d;
                    for k in 0..d {
                        dm[base + k] += a * g[bi * d + k];
                    }
                }
            }
        }
        &Op::SlotUpdate {
            slots,
            forget,
            write,
            content,
        } => {
            let (mv, fv, wv, cv) = (val(slots), val(forget), val(write), val(content));
            let [b, n, d] = dims3(mv);
            {
                let dm = acc(grads, slots, b * n * d);
                for bi in 0..b {
                    for i in 0..n {
                        let keep = 1.0 - fv.data()[bi * n + i];
                        let base = (bi * n + i) * d;
                        for k in 0..d {
                            dm[base + k] += keep * g[base + k];
                        }
                    }
                }
            }
            {
                let df = acc(grads, forget, b * n);
                for bi in 0..b {
                    for i in 0..n {
                        let base = (bi * n + i) * d;
                        df[bi * n + i] -= (0..d)
                            .map(|k| mv.data()[base + k] * g[base + k])
                            .sum::<f64>();
                    }
                }
            }
            {
                let dw = acc(grads, write, b * n);
                for bi in 0..b {
                    for i in 0..n {
                        let base = (bi * n + i) * d;
                        dw[bi * n + i] += (0..d)
                            .map(|k| cv.data()[bi * d + k] * g[base + k])
                            .sum::<f64>();
                    }
                }
            }
            let dc = acc(grads, content, b * d);
            for bi in 0..b {
                for i in 0..n {
                    let w = wv.data()[bi * n + i];
                    let base = (bi * n + i) * d;
                    for k in 0..d {
                        dc[bi * d + k] += w * g[base + k];
                    }
                }
            }
        }
        Op::StackSlots(inputs) => {
            let n = inputs.len();
            let (b, d) = rows_cols(val(inputs[0]));
            for (i, &a) in inputs.iter().enumerate() {
                let da = acc(grads, a, b * d);
                for bi in 0..b {
                    let base = (bi * n + i) * d;
                    for k in 0..d {
                        da[bi * d + k] += g[base + k];
                    }
                }
            }
        }
        &Op::RepeatBatch(a) => {
            let per = val(a).numel();
            let da = acc(grads, a, per);
            for chunk in g.chunks_exact(per) {
                for (d, x) in da.iter_mut().zip(chunk) {
                    *d += x;
                }
            }
        }
    }
}

fn dims3(t: &Tensor) -> [usize; 3] {
    let s = t.shape();
    [s[0], s[1], s[2]]
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// A copy of the forward value.
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Borrowing access to the forward value.
    pub fn with_value<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(self) -> f64 {
        self.with_value(Tensor::item)
    }

    fn same_tape(self, other: Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            f(a, b).map_err(|e| match e {
                Error::Dimension { detail, .. } => Error::dim(op, detail),
                e => e,
            })?
        };
        Ok(self.tape.push(out, make(self.id, other.id)))
    }

    /// Matrix product of `[m, k]` and `[k, p]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "matmul",
            |a, b| {
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::dim(
                        "matmul",
                        format!(
                            "cannot multiply {} by {}",
                            shape_str(a.shape()),
                            shape_str(b.shape())
                        ),
                    ));
                }
                let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * p];
                gemm(m, k, p, a.data(), false, b.data(), false, 0.0, &mut out);
                Ok(Tensor::from_parts(vec![m, p], out))
            },
            Op::MatMul,
        )
    }

    fn zip_same(
        self,
        other: Var<'t>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.binary(
            other,
            op,
            move |a, b| {
                if a.shape() != b.shape() {
                    return Err(Error::dim(
                        op,
                        format!(
                            "shapes differ: {} vs {}",
                            shape_str(a.shape()),
                            shape_str(b.shape())
                        ),
                    ));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| f(*x, *y))
                    .collect();
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            },
            make,
        )
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `std::ops::Add`
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "add", |x, y| x + y, Op::Add)
    }

    #[allow(clippy::should_implement_trait)] // fallible, so not `std::ops::Sub`
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "sub", |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    #[allow(clippy::should_implement_trait)] // fallible, so not `std::ops::Mul`
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a `p`-element row to every row of a `[m, p]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            "add_row",
            |a, r| {
                let (_, p) = rows_cols(a);
                if r.numel() != p {
                    return Err(Error::dim(
                        "add_row",
                        format!(
                            "row of shape {} does not match {}",
                            shape_str(r.shape()),
                            shape_str(a.shape())
                        ),
                    ));
                }
                let mut data = a.data().to_vec();
                for chunk in data.chunks_exact_mut(p) {
                    for (d, x) in chunk.iter_mut().zip(r.data()) {
                        *d += x;
                    }
                }
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            },
            Op::AddRow,
        )
    }

    /// Scales row `i` of a `[m, p]` tensor by entry `i` of a `[m, 1]` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            col,
            "mul_col",
            |a, c| {
                let (m, p) = rows_cols(a);
                if a.shape().len() != 2 || c.numel() != m {
                    return Err(Error::dim(
                        "mul_col",
                        format!(
                            "column of shape {} does not match {}",
                            shape_str(c.shape()),
                            shape_str(a.shape())
                        ),
                    ));
                }
                let mut data = a.data().to_vec();
                for (chunk, s) in data.chunks_exact_mut(p).zip(c.data()) {
                    for d in chunk.iter_mut() {
                        *d *= s;
                    }
                }
                Ok(Tensor::from_parts(a.shape().to_vec(), data))
            },
            Op::MulCol,
        )
    }

    fn unary_map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.with_value(|a| {
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        });
        self.tape.push(out, op)
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(self, alpha: f64, beta: f64) -> Var<'t> {
        self.unary_map(move |x| alpha * x + beta, Op::Affine(self.id, alpha))
    }

    pub fn scale(self, alpha: f64) -> Var<'t> {
        self.affine(alpha, 0.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    pub fn elementwise(self, f: Unary) -> Var<'t> {
        self.unary_map(move |x| f.apply(x), Op::Unary(self.id, f))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.elementwise(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.elementwise(Unary::Tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.elementwise(Unary::Exp)
    }

    /// Softmax along the last axis, stabilised by subtracting the row max.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = self.with_value(|a| {
            let (m, n) = rows_cols(a);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                softmax_into(&a.data()[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        });
        Ok(self.tape.push(out, Op::SoftmaxRows(self.id)))
    }

    /// Column-wise concatenation of `[m, p]` and `[m, q]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            "concat_cols",
            |a, b| {
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
                    return Err(Error::dim(
                        "concat_cols",
                        format!(
                            "cannot concatenate {} with {}",
                            shape_str(a.shape()),
                            shape_str(b.shape())
                        ),
                    ));
                }
                let (m, p, q) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut data = Vec::with_capacity(m * (p + q));
                for i in 0..m {
                    data.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
                    data.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
                }
                Ok(Tensor::from_parts(vec![m, p + q], data))
            },
            Op::ConcatCols,
        )
    }

    /// Columns `start..start + width` of a `[m, p]` tensor.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let out = self.with_value(|a| {
            if a.shape().len() != 2 || width == 0 || start + width > a.shape()[1] {
                return Err(Error::dim(
                    "slice_cols",
                    format!(
                        "columns {start}..{} out of range for {}",
                        start + width,
                        shape_str(a.shape())
                    ),
                ));
            }
            let (m, p) = (a.shape()[0], a.shape()[1]);
            let mut data = Vec::with_capacity(m * width);
            for i in 0..m {
                data.extend_from_slice(&a.data()[i * p + start..i * p + start + width]);
            }
            Ok(Tensor::from_parts(vec![m, width], data))
        })?;
        Ok(self.tape.push(out, Op::SliceCols(self.id, start)))
    }

    pub fn sum(self) -> Var<'t> {
        Var::sum_all(&[self]).expect("non-empty")
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.with_value(Tensor::numel);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum of every element of every input, as a scalar.
    pub fn sum_all(inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("sum_all", "no inputs"))?;
        let total = {
            let nodes = first.tape.nodes.borrow();
            inputs
                .iter()
                .map(|v| {
                    first.same_tape(*v);
                    nodes[v.id].value.data().iter().sum::<f64>()
                })
                .sum()
        };
        Ok(first.tape.push(
            Tensor::scalar(total),
            Op::SumAll(inputs.iter().map(|v| v.id).collect()),
        ))
    }

    /// Rows `indices` of a `[r, d]` table, as `[indices.len(), d]`.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            if t.shape().len() != 2 {
                return Err(Error::dim(
                    "gather_rows",
                    format!("table must be 2-D, got {}", shape_str(t.shape())),
                ));
            }
            let (r, d) = (t.shape()[0], t.shape()[1]);
            if indices.is_empty() {
                return Err(Error::dim("gather_rows", "no indices"));
            }
            let mut data = Vec::with_capacity(indices.len() * d);
            for &k in indices {
                if k >= r {
                    return Err(Error::Index(format!(
                        "row {k} out of range for table with {r} rows"
                    )));
                }
                data.extend_from_slice(&t.data()[k * d..(k + 1) * d]);
            }
            Ok(Tensor::from_parts(vec![indices.len(), d], data))
        })?;
        Ok(self
            .tape
            .push(out, Op::GatherRows(self.id, indices.to_vec())))
    }

    /// Weighted sum of per-row cross-entropies `-log softmax(logits_b)[t_b]`
    /// over a `[m, V]` logits tensor (or a single `[V]` vector).
    pub fn cross_entropy(self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let (total, probs) = self.with_value(|l| {
            let (m, v) = rows_cols(l);
            if targets.len() != m || weights.len() != m {
                return Err(Error::dim(
                    "cross_entropy",
                    format!(
                        "{} targets and {} weights for {m} rows of logits",
                        targets.len(),
                        weights.len()
                    ),
                ));
            }
            let mut probs = vec![0.0; m * v];
            let mut total = 0.0;
            for (row, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if t >= v {
                    return Err(Error::Index(format!(
                        "target {t} out of range for {v} classes"
                    )));
                }
                let x = &l.data()[row * v..(row + 1) * v];
                softmax_into(x, &mut probs[row * v..(row + 1) * v]);
                if w != 0.0 {
                    total += w * (log_sum_exp(x) - x[t]);
                }
            }
            Ok((total, probs))
        })?;
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Per-slot dot products: `[B, n, d]` slots against `[B, d]` queries
    /// give `[B, n]` scores.
    pub fn slot_scores(self, query: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            query,
            "slot_scores",
            |m, q| {
                if m.shape().len() != 3 || q.shape() != [m.shape()[0], m.shape()[2]] {
                    return Err(Error::dim(
                        "slot_scores",
                        format!(
                            "slots {} incompatible with query {}",
                            shape_str(m.shape()),
                            shape_str(q.shape())
                        ),
                    ));
                }
                let [b, n, d] = dims3(m);
                let mut data = vec![0.0; b * n];
                for bi in 0..b {
                    let qr = &q.data()[bi * d..(bi + 1) * d];
                    for i in 0..n {
                        let base = (bi * n + i) * d;
                        data[bi * n + i] = m.data()[base..base + d]
                            .iter()
                            .zip(qr)
                            .map(|(x, y)| x * y)
                            .sum();
                    }
                }
                Ok(Tensor::from_parts(vec![b, n], data))
            },
            Op::SlotScores,
        )
    }

    /// Weighted sum of slots: `[B, n]` weights over `[B, n, d]` slots give
    /// `[B, d]`.
    pub fn slot_read(self, slots: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            slots,
            "slot_read",
            |w, m| {
                if m.shape().len() != 3 || w.shape() != [m.shape()[0], m.shape()[1]] {
                    return Err(Error::dim(
                        "slot_read",
                        format!(
                            "weights {} incompatible with slots {}",
                            shape_str(w.shape()),
                            shape_str(m.shape())
                        ),
                    ));
                }
                let [b, n, d] = dims3(m);
                let mut data = vec![0.0; b * d];
                for bi in 0..b {
                    for i in 0..n {
                        let a = w.data()[bi * n + i];
                        let base = (bi * n + i) * d;
                        for k in 0..d {
                            data[bi * d + k] += a * m.data()[base + k];
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![b, d], data))
            },
            Op::SlotRead,
        )
    }

    /// Per-slot gated update of `[B, n, d]` slots:
    /// `m_i <- (1 - forget_i) * m_i + write_i * content`, with `[B, n]`
    /// gates and `[B, d]` content.
    pub fn slot_update(self, forget: Var<'t>, write: Var<'t>, content: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(forget);
        self.same_tape(write);
        self.same_tape(content);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (m, f, w, c) = (
                &nodes[self.id].value,
                &nodes[forget.id].value,
                &nodes[write.id].value,
                &nodes[content.id].value,
            );
            if m.shape().len() != 3 {
                return Err(Error::dim(
                    "slot_update",
                    format!("slots must be 3-D, got {}", shape_str(m.shape())),
                ));
            }
            let [b, n, d] = dims3(m);
            if f.shape() != [b, n] || w.shape() != [b, n] || c.shape() != [b, d] {
                return Err(Error::dim(
                    "slot_update",
                    format!(
                        "slots {} with forget {}, write {}, content {}",
                        shape_str(m.shape()),
                        shape_str(f.shape()),
                        shape_str(w.shape()),
                        shape_str(c.shape())
                    ),
                ));
            }
            let mut data = vec![0.0; b * n * d];
            for bi in 0..b {
                for i in 0..n {
                    let keep = 1.0 - f.data()[bi * n + i];
                    let put = w.data()[bi * n + i];
                    let base = (bi * n + i) * d;
                    if put == 0.0 {
                        for k in 0..d {
                            data[base + k] = keep * m.data()[base + k];
                        }
                    } else {
                        for k in 0..d {
                            data[base + k] = keep * m.data()[base + k] + put * c.data()[bi * d + k];
                        }
                    }
                }
            }
            Tensor::from_parts(vec![b, n, d], data)
        };
        Ok(self.tape.push(
            out,
            Op::SlotUpdate {
                slots: self.id,
                forget: forget.id,
                write: write.id,
                content: content.id,
            },
        ))
    }

    /// Stacks `len` tensors of shape `[B, d]` into slots `[B, len, d]`.
    pub fn stack_slots(items: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *items
            .first()
            .ok_or_else(|| Error::dim("stack_slots", "no inputs"))?;
        let out = {
            let nodes = first.tape.nodes.borrow();
            let shape = nodes[first.id].value.shape().to_vec();
            if shape.len() != 2 {
                return Err(Error::dim(
                    "stack_slots",
                    format!("items must be 2-D, got {}", shape_str(&shape)),
                ));
            }
            let (b, d, n) = (shape[0], shape[1], items.len());
            let mut data = vec![0.0; b * n * d];
            for (i, v) in items.iter().enumerate() {
                first.same_tape(*v);
                let t = &nodes[v.id].value;
                if t.shape() != shape.as_slice() {
                    return Err(Error::dim(
                        "stack_slots",
                        format!(
                            "item shapes differ: {} vs {}",
                            shape_str(&shape),
                            shape_str(t.shape())
                        ),
                    ));
                }
                for bi in 0..b {
                    let base = (bi * n + i) * d;
                    data[base..base + d].copy_from_slice(&t.data()[bi * d..(bi + 1) * d]);
                }
            }
            Tensor::from_parts(vec![b, n, d], data)
        };
        Ok(first
            .tape
            .push(out, Op::StackSlots(items.iter().map(|v| v.id).collect())))
    }

    /// Repeats a `[n, d]` matrix `batch` times into `[batch, n, d]`.
    pub fn repeat_batch(self, batch: usize) -> Result<Var<'t>> {
        let out = self.with_value(|t| {
            if t.shape().len() != 2 || batch == 0 {
                return Err(Error::dim(
                    "repeat_batch",
                    format!("cannot repeat {} {batch} times", shape_str(t.shape())),
                ));
            }
            let mut shape = vec![batch];
            shape.extend_from_slice(t.shape());
            Ok(Tensor::from_parts(shape, t.data().repeat(batch)))
        })?;
        Ok(self.tape.push(out, Op::RepeatBatch(self.id)))
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
