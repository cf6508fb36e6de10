//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The backward pass is itself recorded as tape operations, so gradients are
//! ordinary `Var`s that can be differentiated again. This is what the
//! double-backprop regularizers (IR/JR/ER) and Hessian-vector products rely on.
//!
//! A tape is single-writer: graph construction and backward passes on one tape
//! happen on one thread. Distinct tapes may be processed fully in parallel.

use std::cell::RefCell;
use std::rc::Rc;

use smallvec::SmallVec;

use crate::error::AutodiffError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Matmul,
    Transpose,
    /// Same-padding stride-1 convolution, inputs (x: N,C,H,W; w: O,C,K,K).
    Conv2d,
    /// Adjoint of Conv2d w.r.t. x, inputs (g: N,O,H,W; w).
    ConvInputGrad,
    /// Adjoint of Conv2d w.r.t. w, inputs (x, g); kernel size carried explicitly.
    ConvWeightGrad(usize),
    Relu,
    /// Step function; derivative defined as 0 everywhere (relu a.e. convention).
    Heaviside,
    Powf(f64),
    Log,
    Exp,
    SumAll,
    BroadcastScalar(Vec<usize>),
    RowSum,
    ColSum,
    /// (N) -> (N, c): repeat each entry across a row.
    ColBroadcast(usize),
    /// (C) -> (n, C): repeat the vector as every row.
    RowBroadcast(usize),
    /// (O) -> (N, O, H, W): per-channel broadcast.
    ChanBroadcast([usize; 3]),
    /// (N, O, H, W) -> (O): per-channel sum.
    ChanSum,
    Reshape(Vec<usize>),
    /// 1-D concatenation of the two inputs.
    Concat,
    /// 1-D slice [start, start+len).
    Slice { start: usize, len: usize },
    /// 1-D zero-pad: place the input at `start` inside a vector of `total`.
    Pad { start: usize, total: usize },
}

struct Node {
    op: Op,
    inputs: SmallVec<[usize; 2]>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording of primitive operations in topological order.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A tensor tracked on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds a leaf tensor to the tape.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, SmallVec::new(), value, requires_grad)
    }

    /// Adds an untracked constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&self, op: Op, inputs: SmallVec<[usize; 2]>, value: Tensor, rg: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad: rg,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

fn row_major_2d(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::ShapeMismatch(format!(
            "expected 2-D tensor, got {s:?}"
        ))),
    }
}

fn conv_shapes(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d input must be 4-D, got {s:?}"
            )))
        }
    };
    let (o, ci, k1, k2) = match w.shape() {
        [o, ci, k1, k2] => (*o, *ci, *k1, *k2),
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv2d kernel must be 4-D, got {s:?}"
            )))
        }
    };
    if ci != c || k1 != k2 || k1 % 2 == 0 {
        return Err(AutodiffError::ShapeMismatch(format!(
            "conv2d kernel {:?} incompatible with input {:?} (square odd kernels only)",
            w.shape(),
            x.shape()
        )));
    }
    Ok((n, c, h, wd, o, k1))
}

fn conv2d_eval(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd, o, k) = conv_shapes(x, w)?;
    let pad = k / 2;
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![0.0; n * o * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            for ci in 0..c {
                let wbase = ((oi * c) + ci) * k * k;
                let xbase = (ni * c + ci) * h * wd;
                for p in 0..k {
                    for q in 0..k {
                        let wt = wv[wbase + p * k + q];
                        if wt == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + p as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let orow = (ni * o + oi) * h * wd + i * wd;
                            let xrow = xbase + si as usize * wd;
                            for j in 0..wd {
                                let sj = j as isize + q as isize - pad as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                out[orow + j] += wt * xd[xrow + sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, h, wd], out))
}

fn conv2d_input_grad_eval(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, o, h, wd) = match g.shape() {
        [n, o, h, w] => (*n, *o, *h, *w),
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv input-grad must be 4-D, got {s:?}"
            )))
        }
    };
    let (oo, c, k, _) = match w.shape() {
        [o, c, k1, k2] => (*o, *c, *k1, *k2),
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv kernel must be 4-D, got {s:?}"
            )))
        }
    };
    if oo != o {
        return Err(AutodiffError::ShapeMismatch(
            "conv input-grad channel mismatch".into(),
        ));
    }
    let pad = k / 2;
    let gd = g.data();
    let wv = w.data();
    let mut out = vec![0.0; n * c * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            for ci in 0..c {
                let wbase = ((oi * c) + ci) * k * k;
                for p in 0..k {
                    for q in 0..k {
                        let wt = wv[wbase + p * k + q];
                        if wt == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + p as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let grow = (ni * o + oi) * h * wd + i * wd;
                            let xrow = (ni * c + ci) * h * wd + si as usize * wd;
                            for j in 0..wd {
                                let sj = j as isize + q as isize - pad as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                out[xrow + sj as usize] += wt * gd[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, wd], out))
}

fn conv2d_weight_grad_eval(x: &Tensor, g: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, wd) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv weight-grad input must be 4-D, got {s:?}"
            )))
        }
    };
    let o = match g.shape() {
        [gn, o, gh, gw] if *gn == n && *gh == h && *gw == wd => *o,
        s => {
            return Err(AutodiffError::ShapeMismatch(format!(
                "conv weight-grad upstream shape {s:?} incompatible"
            )))
        }
    };
    let pad = k / 2;
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![0.0; o * c * k * k];
    for ni in 0..n {
        for oi in 0..o {
            for ci in 0..c {
                let wbase = ((oi * c) + ci) * k * k;
                for p in 0..k {
                    for q in 0..k {
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + p as isize - pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let grow = (ni * o + oi) * h * wd + i * wd;
                            let xrow = (ni * c + ci) * h * wd + si as usize * wd;
                            for j in 0..wd {
                                let sj = j as isize + q as isize - pad as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                acc += gd[grow + j] * xd[xrow + sj as usize];
                            }
                        }
                        out[wbase + p * k + q] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![o, c, k, k], out))
}

fn eval(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaf has no eval"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "elementwise op on {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::ScalarMul(c) => Ok(ins[0].map(|v| v * c)),
        Op::Matmul => {
            let (m, ka) = row_major_2d(ins[0])?;
            let (kb, n) = row_major_2d(ins[1])?;
            if ka != kb {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "matmul {:?} x {:?}",
                    ins[0].shape(),
                    ins[1].shape()
                )));
            }
            let a = ins[0].data();
            let b = ins[1].data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &a[i * ka..(i + 1) * ka];
                let orow = &mut out[i * n..(i + 1) * n];
                for (k, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[k * n..(k + 1) * n];
                    for (ov, &bv) in orow.iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        Op::Transpose => {
            let (r, c) = row_major_2d(ins[0])?;
            let a = ins[0].data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], out))
        }
        Op::Conv2d => conv2d_eval(ins[0], ins[1]),
        Op::ConvInputGrad => conv2d_input_grad_eval(ins[0], ins[1]),
        Op::ConvWeightGrad(k) => conv2d_weight_grad_eval(ins[0], ins[1], *k),
        Op::Relu => Ok(ins[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Heaviside => Ok(ins[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
        Op::Powf(c) => {
            let frac = c.fract() != 0.0;
            if frac && ins[0].data().iter().any(|&v| v < 0.0) {
                return Err(AutodiffError::Domain(format!(
                    "x^{c} of negative value"
                )));
            }
            Ok(ins[0].map(|v| v.powf(*c)))
        }
        Op::Log => {
            if ins[0].data().iter().any(|&v| v <= 0.0) {
                return Err(AutodiffError::Domain("log of non-positive value".into()));
            }
            Ok(ins[0].map(f64::ln))
        }
        Op::Exp => Ok(ins[0].map(f64::exp)),
        Op::SumAll => Ok(Tensor::scalar(ins[0].data().iter().sum())),
        Op::BroadcastScalar(shape) => {
            if !ins[0].is_scalar() {
                return Err(AutodiffError::ShapeMismatch(
                    "broadcast source must be scalar".into(),
                ));
            }
            Ok(Tensor::filled(shape.clone(), ins[0].item()))
        }
        Op::RowSum => {
            let (r, c) = row_major_2d(ins[0])?;
            let a = ins[0].data();
            let out = (0..r).map(|i| a[i * c..(i + 1) * c].iter().sum()).collect();
            Ok(Tensor::from_parts(vec![r], out))
        }
        Op::ColSum => {
            let (r, c) = row_major_2d(ins[0])?;
            let a = ins[0].data();
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += a[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c], out))
        }
        Op::ColBroadcast(c) => {
            let n = ins[0].len();
            let a = ins[0].data();
            let mut out = Vec::with_capacity(n * c);
            for &v in a {
                out.extend(std::iter::repeat(v).take(*c));
            }
            Ok(Tensor::from_parts(vec![n, *c], out))
        }
        Op::RowBroadcast(n) => {
            let c = ins[0].len();
            let mut out = Vec::with_capacity(n * c);
            for _ in 0..*n {
                out.extend_from_slice(ins[0].data());
            }
            Ok(Tensor::from_parts(vec![*n, c], out))
        }
        Op::ChanBroadcast([n, h, w]) => {
            let o = ins[0].len();
            let a = ins[0].data();
            let mut out = Vec::with_capacity(n * o * h * w);
            for _ in 0..*n {
                for &v in a {
                    out.extend(std::iter::repeat(v).take(h * w));
                }
            }
            Ok(Tensor::from_parts(vec![*n, o, *h, *w], out))
        }
        Op::ChanSum => {
            let (n, o, h, w) = match ins[0].shape() {
                [n, o, h, w] => (*n, *o, *h, *w),
                s => {
                    return Err(AutodiffError::ShapeMismatch(format!(
                        "chan-sum needs 4-D, got {s:?}"
                    )))
                }
            };
            let a = ins[0].data();
            let mut out = vec![0.0; o];
            for ni in 0..n {
                for oi in 0..o {
                    let base = (ni * o + oi) * h * w;
                    out[oi] += a[base..base + h * w].iter().sum::<f64>();
                }
            }
            Ok(Tensor::from_parts(vec![o], out))
        }
        Op::Reshape(shape) => Ok(ins[0]
            .reshaped(shape.clone())
            .map_err(AutodiffError::Tensor)?),
        Op::Concat => {
            let mut data = ins[0].data().to_vec();
            data.extend_from_slice(ins[1].data());
            let n = data.len();
            Ok(Tensor::from_parts(vec![n], data))
        }
        Op::Slice { start, len } => {
            if start + len > ins[0].len() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "slice [{start}, {}) out of bounds for length {}",
                    start + len,
                    ins[0].len()
                )));
            }
            Ok(Tensor::from_parts(
                vec![*len],
                ins[0].data()[*start..start + len].to_vec(),
            ))
        }
        Op::Pad { start, total } => {
            let mut out = vec![0.0; *total];
            out[*start..start + ins[0].len()].copy_from_slice(ins[0].data());
            Ok(Tensor::from_parts(vec![*total], out))
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tensor(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn record(&self, op: Op, inputs: &[&Var]) -> Result<Var> {
        for v in inputs {
            if !self.tape.same_tape(&v.tape) {
                return Err(AutodiffError::TapeMismatch);
            }
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let tensors: Vec<&Tensor> = inputs.iter().map(|v| &inner.nodes[v.id].value).collect();
            eval(&op, &tensors)?
        };
        let rg = {
            let inner = self.tape.inner.borrow();
            let tracked = inputs.iter().any(|v| inner.nodes[v.id].requires_grad);
            tracked && !matches!(op, Op::Heaviside)
        };
        let ids: SmallVec<[usize; 2]> = inputs.iter().map(|v| v.id).collect();
        Ok(self.tape.push(op, ids, value, rg))
    }

    // -- primitive ops -------------------------------------------------------

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.record(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.record(Op::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.record(Op::Mul, &[self, other])
    }

    pub fn scalar_mul(&self, c: f64) -> Result<Var> {
        self.record(Op::ScalarMul(c), &[self])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.record(Op::Matmul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Var> {
        self.record(Op::Transpose, &[self])
    }

    pub fn conv2d(&self, kernel: &Var) -> Result<Var> {
        self.record(Op::Conv2d, &[self, kernel])
    }

    fn conv2d_input_grad(&self, kernel: &Var) -> Result<Var> {
        self.record(Op::ConvInputGrad, &[self, kernel])
    }

    pub fn relu(&self) -> Result<Var> {
        self.record(Op::Relu, &[self])
    }

    pub fn heaviside(&self) -> Result<Var> {
        self.record(Op::Heaviside, &[self])
    }

    pub fn powf(&self, c: f64) -> Result<Var> {
        self.record(Op::Powf(c), &[self])
    }

    pub fn square(&self) -> Result<Var> {
        self.record(Op::Powf(2.0), &[self])
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.record(Op::Powf(0.5), &[self])
    }

    pub fn log(&self) -> Result<Var> {
        self.record(Op::Log, &[self])
    }

    pub fn exp(&self) -> Result<Var> {
        self.record(Op::Exp, &[self])
    }

    pub fn sum_all(&self) -> Result<Var> {
        self.record(Op::SumAll, &[self])
    }

    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::BroadcastScalar(shape), &[self])
    }

    pub fn row_sum(&self) -> Result<Var> {
        self.record(Op::RowSum, &[self])
    }

    pub fn col_sum(&self) -> Result<Var> {
        self.record(Op::ColSum, &[self])
    }

    pub fn col_broadcast(&self, cols: usize) -> Result<Var> {
        self.record(Op::ColBroadcast(cols), &[self])
    }

    pub fn row_broadcast(&self, rows: usize) -> Result<Var> {
        self.record(Op::RowBroadcast(rows), &[self])
    }

    pub fn chan_broadcast(&self, n: usize, h: usize, w: usize) -> Result<Var> {
        self.record(Op::ChanBroadcast([n, h, w]), &[self])
    }

    pub fn chan_sum(&self) -> Result<Var> {
        self.record(Op::ChanSum, &[self])
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        self.record(Op::Reshape(shape), &[self])
    }

    pub fn concat(&self, other: &Var) -> Result<Var> {
        self.record(Op::Concat, &[self, other])
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { start, len }, &[self])
    }

    fn pad(&self, start: usize, total: usize) -> Result<Var> {
        self.record(Op::Pad { start, total }, &[self])
    }

    // -- composites ----------------------------------------------------------

    pub fn neg(&self) -> Result<Var> {
        self.scalar_mul(-1.0)
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.tensor().len() as f64;
        self.sum_all()?.scalar_mul(1.0 / n)
    }

    pub fn dot(&self, other: &Var) -> Result<Var> {
        self.mul(other)?.sum_all()
    }

    /// sqrt(sum(x^2) + eps); eps keeps the gradient finite at the origin.
    pub fn l2_norm_eps(&self, eps: f64) -> Result<Var> {
        let ss = self.square()?.sum_all()?;
        let shifted = ss.add(&self.tape.constant(Tensor::scalar(eps)))?;
        shifted.sqrt()
    }

    pub fn l2_norm(&self) -> Result<Var> {
        self.l2_norm_eps(0.0)
    }

    pub fn add_rowvec(&self, v: &Var) -> Result<Var> {
        let (rows, cols) = row_major_2d(&self.tensor())?;
        if v.tensor().len() != cols {
            return Err(AutodiffError::ShapeMismatch(format!(
                "row-vector length {} vs {cols} columns",
                v.tensor().len()
            )));
        }
        self.add(&v.row_broadcast(rows)?)
    }

    pub fn add_chan_bias(&self, v: &Var) -> Result<Var> {
        let shape = self.shape();
        let (n, h, w) = match shape.as_slice() {
            [n, _, h, w] => (*n, *h, *w),
            s => {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "channel bias needs 4-D activations, got {s:?}"
                )))
            }
        };
        self.add(&v.chan_broadcast(n, h, w)?)
    }
}

/// Mean softmax cross-entropy of `logits` (N x C) against soft targets (N x C).
///
/// The row max is subtracted as an untracked constant, which leaves both the
/// value and every derivative exact.
pub fn softmax_cross_entropy(logits: &Var, targets: &Tensor) -> Result<Var> {
    let t = logits.tensor();
    let (n, c) = row_major_2d(&t)?;
    if targets.shape() != [n, c] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "targets {:?} vs logits {:?}",
            targets.shape(),
            t.shape()
        )));
    }
    let tape = logits.tape();
    let rowmax: Vec<f64> = (0..n)
        .map(|i| {
            t.data()[i * c..(i + 1) * c]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let maxes = tape.constant(Tensor::from_parts(vec![n], rowmax));
    let shifted = logits.sub(&maxes.col_broadcast(c)?)?;
    let lse = shifted.exp()?.row_sum()?.log()?;
    let picked = shifted
        .mul(&tape.constant(targets.clone()))?
        .row_sum()?;
    lse.sub(&picked)?.mean()
}

/// Gradient of a scalar `output` w.r.t. each var in `wrt`.
///
/// The adjoint computation is recorded on the same tape, so with
/// `create_graph` the results can be differentiated again. Vars that are not
/// ancestors of the output receive a zero gradient.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    let tape = output.tape().clone();
    {
        let inner = tape.inner.borrow();
        let out_t = &inner.nodes[output.id()].value;
        if !out_t.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(out_t.shape().to_vec()));
        }
    }
    for v in wrt {
        if !tape.same_tape(v.tape()) {
            return Err(AutodiffError::TapeMismatch);
        }
    }
    let out_id = output.id();

    // Nodes reachable from the output that carry gradient.
    let mut live = vec![false; out_id + 1];
    {
        let inner = tape.inner.borrow();
        if inner.nodes[out_id].requires_grad {
            live[out_id] = true;
            for id in (0..=out_id).rev() {
                if !live[id] {
                    continue;
                }
                for &inp in &inner.nodes[id].inputs {
                    if inner.nodes[inp].requires_grad {
                        live[inp] = true;
                    }
                }
            }
        }
    }

    let mut adjoint: Vec<Option<Var>> = vec![None; out_id + 1];
    if live[out_id] {
        adjoint[out_id] = Some(tape.leaf(Tensor::scalar(1.0), create_graph));
    }

    for id in (0..=out_id).rev() {
        if !live[id] {
            continue;
        }
        let g = match adjoint[id].clone() {
            Some(g) => g,
            None => continue,
        };
        let (op, inputs) = {
            let inner = tape.inner.borrow();
            (inner.nodes[id].op.clone(), inner.nodes[id].inputs.clone())
        };
        let in_var = |i: usize| Var {
            tape: tape.clone(),
            id: inputs[i],
        };
        let this_var = Var {
            tape: tape.clone(),
            id,
        };
        let contribs: Vec<(usize, Var)> = match op {
            Op::Leaf | Op::Heaviside => vec![],
            Op::Add => vec![(0, g.clone()), (1, g)],
            Op::Sub => vec![(0, g.clone()), (1, g.neg()?)],
            Op::Mul => vec![(0, g.mul(&in_var(1))?), (1, g.mul(&in_var(0))?)],
            Op::ScalarMul(c) => vec![(0, g.scalar_mul(c)?)],
            Op::Matmul => vec![
                (0, g.matmul(&in_var(1).transpose()?)?),
                (1, in_var(0).transpose()?.matmul(&g)?),
            ],
            Op::Transpose => vec![(0, g.transpose()?)],
            Op::Conv2d => {
                let k = in_var(1).shape()[2];
                vec![
                    (0, g.conv2d_input_grad(&in_var(1))?),
                    (1, g.record(Op::ConvWeightGrad(k), &[&in_var(0), &g])?),
                ]
            }
            Op::ConvInputGrad => {
                let k = in_var(1).shape()[2];
                vec![
                    (0, g.conv2d(&in_var(1))?),
                    (1, g.record(Op::ConvWeightGrad(k), &[&g, &in_var(0)])?),
                ]
            }
            Op::ConvWeightGrad(_) => vec![
                (0, in_var(1).conv2d_input_grad(&g)?),
                (1, in_var(0).conv2d(&g)?),
            ],
            Op::Relu => vec![(0, g.mul(&in_var(0).heaviside()?)?)],
            Op::Powf(c) => {
                let dx = in_var(0).powf(c - 1.0)?.scalar_mul(c)?;
                vec![(0, g.mul(&dx)?)]
            }
            Op::Log => vec![(0, g.mul(&in_var(0).powf(-1.0)?)?)],
            Op::Exp => vec![(0, g.mul(&this_var)?)],
            Op::SumAll => {
                let shape = in_var(0).shape();
                vec![(0, g.broadcast_scalar(shape)?)]
            }
            Op::BroadcastScalar(_) => vec![(0, g.sum_all()?)],
            Op::RowSum => {
                let cols = in_var(0).shape()[1];
                vec![(0, g.col_broadcast(cols)?)]
            }
            Op::ColSum => {
                let rows = in_var(0).shape()[0];
                vec![(0, g.row_broadcast(rows)?)]
            }
            Op::ColBroadcast(_) => vec![(0, g.row_sum()?)],
            Op::RowBroadcast(_) => vec![(0, g.col_sum()?)],
            Op::ChanBroadcast(_) => vec![(0, g.chan_sum()?)],
            Op::ChanSum => {
                let s = in_var(0).shape();
                vec![(0, g.chan_broadcast(s[0], s[2], s[3])?)]
            }
            Op::Reshape(_) => vec![(0, g.reshape(in_var(0).shape())?)],
            Op::Concat => {
                let la = in_var(0).tensor().len();
                let lb = in_var(1).tensor().len();
                vec![(0, g.slice(0, la)?), (1, g.slice(la, lb)?)]
            }
            Op::Slice { start, .. } => {
                let total = in_var(0).tensor().len();
                vec![(0, g.pad(start, total)?)]
            }
            Op::Pad { start, .. } => {
                let len = in_var(0).tensor().len();
                vec![(0, g.slice(start, len)?)]
            }
        };
        for (slot, contrib) in contribs {
            let target = inputs[slot];
            if !live[target] {
                continue;
            }
            adjoint[target] = Some(match adjoint[target].take() {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
    }

    let mut results = Vec::with_capacity(wrt.len());
    for v in wrt {
        let r = if v.id() <= out_id {
            adjoint[v.id()].clone()
        } else {
            None
        };
        results.push(match r {
            Some(g) => g,
            None => tape.leaf(Tensor::zeros(v.shape()), create_graph),
        });
    }
    Ok(results)
}

/// Hessian-vector product of a scalar loss at `x` with direction `v`,
/// computed as the gradient of `grad(loss) . v` (double backprop).
pub fn hvp<F>(loss_at: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: FnOnce(&Tape, &Var) -> Result<Var>,
{
    if x.shape() != v.shape() {
        return Err(AutodiffError::ShapeMismatch(format!(
            "hvp direction {:?} vs point {:?}",
            v.shape(),
            x.shape()
        )));
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = loss_at(&tape, &xv)?;
    let g = grad(&loss, &[&xv], true)?.remove(0);
    let s = g.dot(&tape.constant(v.clone()))?;
    let hv = grad(&s, &[&xv], false)?.remove(0);
    Ok(hv.tensor())
}
