//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are created with
//! [`Graph::param`] (tracked) or [`Graph::constant`] (untracked); every op
//! appends one node holding its value and a local backward rule. Calling
//! [`Graph::backward`] on a scalar sweeps the nodes once in reverse order.
//!
//! ```
//! use jointgram::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.param(Tensor::scalar(4.0));
//! let xy = g.mul(x, y).unwrap();
//! let grads = g.backward(xy).unwrap();
//! assert_eq!(grads.get(x).item(), 4.0);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: reduction over an empty axis of shape {shape:?}")]
    EmptyAxis { op: &'static str, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` for a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[self.shape.len() - 1];
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn reshaped(mut self, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

/// `log Σ exp(xᵢ)` with max subtraction; `-inf` for an empty slice.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Local backward rule: `(grad_out, out_value, input_values) -> input grads`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[Rc<Tensor>]) -> Vec<Tensor>>;

/// Maps (lane, position) to a flat element index.
type LaneIndex = Box<dyn Fn(usize, usize) -> usize>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Define-by-run tape.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    check_finite: Cell<bool>,
    zero_norm_events: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl Graph {
    /// A tape with non-finite checking enabled.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            check_finite: Cell::new(true),
            zero_norm_events: Cell::new(0),
        }
    }

    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of cosine evaluations that hit a zero-norm vector.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events.get()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            parents: vec![],
            backward: None,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Appends an op node with a caller-supplied backward rule.
    pub fn custom(
        &self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape.clone();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(gout) = grads[i].take() else { continue };
            let inputs: Vec<Rc<Tensor>> =
                node.parents.iter().map(|&p| Rc::clone(&nodes[p].value)).collect();
            let pgrads = bw(&gout, &node.value, &inputs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(gout);
        }
        let shapes = nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(&self.value(b), |x, y| x + y);
        self.custom(
            "add",
            &[a, b],
            v,
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(&self.value(b), |x, y| x - y);
        self.custom(
            "sub",
            &[a, b],
            v,
            Box::new(|g, _, _| vec![g.clone(), g.map(|x| -x)]),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(&self.value(b), |x, y| x * y);
        self.custom(
            "mul",
            &[a, b],
            v,
            Box::new(|g, _, ins| vec![g.zip(&ins[1], |g, y| g * y), g.zip(&ins[0], |g, x| g * x)]),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.custom("scale", &[a], v, Box::new(move |g, _, _| vec![g.map(|x| x * c)]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.custom("add_scalar", &[a], v, Box::new(|g, _, _| vec![g.clone()]))
    }

    /// Sum of any number of same-shaped tensors.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(TensorError::EmptyAxis {
            op: "add_n",
            shape: vec![0],
        })?;
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
        }
        let mut acc = (*self.value(first)).clone();
        for &x in &xs[1..] {
            for (a, b) in acc.data.iter_mut().zip(&self.value(x).data) {
                *a += b;
            }
        }
        let k = xs.len();
        self.custom("add_n", xs, acc, Box::new(move |g, _, _| vec![g.clone(); k]))
    }

    /// `x[r, c] + b[c]`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (r, c) = xv.dims2().ok_or_else(|| TensorError::Shape {
            op: "add_row",
            left: xv.shape.clone(),
            right: bv.shape.clone(),
        })?;
        if bv.len() != c || bv.shape.len() > 2 || (bv.shape.len() == 2 && bv.shape[0] != 1) {
            return Err(TensorError::Shape {
                op: "add_row",
                left: xv.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let mut out = (*xv).clone();
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] += bv.data[j];
            }
        }
        let bshape = bv.shape.clone();
        self.custom(
            "add_row",
            &[x, b],
            out,
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g.data[i * c + j];
                    }
                }
                vec![g.clone(), Tensor::new(bshape.clone(), gb).unwrap()]
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || TensorError::Shape {
            op: "matmul",
            left: av.shape.clone(),
            right: bv.shape.clone(),
        };
        if av.shape.len() != 2 || bv.shape.len() != 2 {
            return Err(err());
        }
        let (m, k) = (av.shape[0], av.shape[1]);
        let (k2, n) = (bv.shape[0], bv.shape[1]);
        if k != k2 {
            return Err(err());
        }
        let out = Tensor {
            shape: vec![m, n],
            data: matmul_raw(&av.data, &bv.data, m, k, n),
        };
        self.custom(
            "matmul",
            &[a, b],
            out,
            Box::new(move |g, _, ins| {
                let bt = transpose_raw(&ins[1].data, k, n);
                let ga = matmul_raw(&g.data, &bt, m, n, k);
                let at = transpose_raw(&ins[0].data, m, k);
                let gb = matmul_raw(&at, &g.data, k, m, n);
                vec![
                    Tensor {
                        shape: vec![m, k],
                        data: ga,
                    },
                    Tensor {
                        shape: vec![k, n],
                        data: gb,
                    },
                ]
            }),
        )
    }

    /// `x · w + b` for `x: [r, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = match av.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::Axis {
                    op: "transpose",
                    axis: 1,
                    shape: av.shape.clone(),
                })
            }
        };
        let out = Tensor {
            shape: vec![c, r],
            data: transpose_raw(&av.data, r, c),
        };
        self.custom(
            "transpose",
            &[a],
            out,
            Box::new(move |g, _, _| {
                vec![Tensor {
                    shape: vec![r, c],
                    data: transpose_raw(&g.data, c, r),
                }]
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if n != av.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: av.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let orig = av.shape.clone();
        let out = (*av).clone().reshaped(shape.to_vec());
        self.custom(
            "reshape",
            &[a],
            out,
            Box::new(move |g, _, _| vec![g.clone().reshaped(orig.clone())]),
        )
    }

    /// Concatenation of 1-D tensors, or of 2-D tensors along `axis` 0 or 1.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.value(x)).collect();
        let first = vals.first().ok_or(TensorError::EmptyAxis {
            op: "concat",
            shape: vec![],
        })?;
        let rank = first.shape.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: first.shape.clone(),
            });
        }
        for v in &vals[1..] {
            let ok = v.shape.len() == rank
                && v.shape.iter().enumerate().all(|(d, &e)| d == axis || e == first.shape[d]);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: first.shape.clone(),
                    right: v.shape.clone(),
                });
            }
        }
        let extents: Vec<usize> = vals.iter().map(|v| v.shape[axis]).collect();
        let total: usize = extents.iter().sum();
        if rank == 1 || axis == 0 {
            let mut shape = first.shape.clone();
            shape[axis] = total;
            let data: Vec<f64> = vals.iter().flat_map(|v| v.data.iter().copied()).collect();
            let sizes: Vec<usize> = vals.iter().map(|v| v.len()).collect();
            let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape.clone()).collect();
            return self.custom(
                "concat",
                xs,
                Tensor { shape, data },
                Box::new(move |g, _, _| {
                    let mut off = 0;
                    sizes
                        .iter()
                        .zip(&shapes)
                        .map(|(&s, sh)| {
                            let t = Tensor {
                                shape: sh.clone(),
                                data: g.data[off..off + s].to_vec(),
                            };
                            off += s;
                            t
                        })
                        .collect()
                }),
            );
        }
        let rows = first.shape[0];
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        self.custom(
            "concat",
            xs,
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Box::new(move |g, _, _| {
                let mut out: Vec<Tensor> =
                    extents.iter().map(|&e| Tensor::zeros(&[rows, e])).collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (t, &e) in out.iter_mut().zip(&extents) {
                        t.data[r * e..(r + 1) * e]
                            .copy_from_slice(&g.data[r * total + off..r * total + off + e]);
                        off += e;
                    }
                }
                out
            }),
        )
    }

    /// Contiguous range of the flattened values, returned as a 1-D tensor.
    pub fn slice(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.len() {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                extent: av.len(),
            });
        }
        let n = av.len();
        let shape = av.shape.clone();
        let out = Tensor::vector(av.data[start..end].to_vec());
        self.custom(
            "slice",
            &[a],
            out,
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; n];
                d[start..end].copy_from_slice(&g.data);
                vec![Tensor {
                    shape: shape.clone(),
                    data: d,
                }]
            }),
        )
    }

    /// One element of the flattened values, as a scalar.
    pub fn index(&self, a: Var, i: usize) -> Result<Var> {
        let s = self.slice(a, i, i + 1)?;
        self.reshape(s, &[])
    }

    /// Gathers rows of a 2-D tensor (repeats allowed).
    pub fn rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = match av.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(TensorError::Axis {
                    op: "rows",
                    axis: 0,
                    shape: av.shape.clone(),
                })
            }
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "rows",
                index: bad,
                extent: r,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let idx = idx.to_vec();
        let out = Tensor {
            shape: vec![idx.len(), c],
            data,
        };
        self.custom(
            "rows",
            &[a],
            out,
            Box::new(move |g, _, _| {
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data[k * c + j];
                    }
                }
                vec![Tensor {
                    shape: vec![r, c],
                    data: d,
                }]
            }),
        )
    }

    /// Gathers columns of a 2-D tensor (repeats allowed).
    pub fn cols(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.transpose(a)?;
        let r = self.rows(t, idx)?;
        self.transpose(r)
    }

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let v = self.value(a).map(f);
        self.custom(
            op,
            &[a],
            v,
            Box::new(move |g, out, ins| {
                let data = g
                    .data
                    .iter()
                    .zip(&ins[0].data)
                    .zip(&out.data)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Tensor {
                    shape: g.shape.clone(),
                    data,
                }]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, |x, _| 1.0 / x)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape.clone();
        let s = av.data.iter().sum();
        self.custom(
            "sum",
            &[a],
            Tensor::scalar(s),
            Box::new(move |g, _, _| vec![Tensor::filled(&shape, g.item())]),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean",
                shape: self.shape(a),
            });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Lanes along `axis`: returns (lane count, lane length, element index fn).
    fn lanes(
        &self,
        op: &'static str,
        t: &Tensor,
        axis: usize,
    ) -> Result<(usize, usize, LaneIndex)> {
        match (t.shape.as_slice(), axis) {
            ([n], 0) => Ok((1, *n, Box::new(|_, j| j))),
            ([_, c], 1) => {
                let (r, c) = (t.shape[0], *c);
                Ok((r, c, Box::new(move |l, j| l * c + j)))
            }
            ([r, c], 0) => {
                let (r, c) = (*r, *c);
                Ok((c, r, Box::new(move |l, j| j * c + l)))
            }
            _ => Err(TensorError::Axis {
                op,
                axis,
                shape: t.shape.clone(),
            }),
        }
    }

    /// Log-normalizes along `axis` with max-subtracted log-sum-exp.
    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (nl, len, at) = self.lanes("log_softmax", &av, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis {
                op: "log_softmax",
                shape: av.shape.clone(),
            });
        }
        let mut out = (*av).clone();
        let mut lane = vec![0.0; len];
        for l in 0..nl {
            for (j, x) in lane.iter_mut().enumerate() {
                *x = av.data[at(l, j)];
            }
            let lse = logsumexp_slice(&lane);
            for j in 0..len {
                out.data[at(l, j)] = av.data[at(l, j)] - lse;
            }
        }
        self.custom(
            "log_softmax",
            &[a],
            out,
            Box::new(move |g, out, _| {
                let mut gi = g.clone();
                for l in 0..nl {
                    let gs: f64 = (0..len).map(|j| g.data[at(l, j)]).sum();
                    for j in 0..len {
                        let k = at(l, j);
                        gi.data[k] = g.data[k] - out.data[k].exp() * gs;
                    }
                }
                vec![gi]
            }),
        )
    }

    /// `softmax = exp(log_softmax)`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let l = self.log_softmax(a, axis)?;
        self.exp(l)
    }

    /// Reduces `axis` with log-sum-exp. An empty axis yields `-inf`, which is
    /// reported as non-finite when checking is on.
    pub fn logsumexp(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (nl, len, at) = self.lanes("logsumexp", &av, axis)?;
        let mut lane = vec![0.0; len];
        let mut out = Vec::with_capacity(nl);
        for l in 0..nl {
            for (j, x) in lane.iter_mut().enumerate() {
                *x = av.data[at(l, j)];
            }
            out.push(logsumexp_slice(&lane));
        }
        let shape = if av.shape.len() == 1 { vec![] } else { vec![nl] };
        let ishape = av.shape.clone();
        self.custom(
            "logsumexp",
            &[a],
            Tensor { shape, data: out },
            Box::new(move |g, out, ins| {
                let mut gi = Tensor::zeros(&ishape);
                for l in 0..nl {
                    for j in 0..len {
                        let k = at(l, j);
                        gi.data[k] = g.data[l] * (ins[0].data[k] - out.data[l]).exp();
                    }
                }
                vec![gi]
            }),
        )
    }

    /// Pairwise cosine similarities between rows of `a: [m, d]` and `b: [k, d]`.
    /// A zero-norm row gives cosine 0 (and zero gradient) and is counted in
    /// [`Graph::zero_norm_events`].
    pub fn cosine_matrix(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let err = || TensorError::Shape {
            op: "cosine_matrix",
            left: av.shape.clone(),
            right: bv.shape.clone(),
        };
        let ((m, d), (k, d2)) = match (av.shape.as_slice(), bv.shape.as_slice()) {
            ([m, d], [k, d2]) => ((*m, *d), (*k, *d2)),
            _ => return Err(err()),
        };
        if d != d2 {
            return Err(err());
        }
        let norm = |t: &Tensor, i: usize| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        let na: Vec<f64> = (0..m).map(|i| norm(&av, i)).collect();
        let nb: Vec<f64> = (0..k).map(|j| norm(&bv, j)).collect();
        let zeros = na.iter().filter(|&&x| x == 0.0).count() * k
            + nb.iter().filter(|&&x| x == 0.0).count() * m;
        self.zero_norm_events.set(self.zero_norm_events.get() + zeros);
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                if na[i] > 0.0 && nb[j] > 0.0 {
                    let dot: f64 = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| x * y).sum();
                    out[i * k + j] = dot / (na[i] * nb[j]);
                }
            }
        }
        self.custom(
            "cosine_matrix",
            &[a, b],
            Tensor {
                shape: vec![m, k],
                data: out,
            },
            Box::new(move |g, out, ins| {
                let (av, bv) = (&ins[0], &ins[1]);
                let mut ga = Tensor::zeros(&[m, d]);
                let mut gb = Tensor::zeros(&[k, d]);
                for i in 0..m {
                    for j in 0..k {
                        if na[i] == 0.0 || nb[j] == 0.0 {
                            continue;
                        }
                        let gij = g.data[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.data[i * k + j];
                        let (ar, br) = (av.row(i), bv.row(j));
                        let inv = 1.0 / (na[i] * nb[j]);
                        for t in 0..d {
                            ga.data[i * d + t] +=
                                gij * (br[t] * inv - c * ar[t] / (na[i] * na[i]));
                            gb.data[j * d + t] +=
                                gij * (ar[t] * inv - c * br[t] / (nb[j] * nb[j]));
                        }
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    /// Scales each row of `x: [m, d]` to unit L2 norm. Zero rows stay zero
    /// and are counted in [`Graph::zero_norm_events`].
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, d) = match xv.shape.as_slice() {
            [m, d] => (*m, *d),
            _ => {
                return Err(TensorError::Shape {
                    op: "normalize_rows",
                    left: xv.shape.clone(),
                    right: vec![],
                })
            }
        };
        let norms: Vec<f64> = (0..m)
            .map(|i| xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let zeros = norms.iter().filter(|&&n| n == 0.0).count();
        self.zero_norm_events.set(self.zero_norm_events.get() + zeros);
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            if norms[i] > 0.0 {
                for t in 0..d {
                    out[i * d + t] = xv.data[i * d + t] / norms[i];
                }
            }
        }
        self.custom(
            "normalize_rows",
            &[x],
            Tensor {
                shape: vec![m, d],
                data: out,
            },
            Box::new(move |g, out, _| {
                let mut gx = Tensor::zeros(&[m, d]);
                for i in 0..m {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let y = out.row(i);
                    let gr = g.row(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for t in 0..d {
                        gx.data[i * d + t] = (gr[t] - y[t] * dot) / norms[i];
                    }
                }
                vec![gx]
            }),
        )
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest `|autodiff − fd| / max(1, |fd|)` over all checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares tape gradients of a scalar function against central differences
/// with step `h`, for every coordinate of every input.
pub fn gradcheck<F, E>(inputs: &[Tensor], h: f64, f: F) -> std::result::Result<GradcheckReport, E>
where
    F: Fn(&Graph, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor]| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.value(out).item())
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for k in 0..xs[ti].len() {
            let orig = xs[ti].data[k];
            xs[ti].data[k] = orig + h;
            let fp = eval(&xs)?;
            xs[ti].data[k] = orig - h;
            let fm = eval(&xs)?;
            xs[ti].data[k] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (analytic.data[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity_returns_input() {
        let g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let x = g.constant(Tensor::matrix(2, 1, vec![0.3, -7.0]).unwrap());
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -7.0]);
    }

    #[test]
    fn add_and_concat_arithmetic() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(g.value(g.add(a, b).unwrap()).data(), &[4.0, 6.0]);
        let c = g.constant(Tensor::vector(vec![1.0]));
        let d = g.constant(Tensor::vector(vec![2.0, 3.0]));
        assert_eq!(g.value(g.concat(&[c, d], 0).unwrap()).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn log_softmax_cases() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.value(g.log_softmax(x, 0).unwrap());
        for &v in y.data() {
            assert_abs_diff_eq!(v, 0.5f64.ln(), epsilon = 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.value(g.log_softmax(x, 0).unwrap());
        assert!(y.is_finite());
        let s: f64 = y.data().iter().map(|v| v.exp()).sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_softmax_matches_extended_precision_reference() {
        // x - ln(e + e^2 + e^3), evaluated at 50 significant digits.
        let reference = [-2.40760596444438, -1.4076059644443804, -0.4076059644443803];
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.value(g.log_softmax(x, 0).unwrap());
        for (a, b) in y.data().iter().zip(reference) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn log_softmax_rejects_empty_axis() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(
            g.log_softmax(x, 0),
            Err(TensorError::EmptyAxis { .. })
        ));
        let y = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.log_softmax(y, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn logsumexp_cases() {
        let g = Graph::new();
        let lse = |v: Vec<f64>| g.value(g.logsumexp(g.constant(Tensor::vector(v)), 0).unwrap()).item();
        assert_abs_diff_eq!(lse(vec![0.0, 0.0]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(lse(vec![-3.25]), -3.25);
        assert_abs_diff_eq!(lse(vec![-1e9, 0.0]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn logsumexp_empty_is_negative_infinity_and_flagged() {
        assert_eq!(logsumexp_slice(&[]), f64::NEG_INFINITY);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.logsumexp(x, 0), Err(TensorError::NonFinite { .. })));
        g.set_check_finite(false);
        let v = g.logsumexp(x, 0).unwrap();
        assert_eq!(g.value(v).item(), f64::NEG_INFINITY);
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(4.0));
        let p = g.mul(x, y).unwrap();
        let gr = g.backward(p).unwrap();
        assert_eq!(gr.get(x).item(), 4.0);
        assert_eq!(gr.get(y).item(), 3.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let l = g.logsumexp(x, 0).unwrap();
        let gr = g.backward(l).unwrap().get(x);
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        for (gv, xv) in gr.data().iter().zip([0.5f64, -1.0, 2.0]) {
            assert_abs_diff_eq!(*gv, xv.exp() / z, epsilon = 1e-15);
        }
    }

    #[test]
    fn unreachable_tensors_get_zero_gradient() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let s = g.sum(x).unwrap();
        let gr = g.backward(s).unwrap();
        assert!(!gr.reached(unused));
        assert_eq!(gr.get(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(
            g.backward(x).err(),
            Some(TensorError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn non_finite_values_are_surfaced() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0]));
        assert!(matches!(g.ln(x), Err(TensorError::NonFinite { op: "ln" })));
    }

    #[test]
    fn cosine_zero_norm_is_zero_and_counted() {
        let g = Graph::new();
        let a = g.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let b = g.param(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let c = g.cosine_matrix(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0]);
        assert_eq!(g.zero_norm_events(), 1);
    }

    #[test]
    fn normalize_rows_unit_norm_and_gradient() {
        let x = Tensor::matrix(3, 2, vec![3.0, 4.0, 0.0, 0.0, -1.0, 0.5]).unwrap();
        let g = Graph::new();
        let xv = g.param(x.clone());
        let y = g.value(g.normalize_rows(xv).unwrap());
        assert_abs_diff_eq!(y.at(0, 0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y.at(0, 1), 0.8, epsilon = 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(g.zero_norm_events(), 1);
        let w = Tensor::matrix(3, 2, vec![0.3, -1.1, 0.7, 0.2, 1.5, -0.4]).unwrap();
        let x = Tensor::matrix(3, 2, vec![3.0, 4.0, 0.2, -0.9, -1.0, 0.5]).unwrap();
        let report = gradcheck(&[x], 1e-6, |g, v| {
            let y = g.normalize_rows(v[0])?;
            let w = g.constant(w.clone());
            g.sum(g.mul(y, w)?)
        })
        .unwrap();
        assert!(report.passes(1e-7), "{report:?}");
    }
}
