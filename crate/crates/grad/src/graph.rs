//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in evaluation order. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints.
//! Parameters are referenced by id rather than copied, so one [`ParamStore`]
//! can back many graphs built from the same weights.

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// tanh approximation.
    Gelu,
    Silu,
    Softplus,
    Square,
    Sqrt,
    Powf(f64),
    LeakyRelu(f64),
    Neg,
}

enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SelectRows {
        base: Var,
        fill: Var,
        mask: Vec<bool>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    RmsNormRows {
        x: Var,
        inv: Vec<f64>,
    },
    LayerNormRows {
        x: Var,
        inv: Vec<f64>,
    },
    Rotate {
        x: Var,
        cos: Tensor,
        sin: Tensor,
        n_heads: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Adjoints for every node of a finished backward pass.
pub struct Grads {
    node: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.node.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    /// A graph with no parameter store; only constants and inputs.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.expect("param node without store").get(ParamId(*i)),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("graph has no parameter store");
        assert!(id.0 < store.len(), "unknown parameter id");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives an adjoint; used for gradient checks w.r.t. inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a[r×c] + row[1×c]`, broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a 1xC row");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_slice_mut(r).iter_mut().zip(rv.data()) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `a[r×c] ⊙ row[1×c]`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "mul_row expects a 1xC row");
        assert_eq!(av.cols(), rv.cols(), "mul_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_slice_mut(r).iter_mut().zip(rv.data()) {
                *o *= x;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    /// `a[r×c] ⊙ col[r×1]`, broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.cols(), 1, "mul_col expects an Rx1 column");
        assert_eq!(av.rows(), cv.rows(), "mul_col height mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_slice_mut(r) {
                *o *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Exp => |x, _| x.exp(),
            Unary::Log => |x, _| x.ln(),
            Unary::Tanh => |x, _| x.tanh(),
            Unary::Sigmoid => |x, _| sigmoid(x),
            Unary::Gelu => |x, _| gelu(x),
            Unary::Silu => |x, _| x * sigmoid(x),
            Unary::Softplus => |x, _| softplus(x),
            Unary::Square => |x, _| x * x,
            Unary::Sqrt => |x, _| x.sqrt(),
            Unary::Powf(_) => |x, p| x.powf(p),
            Unary::LeakyRelu(_) => |x, s| if x >= 0.0 { x } else { s * x },
            Unary::Neg => |x, _| -x,
        };
        let p = match kind {
            Unary::Powf(p) | Unary::LeakyRelu(p) => p,
            _ => 0.0,
        };
        let v = self.value(a).map(|x| f(x, p));
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, kind), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Unary::Powf(p))
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let lse = log_sum_exp(row);
            for x in row {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// Sum across columns: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let v = Tensor::from_vec(av.rows(), 1, data);
        let ng = self.ng(a);
        self.push(v, Op::SumCols(a), ng)
    }

    /// Mean down the rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let v = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            data.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let v = Tensor::from_vec(av.rows(), len, data);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row_slice(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row `i` of the output is row `index[i]` of `a` (embedding lookup,
    /// repetition, upsampling).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let av = self.value(a);
        assert!(index.iter().all(|&i| i < av.rows()), "gather_rows index out of range");
        let v = av.select_rows(index);
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, index.to_vec()), ng)
    }

    /// Rows where `mask` is set are replaced by the single row `fill`.
    pub fn select_rows(&mut self, base: Var, fill: Var, mask: &[bool]) -> Var {
        let (bv, fv) = (self.value(base), self.value(fill));
        assert_eq!(fv.rows(), 1, "select_rows fill must be a row");
        assert_eq!(bv.cols(), fv.cols(), "select_rows width mismatch");
        assert_eq!(bv.rows(), mask.len(), "select_rows mask length mismatch");
        let mut out = bv.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out.row_slice_mut(r).copy_from_slice(fv.data());
            }
        }
        let ng = self.ng(base) || self.ng(fill);
        self.push(
            out,
            Op::SelectRows {
                base,
                fill,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Unfolds `x[T×C]` into `[T_out × (kernel·C)]` patches with zero padding;
    /// patch column `k·C + c` holds `x[t·stride + k − pad, c]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        assert!(kernel >= 1 && stride >= 1);
        let xv = self.value(x);
        let (t, c) = xv.shape();
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Tensor::zeros(t_out, kernel * c);
        for o in 0..t_out {
            let row = out.row_slice_mut(o);
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    row[k * c..(k + 1) * c].copy_from_slice(xv.row_slice(src as usize));
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Row-wise `x / max(rms(x), eps)`.
    pub fn rms_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = out.row_slice_mut(r);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64).sqrt();
            // a negative stored value marks the clamped branch
            let (scale, tag) = if rms > eps { (1.0 / rms, 1.0 / rms) } else { (1.0 / eps, -1.0 / eps) };
            for v in row.iter_mut() {
                *v *= scale;
            }
            inv.push(tag);
        }
        let ng = self.ng(x);
        self.push(out, Op::RmsNormRows { x, inv }, ng)
    }

    /// Row-wise `(x − mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = out.row_slice_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv.push(s);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNormRows { x, inv }, ng)
    }

    /// Pairwise rotation: within each head, columns `(2i, 2i+1)` of row `r`
    /// rotate by the angle whose cosine/sine are `cos[r,i]`, `sin[r,i]`.
    pub fn rotate_pairs(&mut self, x: Var, cos: Tensor, sin: Tensor, n_heads: usize) -> Var {
        let v = rotate_pairs(self.value(x), &cos, &sin, n_heads, false);
        let ng = self.ng(x);
        self.push(
            v,
            Op::Rotate {
                x,
                cos,
                sin,
                n_heads,
            },
            ng,
        )
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut params = ParamGrads::zeros_like(self.params.unwrap_or(&EMPTY_STORE));
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Grads { node: grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut ParamGrads) {
        let out = self.nodes[i].value.as_ref();
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(p) => params.accumulate(*p, g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let s = g.mean_rows().map(|x| x * g.rows() as f64);
                    acc(*row, s);
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (o, x) in ga.row_slice_mut(r).iter_mut().zip(rv.data()) {
                            *o *= x;
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*row) {
                    let av = self.value(*a);
                    let mut gr = vec![0.0; rv.cols()];
                    for r in 0..g.rows() {
                        for ((o, x), y) in gr.iter_mut().zip(g.row_slice(r)).zip(av.row_slice(r)) {
                            *o += x * y;
                        }
                    }
                    acc(*row, Tensor::from_vec(1, rv.cols(), gr));
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s = cv.data()[r];
                        for o in ga.row_slice_mut(r) {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*col) {
                    let av = self.value(*a);
                    let gc = (0..g.rows())
                        .map(|r| g.row_slice(r).iter().zip(av.row_slice(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, Tensor::from_vec(g.rows(), 1, gc));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, av, true, g, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(1.0, g, false, bv, false, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(1.0, g, true, av, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = out.expect("unary output");
                let d = match *kind {
                    Unary::Exp => y.zip_map(g, |y, g| y * g),
                    Unary::Log => x.zip_map(g, |x, g| g / x),
                    Unary::Tanh => y.zip_map(g, |y, g| g * (1.0 - y * y)),
                    Unary::Sigmoid => y.zip_map(g, |y, g| g * y * (1.0 - y)),
                    Unary::Gelu => x.zip_map(g, |x, g| g * gelu_grad(x)),
                    Unary::Silu => x.zip_map(g, |x, g| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    }),
                    Unary::Softplus => x.zip_map(g, |x, g| g * sigmoid(x)),
                    Unary::Square => x.zip_map(g, |x, g| 2.0 * x * g),
                    Unary::Sqrt => y.zip_map(g, |y, g| g * 0.5 / y),
                    Unary::Powf(p) => x.zip_map(g, |x, g| g * p * x.powf(p - 1.0)),
                    Unary::LeakyRelu(s) => x.zip_map(g, |x, g| if x >= 0.0 { g } else { s * g }),
                    Unary::Neg => g.map(|g| -g),
                };
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = out.expect("softmax output");
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in d.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = out.expect("log-softmax output");
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, y), g) in d.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = g - y.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c).max(1) as f64;
                acc(*a, Tensor::filled(r, c, g.item() / n));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i).fill(g.data()[i]);
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                let s = 1.0 / r.max(1) as f64;
                for i in 0..r {
                    for (o, x) in d.row_slice_mut(i).iter_mut().zip(g.data()) {
                        *o = x * s;
                    }
                }
                acc(*a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i)[*start..start + g.cols()].copy_from_slice(g.row_slice(i));
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.ng(p) {
                        let slice = g.data()[off * c..(off + rows) * c].to_vec();
                        acc(p, Tensor::from_vec(rows, c, slice));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            d.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + pc]);
                        }
                        acc(p, d);
                    }
                    off += pc;
                }
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (o, &src) in index.iter().enumerate() {
                    for (x, y) in d.row_slice_mut(src).iter_mut().zip(g.row_slice(o)) {
                        *x += y;
                    }
                }
                acc(*a, d);
            }
            Op::SelectRows { base, fill, mask } => {
                if self.ng(*base) {
                    let mut d = g.clone();
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            d.row_slice_mut(r).fill(0.0);
                        }
                    }
                    acc(*base, d);
                }
                if self.ng(*fill) {
                    let mut d = vec![0.0; g.cols()];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for (x, y) in d.iter_mut().zip(g.row_slice(r)) {
                                *x += y;
                            }
                        }
                    }
                    acc(*fill, Tensor::from_vec(1, g.cols(), d));
                }
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (t, c) = self.shape(*x);
                let mut d = Tensor::zeros(t, c);
                for o in 0..g.rows() {
                    let row = g.row_slice(o);
                    for k in 0..*kernel {
                        let src = (o * stride + k) as isize - *pad as isize;
                        if src >= 0 && (src as usize) < t {
                            for (x, y) in d.row_slice_mut(src as usize).iter_mut().zip(&row[k * c..(k + 1) * c]) {
                                *x += y;
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::RmsNormRows { x, inv } => {
                let y = out.expect("rmsnorm output");
                let mut d = Tensor::zeros(y.rows(), y.cols());
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let s = inv[r];
                    if s > 0.0 {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / n;
                        for ((o, y), g) in d.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (g - y * dot) * s;
                        }
                    } else {
                        for (o, g) in d.row_slice_mut(r).iter_mut().zip(gr) {
                            *o = g * -s;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::LayerNormRows { x, inv } => {
                let y = out.expect("layernorm output");
                let mut d = Tensor::zeros(y.rows(), y.cols());
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = yr.iter().zip(gr).map(|(y, g)| y * g).sum::<f64>() / n;
                    for ((o, y), g) in d.row_slice_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (g - mg - y * mgy) * inv[r];
                    }
                }
                acc(*x, d);
            }
            Op::Rotate { x, cos, sin, n_heads } => {
                acc(*x, rotate_pairs(g, cos, sin, *n_heads, true));
            }
        }
    }
}

static EMPTY_STORE: std::sync::LazyLock<ParamStore> = std::sync::LazyLock::new(ParamStore::new);

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// Applies (or with `inverse`, undoes) the per-row pairwise rotation used by
/// rotary position encodings.
pub fn rotate_pairs(x: &Tensor, cos: &Tensor, sin: &Tensor, n_heads: usize, inverse: bool) -> Tensor {
    let (rows, cols) = x.shape();
    assert!(n_heads >= 1 && cols % (2 * n_heads) == 0, "width must split into heads of even size");
    let half = cols / n_heads / 2;
    assert_eq!(cos.shape(), (rows, half), "rotation table shape");
    assert_eq!(sin.shape(), (rows, half), "rotation table shape");
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for r in 0..rows {
        let (cr, sr) = (cos.row_slice(r), sin.row_slice(r));
        let row = out.row_slice_mut(r);
        for h in 0..n_heads {
            let base = h * 2 * half;
            for i in 0..half {
                let (a, b) = (row[base + 2 * i], row[base + 2 * i + 1]);
                let (c, s) = (cr[i], sign * sr[i]);
                row[base + 2 * i] = a * c - b * s;
                row[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
