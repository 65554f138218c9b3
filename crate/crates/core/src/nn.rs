//! Parameterized layers over the autodiff graph.

use cantus_grad::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;

pub fn normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// `y = x W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = uniform(rng, in_dim, out_dim, 1.0 / (in_dim as f64).sqrt());
        Self::from_weights(store, name, w, Some(Tensor::zeros(1, out_dim)))
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = uniform(rng, in_dim, out_dim, 1.0 / (in_dim as f64).sqrt());
        Self::from_weights(store, name, w, None)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_weights(store, name, Tensor::zeros(in_dim, out_dim), Some(Tensor::zeros(1, out_dim)))
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w: Tensor, b: Option<Tensor>) -> Self {
        let (in_dim, out_dim) = w.shape();
        let w = store.add(format!("{name}.w"), w);
        let b = b.map(|b| store.add(format!("{name}.b"), b));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// 1-D convolution over time: input `T × C_in`, output `T' × C_out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub lin: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, kernel * c_in, c_out, rng),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let cols = g.im2col(x, self.kernel, self.stride, self.pad);
        self.lin.forward(g, cols)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let t = normal(rng, rows, dim, 1.0 / (dim as f64).sqrt());
        Self {
            table: store.add(name.to_string(), t),
            rows,
        }
    }

    pub fn forward(&self, g: &mut Graph, index: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, index)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources. `rope` rotates queries and keys per head when given
/// `(cos_q, sin_q, cos_k, sin_k)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

pub struct Rotation {
    pub cos_q: Tensor,
    pub sin_q: Tensor,
    pub cos_k: Tensor,
    pub sin_k: Tensor,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            n_heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x_q: Var, x_kv: Var, rope: Option<&Rotation>) -> Var {
        let mut q = self.q.forward(g, x_q);
        let mut k = self.k.forward(g, x_kv);
        let v = self.v.forward(g, x_kv);
        if let Some(r) = rope {
            q = g.rotate_pairs(q, r.cos_q.clone(), r.sin_q.clone(), self.n_heads);
            k = g.rotate_pairs(k, r.cos_k.clone(), r.sin_k.clone(), self.n_heads);
        }
        let d = g.shape(q).1;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.o.forward(g, cat)
    }
}
