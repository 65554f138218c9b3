use cantus_grad::{Graph, Tensor, Var};

/// Deterministic pseudo-random fill, away from kinks at zero.
fn fill(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..rows * cols)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            let v = u * 2.0 - 1.0;
            if v.abs() < 0.05 {
                v + 0.1
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Central differences (h = 1e-5) against the tape, every coordinate of every input.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let analytic: Vec<Tensor> = {
        let mut g = Graph::detached();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    };
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::detached();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars);
        g.value(loss).item()
    };
    let h = 1e-5;
    for (which, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[which].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-6, "input {which} coord {k}: analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum so every output coordinate carries a distinct adjoint.
fn weigh(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(fill(r, c, seed));
    let p = g.mul(v, w);
    g.sum_all(p)
}

#[test]
fn elementwise_binary_ops() {
    let ins = [fill(3, 4, 1), fill(3, 4, 2)];
    check(&ins, |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        weigh(g, m, 9)
    });
}

#[test]
fn broadcast_ops() {
    let ins = [fill(3, 4, 1), fill(1, 4, 2), fill(3, 1, 3)];
    check(&ins, |g, v| {
        let a = g.add_row(v[0], v[1]);
        let b = g.mul_row(a, v[1]);
        let c = g.mul_col(b, v[2]);
        let d = g.scale(c, -1.7);
        let e = g.add_scalar(d, 0.3);
        weigh(g, e, 4)
    });
}

#[test]
fn matmul_family() {
    let ins = [fill(3, 5, 1), fill(5, 2, 2), fill(4, 5, 3)];
    check(&ins, |g, v| {
        let a = g.matmul(v[0], v[1]);
        let b = g.matmul_t(v[0], v[2]);
        let t = g.transpose(b);
        let wa = weigh(g, a, 5);
        let wt = weigh(g, t, 6);
        g.add(wa, wt)
    });
}

#[test]
fn smooth_unaries() {
    use cantus_grad::Unary::*;
    for kind in [Exp, Tanh, Sigmoid, Gelu, Silu, Softplus, Square, Neg, LeakyRelu(0.2)] {
        check(&[fill(2, 5, 7)], |g, v| {
            let y = g.unary(v[0], kind);
            weigh(g, y, 8)
        });
    }
    for kind in [Log, Sqrt, Powf(-0.5), Powf(1.5)] {
        let pos = fill(2, 5, 7).map(|x| x.abs() + 0.5);
        check(&[pos], |g, v| {
            let y = g.unary(v[0], kind);
            weigh(g, y, 8)
        });
    }
}

#[test]
fn softmax_and_log_softmax() {
    check(&[fill(3, 4, 11)], |g, v| {
        let s = g.softmax_rows(v[0]);
        let l = g.log_softmax_rows(v[0]);
        let a = weigh(g, s, 12);
        let b = weigh(g, l, 13);
        g.add(a, b)
    });
}

#[test]
fn reductions() {
    check(&[fill(3, 4, 21)], |g, v| {
        let a = g.sum_cols(v[0]);
        let b = g.mean_rows(v[0]);
        let c = g.mean_all(v[0]);
        let wa = weigh(g, a, 22);
        let wb = weigh(g, b, 23);
        let s = g.add(wa, wb);
        g.add(s, c)
    });
}

#[test]
fn slicing_concat_gather_select() {
    let ins = [fill(4, 3, 31), fill(2, 3, 32), fill(1, 3, 33)];
    check(&ins, |g, v| {
        let rows = g.slice_rows(v[0], 1, 2);
        let cols = g.slice_cols(v[0], 1, 2);
        let cat = g.concat_rows(&[rows, v[1]]);
        let catc = g.concat_cols(&[cols, v[0]]);
        let gat = g.gather_rows(cat, &[3, 0, 0, 2, 1]);
        let sel = g.select_rows(v[0], v[2], &[false, true, true, false]);
        let a = weigh(g, gat, 34);
        let b = weigh(g, catc, 35);
        let c = weigh(g, sel, 36);
        let ab = g.add(a, b);
        g.add(ab, c)
    });
}

#[test]
fn im2col_with_stride_and_padding() {
    check(&[fill(7, 3, 41)], |g, v| {
        let cols = g.im2col(v[0], 5, 2, 2);
        assert_eq!(g.shape(cols), (4, 15));
        weigh(g, cols, 42)
    });
}

#[test]
fn normalizations() {
    check(&[fill(3, 6, 51)], |g, v| {
        let r = g.rms_norm_rows(v[0], 1e-6);
        let l = g.layer_norm_rows(v[0], 1e-5);
        let a = weigh(g, r, 52);
        let b = weigh(g, l, 53);
        g.add(a, b)
    });
}

#[test]
fn rotation() {
    let cos = fill(3, 2, 61).map(f64::cos);
    let sin = fill(3, 2, 61).map(f64::sin);
    check(&[fill(3, 8, 62)], move |g, v| {
        let y = g.rotate_pairs(v[0], cos.clone(), sin.clone(), 2);
        weigh(g, y, 63)
    });
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x*x + x used twice downstream
    check(&[fill(2, 2, 71)], |g, v| {
        let sq = g.mul(v[0], v[0]);
        let y = g.add(sq, v[0]);
        let z = g.mul(y, y);
        g.sum_all(z)
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::detached();
    let c = g.constant(Tensor::row(&[1.0, 2.0]));
    let x = g.input(Tensor::row(&[3.0, 4.0]));
    let p = g.mul(c, x);
    let loss = g.sum_all(p);
    let grads = g.backward(loss);
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
}
