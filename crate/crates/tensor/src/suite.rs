//! Finite-difference sweep over every differentiable graph op.
//!
//! Each op is checked on three random shapes. The scalar objective is
//! `sum(r ⊙ op(x))` with a fixed random `r`, so every output element
//! contributes a distinct, non-trivial gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

type Rng = ChaCha8Rng;

fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone().reshape(g.shape(y))?);
    let p = g.mul(y, rv)?;
    Ok(g.sum_all(p))
}

/// Runs `op` on `x` and checks the gradient of a random projection of its output.
fn check_op(
    name: &str,
    x: Tensor<f64>,
    out_numel: usize,
    rng: &mut Rng,
    tol: f64,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let r = Tensor::uniform(&[out_numel], -1.0, 1.0, rng);
    grad_check(
        name,
        |g, xv| {
            let y = op(g, xv)?;
            weighted_sum(g, y, &r)
        },
        &x,
        tol,
    )
}

fn uni(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Checks every differentiable op on three shapes each at tolerance `tol`.
pub fn run_op_suite(seed: u64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    for (m, k, n) in [(2, 3, 4), (4, 5, 3), (1, 6, 2)] {
        let b = uni(&[k, n], rng);
        out.push(check_op("matmul(lhs)", uni(&[m, k], rng), m * n, rng, tol, |g, x| {
            let bv = g.constant(b.clone());
            g.matmul(x, bv)
        })?);
        let a = uni(&[m, k], rng);
        out.push(check_op("matmul(rhs)", uni(&[k, n], rng), m * n, rng, tol, |g, x| {
            let av = g.constant(a.clone());
            g.matmul(av, x)
        })?);
        let bt = uni(&[n, k], rng);
        out.push(check_op("matmul_nt", uni(&[m, k], rng), m * n, rng, tol, |g, x| {
            let bv = g.constant(bt.clone());
            g.matmul_nt(x, bv)
        })?);
    }

    for (bsz, m, k, n) in [(2, 3, 4, 2), (3, 2, 2, 5), (1, 4, 3, 3)] {
        let b = uni(&[bsz, k, n], rng);
        out.push(check_op("bmm", uni(&[bsz, m, k], rng), bsz * m * n, rng, tol, |g, x| {
            let bv = g.constant(b.clone());
            g.bmm(x, bv)
        })?);
        let a = uni(&[bsz, m, k], rng);
        out.push(check_op("bmm_nt(rhs)", uni(&[bsz, n, k], rng), bsz * m * n, rng, tol, |g, x| {
            let av = g.constant(a.clone());
            g.bmm_nt(av, x)
        })?);
    }

    // (input, weight, stride, groups)
    let convs: [([usize; 3], [usize; 4], usize, usize); 3] = [
        ([2, 4, 4], [3, 2, 2, 2], 2, 1),
        ([4, 5, 5], [4, 2, 3, 3], 1, 2),
        ([3, 8, 8], [2, 3, 4, 4], 4, 1),
    ];
    for (xs, ws, stride, groups) in convs {
        let oh = (xs[1] - ws[2]) / stride + 1;
        let ow = (xs[2] - ws[3]) / stride + 1;
        let n_out = ws[0] * oh * ow;
        let (x, w, b) = (uni(&xs, rng), uni(&ws, rng), uni(&[ws[0]], rng));
        out.push(check_op("conv2d(input)", x.clone(), n_out, rng, tol, |g, xv| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
            g.conv2d(xv, wv, Some(bv), stride, groups)
        })?);
        out.push(check_op("conv2d(weight)", w.clone(), n_out, rng, tol, |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
            g.conv2d(xv, wv, Some(bv), stride, groups)
        })?);
        out.push(check_op("conv2d(bias)", b.clone(), n_out, rng, tol, |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xv, wv, Some(bv), stride, groups)
        })?);
    }

    for (shape, oh, ow) in [([2, 3, 3], 5, 4), ([1, 4, 4], 2, 2), ([3, 2, 5], 7, 3)] {
        out.push(check_op("bilinear_resize", uni(&shape, rng), shape[0] * oh * ow, rng, tol, move |g, x| {
            g.bilinear_resize(x, oh, ow)
        })?);
    }

    for shape in [vec![3, 4], vec![2, 2, 5], vec![7]] {
        let n: usize = shape.iter().product();
        out.push(check_op("softmax", uni(&shape, rng).map(|v| 3.0 * v), n, rng, tol, |g, x| Ok(g.softmax(x)))?);
    }

    for shape in [vec![3, 4], vec![5, 8], vec![2, 3, 6]] {
        let n: usize = shape.iter().product();
        let d = *shape.last().unwrap();
        let (x, gamma, beta) = (uni(&shape, rng), uni(&[d], rng), uni(&[d], rng));
        out.push(check_op("layer_norm(input)", x.clone(), n, rng, tol, |g, xv| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            g.layer_norm(xv, gv, bv, 1e-5)
        })?);
        out.push(check_op("layer_norm(gamma)", gamma.clone(), n, rng, tol, |g, gv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(beta.clone()));
            g.layer_norm(xv, gv, bv, 1e-5)
        })?);
        out.push(check_op("layer_norm(beta)", beta.clone(), n, rng, tol, |g, bv| {
            let (xv, gv) = (g.constant(x.clone()), g.constant(gamma.clone()));
            g.layer_norm(xv, gv, bv, 1e-5)
        })?);
    }

    for shape in [vec![4, 3], vec![2, 5, 2], vec![9]] {
        let n: usize = shape.iter().product();
        out.push(check_op("relu", uni(&shape, rng), n, rng, tol, |g, x| Ok(g.relu(x)))?);
        out.push(check_op("gelu", uni(&shape, rng).map(|v| 3.0 * v), n, rng, tol, |g, x| Ok(g.gelu(x)))?);
        out.push(check_op("sigmoid", uni(&shape, rng).map(|v| 4.0 * v), n, rng, tol, |g, x| Ok(g.sigmoid(x)))?);
        out.push(check_op("abs", uni(&shape, rng), n, rng, tol, |g, x| Ok(g.abs(x)))?);
        out.push(check_op("ln", positive(&shape, rng), n, rng, tol, |g, x| Ok(g.ln(x)))?);
        out.push(check_op("exp", uni(&shape, rng), n, rng, tol, |g, x| Ok(g.exp(x)))?);
        out.push(check_op("sqrt", positive(&shape, rng), n, rng, tol, |g, x| Ok(g.sqrt(x)))?);
        out.push(check_op("clamp", uni(&shape, rng).map(|v| 2.0 * v), n, rng, tol, |g, x| {
            Ok(g.clamp(x, -0.8, 0.9))
        })?);
        out.push(check_op("scale+offset", uni(&shape, rng), n, rng, tol, |g, x| {
            let y = g.scale(x, -1.7);
            Ok(g.add_scalar(y, 0.3))
        })?);
        out.push(check_op("l2_normalize", uni(&shape, rng), n, rng, tol, |g, x| Ok(g.l2_normalize(x, 1e-8)))?);
    }

    // broadcasting binary ops, gradient w.r.t. both operands in turn
    let pairs: [(Vec<usize>, Vec<usize>); 3] = [
        (vec![3, 4], vec![3, 4]),
        (vec![2, 3], vec![1, 3]),
        (vec![4, 1, 2], vec![1, 3, 2]),
    ];
    for (sa, sb) in pairs {
        let out_shape: Vec<usize> = sa.iter().zip(&sb).map(|(a, b)| *a.max(b)).collect();
        let n: usize = out_shape.iter().product();
        let (a, b) = (uni(&sa, rng), positive(&sb, rng));
        type BinOp = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
        let ops: [(&str, BinOp); 4] = [
            ("add", |g, a, b| g.add(a, b)),
            ("sub", |g, a, b| g.sub(a, b)),
            ("mul", |g, a, b| g.mul(a, b)),
            ("div", |g, a, b| g.div(a, b)),
        ];
        for (name, f) in ops {
            out.push(check_op(&format!("{name}(lhs)"), a.clone(), n, rng, tol, |g, x| {
                let bv = g.constant(b.clone());
                f(g, x, bv)
            })?);
            out.push(check_op(&format!("{name}(rhs)"), b.clone(), n, rng, tol, |g, x| {
                let av = g.constant(a.clone());
                f(g, av, x)
            })?);
        }
    }

    for (shape, axis) in [(vec![3, 4], 1), (vec![2, 3, 4], 0), (vec![2, 5, 3], 1)] {
        let mut reduced = shape.clone();
        reduced[axis] = 1;
        let n: usize = reduced.iter().product();
        let total: usize = shape.iter().product();
        out.push(check_op("sum", uni(&shape, rng), n, rng, tol, move |g, x| g.sum(x, axis))?);
        out.push(check_op("mean", uni(&shape, rng), n, rng, tol, move |g, x| g.mean(x, axis))?);
        out.push(check_op("max", uni(&shape, rng), n, rng, tol, move |g, x| g.max(x, axis))?);
        out.push(check_op("sum_all", uni(&shape, rng), 1, rng, tol, |g, x| Ok(g.sum_all(x)))?);
        out.push(check_op("mean_all", uni(&shape, rng), 1, rng, tol, |g, x| Ok(g.mean_all(x)))?);
        out.push(check_op("softmax_axis", uni(&shape, rng), total, rng, tol, move |g, x| {
            g.softmax_axis(x, axis)
        })?);
    }

    for shape in [vec![2, 3, 4], vec![5, 2], vec![3, 1, 2, 2]] {
        let n: usize = shape.iter().product();
        let rank = shape.len();
        let perm: Vec<usize> = (0..rank).rev().collect();
        out.push(check_op("permute", uni(&shape, rng), n, rng, tol, |g, x| g.permute(x, &perm))?);
        out.push(check_op("reshape", uni(&shape, rng), n, rng, tol, |g, x| g.reshape(x, &[n]))?);
        // repeated indices: gather must sum on the way back
        let idx: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).chain(0..n / 2).collect();
        let m = idx.len();
        out.push(check_op("gather", uni(&shape, rng), m, rng, tol, |g, x| {
            g.gather(x, idx.clone().into(), &[m])
        })?);
        let other = uni(&shape, rng);
        out.push(check_op("concat", uni(&shape, rng), 3 * n, rng, tol, |g, x| {
            let o = g.constant(other.clone());
            let sq = g.mul(x, x)?;
            g.concat(&[sq, o, x], rank - 1)
        })?);
    }

    Ok(out)
}
