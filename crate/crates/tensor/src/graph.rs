//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already a topological order. [`Graph::backward`] walks it in
//! reverse and sums gradients across fan-out.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Abs,
    Ln,
    Exp,
    Sqrt,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, F),
    Offset(Var),
    Clamp(Var, F, F),
    Matmul { a: Var, b: Var, trans_b: bool },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Sum(Var, usize),
    SumAll(Var),
    Max { a: Var, arg: Vec<usize> },
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>, usize),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Bilinear(Var),
    L2Normalize { a: Var, norms: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_op(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        // Nodes with no differentiable input never need their op replayed.
        let op = if rg { op } else { Op::Leaf };
        self.push(value, op, rg)
    }

    /// Leaf that takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, mut t: Tensor<F>) -> Var {
        t.zero_grad();
        t.set_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Copy of `a` with the gradient path cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    fn make(&self, shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::from_vec(shape, data).expect("kernel produced consistent shape")
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(op_name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![F::zero(); numel(&out_shape)];
        kernels::for_each_broadcast(&sa, &sb, &out_shape, |i, ia, ib| {
            let (x, y) = (da[ia], db[ib]);
            out[i] = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
        });
        let t = self.make(&out_shape, out);
        Ok(self.node_op(t, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Elementwise sum with broadcasting over size-1 axes of equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let half = F::of(0.5);
        let c = F::of((2.0 / std::f64::consts::PI).sqrt());
        let k = F::of(0.044715);
        let t = self.value(a).map(|x| match kind {
            UnaryKind::Relu => {
                if x < F::zero() {
                    F::zero()
                } else {
                    x
                }
            }
            UnaryKind::Gelu => half * x * (F::one() + (c * (x + k * x * x * x)).tanh()),
            UnaryKind::Sigmoid => F::one() / (F::one() + (-x).exp()),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Sqrt => x.sqrt(),
        });
        self.node_op(t, Op::Unary(kind, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.node_op(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.node_op(t, Op::Offset(a), &[a])
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: F, a: Var) -> Var {
        let n = self.scale(a, -F::one());
        self.add_scalar(n, c)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    /// NaN passes through unchanged.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let t = self.value(a).map(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        self.node_op(t, Op::Clamp(a, lo, hi), &[a])
    }

    // ---------------------------------------------------------------- products

    fn check_matmul(&self, op: &'static str, a: Var, b: Var, trans_b: bool, rank: usize) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != rank || sb.len() != rank || (rank == 3 && sa[0] != sb[0]) {
            return Err(TensorError::shape(op, sa, sb));
        }
        let off = rank - 2;
        let (m, k) = (sa[off], sa[off + 1]);
        let (kb, n) = if trans_b {
            (sb[off + 1], sb[off])
        } else {
            (sb[off], sb[off + 1])
        };
        if k != kb {
            return Err(TensorError::shape(op, sa, sb));
        }
        let batch = if rank == 3 { sa[0] } else { 1 };
        Ok((batch, m, k, n))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (_, m, k, n) = self.check_matmul("matmul", a, b, trans_b, 2)?;
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, F::zero());
        let t = self.make(&[m, n], out);
        Ok(self.node_op(t, Op::Matmul { a, b, trans_b }, &[a, b]))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (batch, m, k, n) = self.check_matmul("bmm", a, b, trans_b, 3)?;
        let mut out = vec![F::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            F::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                F::zero(),
            );
        }
        let t = self.make(&[batch, m, n], out);
        Ok(self.node_op(t, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Batched `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `[B×m×k] · [B×n×k]ᵀ → [B×m×n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    // ---------------------------------------------------------------- normalization

    /// Softmax over the trailing axis, max-shifted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax on rank-0");
        let out = kernels::softmax_rows(self.data(a), n);
        let t = self.make(&shape, out);
        self.node_op(t, Op::Softmax(a), &[a])
    }

    /// Softmax over an arbitrary axis.
    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::config("softmax", format!("axis {axis} out of range for rank {rank}")));
        }
        if axis + 1 == rank {
            return Ok(self.softmax(a));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis, rank - 1);
        let p = self.permute(a, &perm)?;
        let s = self.softmax(p);
        self.permute(s, &perm)
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm_rows(self.data(x), self.data(gamma), self.data(beta), eps);
        let t = self.make(&shape, y);
        Ok(self.node_op(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scales each trailing-axis vector to unit L2 norm; vectors with norm below
    /// `guard` map to zero.
    pub fn l2_normalize(&mut self, a: Var, guard: F) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("l2_normalize on rank-0");
        let src = self.data(a);
        let mut out = vec![F::zero(); src.len()];
        let mut norms = Vec::with_capacity(src.len() / n.max(1));
        for (s, d) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let norm = s.iter().map(|&v| v * v).sum::<F>().sqrt();
            norms.push(norm);
            if norm >= guard {
                for (o, &v) in d.iter_mut().zip(s) {
                    *o = v / norm;
                }
            }
        }
        let t = self.make(&shape, out);
        // guarded rows carry zero norm so backward knows to skip them
        let norms = norms.into_iter().map(|x| if x >= guard { x } else { F::zero() }).collect();
        self.node_op(t, Op::L2Normalize { a, norms }, &[a])
    }

    // ---------------------------------------------------------------- reductions

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(TensorError::config(op, format!("axis {axis} out of range for {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let mut shape = self.shape(a).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        shape[axis] = 1;
        let t = self.make(&shape, out);
        Ok(self.node_op(t, Op::Sum(a, axis), &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, F::one() / F::of(len as f64)))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.node_op(t, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Maximum along `axis`, keeping it with length 1. Gradient flows to the
    /// first maximal element.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", a, axis)?;
        let mut shape = self.shape(a).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = vec![F::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let s = (o * len + l) * inner + i;
                    let d = o * inner + i;
                    if src[s] > out[d] || l == 0 || (src[s].is_nan() && !out[d].is_nan()) {
                        out[d] = src[s];
                        arg[d] = s;
                    }
                }
            }
        }
        shape[axis] = 1;
        let t = self.make(&shape, out);
        Ok(self.node_op(t, Op::Max { a, arg }, &[a]))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return Err(TensorError::shape("reshape", self.shape(a), shape));
        }
        let t = self.make(shape, self.data(a).to_vec());
        Ok(self.node_op(t, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a.flat[index[i]]`, shaped `shape`. The backward pass scatters
    /// and sums, so repeated indices are allowed.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if numel(shape) != index.len() {
            return Err(TensorError::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::config("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.data(a);
        let out = index.iter().map(|&i| src[i]).collect();
        let t = self.make(shape, out);
        Ok(self.node_op(t, Op::Gather(a, index), &[a]))
    }

    /// Axis permutation; `perm[k]` is the input axis that becomes output axis `k`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let index = permute_index(&shape, perm).ok_or_else(|| {
            TensorError::config("permute", format!("invalid permutation {perm:?} for {shape:?}"))
        })?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(a, index.into(), &out_shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(TensorError::config("transpose", "expects a matrix"));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::config("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::config("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let t = self.make(&shape, out);
        Ok(self.node_op(t, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    // ---------------------------------------------------------------- spatial

    /// Cross-correlation of `x: [Cin×H×W]` with `w: [Cout×Cin/groups×kh×kw]`,
    /// no padding. `bias`, when given, is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, groups: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(w), stride, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.cout] {
                return Err(TensorError::shape("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let out = kernels::conv2d_forward(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            &geo,
        );
        let t = self.make(&[geo.cout, geo.oh, geo.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.node_op(t, Op::Conv2d { x, w, bias, geo }, &inputs))
    }

    /// Half-pixel-center bilinear resampling of `[C×H×W]` to `[C×out_h×out_w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || out_h == 0 || out_w == 0 || shape[1] == 0 || shape[2] == 0 {
            return Err(TensorError::shape("bilinear_resize", &shape, &[out_h, out_w]));
        }
        let out = kernels::bilinear_forward(self.data(x), shape[0], shape[1], shape[2], out_h, out_w);
        let t = self.make(&[shape[0], out_h, out_w], out);
        Ok(self.node_op(t, Op::Bilinear(x), &[x]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.backward_scaled(loss, F::one())
    }

    /// Reverse pass seeded with `d loss = seed`.
    pub fn backward_scaled(&self, loss: Var, seed: F) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        // interior nodes were consumed above; only leaves keep gradients
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut acc = |v: Var, d: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&d).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![F::zero(); da.len()];
                let mut gb = vec![F::zero(); db.len()];
                kernels::for_each_broadcast(sa, sb, node.value.shape(), |i, ia, ib| {
                    let gi = g[i];
                    match kind {
                        BinaryKind::Add => {
                            ga[ia] += gi;
                            gb[ib] += gi;
                        }
                        BinaryKind::Sub => {
                            ga[ia] += gi;
                            gb[ib] -= gi;
                        }
                        BinaryKind::Mul => {
                            ga[ia] += gi * db[ib];
                            gb[ib] += gi * da[ia];
                        }
                        BinaryKind::Div => {
                            ga[ia] += gi / db[ib];
                            gb[ib] -= gi * da[ia] / (db[ib] * db[ib]);
                        }
                    }
                });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Unary(kind, a) => {
                let x = val(*a);
                let half = F::of(0.5);
                let c = F::of((2.0 / std::f64::consts::PI).sqrt());
                let k = F::of(0.044715);
                let d = x
                    .iter()
                    .zip(out)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| {
                        let dydx = match kind {
                            UnaryKind::Relu => {
                                if xv > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::Gelu => {
                                let u = c * (xv + k * xv * xv * xv);
                                let t = u.tanh();
                                let du = c * (F::one() + F::of(3.0) * k * xv * xv);
                                half * (F::one() + t) + half * xv * (F::one() - t * t) * du
                            }
                            UnaryKind::Sigmoid => yv * (F::one() - yv),
                            UnaryKind::Abs => {
                                if xv > F::zero() {
                                    F::one()
                                } else if xv < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::Ln => F::one() / xv,
                            UnaryKind::Exp => yv,
                            UnaryKind::Sqrt => half / yv,
                        };
                        gv * dydx
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Offset(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > *lo && x < *hi { gv } else { F::zero() })
                    .collect();
                acc(*a, d);
            }
            Op::Matmul { a, b, trans_b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (ga, gb) = matmul_grads(val(*a), val(*b), g, m, k, n, *trans_b);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (da, db) = (val(*a), val(*b));
                let mut ga = Vec::with_capacity(da.len());
                let mut gb = Vec::with_capacity(db.len());
                for i in 0..batch {
                    let (x, y) = matmul_grads(
                        &da[i * m * k..(i + 1) * m * k],
                        &db[i * k * n..(i + 1) * k * n],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        *trans_b,
                    );
                    ga.extend(x);
                    gb.extend(y);
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, kernels::softmax_rows_backward(out, g, n));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (dx, dg, db) = kernels::layer_norm_rows_backward(xhat, rstd, val(*gamma), g);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::L2Normalize { a, norms } => {
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![F::zero(); out.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == F::zero() {
                        continue;
                    }
                    let y = &out[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: F = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for i in 0..n {
                        d[r * n + i] = (gr[i] - y[i] * dot) / norm;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a, axis) => {
                let (outer, len, inner) = kernels::axis_split(shp(*a), *axis);
                let mut d = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Max { a, arg } => {
                let mut d = vec![F::zero(); val(*a).len()];
                for (&src, &gv) in arg.iter().zip(g) {
                    d[src] += gv;
                }
                acc(*a, d);
            }
            Op::Gather(a, index) => {
                let mut d = vec![F::zero(); val(*a).len()];
                for (&src, &gv) in index.iter().zip(g) {
                    d[src] += gv;
                }
                acc(*a, d);
            }
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = kernels::axis_split(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let len = shp(v)[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc(v, d);
                    start += len;
                }
            }
            Op::Conv2d { x, w, bias, geo } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), g, geo);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::Bilinear(x) => {
                let s = shp(*x);
                let o = node.value.shape();
                acc(*x, kernels::bilinear_backward(g, s[0], s[1], s[2], o[1], o[2]));
            }
        }
    }
}

fn matmul_grads<F: Real>(a: &[F], b: &[F], g: &[F], m: usize, k: usize, n: usize, trans_b: bool) -> (Vec<F>, Vec<F>) {
    let mut ga = vec![F::zero(); m * k];
    let mut gb = vec![F::zero(); k * n];
    if trans_b {
        // C = A·Bᵀ, B stored n×k: dA = dC·B, dB = dCᵀ·A
        F::gemm(m, n, k, g, false, b, false, &mut ga, F::zero());
        F::gemm(n, m, k, g, true, a, false, &mut gb, F::zero());
    } else {
        // dA = dC·Bᵀ, dB = Aᵀ·dC
        F::gemm(m, n, k, g, false, b, true, &mut ga, F::zero());
        F::gemm(k, m, n, a, true, g, false, &mut gb, F::zero());
    }
    (ga, gb)
}

/// Flat source index for each output element of an axis permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Option<Vec<usize>> {
    let rank = shape.len();
    if perm.len() != rank {
        return None;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return None;
        }
        seen[p] = true;
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut index = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0;
    for _ in 0..n {
        index.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Some(index)
}
