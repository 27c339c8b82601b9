//! Forward and backward kernels on flat row-major buffers.
//!
//! Graph nodes call into these; they are kept free of any tape bookkeeping so
//! they can be tested against scalar-loop oracles directly.

use crate::error::{Result, TensorError};
use crate::scalar::Real;

/// Geometry of a grouped 2-D cross-correlation without padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, groups: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(TensorError::shape(OP, x_shape, w_shape));
        }
        let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (cout, cin_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if stride == 0 || groups == 0 {
            return Err(TensorError::config(OP, "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(TensorError::shape(OP, x_shape, w_shape));
        }
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(TensorError::config(
                OP,
                format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
            ));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(TensorError::config(
                OP,
                format!("input {h}x{w} with kernel {kh}x{kw} is not divisible by stride {stride}"),
            ));
        }
        Ok(ConvGeometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            groups,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
}

/// Unfolds the channels of group `g` into a `patch × (oh·ow)` matrix.
fn im2col<F: Real>(x: &[F], geo: &ConvGeometry, g: usize, cols: &mut [F]) {
    let spatial = geo.oh * geo.ow;
    let c0 = g * geo.cin_g();
    for c in 0..geo.cin_g() {
        let plane = &x[(c0 + c) * geo.h * geo.w..(c0 + c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..geo.oh {
                    let iy = oy * geo.stride + ky;
                    let src = &plane[iy * geo.w..(iy + 1) * geo.w];
                    for ox in 0..geo.ow {
                        dst[oy * geo.ow + ox] = src[ox * geo.stride + kx];
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(cols: &[F], geo: &ConvGeometry, g: usize, dx: &mut [F]) {
    let spatial = geo.oh * geo.ow;
    let c0 = g * geo.cin_g();
    for c in 0..geo.cin_g() {
        let plane = &mut dx[(c0 + c) * geo.h * geo.w..(c0 + c + 1) * geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..geo.oh {
                    let iy = oy * geo.stride + ky;
                    for ox in 0..geo.ow {
                        plane[iy * geo.w + ox * geo.stride + kx] += src[oy * geo.ow + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Real>(x: &[F], w: &[F], bias: Option<&[F]>, geo: &ConvGeometry) -> Vec<F> {
    let spatial = geo.oh * geo.ow;
    let mut out = vec![F::zero(); geo.cout * spatial];
    let mut cols = vec![F::zero(); geo.patch() * spatial];
    let w_group = geo.cout_g() * geo.patch();
    for g in 0..geo.groups {
        im2col(x, geo, g, &mut cols);
        let o = &mut out[g * geo.cout_g() * spatial..(g + 1) * geo.cout_g() * spatial];
        F::gemm(
            geo.cout_g(),
            geo.patch(),
            spatial,
            &w[g * w_group..(g + 1) * w_group],
            false,
            &cols,
            false,
            o,
            F::zero(),
        );
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * spatial..(co + 1) * spatial]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    out
}

/// Returns `(dx, dw, dbias)` for upstream gradient `dy`.
pub fn conv2d_backward<F: Real>(
    x: &[F],
    w: &[F],
    dy: &[F],
    geo: &ConvGeometry,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let spatial = geo.oh * geo.ow;
    let mut dx = vec![F::zero(); geo.cin * geo.h * geo.w];
    let mut dw = vec![F::zero(); w.len()];
    let mut cols = vec![F::zero(); geo.patch() * spatial];
    let mut dcols = vec![F::zero(); geo.patch() * spatial];
    let w_group = geo.cout_g() * geo.patch();
    for g in 0..geo.groups {
        im2col(x, geo, g, &mut cols);
        let dyg = &dy[g * geo.cout_g() * spatial..(g + 1) * geo.cout_g() * spatial];
        // dW = dY · colsᵀ
        F::gemm(
            geo.cout_g(),
            spatial,
            geo.patch(),
            dyg,
            false,
            &cols,
            true,
            &mut dw[g * w_group..(g + 1) * w_group],
            F::zero(),
        );
        // dcols = Wᵀ · dY
        F::gemm(
            geo.patch(),
            geo.cout_g(),
            spatial,
            &w[g * w_group..(g + 1) * w_group],
            true,
            dyg,
            false,
            &mut dcols,
            F::zero(),
        );
        col2im(&dcols, geo, g, &mut dx);
    }
    let db = (0..geo.cout)
        .map(|co| dy[co * spatial..(co + 1) * spatial].iter().copied().sum())
        .collect();
    (dx, dw, db)
}

/// Source taps along one axis for half-pixel-center bilinear resampling.
#[derive(Clone, Copy, Debug)]
pub struct Tap<F> {
    pub lo: usize,
    pub hi: usize,
    pub frac: F,
}

pub fn bilinear_taps<F: Real>(input: usize, output: usize) -> Vec<Tap<F>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: F::of(src - lo as f64),
            }
        })
        .collect()
}

pub fn bilinear_forward<F: Real>(x: &[F], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = plane[a.lo * w + b.lo] * (F::one() - b.frac) + plane[a.lo * w + b.hi] * b.frac;
                let bot = plane[a.hi * w + b.lo] * (F::one() - b.frac) + plane[a.hi * w + b.hi] * b.frac;
                dst[oy * ow + ox] = top * (F::one() - a.frac) + bot * a.frac;
            }
        }
    }
    out
}

pub fn bilinear_backward<F: Real>(dy: &[F], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<F> {
    let ty = bilinear_taps::<F>(h, oh);
    let tx = bilinear_taps::<F>(w, ow);
    let mut dx = vec![F::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let src = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gt = g * (F::one() - a.frac);
                let gb = g * a.frac;
                plane[a.lo * w + b.lo] += gt * (F::one() - b.frac);
                plane[a.lo * w + b.hi] += gt * b.frac;
                plane[a.hi * w + b.lo] += gb * (F::one() - b.frac);
                plane[a.hi * w + b.hi] += gb * b.frac;
            }
        }
    }
    dx
}

/// Row-wise softmax over the trailing dimension of length `n`.
pub fn softmax_rows<F: Real>(x: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = src.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            total += *d;
        }
        let inv = F::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub fn softmax_rows_backward<F: Real>(y: &[F], dy: &[F], n: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Layer normalization over the trailing dimension. Returns `(y, xhat, rstd)`.
pub fn layer_norm_rows<F: Real>(x: &[F], gamma: &[F], beta: &[F], eps: F) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = gamma.len();
    let rows = x.len() / n;
    let nf = F::of(n as f64);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * n..(r + 1) * n];
        let mean = src.iter().copied().sum::<F>() / nf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for i in 0..n {
            let xh = (src[i] - mean) * rs;
            xhat[r * n + i] = xh;
            y[r * n + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_rows_backward<F: Real>(
    xhat: &[F],
    rstd: &[F],
    gamma: &[F],
    dy: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let n = gamma.len();
    let nf = F::of(n as f64);
    let mut dx = vec![F::zero(); xhat.len()];
    let mut dgamma = vec![F::zero(); n];
    let mut dbeta = vec![F::zero(); n];
    for (r, &rs) in rstd.iter().enumerate() {
        let xh = &xhat[r * n..(r + 1) * n];
        let g = &dy[r * n..(r + 1) * n];
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for i in 0..n {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            let dxh = g[i] * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        for i in 0..n {
            let dxh = g[i] * gamma[i];
            dx[r * n + i] = rs * (dxh - sum_dxh / nf - xh[i] * sum_dxh_xh / nf);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-major strides, with zero stride on broadcast (size-1) axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(TensorError::shape(op, a, b))
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of the broadcast output.
pub fn for_each_broadcast(a: &[usize], b: &[usize], out: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if a == b {
        let n = out.iter().product();
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_rejects_indivisible_stride() {
        let err = ConvGeometry::new(&[1, 5, 5], &[1, 1, 2, 2], 2, 1).unwrap_err();
        assert!(matches!(err, TensorError::Config { .. }));
        assert!(ConvGeometry::new(&[1, 4, 4], &[1, 1, 2, 2], 2, 1).is_ok());
        assert!(ConvGeometry::new(&[1, 2, 2], &[1, 1, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn grouped_conv_matches_direct_loop() {
        // 4 input channels, 2 groups, 4 output channels, 2x2 kernel stride 1 on 3x3
        let geo = ConvGeometry::new(&[4, 3, 3], &[4, 2, 2, 2], 1, 2).unwrap();
        let x: Vec<f64> = (0..36).map(|i| (i as f64 * 0.7).sin()).collect();
        let w: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).cos()).collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let out = conv2d_forward(&x, &w, Some(&b), &geo);
        for co in 0..4 {
            let g = co / 2;
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let xv = x[(g * 2 + ci) * 9 + (oy + ky) * 3 + ox + kx];
                                let wv = w[((co * 2 + ci) * 2 + ky) * 2 + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    assert!((out[co * 4 + oy * 2 + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_taps_identity_when_sizes_match() {
        for t in bilinear_taps::<f64>(5, 5).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn broadcast_offsets() {
        let mut seen = Vec::new();
        for_each_broadcast(&[2, 1], &[1, 3], &[2, 3], |i, a, b| seen.push((i, a, b)));
        assert_eq!(
            seen,
            vec![(0, 0, 0), (1, 0, 1), (2, 0, 2), (3, 1, 0), (4, 1, 1), (5, 1, 2)]
        );
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
        assert_eq!(broadcast_shape("t", &[4, 1, 2], &[1, 5, 2]).unwrap(), vec![4, 5, 2]);
    }
}
