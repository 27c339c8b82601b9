#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swt_core::encoder::SwinBlock;
use swt_core::layers::LN_EPS;
use swt_core::params::{Init, ParamStore};
use swt_core::ModelConfig;
use swt_tensor::{Graph, Tensor};

/// Small but complete geometry: N=16, stage sides 16/8/4/2, window 2.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 2,
        embed_dim: 8,
        depths: [2, 2, 2, 2],
        heads: [1, 2, 2, 4],
        window_size: 2,
        num_classes: 4,
        seed,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Row-wise layer norm of `[n, d]` data.
pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(k, v)| (v - mean) * rstd * gamma[k] + beta[k]));
    }
    out
}

/// `[n, i] · [i, o] + b`.
pub fn linear(x: &[f64], i: usize, w: &[f64], o: usize, b: Option<&[f64]>) -> Vec<f64> {
    let n = x.len() / i;
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b.map_or(0.0, |b| b[c]);
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            out[r * o + c] = acc;
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-8 || nb < 1e-8 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.tensors_mut() {
        let r = Tensor::<f64>::uniform(t.shape(), -0.5, 0.5, &mut rng);
        t.data_mut().copy_from_slice(r.data());
    }
}

pub fn values(store: &ParamStore<f64>, id: swt_core::params::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

/// Whether rolled positions `a` and `b` were contiguous before the roll.
pub fn same_region(a: (usize, usize), b: (usize, usize), side: usize, shift: usize) -> bool {
    shift == 0 || ((a.0 < side - shift) == (b.0 < side - shift) && (a.1 < side - shift) == (b.1 < side - shift))
}

/// Per-window brute force of a full pre-norm block on `[L, C]` tokens.
pub fn block_oracle(block: &SwinBlock, store: &ParamStore<f64>, x: &[f64]) -> Vec<f64> {
    let lay = &block.layout;
    let (side, ws, shift, heads, c) = (lay.side, lay.window, lay.shift, lay.heads, lay.dim);
    let hd = c / heads;
    let l = side * side;
    let h = layer_norm_rows(x, c, &values(store, block.norm1.gamma), &values(store, block.norm1.beta), LN_EPS);
    let wqkv = values(store, block.attn.qkv.weight);
    let bqkv = values(store, block.attn.qkv.bias.unwrap());
    let table = values(store, block.attn.bias_table);
    let mut attn = vec![0.0; l * c];
    for wy in 0..side / ws {
        for wx in 0..side / ws {
            let rolled: Vec<(usize, usize)> =
                (0..ws * ws).map(|k| (wy * ws + k / ws, wx * ws + k % ws)).collect();
            let orig: Vec<usize> = rolled
                .iter()
                .map(|&(y, x)| ((y + shift) % side) * side + (x + shift) % side)
                .collect();
            let xw: Vec<f64> = orig.iter().flat_map(|&o| h[o * c..(o + 1) * c].to_vec()).collect();
            let qkv = linear(&xw, c, &wqkv, 3 * c, Some(&bqkv));
            for head in 0..heads {
                let q = |i: usize, d: usize| qkv[i * 3 * c + head * hd + d];
                let k = |i: usize, d: usize| qkv[i * 3 * c + c + head * hd + d];
                let v = |i: usize, d: usize| qkv[i * 3 * c + 2 * c + head * hd + d];
                for i in 0..ws * ws {
                    let mut logits = Vec::new();
                    for j in 0..ws * ws {
                        if !same_region(rolled[i], rolled[j], side, shift) {
                            continue;
                        }
                        let dot: f64 = (0..hd).map(|d| q(i, d) * k(j, d)).sum();
                        let dy = i / ws + ws - 1 - j / ws;
                        let dx = i % ws + ws - 1 - j % ws;
                        let bias = table[(dy * (2 * ws - 1) + dx) * heads + head];
                        logits.push((j, dot / (hd as f64).sqrt() + bias));
                    }
                    let mx = logits.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|p| (p.1 - mx).exp()).sum();
                    for d in 0..hd {
                        let o: f64 = logits.iter().map(|&(j, s)| (s - mx).exp() / z * v(j, d)).sum();
                        attn[orig[i] * c + head * hd + d] = o;
                    }
                }
            }
        }
    }
    let proj = linear(
        &attn,
        c,
        &values(store, block.attn.proj.weight),
        c,
        Some(&values(store, block.attn.proj.bias.unwrap())),
    );
    let x1: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
    let h2 = layer_norm_rows(&x1, c, &values(store, block.norm2.gamma), &values(store, block.norm2.beta), LN_EPS);
    let f1 = linear(&h2, c, &values(store, block.fc1.weight), 4 * c, Some(&values(store, block.fc1.bias.unwrap())));
    let f1: Vec<f64> = f1.into_iter().map(gelu_tanh).collect();
    let f2 = linear(&f1, 4 * c, &values(store, block.fc2.weight), c, Some(&values(store, block.fc2.bias.unwrap())));
    x1.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

pub fn make_block(side: usize, dim: usize, heads: usize, window: usize, shift: usize, seed: u64) -> (SwinBlock, ParamStore<f64>) {
    let mut store = ParamStore::<f64>::new();
    let block = SwinBlock::new(&mut store, &mut Init::new(seed), "b", side, dim, heads, window, shift).unwrap();
    randomize(&mut store, seed + 100);
    (block, store)
}

pub fn run_block(block: &SwinBlock, store: &ParamStore<f64>, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (y, trace) = block.forward_tokens(&mut g, &p, xv).unwrap();
    (g.data(y).to_vec(), g.data(trace.probs).to_vec())
}

/// Convex-combination seed scores followed by an argmax in which background
/// (the last channel) wins ties.
pub fn seeds_oracle(s: &[f64], m: &Tensor<f64>) -> Vec<usize> {
    let (k, l) = (m.shape()[0], m.shape()[1] * m.shape()[2]);
    (0..l)
        .map(|i| {
            let mass: f64 = (0..l).map(|j| s[i * l + j]).sum();
            let z: Vec<f64> = (0..k)
                .map(|c| (0..l).map(|j| s[i * l + j] * m.data()[c * l + j]).sum::<f64>() / mass)
                .collect();
            let mut best = k - 1;
            for c in 0..k - 1 {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Channel vector of token `i` in a `[C, h, w]` tensor.
pub fn token(t: &Tensor<f64>, i: usize) -> Vec<f64> {
    let (c, l) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    (0..c).map(|ch| t.data()[ch * l + i]).collect()
}

/// Scalar loop applying the half-pixel-centre mapping directly.
pub fn bilinear_oracle(x: &Tensor<f64>, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                let v = |y, xx| x.get(&[ch, y, xx]);
                out.push(
                    v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + v(y0, x1) * (1.0 - fy) * fx
                        + v(y1, x0) * fy * (1.0 - fx)
                        + v(y1, x1) * fy * fx,
                );
            }
        }
    }
    out
}
