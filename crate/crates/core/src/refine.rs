//! Background estimation, token affinity, seed assignment, prototypes and
//! refined maps.

use swt_tensor::{Graph, Real, Tensor, Var};

use crate::cam::{normalize_cam, ActivationMaps};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::hff::HierFeature;

/// Vectors with a smaller L2 norm count as zero in cosine similarities.
pub const NORM_GUARD: f64 = 1e-8;

/// Appends `1 − max_c M_c` as the last channel.
pub fn background_map<F: Real>(g: &mut Graph<F>, m: &ActivationMaps) -> Result<ActivationMaps> {
    let mx = g.max(m.values, 0)?;
    let bg = g.rsub_scalar(F::one(), mx);
    let all = g.concat(&[m.values, bg], 0)?;
    ActivationMaps::new(g, all, m.normalized)
}

/// `|cos|` between every pair of tokens, row-major `[L, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<F: Real> {
    pub size: usize,
    pub values: Tensor<F>,
}

impl<F: Real> AffinityMatrix<F> {
    pub fn get(&self, i: usize, j: usize) -> F {
        self.values.data()[i * self.size + j]
    }
}

/// Unit-normalizes rows of a row-major `[n, d]` buffer; rows below the guard
/// become zero.
fn unit_rows<F: Real>(rows: &mut [F], d: usize) {
    for r in rows.chunks_exact_mut(d) {
        let norm = r.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm < F::of(NORM_GUARD) {
            r.fill(F::zero());
        } else {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Affinity between the tokens of a `[C, h, w]` grid value.
///
/// Only the seed argmax consumes it, so it is computed off the graph.
pub fn token_affinity<F: Real>(grid: &Tensor<F>) -> Result<AffinityMatrix<F>> {
    let &[c, h, w] = grid.shape() else {
        return Err(Error::Dimension(format!("affinity expects a [C,h,w] grid, got {:?}", grid.shape())));
    };
    let l = h * w;
    let src = grid.data();
    let mut u = vec![F::zero(); l * c];
    for ch in 0..c {
        for i in 0..l {
            u[i * c + ch] = src[ch * l + i];
        }
    }
    unit_rows(&mut u, c);
    let mut s = vec![F::zero(); l * l];
    F::gemm(l, c, l, &u, false, &u, true, &mut s, F::zero());
    for v in &mut s {
        *v = v.abs().min(F::one());
    }
    Ok(AffinityMatrix {
        size: l,
        values: Tensor::from_vec(&[l, l], s)?,
    })
}

/// Argmax over `k` channels where the last one is background; it wins ties,
/// and among foreground channels the lowest index wins.
pub fn argmax_background_ties<F: Real>(k: usize, value: impl Fn(usize) -> F) -> usize {
    let bg = k - 1;
    let mut best = bg;
    let mut best_v = value(bg);
    for c in 0..bg {
        let v = value(c);
        if v > best_v {
            best = c;
            best_v = v;
        }
    }
    best
}

/// Hard token assignment; `assignment[i]` is the class of token `i` and the
/// background class is `num_classes − 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedMap {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub assignment: Vec<usize>,
}

impl SeedMap {
    pub fn background(&self) -> usize {
        self.num_classes - 1
    }

    /// `[classes, height, width]` indicator tensor.
    pub fn one_hot<F: Real>(&self) -> Tensor<F> {
        let l = self.height * self.width;
        let mut t = Tensor::zeros(&[self.num_classes, self.height, self.width]);
        for (i, &c) in self.assignment.iter().enumerate() {
            t.data_mut()[c * l + i] = F::one();
        }
        t
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.num_classes];
        self.assignment.iter().for_each(|&c| n[c] += 1);
        n
    }
}

/// Assigns each token to the class with the highest affinity-weighted mean
/// activation. `m` is the `[C+1, h, w]` value with background last.
pub fn locate_seeds<F: Real>(s: &AffinityMatrix<F>, m: &Tensor<F>) -> Result<SeedMap> {
    let &[k, h, w] = m.shape() else {
        return Err(Error::Dimension(format!("seed maps must be rank 3, got {:?}", m.shape())));
    };
    let l = h * w;
    if l != s.size || k < 2 {
        return Err(Error::Dimension(format!(
            "affinity of size {} does not fit maps {:?}",
            s.size,
            m.shape()
        )));
    }
    // z[i, c] = Σ_j S(i,j)·M(c,j)
    let mut z = vec![F::zero(); l * k];
    F::gemm(l, l, k, s.values.data(), false, m.data(), true, &mut z, F::zero());
    let assignment = (0..l)
        .map(|i| {
            let mass: F = s.values.data()[i * l..(i + 1) * l].iter().copied().sum();
            let denom = if mass > F::zero() { mass } else { F::one() };
            argmax_background_ties(k, |c| z[i * k + c] / denom)
        })
        .collect();
    Ok(SeedMap {
        num_classes: k,
        height: h,
        width: w,
        assignment,
    })
}

#[derive(Clone, Debug)]
pub struct PrototypeSet {
    /// `[classes, feature_dim]`.
    pub vectors: Var,
    pub occupancy: Vec<usize>,
}

impl PrototypeSet {
    pub fn is_empty_class(&self, c: usize) -> bool {
        self.occupancy[c] == 0
    }
}

/// Seed-region centroids in the fused feature space.
pub fn build_prototypes<F: Real>(g: &mut Graph<F>, r: &SeedMap, f_hie: &HierFeature) -> Result<PrototypeSet> {
    let grid = &f_hie.grid;
    if grid.height != r.height || grid.width != r.width {
        return Err(Error::Dimension(format!(
            "seed map {}x{} does not match features {}x{}",
            r.height, r.width, grid.height, grid.width
        )));
    }
    let occupancy = r.counts();
    let l = r.assignment.len();
    let mut weights = r.one_hot::<F>().reshape(&[r.num_classes, l])?;
    for (row, &n) in weights.data_mut().chunks_exact_mut(l).zip(&occupancy) {
        let inv = F::one() / F::of(n.max(1) as f64);
        row.iter_mut().for_each(|v| *v *= inv);
    }
    let weights = g.constant(weights);
    let tokens = grid.tokens(g)?;
    let vectors = g.matmul(weights, tokens)?;
    Ok(PrototypeSet { vectors, occupancy })
}

/// `relu(cos(p_c, F_hie_i))`, max-normalized per class.
pub fn refine_cam<F: Real>(g: &mut Graph<F>, protos: &PrototypeSet, f_hie: &HierFeature) -> Result<ActivationMaps> {
    let grid = &f_hie.grid;
    let dim = g.shape(protos.vectors)[1];
    if dim != grid.channels {
        return Err(Error::Dimension(format!(
            "prototype dim {dim} does not match feature channels {}",
            grid.channels
        )));
    }
    let k = protos.occupancy.len();
    let pn = g.l2_normalize(protos.vectors, F::of(NORM_GUARD));
    let tokens = grid.tokens(g)?;
    let tn = g.l2_normalize(tokens, F::of(NORM_GUARD));
    let cos = g.matmul_nt(pn, tn)?;
    let cos = g.reshape(cos, &[k, grid.height, grid.width])?;
    let raw = ActivationMaps::new(g, cos, false)?;
    normalize_cam(g, &raw)
}

/// The grid values of a token map as an owned tensor.
pub fn grid_value<F: Real>(g: &Graph<F>, grid: &TokenGrid) -> Tensor<F> {
    g.value(grid.values).clone()
}
