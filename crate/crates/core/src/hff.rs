//! Hierarchical fusion of the four stage outputs into one map at the final
//! token resolution.

use swt_tensor::{Graph, Real};

use crate::config::{ModelConfig, NUM_STAGES};
use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, Init, ParamStore};

/// Name prefix shared by every fusion parameter.
pub const HFF_PREFIX: &str = "hff.";

#[derive(Clone, Debug)]
pub struct HierFeature {
    pub grid: TokenGrid,
    /// Stage ids (1-based) that feed the map.
    pub provenance: Vec<usize>,
}

/// Fusion weights.
///
/// Deep branch: `up2(X4) ‖ X3 → 1×1 → 4D`. Full branch:
/// `down4(X1) ‖ down2(X2) ‖ deep → 1×1 → 8D → depthwise 2×2/2`.
#[derive(Clone, Debug)]
pub struct Hff {
    pub deep_proj: Conv,
    pub down1: Conv,
    pub down2: Conv,
    pub fuse_proj: Conv,
    pub resample: Conv,
    dims: [usize; NUM_STAGES],
    sides: [usize; NUM_STAGES],
}

impl Hff {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let name = |s: &str| format!("{HFF_PREFIX}{s}");
        Ok(Hff {
            deep_proj: Conv::new(store, init, &name("deep_proj"), 12 * d, 4 * d, 1, 1, 1, true)?,
            down1: Conv::new(store, init, &name("down1"), d, 2 * d, 4, 4, 1, true)?,
            down2: Conv::new(store, init, &name("down2"), 2 * d, 4 * d, 2, 2, 1, true)?,
            fuse_proj: Conv::new(store, init, &name("fuse_proj"), 10 * d, 8 * d, 1, 1, 1, true)?,
            resample: Conv::new(store, init, &name("resample"), 8 * d, 8 * d, 2, 2, 8 * d, true)?,
            dims: std::array::from_fn(|k| cfg.stage_dim(k)),
            sides: std::array::from_fn(|k| cfg.stage_side(k)),
        })
    }
}

pub fn fuse_stages<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    hff: &Hff,
    stages: &[TokenGrid; NUM_STAGES],
) -> Result<HierFeature> {
    for (k, s) in stages.iter().enumerate() {
        if s.channels != hff.dims[k] || s.height != hff.sides[k] || s.width != hff.sides[k] {
            return Err(Error::Config(format!(
                "stage {} is {}@{}x{}, fusion expects {}@{}x{}",
                k + 1,
                s.channels,
                s.height,
                s.width,
                hff.dims[k],
                hff.sides[k],
                hff.sides[k]
            )));
        }
    }
    let [x1, x2, x3, x4] = stages;
    let mid = hff.sides[2];
    let up = g.bilinear_resize(x4.values, mid, mid)?;
    let deep = g.concat(&[up, x3.values], 0)?;
    let deep = hff.deep_proj.forward(g, p, deep)?;
    let d1 = hff.down1.forward(g, p, x1.values)?;
    let d2 = hff.down2.forward(g, p, x2.values)?;
    let full = g.concat(&[d1, d2, deep], 0)?;
    let full = hff.fuse_proj.forward(g, p, full)?;
    let out = hff.resample.forward(g, p, full)?;
    Ok(HierFeature {
        grid: TokenGrid::new(g, out)?,
        provenance: vec![1, 2, 3, 4],
    })
}
