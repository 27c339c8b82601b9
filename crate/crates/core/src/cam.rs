//! Class activation maps and image-level scores from the final token map.

use swt_tensor::{Graph, Real, Var};

use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{Bound, Init, ParamStore};

/// Added to each channel maximum during normalization.
pub const CAM_EPS: f64 = 1e-5;

/// Per-class maps `[classes, height, width]` on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActivationMaps {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Var,
    pub normalized: bool,
}

impl ActivationMaps {
    pub fn new<F: Real>(g: &Graph<F>, values: Var, normalized: bool) -> Result<Self> {
        match *g.shape(values) {
            [num_classes, height, width] => Ok(ActivationMaps {
                num_classes,
                height,
                width,
                values,
                normalized,
            }),
            ref s => Err(Error::Dimension(format!("activation maps must be rank 3, got {s:?}"))),
        }
    }

    pub fn side(&self) -> usize {
        self.height
    }

    /// `[classes, height·width]` view.
    pub fn flat<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        Ok(g.reshape(self.values, &[self.num_classes, self.height * self.width])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassScores {
    /// `[C]` sigmoid probabilities.
    pub scores: Var,
    /// `[C]` spatial means.
    pub logits: Var,
}

/// Bias-free 1×1 convolution from the final token width to class maps.
#[derive(Clone, Debug)]
pub struct CamHead {
    pub conv: Conv,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl CamHead {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        in_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(CamHead {
            conv: Conv::new(store, init, "head.cam", in_channels, num_classes, 1, 1, 1, false)?,
            in_channels,
            num_classes,
        })
    }
}

/// Raw class maps, possibly negative.
pub fn compute_fout<F: Real>(g: &mut Graph<F>, p: &Bound, head: &CamHead, t_out: &TokenGrid) -> Result<ActivationMaps> {
    if t_out.channels != head.in_channels {
        return Err(Error::Config(format!(
            "CAM head expects {} channels, got {}",
            head.in_channels, t_out.channels
        )));
    }
    let y = head.conv.forward(g, p, t_out.values)?;
    ActivationMaps::new(g, y, false)
}

pub fn class_scores<F: Real>(g: &mut Graph<F>, f_out: &ActivationMaps) -> Result<ClassScores> {
    let flat = f_out.flat(g)?;
    let m = g.mean(flat, 1)?;
    let logits = g.reshape(m, &[f_out.num_classes])?;
    let scores = g.sigmoid(logits);
    Ok(ClassScores { scores, logits })
}

/// Per channel `relu(x) / (max relu(x) + ε)`.
pub fn normalize_cam<F: Real>(g: &mut Graph<F>, f_out: &ActivationMaps) -> Result<ActivationMaps> {
    let flat = f_out.flat(g)?;
    let r = g.relu(flat);
    let m = g.max(r, 1)?;
    let d = g.add_scalar(m, F::of(CAM_EPS));
    let y = g.div(r, d)?;
    let y = g.reshape(y, &[f_out.num_classes, f_out.height, f_out.width])?;
    ActivationMaps::new(g, y, true)
}

pub fn upsample_cam<F: Real>(g: &mut Graph<F>, c_out: &ActivationMaps, height: usize, width: usize) -> Result<ActivationMaps> {
    let y = g.bilinear_resize(c_out.values, height, width)?;
    ActivationMaps::new(g, y, c_out.normalized)
}
