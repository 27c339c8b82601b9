use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 4;

/// Encoder and head hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            patch_size: 4,
            embed_dim: 16,
            depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 8],
            window_size: 4,
            num_classes: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.window_size == 0 || self.num_classes == 0 {
            return bad("patch_size, embed_dim, window_size and num_classes must be positive".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size * 8) {
            return bad(format!(
                "image_size {} must be a positive multiple of 8 * patch_size ({})",
                self.image_size,
                8 * self.patch_size
            ));
        }
        for k in 0..NUM_STAGES {
            let (side, dim) = (self.stage_side(k), self.stage_dim(k));
            if side % self.window_size != 0 {
                return bad(format!(
                    "stage {} side {side} is not divisible by window_size {}",
                    k + 1,
                    self.window_size
                ));
            }
            if self.heads[k] == 0 || dim % self.heads[k] != 0 {
                return bad(format!("stage {} dim {dim} is not divisible by {} heads", k + 1, self.heads[k]));
            }
            if self.depths[k] == 0 {
                return bad(format!("stage {} has zero depth", k + 1));
            }
        }
        Ok(())
    }

    /// Token grid side after patch embedding (N).
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Side of the final token grid (P = N/8).
    pub fn final_side(&self) -> usize {
        self.grid_side() / 8
    }

    /// Channels of the final stage (8D).
    pub fn final_dim(&self) -> usize {
        self.embed_dim * 8
    }

    /// Zero-based stage index.
    pub fn stage_side(&self, k: usize) -> usize {
        self.grid_side() >> k
    }

    pub fn stage_dim(&self, k: usize) -> usize {
        self.embed_dim << k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Classification loss only; seeds come from the CAM head.
    V1,
    /// Adds hierarchical fusion and prototype refinement with the consistency losses.
    V2,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Mode::V1),
            "v2" => Ok(Mode::V2),
            other => Err(Error::Config(format!("unknown mode {other:?}, expected v1 or v2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// V2 only; turning it off gives the CLS+GSC ablation.
    pub use_ccl: bool,
    /// Stop gradients through the refined maps in the consistency losses.
    pub detach_rcam: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::V2,
            steps: 300,
            batch_size: 8,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            use_ccl: true,
            detach_rcam: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn uses_gsc(&self) -> bool {
        self.mode == Mode::V2
    }

    pub fn uses_ccl(&self) -> bool {
        self.mode == Mode::V2 && self.use_ccl
    }
}
