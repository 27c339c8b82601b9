//! Four-stage shifted-window transformer encoder.

use std::sync::Arc;

use swt_tensor::{Graph, Real, Tensor, Var};

use crate::config::{ModelConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::layers::{Conv, LayerNorm, Linear};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Logit added to token pairs that straddle a shifted-window seam.
pub const MASKED_LOGIT: f64 = -1e4;

const MLP_RATIO: usize = 4;

/// Patch tokens laid out as `[channels, height, width]` on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Var,
}

impl TokenGrid {
    pub fn new<F: Real>(g: &Graph<F>, values: Var) -> Result<Self> {
        match *g.shape(values) {
            [channels, height, width] => Ok(TokenGrid {
                channels,
                height,
                width,
                values,
            }),
            ref s => Err(Error::Dimension(format!("token grid must be rank 3, got {s:?}"))),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    /// Row-major `[h·w, channels]` view.
    pub fn tokens<F: Real>(&self, g: &mut Graph<F>) -> Result<Var> {
        let flat = g.reshape(self.values, &[self.channels, self.num_tokens()])?;
        Ok(g.transpose(flat)?)
    }

    pub fn from_tokens<F: Real>(g: &mut Graph<F>, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let t = g.transpose(tokens)?;
        let channels = g.shape(t)[0];
        let values = g.reshape(t, &[channels, height, width])?;
        Ok(TokenGrid {
            channels,
            height,
            width,
            values,
        })
    }
}

/// Strided patch projection followed by layer normalization.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv,
    pub norm: LayerNorm,
    pub image_size: usize,
}

impl PatchEmbed {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        Ok(PatchEmbed {
            proj: Conv::new(store, init, "patch_embed.proj", 3, cfg.embed_dim, p, p, 1, true)?,
            norm: LayerNorm::new(store, "patch_embed.norm", cfg.embed_dim)?,
            image_size: cfg.image_size,
        })
    }

    /// Token grid before normalization, `[D, N, N]`.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, p: &Bound, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s != [3, self.image_size, self.image_size] {
            return Err(Error::Config(format!(
                "image shape {s:?} does not match configured 3x{0}x{0}",
                self.image_size
            )));
        }
        self.proj.forward(g, p, image)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, image: Var) -> Result<TokenGrid> {
        let y = self.project(g, p, image)?;
        let grid = TokenGrid::new(g, y)?;
        let t = grid.tokens(g)?;
        let t = self.norm.forward(g, p, t)?;
        TokenGrid::from_tokens(g, t, grid.height, grid.width)
    }
}

/// Index tables for one (grid, window, shift, heads) combination.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub side: usize,
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub dim: usize,
    partition: Arc<[usize]>,
    split: [Arc<[usize]>; 3],
    merge: Arc<[usize]>,
    bias_index: Arc<[usize]>,
    /// `[windows, T, T]`, true where attention is blocked.
    blocked: Option<Vec<bool>>,
}

impl WindowLayout {
    pub fn new(side: usize, window: usize, shift: usize, heads: usize, dim: usize) -> Result<Self> {
        if window == 0 || !side.is_multiple_of(window) {
            return Err(Error::Config(format!("grid side {side} is not divisible by window {window}")));
        }
        if shift >= window {
            return Err(Error::Config(format!("shift {shift} must be smaller than window {window}")));
        }
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let per_row = side / window;
        let n_win = per_row * per_row;
        let t = window * window;
        let hd = dim / heads;
        // Original grid coordinate of position `pos` inside shifted window `win`.
        let source = |win: usize, pos: usize| {
            let (wy, wx) = (win / per_row, win % per_row);
            let (r, c) = (pos / window, pos % window);
            ((wy * window + r + shift) % side, (wx * window + c + shift) % side)
        };

        let mut partition = Vec::with_capacity(n_win * t * dim);
        for win in 0..n_win {
            for pos in 0..t {
                let (y, x) = source(win, pos);
                partition.extend((0..dim).map(|ch| (y * side + x) * dim + ch));
            }
        }

        let split = [0, 1, 2].map(|part| {
            let mut idx = Vec::with_capacity(n_win * t * dim);
            for win in 0..n_win {
                for h in 0..heads {
                    for pos in 0..t {
                        idx.extend((0..hd).map(|d| (win * t + pos) * 3 * dim + part * dim + h * hd + d));
                    }
                }
            }
            Arc::<[usize]>::from(idx)
        });

        let mut merge = vec![0; side * side * dim];
        for win in 0..n_win {
            for pos in 0..t {
                let (y, x) = source(win, pos);
                for h in 0..heads {
                    for d in 0..hd {
                        merge[(y * side + x) * dim + h * hd + d] = ((win * heads + h) * t + pos) * hd + d;
                    }
                }
            }
        }

        let span = 2 * window - 1;
        let mut bias_index = Vec::with_capacity(heads * t * t);
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let dy = i / window + window - 1 - j / window;
                    let dx = i % window + window - 1 - j % window;
                    bias_index.push((dy * span + dx) * heads + h);
                }
            }
        }

        let blocked = (shift > 0).then(|| {
            let region = |v: usize| {
                if v < side - window {
                    0
                } else if v < side - shift {
                    1
                } else {
                    2
                }
            };
            let mut m = Vec::with_capacity(n_win * t * t);
            for win in 0..n_win {
                let (wy, wx) = (win / per_row, win % per_row);
                let label = |pos: usize| {
                    3 * region(wy * window + pos / window) + region(wx * window + pos % window)
                };
                for i in 0..t {
                    for j in 0..t {
                        m.push(label(i) != label(j));
                    }
                }
            }
            m
        });

        Ok(WindowLayout {
            side,
            window,
            shift,
            heads,
            dim,
            partition: partition.into(),
            split,
            merge: merge.into(),
            bias_index: bias_index.into(),
            blocked,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.side / self.window).pow(2)
    }

    pub fn window_tokens(&self) -> usize {
        self.window * self.window
    }

    /// For window `win` and in-window position `pos`, the row-major token
    /// index in the unshifted grid.
    pub fn token_at(&self, win: usize, pos: usize) -> usize {
        self.partition[(win * self.window_tokens() + pos) * self.dim] / self.dim
    }

    /// Whether the pair `(i, j)` of window `win` is masked.
    pub fn is_blocked(&self, win: usize, i: usize, j: usize) -> bool {
        let t = self.window_tokens();
        self.blocked.as_ref().is_some_and(|m| m[(win * t + i) * t + j])
    }
}

/// Attention probabilities of one block, `[windows, heads, T, T]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
}

impl WindowAttention {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(WindowAttention {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, dim, true)?,
            bias_table: store.add(format!("{name}.relative_position_bias"), Tensor::zeros(&[span * span, heads]))?,
        })
    }

    /// Attention over `[L, C]` tokens laid out on `layout`'s grid.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        layout: &WindowLayout,
        tokens: Var,
    ) -> Result<(Var, AttentionTrace)> {
        let (nw, t, heads, dim) = (layout.num_windows(), layout.window_tokens(), layout.heads, layout.dim);
        let hd = dim / heads;
        let xw = g.gather(tokens, layout.partition.clone(), &[nw * t, dim])?;
        let qkv = self.qkv.forward(g, p, xw)?;
        let head_shape = [nw * heads, t, hd];
        let q = g.gather(qkv, layout.split[0].clone(), &head_shape)?;
        let q = g.scale(q, F::of(1.0 / (hd as f64).sqrt()));
        let k = g.gather(qkv, layout.split[1].clone(), &head_shape)?;
        let v = g.gather(qkv, layout.split[2].clone(), &head_shape)?;

        let logits = g.bmm_nt(q, k)?;
        let logits = g.reshape(logits, &[nw, heads, t, t])?;
        let bias = g.gather(p[self.bias_table], layout.bias_index.clone(), &[1, heads, t, t])?;
        let mut logits = g.add(logits, bias)?;
        if let Some(blocked) = &layout.blocked {
            let data = blocked
                .iter()
                .map(|&b| if b { F::of(MASKED_LOGIT) } else { F::zero() })
                .collect();
            let mask = g.constant(Tensor::from_vec(&[nw, 1, t, t], data)?);
            logits = g.add(logits, mask)?;
        }
        let probs = g.softmax(logits);
        let a = g.reshape(probs, &[nw * heads, t, t])?;
        let out = g.bmm(a, v)?;
        let merged = g.gather(out, layout.merge.clone(), &[layout.side * layout.side, dim])?;
        Ok((self.proj.forward(g, p, merged)?, AttentionTrace { probs }))
    }
}

/// Pre-norm transformer block: windowed attention then MLP, each residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub layout: WindowLayout,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        side: usize,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
    ) -> Result<Self> {
        Ok(SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(store, init, &format!("{name}.attn"), dim, heads, window)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(store, init, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim, true)?,
            fc2: Linear::new(store, init, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim, true)?,
            layout: WindowLayout::new(side, window, shift, heads, dim)?,
        })
    }

    pub fn forward_tokens<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<(Var, AttentionTrace)> {
        let h = self.norm1.forward(g, p, x)?;
        let (a, trace) = self.attn.forward(g, p, &self.layout, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        Ok((g.add(x, h)?, trace))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: &TokenGrid) -> Result<TokenGrid> {
        if x.height != self.layout.side || x.width != self.layout.side || x.channels != self.layout.dim {
            return Err(Error::Config(format!(
                "block expects {}@{}x{}, got {}@{}x{}",
                self.layout.dim, self.layout.side, self.layout.side, x.channels, x.height, x.width
            )));
        }
        let t = x.tokens(g)?;
        let (y, _) = self.forward_tokens(g, p, t)?;
        TokenGrid::from_tokens(g, y, x.height, x.width)
    }
}

/// Concatenates 2×2 neighbourhoods, normalizes, and halves the width.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub side: usize,
    pub dim: usize,
    index: Arc<[usize]>,
}

impl PatchMerge {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        side: usize,
        dim: usize,
    ) -> Result<Self> {
        if !side.is_multiple_of(2) {
            return Err(Error::Config(format!("patch merge needs an even side, got {side}")));
        }
        let half = side / 2;
        let mut index = Vec::with_capacity(side * side * dim);
        for i in 0..half {
            for j in 0..half {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let src = (2 * i + dy) * side + 2 * j + dx;
                    index.extend((0..dim).map(|ch| src * dim + ch));
                }
            }
        }
        Ok(PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim)?,
            reduction: Linear::new(store, init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false)?,
            side,
            dim,
            index: index.into(),
        })
    }

    pub fn forward_tokens<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let half = self.side / 2;
        let cat = g.gather(x, self.index.clone(), &[half * half, 4 * self.dim])?;
        let cat = self.norm.forward(g, p, cat)?;
        self.reduction.forward(g, p, cat)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: &TokenGrid) -> Result<TokenGrid> {
        if x.height != self.side || x.width != self.side || x.channels != self.dim {
            return Err(Error::Config(format!(
                "patch merge expects {}@{}x{}, got {}@{}x{}",
                self.dim, self.side, self.side, x.channels, x.height, x.width
            )));
        }
        let t = x.tokens(g)?;
        let y = self.forward_tokens(g, p, t)?;
        TokenGrid::from_tokens(g, y, self.side / 2, self.side / 2)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<SwinBlock>,
    pub side: usize,
}

/// Shift used by block `b` of a stage, alternating 0 and window/2.
/// A grid covered by a single window is never shifted.
pub fn block_shift(b: usize, side: usize, window: usize) -> usize {
    if b % 2 == 1 && side > window {
        window / 2
    } else {
        0
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbed,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = PatchEmbed::new(store, init, cfg)?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for k in 0..NUM_STAGES {
            let (side, dim) = (cfg.stage_side(k), cfg.stage_dim(k));
            let merge = if k > 0 {
                Some(PatchMerge::new(
                    store,
                    init,
                    &format!("stages.{k}.merge"),
                    cfg.stage_side(k - 1),
                    cfg.stage_dim(k - 1),
                )?)
            } else {
                None
            };
            let blocks = (0..cfg.depths[k])
                .map(|b| {
                    SwinBlock::new(
                        store,
                        init,
                        &format!("stages.{k}.blocks.{b}"),
                        side,
                        dim,
                        cfg.heads[k],
                        cfg.window_size,
                        block_shift(b, side, cfg.window_size),
                    )
                })
                .collect::<Result<_>>()?;
            stages.push(Stage { merge, blocks, side });
        }
        let norm = LayerNorm::new(store, "encoder.norm", cfg.final_dim())?;
        Ok(Encoder {
            config: cfg.clone(),
            patch_embed,
            stages,
            norm,
        })
    }

    /// Stage outputs X1..X4. The last one is layer-normalized and serves as
    /// the final token map.
    pub fn encode<F: Real>(&self, g: &mut Graph<F>, p: &Bound, image: Var) -> Result<[TokenGrid; NUM_STAGES]> {
        let grid = self.patch_embed.forward(g, p, image)?;
        let mut x = grid.tokens(g)?;
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward_tokens(g, p, x)?;
            }
            for b in &stage.blocks {
                x = b.forward_tokens(g, p, x)?.0;
            }
            if k == NUM_STAGES - 1 {
                x = self.norm.forward(g, p, x)?;
            }
            outs.push(TokenGrid::from_tokens(g, x, stage.side, stage.side)?);
        }
        Ok(outs.try_into().expect("four stages"))
    }
}
