//! AdamW optimization over per-sample graphs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use swt_tensor::Graph;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle};
use crate::model::{sample_losses, Model};
use crate::params::ParamStore;

/// Decoupled-weight-decay Adam. Decay applies to matrices and kernels only,
/// not to biases, norm gains or 1-D tables.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0f32; t.numel()]).collect();
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the accumulated gradients; parameters without
    /// a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((_, p), m), v) in store.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for (((x, &g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mi = b1 * *m as f64 + (1.0 - b1) * g;
                let vi = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mi as f32;
                *v = vi as f32;
                let xf = *x as f64;
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps) + decay * xf;
                *x = (xf - self.lr * upd) as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 1-based step index.
    pub step: usize,
    pub losses: LossBundle,
}

/// Endless shuffled walk over sample indices, reshuffled every epoch.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            cursor: n,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Trains in place and returns the per-step mean losses. `on_step` sees each
/// record as it is produced.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    samples: &[&Sample],
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.mode != model.mode {
        return Err(Error::Config(format!(
            "training mode {:?} does not match model mode {:?}",
            cfg.mode, model.mode
        )));
    }
    if cfg.steps > 0 && samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut opt = AdamW::new(cfg, store);
    let mut sampler = BatchSampler::new(samples.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    let scale = 1.0 / cfg.batch_size as f32;
    for step in 1..=cfg.steps {
        store.zero_grad();
        let mut sum = LossBundle::default();
        for i in sampler.next_batch(cfg.batch_size) {
            let s = samples[i];
            let mut g = Graph::<f32>::new();
            let p = store.bind(&mut g, true);
            let image = model.image_input(&mut g, &s.image)?;
            let fwd = model.forward(&mut g, &p, image, Some(&s.labels))?;
            let l = sample_losses(&mut g, &fwd, &s.labels, cfg)?;
            let val = |v: Option<swt_tensor::Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
            let b = total_loss(val(Some(l.cls)), val(l.gsc), val(l.ccl)).map_err(|e| match e {
                Error::NonFiniteLoss { component } => Error::NonFinite { step, component },
                other => other,
            })?;
            sum.cls += b.cls;
            sum.gsc += b.gsc;
            sum.ccl += b.ccl;
            sum.total += b.total;
            let grads = g.backward_scaled(l.total, scale)?;
            store.accumulate(&grads, &p)?;
        }
        opt.step(store);
        let n = cfg.batch_size as f64;
        let rec = LossRecord {
            step,
            losses: LossBundle {
                cls: sum.cls / n,
                gsc: sum.gsc / n,
                ccl: sum.ccl / n,
                total: sum.total / n,
            },
        };
        on_step(&rec);
        history.push(rec);
    }
    store.zero_grad();
    Ok(history)
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,cls,gsc,ccl,total\n");
    for r in history {
        let l = &r.losses;
        writeln!(s, "{},{:.8},{:.8},{:.8},{:.8}", r.step, l.cls, l.gsc, l.ccl, l.total).unwrap();
    }
    s
}

pub fn write_history_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
