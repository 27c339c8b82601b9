//! Finite-difference checks of the losses and of the assembled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swt_tensor::gradcheck::check_against_central_differences;
use swt_tensor::{grad_check, GradCheckReport, Graph, Tensor, Var};

use crate::cam::{normalize_cam, ActivationMaps, ClassScores};
use crate::config::{Mode, ModelConfig, TrainConfig};
use crate::data::{gen_sample, DataConfig};
use crate::error::Result;
use crate::losses::{ccl_loss, cls_loss, gsc_loss, LabelVector};
use crate::model::{sample_losses, Model};
use crate::refine::background_map;

fn as_maps(g: &mut Graph<f64>, v: Var) -> Result<ActivationMaps> {
    ActivationMaps::new(g, v, true)
}

/// Each loss against central differences on three shapes, with respect to
/// every differentiable input.
pub fn run_loss_suite(seed: u64, tol: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in [2usize, 4, 7] {
        let s = Tensor::uniform(&[c], 0.05, 0.95, &mut rng);
        let labels = LabelVector((0..c).map(|_| rng.random_bool(0.5)).collect());
        out.push(grad_check(
            "cls_loss",
            |g, x| {
                let sc = ClassScores { scores: x, logits: x };
                Ok(cls_loss(g, &sc, &labels)?)
            },
            &s,
            tol,
        )?);
    }
    for shape in [[3usize, 2, 2], [5, 4, 4], [2, 3, 1]] {
        let a = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&shape, 0.0, 1.0, &mut rng);
        type Loss = fn(&mut Graph<f64>, &ActivationMaps, &ActivationMaps) -> crate::Result<Var>;
        for (name, loss) in [("gsc_loss", gsc_loss as Loss), ("ccl_loss", ccl_loss as Loss)] {
            for side in 0..2 {
                let other = if side == 0 { b.clone() } else { a.clone() };
                let x = if side == 0 { &a } else { &b };
                let r = grad_check(
                    name,
                    |g, xv| {
                        let ov = g.constant(other.clone());
                        let (xm, om) = (as_maps(g, xv)?, as_maps(g, ov)?);
                        let (l, r) = if side == 0 { (xm, om) } else { (om, xm) };
                        Ok(loss(g, &l, &r)?)
                    },
                    x,
                    tol,
                )?;
                out.push(r);
            }
        }
        // raw map through normalization and background estimation into both losses
        let raw = Tensor::uniform(&shape, -0.5, 1.0, &mut rng);
        let target = Tensor::uniform(&[shape[0] + 1, shape[1], shape[2]], 0.0, 1.0, &mut rng);
        out.push(grad_check(
            "normalize+background+gsc+ccl",
            |g, xv| {
                let m = ActivationMaps::new(g, xv, false)?;
                let n = normalize_cam(g, &m)?;
                let bg = background_map(g, &n)?;
                let tv = g.constant(target.clone());
                let t = as_maps(g, tv)?;
                let a = gsc_loss(g, &bg, &t)?;
                let b = ccl_loss(g, &bg, &t)?;
                g.add(a, b)
            },
            &raw,
            tol,
        )?);
    }
    Ok(out)
}

impl From<crate::Error> for swt_tensor::TensorError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Tensor(t) => t,
            other => swt_tensor::TensorError::Config {
                op: "pipeline",
                msg: other.to_string(),
            },
        }
    }
}

/// Smallest analytic gradient the full-model check samples. With a loss of
/// order one and a step of 1e-5, central differences carry roughly 1e-11 of
/// rounding error, which swamps the relative error of smaller entries.
pub const RESOLVABLE_GRAD: f64 = 1e-5;

/// Total V2 loss of one synthetic sample against central differences in
/// `n_weights` randomly chosen parameter entries whose gradient is at least
/// [`RESOLVABLE_GRAD`] in magnitude.
pub fn check_full_model(cfg: &ModelConfig, seed: u64, n_weights: usize, tol: f64) -> Result<GradCheckReport> {
    let (model, mut store) = Model::new::<f64>(cfg, Mode::V2)?;
    let sample = gen_sample(seed, &DataConfig::for_image(cfg.image_size))?;
    let tcfg = TrainConfig::default();
    let loss_of = |store: &crate::params::ParamStore<f64>, trainable: bool| -> Result<(Graph<f64>, Var, crate::params::Bound)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, trainable);
        let x = model.image_input(&mut g, &sample.image)?;
        let fwd = model.forward(&mut g, &p, x, Some(&sample.labels))?;
        let l = sample_losses(&mut g, &fwd, &sample.labels, &tcfg)?;
        Ok((g, l.total, p))
    };

    let (g, total, p) = loss_of(&store, true)?;
    let grads = g.backward(total)?;
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    let mut spans = Vec::new();
    for ((_, t), &v) in store.iter().zip(p.vars()) {
        spans.push((flat.len(), t.numel()));
        flat.extend_from_slice(t.data());
        match grads.get(v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let candidates: Vec<usize> = (0..flat.len()).filter(|&i| analytic[i].abs() >= RESOLVABLE_GRAD).collect();
    if candidates.len() < n_weights {
        return Err(crate::Error::Config(format!(
            "only {} parameter entries have resolvable gradients",
            candidates.len()
        )));
    }
    let indices: Vec<usize> = (0..n_weights).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    let report = check_against_central_differences("full model", &analytic, &flat, &indices, tol, |point| {
        for (k, &(start, n)) in spans.iter().enumerate() {
            let dst = store.tensors_mut().nth(k).expect("param").1;
            dst.data_mut().copy_from_slice(&point[start..start + n]);
        }
        let (g, total, _) = loss_of(&store, false)?;
        Ok(g.value(total).item())
    })?;
    Ok(report)
}
