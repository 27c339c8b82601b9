//! Whole-split evaluation: classification mAP and seed-mask mIoU.

use swt_tensor::{Graph, Tensor};

use crate::data::{Mask, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::LabelVector;
use crate::metrics::{evaluate_map, seed_mask_from_cams, Confusion, EvalReport, MiouReport};
use crate::model::Model;
use crate::params::ParamStore;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "SWT_THREADS";

pub fn eval_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(avail, |n| n.min(avail))
}

/// What a trained model says about one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub scores: Vec<f64>,
    /// `[C, P, P]` normalized CAM.
    pub cam: Tensor<f32>,
    /// `[C+1, P, P]` seed maps (refined maps when the model has fusion).
    pub seeds: Tensor<f32>,
    pub mask: Mask,
}

/// Inference on one sample. Seed maps are restricted to the sample's
/// image-level labels.
pub fn predict(model: &Model, store: &ParamStore<f32>, image: &Tensor<f32>, labels: &LabelVector) -> Result<Prediction> {
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g, false);
    let x = model.image_input(&mut g, image)?;
    let fwd = model.forward(&mut g, &p, x, Some(labels))?;
    let seeds = g.value(model.seed_maps(&fwd).values).clone();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Ok(Prediction {
        scores: g.data(fwd.scores.scores).iter().map(|&v| v as f64).collect(),
        cam: g.value(fwd.cam.values).clone(),
        mask: seed_mask_from_cams(&seeds, h, w)?,
        seeds,
    })
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    let mut names: Vec<String> = if num_classes == CLASS_NAMES.len() {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|k| format!("class{k}")).collect()
    };
    names.push("background".into());
    names
}

/// Evaluates `samples` on up to `threads` threads. Results do not depend on
/// the thread count.
pub fn evaluate(model: &Model, store: &ParamStore<f32>, samples: &[&Sample], threads: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Incompatible("cannot evaluate an empty split".into()));
    }
    let c = model.config.num_classes;
    if let Some(s) = samples.iter().find(|s| s.labels.num_classes() != c) {
        return Err(Error::Incompatible(format!(
            "sample {} has {} classes, model has {c}",
            s.id,
            s.labels.num_classes()
        )));
    }
    let threads = threads.clamp(1, samples.len());
    let chunk = samples.len().div_ceil(threads);
    let parts: Vec<Result<(Vec<Vec<f64>>, Confusion)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    let mut conf = Confusion::new(c + 1);
                    let mut scores = Vec::with_capacity(part.len());
                    for s in part {
                        let pr = predict(model, store, &s.image, &s.labels)?;
                        conf.add(&pr.mask, &s.gt_mask)?;
                        scores.push(pr.scores);
                    }
                    Ok((scores, conf))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut scores = Vec::with_capacity(samples.len());
    let mut conf = Confusion::new(c + 1);
    for part in parts {
        let (s, cf) = part?;
        scores.extend(s);
        conf.merge(&cf);
    }
    let labels: Vec<LabelVector> = samples.iter().map(|s| s.labels.clone()).collect();
    let map = evaluate_map(&scores, &labels)?;
    let miou = MiouReport::from_confusion(&conf);
    Ok(EvalReport {
        num_samples: samples.len(),
        map: map.map,
        per_class_ap: map.per_class_ap,
        miou: miou.miou,
        per_class_iou: miou.per_class_iou,
        class_names: class_names(c),
    })
}
