//! Classification AP, segmentation IoU and seed-mask extraction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use swt_tensor::{Real, Tensor};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::losses::LabelVector;
use crate::refine::argmax_background_ties;

/// Mean precision at each positive, ranking by score (descending) and then
/// by index. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Per-class AP over samples, averaged over classes that have positives.
pub fn evaluate_map(scores: &[Vec<f64>], labels: &[LabelVector]) -> Result<MapReport> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let c = labels.first().map_or(0, LabelVector::num_classes);
    if scores.iter().any(|s| s.len() != c) || labels.iter().any(|l| l.num_classes() != c) {
        return Err(Error::Dimension("score and label widths disagree".into()));
    }
    let per_class_ap: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|l| l.has(k)).collect();
            average_precision(&s, &y)
        })
        .collect();
    let included: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let excluded = (0..c).filter(|&k| per_class_ap[k].is_none()).collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().sum::<f64>() / included.len() as f64
    };
    Ok(MapReport {
        map,
        per_class_ap,
        excluded,
    })
}

/// `counts[gt][pred]` pixel tallies; merging is plain addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.data.iter().zip(&gt.data) {
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::Dimension(format!("class index {} outside {k} classes", p.max(t))));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// IoU per class, `None` where prediction and truth are both empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
                let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
}

impl MiouReport {
    pub fn from_confusion(c: &Confusion) -> Self {
        let per_class_iou = c.iou();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { miou, per_class_iou }
    }
}

pub fn evaluate_miou(preds: &[Mask], gts: &[Mask], num_classes: usize) -> Result<MiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let mut conf = Confusion::new(num_classes);
    for (p, t) in preds.iter().zip(gts) {
        conf.add(p, t)?;
    }
    Ok(MiouReport::from_confusion(&conf))
}

/// Per-token argmax over `[C+1, P, P]` maps (background last, winning ties),
/// then nearest-neighbour upsampling to `height × width`.
pub fn seed_mask_from_cams<F: Real>(maps: &Tensor<F>, height: usize, width: usize) -> Result<Mask> {
    let &[k, ph, pw] = maps.shape() else {
        return Err(Error::Dimension(format!("seed maps must be rank 3, got {:?}", maps.shape())));
    };
    if !(2..=256).contains(&k) {
        return Err(Error::Dimension(format!("{k} channels cannot form a seed mask")));
    }
    let d = maps.data();
    let l = ph * pw;
    let tokens: Vec<u8> = (0..l)
        .map(|i| argmax_background_ties(k, |c| d[c * l + i]) as u8)
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let ty = y * ph / height;
        data.extend((0..width).map(|x| tokens[ty * pw + x * pw / width]));
    }
    Ok(Mask { height, width, data })
}

/// Evaluation summary, printable as a key-value report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        writeln!(s, "samples = {}", self.num_samples).unwrap();
        writeln!(s, "map = {:.6}", self.map).unwrap();
        writeln!(s, "miou = {:.6}", self.miou).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "{:<12} {:>10} {:>10}", "class", "ap", "iou").unwrap();
        for (k, name) in self.class_names.iter().enumerate() {
            let ap = self.per_class_ap.get(k).copied().flatten();
            let iou = self.per_class_iou.get(k).copied().flatten();
            writeln!(s, "{name:<12} {:>10} {:>10}", fmt(ap), fmt(iou)).unwrap();
        }
        s
    }
}
