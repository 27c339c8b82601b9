//! Classification, map-consistency and class-wise contrastive objectives.

use std::fmt;

use serde::{Deserialize, Serialize};
use swt_tensor::{Graph, Real, Tensor, Var};

use crate::cam::{ActivationMaps, ClassScores};
use crate::error::{Error, Result};
use crate::refine::NORM_GUARD;

/// Scores are clamped to `[ε, 1−ε]` before taking logs.
pub const CLS_EPS: f64 = 1e-7;

/// Image-level multi-hot labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn from_classes(num_classes: usize, present: &[usize]) -> Self {
        let mut v = vec![false; num_classes];
        present.iter().for_each(|&c| v[c] = true);
        LabelVector(v)
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn has(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `"0101"`-style, class 0 first.
    pub fn bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bitstring(s: &str) -> Option<Self> {
        s.chars()
            .map(|ch| match ch {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .filter(|v| !v.is_empty())
            .map(LabelVector)
    }

    pub fn to_tensor<F: Real>(&self, shape: &[usize]) -> Result<Tensor<F>> {
        let data = self.0.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
        Ok(Tensor::from_vec(shape, data)?)
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.bitstring())
    }
}

/// Mean binary cross-entropy over classes.
pub fn cls_loss<F: Real>(g: &mut Graph<F>, s: &ClassScores, labels: &LabelVector) -> Result<Var> {
    let c = g.shape(s.scores)[0];
    if c != labels.num_classes() {
        return Err(Error::Dimension(format!("{c} scores but {} labels", labels.num_classes())));
    }
    let eps = F::of(CLS_EPS);
    let s = g.clamp(s.scores, eps, F::one() - eps);
    let y = g.constant(labels.to_tensor(&[c])?);
    let ny = g.constant(labels.to_tensor::<F>(&[c])?.map(|v| F::one() - v));
    let ls = g.ln(s);
    let one_minus = g.rsub_scalar(F::one(), s);
    let lns = g.ln(one_minus);
    let pos = g.mul(y, ls)?;
    let neg = g.mul(ny, lns)?;
    let ll = g.add(pos, neg)?;
    let m = g.mean_all(ll);
    Ok(g.scale(m, -F::one()))
}

fn check_same(g: &Graph<impl Real>, op: &str, a: &ActivationMaps, b: &ActivationMaps) -> Result<()> {
    if g.shape(a.values) != g.shape(b.values) {
        return Err(Error::Dimension(format!(
            "{op}: {:?} vs {:?}",
            g.shape(a.values),
            g.shape(b.values)
        )));
    }
    Ok(())
}

/// Mean absolute difference; equal to the class mean of per-class spatial means.
pub fn gsc_loss<F: Real>(g: &mut Graph<F>, cam: &ActivationMaps, rcam: &ActivationMaps) -> Result<Var> {
    check_same(g, "gsc_loss", cam, rcam)?;
    let d = g.sub(cam.values, rcam.values)?;
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

/// Per-class cosine between flattened maps, zero when either map is zero.
pub fn class_cosines<F: Real>(g: &mut Graph<F>, cam: &ActivationMaps, rcam: &ActivationMaps) -> Result<Var> {
    check_same(g, "class_cosines", cam, rcam)?;
    let a = cam.flat(g)?;
    let b = rcam.flat(g)?;
    let a = g.l2_normalize(a, F::of(NORM_GUARD));
    let b = g.l2_normalize(b, F::of(NORM_GUARD));
    let ab = g.mul(a, b)?;
    Ok(g.sum(ab, 1)?)
}

/// `½[((2/3)·cs)² + (1 − cs)²]` applied elementwise to a cosine tensor and averaged.
pub fn ccl_from_cosines<F: Real>(g: &mut Graph<F>, cs: Var) -> Result<Var> {
    let a = g.scale(cs, F::of(2.0 / 3.0));
    let a = g.square(a)?;
    let b = g.rsub_scalar(F::one(), cs);
    let b = g.square(b)?;
    let s = g.add(a, b)?;
    let m = g.mean_all(s);
    Ok(g.scale(m, F::of(0.5)))
}

pub fn ccl_loss<F: Real>(g: &mut Graph<F>, cam: &ActivationMaps, rcam: &ActivationMaps) -> Result<Var> {
    let cs = class_cosines(g, cam, rcam)?;
    ccl_from_cosines(g, cs)
}

/// Scalar loss record for one step or sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub cls: f64,
    pub gsc: f64,
    pub ccl: f64,
    pub total: f64,
}

/// Sums the components, rejecting any that is not finite.
pub fn total_loss(cls: f64, gsc: f64, ccl: f64) -> Result<LossBundle> {
    for (name, v) in [("cls", cls), ("gsc", gsc), ("ccl", ccl)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: name.into() });
        }
    }
    Ok(LossBundle {
        cls,
        gsc,
        ccl,
        total: cls + gsc + ccl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> ActivationMaps {
        let v = g.constant(Tensor::from_f64(shape, data).unwrap());
        ActivationMaps::new(g, v, true).unwrap()
    }

    fn cls_value(scores: &[f64], labels: &[bool]) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_f64(&[scores.len()], scores).unwrap());
        let cs = ClassScores { scores: s, logits: s };
        let l = cls_loss(&mut g, &cs, &LabelVector(labels.to_vec())).unwrap();
        g.value(l).item()
    }

    #[test]
    fn cls_examples() {
        for labels in [[true, false, true], [false, false, false]] {
            assert!((cls_value(&[0.5; 3], &labels) - 2f64.ln()).abs() < 1e-12);
        }
        assert!(cls_value(&[1.0, 0.0], &[true, false]) <= 1e-6);
        let expected = -0.5 * (0.9f64.ln() + 0.8f64.ln());
        assert!((cls_value(&[0.9, 0.2], &[true, false]) - expected).abs() < 1e-12);
        assert!((expected - 0.1643).abs() < 1e-4);
    }

    #[test]
    fn cls_rejects_length_mismatch() {
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64(&[2], &[0.5, 0.5]).unwrap());
        let cs = ClassScores { scores: s, logits: s };
        let r = cls_loss(&mut g, &cs, &LabelVector(vec![true; 3]));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn gsc_examples() {
        let mut g = Graph::new();
        let a = maps(&mut g, &[2, 2, 2], &[1.0; 8]);
        let b = maps(&mut g, &[2, 2, 2], &[0.0; 8]);
        let same = gsc_loss(&mut g, &a, &a).unwrap();
        let far = gsc_loss(&mut g, &a, &b).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert_eq!(g.value(far).item(), 1.0);
        let c = maps(&mut g, &[2, 1, 2], &[0.0; 4]);
        assert!(gsc_loss(&mut g, &a, &c).is_err());
    }

    #[test]
    fn ccl_examples() {
        let mut g = Graph::new();
        let a = maps(&mut g, &[3, 2, 2], &[0.1, 0.4, 0.9, 0.0, 1.0, 0.2, 0.3, 0.3, 0.7, 0.0, 0.0, 0.5]);
        let l = ccl_loss(&mut g, &a, &a).unwrap();
        assert!((g.value(l).item() - 2.0 / 9.0).abs() < 1e-12);
        let z = maps(&mut g, &[3, 2, 2], &[0.0; 12]);
        let l = ccl_loss(&mut g, &a, &z).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bundle_sums_and_flags_non_finite() {
        let b = total_loss(0.5, 0.0, 0.2222).unwrap();
        assert!((b.total - 0.7222).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        match total_loss(0.1, f64::NAN, 0.0) {
            Err(Error::NonFiniteLoss { component }) => assert_eq!(component, "gsc"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bitstrings_roundtrip() {
        let l = LabelVector::from_classes(4, &[0, 2]);
        assert_eq!(l.bitstring(), "1010");
        assert_eq!(LabelVector::parse_bitstring("1010"), Some(l));
        assert_eq!(LabelVector::parse_bitstring("10x0"), None);
        assert_eq!(LabelVector::parse_bitstring(""), None);
    }

    proptest! {
        #[test]
        fn gsc_is_bounded_and_symmetric(
            a in prop::collection::vec(0.0f64..=1.0, 18),
            b in prop::collection::vec(0.0f64..=1.0, 18),
        ) {
            let mut g = Graph::new();
            let ma = maps(&mut g, &[2, 3, 3], &a);
            let mb = maps(&mut g, &[2, 3, 3], &b);
            let ab = gsc_loss(&mut g, &ma, &mb).unwrap();
            let ba = gsc_loss(&mut g, &mb, &ma).unwrap();
            let (x, y) = (g.value(ab).item(), g.value(ba).item());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, y);
        }

        #[test]
        fn cls_is_non_negative(
            s in prop::collection::vec(0.0f64..=1.0, 4),
            y in prop::collection::vec(any::<bool>(), 4),
        ) {
            prop_assert!(cls_value(&s, &y) >= 0.0);
        }

        #[test]
        fn ccl_is_at_least_its_minimum(
            a in prop::collection::vec(0.0f64..=1.0, 12),
            b in prop::collection::vec(0.0f64..=1.0, 12),
        ) {
            let mut g = Graph::new();
            let ma = maps(&mut g, &[3, 2, 2], &a);
            let mb = maps(&mut g, &[3, 2, 2], &b);
            let l = ccl_loss(&mut g, &ma, &mb).unwrap();
            prop_assert!(g.value(l).item() >= 26.0 / 169.0 - 1e-12);
        }
    }
}
