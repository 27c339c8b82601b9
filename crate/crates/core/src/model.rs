//! Per-sample forward pipeline tying the modules together.

use swt_tensor::{Graph, Real, Tensor, Var};

use crate::cam::{class_scores, compute_fout, normalize_cam, ActivationMaps, CamHead, ClassScores};
use crate::config::{Mode, ModelConfig, TrainConfig, NUM_STAGES};
use crate::encoder::{Encoder, TokenGrid};
use crate::error::{Error, Result};
use crate::hff::{fuse_stages, HierFeature, Hff};
use crate::losses::{ccl_loss, cls_loss, gsc_loss, LabelVector};
use crate::params::{Bound, Init, ParamStore};
use crate::refine::{
    background_map, build_prototypes, locate_seeds, refine_cam, token_affinity, AffinityMatrix, PrototypeSet,
    SeedMap,
};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub mode: Mode,
    pub encoder: Encoder,
    pub head: CamHead,
    pub hff: Option<Hff>,
}

impl Model {
    /// Builds the architecture and its initial parameters. The encoder and
    /// head are initialized first, so both modes share them for a given seed.
    pub fn new<F: Real>(config: &ModelConfig, mode: Mode) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let encoder = Encoder::new(&mut store, &mut init, config)?;
        let head = CamHead::new(&mut store, &mut init, config.final_dim(), config.num_classes)?;
        let hff = match mode {
            Mode::V1 => None,
            Mode::V2 => Some(Hff::new(&mut store, &mut init, config)?),
        };
        Ok((
            Model {
                config: config.clone(),
                mode,
                encoder,
                head,
                hff,
            },
            store,
        ))
    }

    /// Graph input for a `[3, H, W]` image.
    pub fn image_input<F: Real>(&self, g: &mut Graph<F>, image: &Tensor<f32>) -> Result<Var> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured 3x{s}x{s}",
                image.shape()
            )));
        }
        Ok(g.constant(image.cast()))
    }

    /// Runs the pipeline on one image. With `labels`, foreground maps of absent
    /// classes are zeroed before the background channel is derived.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        image: Var,
        labels: Option<&LabelVector>,
    ) -> Result<Forward<F>> {
        let stages = self.encoder.encode(g, p, image)?;
        let t_out = stages[NUM_STAGES - 1];
        let f_out = compute_fout(g, p, &self.head, &t_out)?;
        let scores = class_scores(g, &f_out)?;
        let cam = normalize_cam(g, &f_out)?;
        let fg = match labels {
            Some(l) => {
                if l.num_classes() != cam.num_classes {
                    return Err(Error::Dimension(format!(
                        "{} labels for {} classes",
                        l.num_classes(),
                        cam.num_classes
                    )));
                }
                let m = g.constant(l.to_tensor(&[cam.num_classes, 1, 1])?);
                let v = g.mul(cam.values, m)?;
                ActivationMaps::new(g, v, true)?
            }
            None => cam,
        };
        let cam_bg = background_map(g, &fg)?;
        let refined = match &self.hff {
            Some(hff) => {
                let f_hie = fuse_stages(g, p, hff, &stages)?;
                let affinity = token_affinity(g.value(t_out.values))?;
                let seeds = locate_seeds(&affinity, g.value(cam_bg.values))?;
                let prototypes = build_prototypes(g, &seeds, &f_hie)?;
                let rcam = refine_cam(g, &prototypes, &f_hie)?;
                Some(Refined {
                    f_hie,
                    affinity,
                    seeds,
                    prototypes,
                    rcam,
                })
            }
            None => None,
        };
        Ok(Forward {
            stages,
            f_out,
            scores,
            cam,
            cam_bg,
            refined,
        })
    }

    /// The `(C+1)`-channel maps used as segmentation seeds: refined maps when
    /// available, otherwise the background-augmented CAM.
    pub fn seed_maps<F: Real>(&self, fwd: &Forward<F>) -> ActivationMaps {
        fwd.refined.as_ref().map_or(fwd.cam_bg, |r| r.rcam)
    }
}

#[derive(Clone, Debug)]
pub struct Refined<F: Real> {
    pub f_hie: HierFeature,
    pub affinity: AffinityMatrix<F>,
    pub seeds: SeedMap,
    pub prototypes: PrototypeSet,
    pub rcam: ActivationMaps,
}

#[derive(Clone, Debug)]
pub struct Forward<F: Real> {
    pub stages: [TokenGrid; NUM_STAGES],
    pub f_out: ActivationMaps,
    pub scores: ClassScores,
    /// Normalized foreground maps, `[C, P, P]`.
    pub cam: ActivationMaps,
    /// Foreground (label-masked when labels were given) plus background, `[C+1, P, P]`.
    pub cam_bg: ActivationMaps,
    pub refined: Option<Refined<F>>,
}

/// Loss nodes of one sample; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub gsc: Option<Var>,
    pub ccl: Option<Var>,
    pub total: Var,
}

pub fn sample_losses<F: Real>(
    g: &mut Graph<F>,
    fwd: &Forward<F>,
    labels: &LabelVector,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    let cls = cls_loss(g, &fwd.scores, labels)?;
    let mut total = cls;
    let (mut gsc, mut ccl) = (None, None);
    if cfg.uses_gsc() || cfg.uses_ccl() {
        let r = fwd
            .refined
            .as_ref()
            .ok_or_else(|| Error::Config("consistency losses need a model with fusion".into()))?;
        let mut rcam = r.rcam;
        if cfg.detach_rcam {
            rcam.values = g.detach(rcam.values);
        }
        if cfg.uses_gsc() {
            let l = gsc_loss(g, &fwd.cam_bg, &rcam)?;
            total = g.add(total, l)?;
            gsc = Some(l);
        }
        if cfg.uses_ccl() {
            let l = ccl_loss(g, &fwd.cam_bg, &rcam)?;
            total = g.add(total, l)?;
            ccl = Some(l);
        }
    }
    Ok(LossVars { cls, gsc, ccl, total })
}
