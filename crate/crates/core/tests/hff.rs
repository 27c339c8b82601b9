mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swt_core::config::NUM_STAGES;
use swt_core::encoder::TokenGrid;
use swt_core::hff::{fuse_stages, Hff, HFF_PREFIX};
use swt_core::params::{Init, ParamStore};
use swt_core::{Mode, Model, ModelConfig};
use swt_tensor::{Graph, Tensor};

fn stage_tensors(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..NUM_STAGES)
        .map(|k| Tensor::uniform(&[cfg.stage_dim(k), cfg.stage_side(k), cfg.stage_side(k)], -1.0, 1.0, &mut rng))
        .collect()
}

fn fuse(hff: &Hff, store: &ParamStore<f64>, xs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let grids: Vec<TokenGrid> = xs
        .iter()
        .map(|t| {
            let v = g.constant(t.clone());
            TokenGrid::new(&g, v).unwrap()
        })
        .collect();
    let out = fuse_stages(&mut g, &p, hff, &grids.try_into().unwrap()).unwrap();
    assert_eq!(out.provenance, [1, 2, 3, 4]);
    g.value(out.grid.values).clone()
}

fn fixture(cfg: &ModelConfig) -> (Hff, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let hff = Hff::new(&mut store, &mut Init::new(cfg.seed), cfg).unwrap();
    (hff, store)
}

#[test]
fn default_output_shape() {
    let cfg = ModelConfig::default();
    let (hff, store) = fixture(&cfg);
    let out = fuse(&hff, &store, &stage_tensors(&cfg, 0));
    assert_eq!(out.shape(), [128, 4, 4]);
}

#[test]
fn zero_stages_and_biases_give_zero_output() {
    let cfg = tiny_config(0);
    let (hff, store) = fixture(&cfg);
    let zeros: Vec<Tensor<f64>> = stage_tensors(&cfg, 0).iter().map(|t| Tensor::zeros(t.shape())).collect();
    assert!(fuse(&hff, &store, &zeros).data().iter().all(|&v| v == 0.0));
}

#[test]
fn every_stage_reaches_the_output() {
    let cfg = tiny_config(1);
    let (hff, store) = fixture(&cfg);
    let base = stage_tensors(&cfg, 1);
    let y0 = fuse(&hff, &store, &base);
    for k in 0..NUM_STAGES {
        let mut xs = base.clone();
        let t = &mut xs[k];
        t.data_mut()[0] += 0.5;
        let y = fuse(&hff, &store, &xs);
        assert_eq!(y.shape(), y0.shape());
        assert!(max_abs_diff(y.data(), y0.data()) > 0.0, "stage {} is dead", k + 1);
    }
}

#[test]
fn rejects_stages_that_break_the_shape_law() {
    let cfg = tiny_config(0);
    let (hff, store) = fixture(&cfg);
    let mut xs = stage_tensors(&cfg, 0);
    xs[2] = Tensor::zeros(&[cfg.stage_dim(2) + 1, cfg.stage_side(2), cfg.stage_side(2)]);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let grids: Vec<TokenGrid> = xs
        .iter()
        .map(|t| {
            let v = g.constant(t.clone());
            TokenGrid::new(&g, v).unwrap()
        })
        .collect();
    assert!(fuse_stages(&mut g, &p, &hff, &grids.try_into().unwrap()).is_err());
}

#[test]
fn fusion_is_under_a_tenth_of_the_encoder() {
    let cfg = ModelConfig::default();
    let (_, store) = Model::new::<f32>(&cfg, Mode::V2).unwrap();
    let fusion = store.num_elements_with_prefix(HFF_PREFIX);
    let head = store.num_elements_with_prefix("head.");
    let encoder = store.num_elements() - fusion - head;
    assert!(fusion > 0);
    assert!((fusion as f64) < 0.1 * encoder as f64, "{fusion} vs {encoder}");
    let (_, v1) = Model::new::<f32>(&cfg, Mode::V1).unwrap();
    assert_eq!(v1.num_elements_with_prefix(HFF_PREFIX), 0);
    assert_eq!(v1.num_elements(), store.num_elements() - fusion);
}
