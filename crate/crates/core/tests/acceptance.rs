//! Acceptance criteria. Each prints one `PASS`/`FAIL` line; the process exits
//! non-zero if any fails. A positional argument filters criteria by substring.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swt_core::cam::{normalize_cam, ActivationMaps, ClassScores};
use swt_core::config::NUM_STAGES;
use swt_core::data::{gen_dataset, DataConfig, Mask, Split};
use swt_core::eval::{eval_threads, evaluate};
use swt_core::gradcheck::{check_full_model, run_loss_suite};
use swt_core::losses::{ccl_from_cosines, ccl_loss, cls_loss, gsc_loss, LabelVector};
use swt_core::metrics::{evaluate_map, evaluate_miou, seed_mask_from_cams};
use swt_core::refine::{background_map, locate_seeds, token_affinity};
use swt_core::train::train;
use swt_core::{Mode, Model, ModelConfig, TrainConfig};
use swt_tensor::suite::run_op_suite;
use swt_tensor::{Graph, GradCheckReport, Real, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------------ gradients

const GRAD_TOL: f64 = 1e-4;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut reports = run_op_suite(0, GRAD_TOL).map_err(|e| e.to_string())?;
    reports.extend(run_loss_suite(0, GRAD_TOL).map_err(|e| e.to_string())?);
    reports.push(check_full_model(&tiny_config(0), 0, 32, GRAD_TOL).map_err(|e| e.to_string())?);
    let elapsed = start.elapsed();

    let mut per_op: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in &reports {
        let e = per_op.entry(r.op_name.as_str()).or_default();
        e.0 += 1;
        e.1 = e.1.max(r.max_rel_error);
    }
    let failed: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed).collect();
    let thin: Vec<&str> = per_op
        .iter()
        .filter(|(name, (n, _))| *name != &"full model" && *n < 3)
        .map(|(name, _)| *name)
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let detail = format!(
        "{} checks over {} ops, worst relative error {worst:.2e}, {:.1}s{}{}",
        reports.len(),
        per_op.len(),
        elapsed.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!(", failing: {:?}", failed.iter().map(|r| (&r.op_name, r.max_rel_error)).collect::<Vec<_>>()) },
        if thin.is_empty() { String::new() } else { format!(", fewer than 3 shapes: {thin:?}") },
    );
    check(failed.is_empty() && thin.is_empty() && elapsed < Duration::from_secs(60), detail)
}

// ------------------------------------------------------------------ shape law

fn shape_law() -> Outcome {
    let configs = [
        ModelConfig::default(),
        tiny_config(1),
        ModelConfig {
            image_size: 64,
            patch_size: 2,
            embed_dim: 12,
            heads: [1, 2, 3, 4],
            window_size: 4,
            ..ModelConfig::default()
        },
        ModelConfig {
            image_size: 48,
            patch_size: 2,
            embed_dim: 8,
            heads: [1, 1, 2, 2],
            window_size: 3,
            ..ModelConfig::default()
        },
    ];
    let mut lines = Vec::new();
    for cfg in &configs {
        let (model, store) = Model::new::<f32>(cfg, Mode::V1).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let img = Tensor::<f32>::uniform(&[3, cfg.image_size, cfg.image_size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let x = model.image_input(&mut g, &img).map_err(|e| e.to_string())?;
        let stages = model.encoder.encode(&mut g, &p, x).map_err(|e| e.to_string())?;
        let n = cfg.image_size / cfg.patch_size;
        let top = stages[NUM_STAGES - 1];
        let want = (8 * cfg.embed_dim, n / 8, n / 8);
        let got = (top.channels, top.height, top.width);
        if got != want || g.shape(top.values) != [want.0, want.1, want.2] {
            return Err(format!("D={} N={n}: got {got:?}, want {want:?}", cfg.embed_dim));
        }
        lines.push(format!("D={} N={n} -> {}x{}x{}", cfg.embed_dim, got.0, got.1, got.2));
    }
    Ok(format!("{} configs: {}", configs.len(), lines.join("; ")))
}

// ------------------------------------------------------------------ oracles

const ORACLE_TOL: f64 = 1e-6;

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // window attention, unshifted and shifted
    for (side, dim, heads, window, shift) in [(8, 8, 2, 4, 0), (8, 6, 3, 2, 0), (8, 8, 2, 4, 2), (12, 6, 2, 4, 2), (8, 4, 1, 2, 1)] {
        let (block, store) = make_block(side, dim, heads, window, shift, 21);
        let x = Tensor::<f64>::uniform(&[side * side, dim], -1.0, 1.0, &mut rng);
        let (y, _) = run_block(&block, &store, &x);
        note("window attention", max_abs_diff(&y, &block_oracle(&block, &store, x.data())));
    }

    // affinity and seeds
    for (c, side, k) in [(16, 4, 5), (5, 3, 3), (64, 2, 2), (8, 5, 4)] {
        let t = Tensor::<f64>::uniform(&[c, side, side], -1.0, 1.0, &mut rng);
        let m = Tensor::<f64>::uniform(&[k, side, side], 0.0, 1.0, &mut rng);
        let s = token_affinity(&t).map_err(|e| e.to_string())?;
        let l = side * side;
        let mut err: f64 = 0.0;
        for i in 0..l {
            for j in 0..l {
                err = err.max((s.get(i, j) - cosine(&token(&t, i), &token(&t, j)).abs()).abs());
            }
        }
        note("affinity", err);
        let seeds = locate_seeds(&s, &m).map_err(|e| e.to_string())?;
        let mismatches = seeds.assignment.iter().zip(seeds_oracle(s.values.data(), &m)).filter(|(a, b)| **a != *b).count();
        note("locate_seeds", mismatches as f64);
    }

    // bilinear resampling
    for (shape, oh, ow) in [([2, 3, 3], 7, 5), ([1, 4, 4], 128, 128), ([3, 5, 2], 2, 9), ([4, 4, 4], 4, 4)] {
        let x = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.bilinear_resize(v, oh, ow).map_err(|e| e.to_string())?;
        note("bilinear", max_abs_diff(g.data(y), &bilinear_oracle(&x, oh, ow)));
    }

    // metrics against hand-computed tables
    let lv = |b: &[bool]| LabelVector(b.to_vec());
    let map = evaluate_map(
        &[vec![0.9], vec![0.8], vec![0.7], vec![0.6]],
        &[lv(&[true]), lv(&[false]), lv(&[true]), lv(&[false])],
    )
    .map_err(|e| e.to_string())?;
    note("metrics", (map.map - 5.0 / 6.0).abs());
    let mask = |d: &[u8]| Mask { height: 1, width: d.len(), data: d.to_vec() };
    // prediction all class 0; ground truth half class 0, half background (1)
    let miou = evaluate_miou(&[mask(&[0, 0, 0, 0])], &[mask(&[0, 0, 1, 1])], 2).map_err(|e| e.to_string())?;
    note("metrics", (miou.miou - 0.25).abs());
    note("metrics", (miou.per_class_iou[0].unwrap_or(f64::NAN) - 0.5).abs());
    let miou = evaluate_miou(&[mask(&[0, 1, 1, 2])], &[mask(&[0, 1, 2, 2])], 3).map_err(|e| e.to_string())?;
    // IoU: class 0 = 1, class 1 = 1/2, class 2 = 1/2
    note("metrics", (miou.miou - 2.0 / 3.0).abs());
    let maps = Tensor::<f64>::uniform(&[4, 3, 3], 0.0, 1.0, &mut rng);
    let sm = seed_mask_from_cams(&maps, 12, 12).map_err(|e| e.to_string())?;
    let mut mism = 0;
    for y in 0..12 {
        for x in 0..12 {
            let (ty, tx) = (y * 3 / 12, x * 3 / 12);
            let mut best = 3;
            for c in 0..3 {
                if maps.get(&[c, ty, tx]) > maps.get(&[best, ty, tx]) {
                    best = c;
                }
            }
            mism += usize::from(sm.get(y, x) as usize != best);
        }
    }
    note("metrics", mism as f64);

    let elapsed = start.elapsed();
    let bad: Vec<_> = worst.iter().filter(|(_, &e)| !(e <= ORACLE_TOL)).collect();
    let detail = format!(
        "max deviations {:?}, {:.1}s",
        worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
    check(bad.is_empty() && elapsed < Duration::from_secs(120), detail)
}

// ------------------------------------------------------------------ loss values

fn loss_values() -> Outcome {
    let tol = 1e-6;
    let mut g = Graph::<f64>::new();
    let mut results = Vec::new();
    let maps = |g: &mut Graph<f64>, t: Tensor<f64>| {
        let v = g.constant(t);
        ActivationMaps::new(g, v, true).unwrap()
    };

    let a = Tensor::<f64>::uniform(&[5, 4, 4], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let (am, am2) = (maps(&mut g, a.clone()), maps(&mut g, a));
    let l = ccl_loss(&mut g, &am, &am2).map_err(|e| e.to_string())?;
    results.push(("ccl at cs=1", g.value(l).item(), 2.0 / 9.0));
    // disjoint supports are orthogonal in every class
    let mut left = Tensor::<f64>::zeros(&[3, 2, 2]);
    let mut right = Tensor::<f64>::zeros(&[3, 2, 2]);
    for c in 0..3 {
        left.set(&[c, 0, 0], 1.0);
        right.set(&[c, 1, 1], 0.7);
    }
    let (lm, rm) = (maps(&mut g, left), maps(&mut g, right));
    let l = ccl_loss(&mut g, &lm, &rm).map_err(|e| e.to_string())?;
    results.push(("ccl at cs=0", g.value(l).item(), 0.5));

    let (mut best_cs, mut best) = (f64::NAN, f64::INFINITY);
    for i in 0..=20_000 {
        let cs = -1.0 + i as f64 * 1e-4;
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[1], &[cs]).unwrap());
        let l = ccl_from_cosines(&mut g, v).map_err(|e| e.to_string())?;
        let val = g.value(l).item();
        if val < best {
            (best, best_cs) = (val, cs);
        }
    }
    results.push(("ccl minimum", best, 26.0 / 169.0));
    // the sweep grid is 1e-4 wide, so the arg-min is located to half a step
    let argmin_ok = (best_cs - 9.0 / 13.0).abs() <= 0.5e-4 + 1e-12;

    for c in [1usize, 4, 20] {
        let s = g.constant(Tensor::full(&[c], 0.5));
        let sc = ClassScores { scores: s, logits: s };
        for labels in [vec![true; c], (0..c).map(|i| i % 2 == 0).collect()] {
            let l = cls_loss(&mut g, &sc, &LabelVector(labels)).map_err(|e| e.to_string())?;
            results.push(("cls at s=0.5", g.value(l).item(), std::f64::consts::LN_2));
        }
    }
    let b = Tensor::<f64>::uniform(&[5, 3, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let (bm, bm2) = (maps(&mut g, b.clone()), maps(&mut g, b));
    let l = gsc_loss(&mut g, &bm, &bm2).map_err(|e| e.to_string())?;
    results.push(("gsc on identical maps", g.value(l).item(), 0.0));

    let bad: Vec<_> = results.iter().filter(|(_, got, want)| !((got - want).abs() <= tol)).collect();
    let detail = format!(
        "{} values within {tol:e}; ccl min {best:.8} at cs={best_cs:.4} (9/13={:.4}){}",
        results.len() - bad.len(),
        9.0 / 13.0,
        if bad.is_empty() { String::new() } else { format!("; off: {bad:?}") }
    );
    check(bad.is_empty() && argmin_ok, detail)
}

// ------------------------------------------------------------------ training

fn overfit() -> Outcome {
    let start = Instant::now();
    // 40 samples split 32 / 8; train and score on the 32
    let data = gen_dataset(40, 1000, &DataConfig::default()).map_err(|e| e.to_string())?;
    let train_set = data.split(Split::Train);
    if train_set.len() != 32 {
        return Err(format!("expected 32 training samples, got {}", train_set.len()));
    }
    let (model, mut store) = Model::new::<f32>(&ModelConfig::default(), Mode::V1).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        mode: Mode::V1,
        steps: 300,
        ..TrainConfig::default()
    };
    let hist = train(&model, &mut store, &tc, &train_set, |_| {}).map_err(|e| e.to_string())?;
    let report = evaluate(&model, &store, &train_set, eval_threads()).map_err(|e| e.to_string())?;
    let early = hist[..10].iter().map(|r| r.losses.cls).sum::<f64>() / 10.0;
    let late = hist[hist.len() - 10..].iter().map(|r| r.losses.cls).sum::<f64>() / 10.0;
    let elapsed = start.elapsed();
    check(
        report.map >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "train mAP {:.4} (need >= 0.95), cls {early:.3} -> {late:.3}, {:.0}s",
            report.map,
            elapsed.as_secs_f64()
        ),
    )
}

/// Training protocol shared by the ordering and ablation criteria.
const ORDER_STEPS: usize = 600;
const ORDER_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Variant {
    Cls,
    ClsGsc,
    Full,
}

impl Variant {
    fn train_config(self, seed: u64) -> TrainConfig {
        let mode = if self == Variant::Cls { Mode::V1 } else { Mode::V2 };
        TrainConfig {
            mode,
            steps: ORDER_STEPS,
            use_ccl: self == Variant::Full,
            seed,
            ..TrainConfig::default()
        }
    }
}

struct RunResult {
    variant: Variant,
    seed: u64,
    miou: f64,
    map: f64,
}

struct Experiment {
    runs: Vec<RunResult>,
    elapsed: Duration,
}

impl Experiment {
    fn mean_miou(&self, v: Variant) -> f64 {
        let xs: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.miou).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    fn summary(&self) -> String {
        let mut runs: Vec<&RunResult> = self.runs.iter().collect();
        runs.sort_by_key(|r| (r.variant, r.seed));
        runs.iter()
            .map(|r| format!("{:?}/s{} mIoU {:.4} mAP {:.3}", r.variant, r.seed, r.miou, r.map))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

static EXPERIMENT: Mutex<Option<Result<std::sync::Arc<Experiment>, String>>> = Mutex::new(None);

/// Nine runs (three variants by three seeds) on the 200-sample training split,
/// evaluated on that split; computed once and shared.
fn experiment() -> Result<std::sync::Arc<Experiment>, String> {
    let mut slot = EXPERIMENT.lock().unwrap();
    if let Some(r) = slot.as_ref() {
        return r.clone();
    }
    let r = run_experiment().map(std::sync::Arc::new);
    *slot = Some(r.clone());
    r
}

fn run_experiment() -> Result<Experiment, String> {
    let start = Instant::now();
    let data = gen_dataset(250, 0, &DataConfig::default()).map_err(|e| e.to_string())?;
    let split = data.split(Split::Train);
    if split.len() != 200 {
        return Err(format!("expected a 200-sample split, got {}", split.len()));
    }
    let jobs: Vec<(Variant, u64)> = [Variant::Cls, Variant::ClsGsc, Variant::Full]
        .into_iter()
        .flat_map(|v| ORDER_SEEDS.map(|s| (v, s)))
        .collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
    let eval_workers = (eval_threads() / workers).max(1);
    let queue = Mutex::new(jobs.into_iter());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((variant, seed)) = queue.lock().unwrap().next() else { break };
                let run = || -> Result<RunResult, String> {
                    let tc = variant.train_config(seed);
                    let cfg = ModelConfig { seed, ..ModelConfig::default() };
                    let (model, mut store) = Model::new::<f32>(&cfg, tc.mode).map_err(|e| e.to_string())?;
                    train(&model, &mut store, &tc, &split, |_| {}).map_err(|e| e.to_string())?;
                    let rep = evaluate(&model, &store, &split, eval_workers).map_err(|e| e.to_string())?;
                    Ok(RunResult { variant, seed, miou: rep.miou, map: rep.map })
                };
                let r = run();
                results.lock().unwrap().push(r);
            });
        }
    });
    let runs = results.into_inner().unwrap().into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Experiment { runs, elapsed: start.elapsed() })
}

const EXPERIMENT_BUDGET: Duration = Duration::from_secs(45 * 60);

fn ordering() -> Outcome {
    let e = experiment()?;
    let (v1, v2) = (e.mean_miou(Variant::Cls), e.mean_miou(Variant::Full));
    let gap = 100.0 * (v2 - v1);
    check(
        gap >= 2.0 && e.elapsed < EXPERIMENT_BUDGET,
        format!(
            "mean mIoU V1 {:.2} vs V2 {:.2}, gap {gap:+.2} points (need >= 2), {:.0}s; {}",
            100.0 * v1,
            100.0 * v2,
            e.elapsed.as_secs_f64(),
            e.summary()
        ),
    )
}

fn ablation() -> Outcome {
    let e = experiment()?;
    let (cls, gsc, full) = (e.mean_miou(Variant::Cls), e.mean_miou(Variant::ClsGsc), e.mean_miou(Variant::Full));
    check(
        cls < gsc && gsc <= full + 0.005 && e.elapsed < EXPERIMENT_BUDGET,
        format!(
            "mean mIoU CLS {:.2} < CLS+GSC {:.2} <= CLS+GSC+CCL {:.2} (+0.5)",
            100.0 * cls,
            100.0 * gsc,
            100.0 * full
        ),
    )
}

// ------------------------------------------------------------------ background

fn background_identity_for<F: Real>(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut positions = 0;
    for c in 1..=6 {
        for side in 1..=8 {
            for _ in 0..4 {
                let raw = Tensor::<F>::uniform(&[c, side, side], -1.0, 1.0, rng);
                let mut g = Graph::<F>::new();
                let v = g.constant(raw);
                let m = ActivationMaps::new(&g, v, false).map_err(|e| e.to_string())?;
                let n = normalize_cam(&mut g, &m).map_err(|e| e.to_string())?;
                let out = background_map(&mut g, &n).map_err(|e| e.to_string())?;
                let d = g.data(out.values);
                let l = side * side;
                for i in 0..l {
                    let fg = (0..c).map(|k| d[k * l + i]).fold(F::neg_infinity(), F::max);
                    let all = (0..=c).map(|k| d[k * l + i]).fold(F::neg_infinity(), F::max);
                    if all < fg || d[c * l + i] + fg != F::one() {
                        return Err(format!("C={c} P={side} position {i}: bg {:?} fg max {:?}", d[c * l + i], fg));
                    }
                    positions += 1;
                }
            }
        }
    }
    Ok(positions)
}

fn background_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = background_identity_for::<f64>(&mut rng)?;
    let b = background_identity_for::<f32>(&mut rng)?;
    Ok(format!("{} positions exact (f64 and f32), C in 1..=6, P in 1..=8", a + b))
}

// ------------------------------------------------------------------ runner

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("shape law", shape_law),
        ("oracle equivalence", oracle_suite),
        ("analytic loss values", loss_values),
        ("background-map identity", background_identity),
        ("overfit", overfit),
        ("V2 over V1 ordering", ordering),
        ("loss ablation ordering", ablation),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        if filter.as_deref().is_some_and(|p| !name.contains(p)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
