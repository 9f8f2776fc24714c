//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Desk scale: 2,000 synthetic training samples on a 101-point grid,
//! 200 synthetic test targets.

use std::time::{Duration, Instant};

use mfinverse::data::{synth_generate, Grid, LaserParams, Spectrum};
use mfinverse::ensemble::{
    forward_values, lf_candidates, train_bundle, EnsembleConfig, TrainConfig,
};
use mfinverse::explain::{scalar_output, shap_batch, OutputMode, ScalarForest};
use mfinverse::forest::{Forest, ForestParams, MaxFeatures, Node, Tree};
use mfinverse::harness::{evaluate_on_test, time_inference, Evaluation, Pipeline};
use mfinverse::metrics::{batch_rmse, nepd, nepd_stats, rmse_percent, spectrum_rmse, Bounds};
use mfinverse::optimizer::{lshade_minimize, DeConfig};
use mfinverse::pca::{fit_rows, PcaModel};
use mfinverse::{Dataset, ModelBundle};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let took = start.elapsed();
    let pass = o.pass && took <= limit;
    println!(
        "criterion {id:>2} {name:<24} {}  ({:.1}s / limit {}s) {}",
        if pass { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs(),
        o.detail
    );
    pass
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- 1: metrics -----------------------------------------------------------

fn criterion_metrics() -> Outcome {
    let b = Bounds::default();
    let lo = LaserParams::from_array(b.lower);
    let hi = LaserParams::from_array(b.upper);
    let one_axis = LaserParams::new(b.upper[0], b.lower[1], b.lower[2]);
    let mut errs = vec![
        nepd(&lo, &lo, &b),
        (nepd(&lo, &hi, &b) - 1.0).abs(),
        (nepd(&lo, &one_axis, &b) - 1.0 / 3f64.sqrt()).abs(),
    ];

    let grid = Grid::band(101).unwrap();
    let a: Vec<f64> = (0..101).map(|i| 0.2 + 0.005 * i as f64).collect();
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    errs.push(rmse_percent(&a, &a));
    errs.push((rmse_percent(&a, &shifted) - 10.0).abs());

    // Batch metrics against direct loops.
    let mut r = rng(1);
    let mk = |r: &mut ChaCha8Rng| {
        Spectrum::new(grid.clone(), (0..101).map(|_| r.random::<f64>()).collect()).unwrap()
    };
    let truth: Vec<Spectrum> = (0..50).map(|_| mk(&mut r)).collect();
    let pred: Vec<Spectrum> = (0..50).map(|_| mk(&mut r)).collect();
    let batch = batch_rmse(&truth, &pred).unwrap();
    let (mut sse, mut cells, mut worst) = (0.0, 0.0, 0.0f64);
    for (t, p) in truth.iter().zip(&pred) {
        let mut s = 0.0;
        for i in 0..101 {
            let d = t.values()[i] - p.values()[i];
            s += d * d;
        }
        sse += s;
        cells += 101.0;
        worst = worst.max((s / 101.0).sqrt() * 100.0);
        errs.push((spectrum_rmse(t, p).unwrap() - (s / 101.0).sqrt() * 100.0).abs());
    }
    errs.push((batch.pooled - (sse / cells).sqrt() * 100.0).abs());
    errs.push((batch.max - worst).abs());

    let pairs: Vec<(LaserParams, LaserParams)> = (0..50)
        .map(|_| {
            let u: [f64; 3] = std::array::from_fn(|_| r.random());
            let v: [f64; 3] = std::array::from_fn(|_| r.random());
            (b.denormalize(u), b.denormalize(v))
        })
        .collect();
    let direct: Vec<f64> = pairs
        .iter()
        .map(|(t, p)| {
            let (t, p) = (t.to_array(), p.to_array());
            let s: f64 = (0..3)
                .map(|k| ((t[k] - p[k]) / (b.upper[k] - b.lower[k])).powi(2))
                .sum();
            (s / 3.0).sqrt()
        })
        .collect();
    let stats = nepd_stats(&pairs, &b).unwrap();
    errs.push((stats.average - direct.iter().sum::<f64>() / 50.0).abs());
    errs.push((stats.max - direct.iter().copied().fold(0.0, f64::max)).abs());

    let worst_err = errs.iter().copied().fold(0.0, f64::max);
    outcome(worst_err <= 1e-12, format!("max deviation {worst_err:.2e}"))
}

// ---- 2: PCA ---------------------------------------------------------------

fn criterion_pca() -> Outcome {
    let mut r = rng(2);
    let mut worst_recon = 0.0f64;
    let mut worst_idem = 0.0f64;
    let mut monotone = true;
    for _ in 0..5 {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..100).map(|_| r.random::<f64>()).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();

        // Oracle: squared singular values of the centered matrix.
        let mean: Vec<f64> = (0..100)
            .map(|j| rows.iter().map(|v| v[j]).sum::<f64>() / 20.0)
            .collect();
        let m = DMatrix::from_fn(20, 100, |i, j| rows[i][j] - mean[j]);
        let mut sv: Vec<f64> = m
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        sv.sort_by(|a, b| b.total_cmp(a));

        let mut prev = f64::INFINITY;
        for c in 1..=20 {
            let model: PcaModel = fit_rows(&refs, c).unwrap();
            let mut err = 0.0;
            for v in &rows {
                let z = model.compress_values(v).unwrap();
                let rec = model.decompress_values(&z).unwrap();
                err += v
                    .iter()
                    .zip(&rec)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                let again = model
                    .decompress_values(&model.compress_values(&rec).unwrap())
                    .unwrap();
                let d = rec
                    .iter()
                    .zip(&again)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                worst_idem = worst_idem.max(d);
            }
            let oracle: f64 = sv[c..].iter().map(|s| s * s).sum();
            worst_recon = worst_recon.max((err - oracle).abs());
            if err > prev + 1e-12 {
                monotone = false;
            }
            prev = err;
        }
    }
    outcome(
        worst_recon <= 1e-8 && worst_idem <= 1e-10 && monotone,
        format!("recon dev {worst_recon:.2e}, idempotence {worst_idem:.2e}, monotone {monotone}"),
    )
}

// ---- 3: forest ------------------------------------------------------------

fn exhaustive_stump(x: &[Vec<f64>], y: &[Vec<f64>]) -> (usize, f64) {
    let n = x.len();
    let cols: Vec<Vec<f64>> = (0..y[0].len())
        .map(|o| y.iter().map(|r| r[o]).collect())
        .collect();
    let mut best: Option<(f64, usize, f64)> = None;
    for j in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[j]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let mut sse = 0.0;
            for side in [true, false] {
                let idx: Vec<usize> = (0..n).filter(|&i| (x[i][j] <= t) == side).collect();
                for yc in &cols {
                    let col: Vec<f64> = idx.iter().map(|&i| yc[i]).collect();
                    let m = col.iter().sum::<f64>() / col.len() as f64;
                    sse += col.iter().map(|v| (v - m).powi(2)).sum::<f64>();
                }
            }
            if best.is_none_or(|(b, _, _)| sse < b - 1e-12 * b.abs().max(1.0)) {
                best = Some((sse, j, t));
            }
        }
    }
    let (_, j, t) = best.unwrap();
    (j, t)
}

fn criterion_forest() -> Outcome {
    let mut r = rng(3);
    let mut notes = Vec::new();
    let mut pass = true;

    // Memorization: one unbootstrapped, unbounded tree.
    let x: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..3).map(|_| r.random::<f64>()).collect())
        .collect();
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|v| vec![v[0].sin() + v[1] * v[2], v[2]])
        .collect();
    let p = ForestParams {
        n_estimators: 1,
        max_depth: None,
        min_samples_leaf: 1,
        max_features: MaxFeatures::Auto,
        bootstrap: false,
        seed: 0,
    };
    let f = Forest::fit(&x, &y, p).unwrap();
    let memo = x
        .iter()
        .zip(&y)
        .all(|(xi, yi)| f.predict(xi).unwrap() == *yi);
    pass &= memo;
    notes.push(format!("memorize {memo}"));

    // Stumps vs exhaustive scan.
    let mut stumps_ok = 0;
    for _ in 0..20 {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| (r.random::<f64>() * 20.0).round()).collect())
            .collect();
        let y: Vec<Vec<f64>> = (0..40).map(|_| vec![r.random(), r.random()]).collect();
        let f = Forest::fit(
            &x,
            &y,
            ForestParams {
                max_depth: Some(1),
                ..p
            },
        )
        .unwrap();
        let (j, t) = exhaustive_stump(&x, &y);
        if let Node::Split {
            feature, threshold, ..
        } = &f.trees[0].nodes[0]
        {
            if *feature == j && *threshold == t {
                stumps_ok += 1;
            }
        }
    }
    pass &= stumps_ok == 20;
    notes.push(format!("stumps {stumps_ok}/20"));

    // Aggregate vs mean of trees.
    let f = Forest::fit(&x, &y, ForestParams::forward().with_trees(40).with_seed(5)).unwrap();
    let mut agg_dev = 0.0f64;
    for xi in x.iter().take(50) {
        let agg = f.predict(xi).unwrap();
        let per = f.predict_per_tree(xi).unwrap();
        for o in 0..2 {
            let m = per.iter().map(|v| v[o]).sum::<f64>() / per.len() as f64;
            agg_dev = agg_dev.max((agg[o] - m).abs());
        }
    }
    pass &= agg_dev <= 1e-12;
    notes.push(format!("aggregate dev {agg_dev:.1e}"));

    // Bundle round trip.
    let grid = Grid::band(101).unwrap();
    let ds = synth_generate(400, &grid, 0.01, 3).unwrap();
    let cfg = TrainConfig {
        n_components: 20,
        forward: ForestParams::forward().with_trees(30).with_seed(1),
        inverse: Some(ForestParams::inverse().with_seed(2)),
        bounds: Bounds::default(),
    };
    let b = train_bundle(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path().join("m")).unwrap();
    let l = ModelBundle::load(dir.path().join("m")).unwrap();
    let same_bits = ds.records().iter().all(|rec| {
        let a = forward_values(&b, &rec.params).unwrap();
        let c = forward_values(&l, &rec.params).unwrap();
        let z = b.pca.compress(&rec.spectrum).unwrap();
        let ia = b.inverse.as_ref().unwrap().predict(&z).unwrap();
        let ic = l.inverse.as_ref().unwrap().predict(&z).unwrap();
        a.iter().zip(&c).all(|(u, v)| u.to_bits() == v.to_bits())
            && ia.iter().zip(&ic).all(|(u, v)| u.to_bits() == v.to_bits())
    });
    pass &= same_bits && l == b;
    notes.push(format!("round trip 0-ULP {same_bits}"));
    outcome(pass, notes.join(", "))
}

// ---- 4: optimizer ---------------------------------------------------------

fn criterion_optimizer() -> Outcome {
    let b = Bounds::default();
    let mut hits = 0;
    let mut in_bounds = true;
    let mut deterministic = true;
    for run in 0..20u64 {
        let mut r = rng(100 + run);
        let c = b.denormalize(std::array::from_fn(|_| r.random()));
        let cn = b.normalize(&c);
        let sphere = |x: &LaserParams| {
            let u = b.normalize(x);
            (0..3).map(|k| (u[k] - cn[k]).powi(2)).sum::<f64>()
        };
        let cfg = DeConfig {
            max_evals: 1000,
            fitness_threshold: f64::NEG_INFINITY,
            seed: run,
            ..Default::default()
        };
        let res = lshade_minimize(
            |x| {
                in_bounds &= b.contains(x);
                sphere(x)
            },
            &b,
            &cfg,
            &[],
        )
        .unwrap();
        if res.best_fitness.sqrt() < 1e-2 {
            hits += 1;
        }
        deterministic &= lshade_minimize(sphere, &b, &cfg, &[]).unwrap() == res;
    }
    outcome(
        hits >= 19 && in_bounds && deterministic,
        format!("{hits}/20 within 1e-2, in bounds {in_bounds}, deterministic {deterministic}"),
    )
}

// ---- 5: SHAP --------------------------------------------------------------

fn scalar_bundle(trees: Vec<Tree>) -> ModelBundle {
    ModelBundle {
        grid: Grid::new(vec![5.0]).unwrap(),
        bounds: Bounds::default(),
        pca: PcaModel {
            mean: vec![0.0],
            components: vec![vec![1.0]],
            singular_values: vec![1.0],
            degenerate: false,
        },
        forward: Forest {
            n_features: 3,
            n_outputs: 1,
            params: ForestParams::forward().with_trees(trees.len()),
            trees,
        },
        inverse: None,
    }
}

/// v(S) by summing every leaf weighted by the probability of reaching it.
fn leaf_enumeration_value(tree: &Tree, x: &[f64; 3], s: usize) -> f64 {
    let mut total = 0.0;
    let mut stack = vec![(0usize, 1.0f64)];
    while let Some((node, w)) = stack.pop() {
        match &tree.nodes[node] {
            Node::Leaf { value, .. } => total += w * value[0],
            Node::Split {
                feature,
                threshold,
                left,
                right,
                n_samples,
            } => {
                if s & (1 << feature) != 0 {
                    stack.push((
                        if x[*feature] <= *threshold {
                            *left
                        } else {
                            *right
                        },
                        w,
                    ));
                } else {
                    let n = *n_samples as f64;
                    stack.push((*left, w * tree.nodes[*left].n_samples() as f64 / n));
                    stack.push((*right, w * tree.nodes[*right].n_samples() as f64 / n));
                }
            }
        }
    }
    total
}

fn oracle_phi(trees: &[Tree], x: &[f64; 3]) -> [f64; 3] {
    let fact = |n: usize| (1..=n).product::<usize>() as f64;
    let v = |s: usize| {
        trees
            .iter()
            .map(|t| leaf_enumeration_value(t, x, s))
            .sum::<f64>()
            / trees.len() as f64
    };
    std::array::from_fn(|j| {
        let mut phi = 0.0;
        for s in 0..8usize {
            if s & (1 << j) != 0 {
                continue;
            }
            let k = s.count_ones() as usize;
            phi += fact(k) * fact(3 - k - 1) / fact(3) * (v(s | (1 << j)) - v(s));
        }
        phi
    })
}

fn criterion_shap(desk: &ModelBundle) -> Outcome {
    let b = desk.bounds;
    let mut r = rng(5);
    let inputs: Vec<LaserParams> = (0..1000)
        .map(|_| b.denormalize(std::array::from_fn(|_| r.random())))
        .collect();
    let mut worst_local = 0.0f64;
    for mode in [
        OutputMode::Average,
        OutputMode::at_wavelength(&desk.grid, 2.5, false).unwrap(),
        OutputMode::at_wavelength(&desk.grid, 7.25, false).unwrap(),
        OutputMode::at_wavelength(&desk.grid, 12.0, false).unwrap(),
    ] {
        let (rows, _) = shap_batch(desk, &inputs, mode).unwrap();
        for row in &rows {
            let f = scalar_output(desk, &row.input, mode).unwrap();
            worst_local = worst_local.max((row.base_value + row.phi.iter().sum::<f64>() - f).abs());
        }
    }

    // Dummy feature: spacing held constant in training, so never split on.
    let x: Vec<Vec<f64>> = (0..300)
        .map(|_| vec![r.random::<f64>(), r.random::<f64>() * 700.0, 20.0])
        .collect();
    let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] * v[1] / 700.0]).collect();
    let f = Forest::fit(&x, &y, ForestParams::forward().with_trees(10)).unwrap();
    let dummy = scalar_bundle(f.trees);
    let sf = ScalarForest::new(&dummy, OutputMode::Average).unwrap();
    let dummy_zero = inputs.iter().take(200).all(|p| sf.shap(p).phi[2] == 0.0);

    // Small trees (at most 16 leaves) against exhaustive leaf enumeration.
    let mut worst_oracle = 0.0f64;
    for seed in 0..10 {
        let x: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                b.denormalize(std::array::from_fn(|_| r.random()))
                    .to_array()
                    .to_vec()
            })
            .collect();
        let y: Vec<Vec<f64>> = (0..60).map(|_| vec![r.random::<f64>()]).collect();
        let p = ForestParams {
            max_depth: Some(4),
            ..ForestParams::forward().with_trees(3).with_seed(seed)
        };
        let trees = Forest::fit(&x, &y, p).unwrap().trees;
        assert!(trees.iter().all(|t| t.n_leaves() <= 32));
        let sb = scalar_bundle(trees.clone());
        let sf = ScalarForest::new(&sb, OutputMode::Average).unwrap();
        for p in inputs.iter().take(100) {
            let got = sf.shap(p).phi;
            let want = oracle_phi(&trees, &p.to_array());
            for j in 0..3 {
                worst_oracle = worst_oracle.max((got[j] - want[j]).abs());
            }
        }
    }
    outcome(
        worst_local < 1e-9 && dummy_zero && worst_oracle < 1e-9,
        format!(
            "local accuracy {worst_local:.1e}, dummy exact {dummy_zero}, oracle dev {worst_oracle:.1e}"
        ),
    )
}

// ---- 6-9: pipeline --------------------------------------------------------

struct Desk {
    bundle: ModelBundle,
    test: Dataset,
}

fn desk() -> Desk {
    let grid = Grid::band(101).unwrap();
    let train = synth_generate(2000, &grid, 0.01, 11).unwrap();
    let test = synth_generate(200, &grid, 0.01, 12).unwrap();
    let bundle = train_bundle(&train, &TrainConfig::seeded(13)).unwrap();
    Desk { bundle, test }
}

fn pipeline_cfg() -> EnsembleConfig {
    EnsembleConfig {
        n_estimators: 20,
        n_max: 25,
        f0: 2.0,
        top_k: 10,
        seed: 2024,
        ..Default::default()
    }
}

struct PipelineRuns {
    mf: Evaluation,
    lf: Evaluation,
    hf: Evaluation,
}

fn criterion_ordering(d: &Desk) -> (Outcome, PipelineRuns) {
    let cfg = pipeline_cfg();
    let mf = evaluate_on_test(&d.bundle, &d.test, Pipeline::Mf, &cfg, 5).unwrap();
    let lf = evaluate_on_test(&d.bundle, &d.test, Pipeline::Lf, &cfg, 5).unwrap();
    let hf = evaluate_on_test(&d.bundle, &d.test, Pipeline::Hf, &cfg, 5).unwrap();
    let (m, l, h) = (
        mf.report.average_rmse,
        lf.report.average_rmse,
        hf.report.average_rmse,
    );
    let o = outcome(
        m < l && m < h && m <= 2.5,
        format!("mean RMSE MF {m:.3}% LF {l:.3}% HF {h:.3}%"),
    );
    (o, PipelineRuns { mf, lf, hf })
}

fn criterion_one_to_many(d: &Desk, runs: &PipelineRuns) -> Outcome {
    let n = d.test.len();
    let diverse = (0..n)
        .filter(|&t| {
            let good: Vec<LaserParams> = runs
                .mf
                .solutions(0, t)
                .into_iter()
                .take(5)
                .filter(|r| r.rmse <= 2.0)
                .map(|r| r.params)
                .collect();
            good.iter().enumerate().any(|(i, a)| {
                good[i + 1..]
                    .iter()
                    .any(|b| nepd(a, b, &d.bundle.bounds) >= 0.1)
            })
        })
        .count();
    let cands = lf_candidates(&d.bundle, &d.test.records()[0].spectrum, &pipeline_cfg()).unwrap();
    outcome(
        diverse * 2 >= n,
        format!(
            "{diverse}/{n} targets with two distinct solutions (first target: {} LF candidates)",
            cands.len()
        ),
    )
}

fn criterion_budget(d: &Desk, runs: &PipelineRuns) -> Outcome {
    let cfg = EnsembleConfig {
        n_max: 100,
        ..pipeline_cfg()
    };
    let hf100 = evaluate_on_test(&d.bundle, &d.test, Pipeline::Hf, &cfg, 5).unwrap();
    let (h25, h100) = (runs.hf.report.average_rmse, hf100.report.average_rmse);
    let (ms, hs) = (runs.mf.report.std_rmse, runs.hf.report.std_rmse);
    outcome(
        h100 < h25 && ms <= hs,
        format!(
            "HF mean RMSE {h25:.3}% @25 -> {h100:.3}% @100; std MF {ms:.3} vs HF {hs:.3} @25 (LF mean {:.3}%)",
            runs.lf.report.average_rmse
        ),
    )
}

fn criterion_latency(d: &Desk) -> Outcome {
    let targets: Vec<Spectrum> = d.test.records()[..50]
        .iter()
        .map(|r| r.spectrum.clone())
        .collect();
    let cfg = pipeline_cfg();
    let mf = time_inference(&d.bundle, &targets, Pipeline::Mf, &cfg).unwrap();
    let lf = time_inference(&d.bundle, &targets, Pipeline::Lf, &cfg).unwrap();
    let ratio = mf.mean_ms / lf.mean_ms.max(1e-9);
    outcome(
        mf.mean_ms < 2000.0 && ratio >= 50.0,
        format!(
            "MF {:.2} ± {:.2} ms, LF {:.4} ± {:.4} ms, ratio {ratio:.0}x",
            mf.mean_ms, mf.std_ms, lf.mean_ms, lf.std_ms
        ),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= run(1, "metric exactness", secs(1), criterion_metrics);
    all &= run(2, "PCA correctness", secs(10), criterion_pca);
    all &= run(3, "forest correctness", secs(30), criterion_forest);
    all &= run(4, "optimizer", secs(30), criterion_optimizer);

    let start = Instant::now();
    let d = desk();
    println!(
        "desk bundle trained in {:.1}s",
        start.elapsed().as_secs_f64()
    );

    all &= run(5, "SHAP", secs(60), || criterion_shap(&d.bundle));
    let mut runs = None;
    all &= run(6, "pipeline ordering", secs(600), || {
        let (o, r) = criterion_ordering(&d);
        runs = Some(r);
        o
    });
    let runs = runs.unwrap();
    all &= run(7, "one-to-many", secs(600), || {
        criterion_one_to_many(&d, &runs)
    });
    all &= run(8, "budget trend", secs(900), || criterion_budget(&d, &runs));
    all &= run(9, "inference latency", secs(120), || criterion_latency(&d));
    println!("criterion 10 real-data reproduction     SKIP  (needs the published dataset)");

    if !all {
        std::process::exit(1);
    }
}
