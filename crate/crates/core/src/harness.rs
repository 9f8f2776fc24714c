//! Evaluation protocols: cross-validated learning curves, test-set
//! inversion benchmarks for the three pipelines, and inference timing.
//!
//! Repeat `r` of an evaluation uses base seed `seed + r`; target `i` within a
//! repeat uses `derive_seed(seed + r, i)`.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::data::{kfold_indices, Dataset, LaserParams, Spectrum};
use crate::ensemble::{
    forward_values, hf_invert, lf_invert, lf_predict, mf_invert, train_bundle, DesignSolution,
    EnsembleConfig, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{batch_rmse, mean, nepd, std_dev, EvalReport};
use crate::seed::{derive_seed, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningPoint {
    pub size: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    /// Pooled validation RMSE of each fold.
    pub fold_rmse: Vec<f64>,
}

/// For each size, draws that many records (seeded shuffle) and k-fold
/// cross-validates the forward model on them. Only the forward model is
/// trained; the PCA is refit on every training fold with at most
/// `min(n_train, grid)` components.
pub fn learning_curve(
    ds: &Dataset,
    sizes: &[usize],
    k: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<Vec<LearningPoint>> {
    if k < 2 {
        return Err(Error::arg("k must be >= 2"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > ds.len() || s < k) {
        return Err(Error::arg(format!(
            "learning-curve size {s} outside {k}..={}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream_rng(seed, 4));
    sizes
        .iter()
        .map(|&size| {
            let sub = ds.subset(&order[..size]);
            let folds = kfold_indices(size, k, seed)?;
            let fold_rmse = folds
                .par_iter()
                .map(|fold| {
                    let tr = sub.subset(&fold.train);
                    let va = sub.subset(&fold.validation);
                    let cfg = TrainConfig {
                        n_components: train.n_components.min(tr.len()).min(ds.grid().len()),
                        inverse: None,
                        ..train.clone()
                    };
                    let b = train_bundle(&tr, &cfg)?;
                    let pred: Vec<Spectrum> = va
                        .records()
                        .iter()
                        .map(|r| Spectrum::new(b.grid.clone(), forward_values(&b, &r.params)?))
                        .collect::<Result<_>>()?;
                    Ok(batch_rmse(&va.spectra(), &pred)?.pooled)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(LearningPoint {
                size,
                mean_rmse: mean(&fold_rmse),
                std_rmse: std_dev(&fold_rmse),
                fold_rmse,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Mf,
    Lf,
    Hf,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(Pipeline::Mf),
            "lf" => Ok(Pipeline::Lf),
            "hf" => Ok(Pipeline::Hf),
            _ => Err(Error::arg(format!("unknown mode {s:?} (mf, lf, hf)"))),
        }
    }
}

/// One returned solution for one target in one repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub repeat: usize,
    pub target: usize,
    pub rank: usize,
    pub params: LaserParams,
    /// Percent RMSE of the surrogate spectrum against the test spectrum.
    pub rmse: f64,
    /// Distance to the test record's true parameters.
    pub nepd: f64,
    pub source_tree: Option<usize>,
    pub refined: bool,
    pub evals_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: Pipeline,
    pub repeats: usize,
    /// Over the top-ranked solution of every (repeat, target).
    pub report: EvalReport,
    /// Mean top-1 RMSE of each repeat.
    pub repeat_mean_rmse: Vec<f64>,
    /// Every returned solution (all ranks for MF).
    pub rows: Vec<EvalRow>,
}

impl Evaluation {
    /// Rank-1 rows in (repeat, target) order; these feed the report.
    pub fn top_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(|r| r.rank == 1)
    }

    /// Solutions of one (repeat, target), best first.
    pub fn solutions(&self, repeat: usize, target: usize) -> Vec<&EvalRow> {
        self.rows
            .iter()
            .filter(|r| r.repeat == repeat && r.target == target)
            .collect()
    }
}

fn run_one(
    bundle: &ModelBundle,
    target: &Spectrum,
    mode: Pipeline,
    cfg: &EnsembleConfig,
) -> Result<Vec<DesignSolution>> {
    match mode {
        Pipeline::Mf => mf_invert(bundle, target, cfg),
        Pipeline::Lf => Ok(vec![lf_invert(bundle, target, cfg)?]),
        Pipeline::Hf => Ok(vec![hf_invert(bundle, target, cfg)?]),
    }
}

/// Inverts every test spectrum `repeats` times with `mode` and scores the
/// top solution against the held-out record.
pub fn evaluate_on_test(
    bundle: &ModelBundle,
    test: &Dataset,
    mode: Pipeline,
    cfg: &EnsembleConfig,
    repeats: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    if repeats == 0 {
        return Err(Error::arg("repeats must be >= 1"));
    }
    if *test.grid() != bundle.grid {
        return Err(Error::GridMismatch {
            expected: bundle.grid.len(),
            found: test.grid().len(),
        });
    }
    let mut rows = Vec::new();
    let mut repeat_mean_rmse = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let base = cfg.seed.wrapping_add(r as u64);
        let per_target: Vec<Vec<EvalRow>> = test
            .records()
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let c = EnsembleConfig {
                    seed: derive_seed(base, i as u64),
                    ..*cfg
                };
                let sols = run_one(bundle, &rec.spectrum, mode, &c)?;
                Ok(sols
                    .into_iter()
                    .enumerate()
                    .map(|(rank, s)| EvalRow {
                        repeat: r,
                        target: i,
                        rank: rank + 1,
                        params: s.params,
                        rmse: s.fitness,
                        nepd: nepd(&rec.params, &s.params, &bundle.bounds),
                        source_tree: s.source_tree,
                        refined: s.refined,
                        evals_used: s.evals_used,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let top: Vec<f64> = per_target.iter().map(|v| v[0].rmse).collect();
        repeat_mean_rmse.push(mean(&top));
        rows.extend(per_target.into_iter().flatten());
    }
    let (rmse, nepds): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.rank == 1)
        .map(|r| (r.rmse, r.nepd))
        .unzip();
    Ok(Evaluation {
        mode,
        repeats,
        report: EvalReport::from_instances(rmse, nepds)?,
        repeat_mean_rmse,
        rows,
    })
}

/// `repeat,target,rank,power,speed,spacing,rmse_pct,nepd,source_tree,refined,evals_used`
pub fn write_rows_csv<W: Write>(writer: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("<eval csv>", std::io::Error::other(e));
    w.write_record([
        "repeat",
        "target",
        "rank",
        "power",
        "speed",
        "spacing",
        "rmse_pct",
        "nepd",
        "source_tree",
        "refined",
        "evals_used",
    ])
    .map_err(io)?;
    for r in rows {
        w.write_record([
            r.repeat.to_string(),
            r.target.to_string(),
            r.rank.to_string(),
            r.params.power.to_string(),
            r.params.speed.to_string(),
            r.params.spacing.to_string(),
            r.rmse.to_string(),
            r.nepd.to_string(),
            r.source_tree.map(|t| t.to_string()).unwrap_or_default(),
            r.refined.to_string(),
            r.evals_used.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<eval csv>", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Pipeline,
    pub n_max: usize,
    pub mean_rmse: f64,
    /// Spread over all (repeat, target) instances.
    pub std_rmse: f64,
    /// Spread of the per-repeat means.
    pub repeat_std_rmse: f64,
    pub mean_nepd: f64,
    pub std_nepd: f64,
}

/// MF and HF evaluated at every budget in `n_max_values`.
pub fn baseline_sweep(
    bundle: &ModelBundle,
    test: &Dataset,
    n_max_values: &[usize],
    cfg: &EnsembleConfig,
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &n_max in n_max_values {
        for mode in [Pipeline::Mf, Pipeline::Hf] {
            let c = EnsembleConfig { n_max, ..*cfg };
            let e = evaluate_on_test(bundle, test, mode, &c, repeats)?;
            out.push(SweepRow {
                mode,
                n_max,
                mean_rmse: e.report.average_rmse,
                std_rmse: e.report.std_rmse,
                repeat_std_rmse: std_dev(&e.repeat_mean_rmse),
                mean_nepd: e.report.average_nepd,
                std_nepd: e.report.std_nepd,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Sequential wall-clock timing of one inversion per target, target
/// compression included and model loading excluded. The LF path times the
/// prediction only, without the reporting fitness evaluation.
pub fn time_inference(
    bundle: &ModelBundle,
    targets: &[Spectrum],
    mode: Pipeline,
    cfg: &EnsembleConfig,
) -> Result<Timing> {
    if targets.is_empty() {
        return Err(Error::arg("timing needs at least one target"));
    }
    let mut ms = Vec::with_capacity(targets.len());
    for (i, t) in targets.iter().enumerate() {
        let c = EnsembleConfig {
            seed: derive_seed(cfg.seed, i as u64),
            ..*cfg
        };
        let start = Instant::now();
        match mode {
            Pipeline::Mf => drop(std::hint::black_box(mf_invert(bundle, t, &c)?)),
            Pipeline::Lf => drop(std::hint::black_box(lf_predict(bundle, t, &c)?)),
            Pipeline::Hf => drop(std::hint::black_box(hf_invert(bundle, t, &c)?)),
        }
        ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing {
        runs: ms.len(),
        mean_ms: mean(&ms),
        std_ms: std_dev(&ms),
    })
}
