//! Multi-fidelity inversion: per-tree inverse proposals refined by L-SHADE
//! against the forward surrogate, plus the two single-fidelity baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::data::{Dataset, LaserParams, Spectrum};
use crate::error::{Error, Result};
use crate::forest::{Forest, ForestParams};
use crate::metrics::{rmse_percent, Bounds};
use crate::optimizer::{lshade_minimize, DeConfig, OptResult};
use crate::pca::pca_fit;
use crate::seed::derive_seed;

/// Seed offset separating the HF baseline's optimizer streams from the
/// per-candidate streams of the MF pipeline.
const HF_STREAM: u64 = 0x4846_0000_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_components: usize,
    pub forward: ForestParams,
    /// `None` skips the inverse forest (HF-only bundles).
    pub inverse: Option<ForestParams>,
    pub bounds: Bounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_components: 50,
            forward: ForestParams::forward(),
            inverse: Some(ForestParams::inverse()),
            bounds: Bounds::default(),
        }
    }
}

impl TrainConfig {
    /// Default hyperparameters with both forests seeded from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.forward.seed = derive_seed(seed, 0);
        if let Some(inv) = &mut cfg.inverse {
            inv.seed = derive_seed(seed, 1);
        }
        cfg
    }
}

/// Fits PCA, the forward forest (params -> coefficients) and the inverse
/// forest (coefficients -> params). The inverse forest is trained on
/// bounds-normalized parameters so no coordinate dominates the split score,
/// then its leaves are mapped back to physical units.
pub fn train_bundle(train: &Dataset, cfg: &TrainConfig) -> Result<ModelBundle> {
    if train.len() < 2 {
        return Err(Error::arg("training needs at least two records"));
    }
    train.validate_bounds(&cfg.bounds)?;
    let spectra = train.spectra();
    let pca = pca_fit(&spectra, cfg.n_components)?;
    let coeffs: Vec<Vec<f64>> = spectra
        .iter()
        .map(|s| pca.compress(s))
        .collect::<Result<_>>()?;
    let params = train.params();
    let x: Vec<Vec<f64>> = params.iter().map(|p| p.to_array().to_vec()).collect();
    let forward = Forest::fit(&x, &coeffs, cfg.forward)?;
    let inverse = match cfg.inverse {
        Some(p) => {
            let y: Vec<Vec<f64>> = params
                .iter()
                .map(|p| cfg.bounds.normalize(p).to_vec())
                .collect();
            let mut f = Forest::fit(&coeffs, &y, p)?;
            let scale: Vec<f64> = (0..3).map(|k| cfg.bounds.range(k)).collect();
            f.affine_outputs(&cfg.bounds.lower, &scale)?;
            Some(f)
        }
        None => None,
    };
    let bundle = ModelBundle {
        grid: train.grid().clone(),
        bounds: cfg.bounds,
        pca,
        forward,
        inverse,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Forward surrogate spectrum values at `x` (decompressed, unclipped).
pub fn forward_values(bundle: &ModelBundle, x: &LaserParams) -> Result<Vec<f64>> {
    let coeffs = bundle.forward.predict(&x.to_array())?;
    bundle.pca.decompress_values(&coeffs)
}

pub fn forward_spectrum(bundle: &ModelBundle, x: &LaserParams) -> Result<Spectrum> {
    Spectrum::new(bundle.grid.clone(), forward_values(bundle, x)?)
}

/// Reusable buffers for repeated fitness evaluations against one target.
struct Fitness<'a> {
    bundle: &'a ModelBundle,
    target: &'a [f64],
    coeffs: Vec<f64>,
    values: Vec<f64>,
}

impl<'a> Fitness<'a> {
    fn new(bundle: &'a ModelBundle, target: &'a [f64]) -> Self {
        Self {
            bundle,
            target,
            coeffs: vec![0.0; bundle.forward.n_outputs],
            values: vec![0.0; bundle.pca.dim()],
        }
    }

    fn eval(&mut self, x: &LaserParams) -> f64 {
        let ok = self
            .bundle
            .forward
            .predict_into(&x.to_array(), &mut self.coeffs)
            .and_then(|()| {
                self.bundle
                    .pca
                    .decompress_into(&self.coeffs, &mut self.values)
            });
        match ok {
            Ok(()) => rmse_percent(self.target, &self.values),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Percent RMSE between `target` and the surrogate spectrum at `x`.
pub fn fitness(bundle: &ModelBundle, target: &Spectrum, x: &LaserParams) -> Result<f64> {
    check_target(bundle, target)?;
    Ok(Fitness::new(bundle, target.values()).eval(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Number of inverse trees consulted (the first `n_estimators`).
    pub n_estimators: usize,
    /// Evaluation budget of each refinement run.
    pub n_max: usize,
    /// Fitness threshold in percent RMSE.
    pub f0: f64,
    pub top_k: usize,
    pub seed: u64,
    /// Population size, memory size etc.; `max_evals`, `fitness_threshold`
    /// and `seed` are overridden per run.
    pub de: DeConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_estimators: 20,
            n_max: 25,
            f0: 2.0,
            top_k: 10,
            seed: 0,
            de: DeConfig::default(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::arg("n_estimators must be >= 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_estimators {
            return Err(Error::arg(format!(
                "top_k must be in 1..={} (got {})",
                self.n_estimators, self.top_k
            )));
        }
        if self.f0.is_nan() || self.f0 < 0.0 {
            return Err(Error::arg("f0 must be >= 0"));
        }
        self.de_config(self.seed).validate()
    }

    /// Optimizer settings for a run seeded with `seed`.
    pub fn de_config(&self, seed: u64) -> DeConfig {
        DeConfig {
            max_evals: self.n_max,
            fitness_threshold: self.f0,
            seed,
            ..self.de
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub params: LaserParams,
    /// Percent RMSE of the surrogate spectrum against the target.
    pub fitness: f64,
    /// Inverse tree that proposed the starting point.
    pub source_tree: Option<usize>,
    /// True when the optimizer moved away from the starting point.
    pub refined: bool,
    pub evals_used: usize,
}

/// Drops exact repeats, keeping first occurrences in order.
pub fn dedupe_candidates(cands: &[LaserParams]) -> Vec<LaserParams> {
    dedupe_indexed(cands).into_iter().map(|(_, p)| p).collect()
}

fn dedupe_indexed(cands: &[LaserParams]) -> Vec<(usize, LaserParams)> {
    let mut out: Vec<(usize, LaserParams)> = Vec::with_capacity(cands.len());
    for (i, c) in cands.iter().enumerate() {
        let key = c.to_array().map(f64::to_bits);
        if !out
            .iter()
            .any(|(_, o)| o.to_array().map(f64::to_bits) == key)
        {
            out.push((i, *c));
        }
    }
    out
}

fn check_target(bundle: &ModelBundle, target: &Spectrum) -> Result<()> {
    if *target.grid() != bundle.grid {
        return Err(Error::GridMismatch {
            expected: bundle.grid.len(),
            found: target.len(),
        });
    }
    Ok(())
}

fn inverse_trees<'a>(bundle: &'a ModelBundle, cfg: &EnsembleConfig) -> Result<&'a Forest> {
    let inv = bundle.inverse()?;
    if cfg.n_estimators > inv.n_trees() {
        return Err(Error::Config(format!(
            "n_estimators {} exceeds the {} trees of the inverse model",
            cfg.n_estimators,
            inv.n_trees()
        )));
    }
    Ok(inv)
}

/// Clipped per-tree proposals of the first `cfg.n_estimators` inverse trees.
pub fn lf_candidates(
    bundle: &ModelBundle,
    target: &Spectrum,
    cfg: &EnsembleConfig,
) -> Result<Vec<LaserParams>> {
    check_target(bundle, target)?;
    let inv = inverse_trees(bundle, cfg)?;
    let z = bundle.pca.compress(target)?;
    inv.trees[..cfg.n_estimators]
        .iter()
        .map(|t| Ok(bundle.bounds.clip(&LaserParams::from_slice(t.predict(&z))?)))
        .collect()
}

/// Full MF pipeline; returns at most `top_k` solutions, best first.
pub fn mf_invert(
    bundle: &ModelBundle,
    target: &Spectrum,
    cfg: &EnsembleConfig,
) -> Result<Vec<DesignSolution>> {
    cfg.validate()?;
    let cands = dedupe_indexed(&lf_candidates(bundle, target, cfg)?);
    let mut sols: Vec<DesignSolution> = cands
        .par_iter()
        .map(|&(tree, start)| {
            let de = cfg.de_config(derive_seed(cfg.seed, tree as u64));
            let mut fit = Fitness::new(bundle, target.values());
            let r: OptResult = lshade_minimize(|x| fit.eval(x), &bundle.bounds, &de, &[start])?;
            Ok(DesignSolution {
                params: r.best_x,
                fitness: r.best_fitness,
                source_tree: Some(tree),
                refined: r.best_x != start,
                evals_used: r.evals_used,
            })
        })
        .collect::<Result<_>>()?;
    sols.sort_by(|a, b| {
        a.fitness
            .total_cmp(&b.fitness)
            .then(a.source_tree.cmp(&b.source_tree))
    });
    sols.truncate(cfg.top_k);
    Ok(sols)
}

/// LF baseline without the reporting evaluation: the clipped mean of the
/// per-tree proposals.
pub fn lf_predict(
    bundle: &ModelBundle,
    target: &Spectrum,
    cfg: &EnsembleConfig,
) -> Result<LaserParams> {
    // Running mean: exact when all trees agree.
    let mut mean = [0.0; 3];
    for (i, c) in lf_candidates(bundle, target, cfg)?.iter().enumerate() {
        for (m, v) in mean.iter_mut().zip(c.to_array()) {
            *m += (v - *m) / (i + 1) as f64;
        }
    }
    Ok(bundle.bounds.clip(&LaserParams::from_array(mean)))
}

/// LF baseline with the surrogate fitness of its prediction.
pub fn lf_invert(
    bundle: &ModelBundle,
    target: &Spectrum,
    cfg: &EnsembleConfig,
) -> Result<DesignSolution> {
    cfg.validate()?;
    let params = lf_predict(bundle, target, cfg)?;
    Ok(DesignSolution {
        params,
        fitness: Fitness::new(bundle, target.values()).eval(&params),
        source_tree: None,
        refined: false,
        evals_used: 0,
    })
}

/// HF baseline: one L-SHADE run from a random population.
pub fn hf_invert(
    bundle: &ModelBundle,
    target: &Spectrum,
    cfg: &EnsembleConfig,
) -> Result<DesignSolution> {
    check_target(bundle, target)?;
    let de = cfg.de_config(derive_seed(cfg.seed ^ HF_STREAM, 0));
    let mut fit = Fitness::new(bundle, target.values());
    let r = lshade_minimize(|x| fit.eval(x), &bundle.bounds, &de, &[])?;
    Ok(DesignSolution {
        params: r.best_x,
        fitness: r.best_fitness,
        source_tree: None,
        refined: true,
        evals_used: r.evals_used,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SolutionReport {
    pub rank: usize,
    #[serde(flatten)]
    pub solution: DesignSolution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_spectrum: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct InversionReport {
    pub wavelengths: Vec<f64>,
    pub config: EnsembleConfig,
    pub solutions: Vec<SolutionReport>,
}

/// JSON-ready view of ranked solutions, optionally with surrogate spectra.
pub fn inversion_report(
    bundle: &ModelBundle,
    cfg: &EnsembleConfig,
    solutions: &[DesignSolution],
    with_spectra: bool,
) -> Result<InversionReport> {
    let solutions = solutions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(SolutionReport {
                rank: i + 1,
                solution: s.clone(),
                predicted_spectrum: if with_spectra {
                    Some(forward_values(bundle, &s.params)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<_>>()?;
    Ok(InversionReport {
        wavelengths: bundle.grid.values().to_vec(),
        config: *cfg,
        solutions,
    })
}
