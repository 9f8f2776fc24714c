//! L-SHADE differential evolution over the bounded 3-D recipe space.
//!
//! Canonical formulation: current-to-pbest/1 mutation with an external
//! archive, binomial crossover, success-history adaptation of F and CR, and
//! linear population size reduction. Out-of-range trial coordinates are
//! repaired to the midpoint between the violated bound and the parent.
//!
//! The run stops at the first evaluation whose fitness is below
//! `fitness_threshold` or when `max_evals` evaluations have been spent,
//! whichever comes first; both checks happen after every single evaluation.
//! Non-finite fitness values are treated as `+inf`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LaserParams;
use crate::error::{Error, Result};
use crate::metrics::Bounds;
use crate::seed::stream_rng;

const DIM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeConfig {
    pub init_pop_size: usize,
    /// Archive capacity as a multiple of the current population size.
    pub archive_factor: f64,
    /// Entries in the F / CR success memories.
    pub history_size: usize,
    pub p_best_fraction: f64,
    pub max_evals: usize,
    /// Percent RMSE below which the run stops.
    pub fitness_threshold: f64,
    pub min_pop_size: usize,
    pub seed: u64,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self {
            init_pop_size: 10,
            archive_factor: 2.0,
            history_size: 6,
            p_best_fraction: 0.11,
            max_evals: 25,
            fitness_threshold: 2.0,
            min_pop_size: 4,
            seed: 0,
        }
    }
}

impl DeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.init_pop_size < 4 {
            return Err(Error::arg("init_pop_size must be >= 4"));
        }
        if !(self.p_best_fraction > 0.0 && self.p_best_fraction <= 1.0) {
            return Err(Error::arg("p_best_fraction must be in (0, 1]"));
        }
        if self.max_evals < self.init_pop_size {
            return Err(Error::arg(format!(
                "max_evals ({}) must be >= init_pop_size ({})",
                self.max_evals, self.init_pop_size
            )));
        }
        if self.history_size == 0 {
            return Err(Error::arg("history_size must be >= 1"));
        }
        if self.min_pop_size < 4 || self.min_pop_size > self.init_pop_size {
            return Err(Error::arg("min_pop_size must be in 4..=init_pop_size"));
        }
        if self.archive_factor.is_nan() || self.archive_factor < 0.0 {
            return Err(Error::arg("archive_factor must be >= 0"));
        }
        if self.fitness_threshold.is_nan() {
            return Err(Error::arg("fitness_threshold is NaN"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Threshold,
    Budget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_x: LaserParams,
    pub best_fitness: f64,
    pub evals_used: usize,
    pub terminated_by: Termination,
}

/// Target population size after `evals_so_far` evaluations.
pub fn de_population_schedule(cfg: &DeConfig, evals_so_far: usize) -> usize {
    let frac = evals_so_far.min(cfg.max_evals) as f64 / cfg.max_evals as f64;
    let size =
        cfg.init_pop_size as f64 + (cfg.min_pop_size as f64 - cfg.init_pop_size as f64) * frac;
    size.round() as usize
}

struct Individual {
    x: [f64; DIM],
    f: f64,
}

/// Signals the end of the run from inside the evaluation counter.
struct Stop;

struct Evaluator<'a, F> {
    fitness: &'a mut F,
    cfg: &'a DeConfig,
    evals: usize,
    best: Option<([f64; DIM], f64)>,
    terminated_by: Termination,
}

impl<F: FnMut(&LaserParams) -> f64> Evaluator<'_, F> {
    fn eval(&mut self, x: [f64; DIM]) -> std::result::Result<f64, Stop> {
        let raw = (self.fitness)(&LaserParams::from_array(x));
        let f = if raw.is_finite() { raw } else { f64::INFINITY };
        self.evals += 1;
        if self.best.is_none_or(|(_, b)| f < b) {
            self.best = Some((x, f));
        }
        if f < self.cfg.fitness_threshold {
            self.terminated_by = Termination::Threshold;
            return Err(Stop);
        }
        if self.evals >= self.cfg.max_evals {
            self.terminated_by = Termination::Budget;
            return Err(Stop);
        }
        Ok(f)
    }
}

/// Minimizes `fitness` over `bounds`. The first initial-population slots take
/// `warm_starts` (in order); the rest are uniform random.
pub fn lshade_minimize<F>(
    mut fitness: F,
    bounds: &Bounds,
    cfg: &DeConfig,
    warm_starts: &[LaserParams],
) -> Result<OptResult>
where
    F: FnMut(&LaserParams) -> f64,
{
    cfg.validate()?;
    if let Some(w) = warm_starts.iter().find(|w| !bounds.contains(w)) {
        return Err(Error::arg(format!(
            "warm start {w:?} is outside the bounds"
        )));
    }
    let mut rng = stream_rng(cfg.seed, 0);
    let mut ev = Evaluator {
        fitness: &mut fitness,
        cfg,
        evals: 0,
        best: None,
        terminated_by: Termination::Budget,
    };
    let _ = run(&mut ev, bounds, cfg, warm_starts, &mut rng);
    let (x, f) = ev.best.expect("at least one evaluation is always made");
    Ok(OptResult {
        best_x: LaserParams::from_array(x),
        best_fitness: f,
        evals_used: ev.evals,
        terminated_by: ev.terminated_by,
    })
}

fn random_point(bounds: &Bounds, rng: &mut impl Rng) -> [f64; DIM] {
    std::array::from_fn(|k| rng.random_range(bounds.lower[k]..=bounds.upper[k]))
}

fn sample_f(mu: f64, rng: &mut impl Rng) -> f64 {
    let cauchy = Cauchy::new(mu, 0.1).expect("valid Cauchy scale");
    loop {
        let f = cauchy.sample(rng);
        if f > 0.0 {
            return f.min(1.0);
        }
    }
}

fn sample_cr(mu: f64, rng: &mut impl Rng) -> f64 {
    Normal::new(mu, 0.1)
        .expect("valid normal scale")
        .sample(rng)
        .clamp(0.0, 1.0)
}

fn archive_capacity(cfg: &DeConfig, pop: usize) -> usize {
    (cfg.archive_factor * pop as f64).round() as usize
}

fn run<F: FnMut(&LaserParams) -> f64>(
    ev: &mut Evaluator<'_, F>,
    bounds: &Bounds,
    cfg: &DeConfig,
    warm_starts: &[LaserParams],
    rng: &mut impl Rng,
) -> std::result::Result<(), Stop> {
    let mut pop: Vec<Individual> = Vec::with_capacity(cfg.init_pop_size);
    for i in 0..cfg.init_pop_size {
        let x = match warm_starts.get(i) {
            Some(w) => w.to_array(),
            None => random_point(bounds, rng),
        };
        let f = ev.eval(x)?;
        pop.push(Individual { x, f });
    }

    let mut mem_f = vec![0.5; cfg.history_size];
    let mut mem_cr = vec![0.5; cfg.history_size];
    let mut mem_pos = 0;
    let mut archive: Vec<[f64; DIM]> = Vec::new();

    loop {
        let np = pop.len();
        let mut ranked: Vec<usize> = (0..np).collect();
        ranked.sort_by(|&a, &b| pop[a].f.total_cmp(&pop[b].f).then(a.cmp(&b)));
        let p_count = ((cfg.p_best_fraction * np as f64).round() as usize).clamp(2, np);

        let mut trials: Vec<([f64; DIM], f64, f64)> = Vec::with_capacity(np);
        for i in 0..np {
            let r = rng.random_range(0..cfg.history_size);
            let cr = sample_cr(mem_cr[r], rng);
            let f = sample_f(mem_f[r], rng);

            let pbest = ranked[rng.random_range(0..p_count)];
            let r1 = loop {
                let c = rng.random_range(0..np);
                if c != i {
                    break c;
                }
            };
            let union = np + archive.len();
            let x_r2 = loop {
                let c = rng.random_range(0..union);
                if c != i && c != r1 {
                    break if c < np { pop[c].x } else { archive[c - np] };
                }
            };

            let xi = pop[i].x;
            let j_rand = rng.random_range(0..DIM);
            let mut u = xi;
            for j in 0..DIM {
                if j == j_rand || rng.random::<f64>() < cr {
                    let v = xi[j] + f * (pop[pbest].x[j] - xi[j]) + f * (pop[r1].x[j] - x_r2[j]);
                    u[j] = if v < bounds.lower[j] {
                        0.5 * (bounds.lower[j] + xi[j])
                    } else if v > bounds.upper[j] {
                        0.5 * (bounds.upper[j] + xi[j])
                    } else {
                        v
                    };
                }
            }
            trials.push((u, f, cr));
        }

        let mut s_f = Vec::new();
        let mut s_cr = Vec::new();
        let mut s_delta = Vec::new();
        let mut replaced: Vec<Option<Individual>> = (0..np).map(|_| None).collect();
        let mut stop = None;
        for (i, (u, f, cr)) in trials.into_iter().enumerate() {
            let fu = match ev.eval(u) {
                Ok(v) => v,
                Err(s) => {
                    stop = Some(s);
                    break;
                }
            };
            if fu <= pop[i].f {
                if fu < pop[i].f {
                    archive.push(pop[i].x);
                    s_f.push(f);
                    s_cr.push(cr);
                    s_delta.push(if pop[i].f.is_finite() {
                        pop[i].f - fu
                    } else {
                        f64::MAX
                    });
                }
                replaced[i] = Some(Individual { x: u, f: fu });
            }
        }
        if let Some(s) = stop {
            return Err(s);
        }
        for (slot, new) in pop.iter_mut().zip(replaced) {
            if let Some(n) = new {
                *slot = n;
            }
        }

        if !s_f.is_empty() {
            let total: f64 = s_delta.iter().sum();
            let w: Vec<f64> = if total > 0.0 && total.is_finite() {
                s_delta.iter().map(|d| d / total).collect()
            } else {
                vec![1.0 / s_delta.len() as f64; s_delta.len()]
            };
            let num: f64 = w.iter().zip(&s_f).map(|(w, f)| w * f * f).sum();
            let den: f64 = w.iter().zip(&s_f).map(|(w, f)| w * f).sum();
            if den > 0.0 {
                mem_f[mem_pos] = num / den;
            }
            mem_cr[mem_pos] = w.iter().zip(&s_cr).map(|(w, c)| w * c).sum();
            mem_pos = (mem_pos + 1) % cfg.history_size;
        }

        let target = de_population_schedule(cfg, ev.evals).max(cfg.min_pop_size);
        if target < pop.len() {
            pop.sort_by(|a, b| a.f.total_cmp(&b.f));
            pop.truncate(target);
        }
        let cap = archive_capacity(cfg, pop.len());
        while archive.len() > cap {
            let k = rng.random_range(0..archive.len());
            archive.swap_remove(k);
        }
        archive.shuffle(rng);
    }
}
