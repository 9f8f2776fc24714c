//! Accuracy and novelty metrics.
//!
//! Spectral errors are RMSE values scaled by `100 / (eps_max - eps_min)` with
//! the theoretical emissivity range `[0, 1]`, i.e. percent of full scale.
//! Parameter novelty is the normalized Euclidean parameter distance (NEPD),
//! which maps two recipes to `[0, 1]` using the design bounds.

use serde::{Deserialize, Serialize};

use crate::data::{LaserParams, Spectrum};
use crate::error::{Error, Result};

const EPS_MAX: f64 = 1.0;
const EPS_MIN: f64 = 0.0;

/// Box constraints on the three laser parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl Default for Bounds {
    /// 0.2 to 1.3 W, 10 to 700 mm/s, 15 to 28 μm.
    fn default() -> Self {
        Self {
            lower: [0.2, 10.0, 15.0],
            upper: [1.3, 700.0, 28.0],
        }
    }
}

impl Bounds {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Result<Self> {
        for k in 0..3 {
            if !(lower[k].is_finite() && upper[k].is_finite() && lower[k] < upper[k]) {
                return Err(Error::arg(format!(
                    "degenerate bounds for {}: [{}, {}]",
                    LaserParams::NAMES[k],
                    lower[k],
                    upper[k]
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn range(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn contains(&self, p: &LaserParams) -> bool {
        p.to_array()
            .iter()
            .enumerate()
            .all(|(k, v)| *v >= self.lower[k] && *v <= self.upper[k])
    }

    pub fn clip(&self, p: &LaserParams) -> LaserParams {
        let mut a = p.to_array();
        for (k, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
        LaserParams::from_array(a)
    }

    /// Min-max normalization of each coordinate to the unit interval.
    pub fn normalize(&self, p: &LaserParams) -> [f64; 3] {
        let a = p.to_array();
        std::array::from_fn(|k| (a[k] - self.lower[k]) / self.range(k))
    }

    pub fn denormalize(&self, u: [f64; 3]) -> LaserParams {
        LaserParams::from_array(std::array::from_fn(|k| {
            self.lower[k] + u[k] * self.range(k)
        }))
    }

    pub fn center(&self) -> LaserParams {
        self.denormalize([0.5; 3])
    }
}

/// Percent RMSE between two equally long value slices.
pub fn rmse_percent(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sse: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sse / a.len() as f64).sqrt() * 100.0 / (EPS_MAX - EPS_MIN)
}

/// Per-instance spectral RMSE in percent.
pub fn spectrum_rmse(a: &Spectrum, b: &Spectrum) -> Result<f64> {
    a.ensure_same_grid(b)?;
    Ok(rmse_percent(a.values(), b.values()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRmse {
    /// Root of the mean squared error over every (instance, wavelength) cell.
    pub pooled: f64,
    /// Largest per-instance RMSE.
    pub max: f64,
}

pub fn batch_rmse(truth: &[Spectrum], pred: &[Spectrum]) -> Result<BatchRmse> {
    if truth.is_empty() {
        return Err(Error::arg("batch RMSE of an empty batch"));
    }
    if truth.len() != pred.len() {
        return Err(Error::arg(format!(
            "batch RMSE needs equal lengths ({} vs {})",
            truth.len(),
            pred.len()
        )));
    }
    let mut sse = 0.0;
    let mut cells = 0usize;
    let mut max = 0.0f64;
    for (t, p) in truth.iter().zip(pred) {
        t.ensure_same_grid(p)?;
        let s: f64 = t
            .values()
            .iter()
            .zip(p.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        sse += s;
        cells += t.len();
        max = max.max((s / t.len() as f64).sqrt());
    }
    let scale = 100.0 / (EPS_MAX - EPS_MIN);
    Ok(BatchRmse {
        pooled: (sse / cells as f64).sqrt() * scale,
        max: max * scale,
    })
}

/// Normalized Euclidean parameter distance between two recipes.
///
/// Values above 1 are possible only for recipes outside `bounds`; they are
/// returned unclamped.
pub fn nepd(truth: &LaserParams, pred: &LaserParams, bounds: &Bounds) -> f64 {
    let t = bounds.normalize(truth);
    let p = bounds.normalize(pred);
    let d = (0..3).map(|k| (t[k] - p[k]).powi(2)).sum::<f64>().sqrt() / 3f64.sqrt();
    if d > 1.0 {
        log::warn!("NEPD {d:.4} exceeds 1: recipe outside design bounds ({pred:?})");
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NepdStats {
    pub average: f64,
    pub max: f64,
}

pub fn nepd_stats(pairs: &[(LaserParams, LaserParams)], bounds: &Bounds) -> Result<NepdStats> {
    if pairs.is_empty() {
        return Err(Error::arg("NEPD statistics of an empty batch"));
    }
    let vals: Vec<f64> = pairs.iter().map(|(t, p)| nepd(t, p, bounds)).collect();
    Ok(NepdStats {
        average: mean(&vals),
        max: vals.iter().copied().fold(0.0, f64::max),
    })
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Per-instance errors and novelty of a batch of inverse-design results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent RMSE of each instance.
    pub rmse: Vec<f64>,
    pub average_rmse: f64,
    pub max_rmse: f64,
    pub std_rmse: f64,
    pub nepd: Vec<f64>,
    pub average_nepd: f64,
    pub max_nepd: f64,
    pub std_nepd: f64,
}

impl EvalReport {
    pub fn from_instances(rmse: Vec<f64>, nepd: Vec<f64>) -> Result<Self> {
        if rmse.is_empty() || rmse.len() != nepd.len() {
            return Err(Error::arg(format!(
                "report needs equal nonempty lists ({} RMSE, {} NEPD)",
                rmse.len(),
                nepd.len()
            )));
        }
        Ok(Self {
            average_rmse: mean(&rmse),
            max_rmse: rmse.iter().copied().fold(0.0, f64::max),
            std_rmse: std_dev(&rmse),
            average_nepd: mean(&nepd),
            max_nepd: nepd.iter().copied().fold(0.0, f64::max),
            std_nepd: std_dev(&nepd),
            rmse,
            nepd,
        })
    }

    /// `instance,rmse_pct,nepd` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,rmse_pct,nepd\n");
        for (i, (r, n)) in self.rmse.iter().zip(&self.nepd).enumerate() {
            out.push_str(&format!("{i},{r},{n}\n"));
        }
        out
    }
}
