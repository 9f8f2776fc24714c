//! Exact Shapley attributions of the forward model on scalar outputs.
//!
//! Coalition values use the path-dependent conditional expectation of each
//! tree: splits on features inside the coalition follow the input, splits on
//! the other features average both children weighted by their training
//! sample counts. With three features all eight coalitions are enumerated.
//!
//! Both reductions (spectral mean, single wavelength) are linear in the PCA
//! coefficients, so each leaf's coefficient vector is reduced to one scalar
//! up front and the expectations are taken over those scalars.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::data::{Grid, LaserParams};
use crate::ensemble::forward_values;
use crate::error::{Error, Result};
use crate::forest::{Node, Tree};

const N_FEATURES: usize = 3;
const N_COALITIONS: usize = 1 << N_FEATURES;
const FULL: usize = N_COALITIONS - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Unweighted mean over the grid.
    Average,
    /// Value at one grid index.
    AtIndex(usize),
}

impl OutputMode {
    /// Mode for wavelength `wavelength`; without `nearest` it must be a grid
    /// point (to 1e-6).
    pub fn at_wavelength(grid: &Grid, wavelength: f64, nearest: bool) -> Result<Self> {
        Ok(OutputMode::AtIndex(grid.locate(wavelength, nearest)?))
    }

    /// `avg` or `wl:<um>`.
    pub fn parse(spec: &str, grid: &Grid, nearest: bool) -> Result<Self> {
        if spec == "avg" {
            return Ok(OutputMode::Average);
        }
        let wl = spec
            .strip_prefix("wl:")
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::arg(format!("output mode {spec:?} is not `avg` or `wl:<um>`")))?;
        Self::at_wavelength(grid, wl, nearest)
    }

    fn weights(self, dim: usize) -> Result<Vec<f64>> {
        match self {
            OutputMode::Average => Ok(vec![1.0 / dim as f64; dim]),
            OutputMode::AtIndex(i) if i < dim => {
                let mut w = vec![0.0; dim];
                w[i] = 1.0;
                Ok(w)
            }
            OutputMode::AtIndex(i) => {
                Err(Error::arg(format!("grid index {i} out of range 0..{dim}")))
            }
        }
    }

    pub fn reduce(self, values: &[f64]) -> Result<f64> {
        match self {
            OutputMode::Average => Ok(values.iter().sum::<f64>() / values.len() as f64),
            OutputMode::AtIndex(i) => values.get(i).copied().ok_or_else(|| {
                Error::arg(format!("grid index {i} out of range 0..{}", values.len()))
            }),
        }
    }
}

/// Reduced forward-model prediction at `x`.
pub fn scalar_output(bundle: &ModelBundle, x: &LaserParams, mode: OutputMode) -> Result<f64> {
    mode.reduce(&forward_values(bundle, x)?)
}

/// Vector-valued path-dependent expectation of `tree` at `x` given the
/// features in `subset` (bit `j` set = feature `j` known).
pub fn tree_conditional_expectation(tree: &Tree, x: &[f64], subset: u32) -> Vec<f64> {
    fn rec(tree: &Tree, node: usize, x: &[f64], subset: u32) -> Vec<f64> {
        match &tree.nodes[node] {
            Node::Leaf { value, .. } => value.clone(),
            Node::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                if subset & (1 << feature) != 0 {
                    let next = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    };
                    rec(tree, next, x, subset)
                } else {
                    let (nl, nr) = (
                        tree.nodes[*left].n_samples() as f64,
                        tree.nodes[*right].n_samples() as f64,
                    );
                    let l = rec(tree, *left, x, subset);
                    let r = rec(tree, *right, x, subset);
                    l.iter()
                        .zip(&r)
                        .map(|(a, b)| (nl * a + nr * b) / (nl + nr))
                        .collect()
                }
            }
        }
    }
    rec(tree, 0, x, subset)
}

/// Forest leaves reduced to scalars under one output mode, flattened into
/// one table.
///
/// A leaf reached through splits `lo < x_f <= hi` contributes to `v(S)`
/// with its value times, for every feature outside `S`, the product of the
/// child/parent sample ratios of the splits on that feature along its path,
/// provided `x` lies inside its box on every feature of `S`.
pub struct ScalarForest {
    leaves: Vec<LeafEntry>,
    n_trees: usize,
}

#[derive(Clone, Copy, Debug)]
struct LeafEntry {
    lo: [f64; N_FEATURES],
    hi: [f64; N_FEATURES],
    cover: [f64; N_FEATURES],
    value: f64,
}

fn push_leaves(tree: &Tree, reduce: &dyn Fn(&[f64]) -> f64, out: &mut Vec<LeafEntry>) {
    let root = LeafEntry {
        lo: [f64::NEG_INFINITY; N_FEATURES],
        hi: [f64::INFINITY; N_FEATURES],
        cover: [1.0; N_FEATURES],
        value: 0.0,
    };
    let mut stack = vec![(0usize, root)];
    while let Some((node, mut e)) = stack.pop() {
        match &tree.nodes[node] {
            Node::Leaf { value, .. } => {
                e.value = reduce(value);
                out.push(e);
            }
            Node::Split {
                feature,
                threshold,
                left,
                right,
                n_samples,
            } => {
                let f = *feature;
                let n = *n_samples as f64;
                let mut r = e;
                r.lo[f] = r.lo[f].max(*threshold);
                r.cover[f] *= tree.nodes[*right].n_samples() as f64 / n;
                e.hi[f] = e.hi[f].min(*threshold);
                e.cover[f] *= tree.nodes[*left].n_samples() as f64 / n;
                stack.push((*right, r));
                stack.push((*left, e));
            }
        }
    }
}

impl ScalarForest {
    pub fn new(bundle: &ModelBundle, mode: OutputMode) -> Result<Self> {
        let pca = &bundle.pca;
        let w = mode.weights(pca.dim())?;
        let offset: f64 = w.iter().zip(&pca.mean).map(|(a, b)| a * b).sum();
        let coef: Vec<f64> = pca
            .components
            .iter()
            .map(|c| w.iter().zip(c).map(|(a, b)| a * b).sum())
            .collect();
        let reduce = |v: &[f64]| offset + v.iter().zip(&coef).map(|(v, c)| v * c).sum::<f64>();
        let mut leaves = Vec::new();
        for t in &bundle.forward.trees {
            push_leaves(t, &reduce, &mut leaves);
        }
        Ok(Self {
            leaves,
            n_trees: bundle.forward.n_trees(),
        })
    }

    /// `v(S)` for all eight coalitions, indexed by feature bitmask.
    pub fn coalition_values(&self, x: &LaserParams) -> [f64; N_COALITIONS] {
        let x = x.to_array();
        let mut total = [0.0; N_COALITIONS];
        for e in &self.leaves {
            let inside = (0..N_FEATURES)
                .filter(|&f| x[f] > e.lo[f] && x[f] <= e.hi[f])
                .fold(0usize, |m, f| m | (1 << f));
            // every coalition whose features all agree with this leaf
            let mut s = inside;
            loop {
                let mut w = e.value;
                for f in 0..N_FEATURES {
                    if s & (1 << f) == 0 {
                        w *= e.cover[f];
                    }
                }
                total[s] += w;
                if s == 0 {
                    break;
                }
                s = (s - 1) & inside;
            }
        }
        let n = self.n_trees as f64;
        total.map(|t| t / n)
    }

    pub fn shap(&self, x: &LaserParams) -> ShapRow {
        let v = self.coalition_values(x);
        ShapRow {
            input: *x,
            base_value: v[0],
            phi: shapley_from_values(&v),
            prediction: v[FULL],
        }
    }
}

/// Shapley values from the eight coalition values.
pub fn shapley_from_values(v: &[f64; N_COALITIONS]) -> [f64; N_FEATURES] {
    // |S|! (n - |S| - 1)! / n! for n = 3
    const W: [f64; N_FEATURES] = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0];
    std::array::from_fn(|j| {
        let bit = 1 << j;
        (0..N_COALITIONS)
            .filter(|s| s & bit == 0)
            .map(|s| W[(s as u32).count_ones() as usize] * (v[s | bit] - v[s]))
            .sum()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapRow {
    pub input: LaserParams,
    pub base_value: f64,
    /// Power, speed, spacing.
    pub phi: [f64; N_FEATURES],
    /// Full-coalition value, i.e. the model output at `input`.
    pub prediction: f64,
}

pub fn exact_shap(bundle: &ModelBundle, x: &LaserParams, mode: OutputMode) -> Result<ShapRow> {
    Ok(ScalarForest::new(bundle, mode)?.shap(x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapSummary {
    pub mean_abs_phi: [f64; N_FEATURES],
    /// Feature indices by decreasing mean |phi|.
    pub ranking: [usize; N_FEATURES],
}

pub fn shap_batch(
    bundle: &ModelBundle,
    inputs: &[LaserParams],
    mode: OutputMode,
) -> Result<(Vec<ShapRow>, ShapSummary)> {
    if inputs.is_empty() {
        return Err(Error::arg("SHAP batch needs at least one input"));
    }
    let sf = ScalarForest::new(bundle, mode)?;
    let rows: Vec<ShapRow> = inputs.par_iter().map(|x| sf.shap(x)).collect();
    let n = rows.len() as f64;
    let mean_abs_phi: [f64; N_FEATURES] =
        std::array::from_fn(|j| rows.iter().map(|r| r.phi[j].abs()).sum::<f64>() / n);
    let mut ranking = [0, 1, 2];
    ranking.sort_by(|&a, &b| mean_abs_phi[b].total_cmp(&mean_abs_phi[a]).then(a.cmp(&b)));
    Ok((
        rows,
        ShapSummary {
            mean_abs_phi,
            ranking,
        },
    ))
}

pub fn write_shap_csv<W: Write>(writer: W, rows: &[ShapRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::io("<shap csv>", std::io::Error::other(e));
    w.write_record([
        "power",
        "speed",
        "spacing",
        "phi_power",
        "phi_speed",
        "phi_spacing",
        "base_value",
        "prediction",
    ])
    .map_err(io)?;
    for r in rows {
        let p = r.input.to_array();
        let fields = [
            p[0],
            p[1],
            p[2],
            r.phi[0],
            r.phi[1],
            r.phi[2],
            r.base_value,
            r.prediction,
        ];
        w.write_record(fields.iter().map(|v| v.to_string()))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io("<shap csv>", e))
}
