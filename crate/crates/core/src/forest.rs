//! Multi-output regression trees and random forests.
//!
//! Splits minimize the summed squared error of all outputs (equivalently,
//! child variance weighted by child size, summed over outputs). Candidate
//! thresholds are midpoints between consecutive distinct feature values and
//! rows with `x <= threshold` go left. Exact score ties prefer the lower
//! feature index, then the lower threshold.
//!
//! Each tree draws its bootstrap sample and its per-split feature subsets
//! from two RNG streams keyed by `(seed, tree index)`, so tree `i` is the
//! same whatever the total tree count.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream_rng, StreamRng};

/// Number of features examined per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    /// Every feature.
    Auto,
    /// `ceil(sqrt(n_features))`, sampled without replacement.
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        match self {
            MaxFeatures::Auto => n_features,
            MaxFeatures::Sqrt => ((n_features as f64).sqrt().ceil() as usize).max(1),
            MaxFeatures::Count(k) => k.clamp(1, n_features),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    /// `None` grows trees until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestParams {
    /// Forward surrogate: 450 trees, depth 10, all features per split.
    pub fn forward() -> Self {
        Self {
            n_estimators: 450,
            max_depth: Some(10),
            min_samples_leaf: 1,
            max_features: MaxFeatures::Auto,
            bootstrap: true,
            seed: 0,
        }
    }

    /// Inverse generator: 20 trees, depth 10, sqrt feature subsets.
    pub fn inverse() -> Self {
        Self {
            n_estimators: 20,
            max_depth: Some(10),
            min_samples_leaf: 1,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trees(mut self, n: usize) -> Self {
        self.n_estimators = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimators == 0 {
            return Err(Error::arg("forest needs at least one tree"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::arg("min_samples_leaf must be >= 1"));
        }
        if let MaxFeatures::Count(0) = self.max_features {
            return Err(Error::arg("max_features must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        n_samples: usize,
    },
    Leaf {
        value: Vec<f64>,
        n_samples: usize,
    },
}

impl Node {
    pub fn n_samples(&self) -> usize {
        match self {
            Node::Split { n_samples, .. } | Node::Leaf { n_samples, .. } => *n_samples,
        }
    }
}

/// Flat node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// A tree that predicts `value` everywhere.
    pub fn constant(value: Vec<f64>, n_samples: usize) -> Self {
        Self {
            nodes: vec![Node::Leaf { value, n_samples }],
        }
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { .. } => return i,
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_index(x)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Structural checks used when loading untrusted model files.
    pub fn validate(&self, n_features: usize, n_outputs: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("tree has no nodes".into()));
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Format(format!("node {i} reached twice")));
            }
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    n_samples,
                } => {
                    if *feature >= n_features || !threshold.is_finite() {
                        return Err(Error::Format(format!("node {i} has an invalid split")));
                    }
                    if *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return Err(Error::Format(format!("node {i} has a dangling child")));
                    }
                    if self.nodes[*left].n_samples() + self.nodes[*right].n_samples() != *n_samples
                    {
                        return Err(Error::Format(format!("node {i} sample counts disagree")));
                    }
                    stack.push(*right);
                    stack.push(*left);
                }
                Node::Leaf { value, .. } => {
                    if value.len() != n_outputs {
                        return Err(Error::Format(format!(
                            "leaf {i} has {} outputs, expected {n_outputs}",
                            value.len()
                        )));
                    }
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("tree has unreachable nodes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub n_outputs: usize,
    pub params: ForestParams,
}

impl Forest {
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], params: ForestParams) -> Result<Forest> {
        params.validate()?;
        if x.is_empty() {
            return Err(Error::arg("cannot fit a forest on empty data"));
        }
        if x.len() != y.len() {
            return Err(Error::arg(format!(
                "feature rows ({}) and target rows ({}) differ",
                x.len(),
                y.len()
            )));
        }
        let n_features = x[0].len();
        let n_outputs = y[0].len();
        if n_features == 0 || n_outputs == 0 {
            return Err(Error::arg("features and targets must be nonempty"));
        }
        if x.iter().any(|r| r.len() != n_features) {
            return Err(Error::arg("feature rows differ in length"));
        }
        if y.iter().any(|r| r.len() != n_outputs) {
            return Err(Error::arg("target rows differ in n_outputs"));
        }
        if x.iter().chain(y).flatten().any(|v| !v.is_finite()) {
            return Err(Error::arg("training data contains non-finite values"));
        }

        let columns: Vec<Vec<f64>> = (0..n_features)
            .map(|j| x.iter().map(|r| r[j]).collect())
            .collect();
        let targets: Vec<f64> = y.iter().flatten().copied().collect();
        let data = TrainingData {
            columns: &columns,
            targets: &targets,
            n_outputs,
        };
        let trees = (0..params.n_estimators)
            .into_par_iter()
            .map(|t| grow_tree(&data, &params, t))
            .collect();
        Ok(Forest {
            trees,
            n_features,
            n_outputs,
            params,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::arg(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(())
    }

    /// Mean of the per-tree predictions, written into `out`.
    pub fn predict_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if out.len() != self.n_outputs {
            return Err(Error::arg("output buffer has the wrong length"));
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.trees {
            for (o, v) in out.iter_mut().zip(t.predict(x)) {
                *o += v;
            }
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_outputs];
        self.predict_into(x, &mut out)?;
        Ok(out)
    }

    /// One prediction per tree, in tree order.
    pub fn predict_per_tree(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        Ok(self.trees.iter().map(|t| t.predict(x).to_vec()).collect())
    }

    /// Replaces every leaf value `v` with `offset + scale * v`, per output.
    pub fn affine_outputs(&mut self, offset: &[f64], scale: &[f64]) -> Result<()> {
        if offset.len() != self.n_outputs || scale.len() != self.n_outputs {
            return Err(Error::arg("affine map length differs from n_outputs"));
        }
        for t in &mut self.trees {
            for n in &mut t.nodes {
                if let Node::Leaf { value, .. } = n {
                    for (k, v) in value.iter_mut().enumerate() {
                        *v = offset[k] + scale[k] * *v;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::Format("forest has no trees".into()));
        }
        self.trees
            .iter()
            .try_for_each(|t| t.validate(self.n_features, self.n_outputs))
    }
}

/// Row indices of tree `tree`'s bootstrap sample over `n` rows.
pub fn bootstrap_indices(n: usize, seed: u64, tree: usize) -> Vec<usize> {
    let mut rng = stream_rng(derive_seed(seed, tree as u64), 0);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

struct TrainingData<'a> {
    /// Feature-major copy of the inputs.
    columns: &'a [Vec<f64>],
    /// Row-major targets, `n_outputs` per row.
    targets: &'a [f64],
    n_outputs: usize,
}

impl TrainingData<'_> {
    fn target(&self, row: usize) -> &[f64] {
        &self.targets[row * self.n_outputs..(row + 1) * self.n_outputs]
    }
}

fn grow_tree(data: &TrainingData<'_>, params: &ForestParams, tree: usize) -> Tree {
    let n = data.columns[0].len();
    let mut samples: Vec<usize> = if params.bootstrap {
        bootstrap_indices(n, params.seed, tree)
    } else {
        (0..n).collect()
    };
    let mut builder = TreeBuilder {
        data,
        params,
        max_features: params.max_features.resolve(data.columns.len()),
        rng: stream_rng(derive_seed(params.seed, tree as u64), 1),
        nodes: Vec::new(),
        sort_buf: Vec::with_capacity(n),
    };
    builder.build(&mut samples, 0);
    Tree {
        nodes: builder.nodes,
    }
}

struct BestSplit {
    score: f64,
    feature: usize,
    threshold: f64,
}

impl BestSplit {
    fn beats(&self, other: &Option<BestSplit>) -> bool {
        match other {
            None => true,
            Some(o) => {
                self.score > o.score
                    || (self.score == o.score
                        && (self.feature < o.feature
                            || (self.feature == o.feature && self.threshold < o.threshold)))
            }
        }
    }
}

struct TreeBuilder<'a, 'd> {
    data: &'a TrainingData<'d>,
    params: &'a ForestParams,
    max_features: usize,
    rng: StreamRng,
    nodes: Vec<Node>,
    sort_buf: Vec<(f64, usize)>,
}

impl TreeBuilder<'_, '_> {
    fn build(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let n = samples.len();
        let o = self.data.n_outputs;
        let mut sums = vec![0.0; o];
        for &s in samples.iter() {
            for (a, v) in sums.iter_mut().zip(self.data.target(s)) {
                *a += v;
            }
        }

        let depth_reached = self.params.max_depth.is_some_and(|d| depth >= d);
        let can_split = !depth_reached
            && n >= 2 * self.params.min_samples_leaf
            && !self.targets_identical(samples);
        let split = if can_split {
            self.find_split(samples, &sums)
        } else {
            None
        };

        let idx = self.nodes.len();
        match split {
            None => {
                let value = sums.iter().map(|s| s / n as f64).collect();
                self.nodes.push(Node::Leaf {
                    value,
                    n_samples: n,
                });
            }
            Some(best) => {
                // Placeholder until the children exist.
                self.nodes.push(Node::Leaf {
                    value: Vec::new(),
                    n_samples: n,
                });
                let col = &self.data.columns[best.feature];
                let mid = partition(samples, |s| col[s] <= best.threshold);
                let (l, r) = samples.split_at_mut(mid);
                let left = self.build(l, depth + 1);
                let right = self.build(r, depth + 1);
                self.nodes[idx] = Node::Split {
                    feature: best.feature,
                    threshold: best.threshold,
                    left,
                    right,
                    n_samples: n,
                };
            }
        }
        idx
    }

    fn targets_identical(&self, samples: &[usize]) -> bool {
        let first = self.data.target(samples[0]);
        samples[1..].iter().all(|&s| self.data.target(s) == first)
    }

    fn find_split(&mut self, samples: &[usize], totals: &[f64]) -> Option<BestSplit> {
        let n_features = self.data.columns.len();
        let mut features: Vec<usize> = (0..n_features).collect();
        if self.max_features < n_features {
            features.shuffle(&mut self.rng);
        }
        let n = samples.len();
        let min_leaf = self.params.min_samples_leaf;
        let o = self.data.n_outputs;
        let mut best: Option<BestSplit> = None;
        let mut informative = 0;
        let mut left = vec![0.0; o];

        for &f in &features {
            if informative >= self.max_features && best.is_some() {
                break;
            }
            let col = &self.data.columns[f];
            self.sort_buf.clear();
            self.sort_buf.extend(samples.iter().map(|&s| (col[s], s)));
            self.sort_buf
                .sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if self.sort_buf[0].0 == self.sort_buf[n - 1].0 {
                continue;
            }
            informative += 1;

            left.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n - 1 {
                let (xi, si) = self.sort_buf[i];
                for (a, v) in left.iter_mut().zip(self.data.target(si)) {
                    *a += v;
                }
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf {
                    continue;
                }
                if nr < min_leaf {
                    break;
                }
                let xn = self.sort_buf[i + 1].0;
                if xi == xn {
                    continue;
                }
                // Maximizing this is minimizing the children's summed SSE.
                let (inv_l, inv_r) = (1.0 / nl as f64, 1.0 / nr as f64);
                let score: f64 = left
                    .iter()
                    .zip(totals)
                    .map(|(l, t)| l * l * inv_l + (t - l) * (t - l) * inv_r)
                    .sum();
                let mut threshold = 0.5 * (xi + xn);
                if threshold >= xn {
                    threshold = xi;
                }
                let cand = BestSplit {
                    score,
                    feature: f,
                    threshold,
                };
                if cand.beats(&best) {
                    best = Some(cand);
                }
            }
        }
        best
    }
}

/// Moves elements satisfying `pred` to the front; returns their count.
fn partition(v: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let mut k = 0;
    for i in 0..v.len() {
        if pred(v[i]) {
            v.swap(i, k);
            k += 1;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, 77);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_row_forest_predicts_its_target() {
        let f = Forest::fit(
            &[vec![1.0, 2.0]],
            &[vec![3.0, -4.0]],
            ForestParams::forward().with_trees(5),
        )
        .unwrap();
        assert_eq!(f.predict(&[9.0, 9.0]).unwrap(), vec![3.0, -4.0]);
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
    }

    #[test]
    fn unlimited_tree_memorizes() {
        let x = rows(30, 3, 1);
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![r[0] * 2.0 - r[1], r[2].sin()])
            .collect();
        let params = ForestParams {
            n_estimators: 1,
            max_depth: None,
            min_samples_leaf: 1,
            max_features: MaxFeatures::Auto,
            bootstrap: false,
            seed: 0,
        };
        let f = Forest::fit(&x, &y, params).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(&f.predict(xi).unwrap(), yi);
        }
    }

    #[test]
    fn identical_unbootstrapped_trees_agree() {
        let x = rows(40, 4, 2);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + r[3]]).collect();
        let params = ForestParams {
            n_estimators: 6,
            max_depth: Some(4),
            min_samples_leaf: 1,
            max_features: MaxFeatures::Auto,
            bootstrap: false,
            seed: 9,
        };
        let f = Forest::fit(&x, &y, params).unwrap();
        for t in &f.trees[1..] {
            assert_eq!(t, &f.trees[0]);
        }
        let per = f.predict_per_tree(&x[3]).unwrap();
        assert!(per.iter().all(|p| p == &per[0]));
    }

    #[test]
    fn aggregate_is_mean_of_trees() {
        let x = rows(200, 3, 3);
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![r[0] * r[1], r[2], 1.0 - r[0]])
            .collect();
        let f = Forest::fit(&x, &y, ForestParams::forward().with_trees(25).with_seed(4)).unwrap();
        for q in rows(20, 3, 5) {
            let agg = f.predict(&q).unwrap();
            let per = f.predict_per_tree(&q).unwrap();
            assert_eq!(per.len(), 25);
            for k in 0..3 {
                let m = per.iter().map(|p| p[k]).sum::<f64>() / 25.0;
                assert!((agg[k] - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_counts_are_consistent_and_depth_capped() {
        let x = rows(300, 3, 6);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![(r[0] * 5.0).sin() + r[1]]).collect();
        let f = Forest::fit(&x, &y, ForestParams::forward().with_trees(8)).unwrap();
        for t in &f.trees {
            assert!(t.depth() <= 10);
            assert_eq!(t.nodes[0].n_samples(), 300);
            t.validate(3, 1).unwrap();
        }
    }

    #[test]
    fn leaf_value_is_mean_of_routed_targets() {
        let x = rows(120, 2, 7);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 3.0 * r[1]]).collect();
        let params = ForestParams {
            n_estimators: 1,
            max_depth: Some(3),
            min_samples_leaf: 5,
            max_features: MaxFeatures::Auto,
            bootstrap: false,
            seed: 0,
        };
        let f = Forest::fit(&x, &y, params).unwrap();
        let t = &f.trees[0];
        let mut sums = vec![(0.0, 0usize); t.nodes.len()];
        for (xi, yi) in x.iter().zip(&y) {
            let l = t.leaf_index(xi);
            sums[l].0 += yi[0];
            sums[l].1 += 1;
        }
        for (i, n) in t.nodes.iter().enumerate() {
            if let Node::Leaf { value, n_samples } = n {
                assert_eq!(*n_samples, sums[i].1);
                assert!(*n_samples >= 5);
                assert!((value[0] - sums[i].0 / sums[i].1 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deeper_forest_fits_training_data_better() {
        let x = rows(400, 3, 8);
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![(r[0] * 6.0).sin() * r[1], r[2] * r[2]])
            .collect();
        let sse = |f: &Forest| -> f64 {
            x.iter()
                .zip(&y)
                .map(|(xi, yi)| {
                    let p = f.predict(xi).unwrap();
                    p.iter()
                        .zip(yi)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .sum()
        };
        let deep =
            Forest::fit(&x, &y, ForestParams::forward().with_trees(20).with_seed(1)).unwrap();
        let mut shallow_p = ForestParams::forward().with_trees(20).with_seed(1);
        shallow_p.max_depth = Some(2);
        let shallow = Forest::fit(&x, &y, shallow_p).unwrap();
        assert!(sse(&deep) <= sse(&shallow));
    }

    #[test]
    fn bootstrap_leaves_rows_out() {
        for t in 0..50 {
            let idx = bootstrap_indices(50, 13, t);
            let mut seen = [false; 50];
            idx.iter().for_each(|&i| seen[i] = true);
            assert!(seen.iter().any(|s| !s));
        }
    }

    #[test]
    fn tree_streams_do_not_depend_on_tree_count() {
        let x = rows(100, 5, 9);
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[1] - r[4]]).collect();
        let p = ForestParams::inverse().with_seed(3);
        let a = Forest::fit(&x, &y, p.with_trees(4)).unwrap();
        let b = Forest::fit(&x, &y, p.with_trees(9)).unwrap();
        assert_eq!(a.trees[..], b.trees[..4]);
        assert_eq!(a, Forest::fit(&x, &y, p.with_trees(4)).unwrap());
    }

    #[test]
    fn sqrt_features_resolve() {
        assert_eq!(MaxFeatures::Sqrt.resolve(50), 8);
        assert_eq!(MaxFeatures::Sqrt.resolve(3), 2);
        assert_eq!(MaxFeatures::Auto.resolve(3), 3);
    }

    #[test]
    fn rejects_bad_input() {
        let p = ForestParams::forward().with_trees(2);
        assert!(Forest::fit(&[], &[], p).is_err());
        assert!(Forest::fit(&[vec![1.0]], &[vec![1.0], vec![2.0]], p).is_err());
        assert!(Forest::fit(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0, 3.0]], p).is_err());
        let f = Forest::fit(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0]], p).unwrap();
        assert!(f.predict(&[1.0, 2.0]).is_err());
        assert!(f.predict_per_tree(&[]).is_err());
    }
}
