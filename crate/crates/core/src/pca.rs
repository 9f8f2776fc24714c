//! Principal component compression of spectra.
//!
//! Components are the leading right singular vectors of the centered data
//! matrix, computed with a one-sided (Hestenes) Jacobi SVD. Tall matrices are
//! first reduced to their triangular QR factor, which has the same right
//! singular vectors. No whitening or per-wavelength scaling is applied.

use serde::{Deserialize, Serialize};

use crate::data::{Grid, Spectrum};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_components` orthonormal rows of length `mean.len()`.
    pub components: Vec<Vec<f64>>,
    /// Singular values of the centered training matrix for each component.
    pub singular_values: Vec<f64>,
    /// Set when a retained component has (numerically) zero singular value;
    /// its direction is an arbitrary completion of the basis.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn compress_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(Error::GridMismatch {
                expected: self.dim(),
                found: values.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(values.iter().zip(&self.mean))
                    .map(|(w, (v, m))| w * (v - m))
                    .sum()
            })
            .collect())
    }

    pub fn compress(&self, s: &Spectrum) -> Result<Vec<f64>> {
        self.compress_values(s.values())
    }

    /// Writes `mean + components^T * coeffs` into `out`.
    pub fn decompress_into(&self, coeffs: &[f64], out: &mut [f64]) -> Result<()> {
        if coeffs.len() != self.n_components() {
            return Err(Error::arg(format!(
                "expected {} coefficients, got {}",
                self.n_components(),
                coeffs.len()
            )));
        }
        if out.len() != self.dim() {
            return Err(Error::GridMismatch {
                expected: self.dim(),
                found: out.len(),
            });
        }
        out.copy_from_slice(&self.mean);
        for (c, row) in coeffs.iter().zip(&self.components) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        Ok(())
    }

    pub fn decompress_values(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.decompress_into(coeffs, &mut out)?;
        Ok(out)
    }

    /// Reconstructed spectrum on `grid`; values are not clipped to `[0, 1]`.
    pub fn decompress(&self, coeffs: &[f64], grid: &Grid) -> Result<Spectrum> {
        if grid.len() != self.dim() {
            return Err(Error::GridMismatch {
                expected: self.dim(),
                found: grid.len(),
            });
        }
        Spectrum::new(grid.clone(), self.decompress_values(coeffs)?)
    }

    /// Compress then decompress.
    pub fn project(&self, s: &Spectrum) -> Result<Spectrum> {
        self.decompress(&self.compress(s)?, s.grid())
    }
}

pub fn pca_fit(spectra: &[Spectrum], n_components: usize) -> Result<PcaModel> {
    if spectra.len() < 2 {
        return Err(Error::arg("PCA needs at least 2 spectra"));
    }
    let grid = spectra[0].grid();
    if let Some(bad) = spectra.iter().find(|s| s.grid() != grid) {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            found: bad.len(),
        });
    }
    let rows: Vec<&[f64]> = spectra.iter().map(Spectrum::values).collect();
    fit_rows(&rows, n_components)
}

/// PCA of a row matrix (one observation per row).
pub fn fit_rows(rows: &[&[f64]], n_components: usize) -> Result<PcaModel> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::arg("PCA needs at least 2 rows"));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::arg("PCA rows differ in length"));
    }
    if n_components == 0 || n_components > n.min(d) {
        return Err(Error::arg(format!(
            "component count must be in 1..={} (n={n}, dim={d}), got {n_components}",
            n.min(d)
        )));
    }

    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let (sigma, vectors) = if n >= d {
        // Columns of the centered matrix, reduced to the d x d R factor.
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|j| rows.iter().map(|r| r[j] - mean[j]).collect())
            .collect();
        if n > d {
            cols = householder_r(cols);
        }
        right_vectors_by_rotation(cols)
    } else {
        // Columns of the transposed centered matrix: one per observation.
        let cols: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        left_vectors_by_rotation(cols, d)
    };

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let top = sigma[order[0]];
    let tiny = top * 1e-12 + f64::MIN_POSITIVE;

    let mut components = Vec::with_capacity(n_components);
    let mut singular_values = Vec::with_capacity(n_components);
    let mut degenerate = false;
    for &j in order.iter().take(n_components) {
        let mut v = vectors[j].clone();
        fix_sign(&mut v);
        degenerate |= sigma[j] <= tiny;
        components.push(v);
        singular_values.push(sigma[j]);
    }
    Ok(PcaModel {
        mean,
        components,
        singular_values,
        degenerate,
    })
}

/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Upper-triangular factor of the column-stored `m x d` matrix (`m > d`),
/// returned as `d` columns of length `d`.
fn householder_r(mut cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d = cols.len();
    let m = cols[0].len();
    for k in 0..d {
        let norm = cols[k][k..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if cols[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(k) {
            let f = 2.0 * dot(&v, &col[k..m]) / vnorm2;
            for (c, vi) in col[k..m].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
        cols[k][k] = alpha;
        cols[k][k + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
    cols.into_iter()
        .map(|mut c| {
            c.truncate(d);
            c
        })
        .collect()
}

/// Orthogonalizes the columns in place with plane rotations, applying the
/// same rotations to `acc` if given. Returns when a full sweep leaves every
/// pair orthogonal to machine precision.
fn jacobi_sweeps(cols: &mut [Vec<f64>], mut acc: Option<&mut [Vec<f64>]>) {
    const MAX_SWEEPS: usize = 80;
    let k = cols.len();
    let eps = f64::EPSILON;
    let scale = cols.iter().map(|c| dot(c, c)).fold(0.0, f64::max);
    // Columns below this squared norm are numerically null.
    let floor = scale * eps * eps;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha <= floor
                    || beta <= floor
                    || gamma.abs() <= eps * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, p, q, c, s);
                if let Some(a) = acc.as_deref_mut() {
                    rotate(a, p, q, c, s);
                }
            }
        }
        if !rotated {
            return;
        }
    }
    log::warn!("Jacobi SVD did not fully converge in {MAX_SWEEPS} sweeps");
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (a, b) = (&mut head[p], &mut tail[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Singular values and right singular vectors of the matrix whose columns
/// are `cols` (right vectors are the accumulated rotations).
fn right_vectors_by_rotation(mut cols: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = cols.len();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            e
        })
        .collect();
    jacobi_sweeps(&mut cols, Some(&mut v));
    let sigma = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    (sigma, v)
}

/// Singular values and left singular vectors (length `dim`) of the matrix
/// whose columns are `cols`. Directions for zero singular values are
/// completed to an orthonormal set.
fn left_vectors_by_rotation(mut cols: Vec<Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    jacobi_sweeps(&mut cols, None);
    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let top = sigma.iter().copied().fold(0.0, f64::max);
    let tiny = top * 1e-12 + f64::MIN_POSITIVE;

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; cols.len()];
    for (j, c) in cols.iter().enumerate() {
        if sigma[j] > tiny {
            let u: Vec<f64> = c.iter().map(|x| x / sigma[j]).collect();
            basis.push(u.clone());
            slots[j] = Some(u);
        }
    }
    let mut unit = 0;
    for slot in slots.iter_mut().filter(|s| s.is_none()) {
        while unit < dim {
            let mut e = vec![0.0; dim];
            e[unit] = 1.0;
            unit += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for b in &basis {
                    let f = dot(&e, b);
                    e.iter_mut().zip(b).for_each(|(x, y)| *x -= f * y);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                basis.push(e.clone());
                *slot = Some(e);
                break;
            }
        }
    }
    let vectors = slots
        .into_iter()
        .map(|s| s.expect("basis completion exhausted"))
        .collect();
    (sigma, vectors)
}
