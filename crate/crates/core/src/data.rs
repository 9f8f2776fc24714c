//! Dataset ingestion, splitting and the synthetic emissivity oracle.
//!
//! A dataset is a list of laser-parameter triples, each paired with an
//! emissivity spectrum sampled on one shared wavelength grid. On disk it is a
//! UTF-8 CSV whose header reads
//!
//! ```text
//! power_w,speed_mm_s,spacing_um,eps_2.5000,eps_2.5950,...
//! ```
//!
//! with the wavelength (μm) of every emissivity column printed to four
//! decimals. A target file uses the same `eps_` columns and holds one row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Bounds;
use crate::seed::stream_rng;

/// Shortest wavelength of the measured band, μm.
pub const BAND_START_UM: f64 = 2.5;
/// Longest wavelength of the measured band, μm.
pub const BAND_END_UM: f64 = 12.0;

/// One laser-processing recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaserParams {
    /// Average laser power, W.
    pub power: f64,
    /// Scanning speed, mm/s.
    pub speed: f64,
    /// Line spacing, μm.
    pub spacing: f64,
}

impl LaserParams {
    pub const NAMES: [&'static str; 3] = ["power", "speed", "spacing"];

    pub fn new(power: f64, speed: f64, spacing: f64) -> Self {
        Self {
            power,
            speed,
            spacing,
        }
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [p, s, h] => Ok(Self::new(*p, *s, *h)),
            _ => Err(Error::arg(format!(
                "laser parameters need 3 values, got {}",
                v.len()
            ))),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.power, self.speed, self.spacing]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Areal dose proxy `P / (v * s)` with spacing converted to mm.
    pub fn dose(&self) -> f64 {
        self.power / (self.speed * self.spacing * 1e-3)
    }
}

/// Strictly increasing wavelength grid, shared cheaply between spectra.
#[derive(Clone, Debug)]
pub struct Grid(Arc<[f64]>);

impl Grid {
    pub fn new(wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::arg("wavelength grid is empty"));
        }
        if wavelengths.iter().any(|w| !w.is_finite()) {
            return Err(Error::arg("wavelength grid contains a non-finite value"));
        }
        if let Some(i) = wavelengths.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::arg(format!(
                "wavelength grid not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Self(wavelengths.into()))
    }

    /// `n` equally spaced points spanning `[start, end]` inclusive, rounded
    /// to 1e-4 μm so they survive the CSV header unchanged.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 || end.partial_cmp(&start) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::arg(format!(
                "uniform grid needs n >= 2 and end > start (n={n}, start={start}, end={end})"
            )));
        }
        let step = (end - start) / (n - 1) as f64;
        let mut w: Vec<f64> = (0..n)
            .map(|i| ((start + step * i as f64) * 1e4).round() / 1e4)
            .collect();
        w[n - 1] = end;
        Self::new(w)
    }

    /// The default desk-scale grid: `n` points over 2.5 to 12 μm.
    pub fn band(n: usize) -> Result<Self> {
        Self::uniform(BAND_START_UM, BAND_END_UM, n)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// Index of the grid point equal to `wavelength` (within 1e-6 μm), or,
    /// when `nearest` is set, the closest point. Wavelengths outside the
    /// grid span are rejected either way.
    pub fn locate(&self, wavelength: f64, nearest: bool) -> Result<usize> {
        const TOL: f64 = 1e-6;
        if !wavelength.is_finite() || wavelength < self.min() - TOL || wavelength > self.max() + TOL
        {
            return Err(Error::arg(format!(
                "wavelength {wavelength} μm outside grid [{}, {}]",
                self.min(),
                self.max()
            )));
        }
        let (idx, dist) = self
            .0
            .iter()
            .enumerate()
            .map(|(i, w)| (i, (w - wavelength).abs()))
            .fold(
                (0, f64::INFINITY),
                |best, cur| {
                    if cur.1 < best.1 {
                        cur
                    } else {
                        best
                    }
                },
            );
        if !nearest && dist > TOL {
            return Err(Error::arg(format!(
                "wavelength {wavelength} μm is not a grid point (nearest is {})",
                self.0[idx]
            )));
        }
        Ok(idx)
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

/// Emissivity values on a wavelength grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    grid: Grid,
    values: Vec<f64>,
}

impl Spectrum {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.len()];
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn wavelengths(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_physical(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub(crate) fn ensure_same_grid(&self, other: &Spectrum) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch {
                expected: self.grid.len(),
                found: other.grid.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub params: LaserParams,
    pub spectrum: Spectrum,
}

/// Records sharing one wavelength grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    grid: Grid,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(grid: Grid, records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.spectrum.grid() != &grid {
                return Err(Error::arg(format!("record {i} is not on the dataset grid")));
            }
        }
        Ok(Self { grid, records })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn params(&self) -> Vec<LaserParams> {
        self.records.iter().map(|r| r.params).collect()
    }

    pub fn spectra(&self) -> Vec<Spectrum> {
        self.records.iter().map(|r| r.spectrum.clone()).collect()
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            grid: self.grid.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn validate_bounds(&self, bounds: &Bounds) -> Result<()> {
        match self
            .records
            .iter()
            .position(|r| !bounds.contains(&r.params))
        {
            Some(i) => Err(Error::arg(format!(
                "record {i} has out-of-bounds parameters {:?}",
                self.records[i].params
            ))),
            None => Ok(()),
        }
    }
}

/// Column naming convention of dataset CSV files.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub param_columns: [String; 3],
    pub wavelength_prefix: String,
    /// Decimals used when printing wavelengths into column names.
    pub wavelength_decimals: usize,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            param_columns: [
                "power_w".to_string(),
                "speed_mm_s".to_string(),
                "spacing_um".to_string(),
            ],
            wavelength_prefix: "eps_".to_string(),
            wavelength_decimals: 4,
        }
    }
}

impl CsvSchema {
    fn wavelength_column(&self, w: f64) -> String {
        format!(
            "{}{:.*}",
            self.wavelength_prefix, self.wavelength_decimals, w
        )
    }

    fn parse_wavelengths(&self, names: &[&str], first_column: usize) -> Result<Grid> {
        let mut grid = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let w = name
                .strip_prefix(self.wavelength_prefix.as_str())
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Schema(format!(
                        "column {} ({name:?}) is not a `{}<wavelength>` column",
                        first_column + j + 1,
                        self.wavelength_prefix
                    ))
                })?;
            grid.push(w);
        }
        if grid.is_empty() {
            return Err(Error::Schema("no emissivity columns in header".into()));
        }
        Grid::new(grid).map_err(|e| Error::Schema(e.to_string()))
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.record() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Parse {
            row,
            column: 0,
            message: io.to_string(),
        },
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            row,
            column: 0,
            message: format!("expected {expected_len} fields, found {len}"),
        },
        kind => Error::Parse {
            row,
            column: 0,
            message: format!("{kind:?}"),
        },
    }
}

fn parse_cell(cell: &str, row: usize, column: usize) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
        row,
        column,
        message: format!("not a number: {cell:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column,
            message: format!("non-finite value {cell:?}"),
        });
    }
    Ok(v)
}

/// Reads a dataset CSV. Rows are numbered from 1 (the first data row),
/// columns from 1.
pub fn read_dataset<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < 4 {
        return Err(Error::Schema(format!(
            "header has {} columns; need 3 parameter columns and at least one wavelength",
            names.len()
        )));
    }
    for (k, expected) in schema.param_columns.iter().enumerate() {
        if names[k] != expected {
            return Err(Error::Schema(format!(
                "column {} is {:?}, expected {expected:?}",
                k + 1,
                names[k]
            )));
        }
    }
    let grid = schema.parse_wavelengths(&names[3..], 3)?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let rownum = i + 1;
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = parse_cell(&row[k], rownum, k + 1)?;
        }
        let values = (3..row.len())
            .map(|j| parse_cell(&row[j], rownum, j + 1))
            .collect::<Result<Vec<_>>>()?;
        records.push(Record {
            params: LaserParams::from_array(p),
            spectrum: Spectrum {
                grid: grid.clone(),
                values,
            },
        });
    }
    Ok(Dataset { grid, records })
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    read_dataset(open(path)?, schema).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse {
            row,
            column,
            message,
        } => Error::Parse {
            row,
            column,
            message: format!("{message} (in {})", path.display()),
        },
        Error::Schema(m) => Error::Schema(format!("{m} (in {})", path.display())),
        other => other,
    }
}

fn write_err(path: Option<&Path>, e: impl Into<std::io::Error>) -> Error {
    Error::io(path.map(Path::to_path_buf).unwrap_or_default(), e.into())
}

/// Writes a dataset in the canonical layout; numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_dataset<W: Write>(writer: W, ds: &Dataset, schema: &CsvSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = schema.param_columns.to_vec();
    header.extend(
        ds.grid
            .values()
            .iter()
            .map(|&l| schema.wavelength_column(l)),
    );
    w.write_record(&header).map_err(|e| write_err(None, e))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in &ds.records {
        row.clear();
        row.extend(r.params.to_array().iter().map(|v| v.to_string()));
        row.extend(r.spectrum.values.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| write_err(None, e))?;
    }
    w.flush().map_err(|e| write_err(None, e))?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(f), ds, schema).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Reads a single-row target CSV containing only emissivity columns.
pub fn read_target<R: Read>(reader: R, schema: &CsvSchema) -> Result<Spectrum> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let grid = schema.parse_wavelengths(&names, 0)?;
    let mut rows = rdr.records();
    let row = rows
        .next()
        .ok_or_else(|| Error::Schema("target file has no data row".into()))?
        .map_err(csv_error)?;
    if rows.next().is_some() {
        return Err(Error::Schema(
            "target file has more than one data row".into(),
        ));
    }
    let values = row
        .iter()
        .enumerate()
        .map(|(j, c)| parse_cell(c, 1, j + 1))
        .collect::<Result<Vec<_>>>()?;
    Spectrum::new(grid, values)
}

pub fn load_target(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Spectrum> {
    let path = path.as_ref();
    read_target(open(path)?, schema).map_err(|e| with_path(e, path))
}

pub fn write_target<W: Write>(writer: W, target: &Spectrum, schema: &CsvSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(
        target
            .wavelengths()
            .iter()
            .map(|&l| schema.wavelength_column(l)),
    )
    .map_err(|e| write_err(None, e))?;
    w.write_record(target.values().iter().map(|v| v.to_string()))
        .map_err(|e| write_err(None, e))?;
    w.flush().map_err(|e| write_err(None, e))?;
    Ok(())
}

pub fn save_target(path: impl AsRef<Path>, target: &Spectrum, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_target(BufWriter::new(f), target, schema)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_count: usize,
    pub seed: u64,
}

/// Shuffles records with `spec.seed` and splits off the first
/// `spec.train_count` as the training set.
pub fn shuffle_split(ds: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if spec.train_count == 0 || spec.train_count >= n {
        return Err(Error::arg(format!(
            "train_count must be in 1..{n}, got {}",
            spec.train_count
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, 0));
    let (train, test) = order.split_at(spec.train_count);
    Ok((ds.subset(train), ds.subset(test)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// K-fold partition of `0..n` after a seeded shuffle. The first `n % k`
/// folds get one extra validation index.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::arg(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::arg(format!("k-fold needs n >= k (n={n}, k={k})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1));
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let end = start + size;
        let validation = order[start..end].to_vec();
        let train = order[..start]
            .iter()
            .chain(&order[end..])
            .copied()
            .collect();
        folds.push(Fold { train, validation });
        start = end;
    }
    Ok(folds)
}

/// Ideal band-edge emitter: 1 below `cutoff`, 0 at and above it. A cutoff
/// equal to the grid maximum covers the whole band and gives the constant-one
/// (blackbody) target.
pub fn make_step_target(grid: &Grid, cutoff: f64) -> Result<Spectrum> {
    if !cutoff.is_finite() || cutoff < grid.min() || cutoff > grid.max() {
        return Err(Error::arg(format!(
            "cutoff {cutoff} μm outside grid [{}, {}]",
            grid.min(),
            grid.max()
        )));
    }
    let values = if cutoff == grid.max() {
        vec![1.0; grid.len()]
    } else {
        grid.values()
            .iter()
            .map(|&l| if l < cutoff { 1.0 } else { 0.0 })
            .collect()
    };
    Spectrum::new(grid.clone(), values)
}

/// Analytic stand-in for fabrication plus measurement.
///
/// `eps(l) = base + (1 - base) * (1 - exp(-alpha * D)) * (1 - beta(D) * (l - 2.5) / 9.5)`
/// with `beta(D) = tilt * exp(-decay * D)` and `D` the dose of
/// [`LaserParams::dose`]. Spectra depend on the recipe only through `D`,
/// so recipes with equal dose are indistinguishable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOracle {
    pub baseline: f64,
    pub alpha: f64,
    pub tilt: f64,
    pub tilt_decay: f64,
}

impl Default for SynthOracle {
    fn default() -> Self {
        Self {
            baseline: 0.14,
            alpha: 40.0,
            tilt: 0.55,
            tilt_decay: 3.0,
        }
    }
}

impl SynthOracle {
    pub fn emissivity(&self, params: &LaserParams, wavelength: f64) -> f64 {
        let d = params.dose();
        let rise = 1.0 - (-self.alpha * d).exp();
        let beta = self.tilt * (-self.tilt_decay * d).exp();
        let shape = 1.0 - beta * (wavelength - BAND_START_UM) / (BAND_END_UM - BAND_START_UM);
        self.baseline + (1.0 - self.baseline) * rise * shape
    }

    pub fn spectrum(&self, params: &LaserParams, grid: &Grid) -> Spectrum {
        let values = grid
            .values()
            .iter()
            .map(|&l| self.emissivity(params, l))
            .collect();
        Spectrum {
            grid: grid.clone(),
            values,
        }
    }
}

/// The full factorial fabrication grid: power 0.2 to 1.3 W by 0.1, speed
/// 10 to 700 mm/s by 10, spacing 15 to 28 μm by 1 (11,760 recipes), power-major.
pub fn fabrication_grid() -> Vec<LaserParams> {
    let mut out = Vec::with_capacity(12 * 70 * 14);
    for p in 2..=13 {
        for v in 1..=70 {
            for s in 15..=28 {
                out.push(LaserParams::new(p as f64 / 10.0, (v * 10) as f64, s as f64));
            }
        }
    }
    out
}

/// Evaluates the oracle at the given recipes and adds clipped Gaussian noise.
pub fn synth_from_params(
    params: &[LaserParams],
    grid: &Grid,
    noise_sd: f64,
    seed: u64,
) -> Result<Dataset> {
    if !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(Error::arg(format!("noise_sd must be >= 0, got {noise_sd}")));
    }
    let oracle = SynthOracle::default();
    let mut rng = stream_rng(seed, 3);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::arg(e.to_string()))?;
    let records = params
        .iter()
        .map(|p| {
            let mut s = oracle.spectrum(p, grid);
            if noise_sd > 0.0 {
                for v in s.values.iter_mut() {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            Record {
                params: *p,
                spectrum: s,
            }
        })
        .collect();
    Ok(Dataset {
        grid: grid.clone(),
        records,
    })
}

/// Draws `n` recipes uniformly from the fabrication grid (with replacement)
/// and measures them with the synthetic oracle.
pub fn synth_generate(n: usize, grid: &Grid, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::arg("synthetic dataset needs n >= 1"));
    }
    let mut rng = stream_rng(seed, 2);
    let params: Vec<LaserParams> = (0..n)
        .map(|_| {
            LaserParams::new(
                rng.random_range(2..=13) as f64 / 10.0,
                (rng.random_range(1..=70) * 10) as f64,
                rng.random_range(15..=28) as f64,
            )
        })
        .collect();
    synth_from_params(&params, grid, noise_sd, seed)
}
