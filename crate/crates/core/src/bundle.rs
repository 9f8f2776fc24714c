//! On-disk model bundle.
//!
//! A bundle is a directory holding four JSON files:
//!
//! * `meta.json`: format tag and version, wavelength grid, design bounds and
//!   the hyperparameters of both forests;
//! * `pca.json`: `mean`, `components` (row per component), `singular_values`;
//! * `forward.json`: forest mapping laser parameters to PCA coefficients;
//! * `inverse.json` (optional): forest mapping PCA coefficients to laser
//!   parameters.
//!
//! Trees are flat node arrays (`kind` = `split` | `leaf`) with explicit child
//! indices. Numbers are written in shortest round-trip decimal form, so a
//! load reproduces every `f64` bit for bit.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Grid;
use crate::error::{Error, Result};
use crate::forest::{Forest, ForestParams};
use crate::metrics::Bounds;
use crate::pca::PcaModel;

pub const FORMAT_TAG: &str = "mfinverse-bundle";
pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.json";
const PCA: &str = "pca.json";
const FORWARD: &str = "forward.json";
const INVERSE: &str = "inverse.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub grid: Grid,
    pub bounds: Bounds,
    pub pca: PcaModel,
    pub forward: Forest,
    pub inverse: Option<Forest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    grid: Vec<f64>,
    bounds: Bounds,
    n_components: usize,
    forward: ForestParams,
    inverse: Option<ForestParams>,
}

impl ModelBundle {
    /// Checks that the parts fit together: grid vs PCA, PCA vs forests.
    pub fn validate(&self) -> Result<()> {
        let c = self.pca.n_components();
        if self.pca.dim() != self.grid.len() {
            return Err(Error::Format(format!(
                "PCA dimension {} differs from grid length {}",
                self.pca.dim(),
                self.grid.len()
            )));
        }
        if self
            .pca
            .components
            .iter()
            .any(|r| r.len() != self.grid.len())
            || self.pca.singular_values.len() != c
        {
            return Err(Error::Format("PCA arrays have inconsistent shapes".into()));
        }
        self.forward.validate()?;
        if self.forward.n_features != 3 || self.forward.n_outputs != c {
            return Err(Error::Format(format!(
                "forward forest maps {} -> {}, expected 3 -> {c}",
                self.forward.n_features, self.forward.n_outputs
            )));
        }
        if let Some(inv) = &self.inverse {
            inv.validate()?;
            if inv.n_features != c || inv.n_outputs != 3 {
                return Err(Error::Format(format!(
                    "inverse forest maps {} -> {}, expected {c} -> 3",
                    inv.n_features, inv.n_outputs
                )));
            }
        }
        Ok(())
    }

    pub fn inverse(&self) -> Result<&Forest> {
        self.inverse
            .as_ref()
            .ok_or_else(|| Error::Config("model bundle has no inverse model".into()))
    }

    /// Writes the bundle into `dir`, replacing any previous bundle there.
    /// Files are staged in a sibling directory and moved into place, so a
    /// failed save leaves no partial bundle at `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = dir
            .file_name()
            .ok_or_else(|| Error::arg(format!("invalid bundle path {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;

        let result = self.write_files(&staging).and_then(|()| {
            let old = parent.join(format!(".{name}.old-{}", std::process::id()));
            if dir.exists() {
                fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            }
            fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
            Ok(())
        });
        if result.is_err() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }

    fn write_files(&self, dir: &Path) -> Result<()> {
        let meta = Meta {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            grid: self.grid.values().to_vec(),
            bounds: self.bounds,
            n_components: self.pca.n_components(),
            forward: self.forward.params,
            inverse: self.inverse.as_ref().map(|f| f.params),
        };
        write_json(&dir.join(META), &meta)?;
        write_json(&dir.join(PCA), &self.pca)?;
        write_json(&dir.join(FORWARD), &self.forward)?;
        if let Some(inv) = &self.inverse {
            write_json(&dir.join(INVERSE), inv)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ModelBundle> {
        let dir = dir.as_ref();
        let meta: Meta = read_json(&dir.join(META))?;
        if meta.format != FORMAT_TAG {
            return Err(Error::Format(format!(
                "{} is not a model bundle (format {:?})",
                dir.display(),
                meta.format
            )));
        }
        if meta.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "bundle version {} is not supported (expected {FORMAT_VERSION})",
                meta.version
            )));
        }
        let grid = Grid::new(meta.grid).map_err(|e| Error::Format(e.to_string()))?;
        let bounds = Bounds::new(meta.bounds.lower, meta.bounds.upper)
            .map_err(|e| Error::Format(e.to_string()))?;
        let pca: PcaModel = read_json(&dir.join(PCA))?;
        let forward: Forest = read_json(&dir.join(FORWARD))?;
        let inverse_path = dir.join(INVERSE);
        let inverse = match (meta.inverse.is_some(), inverse_path.exists()) {
            (true, true) => Some(read_json::<Forest>(&inverse_path)?),
            (false, false) => None,
            (true, false) => {
                return Err(Error::io(
                    &inverse_path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "inverse model missing"),
                ))
            }
            (false, true) => {
                return Err(Error::Format(
                    "inverse.json present but not declared in meta.json".into(),
                ))
            }
        };
        if pca.n_components() != meta.n_components {
            return Err(Error::Format(
                "meta.json and pca.json disagree on component count".into(),
            ));
        }
        let bundle = ModelBundle {
            grid,
            bounds,
            pca,
            forward,
            inverse,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| {
        if e.is_io() {
            Error::io(path, std::io::Error::other(e))
        } else {
            Error::Format(format!("{}: {e}", path.display()))
        }
    })
}
