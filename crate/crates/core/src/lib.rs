//! Multi-fidelity inverse design of laser-textured emitters.
//!
//! A random-forest surrogate maps laser parameters (power, scan speed, line
//! spacing) to a PCA-compressed emissivity spectrum. An inverse forest
//! proposes candidate recipes for a target spectrum, and L-SHADE refines each
//! candidate against the surrogate.

pub mod bundle;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod explain;
pub mod forest;
pub mod harness;
pub mod metrics;
pub mod optimizer;
pub mod pca;
pub mod seed;

pub use bundle::ModelBundle;
pub use data::{Dataset, Grid, LaserParams, Record, Spectrum};
pub use ensemble::{mf_invert, DesignSolution, EnsembleConfig, TrainConfig};
pub use error::{Error, Result};
pub use explain::{OutputMode, ShapRow};
pub use forest::{Forest, ForestParams, MaxFeatures};
pub use harness::{Evaluation, Pipeline};
pub use metrics::{Bounds, EvalReport};
pub use optimizer::{lshade_minimize, DeConfig, OptResult, Termination};
pub use pca::PcaModel;
