//! Marginal structural model estimation for longitudinal binary exposures,
//! with inverse probability, stabilized, overlap and posterior predictive
//! treatment assignment (PPTA) weighting.

pub mod bootstrap;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod msm;
pub mod panel;
pub mod ppta;
pub mod propensity;
pub mod rng;
pub mod simgen;
pub mod weights;

pub use bootstrap::BootstrapResult;
pub use error::{Error, Result};
pub use estimate::{estimate_methods, Analysis, EstimationConfig};
pub use harness::{ReplicationReport, StudyConfig};
pub use msm::{EffectEstimate, Estimand, Link, Method, MsmFit, MsmSpec};
pub use panel::{OutcomeKind, PanelDataset, PanelDims, RawPanel};
pub use ppta::{PptaOptions, PptaRun};
pub use propensity::{FitMode, PropensityMatrix, PsOptions, SequentialPs};
pub use simgen::{EffectMode, SimConfig, SimulatedDataset, TrueEstimands};
pub use weights::{Scheme, WeightSet};
