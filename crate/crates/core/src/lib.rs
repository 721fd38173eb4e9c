//! Learning planned-missingness designs from pilot trial data.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod imputer;
pub mod masklayer;
pub mod pipeline;
pub mod pmdgen;
pub mod seed;
pub mod select;

pub use dataset::{MetricKind, MetricSpec, ProtocolMask, RctDataset, SubjectMask};
pub use error::{Error, Result};
pub use imputer::{Imputer, ImputerConfig, ImputerShape};
pub use masklayer::{LearnableMask, MaskHyperparams};
pub use pmdgen::{Design, Pmd, Strategy};
