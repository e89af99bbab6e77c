//! Marginally interpretable linear transformation models for clustered
//! observations, fitted by exact maximum likelihood.

pub mod bases;
pub mod covariance;
pub mod error;
pub mod fit;
pub mod integrate;
pub mod io;
pub mod likelihood;
pub mod links;
pub mod marginal;
pub mod normal;
pub mod optim;
pub mod simtest;

pub use bases::{BasisKind, TransformationBasis};
pub use error::{Error, Result};
pub use fit::{FitOptions, FitResult};
pub use integrate::{CubatureKind, CubatureRule};
pub use likelihood::{ClusterData, Marginalization, ModelSpec, ParameterVector, Response};
pub use links::LinkFamily;
pub use marginal::MarginalQuery;
pub use io::{Dataset, RoleMap, SpecFile};
pub use simtest::{simulate, SimulationDesign};
