//! Continuation and stability analysis of quasi-periodic invariant tori of
//! second-order nonlinear systems.

pub mod aus;
pub mod basis;
pub mod continuation;
pub mod error;
pub mod models;
pub mod oracle;
pub mod scalar;
pub mod stability;
pub mod tensorkit;
pub mod vcf;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double precision aliases.
pub type Operator = vcf::VcfOperator<f64>;
pub type Point = vcf::TorusPoint<f64>;
pub type Workspace = aus::AusWorkspace<f64>;
pub type Branch = continuation::Branch<f64>;

/// Single precision aliases.
pub type Operator32 = vcf::VcfOperator<f32>;
pub type Point32 = vcf::TorusPoint<f32>;
pub type Workspace32 = aus::AusWorkspace<f32>;
pub type Branch32 = continuation::Branch<f32>;
