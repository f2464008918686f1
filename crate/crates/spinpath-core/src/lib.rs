//! Desk-scale toolkit for finite-volume quantum spin systems.
//!
//! The crate models the observable algebra of a finite spin region as the
//! convolution algebra of a transformation groupoid (configurations acted on
//! by site-wise spin shifts), builds Hamiltonians from diagonal/off-diagonal
//! interaction terms, and expands Gibbs density operators `exp(-β(H + W))`
//! as integrals over piecewise-constant jump paths driven by a Poisson point
//! process in imaginary time. On top of that sit boundary-conditioned Gibbs
//! functionals with tower/consistency checks and KMS-style verification of
//! equilibrium states against an exact dense-matrix oracle.
//!
//! Everything is dense and deterministic: regions are capped at a dozen
//! sites, matrices are `q^|Λ| × q^|Λ|`, randomness flows through explicitly
//! seeded counter-based streams, and every stochastic or truncated estimate
//! reports an error bound alongside its value.

pub mod divided;
pub mod gibbs;
pub mod groupoid;
pub mod interaction;
pub mod kms;
pub mod paths;
pub mod pointprocess;
pub mod report;

pub use groupoid::{
    FlipSet, GroupoidArrow, LocalOperator, Region, Site, SpinConfiguration, SpinModel,
};
