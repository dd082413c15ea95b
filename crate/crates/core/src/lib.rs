//! Numerical engine for symmetric diffusions on principal fiber bundles.
//!
//! The configuration space is a product `P × V` of a compact Riemannian
//! manifold `P` and a vector space `V`, carrying a free isometric right
//! action of a compact group `G` (here U(1) or SU(2)). The crate evaluates
//! the adapted-coordinate geometry of the bundle `P × V → P ×_G V`
//! (orbit metrics, mechanical connection, horizontal metrics, projectors),
//! builds the transformed and filtered Stratonovich diffusions on it,
//! integrates the linear matrix filtering equation as a time-ordered
//! multiplicative stochastic integral over group-representation channels,
//! and verifies the Girsanov reduction identity between total-space and
//! reduced-space Feynman–Kac semigroups by two-sided Monte Carlo against
//! independent analytic and finite-difference oracles.
//!
//! Three concrete bundles are built in:
//!
//! * Model A — `P = T²` with a U(1) shift action, `V = ℝ²` with a charge-q
//!   rotation; the workhorse for quantitative acceptance runs.
//! * Model B — `P = S³` with the U(1) Hopf circle action, `V = ℝ²`.
//! * Model C — `P = SU(2)` acted on by right translation of SU(2) itself,
//!   `V = ℝ³` in the adjoint representation (non-abelian machinery).

pub mod config;
pub mod error;
pub mod experiments;
pub mod filtering;
pub mod geometry;
pub mod group;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod oracle;
pub mod reduction;
pub mod report;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
pub use model::{AdaptedPoint, Model, ModelId};
