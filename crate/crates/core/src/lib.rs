//! Truncated Euler–Maruyama simulation of stochastic delay differential
//! equations with Monte Carlo moment, stability and convergence tools.
//!
//! ```
//! use sdde_core::model::{lookup, ProblemParams};
//! use sdde_core::scheme::{simulate, SchemeRun, TruncationPolicy};
//! use sdde_core::LatticeFamily;
//!
//! let entry = lookup("paper-example-2d", &ProblemParams::new())?;
//! let policy = TruncationPolicy::with_minimal_cap(216f64.sqrt(), 4.0, 0.25)?;
//! let run = SchemeRun::truncated(entry.problem.clone(), policy, 64, 2.0)?;
//! let family = LatticeFamily::new(42, run.delta(), entry.problem.noise_dim())?;
//! let paths = simulate(&run, &family, 10)?;
//! assert!(paths.state(0, run.n_steps() as i64).iter().all(|v| v.is_finite()));
//! # Ok::<(), sdde_core::SddeError>(())
//! ```

// Negated float comparisons are used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod conditions;
pub mod error;
pub mod model;
pub mod noise;
pub mod scheme;

pub use error::{Result, SddeError};
pub use model::{InitialSegment, SddeProblem};
pub use noise::{BrownianLattice, LatticeFamily};
pub use scheme::{SchemeRun, SchemeVariant, TrajectoryEnsemble, TruncationPolicy};
