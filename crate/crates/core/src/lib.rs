//! Single-score admissions markets with multinomial-logit student preferences.
//!
//! Students carry one uniform score shared by every school; each school admits
//! everyone at or above its cutoff, and each student picks among her admitted
//! schools with MNL probabilities proportional to the schools' preferability
//! weights. On top of that model this crate provides
//!
//! - closed-form demand and appeal ([`demand`]),
//! - the unique equilibrium via competitiveness sorting ([`equilibrium`]),
//! - simultaneous and deferred-acceptance tâtonnement ([`tatonnement`]),
//! - analytic comparative-statics Jacobians ([`statics`]),
//! - finite-sample simulation and deferred acceptance ([`discrete`]),
//! - recovery of preferability weights from observed cutoffs and enrollment
//!   ([`inverse`]), and conversion of published score percentiles into such
//!   observations ([`ingest`]).
//!
//! ```
//! use admissions_core::{equilibrium, MarketParams};
//!
//! let market = MarketParams::pallet_town();
//! let sol = equilibrium::solve(&market);
//! assert!((sol.cutoffs()[3] - 0.6).abs() < 1e-12);
//! ```

pub mod demand;
pub mod discrete;
pub mod equilibrium;
pub mod error;
pub mod ingest;
pub mod inverse;
pub mod market;
pub mod par;
pub mod statics;
pub mod tatonnement;

pub use demand::{DemandResult, EquilibriumCertificate};
pub use equilibrium::EquilibriumSolution;
pub use error::{Error, ErrorKind, Result};
pub use market::{CutoffVector, MarketParams, SortOrder, StructMatrices};
pub use par::Execution;
