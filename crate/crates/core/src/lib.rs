//! Numerical toolkit for the nonlocal age-of-infection epidemic model.
//!
//! The crate simulates the model through its renewal equation on the
//! boundary trace Φ(t, x), computes homogeneous and heterogeneous stationary
//! states, the asymptotic spreading speed from the dispersion relation, and
//! traveling-wave profiles by monotone iteration between explicit sub- and
//! supersolutions.
//!
//! ```
//! use epiwave::rates::{build_rate_model, RatePreset};
//! use epiwave::stationary::solve_rho_star;
//!
//! let model = build_rate_model(&RatePreset::Constant { tau0: 2.0, gamma0: 1.0 }, 0.01).unwrap();
//! let r0 = model.basic_reproduction_number(1.0);
//! assert!((r0 - 2.0).abs() < 1e-8);
//! assert!((solve_rho_star(r0) - 0.796812).abs() < 1e-6);
//! ```

pub mod dispersion;
pub mod error;
pub mod field;
pub mod io;
pub mod kernel;
pub mod numerics;
pub mod rates;
pub mod spread;
pub mod stationary;
pub mod validation;
pub mod volterra;
pub mod waves;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
