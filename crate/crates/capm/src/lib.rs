//! Sound robustness certification for maxpool-based CNNs under l-infinity
//! input perturbation.
//!
//! The certifier propagates a dual network backward through the layers to
//! produce a certified lower bound on the margin between the true class and
//! any target class. Maxpool layers are decomposed into sequential binary
//! maxima so the standard ReLU convex relaxation applies to every
//! nonlinearity. The crate also ships independent oracle machinery
//! (Monte-Carlo polytope sampling, closed-form single-layer optima, corner
//! enumeration, interval propagation) so every bound is testable.

pub mod bounds;
pub mod dual;
pub mod error;
pub mod idx;
pub mod model;
pub mod net;
pub mod oracle;
pub mod prep;
pub mod report;
pub mod tensor;
pub mod verifier;

pub use error::{CapmError, Result};
pub use net::{validate_network, NetworkSpec, NormalizationConfig};
pub use tensor::FeatureMap;

pub use ndarray;
