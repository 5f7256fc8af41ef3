//! Structured discriminative dictionaries built from KSVD.
//!
//! The crate learns class-tagged dictionaries by repeatedly sampling a
//! learning set, training an unstructured KSVD dictionary on it, scoring
//! every atom for how strongly it separates one class from the others, and
//! keeping the best atom per class. Sparse codes against the resulting
//! dictionary feed a small MLP classifier.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | IDX parsing, bicubic reduction, seeded partitions |
//! | [`omp`] | dictionaries, Orthogonal Matching Pursuit, batch encoding |
//! | [`ksvd`] | unstructured KSVD dictionary learning |
//! | [`measures`] | per-atom discriminative measures and atom selection |
//! | [`das`] | the iterative structured-dictionary builder |
//! | [`mlp`] | one-hidden-layer MLP trained with scaled conjugate gradient |
//! | [`tuning`] | accuracy, significance test, two-stage (α, β) grid search |
//! | [`artifact`] | versioned binary container for dictionaries, codes, models |
//! | [`pipeline`] | run configuration and the end-to-end experiment driver |

pub mod artifact;
pub mod das;
pub mod data;
mod error;
pub mod ksvd;
pub mod measures;
pub mod mlp;
pub mod omp;
pub mod pipeline;
pub mod seeds;
pub mod tuning;

pub use error::{Error, ErrorCategory, Result};
