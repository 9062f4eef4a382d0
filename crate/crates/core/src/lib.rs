//! Ordinal quantification.
//!
//! Estimates the class-prevalence distribution of an unlabeled sample when
//! the classes are totally ordered. Every method reduces to solving
//! `q = M p` for a prevalence vector `p` on the probability simplex, where
//! `q` is the mean embedding of the sample and the columns of `M` are the
//! class-conditional mean embeddings observed on labeled data. The ordinal
//! variants add a Tikhonov smoothness penalty (or polynomial smoothing of EM
//! priors) to steer estimates toward ordinally plausible distributions.

pub mod classifier;
pub mod data;
pub mod error;
pub mod experiment;

pub mod metrics;


pub mod protocols;
pub mod quantifiers;
pub mod simplex;
pub mod solvers;
pub mod transfer;

pub use error::{Error, Result};
pub use simplex::{Distribution, LatentVector, TikhonovMatrix};
