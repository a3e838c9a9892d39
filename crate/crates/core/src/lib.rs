//! Generalized linear models for repeated measures that combine conjugate
//! overdispersion random effects with normal random effects in the linear
//! predictor.
//!
//! The crate is organised bottom-up:
//!
//! * [`special`] — log-gamma, Stirling numbers, normal CDFs (uni- and
//!   multivariate) and Gauss–Hermite rules.
//! * [`family`] — exponential-family members, conjugate pairs and their
//!   closed-form marginals.
//! * [`model`] — model specification, datasets, design matrices and the packed
//!   parameter vector.
//! * [`likelihood`] — partially marginalized conditional densities and the
//!   marginal log-likelihood by adaptive Gauss–Hermite quadrature.
//! * [`estimate`] — maximum likelihood, standard errors, Wald and boundary
//!   tests, nested-model comparisons.
//! * [`moments`] — closed-form marginal moments and correlation functions.
//! * [`simulate`] — seeded data generation from the hierarchical model.

pub mod error;
pub mod estimate;
pub mod family;
pub mod likelihood;
pub mod model;
pub mod moments;
pub mod optim;
pub mod simulate;
pub mod special;

pub use error::{Error, Result};
pub use estimate::{fit, FitOptions, FitResult};
pub use family::{ConjugatePair, EffectKind, FamilyKind, FamilyMember};
pub use likelihood::QuadratureRule;
pub use model::{Constraint, Dataset, ModelSpec, Overdispersion, Params, SubjectDesign};
pub use simulate::{simulate, CovariateGenerator, SimDesign};
