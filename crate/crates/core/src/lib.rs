//! Bayesian exponential-family projection models for one or two coupled
//! data views.
//!
//! The models (EPCA, supervised EPCA, EPLS and ECCA) are low-rank
//! factorizations `Θ = U V` of the natural parameters of element-wise
//! exponential-family likelihoods, differing only in which blocks of `V` are
//! structurally zero. Three inference engines are provided: MAP by conjugate
//! gradients ([`map_infer`]), Hamiltonian Monte Carlo with exchange-algorithm
//! hyperparameter moves ([`hmc_infer`]) and the alternating Gaussian-Gibbs /
//! Metropolis sampler ([`gibecca`]).

pub mod chain;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod expfam;
pub mod gibecca;
pub mod hmc_infer;
pub mod io;
pub mod map_infer;
pub mod model;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod spect;

pub use chain::{Chain, ChainSample};
pub use error::{Error, Result};
pub use expfam::{ConjugateHyper, ExpFamilyKind};
pub use model::{
    assemble_theta, log_likelihood, make_layout, BlockLayout, Dims, FactorState, LayoutSpec,
    ModelKind, ObservationSet,
};
pub use prior::PriorSpec;
