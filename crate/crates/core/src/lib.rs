//! Numerical toolkit for large-time statistics of the spectrally truncated
//! stochastic 2D Navier-Stokes system: trajectory simulation, occupation and
//! empirical measures, Feynman-Kac semigroups, Donsker-Varadhan rate and
//! entropy functionals, and exact finite-Markov-chain oracles for all of the
//! identities that admit one.

pub mod acceptance;
pub mod chain;
pub mod empirical;
pub mod feynman_kac;
pub mod fingerprint;
pub mod galerkin;
pub mod linalg;
pub mod probes;
pub mod rate;
pub mod rng;
pub mod sde;
pub mod stats;
