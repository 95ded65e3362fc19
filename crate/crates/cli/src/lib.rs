//! Experiment orchestration for the manifold-BSDE kernels: configuration
//! loading, the scenario registry, run execution with manifests, and
//! report generation.

pub mod config;
pub mod dirichlet_run;
pub mod geomtest;
pub mod report;
pub mod runner;
pub mod scenario;
