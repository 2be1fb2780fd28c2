//! Experiment runner for the class-balancing diffusion lab: configuration,
//! run directories with manifests, sweeps and reports.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod svg;
