//! Simulation and analysis toolkit for divacancy-spin magnetometry of a
//! micron-scale van der Waals ferromagnet: spin-1 ODMR spectra, prism stray
//! fields with hysteresis, spin relaxometry, and the least-squares machinery
//! that ties them together.

pub mod config;
pub mod io;
pub mod magnet;
pub mod numfit;
pub mod odmr;
pub mod pipeline;
pub mod relaxometry;
pub mod spinmodel;

pub use config::ExperimentConfig;
pub use numfit::{FitError, FitOptions, FitResult, ResidualProblem};
