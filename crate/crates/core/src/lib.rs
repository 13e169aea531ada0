//! Principal eigenvalues of cooperative regime-switching diffusion operators,
//! with twisted processes, stability certificates and a Monte Carlo simulator.

pub mod cli;
pub mod discretize;
pub mod eigen;
pub mod exprlang;
pub mod model;
pub mod sde;
pub mod spectrum;
pub mod stability;
pub mod twist;
