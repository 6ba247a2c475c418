//! Seeded randomness, dense matrices, spectral estimation, nonlinearities and
//! the finite-difference gradient oracle.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod rng;
pub mod spectral;

pub use gradcheck::{finite_difference_gradient, relative_error};
pub use matrix::{apply_sparsity, gaussian_matrix, uniform_matrix, Matrix};
pub use ops::{layer_norm, softmax, Activation};
pub use rng::Rng;
pub use spectral::{power_iteration, SpectralEstimate};
