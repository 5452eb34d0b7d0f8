//! Dense tensors, 2D DFT, symmetric eigendecomposition and seeded Gaussian
//! sampling. Everything here is a pure function of its inputs.

mod eig;
mod fft;
mod rng;
mod tensor;

pub use eig::{sym_eig, symmetrize, SymEigen, SYMMETRY_TOL};
pub use fft::{fft2d, ifft2d, ComplexGrid, RealPlane, IMAG_RESIDUE_TOL};
pub use rng::{gaussian_sample, SeededRng};
pub use tensor::Tensor;

pub use rustfft::num_complex::Complex64;

pub(crate) use fft::{fft2d_raw, ifft2d_raw};
