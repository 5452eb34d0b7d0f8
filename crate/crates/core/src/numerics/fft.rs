use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Tensor;
use crate::error::{Error, Result};

/// Imaginary magnitude above which [`ifft2d`] reports a residue.
pub const IMAG_RESIDUE_TOL: f64 = 1e-8;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Row-major H×W grid of complex Fourier coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    height: usize,
    width: usize,
    values: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, values: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("complex grid with a zero dimension"));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "complex grid {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.values[u * self.width + v]
    }
}

/// Real part of an inverse transform together with the largest discarded
/// imaginary magnitude.
#[derive(Clone, Debug)]
pub struct RealPlane {
    pub plane: Tensor,
    pub max_imag: f64,
}

impl RealPlane {
    pub fn has_residue(&self) -> bool {
        self.max_imag > IMAG_RESIDUE_TOL
    }
}

/// In-place 2D transform of a row-major buffer. The inverse is unnormalized;
/// callers divide by `h * w`.
pub(crate) fn transform_in_place(h: usize, w: usize, buf: &mut [Complex64], inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        // rows are contiguous
        row_fft.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for v in 0..w {
            for u in 0..h {
                column[u] = buf[u * w + v];
            }
            col_fft.process(&mut column);
            for u in 0..h {
                buf[u * w + v] = column[u];
            }
        }
    });
}

/// Forward DFT of a real row-major plane without normalization.
pub(crate) fn fft2d_raw(h: usize, w: usize, plane: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_in_place(h, w, &mut buf, false);
    buf
}

/// Normalized inverse DFT; returns the real part and the largest |Im|.
pub(crate) fn ifft2d_raw(h: usize, w: usize, spectrum: &[Complex64]) -> (Vec<f64>, f64) {
    let mut buf = spectrum.to_vec();
    transform_in_place(h, w, &mut buf, true);
    let scale = 1.0 / (h * w) as f64;
    let mut max_imag = 0.0_f64;
    let real = buf
        .iter()
        .map(|c| {
            max_imag = max_imag.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    (real, max_imag)
}

/// Unnormalized forward 2D DFT of an H×W plane.
pub fn fft2d(plane: &Tensor) -> Result<ComplexGrid> {
    if plane.ndim() != 2 {
        return Err(Error::dim(format!(
            "fft2d expects a 2-D plane, got shape {:?}",
            plane.shape()
        )));
    }
    let (h, w) = (plane.dim(0), plane.dim(1));
    if h == 0 || w == 0 {
        return Err(Error::dim("fft2d of an empty plane"));
    }
    ComplexGrid::new(h, w, fft2d_raw(h, w, plane.data()))
}

/// Inverse of [`fft2d`] including the `1/(H·W)` factor.
pub fn ifft2d(grid: &ComplexGrid) -> Result<RealPlane> {
    let (h, w) = (grid.height, grid.width);
    let (real, max_imag) = ifft2d_raw(h, w, &grid.values);
    Ok(RealPlane {
        plane: Tensor::new(vec![h, w], real)?,
        max_imag,
    })
}
