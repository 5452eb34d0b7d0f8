//! Initial noise batches: white Gaussian, and α-colored noise obtained by
//! attenuating Fourier components by `(1 + f)^-α` and re-standardizing each
//! channel plane.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffengine::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::numerics::{fft2d_raw, ifft2d_raw, SeededRng, Tensor};

/// Radial frequency uses signed (wrap-around) DFT indices:
/// `u' = min(u, H - u)`, `v' = min(v, W - v)`.
pub const RADIAL_CONVENTION: &str = "signed-wraparound";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub alpha: f64,
}

impl SpectralProfile {
    pub const WHITE: SpectralProfile = SpectralProfile { alpha: 0.0 };

    /// Exponent used for "pink" initialization.
    pub const PINK: SpectralProfile = SpectralProfile { alpha: 0.2 };

    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Config(format!("spectral exponent must be >= 0, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn convention(&self) -> &'static str {
        RADIAL_CONVENTION
    }
}

/// B×C×H×W noise with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    values: Tensor,
    seed: u64,
    profile: SpectralProfile,
}

impl NoiseBatch {
    pub fn new(values: Tensor, seed: u64, profile: SpectralProfile) -> Result<Self> {
        if values.ndim() != 4 || values.dim(0) == 0 || values.shape().iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "noise batch must be B×C×H×W with B ≥ 1, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("noise batch".into()));
        }
        Ok(Self {
            values,
            seed,
            profile,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn profile(&self) -> SpectralProfile {
        self.profile
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(1)
    }

    pub fn height(&self) -> usize {
        self.values.dim(2)
    }

    pub fn width(&self) -> usize {
        self.values.dim(3)
    }

    /// Flattened per-sample dimension `C·H·W`.
    pub fn sample_dim(&self) -> usize {
        self.values.row_len()
    }

    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        self.values.check_same_shape(&values, "noise update")?;
        Self::new(values, self.seed, self.profile)
    }
}

pub fn sample_white(rng: &mut SeededRng, b: usize, c: usize, h: usize, w: usize) -> Result<NoiseBatch> {
    if b == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::dim("noise dimensions must be positive"));
    }
    let values = rng.gaussian(&[b, c, h, w]);
    NoiseBatch::new(values, rng.seed(), SpectralProfile::WHITE)
}

pub fn radial_frequency(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for u in 0..h {
        let uu = u.min(h - u) as f64;
        for v in 0..w {
            let vv = v.min(w - v) as f64;
            data.push((uu * uu + vv * vv).sqrt());
        }
    }
    Tensor::from_parts(vec![h, w], data)
}

/// Largest signed radial frequency on an H×W grid.
pub fn max_radial_frequency(h: usize, w: usize) -> f64 {
    let (uh, vh) = ((h / 2) as f64, (w / 2) as f64);
    (uh * uh + vh * vh).sqrt()
}

fn filter_weights(h: usize, w: usize, alpha: f64) -> Vec<f64> {
    radial_frequency(h, w)
        .data()
        .iter()
        .map(|f| (1.0 + f).powf(-alpha))
        .collect()
}

/// Apply a real, even frequency-domain weight to a real plane. The map is a
/// symmetric circulant operator, so it is also its own adjoint.
pub(crate) fn apply_even_filter(h: usize, w: usize, plane: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let mut spec = fft2d_raw(h, w, plane);
    for (c, &wt) in spec.iter_mut().zip(weights) {
        *c *= wt;
    }
    let (real, max_imag) = ifft2d_raw(h, w, &spec);
    let scale = plane.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    if max_imag >= 1e-8 * scale {
        return Err(Error::contract(format!(
            "filtered plane has imaginary residue {max_imag:e}"
        )));
    }
    Ok(real)
}

fn standardize(plane: &mut [f64]) -> Result<f64> {
    let n = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / n;
    let scale = plane.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    plane.iter_mut().for_each(|v| *v -= mean);
    let sigma = (plane.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if !(sigma > f64::EPSILON * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::degenerate("channel plane has zero standard deviation"));
    }
    plane.iter_mut().for_each(|v| *v /= sigma);
    Ok(sigma)
}

/// Spectral reweighting followed by per-plane standardization, as a
/// differentiable op on B×C×H×W tensors.
pub struct Colorize {
    alpha: f64,
    shape_hw: (usize, usize),
    weights: Arc<Vec<f64>>,
}

impl Colorize {
    pub fn new(profile: SpectralProfile, h: usize, w: usize) -> Self {
        Self {
            alpha: profile.alpha,
            shape_hw: (h, w),
            weights: Arc::new(filter_weights(h, w, profile.alpha)),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 4 || (x.dim(2), x.dim(3)) != self.shape_hw {
            return Err(Error::dim(format!(
                "colorize built for {:?} planes, got {:?}",
                self.shape_hw,
                x.shape()
            )));
        }
        Ok(())
    }

    fn filtered_planes(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (h, w) = self.shape_hw;
        let mut out = Vec::with_capacity(x.len());
        for plane in x.data().chunks_exact(h * w) {
            out.extend(apply_even_filter(h, w, plane, &self.weights)?);
        }
        Ok(out)
    }
}

impl Op for Colorize {
    fn name(&self) -> &str {
        "colorize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        self.check(x)?;
        let mut data = self.filtered_planes(x)?;
        let (h, w) = self.shape_hw;
        for plane in data.chunks_exact_mut(h * w) {
            standardize(plane)?;
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (h, w) = self.shape_hw;
        let n = (h * w) as f64;
        // σ per plane is needed for the standardization adjoint
        let filtered = self.filtered_planes(x)?;
        let mut pre = Vec::with_capacity(x.len());
        for ((fplane, yplane), cplane) in filtered
            .chunks_exact(h * w)
            .zip(out.data().chunks_exact(h * w))
            .zip(cot.data().chunks_exact(h * w))
        {
            let mean = fplane.iter().sum::<f64>() / n;
            let sigma = (fplane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let cbar = cplane.iter().sum::<f64>() / n;
            let cy = cplane.iter().zip(yplane).map(|(c, y)| c * y).sum::<f64>() / n;
            pre.extend(
                cplane
                    .iter()
                    .zip(yplane)
                    .map(|(c, y)| (c - cbar - y * cy) / sigma),
            );
        }
        let mut grad = Vec::with_capacity(x.len());
        for plane in pre.chunks_exact(h * w) {
            grad.extend(apply_even_filter(h, w, plane, &self.weights)?);
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), grad)])
    }
}

pub fn colorize(white: &NoiseBatch, profile: SpectralProfile) -> Result<NoiseBatch> {
    if white.profile().alpha != 0.0 {
        return Err(Error::contract(format!(
            "colorize expects white input, got alpha {}",
            white.profile().alpha
        )));
    }
    let op = Colorize::new(profile, white.height(), white.width());
    let values = op.forward(&[white.values()])?;
    NoiseBatch::new(values, white.seed(), profile)
}

/// Record colorization in a graph so optimization can run in white-noise
/// coordinates.
pub fn colorize_node(graph: &mut Graph, white: NodeId, profile: SpectralProfile) -> Result<NodeId> {
    let shape = graph.value(white).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::dim("colorize_node expects B×C×H×W"));
    }
    graph.apply(Colorize::new(profile, shape[2], shape[3]), &[white])
}

/// White draw then colorization with the same seed.
pub fn sample(rng: &mut SeededRng, profile: SpectralProfile, b: usize, c: usize, h: usize, w: usize) -> Result<NoiseBatch> {
    let white = sample_white(rng, b, c, h, w)?;
    if profile.alpha == 0.0 {
        return Ok(white);
    }
    colorize(&white, profile)
}
