//! Image batches to embedding stacks (B×P×D).
//!
//! Built-in extractors are analytic and differentiable: normalized pixel
//! patches, a 32×32 area-averaged pixel vector and per-channel soft color
//! histograms. Pretrained backbones attach through the bridge.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bridge::{self, SharedClient};
use crate::diffengine::ops::Reshape;
use crate::diffengine::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side length of the low-resolution pixel feature.
pub const LOWRES_SIDE: usize = 32;
pub const DEFAULT_HIST_BINS: usize = 32;

/// B×3×H×W images with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    values: Tensor,
}

impl ImageBatch {
    pub fn new(values: Tensor) -> Result<Self> {
        check_image_shape(values.shape())?;
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.dim(2)
    }

    pub fn width(&self) -> usize {
        self.values.dim(3)
    }

    pub fn select(&self, start: usize, end: usize) -> ImageBatch {
        ImageBatch {
            values: self.values.slice_rows(start, end),
        }
    }
}

fn check_image_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[0] == 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::dim(format!("images must be B×3×H×W, got {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorId {
    PixelPatches { grid: usize },
    Lowres,
    ColorHist { bins: usize },
    External { model: String },
}

impl ExtractorId {
    /// Upper bound of the raw L2 distance between two features of this kind,
    /// used to map distances into [0, 1].
    pub fn l2_bound(&self, d: usize) -> f64 {
        match self {
            // unit vectors
            ExtractorId::PixelPatches { .. } => 2.0,
            // pixels in [0,1]
            ExtractorId::Lowres => (d as f64).sqrt(),
            // probability vectors
            ExtractorId::ColorHist { .. } => 2f64.sqrt(),
            ExtractorId::External { .. } => 2.0,
        }
    }
}

/// Per-image embedding stack.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    values: Tensor,
    extractor: ExtractorId,
    normalized: bool,
}

impl FeatureSet {
    pub fn new(values: Tensor, extractor: ExtractorId, normalized: bool) -> Result<Self> {
        if values.ndim() != 3 || values.dim(1) == 0 || values.dim(2) == 0 {
            return Err(Error::dim(format!(
                "features must be B×P×D with P, D ≥ 1, got {:?}",
                values.shape()
            )));
        }
        if normalized {
            for (i, slice) in values.data().chunks_exact(values.dim(2)).enumerate() {
                let n = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::contract(format!("feature slice {i} has norm {n}")));
                }
            }
        }
        Ok(Self {
            values,
            extractor,
            normalized,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn extractor(&self) -> &ExtractorId {
        &self.extractor
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn batch(&self) -> usize {
        self.values.dim(0)
    }

    pub fn patches(&self) -> usize {
        self.values.dim(1)
    }

    pub fn dim(&self) -> usize {
        self.values.dim(2)
    }
}

/// Cut B×C×H×W into a g×g grid of patches, each flattened channel-major,
/// giving B×g²×(C·H/g·W/g).
pub struct ExtractPatches {
    grid: usize,
}

impl ExtractPatches {
    pub fn new(grid: usize) -> Self {
        Self { grid }
    }

    fn layout(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
        if shape.len() != 4 {
            return Err(Error::dim(format!("patches need B×C×H×W, got {shape:?}")));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.grid;
        if g == 0 || h % g != 0 || w % g != 0 {
            return Err(Error::dim(format!("grid {g} does not divide {h}×{w}")));
        }
        Ok((b, c, h, w, g))
    }

    /// Visit (source index, destination index) pairs.
    fn for_each(&self, shape: &[usize], mut f: impl FnMut(usize, usize)) -> Result<Vec<usize>> {
        let (b, c, h, w, g) = self.layout(shape)?;
        let (ph, pw) = (h / g, w / g);
        let d = c * ph * pw;
        let mut dst = 0;
        for bi in 0..b {
            for gi in 0..g {
                for gj in 0..g {
                    for ci in 0..c {
                        for y in 0..ph {
                            let row = gi * ph + y;
                            for x in 0..pw {
                                let col = gj * pw + x;
                                f(((bi * c + ci) * h + row) * w + col, dst);
                                dst += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![b, g * g, d])
    }
}

impl Op for ExtractPatches {
    fn name(&self) -> &str {
        "extract_patches"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let mut out = vec![0.0; x.len()];
        let shape = self.for_each(x.shape(), |src, dst| out[dst] = x.data()[src])?;
        Ok(Tensor::from_parts(shape, out))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let mut g = vec![0.0; x.len()];
        self.for_each(x.shape(), |src, dst| g[src] = cot.data()[dst])?;
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// L2-normalize every slice along the last axis.
pub struct NormalizeLast;

impl Op for NormalizeLast {
    fn name(&self) -> &str {
        "normalize"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let d = *x.shape().last().ok_or_else(|| Error::dim("normalize of a scalar"))?;
        let mut out = x.data().to_vec();
        for (i, s) in out.chunks_exact_mut(d).enumerate() {
            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::degenerate(format!("zero-norm embedding at slice {i}")));
            }
            s.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let d = *x.shape().last().unwrap();
        let mut g = vec![0.0; x.len()];
        for ((gs, xs), (ys, cs)) in g
            .chunks_exact_mut(d)
            .zip(x.data().chunks_exact(d))
            .zip(out.data().chunks_exact(d).zip(cot.data().chunks_exact(d)))
        {
            let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yc: f64 = ys.iter().zip(cs).map(|(y, c)| y * c).sum();
            for ((gi, yi), ci) in gs.iter_mut().zip(ys).zip(cs) {
                *gi = (ci - yi * yc) / n;
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Fractional box-filter weights mapping `n_in` samples onto `n_out` cells.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let cell = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let (lo, hi) = (i as f64 * cell, (i + 1) as f64 * cell);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|p| {
                    let overlap = (hi.min((p + 1) as f64) - lo.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / cell))
                })
                .collect()
        })
        .collect()
}

/// Area-average B×C×H×W down to B×C×out_h×out_w.
pub struct AreaDownsample {
    out_h: usize,
    out_w: usize,
}

impl AreaDownsample {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self { out_h, out_w }
    }
}

impl Op for AreaDownsample {
    fn name(&self) -> &str {
        "area_downsample"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.ndim() != 4 || x.dim(2) < self.out_h || x.dim(3) < self.out_w {
            return Err(Error::dim(format!(
                "cannot area-downsample {:?} to {}×{}",
                x.shape(),
                self.out_h,
                self.out_w
            )));
        }
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let wh = area_weights(h, self.out_h);
        let ww = area_weights(w, self.out_w);
        let mut out = Vec::with_capacity(b * c * self.out_h * self.out_w);
        for plane in x.data().chunks_exact(h * w) {
            for rows in &wh {
                for cols in &ww {
                    let mut acc = 0.0;
                    for &(p, a) in rows {
                        for &(q, bw) in cols {
                            acc += a * bw * plane[p * w + q];
                        }
                    }
                    out.push(acc);
                }
            }
        }
        Ok(Tensor::from_parts(vec![b, c, self.out_h, self.out_w], out))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let wh = area_weights(h, self.out_h);
        let ww = area_weights(w, self.out_w);
        let mut g = vec![0.0; x.len()];
        for (gplane, cplane) in g
            .chunks_exact_mut(h * w)
            .zip(cot.data().chunks_exact(self.out_h * self.out_w))
        {
            for (i, rows) in wh.iter().enumerate() {
                for (j, cols) in ww.iter().enumerate() {
                    let c = cplane[i * self.out_w + j];
                    for &(p, a) in rows {
                        for &(q, bw) in cols {
                            gplane[p * w + q] += a * bw * c;
                        }
                    }
                }
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Per-channel soft histogram with Gaussian kernels centred at
/// `(k + 0.5) / bins`; inputs are clamped to [0, 1] first.
pub struct SoftHistogram {
    bins: usize,
    bandwidth: f64,
}

impl SoftHistogram {
    pub fn new(bins: usize, bandwidth: Option<f64>) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!("histogram needs ≥ 2 bins, got {bins}")));
        }
        let bandwidth = bandwidth.unwrap_or(1.0 / (2.0 * bins as f64));
        if !(bandwidth > 0.0) {
            return Err(Error::Config(format!("histogram bandwidth must be > 0, got {bandwidth}")));
        }
        Ok(Self { bins, bandwidth })
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.bins as f64
    }

    fn kernel(&self, v: f64, k: usize) -> f64 {
        let d = v - self.center(k);
        (-d * d / (2.0 * self.bandwidth * self.bandwidth)).exp()
    }

    fn raw(&self, plane: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.bins];
        for &x in plane {
            let v = x.clamp(0.0, 1.0);
            for (k, hk) in h.iter_mut().enumerate() {
                *hk += self.kernel(v, k);
            }
        }
        h
    }
}

impl Op for SoftHistogram {
    fn name(&self) -> &str {
        "soft_histogram"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        check_image_shape(x.shape())?;
        let (b, c) = (x.dim(0), x.dim(1));
        let hw = x.dim(2) * x.dim(3);
        let mut out = Vec::with_capacity(b * c * self.bins);
        for plane in x.data().chunks_exact(hw) {
            let h = self.raw(plane);
            let s: f64 = h.iter().sum();
            if !(s > 0.0) {
                return Err(Error::degenerate("histogram has no mass (bandwidth too small)"));
            }
            out.extend(h.iter().map(|v| v / s));
        }
        Tensor::new(vec![b, c, self.bins], out)
    }

    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let hw = x.dim(2) * x.dim(3);
        let s2 = self.bandwidth * self.bandwidth;
        let mut g = vec![0.0; x.len()];
        for (((gplane, plane), outs), cots) in g
            .chunks_exact_mut(hw)
            .zip(x.data().chunks_exact(hw))
            .zip(out.data().chunks_exact(self.bins))
            .zip(cot.data().chunks_exact(self.bins))
        {
            let s: f64 = self.raw(plane).iter().sum();
            let dot: f64 = outs.iter().zip(cots).map(|(o, c)| o * c).sum();
            let hbar: Vec<f64> = cots.iter().map(|c| (c - dot) / s).collect();
            for (gi, &xi) in gplane.iter_mut().zip(plane) {
                if !(0.0..=1.0).contains(&xi) {
                    continue;
                }
                *gi = hbar
                    .iter()
                    .enumerate()
                    .map(|(k, hb)| hb * self.kernel(xi, k) * -(xi - self.center(k)) / s2)
                    .sum();
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Features computed by a bridge peer (`features` / `vjp_features`).
pub struct ExternalFeatures {
    client: SharedClient,
}

impl ExternalFeatures {
    pub fn new(client: SharedClient) -> Self {
        Self { client }
    }
}

impl Op for ExternalFeatures {
    fn name(&self) -> &str {
        "external_features"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = bridge::call_tensor(&self.client, "features", &[("x", inputs[0])], &[], "F")?;
        if f.ndim() != 3 || f.dim(0) != inputs[0].dim(0) {
            return Err(crate::BridgeError::Protocol {
                id: None,
                field: "tensors.F.shape".into(),
                message: format!("expected B×P×D features, got {:?}", f.shape()),
            }
            .into());
        }
        Ok(f)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let g = bridge::call_tensor(
            &self.client,
            "vjp_features",
            &[("x", inputs[0]), ("F_bar", cot)],
            &[],
            "x_bar",
        )?;
        Ok(vec![g.reshape(inputs[0].shape())?])
    }
}

/// A configured feature extractor.
#[derive(Clone)]
pub enum Extractor {
    PixelPatches { grid: usize },
    Lowres,
    ColorHist { bins: usize, bandwidth: Option<f64> },
    External { model: String, client: SharedClient },
}

impl std::fmt::Debug for Extractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.id())
    }
}

impl Extractor {
    pub fn id(&self) -> ExtractorId {
        match self {
            Extractor::PixelPatches { grid } => ExtractorId::PixelPatches { grid: *grid },
            Extractor::Lowres => ExtractorId::Lowres,
            Extractor::ColorHist { bins, .. } => ExtractorId::ColorHist { bins: *bins },
            Extractor::External { model, .. } => ExtractorId::External {
                model: model.clone(),
            },
        }
    }

    pub fn normalizes(&self) -> bool {
        matches!(self, Extractor::PixelPatches { .. })
    }

    /// Record feature extraction on an image node (B×3×H×W → B×P×D).
    pub fn build(&self, graph: &mut Graph, images: NodeId) -> Result<NodeId> {
        check_image_shape(graph.value(images).shape())?;
        match self {
            Extractor::PixelPatches { grid } => {
                let p = graph.apply(ExtractPatches::new(*grid), &[images])?;
                graph.apply(NormalizeLast, &[p])
            }
            Extractor::Lowres => {
                let b = graph.value(images).dim(0);
                let (h, w) = (graph.value(images).dim(2), graph.value(images).dim(3));
                if h < LOWRES_SIDE || w < LOWRES_SIDE {
                    return Err(Error::dim(format!(
                        "low-res features need at least {LOWRES_SIDE}×{LOWRES_SIDE} images, got {h}×{w}"
                    )));
                }
                let small = graph.apply(AreaDownsample::new(LOWRES_SIDE, LOWRES_SIDE), &[images])?;
                graph.apply(Reshape::new(&[b, 1, 3 * LOWRES_SIDE * LOWRES_SIDE]), &[small])
            }
            Extractor::ColorHist { bins, bandwidth } => {
                graph.apply(SoftHistogram::new(*bins, *bandwidth)?, &[images])
            }
            Extractor::External { client, .. } => {
                graph.apply_shared(Arc::new(ExternalFeatures::new(client.clone())), &[images])
            }
        }
    }

    pub fn extract(&self, images: &ImageBatch) -> Result<FeatureSet> {
        let mut g = Graph::new();
        let x = g.constant(images.values().clone());
        let f = self.build(&mut g, x)?;
        FeatureSet::new(g.value(f).clone(), self.id(), self.normalizes())
    }
}

pub fn pixel_patches(images: &ImageBatch, grid: usize) -> Result<FeatureSet> {
    Extractor::PixelPatches { grid }.extract(images)
}

pub fn lowres_vec(images: &ImageBatch) -> Result<FeatureSet> {
    Extractor::Lowres.extract(images)
}

pub fn soft_color_hist(images: &ImageBatch, bins: usize, bandwidth: Option<f64>) -> Result<FeatureSet> {
    Extractor::ColorHist { bins, bandwidth }.extract(images)
}

pub fn external_features(images: &ImageBatch, client: &SharedClient, model: &str) -> Result<FeatureSet> {
    Extractor::External {
        model: model.to_string(),
        client: client.clone(),
    }
    .extract(images)
}
