//! Set-level diversity statistics: patchwise mean pairwise distance, DPP
//! log-determinant and Vendi score, each with a closed-form VJP.

use serde::{Deserialize, Serialize};

use crate::diffengine::ops::Reshape;
use crate::diffengine::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::features::{ExtractorId, FeatureSet, NormalizeLast};
use crate::numerics::{sym_eig, symmetrize, Tensor};

/// Diagonal jitter added to every similarity kernel.
pub const KERNEL_JITTER: f64 = 1e-6;
/// Guard inside the Vendi entropy logarithm.
pub const VENDI_DELTA: f64 = 1e-12;
/// Most negative eigenvalue tolerated in a similarity kernel.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `(1 - cos) / 2`
    Cosine,
    /// Raw L2 divided by the extractor's distance bound.
    L2Normalized,
    /// L2 between probability histograms divided by `√2`.
    HistL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMetric {
    Cosine,
    L2Normalized,
    HistL2,
    Dpp,
    Vendi,
}

impl DiversityMetric {
    pub fn distance(self) -> Option<Distance> {
        match self {
            DiversityMetric::Cosine => Some(Distance::Cosine),
            DiversityMetric::L2Normalized => Some(Distance::L2Normalized),
            DiversityMetric::HistL2 => Some(Distance::HistL2),
            DiversityMetric::Dpp | DiversityMetric::Vendi => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiversityMetric::Cosine => "cosine",
            DiversityMetric::L2Normalized => "l2_normalized",
            DiversityMetric::HistL2 => "hist_l2",
            DiversityMetric::Dpp => "dpp",
            DiversityMetric::Vendi => "vendi",
        }
    }
}

impl std::fmt::Display for DiversityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiversityStat {
    pub metric: DiversityMetric,
    pub value: f64,
    /// B×B matrix of patch-averaged distances (pairwise metrics only).
    pub pairs: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityKernel {
    k: Tensor,
    epsilon_jitter: f64,
}

impl SimilarityKernel {
    /// Wrap an externally built kernel: it is symmetrized and must be PSD
    /// within [`PSD_TOL`].
    pub fn new(k: &Tensor, epsilon_jitter: f64) -> Result<Self> {
        let k = symmetrize(k)?;
        let eig = sym_eig(&k)?;
        let min = eig.values.data().last().copied().unwrap_or(0.0);
        if min < -PSD_TOL {
            return Err(Error::contract(format!("kernel has eigenvalue {min:e} < 0")));
        }
        Ok(Self { k, epsilon_jitter })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.k
    }

    pub fn epsilon_jitter(&self) -> f64 {
        self.epsilon_jitter
    }

    pub fn size(&self) -> usize {
        self.k.dim(0)
    }
}

fn dist_and_grad(kind: Distance, bound: f64, a: &[f64], b: &[f64], grad: Option<(&mut [f64], f64)>) -> Result<f64> {
    match kind {
        Distance::Cosine => {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::degenerate("zero vector under cosine distance"));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let cos = dot / (na * nb);
            if let Some((g, scale)) = grad {
                // ∂d/∂a = -(b/(|a||b|) - cos·a/|a|²)/2; g holds [∂a | ∂b]
                let (ga, gb) = g.split_at_mut(a.len());
                for i in 0..a.len() {
                    ga[i] -= 0.5 * scale * (b[i] / (na * nb) - cos * a[i] / (na * na));
                    gb[i] -= 0.5 * scale * (a[i] / (na * nb) - cos * b[i] / (nb * nb));
                }
            }
            Ok(0.5 * (1.0 - cos))
        }
        Distance::L2Normalized | Distance::HistL2 => {
            let bound = if kind == Distance::HistL2 { 2f64.sqrt() } else { bound };
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if let Some((g, scale)) = grad {
                if d > 0.0 {
                    let (ga, gb) = g.split_at_mut(a.len());
                    for i in 0..a.len() {
                        let t = scale * (a[i] - b[i]) / (d * bound);
                        ga[i] += t;
                        gb[i] -= t;
                    }
                }
            }
            Ok(d / bound)
        }
    }
}

/// `(1/P) Σ_p 2/(B(B-1)) Σ_{i<j} d(f_p(i), f_p(j))` on a B×P×D tensor.
pub struct PairwiseMean {
    distance: Distance,
    bound: f64,
}

impl PairwiseMean {
    pub fn new(distance: Distance, bound: f64) -> Self {
        Self { distance, bound }
    }

    fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
        if x.ndim() != 3 {
            return Err(Error::dim(format!("pairwise mean needs B×P×D, got {:?}", x.shape())));
        }
        let (b, p, d) = (x.dim(0), x.dim(1), x.dim(2));
        if b < 2 {
            return Err(Error::Arity(format!("pairwise diversity needs B ≥ 2, got {b}")));
        }
        Ok((b, p, d))
    }

    fn slice(x: &Tensor, i: usize, p: usize) -> &[f64] {
        let (pp, d) = (x.dim(1), x.dim(2));
        &x.data()[(i * pp + p) * d..(i * pp + p + 1) * d]
    }

    /// Patch-averaged distance for every pair.
    pub fn pair_matrix(&self, x: &Tensor) -> Result<Tensor> {
        let (b, p, _) = Self::dims(x)?;
        let mut m = vec![0.0; b * b];
        for i in 0..b {
            for j in i + 1..b {
                let mut acc = 0.0;
                for q in 0..p {
                    acc += dist_and_grad(self.distance, self.bound, Self::slice(x, i, q), Self::slice(x, j, q), None)?;
                }
                m[i * b + j] = acc / p as f64;
                m[j * b + i] = acc / p as f64;
            }
        }
        Tensor::new(vec![b, b], m)
    }
}

impl Op for PairwiseMean {
    fn name(&self) -> &str {
        "pairwise_mean"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (b, _, _) = Self::dims(x)?;
        let m = self.pair_matrix(x)?;
        let pairs = (b * (b - 1) / 2) as f64;
        let total: f64 = (0..b).flat_map(|i| (i + 1..b).map(move |j| (i, j))).map(|(i, j)| m.data()[i * b + j]).sum();
        Ok(Tensor::scalar(total / pairs))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (b, p, d) = Self::dims(x)?;
        let scale = cot.item() / (p as f64 * (b * (b - 1) / 2) as f64);
        let mut g = vec![0.0; x.len()];
        let mut pair_grad = vec![0.0; 2 * d];
        for q in 0..p {
            for i in 0..b {
                for j in i + 1..b {
                    pair_grad.iter_mut().for_each(|v| *v = 0.0);
                    dist_and_grad(
                        self.distance,
                        self.bound,
                        Self::slice(x, i, q),
                        Self::slice(x, j, q),
                        Some((&mut pair_grad, scale)),
                    )?;
                    let (ga, gb) = pair_grad.split_at(d);
                    let oi = (i * p + q) * d;
                    let oj = (j * p + q) * d;
                    for k in 0..d {
                        g[oi + k] += ga[k];
                        g[oj + k] += gb[k];
                    }
                }
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Mean over the patch axis: B×P×D → B×D.
pub struct PoolPatches;

impl Op for PoolPatches {
    fn name(&self) -> &str {
        "pool_patches"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.ndim() != 3 {
            return Err(Error::dim(format!("pooling needs B×P×D, got {:?}", x.shape())));
        }
        let (b, p, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = vec![0.0; b * d];
        for (i, row) in x.rows().enumerate() {
            for patch in row.chunks_exact(d) {
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(patch) {
                    *o += v / p as f64;
                }
            }
        }
        Ok(Tensor::from_parts(vec![b, d], out))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (b, p, d) = (x.dim(0), x.dim(1), x.dim(2));
        let mut g = Vec::with_capacity(x.len());
        for i in 0..b {
            let c = &cot.data()[i * d..(i + 1) * d];
            for _ in 0..p {
                g.extend(c.iter().map(|v| v / p as f64));
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// `K = (F Fᵀ + (F Fᵀ)ᵀ)/2 + εI` for B×D rows.
pub struct Gram {
    jitter: f64,
}

impl Gram {
    pub fn new(jitter: f64) -> Self {
        Self { jitter }
    }
}

impl Op for Gram {
    fn name(&self) -> &str {
        "gram"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let f = inputs[0];
        if f.ndim() != 2 {
            return Err(Error::dim(format!("gram needs B×D, got {:?}", f.shape())));
        }
        let b = f.dim(0);
        let mut k = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                k[i * b + j] = f.row(i).iter().zip(f.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        let mut k = symmetrize(&Tensor::from_parts(vec![b, b], k))?;
        for i in 0..b {
            k.data_mut()[i * b + i] += self.jitter;
        }
        Ok(k)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let f = inputs[0];
        let (b, d) = (f.dim(0), f.dim(1));
        let c = cot.data();
        let mut g = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..b {
                // symmetrization then ∂(F Fᵀ): (C + Cᵀ) F
                let w = c[i * b + j] + c[j * b + i];
                if w == 0.0 {
                    continue;
                }
                for k in 0..d {
                    g[i * d + k] += w * f.data()[j * d + k];
                }
            }
        }
        Ok(vec![Tensor::from_parts(vec![b, d], g)])
    }
}

/// `log det(I + K)`; the VJP is `(I + K)⁻¹`.
pub struct LogDetIPlus;

fn cholesky_i_plus(k: &Tensor) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if k.ndim() != 2 || k.dim(0) != k.dim(1) {
        return Err(Error::dim(format!("log det needs a square matrix, got {:?}", k.shape())));
    }
    let n = k.dim(0);
    let mut m = nalgebra::DMatrix::from_row_slice(n, n, k.data());
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    nalgebra::Cholesky::new(m).ok_or_else(|| Error::contract("I + K is not positive definite"))
}

impl Op for LogDetIPlus {
    fn name(&self) -> &str {
        "logdet_i_plus"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let chol = cholesky_i_plus(inputs[0])?;
        let l = chol.l_dirty();
        let n = inputs[0].dim(0);
        Ok(Tensor::scalar((0..n).map(|i| 2.0 * l[(i, i)].ln()).sum()))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let n = inputs[0].dim(0);
        let inv = cholesky_i_plus(inputs[0])?.inverse();
        let c = cot.item();
        let data = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| c * inv[(j, i)]).collect();
        Ok(vec![Tensor::from_parts(vec![n, n], data)])
    }
}

/// `exp(-Σ p_i log(p_i + δ))` with `p = λ⁺ / Σ λ⁺` from the kernel spectrum.
pub struct VendiOp;

struct VendiParts {
    value: f64,
    /// ∂value/∂λ_i
    dvalue: Vec<f64>,
    eig: crate::numerics::SymEigen,
}

fn vendi_parts(k: &Tensor) -> Result<VendiParts> {
    let eig = sym_eig(k)?;
    let lam: Vec<f64> = eig.values.data().iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = lam.iter().sum();
    if !(total > 0.0) {
        return Err(Error::degenerate("kernel spectrum is all zero"));
    }
    let p: Vec<f64> = lam.iter().map(|l| l / total).collect();
    let entropy: f64 = -p.iter().map(|&pi| pi * (pi + VENDI_DELTA).ln()).sum::<f64>();
    let value = entropy.exp();
    // h_j = ∂H/∂p_j; ∂H/∂λ_i = (h_i - Σ_j h_j p_j) / Σλ
    let h: Vec<f64> = p
        .iter()
        .map(|&pj| -(pj + VENDI_DELTA).ln() - pj / (pj + VENDI_DELTA))
        .collect();
    let hp: f64 = h.iter().zip(&p).map(|(a, b)| a * b).sum();
    let dvalue = eig
        .values
        .data()
        .iter()
        .zip(&h)
        .map(|(&l, &hi)| if l < 0.0 { 0.0 } else { value * (hi - hp) / total })
        .collect();
    Ok(VendiParts { value, dvalue, eig })
}

impl Op for VendiOp {
    fn name(&self) -> &str {
        "vendi"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(vendi_parts(inputs[0])?.value))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        // dλ_i = v_iᵀ dK v_i, so K̄ = V diag(∂value/∂λ) Vᵀ. Only eigenvalue
        // derivatives enter, which stay well defined on degenerate spectra.
        let parts = vendi_parts(inputs[0])?;
        let n = parts.eig.size();
        let c = cot.item();
        let mut g = vec![0.0; n * n];
        for (col, &dl) in parts.dvalue.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            for i in 0..n {
                let vi = parts.eig.vector(i, col);
                for j in 0..n {
                    g[i * n + j] += c * dl * vi * parts.eig.vector(j, col);
                }
            }
        }
        Ok(vec![Tensor::from_parts(vec![n, n], g)])
    }
}

/// Pool patches (when P > 1), renormalize rows and form the jittered Gram
/// kernel. Input B×P×D, output B×B.
pub fn kernel_node(graph: &mut Graph, features: NodeId) -> Result<NodeId> {
    let shape = graph.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("kernel needs B×P×D features, got {shape:?}")));
    }
    let rows = if shape[1] == 1 {
        graph.apply(Reshape::new(&[shape[0], shape[2]]), &[features])?
    } else {
        graph.apply(PoolPatches, &[features])?
    };
    let normed = graph.apply(NormalizeLast, &[rows])?;
    graph.apply(Gram::new(KERNEL_JITTER), &[normed])
}

/// Record the scalar statistic `metric` of B×P×D features.
pub fn diversity_node(graph: &mut Graph, features: NodeId, metric: DiversityMetric, extractor: &ExtractorId) -> Result<NodeId> {
    let shape = graph.value(features).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("diversity needs B×P×D features, got {shape:?}")));
    }
    if shape[0] < 2 {
        return Err(Error::Arity(format!("set diversity needs B ≥ 2, got {}", shape[0])));
    }
    match metric.distance() {
        Some(distance) => {
            let bound = extractor.l2_bound(shape[2]);
            graph.apply(PairwiseMean::new(distance, bound), &[features])
        }
        None => {
            let k = kernel_node(graph, features)?;
            match metric {
                DiversityMetric::Dpp => graph.apply(LogDetIPlus, &[k]),
                _ => graph.apply(VendiOp, &[k]),
            }
        }
    }
}

pub fn pairwise_mean(fs: &FeatureSet, distance: Distance) -> Result<DiversityStat> {
    let bound = fs.extractor().l2_bound(fs.dim());
    let op = PairwiseMean::new(distance, bound);
    let value = op.forward(&[fs.values()])?.item();
    let metric = match distance {
        Distance::Cosine => DiversityMetric::Cosine,
        Distance::L2Normalized => DiversityMetric::L2Normalized,
        Distance::HistL2 => DiversityMetric::HistL2,
    };
    Ok(DiversityStat {
        metric,
        value,
        pairs: Some(op.pair_matrix(fs.values())?),
    })
}

pub fn build_kernel(fs: &FeatureSet) -> Result<SimilarityKernel> {
    let mut g = Graph::new();
    let f = g.constant(fs.values().clone());
    let k = kernel_node(&mut g, f)?;
    Ok(SimilarityKernel {
        k: g.value(k).clone(),
        epsilon_jitter: KERNEL_JITTER,
    })
}

pub fn dpp_score(k: &SimilarityKernel) -> Result<DiversityStat> {
    Ok(DiversityStat {
        metric: DiversityMetric::Dpp,
        value: LogDetIPlus.forward(&[&k.k])?.item(),
        pairs: None,
    })
}

pub fn vendi_score(k: &SimilarityKernel) -> Result<DiversityStat> {
    Ok(DiversityStat {
        metric: DiversityMetric::Vendi,
        value: vendi_parts(&k.k)?.value,
        pairs: None,
    })
}

/// Evaluate any metric directly on a feature set.
pub fn evaluate(fs: &FeatureSet, metric: DiversityMetric) -> Result<DiversityStat> {
    match metric.distance() {
        Some(d) => pairwise_mean(fs, d),
        None => {
            if fs.batch() < 2 {
                return Err(Error::Arity("set diversity needs B ≥ 2".into()));
            }
            let k = build_kernel(fs)?;
            match metric {
                DiversityMetric::Dpp => dpp_score(&k),
                _ => vendi_score(&k),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::grad_check;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn fs(values: Vec<f64>, b: usize, p: usize, d: usize) -> FeatureSet {
        FeatureSet::new(
            Tensor::new(vec![b, p, d], values).unwrap(),
            ExtractorId::External { model: "test".into() },
            false,
        )
        .unwrap()
    }

    fn basis(b: usize, d: usize) -> FeatureSet {
        let mut v = vec![0.0; b * d];
        for i in 0..b {
            v[i * d + i] = 1.0;
        }
        fs(v, b, 1, d)
    }

    #[test]
    fn identical_items_have_zero_pairwise_distance() {
        let row = [0.3, -0.2, 0.9];
        let f = fs(row.iter().cycle().take(12).cloned().collect(), 4, 1, 3);
        for d in [Distance::Cosine, Distance::L2Normalized, Distance::HistL2] {
            assert!(pairwise_mean(&f, d).unwrap().value.abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_pair_has_unit_cosine_distance() {
        let f = fs(vec![0.6, 0.8, -0.6, -0.8], 2, 1, 2);
        assert!((pairwise_mean(&f, Distance::Cosine).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_items_two_patches_brute_force() {
        let v = SeededRng::new(4).gaussian(&[3, 2, 5]);
        let f = fs(v.data().to_vec(), 3, 2, 5);
        let cosd = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (1.0 - dot / (na * nb)) / 2.0
        };
        let s = |i: usize, p: usize| &v.data()[(i * 2 + p) * 5..(i * 2 + p + 1) * 5];
        let mut total = 0.0;
        for p in 0..2 {
            let per_patch = (cosd(s(0, p), s(1, p)) + cosd(s(0, p), s(2, p)) + cosd(s(1, p), s(2, p))) / 3.0;
            total += per_patch / 2.0;
        }
        let got = pairwise_mean(&f, Distance::Cosine).unwrap();
        assert!((got.value - total).abs() < 1e-14);
        let pairs = got.pairs.unwrap();
        assert!(((cosd(s(0, 0), s(2, 0)) + cosd(s(0, 1), s(2, 1))) / 2.0 - pairs.data()[2]).abs() < 1e-14);
    }

    #[test]
    fn pairwise_errors() {
        let single = fs(vec![1.0, 0.0], 1, 1, 2);
        assert!(matches!(pairwise_mean(&single, Distance::Cosine), Err(Error::Arity(_))));
        let zero = fs(vec![0.0, 0.0, 1.0, 0.0], 2, 1, 2);
        assert!(matches!(pairwise_mean(&zero, Distance::Cosine), Err(Error::DegenerateInput(_))));
        assert!(matches!(build_kernel(&zero), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn kernel_of_identical_and_orthogonal_sets() {
        let same = fs([2.0, 0.0, 1.0].iter().cycle().take(12).cloned().collect(), 4, 1, 3);
        let k = build_kernel(&same).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = 1.0 + if i == j { KERNEL_JITTER } else { 0.0 };
                assert!((k.matrix().data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        let k = build_kernel(&basis(4, 6)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 + KERNEL_JITTER } else { 0.0 };
                assert!((k.matrix().data()[i * 4 + j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_kernel_is_psd_with_unit_diagonal() {
        let v = SeededRng::new(12).gaussian(&[4, 1, 16]);
        let k = build_kernel(&fs(v.into_data(), 4, 1, 16)).unwrap();
        for i in 0..4 {
            assert!((k.matrix().data()[i * 5] - (1.0 + KERNEL_JITTER)).abs() < 1e-12);
        }
        let eig = sym_eig(k.matrix()).unwrap();
        assert!(eig.values.data().iter().all(|&l| l >= -1e-9));
        // external kernels go through the same checks
        assert!(SimilarityKernel::new(k.matrix(), KERNEL_JITTER).is_ok());
        let bad = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(SimilarityKernel::new(&bad, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn dpp_extremes() {
        let k = build_kernel(&basis(4, 4)).unwrap();
        let v = dpp_score(&k).unwrap().value;
        assert!((v - 4.0 * (2.0 + KERNEL_JITTER).ln()).abs() < 1e-12);
        assert!((v - 2.7726).abs() < 1e-4);

        let same = fs(vec![1.0; 12], 4, 1, 3);
        let v = dpp_score(&build_kernel(&same).unwrap()).unwrap().value;
        // eigenvalues of I + K: 5 + ε, then 1 + ε three times
        let want = (5.0 + KERNEL_JITTER).ln() + 3.0 * (1.0 + KERNEL_JITTER).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 5f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn vendi_extremes() {
        let k = build_kernel(&basis(4, 4)).unwrap();
        assert!((vendi_score(&k).unwrap().value - 4.0).abs() < 1e-6);

        // spectrum (2, 2, 0, 0) → entropy log 2
        let k2 = Tensor::new(
            vec![4, 4],
            vec![
                1.0, 1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let v = vendi_score(&SimilarityKernel::new(&k2, 0.0).unwrap()).unwrap().value;
        assert!((v - 2.0).abs() < 1e-9, "{v}");

        // identical items: the jittered spectrum is (4 + ε, ε, ε, ε)
        let same = fs(vec![1.0; 12], 4, 1, 3);
        let v = vendi_score(&build_kernel(&same).unwrap()).unwrap().value;
        let e = KERNEL_JITTER;
        let ps = [(4.0 + e) / (4.0 + 4.0 * e), e / (4.0 + 4.0 * e), e / (4.0 + 4.0 * e), e / (4.0 + 4.0 * e)];
        let want = (-ps.iter().map(|p| p * (p + VENDI_DELTA).ln()).sum::<f64>()).exp();
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        assert!(v > 1.0 && v < 1.0 + 2e-5);
    }

    #[test]
    fn zero_kernel_is_degenerate() {
        let k = SimilarityKernel::new(&Tensor::zeros(&[3, 3]), 0.0).unwrap();
        assert!(matches!(vendi_score(&k), Err(Error::DegenerateInput(_))));
    }

    fn grad_check_metric(metric: DiversityMetric, seed: u64, b: usize, p: usize, d: usize) -> f64 {
        let point = SeededRng::new(seed).gaussian(&[b, p, d]);
        let ex = ExtractorId::Lowres;
        grad_check(&|g, z| diversity_node(g, z, metric, &ex), &point, 1e-5)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn diversity_gradients_match_finite_differences() {
        for seed in 0..5 {
            for metric in [
                DiversityMetric::Cosine,
                DiversityMetric::L2Normalized,
                DiversityMetric::HistL2,
                DiversityMetric::Dpp,
                DiversityMetric::Vendi,
            ] {
                let err = grad_check_metric(metric, seed, 4, 2, 8);
                assert!(err < 1e-4, "{metric} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn vendi_gradient_on_degenerate_spectrum_is_finite() {
        // all items identical: exactly degenerate kernel
        let mut g = Graph::new();
        let z = g.param(Tensor::full(&[3, 1, 4], 0.5));
        let v = diversity_node(&mut g, z, DiversityMetric::Vendi, &ExtractorId::Lowres).unwrap();
        let rep = g.backward(v).unwrap();
        assert!(rep.get(z).unwrap().is_finite());
    }

    #[test]
    fn duplicating_a_rare_item_raises_vendi() {
        // {a, b, b, b} → spectrum (1, 3); adding a second a → (2, 3)
        let rows = |n_a: usize| {
            let mut v = Vec::new();
            for _ in 0..n_a {
                v.extend([1.0, 0.0]);
            }
            for _ in 0..3 {
                v.extend([0.0, 1.0]);
            }
            fs(v, n_a + 3, 1, 2)
        };
        let entropy_exp = |ps: &[f64]| (-ps.iter().map(|p| p * p.ln()).sum::<f64>()).exp();
        let one = evaluate(&rows(1), DiversityMetric::Vendi).unwrap().value;
        let two = evaluate(&rows(2), DiversityMetric::Vendi).unwrap().value;
        assert!((one - entropy_exp(&[0.25, 0.75])).abs() < 1e-4);
        assert!((two - entropy_exp(&[0.4, 0.6])).abs() < 1e-4);
        assert!(two > one + 0.2);
    }

    #[test]
    fn duplicating_within_an_orthogonal_set_lowers_vendi() {
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            v[i * 4 + i] = 1.0;
        }
        let before = evaluate(&fs(v.clone(), 4, 1, 4), DiversityMetric::Vendi).unwrap().value;
        v.extend([1.0, 0.0, 0.0, 0.0]);
        let after = evaluate(&fs(v, 5, 1, 4), DiversityMetric::Vendi).unwrap().value;
        assert!(after < before);
    }

    fn permuted(v: &Tensor, perm: &[usize]) -> Tensor {
        let rows: Vec<Tensor> = perm.iter().map(|&i| v.slice_rows(i, i + 1)).collect();
        Tensor::concat(&rows.iter().collect::<Vec<_>>()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn statistics_are_permutation_invariant_and_bounded(seed in 0u64..10_000, b in 2usize..6) {
            let v = SeededRng::new(seed).gaussian(&[b, 2, 5]);
            let mut perm: Vec<usize> = (0..b).collect();
            perm.rotate_left(1);
            perm.swap(0, b - 1);
            let a = fs(v.data().to_vec(), b, 2, 5);
            let pv = fs(permuted(&v, &perm).into_data(), b, 2, 5);
            for metric in [DiversityMetric::Cosine, DiversityMetric::Dpp, DiversityMetric::Vendi] {
                let x = evaluate(&a, metric).unwrap().value;
                let y = evaluate(&pv, metric).unwrap().value;
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0), "{} {} {}", metric, x, y);
                match metric {
                    DiversityMetric::Cosine => prop_assert!((0.0..=1.0).contains(&x)),
                    DiversityMetric::Vendi => prop_assert!(x >= 1.0 - 1e-9 && x <= b as f64 + 1e-9),
                    _ => {
                        let upper = b as f64 * (2.0 + KERNEL_JITTER).ln();
                        prop_assert!(x <= upper + 1e-9 && x >= ((b + 1) as f64).ln() - 1e-9);
                    }
                }
            }
        }

        #[test]
        fn doubling_the_whole_set_keeps_vendi(seed in 0u64..10_000, b in 2usize..6) {
            let v = SeededRng::new(seed).gaussian(&[b, 1, 6]);
            let doubled = Tensor::concat(&[&v, &v]).unwrap();
            let before = evaluate(&fs(v.into_data(), b, 1, 6), DiversityMetric::Vendi).unwrap().value;
            let after = evaluate(&fs(doubled.into_data(), 2 * b, 1, 6), DiversityMetric::Vendi).unwrap().value;
            // only the εI jitter separates the two spectra
            prop_assert!((after - before).abs() < 1e-4, "{} -> {}", before, after);
        }
    }
}
