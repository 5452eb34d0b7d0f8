//! Frequency analysis of noise trajectories: per-step delta heatmaps, a
//! three-band radial split of those heatmaps, and binned radial power.
//!
//! Band decomposition measures radius from the centre of the shifted
//! spectrum, `r = √((u−u_c)² + (v−v_c)²)` with `u_c = ⌊H/2⌋`. On an
//! unshifted FFT grid that distance equals the magnitude of the signed
//! frequency pair, so it is computed from [`radial_frequency`]; `r_max` is
//! the distance from the centre to the corner, `√(u_c² + v_c²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_init::{max_radial_frequency, radial_frequency};
use crate::numerics::{fft2d_raw, ifft2d_raw, Complex64, Tensor};

/// Guard in the phase-preserving band scaling `√(P_b / (P + ε))`.
pub const POWER_EPS: f64 = 1e-10;

pub const BAND_NAMES: [&str; 3] = ["low", "mid", "high"];

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaHeatmap {
    pub m: Tensor,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandReport {
    /// Low, mid and high maps; they sum to the input map per pixel.
    pub maps: [Tensor; 3],
    /// `Σ_hw |M̃_b|` per band.
    pub energies: [f64; 3],
    /// `[0, r_max/3, 2r_max/3, r_max]`
    pub edges: [f64; 4],
}

impl BandReport {
    pub fn fractions(&self) -> [f64; 3] {
        let total: f64 = self.energies.iter().sum();
        if total == 0.0 {
            return [0.0; 3];
        }
        self.energies.map(|e| e / total)
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::dim(format!("expected H×W or C×H×W, got {s:?}"))),
    }
}

/// `M(h,w) = √(Σ_c (z_t − z_{t−1})²)` for one C×H×W (or H×W) noise.
pub fn delta_heatmap(z_t: &Tensor, z_prev: &Tensor, iteration: usize) -> Result<DeltaHeatmap> {
    z_t.check_same_shape(z_prev, "delta_heatmap")?;
    let (c, h, w) = plane_dims(z_t)?;
    let hw = h * w;
    let mut m = vec![0.0; hw];
    for ch in 0..c {
        let a = &z_t.data()[ch * hw..(ch + 1) * hw];
        let b = &z_prev.data()[ch * hw..(ch + 1) * hw];
        for ((acc, x), y) in m.iter_mut().zip(a).zip(b) {
            *acc += (x - y) * (x - y);
        }
    }
    m.iter_mut().for_each(|v| *v = v.sqrt());
    Ok(DeltaHeatmap {
        m: Tensor::from_parts(vec![h, w], m),
        iteration,
    })
}

/// Band index of every cell of an H×W spectrum.
pub fn band_index(h: usize, w: usize) -> Vec<usize> {
    let r_max = max_radial_frequency(h, w);
    radial_frequency(h, w)
        .data()
        .iter()
        .map(|&r| {
            if r < r_max / 3.0 {
                0
            } else if r < 2.0 * r_max / 3.0 {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Split an H×W map into low, mid and high radial bands while keeping each
/// cell's phase, then rescale so the three maps sum to the input per pixel.
/// Accepts signed maps as well as heatmaps.
pub fn band_decompose(m: &Tensor) -> Result<BandReport> {
    if m.ndim() != 2 {
        return Err(Error::dim(format!("band decomposition needs an H×W map, got {:?}", m.shape())));
    }
    let (h, w) = (m.dim(0), m.dim(1));
    if h < 3 || w < 3 {
        return Err(Error::dim(format!("band decomposition needs H, W ≥ 3, got {h}×{w}")));
    }
    let r_max = max_radial_frequency(h, w);
    let bands = band_index(h, w);
    let spec = fft2d_raw(h, w, m.data());
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(3);
    for b in 0..3 {
        let filtered: Vec<Complex64> = spec
            .iter()
            .zip(&bands)
            .map(|(f, &k)| {
                if k != b {
                    return Complex64::new(0.0, 0.0);
                }
                let p = f.norm_sqr();
                f * (p / (p + POWER_EPS)).sqrt()
            })
            .collect();
        // the mask and the scaling are both even, so the band spectrum stays
        // Hermitian and its inverse is real
        let (spatial, _) = ifft2d_raw(h, w, &filtered);
        raw.push(spatial.iter().map(|v| v.abs()).collect());
    }
    let mut maps: [Vec<f64>; 3] = [vec![0.0; h * w], vec![0.0; h * w], vec![0.0; h * w]];
    for i in 0..h * w {
        let s = raw[0][i] + raw[1][i] + raw[2][i];
        if s > 0.0 {
            for b in 0..3 {
                maps[b][i] = raw[b][i] * m.data()[i] / s;
            }
        }
    }
    let energies = [0, 1, 2].map(|b| maps[b].iter().map(|v| v.abs()).sum());
    let maps = maps.map(|v| Tensor::from_parts(vec![h, w], v));
    Ok(BandReport {
        maps,
        energies,
        edges: [0.0, r_max / 3.0, 2.0 * r_max / 3.0, r_max],
    })
}

/// Per-step band energies of a noise trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BandSeries {
    /// `(low, mid, high)` for steps 1..T.
    pub per_step: Vec<[f64; 3]>,
}

impl BandSeries {
    pub fn cumulative(&self) -> [f64; 3] {
        self.per_step.iter().fold([0.0; 3], |acc, e| [acc[0] + e[0], acc[1] + e[1], acc[2] + e[2]])
    }
}

/// Band energies of one step between two B×C×H×W snapshots, averaged over
/// the batch.
pub fn step_band_energy(prev: &Tensor, next: &Tensor, iteration: usize) -> Result<[f64; 3]> {
    prev.check_same_shape(next, "step_band_energy")?;
    if next.ndim() != 4 {
        return Err(Error::dim(format!("snapshots must be B×C×H×W, got {:?}", next.shape())));
    }
    let (b, c, h, w) = (next.dim(0), next.dim(1), next.dim(2), next.dim(3));
    let mut acc = [0.0; 3];
    for i in 0..b {
        let a = Tensor::from_parts(vec![c, h, w], next.row(i).to_vec());
        let z = Tensor::from_parts(vec![c, h, w], prev.row(i).to_vec());
        let heat = delta_heatmap(&a, &z, iteration)?;
        let rep = band_decompose(&heat.m)?;
        for k in 0..3 {
            acc[k] += rep.energies[k] / b as f64;
        }
    }
    Ok(acc)
}

pub fn bin_energy_series(snapshots: &[Tensor]) -> Result<BandSeries> {
    if snapshots.len() < 2 {
        return Err(Error::Arity(format!("need at least 2 snapshots, got {}", snapshots.len())));
    }
    let per_step = snapshots
        .windows(2)
        .enumerate()
        .map(|(t, pair)| step_band_energy(&pair[0], &pair[1], t + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(BandSeries { per_step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialSpectrum {
    /// `n_bins + 1` equal-width edges over `[0, f_max]`; the last bin is closed.
    pub edges: Vec<f64>,
    /// Mean of `|F|² / (H·W)` over the cells of each bin and all planes.
    pub power: Vec<f64>,
    /// Frequency cells per bin (per plane).
    pub counts: Vec<usize>,
}

impl RadialSpectrum {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }
}

/// Binned mean power of every H×W plane of a B×C×H×W tensor, using the
/// signed-frequency radius of the colored-noise filter.
pub fn radial_power_spectrum(batch: &Tensor, n_bins: usize) -> Result<RadialSpectrum> {
    if n_bins < 2 {
        return Err(Error::Config(format!("radial spectrum needs ≥ 2 bins, got {n_bins}")));
    }
    if batch.ndim() < 2 {
        return Err(Error::dim(format!("expected planes, got {:?}", batch.shape())));
    }
    let (h, w) = (batch.dim(batch.ndim() - 2), batch.dim(batch.ndim() - 1));
    let f_max = max_radial_frequency(h, w);
    if f_max == 0.0 {
        return Err(Error::dim("a 1×1 plane has no radial structure"));
    }
    let bin_of: Vec<usize> = radial_frequency(h, w)
        .data()
        .iter()
        .map(|&f| ((f / f_max * n_bins as f64) as usize).min(n_bins - 1))
        .collect();
    let mut counts = vec![0usize; n_bins];
    for &k in &bin_of {
        counts[k] += 1;
    }
    let mut sums = vec![0.0; n_bins];
    let planes = batch.len() / (h * w);
    for plane in batch.data().chunks_exact(h * w) {
        let spec = fft2d_raw(h, w, plane);
        for (c, &k) in spec.iter().zip(&bin_of) {
            sums[k] += c.norm_sqr() / (h * w) as f64;
        }
    }
    let power = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / (n * planes) as f64 })
        .collect();
    let edges = (0..=n_bins).map(|k| f_max * k as f64 / n_bins as f64).collect();
    Ok(RadialSpectrum { edges, power, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn identical_snapshots_give_zero_map() {
        let z = SeededRng::new(1).gaussian(&[3, 5, 5]);
        assert_eq!(delta_heatmap(&z, &z, 1).unwrap().m.max_abs(), 0.0);
    }

    #[test]
    fn single_channel_heatmap_is_absolute_delta() {
        let a = SeededRng::new(1).gaussian(&[1, 4, 4]);
        let b = SeededRng::new(2).gaussian(&[1, 4, 4]);
        let m = delta_heatmap(&a, &b, 1).unwrap().m;
        for i in 0..16 {
            assert_eq!(m.data()[i], (a.data()[i] - b.data()[i]).abs());
        }
    }

    #[test]
    fn heatmap_matches_per_pixel_loop() {
        let a = SeededRng::new(3).gaussian(&[4, 6, 5]);
        let b = SeededRng::new(4).gaussian(&[4, 6, 5]);
        let m = delta_heatmap(&a, &b, 2).unwrap().m;
        for y in 0..6 {
            for x in 0..5 {
                let mut s = 0.0;
                for c in 0..4 {
                    let i = c * 30 + y * 5 + x;
                    s += (a.data()[i] - b.data()[i]).powi(2);
                }
                assert!((m.data()[y * 5 + x] - s.sqrt()).abs() < 1e-14);
            }
        }
        assert!(delta_heatmap(&a, &b.reshape(&[4, 5, 6]).unwrap(), 0).is_err());
    }

    #[test]
    fn bands_partition_the_spectrum() {
        for (h, w) in [(3, 3), (8, 8), (7, 10), (16, 9)] {
            let idx = band_index(h, w);
            assert_eq!(idx.len(), h * w);
            assert!(idx.iter().all(|&k| k < 3));
            // DC is low; the corner frequency is high
            assert_eq!(idx[0], 0);
            assert_eq!(idx[(h / 2) * w + w / 2], 2);
        }
    }

    #[test]
    fn constant_map_is_all_low() {
        let rep = band_decompose(&Tensor::full(&[8, 8], 0.7)).unwrap();
        assert!((rep.energies[0] - 0.7 * 64.0).abs() < 1e-9);
        assert!(rep.energies[1] < 1e-12 && rep.energies[2] < 1e-12);
    }

    #[test]
    fn nyquist_checkerboard_is_high() {
        let data = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let rep = band_decompose(&Tensor::new(vec![8, 8], data).unwrap()).unwrap();
        assert!(rep.fractions()[2] >= 0.99, "{:?}", rep.fractions());
    }

    #[test]
    fn small_maps_are_rejected() {
        assert!(matches!(band_decompose(&Tensor::zeros(&[2, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn planted_low_frequency_step_is_low() {
        let (h, w) = (16, 16);
        let z0 = SeededRng::new(1).gaussian(&[2, 3, h, w]);
        let mut z1 = z0.clone();
        for (i, v) in z1.data_mut().iter_mut().enumerate() {
            let y = (i / w) % h;
            let x = i % w;
            *v += 0.3 * (2.0 * std::f64::consts::PI * (y + x) as f64 / h as f64).cos() + 0.5;
        }
        let e = bin_energy_series(&[z0.clone(), z1]).unwrap().per_step[0];
        assert!(e[0] / (e[0] + e[1] + e[2]) >= 0.95, "{e:?}");
        let flat = bin_energy_series(&[z0.clone(), z0.clone(), z0]).unwrap();
        assert!(flat.per_step.iter().all(|s| *s == [0.0; 3]));
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut p = Tensor::zeros(&[1, 1, 16, 16]);
        p.data_mut()[0] = 16.0;
        let s = radial_power_spectrum(&p, 6).unwrap();
        for &v in &s.power {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.counts.iter().sum::<usize>(), 256);
    }

    #[test]
    fn white_noise_spectrum_is_flat() {
        let z = SeededRng::new(11).gaussian(&[64, 3, 32, 32]);
        let s = radial_power_spectrum(&z, 8).unwrap();
        let kept: Vec<f64> = s.power.iter().zip(&s.counts).filter(|(_, &n)| n >= 100).map(|(p, _)| *p).collect();
        assert!(kept.len() >= 4);
        let hi = kept.iter().cloned().fold(0.0, f64::max);
        let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 1.1, "{kept:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn bands_sum_to_the_map(seed in 0u64..10_000, h in 3usize..20, w in 3usize..20) {
            let a = SeededRng::new(seed).gaussian(&[2, h, w]);
            let b = SeededRng::new(seed + 1).gaussian(&[2, h, w]);
            let m = delta_heatmap(&a, &b, 1).unwrap().m;
            let rep = band_decompose(&m).unwrap();
            for i in 0..h * w {
                let s = rep.maps[0].data()[i] + rep.maps[1].data()[i] + rep.maps[2].data()[i];
                let want = m.data()[i];
                prop_assert!((s - want).abs() <= 1e-6 * want.abs().max(1e-300));
            }
        }

        #[test]
        fn heatmap_is_symmetric(seed in 0u64..10_000) {
            let a = SeededRng::new(seed).gaussian(&[3, 5, 4]);
            let b = SeededRng::new(seed + 7).gaussian(&[3, 5, 4]);
            prop_assert_eq!(delta_heatmap(&a, &b, 0).unwrap().m, delta_heatmap(&b, &a, 0).unwrap().m);
        }
    }
}
