//! Post-hoc analysis of a run directory: manifest check, band energies
//! between noise snapshots and radial spectra of the initial/final noise.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use noisediv::spectra;
use noisediv::Tensor;

use crate::manifest;
use crate::metrics::write_table;
use crate::noise_file;

pub const ANALYSIS_DIR: &str = "analysis";
pub const SPECTRUM_BINS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBands {
    /// Snapshot file prefix (`""` for batch runs, `m03_` for member 3).
    pub group: String,
    pub steps: usize,
    pub cumulative: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub verified_files: usize,
    pub groups: Vec<GroupBands>,
    pub cumulative_bands: [f64; 3],
    pub band_fractions: [f64; 3],
    /// Low-band cumulative energy strictly exceeds mid and high.
    pub low_dominant: bool,
    pub spectrum_frequency: Vec<f64>,
    pub spectrum_initial: Vec<f64>,
    pub spectrum_final: Vec<f64>,
}

/// Snapshot files grouped by prefix, each sorted by iteration.
fn snapshot_groups(noise_dir: &Path) -> Result<BTreeMap<String, Vec<(usize, Tensor)>>> {
    let mut groups: BTreeMap<String, Vec<(usize, Tensor)>> = BTreeMap::new();
    for entry in std::fs::read_dir(noise_dir).with_context(|| format!("cannot list {}", noise_dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(pos) = name.find("snap_") else { continue };
        if !name.ends_with(".dnz") {
            continue;
        }
        let (meta, t) = noise_file::read(&path)?;
        groups.entry(name[..pos].to_string()).or_default().push((meta.iteration, t));
    }
    for g in groups.values_mut() {
        g.sort_by_key(|(it, _)| *it);
    }
    Ok(groups)
}

pub fn analyze(dir: &Path) -> Result<Analysis> {
    let m = manifest::load(dir)?;
    manifest::verify(dir, &m)?;
    let noise_dir = dir.join("noise");
    let (_, initial) = noise_file::read(&noise_dir.join("initial.dnz"))?;
    let (final_meta, last) = noise_file::read(&noise_dir.join("final.dnz"))?;

    let mut groups = snapshot_groups(&noise_dir)?;
    groups.retain(|_, g| g.len() >= 2);
    if groups.is_empty() && initial.shape() == last.shape() {
        groups.insert(String::new(), vec![(0, initial.clone()), (final_meta.iteration, last.clone())]);
    }

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut total = [0.0; 3];
    for (member, (name, snaps)) in groups.iter().enumerate() {
        let tensors: Vec<Tensor> = snaps.iter().map(|(_, t)| t.clone()).collect();
        let series = spectra::bin_energy_series(&tensors)?;
        for (k, e) in series.per_step.iter().enumerate() {
            let mut row = vec![snaps[k + 1].0.to_string(), member.to_string()];
            row.extend(e.iter().map(|v| format!("{v}")));
            rows.push(row);
        }
        let c = series.cumulative();
        for i in 0..3 {
            total[i] += c[i];
        }
        reports.push(GroupBands {
            group: name.clone(),
            steps: series.per_step.len(),
            cumulative: c,
        });
    }

    let bins = SPECTRUM_BINS.min(initial.dim(initial.ndim() - 1).max(2));
    let s0 = spectra::radial_power_spectrum(&initial, bins)?;
    let s1 = spectra::radial_power_spectrum(&last, bins)?;

    let out = dir.join(ANALYSIS_DIR);
    std::fs::create_dir_all(&out)?;
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    write_table(
        &out.join("bands.csv"),
        &header(&["iteration", "member", "band_low", "band_mid", "band_high"]),
        &rows,
    )?;
    let freq = s0.centers();
    let spec_rows: Vec<Vec<String>> = (0..freq.len())
        .map(|i| vec![format!("{}", freq[i]), format!("{}", s0.power[i]), format!("{}", s1.power[i])])
        .collect();
    write_table(
        &out.join("spectrum.csv"),
        &header(&["frequency", "power_initial", "power_final"]),
        &spec_rows,
    )?;

    let sum: f64 = total.iter().sum();
    let analysis = Analysis {
        verified_files: m.files.len(),
        groups: reports,
        cumulative_bands: total,
        band_fractions: if sum > 0.0 { total.map(|v| v / sum) } else { [0.0; 3] },
        low_dominant: total[0] > total[1] && total[0] > total[2],
        spectrum_frequency: freq,
        spectrum_initial: s0.power,
        spectrum_final: s1.power,
    };
    std::fs::write(out.join("analysis.json"), serde_json::to_string_pretty(&analysis)?)?;
    Ok(analysis)
}
