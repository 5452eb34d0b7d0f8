//! Executing a run spec and persisting its artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use noisediv::bridge::{BridgeClient, SharedClient};
use noisediv::diversity;
use noisediv::features::{Extractor, ExtractorId, FeatureSet};
use noisediv::generator::{Generator, GeneratorKind, Reward};
use noisediv::noise_init::{self, NoiseBatch, SpectralProfile};
use noisediv::objective::{LossBreakdown, Objective};
use noisediv::optimizer::{self, Mode, StopReason, TrajectoryRecord};
use noisediv::{SeededRng, Tensor};

use crate::config::{BridgeSpec, RunSpec};
use crate::manifest::ArtifactWriter;
use crate::metrics;
use crate::noise_file::{self, NoiseMeta};

pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.csv";

/// Generator and objective assembled from a spec.
pub struct Components {
    pub generator: Generator,
    pub objective: Objective,
}

fn connect(spec: &BridgeSpec) -> Result<SharedClient> {
    let client = match spec {
        BridgeSpec::Tcp { address, .. } => BridgeClient::connect_tcp(address.as_str(), spec.timeout())?,
        BridgeSpec::Stdio { command, .. } => {
            let (program, args) = command.split_first().ok_or_else(|| anyhow!("bridge.command is empty"))?;
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            BridgeClient::spawn_stdio(program, &args, spec.timeout())?
        }
    };
    Ok(client.into_shared())
}

pub fn build_components(spec: &RunSpec) -> Result<Components> {
    let client = match &spec.bridge {
        Some(b) if spec.needs_bridge() => Some(connect(b).context("bridge")?),
        _ => None,
    };
    let need_client = || client.clone().ok_or_else(|| anyhow!("bridge: no connection configured"));
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let generator = match spec.generator.kind {
        GeneratorKind::Bridge { .. } => Generator::bridge(&spec.generator, need_client()?, c, h, w)?,
        _ => Generator::build(&spec.generator, c, h, w).context("generator")?,
    };
    let extractor = match &spec.objective.extractor {
        ExtractorId::PixelPatches { grid } => Extractor::PixelPatches { grid: *grid },
        ExtractorId::Lowres => Extractor::Lowres,
        ExtractorId::ColorHist { bins } => Extractor::ColorHist {
            bins: *bins,
            bandwidth: None,
        },
        ExtractorId::External { model } => Extractor::External {
            model: model.clone(),
            client: need_client()?,
        },
    };
    let reward = Reward::build(&spec.objective.reward, h, w, client.clone(), &spec.generator.condition).context("reward")?;
    let objective = Objective::new(spec.objective.clone(), extractor, reward).context("objective")?;
    Ok(Components { generator, objective })
}

/// Initial noise of a run.
pub fn initial_noise(spec: &RunSpec) -> Result<NoiseBatch> {
    let profile = SpectralProfile::new(spec.alpha)?;
    let mut rng = SeededRng::new(spec.seed);
    Ok(noise_init::sample(&mut rng, profile, spec.batch, spec.channels, spec.height, spec.width)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub member: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub initial_v_b: f64,
    pub final_v_b: f64,
}

/// Machine-readable outcome of one run; free of wall-clock data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub alpha: f64,
    pub mode: Mode,
    pub batch: usize,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub reverts: usize,
    pub error: Option<String>,
    /// Whole-set objective at the initial and final noise.
    pub initial: LossBreakdown,
    #[serde(rename = "final")]
    pub final_: LossBreakdown,
    pub final_monitors: BTreeMap<String, f64>,
    pub cumulative_bands: [f64; 3],
    pub band_fractions: [f64; 3],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberSummary>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub final_noise: Tensor,
}

fn fractions(e: [f64; 3]) -> [f64; 3] {
    let s: f64 = e.iter().sum();
    if s > 0.0 {
        [e[0] / s, e[1] / s, e[2] / s]
    } else {
        [0.0; 3]
    }
}

fn write_noise(art: &mut ArtifactWriter, rel: &str, t: &Tensor, spec: &RunSpec, iteration: usize) -> Result<()> {
    let bytes = noise_file::encode(t, &NoiseMeta::new(t.shape(), spec.seed, spec.alpha, iteration))?;
    art.write(rel, &bytes)?;
    Ok(())
}

fn set_monitors(parts: &Components, spec: &RunSpec, features: &Tensor) -> Result<BTreeMap<String, f64>> {
    let ex = parts.objective.extractor();
    let fs = FeatureSet::new(features.clone(), ex.id(), ex.normalizes())?;
    let mut out = BTreeMap::new();
    for &m in &spec.optimizer.monitors {
        out.insert(m.to_string(), diversity::evaluate(&fs, m)?.value);
    }
    Ok(out)
}

/// Run one concrete spec into `dir`. A mid-run failure still leaves the
/// metrics, noise files, a summary carrying the error, and the manifest.
pub fn execute(spec: &RunSpec, dir: &Path) -> Result<RunOutcome> {
    let mut art = ArtifactWriter::new(dir)?;
    let mut resolved = spec.clone();
    resolved.out = None;
    art.write("config.toml", resolved.to_toml()?.as_bytes())?;
    let result = execute_into(spec, &mut art);
    if let Err(e) = &result {
        let record = serde_json::json!({ "error": format!("{e:#}") });
        art.write("error.json", serde_json::to_string_pretty(&record)?.as_bytes())?;
    }
    art.finish()?;
    let outcome = result?;
    match &outcome.summary.error {
        Some(e) => Err(anyhow!("run in {} aborted: {e}", dir.display())),
        None => Ok(outcome),
    }
}

fn execute_into(spec: &RunSpec, art: &mut ArtifactWriter) -> Result<RunOutcome> {
    spec.validate()?;
    let parts = build_components(spec)?;
    let z0 = initial_noise(spec)?;
    write_noise(art, "noise/initial.dnz", z0.values(), spec, 0)?;

    let monitor_names: Vec<String> = spec.optimizer.monitors.iter().map(|m| m.to_string()).collect();
    let (z, records): (NoiseBatch, Vec<TrajectoryRecord>) = match spec.mode() {
        Mode::Batch => {
            let (z, t) = optimizer::optimize_batch(&z0, &parts.objective, &spec.optimizer, &parts.generator)?;
            (z, vec![t])
        }
        Mode::Sequential => optimizer::build_sequential(&z0, &parts.objective, &spec.optimizer, &parts.generator)?,
    };
    let sequential = spec.mode() == Mode::Sequential;

    let mut rows = Vec::new();
    let mut step = 0;
    for (k, traj) in records.iter().enumerate() {
        for rec in &traj.iterations {
            step += 1;
            rows.push(metrics::row(rec, step, sequential.then_some(k + 1), &monitor_names));
        }
        for (it, snap) in &traj.snapshots {
            let rel = if sequential {
                format!("noise/m{:02}_snap_{it:05}.dnz", k + 1)
            } else {
                format!("noise/snap_{it:05}.dnz")
            };
            write_noise(art, &rel, snap, spec, *it)?;
        }
    }
    let header = metrics::columns(&monitor_names, sequential);
    metrics::write_table(&art.root().join(METRICS), &header, &rows)?;
    art.adopt(METRICS)?;
    write_noise(art, "noise/final.dnz", z.values(), spec, step)?;

    let error = records.iter().find_map(|t| t.error.clone());
    // an aborted run reports what its trajectories recorded; the generator
    // may no longer be reachable
    let (initial, last, final_monitors) = if error.is_none() {
        let a = parts.objective.evaluate(&parts.generator, z0.values(), None, false)?;
        let b = parts.objective.evaluate(&parts.generator, z.values(), None, false)?;
        let m = set_monitors(&parts, spec, &b.features)?;
        (a.breakdown, b.breakdown, m)
    } else {
        let first = records.first().expect("at least one trajectory");
        let end = records.last().expect("at least one trajectory");
        (first.initial, end.final_breakdown, end.final_monitors.clone())
    };
    let bands: [f64; 3] = records.iter().map(|t| t.band_series().cumulative()).fold([0.0; 3], |a, e| {
        [a[0] + e[0], a[1] + e[1], a[2] + e[2]]
    });
    let stop_reason = if error.is_some() {
        StopReason::Aborted
    } else if records.iter().all(|t| t.stop_reason == StopReason::Criterion) {
        StopReason::Criterion
    } else {
        StopReason::Budget
    };
    let members = if sequential {
        records
            .iter()
            .enumerate()
            .map(|(k, t)| MemberSummary {
                member: k + 1,
                iterations: t.iterations.len(),
                stop_reason: t.stop_reason,
                initial_v_b: t.initial.v_b,
                final_v_b: t.final_breakdown.v_b,
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary = Summary {
        seed: spec.seed,
        alpha: spec.alpha,
        mode: spec.mode(),
        batch: spec.batch,
        iterations: step,
        stop_reason,
        reverts: records.iter().map(|t| t.reverts).sum(),
        error,
        initial,
        final_: last,
        final_monitors,
        cumulative_bands: bands,
        band_fractions: fractions(bands),
        members,
    };
    art.write(SUMMARY, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(RunOutcome {
        dir: art.root().to_path_buf(),
        summary,
        final_noise: z.into_values(),
    })
}

/// Overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
}

/// Expand the spec (sweep included) and execute every run, `jobs` at a time.
/// Results come back in expansion order.
pub fn run_all(spec: &RunSpec, opts: &RunOptions) -> Result<Vec<(PathBuf, Result<RunOutcome>)>> {
    let mut spec = spec.clone();
    if let Some(seed) = opts.seed {
        spec.seed = seed;
        if let Some(sweep) = &mut spec.sweep {
            sweep.seeds.clear();
        }
    }
    let root = opts
        .out
        .clone()
        .or_else(|| spec.out.clone())
        .ok_or_else(|| anyhow!("no output directory: set `out` in the config or pass --out"))?;
    let runs: Vec<(PathBuf, RunSpec)> = spec
        .expand()
        .into_iter()
        .map(|(name, run)| (name.map_or_else(|| root.clone(), |n| root.join(n)), run))
        .collect();

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunOutcome>>>> = runs.iter().map(|_| Mutex::new(None)).collect();
    let workers = opts.jobs.clamp(1, runs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((dir, run)) = runs.get(i) else { break };
                let res = execute(run, dir);
                *slots[i].lock().unwrap() = Some(res);
            });
        }
    });
    Ok(runs
        .into_iter()
        .zip(slots)
        .map(|((dir, _), slot)| (dir, slot.into_inner().unwrap().expect("every run executes")))
        .collect())
}
