//! Gradient descent on initial noise with global-norm clipping, optional
//! revert-on-quality-drop, configurable stopping and per-iteration logging.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diversity::{self, DiversityMetric};
use crate::error::{Error, Result};
use crate::features::{FeatureSet, ImageBatch};
use crate::generator::Generator;
use crate::noise_init::NoiseBatch;
use crate::numerics::Tensor;
use crate::objective::{self, Evaluation, LossBreakdown, Objective};
use crate::spectra;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Batch,
    Sequential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    /// `min_reward ≥ τ_s` and `v_B ≥ τ_D`.
    #[default]
    Thresholds,
    /// Run the full iteration budget.
    BudgetOnly,
    /// `v_B ≥ value`.
    DiversityAbove { value: f64 },
    /// `v_B ≥ factor · v_B(z₀)`.
    DiversityFactor { factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub revert_threshold: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub stop: StopRule,
    /// Extra statistics logged each iteration on the objective's features.
    #[serde(default)]
    pub monitors: Vec<DiversityMetric>,
    /// Keep a noise snapshot every k iterations (plus the first and last).
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

fn default_lr() -> f64 {
    10.0
}

fn default_clip() -> f64 {
    0.1
}

fn default_iters() -> usize {
    100
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            clip_norm: default_clip(),
            max_iters: default_iters(),
            revert_threshold: None,
            seed: 0,
            mode: Mode::Batch,
            stop: StopRule::Thresholds,
            monitors: Vec::new(),
            snapshot_every: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

/// Global-norm clipping: returns the rescaled gradient and its pre-clip norm.
pub fn clip_global(grad: &Tensor, clip_norm: f64) -> (Tensor, f64) {
    let n = grad.norm();
    if n > clip_norm {
        (grad.scaled(clip_norm / n), n)
    } else {
        (grad.clone(), n)
    }
}

/// Checkpoint/restore rule: a latent whose quality falls below the
/// threshold is replaced by the last accepted one.
#[derive(Clone, Debug)]
pub struct RevertGuard {
    threshold: Option<f64>,
    checkpoint: Option<Tensor>,
    reverts: usize,
}

impl RevertGuard {
    pub fn new(threshold: Option<f64>) -> Self {
        Self {
            threshold,
            checkpoint: None,
            reverts: 0,
        }
    }

    pub fn with_checkpoint(mut self, latent: Tensor) -> Self {
        self.checkpoint = Some(latent);
        self
    }

    pub fn reverts(&self) -> usize {
        self.reverts
    }

    /// Returns the latent to continue from and whether a revert happened.
    pub fn step(&mut self, current: Tensor, quality: f64) -> (Tensor, bool) {
        let Some(threshold) = self.threshold else {
            return (current, false);
        };
        if quality < threshold {
            if let Some(prev) = &self.checkpoint {
                self.reverts += 1;
                return (prev.clone(), true);
            }
            return (current, false);
        }
        self.checkpoint = Some(current.clone());
        (current, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Loss at the iterate the step was taken from.
    pub breakdown: LossBreakdown,
    pub monitors: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// `‖z_t − z_0‖` after the step.
    pub delta_l2: f64,
    /// Low/mid/high energy of this step's delta heatmaps.
    pub bands: Option<[f64; 3]>,
    pub reverted: bool,
    /// `‖z_t − z_0‖² − ‖z_{t−1} − z_0‖²` from the applied displacements.
    pub telescoping: f64,
    /// Seconds since the run started, at the end of this step.
    #[serde(default)]
    pub wall_time: WallTime,
}

/// Elapsed seconds. Never affects equality, so records of repeated runs
/// compare equal.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WallTime(pub f64);

impl PartialEq for WallTime {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Criterion,
    Budget,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iterations: Vec<IterationRecord>,
    pub initial: LossBreakdown,
    /// Loss at the returned noise.
    pub final_breakdown: LossBreakdown,
    pub final_monitors: BTreeMap<String, f64>,
    pub stop_reason: StopReason,
    pub reverts: usize,
    pub error: Option<String>,
    /// `(iteration, noise)`; iteration 0 is the initial noise.
    #[serde(skip)]
    pub snapshots: Vec<(usize, Tensor)>,
}

impl TrajectoryRecord {
    pub fn band_series(&self) -> spectra::BandSeries {
        spectra::BandSeries {
            per_step: self.iterations.iter().filter_map(|r| r.bands).collect(),
        }
    }
}

struct Runner<'a> {
    objective: &'a Objective,
    gen: &'a Generator,
    cfg: &'a OptimizerConfig,
    context: Option<&'a Tensor>,
}

impl Runner<'_> {
    fn eval(&self, z: &Tensor, with_grad: bool) -> Result<Evaluation> {
        self.objective.evaluate(self.gen, z, self.context, with_grad)
    }

    fn monitors(&self, ev: &Evaluation) -> Result<BTreeMap<String, f64>> {
        let ex = self.objective.extractor();
        let fs = FeatureSet::new(ev.features.clone(), ex.id(), ex.normalizes())?;
        let mut out = BTreeMap::new();
        for &m in &self.cfg.monitors {
            out.insert(m.to_string(), diversity::evaluate(&fs, m)?.value);
        }
        Ok(out)
    }

    fn should_stop(&self, b: &LossBreakdown, v_init: f64) -> bool {
        match self.cfg.stop {
            StopRule::Thresholds => objective::stopping(self.objective.spec(), b),
            StopRule::BudgetOnly => false,
            StopRule::DiversityAbove { value } => b.v_b >= value,
            StopRule::DiversityFactor { factor } => b.v_b >= factor * v_init,
        }
    }

    fn run(&self, z0: &Tensor) -> Result<(Tensor, TrajectoryRecord)> {
        self.cfg.validate()?;
        if !z0.is_finite() {
            return Err(Error::NonFinite("initial noise".into()));
        }
        let bands_ok = z0.ndim() == 4 && z0.dim(2) >= 3 && z0.dim(3) >= 3;
        let snap = |t: usize| self.cfg.snapshot_every.is_some_and(|k| t % k == 0);

        let started = Instant::now();
        let first = self.eval(z0, true)?;
        let v_init = first.breakdown.v_b;
        let mut traj = TrajectoryRecord {
            iterations: Vec::new(),
            initial: first.breakdown,
            final_breakdown: first.breakdown,
            final_monitors: self.monitors(&first)?,
            stop_reason: StopReason::Budget,
            reverts: 0,
            error: None,
            snapshots: Vec::new(),
        };
        if self.cfg.snapshot_every.is_some() {
            traj.snapshots.push((0, z0.clone()));
        }
        let mut guard = RevertGuard::new(self.cfg.revert_threshold).with_checkpoint(z0.clone());
        let mut z = z0.clone();
        let mut ev = first;

        for t in 1..=self.cfg.max_iters {
            if self.should_stop(&ev.breakdown, v_init) {
                traj.stop_reason = StopReason::Criterion;
                break;
            }
            let Some(grad) = ev.grad.take() else {
                return Err(Error::contract("evaluation returned no gradient"));
            };
            let (clipped, grad_norm) = clip_global(&grad, self.cfg.clip_norm);
            let step = clipped.scaled(-self.cfg.learning_rate);
            let offset = z.sub(z0)?;
            let mut telescoping = 2.0 * offset.dot(&step) + step.dot(&step);
            let mut next = z.clone();
            next.add_scaled(&step, 1.0);

            let mut next_ev = match self.eval(&next, true) {
                Ok(e) => e,
                Err(e) => {
                    traj.stop_reason = StopReason::Aborted;
                    traj.error = Some(format!("iteration {t}: {e}"));
                    break;
                }
            };
            let (kept, reverted) = guard.step(next.clone(), next_ev.breakdown.reward_mean);
            if reverted {
                // the jump back is a displacement too
                let back = kept.sub(&next)?;
                let off = next.sub(z0)?;
                telescoping += 2.0 * off.dot(&back) + back.dot(&back);
                next_ev = self.eval(&kept, true)?;
            }
            let bands = if bands_ok {
                Some(spectra::step_band_energy(&z, &kept, t)?)
            } else {
                None
            };
            traj.iterations.push(IterationRecord {
                iteration: t,
                breakdown: ev.breakdown,
                monitors: self.monitors(&ev)?,
                grad_norm,
                clipped_norm: clipped.norm(),
                delta_l2: kept.sub(z0)?.norm(),
                bands,
                reverted,
                telescoping,
                wall_time: WallTime(started.elapsed().as_secs_f64()),
            });
            z = kept;
            ev = next_ev;
            if snap(t) {
                traj.snapshots.push((t, z.clone()));
            }
        }
        if traj.stop_reason == StopReason::Budget && self.should_stop(&ev.breakdown, v_init) {
            traj.stop_reason = StopReason::Criterion;
        }
        traj.final_breakdown = ev.breakdown;
        traj.final_monitors = self.monitors(&ev)?;
        traj.reverts = guard.reverts();
        if self.cfg.snapshot_every.is_some() && traj.snapshots.last().map(|s| s.0) != Some(traj.iterations.len()) {
            traj.snapshots.push((traj.iterations.len(), z.clone()));
        }
        Ok((z, traj))
    }
}

/// Optimize a whole batch of noises jointly.
pub fn optimize_batch(
    z0: &NoiseBatch,
    objective: &Objective,
    cfg: &OptimizerConfig,
    gen: &Generator,
) -> Result<(NoiseBatch, TrajectoryRecord)> {
    if z0.batch() < 2 {
        return Err(Error::Arity(format!("batch mode needs B ≥ 2, got {}", z0.batch())));
    }
    let runner = Runner {
        objective,
        gen,
        cfg,
        context: None,
    };
    let (z, traj) = runner.run(z0.values())?;
    Ok((z0.with_values(z)?, traj))
}

/// Features of frozen context images, computed once and reused.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatures {
    values: Tensor,
}

impl ContextFeatures {
    pub fn extract(objective: &Objective, context: &ImageBatch) -> Result<Self> {
        if context.batch() == 0 {
            return Err(Error::Arity("sequential mode needs at least one context image".into()));
        }
        Ok(Self {
            values: objective.extractor().extract(context)?.values().clone(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Optimize one new noise so that its image differs from frozen context
/// images. No gradient reaches the context.
pub fn optimize_sequential(
    context: &ContextFeatures,
    z0: &NoiseBatch,
    objective: &Objective,
    cfg: &OptimizerConfig,
    gen: &Generator,
) -> Result<(NoiseBatch, TrajectoryRecord)> {
    if context.is_empty() {
        return Err(Error::Arity("sequential mode needs at least one context image".into()));
    }
    if z0.batch() != 1 {
        return Err(Error::Arity(format!("sequential mode optimizes one noise, got {}", z0.batch())));
    }
    let runner = Runner {
        objective,
        gen,
        cfg,
        context: Some(context.values()),
    };
    let (z, traj) = runner.run(z0.values())?;
    Ok((z0.with_values(z)?, traj))
}

/// Convenience wrapper that extracts context features first.
pub fn optimize_sequential_images(
    context: &ImageBatch,
    z0: &NoiseBatch,
    objective: &Objective,
    cfg: &OptimizerConfig,
    gen: &Generator,
) -> Result<(NoiseBatch, TrajectoryRecord)> {
    let ctx = ContextFeatures::extract(objective, context)?;
    optimize_sequential(&ctx, z0, objective, cfg, gen)
}

/// Grow a set one member at a time: the first noise is kept, every later
/// one is optimized against the images of the members before it.
pub fn build_sequential(
    draws: &NoiseBatch,
    objective: &Objective,
    cfg: &OptimizerConfig,
    gen: &Generator,
) -> Result<(NoiseBatch, Vec<TrajectoryRecord>)> {
    if draws.batch() < 2 {
        return Err(Error::Arity(format!("a sequential build needs at least 2 draws, got {}", draws.batch())));
    }
    let mut set = draws.values().slice_rows(0, 1);
    let mut records = Vec::with_capacity(draws.batch() - 1);
    for k in 1..draws.batch() {
        let images = gen.generate_tensor(&set)?;
        let context = ContextFeatures::extract(objective, &images)?;
        let z0 = NoiseBatch::new(draws.values().slice_rows(k, k + 1), draws.seed(), draws.profile())?;
        let (z, traj) = optimize_sequential(&context, &z0, objective, cfg, gen)?;
        let aborted = traj.stop_reason == StopReason::Aborted;
        set = Tensor::concat(&[&set, z.values()])?;
        records.push(traj);
        if aborted {
            break;
        }
    }
    Ok((draws.with_values(set)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Extractor, ExtractorId};
    use crate::generator::{GeneratorKind, GeneratorSpec, Reward, RewardSpec};
    use crate::noise_init::SpectralProfile;
    use crate::numerics::SeededRng;
    use crate::objective::ObjectiveSpec;
    use proptest::prelude::*;

    fn cosine_objective(lambda_div: f64, lambda_reg: f64) -> Objective {
        let spec = ObjectiveSpec {
            lambda_min: 0.0,
            lambda_div,
            lambda_reg,
            tau_s: -1.0,
            tau_d: 10.0,
            reward_weight: 1.0,
            metric: DiversityMetric::Cosine,
            reward: RewardSpec::None,
            extractor: ExtractorId::PixelPatches { grid: 2 },
        };
        Objective::new(spec, Extractor::PixelPatches { grid: 2 }, Reward::None).unwrap()
    }

    fn linear() -> Generator {
        Generator::build(&GeneratorSpec::new(GeneratorKind::Linear { mix_seed: Some(3), gain: 0.5 }), 2, 6, 6).unwrap()
    }

    fn batch(t: Tensor) -> NoiseBatch {
        NoiseBatch::new(t, 0, SpectralProfile::WHITE).unwrap()
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut g = SeededRng::new(1).gaussian(&[4, 5]);
        g = g.scaled(5.0 / g.norm());
        let (c, n) = clip_global(&g, 0.1);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((c.norm() * 10.0 - 1.0).abs() < 1e-12);
        let small = g.scaled(0.01 / 5.0);
        assert_eq!(clip_global(&small, 0.1).0, small);
    }

    #[test]
    fn revert_guard_rules() {
        let latents: Vec<Tensor> = (0..3).map(|i| Tensor::full(&[2], i as f64)).collect();
        let mut g = RevertGuard::new(Some(0.31));
        let mut out = Vec::new();
        for (z, q) in latents.iter().zip([0.5, 0.5, 0.2]) {
            out.push(g.step(z.clone(), q));
        }
        assert!(!out[0].1 && !out[1].1 && out[2].1);
        assert_eq!(out[2].0, latents[1]);

        let mut id = RevertGuard::new(None);
        assert_eq!(id.step(latents[2].clone(), -9.0), (latents[2].clone(), false));
    }

    proptest! {
        #[test]
        fn revert_count_matches_simulation(qs in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let mut g = RevertGuard::new(Some(0.5)).with_checkpoint(Tensor::scalar(-1.0));
            let mut below = 0;
            for (i, &q) in qs.iter().enumerate() {
                let (kept, reverted) = g.step(Tensor::scalar(i as f64), q);
                prop_assert_eq!(reverted, q < 0.5);
                if q < 0.5 {
                    below += 1;
                } else {
                    prop_assert_eq!(kept.item(), i as f64);
                }
            }
            prop_assert_eq!(g.reverts(), below);
        }
    }

    #[test]
    fn radius_only_descent_reaches_the_mode() {
        let obj = cosine_objective(0.0, 1.0);
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            clip_norm: 1e6,
            max_iters: 600,
            stop: StopRule::BudgetOnly,
            ..OptimizerConfig::default()
        };
        let z0 = batch(SeededRng::new(2).gaussian(&[4, 2, 6, 6]).scaled(1.7));
        let (z, traj) = optimize_batch(&z0, &obj, &cfg, &linear()).unwrap();
        let mode = 71f64.sqrt();
        for row in z.values().rows() {
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - mode).abs() < 1e-4, "{r}");
        }
        assert_eq!(traj.iterations.len(), 600);
    }

    #[test]
    fn diversity_rises_from_nearly_identical_start() {
        let obj = cosine_objective(1.0, 0.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            max_iters: 50,
            stop: StopRule::BudgetOnly,
            monitors: vec![DiversityMetric::Vendi],
            ..OptimizerConfig::default()
        };
        let base = SeededRng::new(3).gaussian(&[1, 2, 6, 6]);
        let jitter = SeededRng::new(4).gaussian(&[4, 2, 6, 6]).scaled(1e-3);
        let mut z = Tensor::concat(&[&base, &base, &base, &base]).unwrap();
        z.add_scaled(&jitter, 1.0);
        let (_, traj) = optimize_batch(&batch(z), &obj, &cfg, &linear()).unwrap();
        let v: Vec<f64> = traj.iterations.iter().map(|r| r.breakdown.v_b).collect();
        for w in v.windows(2) {
            assert!(w[1] > w[0] - 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert!(traj.final_breakdown.v_b > v[0]);
        assert!(v[49] > v[0]);
        assert!(traj.iterations[0].monitors.contains_key("vendi"));
    }

    #[test]
    fn every_step_respects_clip_and_bookkeeping() {
        let obj = cosine_objective(1.0, 0.01);
        let cfg = OptimizerConfig {
            max_iters: 30,
            stop: StopRule::BudgetOnly,
            ..OptimizerConfig::default()
        };
        let z0 = SeededRng::new(5).gaussian(&[3, 2, 6, 6]);
        let (z, traj) = optimize_batch(&batch(z0.clone()), &obj, &cfg, &linear()).unwrap();
        let mut acc = 0.0;
        for r in &traj.iterations {
            assert!(r.clipped_norm <= cfg.clip_norm + 1e-12);
            assert!((r.breakdown.total - r.breakdown.reconstruct()).abs() < 1e-10);
            acc += r.telescoping;
        }
        let direct = z.values().sub(&z0).unwrap().norm().powi(2);
        assert!((acc - direct).abs() <= 1e-8 * direct);
        // clipped update norm is lr·clip exactly when the gradient is large
        let first = &traj.iterations[0];
        if first.grad_norm > cfg.clip_norm {
            assert!((first.delta_l2 - cfg.learning_rate * cfg.clip_norm).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let obj = cosine_objective(1.0, 0.01);
        let cfg = OptimizerConfig {
            max_iters: 10,
            ..OptimizerConfig::default()
        };
        let z0 = batch(SeededRng::new(6).gaussian(&[3, 2, 6, 6]));
        let a = optimize_batch(&z0, &obj, &cfg, &linear()).unwrap();
        let b = optimize_batch(&z0, &obj, &cfg, &linear()).unwrap();
        assert_eq!(a.0.values().data(), b.0.values().data());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn threshold_stop_leaves_criterion_satisfied() {
        let mut obj = cosine_objective(1.0, 0.0);
        let mut spec = obj.spec().clone();
        spec.tau_d = 0.05;
        obj = Objective::new(spec, Extractor::PixelPatches { grid: 2 }, Reward::None).unwrap();
        let cfg = OptimizerConfig {
            max_iters: 200,
            ..OptimizerConfig::default()
        };
        let base = SeededRng::new(8).gaussian(&[1, 2, 6, 6]);
        let mut z = Tensor::concat(&[&base, &base]).unwrap();
        z.add_scaled(&SeededRng::new(9).gaussian(&[2, 2, 6, 6]), 0.2);
        let (_, traj) = optimize_batch(&batch(z), &obj, &cfg, &linear()).unwrap();
        assert!(traj.initial.v_b < 0.05 && !traj.iterations.is_empty());
        assert_eq!(traj.stop_reason, StopReason::Criterion);
        assert!(traj.iterations.len() < 200);
        assert!(objective::stopping(obj.spec(), &traj.final_breakdown));
    }

    #[test]
    fn revert_is_recorded_in_the_loop() {
        let spec = ObjectiveSpec {
            lambda_min: 0.0,
            lambda_div: 1.0,
            lambda_reg: 0.0,
            tau_s: -1.0,
            tau_d: 10.0,
            reward_weight: 0.0,
            metric: DiversityMetric::Cosine,
            reward: RewardSpec::Template { seed: 1 },
            extractor: ExtractorId::PixelPatches { grid: 2 },
        };
        let reward = Reward::build(&spec.reward, 6, 6, None, &[]).unwrap();
        let obj = Objective::new(spec, Extractor::PixelPatches { grid: 2 }, reward).unwrap();
        let z0 = batch(SeededRng::new(10).gaussian(&[3, 2, 6, 6]));
        let start = obj.evaluate(&linear(), z0.values(), None, false).unwrap().breakdown.reward_mean;
        let cfg = OptimizerConfig {
            learning_rate: 5.0,
            max_iters: 20,
            stop: StopRule::BudgetOnly,
            // any drop in reward below the start is undone
            revert_threshold: Some(start),
            ..OptimizerConfig::default()
        };
        let (_, traj) = optimize_batch(&z0, &obj, &cfg, &linear()).unwrap();
        let flagged = traj.iterations.iter().filter(|r| r.reverted).count();
        assert_eq!(flagged, traj.reverts);
        for r in &traj.iterations[1..] {
            assert!(r.breakdown.reward_mean >= start);
        }
    }

    #[test]
    fn sequential_mode_uses_frozen_context() {
        let obj = cosine_objective(1.0, 0.0);
        let gen = linear();
        let z_ctx = SeededRng::new(11).gaussian(&[1, 2, 6, 6]);
        let ctx_img = gen.generate_tensor(&z_ctx).unwrap();
        // start from the context noise itself: v_B starts at 0
        let z0 = batch(z_ctx.clone());
        let cfg = OptimizerConfig {
            learning_rate: 0.5,
            max_iters: 20,
            stop: StopRule::BudgetOnly,
            monitors: vec![DiversityMetric::Vendi],
            ..OptimizerConfig::default()
        };
        let mut jittered = z0.values().clone();
        jittered.add_scaled(&SeededRng::new(12).gaussian(&[1, 2, 6, 6]), 1e-4);
        let z0 = z0.with_values(jittered).unwrap();
        let ctx = ContextFeatures::extract(&obj, &ctx_img).unwrap();
        let (_, a) = optimize_sequential(&ctx, &z0, &obj, &cfg, &gen).unwrap();
        assert!(a.initial.v_b < 1e-6);
        assert!(a.final_monitors["vendi"] > a.iterations[0].monitors["vendi"]);
        let (_, b) = optimize_sequential_images(&ctx_img, &z0, &obj, &cfg, &gen).unwrap();
        assert_eq!(a, b);
        let empty = ImageBatch::new(Tensor::zeros(&[0, 3, 6, 6]));
        assert!(empty.is_err() || ContextFeatures::extract(&obj, &empty.unwrap()).is_err());
    }

    #[test]
    fn sequential_build_keeps_first_draw_and_grows() {
        let obj = cosine_objective(1.0, 0.0);
        let gen = linear();
        let draws = batch(SeededRng::new(5).gaussian(&[4, 2, 6, 6]));
        let cfg = OptimizerConfig {
            learning_rate: 0.5,
            max_iters: 5,
            stop: StopRule::BudgetOnly,
            ..OptimizerConfig::default()
        };
        let (set, records) = build_sequential(&draws, &obj, &cfg, &gen).unwrap();
        assert_eq!(set.batch(), 4);
        assert_eq!(records.len(), 3);
        assert_eq!(set.values().row(0), draws.values().row(0));
        assert_ne!(set.values().row(3), draws.values().row(3));
        let one = batch(SeededRng::new(1).gaussian(&[1, 2, 6, 6]));
        assert!(matches!(build_sequential(&one, &obj, &cfg, &gen), Err(Error::Arity(_))));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let obj = cosine_objective(1.0, 0.0);
        let z0 = batch(SeededRng::new(1).gaussian(&[2, 2, 6, 6]));
        for cfg in [
            OptimizerConfig { learning_rate: 0.0, ..OptimizerConfig::default() },
            OptimizerConfig { clip_norm: -1.0, ..OptimizerConfig::default() },
            OptimizerConfig { max_iters: 0, ..OptimizerConfig::default() },
        ] {
            assert!(matches!(optimize_batch(&z0, &obj, &cfg, &linear()), Err(Error::Config(_))));
        }
        let one = batch(SeededRng::new(1).gaussian(&[1, 2, 6, 6]));
        assert!(matches!(optimize_batch(&one, &obj, &OptimizerConfig::default(), &linear()), Err(Error::Arity(_))));
    }

    #[test]
    fn snapshots_bracket_the_run() {
        let obj = cosine_objective(1.0, 0.0);
        let cfg = OptimizerConfig {
            max_iters: 7,
            stop: StopRule::BudgetOnly,
            snapshot_every: Some(3),
            ..OptimizerConfig::default()
        };
        let z0 = batch(SeededRng::new(1).gaussian(&[2, 2, 6, 6]));
        let (z, traj) = optimize_batch(&z0, &obj, &cfg, &linear()).unwrap();
        let its: Vec<usize> = traj.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(its, vec![0, 3, 6, 7]);
        assert_eq!(&traj.snapshots[3].1, z.values());
        let series = spectra::bin_energy_series(&traj.snapshots.iter().map(|s| s.1.clone()).collect::<Vec<_>>()).unwrap();
        assert_eq!(series.per_step.len(), 3);
        assert_eq!(traj.band_series().per_step.len(), 7);
    }
}
