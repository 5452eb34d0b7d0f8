//! Hinge-penalized batch loss over noise:
//!
//! `L = −w·mean(r) + λ_min·mean([τ_s − r]₊) + λ_div·[τ_D − v_B]₊ + λ_reg·mean(−K(ε))`

use serde::{Deserialize, Serialize};

use crate::diffengine::ops::{Affine, Concat, MeanAll, Relu, WeightedSum};
use crate::diffengine::{Graph, NodeId};
use crate::diversity::{diversity_node, DiversityMetric};
use crate::error::{Error, Result};
use crate::features::{Extractor, ExtractorId, ImageBatch};
use crate::generator::{Generator, Reward, RewardSpec};
use crate::numerics::Tensor;
use crate::regularizer::{reg_term_node, DEFAULT_LAMBDA_REG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    /// Weight of the per-image quality hinge.
    #[serde(default)]
    pub lambda_min: f64,
    pub lambda_div: f64,
    #[serde(default = "default_lambda_reg")]
    pub lambda_reg: f64,
    pub tau_s: f64,
    pub tau_d: f64,
    /// Weight on the mean-reward term.
    #[serde(default = "unit")]
    pub reward_weight: f64,
    pub metric: DiversityMetric,
    #[serde(default)]
    pub reward: RewardSpec,
    pub extractor: ExtractorId,
}

fn default_lambda_reg() -> f64 {
    DEFAULT_LAMBDA_REG
}

fn unit() -> f64 {
    1.0
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_min", self.lambda_min),
            ("lambda_div", self.lambda_div),
            ("lambda_reg", self.lambda_reg),
            ("reward_weight", self.reward_weight),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {w}")));
            }
        }
        for (name, t) in [("tau_s", self.tau_s), ("tau_d", self.tau_d)] {
            if t.is_nan() {
                return Err(Error::Config(format!("{name} is NaN")));
            }
        }
        let hist = matches!(self.extractor, ExtractorId::ColorHist { .. });
        if (self.metric == DiversityMetric::HistL2) != hist {
            return Err(Error::Config(format!(
                "metric {} does not fit extractor {:?}: hist_l2 pairs with color_hist only",
                self.metric, self.extractor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reward_mean: f64,
    pub quality_hinge: f64,
    pub diversity_hinge: f64,
    pub reg_term: f64,
    pub v_b: f64,
    pub min_reward: f64,
    pub reward_weight: f64,
    pub lambda_min: f64,
    pub lambda_div: f64,
    pub lambda_reg: f64,
}

impl LossBreakdown {
    /// The total recomputed from the logged terms.
    pub fn reconstruct(&self) -> f64 {
        -self.reward_weight * self.reward_mean
            + self.lambda_min * self.quality_hinge
            + self.lambda_div * self.diversity_hinge
            + self.lambda_reg * self.reg_term
    }
}

/// `max(u, 0)`.
pub fn hinge(u: f64) -> f64 {
    if u > 0.0 {
        u
    } else {
        0.0
    }
}

/// Closed thresholds: fires iff `min_reward ≥ τ_s` and `v_B ≥ τ_D`.
pub fn stopping(spec: &ObjectiveSpec, breakdown: &LossBreakdown) -> bool {
    breakdown.min_reward >= spec.tau_s && breakdown.v_b >= spec.tau_d
}

/// Everything produced by one loss evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// ∂L/∂z when requested.
    pub grad: Option<Tensor>,
    pub images: ImageBatch,
    pub rewards: Tensor,
    /// Features of the whole set, context rows first.
    pub features: Tensor,
}

/// A validated objective bound to its extractor and reward.
#[derive(Clone, Debug)]
pub struct Objective {
    spec: ObjectiveSpec,
    extractor: Extractor,
    reward: Reward,
}

impl Objective {
    pub fn new(spec: ObjectiveSpec, extractor: Extractor, reward: Reward) -> Result<Self> {
        spec.validate()?;
        if extractor.id() != spec.extractor {
            return Err(Error::Config(format!(
                "objective names extractor {:?} but {:?} was supplied",
                spec.extractor,
                extractor.id()
            )));
        }
        Ok(Self { spec, extractor, reward })
    }

    pub fn spec(&self) -> &ObjectiveSpec {
        &self.spec
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    /// Record the loss graph for noise node `z`. `context` holds frozen
    /// B_ctx×P×D features that join the diversity set without gradients.
    pub fn build(&self, graph: &mut Graph, gen: &Generator, z: NodeId, context: Option<&Tensor>) -> Result<Nodes> {
        let b = graph.value(z).dim(0);
        let set_size = b + context.map_or(0, |c| c.dim(0));
        if set_size < 2 {
            return Err(Error::Arity(format!(
                "the diversity set needs at least 2 members, got {set_size}"
            )));
        }
        let images = gen.build_node(graph, z)?;
        let rewards = self.reward.build_node(graph, images)?;
        let own = self.extractor.build(graph, images)?;
        let features = match context {
            Some(ctx) => {
                let c = graph.constant(ctx.clone());
                graph.apply(Concat, &[c, own])?
            }
            None => own,
        };
        let v_b = diversity_node(graph, features, self.spec.metric, &self.spec.extractor)?;

        let reward_mean = graph.apply(MeanAll, &[rewards])?;
        let shortfall = graph.apply(Affine::new(-1.0, self.spec.tau_s), &[rewards])?;
        let shortfall = graph.apply(Relu, &[shortfall])?;
        let quality_hinge = graph.apply(MeanAll, &[shortfall])?;
        let gap = graph.apply(Affine::new(-1.0, self.spec.tau_d), &[v_b])?;
        let diversity_hinge = graph.apply(Relu, &[gap])?;
        let reg_term = reg_term_node(graph, z)?;
        let total = graph.apply(
            WeightedSum::new(vec![
                -self.spec.reward_weight,
                self.spec.lambda_min,
                self.spec.lambda_div,
                self.spec.lambda_reg,
            ]),
            &[reward_mean, quality_hinge, diversity_hinge, reg_term],
        )?;
        Ok(Nodes {
            total,
            images,
            rewards,
            features,
            v_b,
            reward_mean,
            quality_hinge,
            diversity_hinge,
            reg_term,
        })
    }

    pub fn evaluate(&self, gen: &Generator, z: &Tensor, context: Option<&Tensor>, with_grad: bool) -> Result<Evaluation> {
        let mut graph = Graph::new();
        let zid = graph.param(z.clone());
        let n = self.build(&mut graph, gen, zid, context)?;
        let scalar = |id: NodeId| graph.value(id).item();
        let rewards = graph.value(n.rewards).clone();
        let breakdown = LossBreakdown {
            total: scalar(n.total),
            reward_mean: scalar(n.reward_mean),
            quality_hinge: scalar(n.quality_hinge),
            diversity_hinge: scalar(n.diversity_hinge),
            reg_term: scalar(n.reg_term),
            v_b: scalar(n.v_b),
            min_reward: rewards.data().iter().cloned().fold(f64::INFINITY, f64::min),
            reward_weight: self.spec.reward_weight,
            lambda_min: self.spec.lambda_min,
            lambda_div: self.spec.lambda_div,
            lambda_reg: self.spec.lambda_reg,
        };
        let grad = if with_grad {
            let mut report = graph.backward(n.total)?;
            report.take(zid)
        } else {
            None
        };
        Ok(Evaluation {
            breakdown,
            grad,
            images: ImageBatch::new(graph.value(n.images).clone())?,
            rewards,
            features: graph.value(n.features).clone(),
        })
    }
}

/// Node handles of one recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct Nodes {
    pub total: NodeId,
    pub images: NodeId,
    pub rewards: NodeId,
    pub features: NodeId,
    pub v_b: NodeId,
    pub reward_mean: NodeId,
    pub quality_hinge: NodeId,
    pub diversity_hinge: NodeId,
    pub reg_term: NodeId,
}
