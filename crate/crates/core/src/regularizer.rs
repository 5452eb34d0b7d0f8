//! Radius prior on each noise vector: `K(ε) = (d−1) log‖ε‖ − ½‖ε‖²`.
//! The penalty `−K` is minimized at `‖ε‖ = √(d−1)`.

use serde::{Deserialize, Serialize};

use crate::diffengine::ops::MeanAll;
use crate::diffengine::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::noise_init::NoiseBatch;
use crate::numerics::Tensor;

/// Default penalty weight.
pub const DEFAULT_LAMBDA_REG: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusPrior {
    d: usize,
    lambda_reg: f64,
}

impl RadiusPrior {
    pub fn new(d: usize, lambda_reg: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::Config(format!("radius prior needs d ≥ 2, got {d}")));
        }
        if !(lambda_reg >= 0.0) || !lambda_reg.is_finite() {
            return Err(Error::Config(format!("lambda_reg must be finite and ≥ 0, got {lambda_reg}")));
        }
        Ok(Self { d, lambda_reg })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    /// Radius maximizing `K`.
    pub fn mode(&self) -> f64 {
        ((self.d - 1) as f64).sqrt()
    }
}

/// `K(ε)` for one flattened noise vector.
pub fn log_density(eps: &[f64]) -> Result<f64> {
    let d = eps.len();
    if d < 2 {
        return Err(Error::Domain(format!("log density needs d ≥ 2, got {d}")));
    }
    let sq: f64 = eps.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(Error::Domain("log density of the zero vector".into()));
    }
    Ok((d - 1) as f64 * 0.5 * sq.ln() - 0.5 * sq)
}

/// Row-wise `K`: B×... → [B].
pub struct RadiusLogDensity;

impl Op for RadiusLogDensity {
    fn name(&self) -> &str {
        "radius_log_density"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let values = x.rows().map(log_density).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_parts(vec![x.dim(0)], values))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let d = x.row_len();
        let mut g = Vec::with_capacity(x.len());
        for (row, c) in x.rows().zip(cot.data()) {
            // ∇K = ((d−1)/‖ε‖² − 1) ε
            let sq: f64 = row.iter().map(|v| v * v).sum();
            let s = c * ((d - 1) as f64 / sq - 1.0);
            g.extend(row.iter().map(|v| s * v));
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// `mean_i(−K(ε_i))`, unweighted. The objective multiplies by `λ_reg`.
pub fn reg_term_node(graph: &mut Graph, noise: NodeId) -> Result<NodeId> {
    let k = graph.apply(RadiusLogDensity, &[noise])?;
    let m = graph.apply(MeanAll, &[k])?;
    graph.apply(crate::diffengine::ops::Affine::new(-1.0, 0.0), &[m])
}

/// `λ_reg · mean_i(−K(ε_i))`.
pub fn penalty(batch: &NoiseBatch, prior: &RadiusPrior) -> Result<f64> {
    if batch.sample_dim() != prior.d {
        return Err(Error::dim(format!(
            "prior built for d = {} but noise has d = {}",
            prior.d,
            batch.sample_dim()
        )));
    }
    let k = RadiusLogDensity.forward(&[batch.values()])?;
    Ok(prior.lambda_reg * -k.mean())
}
