use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Absolute floor in the relative-error denominator, so coordinates whose
/// true derivative is ~0 are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Above this many coordinates only `sampled` random ones are probed.
    pub full_limit: usize,
    pub sampled: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            full_limit: 256,
            sampled: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Tensor,
    /// Central differences at the probed coordinates (NaN elsewhere is never
    /// stored; unprobed entries are 0).
    pub numeric: Tensor,
    pub probed: Vec<usize>,
}

fn evaluate(f: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>, point: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.param(point.clone());
    let loss = f(&mut g, z)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::contract("grad_check needs a scalar function"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(v)
}

/// Compare `backward` against central differences with step `h`.
pub fn grad_check(
    f: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    point: &Tensor,
    h: f64,
) -> Result<GradCheck> {
    grad_check_with(
        f,
        point,
        &GradCheckConfig {
            step: h,
            ..GradCheckConfig::default()
        },
    )
}

pub fn grad_check_with(
    f: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
    point: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<GradCheck> {
    let analytic = {
        let mut g = Graph::new();
        let z = g.param(point.clone());
        let loss = f(&mut g, z)?;
        let mut report = g.backward(loss)?;
        report.take(z).expect("param always reported")
    };
    let d = point.len();
    let probed: Vec<usize> = if d <= cfg.full_limit {
        (0..d).collect()
    } else {
        let mut rng = SeededRng::new(cfg.seed);
        let mut picks: Vec<usize> = (0..cfg.sampled).map(|_| rng.below(d)).collect();
        picks.sort_unstable();
        picks.dedup();
        picks
    };

    let h = cfg.step;
    let mut numeric = Tensor::zeros(point.shape());
    let mut worst = (0.0_f64, 0usize);
    for &i in &probed {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (evaluate(f, &plus)? - evaluate(f, &minus)?) / (2.0 * h);
        numeric.data_mut()[i] = fd;
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        if rel > worst.0 || probed.len() == 1 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
        probed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::ops::{HalfSquaredNorm, SumAll};

    #[test]
    fn half_square_norm_is_exact() {
        let p = SeededRng::new(4).gaussian(&[12]);
        let out = grad_check(&|g, z| g.apply(HalfSquaredNorm, &[z]), &p, 1e-5).unwrap();
        assert!(out.max_rel_error < 1e-8, "{}", out.max_rel_error);
    }

    #[test]
    fn large_inputs_are_sampled() {
        let p = SeededRng::new(4).gaussian(&[1000]);
        let out = grad_check(&|g, z| g.apply(SumAll, &[z]), &p, 1e-5).unwrap();
        assert!(out.probed.len() <= 64 && out.probed.len() > 32);
        assert!(out.max_rel_error < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        use crate::diffengine::Op;
        struct Log;
        impl Op for Log {
            fn name(&self) -> &str {
                "log"
            }
            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
                Ok(Tensor::scalar(inputs[0].data()[0].ln()))
            }
            fn vjp(&self, i: &[&Tensor], _o: &Tensor, c: &Tensor) -> Result<Vec<Tensor>> {
                Ok(vec![Tensor::full(i[0].shape(), c.item() / i[0].data()[0])])
            }
        }
        let p = Tensor::from_vec(vec![0.0]).unwrap();
        assert!(grad_check(&|g, z| g.apply(Log, &[z]), &p, 1e-5).is_err());
    }
}
