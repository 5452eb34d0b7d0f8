//! Reverse-mode differentiation over coarse operations.
//!
//! Each [`Op`] supplies a forward evaluation and a vector–Jacobian product.
//! A [`Graph`] records applications of ops on tensors; [`Graph::backward`]
//! walks the recorded nodes in reverse topological order and accumulates
//! cotangents into the trainable leaves.

mod check;
pub mod ops;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use check::{grad_check, grad_check_with, GradCheck, GradCheckConfig, GRAD_CHECK_FLOOR};

/// A differentiable operation.
pub trait Op: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Pull `cotangent` (shaped like `output`) back to one cotangent per input.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone)]
enum Origin {
    Leaf { trainable: bool },
    Apply(Arc<dyn Op>),
}

/// A recorded value and how it was produced.
#[derive(Clone)]
pub struct DiffNode {
    value: Tensor,
    parents: Vec<NodeId>,
    origin: Origin,
    tag: String,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.origin, Origin::Leaf { trainable: true })
    }
}

/// Cotangents of every trainable leaf, keyed by node.
#[derive(Clone, Debug, Default)]
pub struct GradientReport {
    grads: BTreeMap<NodeId, Tensor>,
    /// Filled in by gradient checks; `None` for plain backward passes.
    pub max_rel_error: Option<f64>,
}

impl GradientReport {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<DiffNode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: DiffNode) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Optimization variable: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// Value that takes part in the computation but is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(DiffNode {
            value,
            parents: Vec::new(),
            origin: Origin::Leaf { trainable },
            tag: if trainable { "param" } else { "constant" }.to_string(),
        })
    }

    pub fn node(&self, id: NodeId) -> Result<&DiffNode> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::contract(format!("node {id} does not belong to this graph")))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Evaluate `op` on existing nodes and record the result.
    pub fn apply<O: Op + 'static>(&mut self, op: O, inputs: &[NodeId]) -> Result<NodeId> {
        self.apply_shared(Arc::new(op), inputs)
    }

    pub fn apply_shared(&mut self, op: Arc<dyn Op>, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.node(id)?;
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|&id| self.value(id)).collect();
            op.forward(&values)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let tag = op.name().to_string();
        Ok(self.push(DiffNode {
            value,
            parents: inputs.to_vec(),
            origin: Origin::Apply(op),
            tag,
        }))
    }

    /// Reverse topological order of everything reachable from `root`,
    /// failing on cycles.
    fn reverse_topo(&self, root: NodeId) -> Result<Vec<NodeId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Unseen,
            Open,
            Done,
        }
        let mut mark = vec![Mark::Unseen; self.nodes.len()];
        let mut post = Vec::new();
        // explicit stack: (node, next parent index)
        let mut stack = vec![(root, 0usize)];
        mark[root.0] = Mark::Open;
        while let Some(&mut (id, ref mut next)) = stack.last_mut() {
            let parents = &self.nodes[id.0].parents;
            if *next < parents.len() {
                let p = parents[*next];
                *next += 1;
                if p.0 >= self.nodes.len() {
                    return Err(Error::contract(format!("node {id} references unknown parent {p}")));
                }
                match mark[p.0] {
                    Mark::Open => {
                        return Err(Error::contract(format!("cycle detected through node {p}")))
                    }
                    Mark::Unseen => {
                        mark[p.0] = Mark::Open;
                        stack.push((p, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[id.0] = Mark::Done;
                post.push(id);
                stack.pop();
            }
        }
        post.reverse();
        Ok(post)
    }

    pub fn backward(&self, loss: NodeId) -> Result<GradientReport> {
        let loss_node = self.node(loss)?;
        if loss_node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let order = self.reverse_topo(loss)?;

        // which reachable nodes lead to a trainable leaf
        let mut needs = vec![false; self.nodes.len()];
        for &id in order.iter().rev() {
            let node = &self.nodes[id.0];
            needs[id.0] = node.is_trainable() || node.parents.iter().any(|p| needs[p.0]);
        }

        let mut cot: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        cot[loss.0] = Some(Tensor::full(loss_node.value.shape(), 1.0));
        for &id in &order {
            if !needs[id.0] {
                continue;
            }
            let node = &self.nodes[id.0];
            let Origin::Apply(op) = &node.origin else {
                continue;
            };
            let Some(upstream) = cot[id.0].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| self.value(*p)).collect();
            let pulled = op.vjp(&inputs, &node.value, &upstream)?;
            if pulled.len() != inputs.len() {
                return Err(Error::contract(format!(
                    "{} returned {} cotangents for {} inputs",
                    op.name(),
                    pulled.len(),
                    inputs.len()
                )));
            }
            for ((&parent, g), input) in node.parents.iter().zip(pulled).zip(&inputs) {
                if !needs[parent.0] {
                    continue;
                }
                if g.shape() != input.shape() {
                    return Err(Error::contract(format!(
                        "{} produced cotangent {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        input.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("vjp of {}", op.name())));
                }
                match &mut cot[parent.0] {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot => *slot = Some(g),
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_trainable() {
                let g = cot[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.insert(NodeId(i), g);
            }
        }
        Ok(GradientReport {
            grads,
            max_rel_error: None,
        })
    }

    #[cfg(test)]
    pub(crate) fn rewire_for_test(&mut self, node: NodeId, parents: Vec<NodeId>) {
        self.nodes[node.0].parents = parents;
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![0.3, -1.0, 2.0, 5.0]).unwrap());
        let loss = g.apply(SumAll, &[z]).unwrap();
        let report = g.backward(loss).unwrap();
        assert_eq!(report.get(z).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn gradient_of_half_square_norm_is_identity() {
        let mut rng = SeededRng::new(9);
        let zv = rng.gaussian(&[6]);
        let mut g = Graph::new();
        let z = g.param(zv.clone());
        let loss = g.apply(HalfSquaredNorm, &[z]).unwrap();
        let report = g.backward(loss).unwrap();
        assert_eq!(report.get(z).unwrap(), &zv);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(z), Err(Error::Contract(_))));
    }

    #[test]
    fn cycles_are_detected() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[2]));
        let a = g.apply(Affine::new(2.0, 0.0), &[z]).unwrap();
        let loss = g.apply(SumAll, &[a]).unwrap();
        g.rewire_for_test(a, vec![loss]);
        match g.backward(loss) {
            Err(Error::Contract(msg)) => assert!(msg.contains("cycle")),
            other => panic!("expected cycle error, got {other:?}"),
        }
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let w = g.param(Tensor::from_vec(vec![3.0]).unwrap());
        let loss = g.apply(SumAll, &[z]).unwrap();
        let report = g.backward(loss).unwrap();
        assert_eq!(report.get(w).unwrap().data(), &[0.0]);
        assert_eq!(report.len(), 2);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // loss = sum(z) + sum(z) → gradient 2
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![1.0, -1.0]).unwrap());
        let a = g.apply(SumAll, &[z]).unwrap();
        let loss = g.apply(WeightedSum::new(vec![1.0, 1.0]), &[a, a]).unwrap();
        let report = g.backward(loss).unwrap();
        assert_eq!(report.get(z).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_is_linear_and_deterministic() {
        let mut rng = SeededRng::new(21);
        let zv = rng.gaussian(&[5]);
        let (alpha, beta) = (0.7, -1.3);

        let grad_of = |build: &dyn Fn(&mut Graph, NodeId) -> NodeId| {
            let mut g = Graph::new();
            let z = g.param(zv.clone());
            let loss = build(&mut g, z);
            g.backward(loss).unwrap().take(z).unwrap()
        };
        let f = |g: &mut Graph, z: NodeId| g.apply(HalfSquaredNorm, &[z]).unwrap();
        let h = |g: &mut Graph, z: NodeId| {
            let s = g.apply(Sigmoid, &[z]).unwrap();
            g.apply(SumAll, &[s]).unwrap()
        };
        let combo = |g: &mut Graph, z: NodeId| {
            let a = f(g, z);
            let b = h(g, z);
            g.apply(WeightedSum::new(vec![alpha, beta]), &[a, b]).unwrap()
        };
        let gf = grad_of(&f);
        let gh = grad_of(&h);
        let gc = grad_of(&combo);
        for i in 0..5 {
            let expected = alpha * gf.data()[i] + beta * gh.data()[i];
            assert!((gc.data()[i] - expected).abs() < 1e-10);
        }
        let again = grad_of(&combo);
        assert_eq!(
            gc.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
