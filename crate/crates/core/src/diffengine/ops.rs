//! General-purpose differentiable ops. Domain ops (features, kernels, priors,
//! generators) live next to the code they belong to.

use std::sync::Arc;

use super::Op;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn unary<'a>(inputs: &[&'a Tensor], name: &str) -> Result<&'a Tensor> {
    match inputs {
        [x] => Ok(x),
        _ => Err(Error::Arity(format!("{name} takes one input, got {}", inputs.len()))),
    }
}

fn elementwise(x: &Tensor, cot: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(cot.data()).map(|(&a, &c)| f(a, c)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Sum of all elements.
pub struct SumAll;

impl Op for SumAll {
    fn name(&self) -> &str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(unary(inputs, "sum")?.sum()))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::full(inputs[0].shape(), cot.item())])
    }
}

/// Arithmetic mean of all elements.
pub struct MeanAll;

impl Op for MeanAll {
    fn name(&self) -> &str {
        "mean"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = unary(inputs, "mean")?;
        if x.is_empty() {
            return Err(Error::dim("mean of empty tensor"));
        }
        Ok(Tensor::scalar(x.mean()))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let n = inputs[0].len() as f64;
        Ok(vec![Tensor::full(inputs[0].shape(), cot.item() / n)])
    }
}

/// `½‖x‖²`
pub struct HalfSquaredNorm;

impl Op for HalfSquaredNorm {
    fn name(&self) -> &str {
        "half_sq_norm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = unary(inputs, "half_sq_norm")?;
        Ok(Tensor::scalar(0.5 * x.dot(x)))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![inputs[0].scaled(cot.item())])
    }
}

/// Elementwise `scale * x + shift`.
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

impl Affine {
    pub fn new(scale: f64, shift: f64) -> Self {
        Self { scale, shift }
    }
}

impl Op for Affine {
    fn name(&self) -> &str {
        "affine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(unary(inputs, "affine")?.map(|v| self.scale * v + self.shift))
    }

    fn vjp(&self, _inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![cot.scaled(self.scale)])
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic squashing into (0, 1).
pub struct Sigmoid;

impl Op for Sigmoid {
    fn name(&self) -> &str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(unary(inputs, "sigmoid")?.map(sigmoid))
    }

    fn vjp(&self, _inputs: &[&Tensor], out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![elementwise(out, cot, |s, c| c * s * (1.0 - s))])
    }
}

pub struct Tanh;

impl Op for Tanh {
    fn name(&self) -> &str {
        "tanh"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(unary(inputs, "tanh")?.map(f64::tanh))
    }

    fn vjp(&self, _inputs: &[&Tensor], out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![elementwise(out, cot, |t, c| c * (1.0 - t * t))])
    }
}

/// `max(x, 0)` elementwise; the subgradient at exactly 0 is 0.
pub struct Relu;

impl Op for Relu {
    fn name(&self) -> &str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(unary(inputs, "relu")?.map(|v| v.max(0.0)))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![elementwise(inputs[0], cot, |x, c| if x > 0.0 { c } else { 0.0 })])
    }
}

/// `Σ_k w_k x_k` over same-shaped inputs.
pub struct WeightedSum {
    weights: Vec<f64>,
}

impl WeightedSum {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }
}

impl Op for WeightedSum {
    fn name(&self) -> &str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != self.weights.len() || inputs.is_empty() {
            return Err(Error::Arity(format!(
                "weighted_sum has {} weights but {} inputs",
                self.weights.len(),
                inputs.len()
            )));
        }
        let mut acc = Tensor::zeros(inputs[0].shape());
        for (x, &w) in inputs.iter().zip(&self.weights) {
            x.check_same_shape(inputs[0], "weighted_sum")?;
            acc.add_scaled(x, w);
        }
        Ok(acc)
    }

    fn vjp(&self, _inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.weights.iter().map(|&w| cot.scaled(w)).collect())
    }
}

pub struct Reshape {
    shape: Vec<usize>,
}

impl Reshape {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
        }
    }
}

impl Op for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        unary(inputs, "reshape")?.reshape(&self.shape)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![cot.reshape(inputs[0].shape())?])
    }
}

/// Concatenation along the leading axis.
pub struct Concat;

impl Op for Concat {
    fn name(&self) -> &str {
        "concat"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Tensor::concat(inputs)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let mut start = 0;
        Ok(inputs
            .iter()
            .map(|x| {
                let n = x.dim(0);
                let part = cot.slice_rows(start, start + n);
                start += n;
                part
            })
            .collect())
    }
}

/// Row-wise affine map `y_b = W x_b + bias` for a batch of flattened rows.
/// `weight` is `out × in`, the input `B × in` (any trailing shape is
/// flattened), the output `B × out`.
pub struct Dense {
    weight: Arc<Tensor>,
    bias: Option<Arc<Tensor>>,
}

impl Dense {
    pub fn new(weight: Arc<Tensor>, bias: Option<Arc<Tensor>>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::dim("dense weight must be a matrix"));
        }
        if let Some(b) = &bias {
            if b.len() != weight.dim(0) {
                return Err(Error::dim(format!(
                    "dense bias has {} entries for {} outputs",
                    b.len(),
                    weight.dim(0)
                )));
            }
        }
        Ok(Self { weight, bias })
    }
}

impl Op for Dense {
    fn name(&self) -> &str {
        "dense"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = unary(inputs, "dense")?;
        let (outs, ins) = (self.weight.dim(0), self.weight.dim(1));
        if x.ndim() == 0 || x.row_len() != ins {
            return Err(Error::dim(format!(
                "dense expects rows of {ins}, got shape {:?}",
                x.shape()
            )));
        }
        let b = x.dim(0);
        let w = self.weight.data();
        let mut y = vec![0.0; b * outs];
        for (row, yrow) in x.rows().zip(y.chunks_exact_mut(outs)) {
            for (o, yo) in yrow.iter_mut().enumerate() {
                let wr = &w[o * ins..(o + 1) * ins];
                *yo = wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>()
                    + self.bias.as_ref().map_or(0.0, |bias| bias.data()[o]);
            }
        }
        Tensor::new(vec![b, outs], y)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (outs, ins) = (self.weight.dim(0), self.weight.dim(1));
        let w = self.weight.data();
        let mut g = vec![0.0; x.len()];
        for (crow, grow) in cot.data().chunks_exact(outs).zip(g.chunks_exact_mut(ins)) {
            for (o, &c) in crow.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (gi, wi) in grow.iter_mut().zip(&w[o * ins..(o + 1) * ins]) {
                    *gi += c * wi;
                }
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}
