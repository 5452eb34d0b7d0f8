//! Frozen differentiable generators `x = g(z, c)` and per-image rewards.
//!
//! Built-in toy generators map B×C×H×W noise to B×3×H×W images in [0,1]:
//! a per-pixel linear channel map, a one-hidden-layer MLP over the whole
//! noise vector, and a low-pass "painter" whose output depends only on the
//! lowest third of each noise plane's radial frequencies. Bridge generators
//! forward to an external peer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bridge::{self, SharedClient};
use crate::diffengine::ops::{Dense, Reshape, Sigmoid, Tanh};
use crate::diffengine::{Graph, NodeId, Op};
use crate::error::{Error, Result};
use crate::features::ImageBatch;
use crate::noise_init::{apply_even_filter, max_radial_frequency, radial_frequency, NoiseBatch};
use crate::numerics::{SeededRng, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

/// Map from pre-activations to [0,1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    /// `t = clamp((v + 1)/2, 0, 1)`, then `3t² − 2t³`.
    Smoothstep,
    /// Logistic `1 / (1 + e^{-v})`.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Per-pixel channel map. Without `mix_seed` and with C = 3 the map is
    /// the identity.
    Linear {
        #[serde(default)]
        mix_seed: Option<u64>,
        #[serde(default = "unit_gain")]
        gain: f64,
    },
    Mlp {
        hidden: usize,
        weight_seed: u64,
    },
    LowpassPainter {
        mix_seed: u64,
        #[serde(default = "painter_gain")]
        gain: f64,
    },
    /// Generation by a bridge peer; the client is attached at build time.
    Bridge {
        #[serde(default)]
        model: Option<String>,
    },
}

fn unit_gain() -> f64 {
    1.0
}

fn painter_gain() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    /// Defaults to smoothstep for `linear`, sigmoid otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squash: Option<Squash>,
    /// Prompt conditioning embedding; may be empty.
    #[serde(default)]
    pub condition: Vec<f64>,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            squash: None,
            condition: Vec::new(),
        }
    }

    pub fn with_squash(mut self, squash: Squash) -> Self {
        self.squash = Some(squash);
        self
    }

    pub fn effective_squash(&self) -> Squash {
        match (self.squash, &self.kind) {
            (Some(s), _) => s,
            (None, GeneratorKind::Linear { .. }) => Squash::Smoothstep,
            (None, _) => Squash::Sigmoid,
        }
    }

    pub fn with_condition(mut self, condition: Vec<f64>) -> Self {
        self.condition = condition;
        self
    }
}

pub struct SmoothstepOp;

fn smoothstep(v: f64) -> (f64, f64) {
    let t = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
    (t * t * (3.0 - 2.0 * t), 3.0 * t * (1.0 - t))
}

impl Op for SmoothstepOp {
    fn name(&self) -> &str {
        "smoothstep"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| smoothstep(v).0))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(cot.data())
            .map(|(&v, c)| c * smoothstep(v).1)
            .collect();
        Ok(vec![Tensor::from_parts(inputs[0].shape().to_vec(), g)])
    }
}

/// Per-pixel `y[o] = gain·Σ_c W[o,c]·x[c] + bias[o]` on B×C×H×W.
pub struct ChannelMix {
    weight: Arc<Tensor>,
    bias: Vec<f64>,
}

impl ChannelMix {
    pub fn new(weight: Arc<Tensor>, bias: Vec<f64>) -> Result<Self> {
        if weight.ndim() != 2 || bias.len() != weight.dim(0) {
            return Err(Error::dim(format!(
                "channel mix weight {:?} with {} biases",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }
}

impl Op for ChannelMix {
    fn name(&self) -> &str {
        "channel_mix"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (o, c) = (self.weight.dim(0), self.weight.dim(1));
        if x.ndim() != 4 || x.dim(1) != c {
            return Err(Error::dim(format!("channel mix expects B×{c}×H×W, got {:?}", x.shape())));
        }
        let (b, hw) = (x.dim(0), x.dim(2) * x.dim(3));
        let w = self.weight.data();
        let mut out = vec![0.0; b * o * hw];
        for i in 0..b {
            for oo in 0..o {
                let dst = &mut out[(i * o + oo) * hw..(i * o + oo + 1) * hw];
                dst.iter_mut().for_each(|v| *v = self.bias[oo]);
                for cc in 0..c {
                    let wt = w[oo * c + cc];
                    let src = &x.data()[(i * c + cc) * hw..(i * c + cc + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![b, o, x.dim(2), x.dim(3)], out))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let (o, c) = (self.weight.dim(0), self.weight.dim(1));
        let (b, hw) = (x.dim(0), x.dim(2) * x.dim(3));
        let w = self.weight.data();
        let mut g = vec![0.0; x.len()];
        for i in 0..b {
            for cc in 0..c {
                let dst = &mut g[(i * c + cc) * hw..(i * c + cc + 1) * hw];
                for oo in 0..o {
                    let wt = w[oo * c + cc];
                    let src = &cot.data()[(i * o + oo) * hw..(i * o + oo + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * s;
                    }
                }
            }
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Zero every frequency with signed radial distance ≥ `f_max / 3` in each
/// H×W plane. The mask is even and idempotent, so the op is an orthogonal
/// projection and its own adjoint.
pub struct Lowpass {
    shape_hw: (usize, usize),
    mask: Arc<Vec<f64>>,
}

impl Lowpass {
    pub fn new(h: usize, w: usize) -> Self {
        let cut = max_radial_frequency(h, w) / 3.0;
        let mask = radial_frequency(h, w)
            .data()
            .iter()
            .map(|&f| if f < cut { 1.0 } else { 0.0 })
            .collect();
        Self {
            shape_hw: (h, w),
            mask: Arc::new(mask),
        }
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.shape_hw;
        if x.ndim() < 2 || x.shape()[x.ndim() - 2..] != [h, w] {
            return Err(Error::dim(format!("lowpass built for {h}×{w} planes, got {:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(x.len());
        for plane in x.data().chunks_exact(h * w) {
            out.extend(apply_even_filter(h, w, plane, &self.mask)?);
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }
}

impl Op for Lowpass {
    fn name(&self) -> &str {
        "lowpass"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.apply(inputs[0])
    }

    fn vjp(&self, _inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![self.apply(cot)?])
    }
}

/// Generation through a bridge peer.
pub struct BridgeGenerate {
    client: SharedClient,
    condition: Tensor,
}

impl Op for BridgeGenerate {
    fn name(&self) -> &str {
        "bridge_generate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = bridge::call_tensor(&self.client, "generate", &[("z", inputs[0]), ("c", &self.condition)], &[], "x")?;
        if x.ndim() != 4 || x.dim(0) != inputs[0].dim(0) || x.dim(1) != IMAGE_CHANNELS {
            return Err(crate::BridgeError::Protocol {
                id: None,
                field: "tensors.x.shape".into(),
                message: format!("expected B×3×H×W images, got {:?}", x.shape()),
            }
            .into());
        }
        Ok(x)
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let g = bridge::call_tensor(
            &self.client,
            "vjp_generate",
            &[("z", inputs[0]), ("c", &self.condition), ("x_bar", cot)],
            &[],
            "z_bar",
        )?;
        Ok(vec![g.reshape(inputs[0].shape())?])
    }
}

#[derive(Clone)]
enum Body {
    Linear { mix: Arc<Tensor>, gain: f64 },
    Mlp { w1: Arc<Tensor>, b1: Arc<Tensor>, w2: Arc<Tensor> },
    Painter { lowpass: Arc<Lowpass>, mix: Arc<Tensor>, gain: f64 },
    Bridge { client: SharedClient },
}

/// A generator instantiated for a fixed noise shape C×H×W. Parameters are
/// drawn once at build time and never change.
#[derive(Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    input: [usize; 3],
    body: Body,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("spec", &self.spec)
            .field("input", &self.input)
            .finish()
    }
}

fn seeded_mix(seed: u64, out: usize, inp: usize) -> Tensor {
    SeededRng::new(seed).gaussian(&[out, inp]).scaled(1.0 / (inp as f64).sqrt())
}

impl Generator {
    /// Instantiate a built-in generator for C×H×W noise.
    pub fn build(spec: &GeneratorSpec, channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("generator input dimensions must be positive"));
        }
        let body = match &spec.kind {
            GeneratorKind::Linear { mix_seed, gain } => {
                let mix = match mix_seed {
                    Some(seed) => seeded_mix(*seed, IMAGE_CHANNELS, channels),
                    None if channels == IMAGE_CHANNELS => {
                        let mut eye = Tensor::zeros(&[3, 3]);
                        for i in 0..3 {
                            eye.data_mut()[i * 4] = 1.0;
                        }
                        eye
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "identity linear generator needs 3 noise channels, got {channels}; set mix_seed"
                        )))
                    }
                };
                Body::Linear {
                    mix: Arc::new(mix),
                    gain: *gain,
                }
            }
            GeneratorKind::Mlp { hidden, weight_seed } => {
                if *hidden == 0 {
                    return Err(Error::Config("mlp hidden width must be positive".into()));
                }
                let d = channels * height * width;
                let out = IMAGE_CHANNELS * height * width;
                let rng = SeededRng::new(*weight_seed);
                let w1 = rng.derive(1).gaussian(&[*hidden, d]).scaled(1.0 / (d as f64).sqrt());
                let w2 = rng.derive(2).gaussian(&[out, *hidden]).scaled(2.0 / (*hidden as f64).sqrt());
                let b1 = Tensor::from_parts(vec![*hidden], cycled(&spec.condition, *hidden));
                Body::Mlp {
                    w1: Arc::new(w1),
                    b1: Arc::new(b1),
                    w2: Arc::new(w2),
                }
            }
            GeneratorKind::LowpassPainter { mix_seed, gain } => Body::Painter {
                lowpass: Arc::new(Lowpass::new(height, width)),
                mix: Arc::new(seeded_mix(*mix_seed, IMAGE_CHANNELS, channels)),
                gain: *gain,
            },
            GeneratorKind::Bridge { .. } => {
                return Err(Error::Config("bridge generators are built with Generator::bridge".into()))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            input: [channels, height, width],
            body,
        })
    }

    /// A generator served by a bridge peer. The peer's `capabilities` reply
    /// must advertise a `z` shape matching C×H×W when it advertises one.
    pub fn bridge(spec: &GeneratorSpec, client: SharedClient, channels: usize, height: usize, width: usize) -> Result<Self> {
        let caps = client.lock().unwrap_or_else(|p| p.into_inner()).capabilities()?;
        if let Some(shape) = caps.shape("z") {
            let tail = &shape[shape.len().saturating_sub(3)..];
            if tail != [channels, height, width] {
                return Err(Error::dim(format!(
                    "peer {} expects noise {:?}, run uses {:?}",
                    caps.model_id,
                    shape,
                    [channels, height, width]
                )));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            input: [channels, height, width],
            body: Body::Bridge { client },
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    fn check_input(&self, z: &Tensor) -> Result<usize> {
        if z.ndim() != 4 || z.shape()[1..] != self.input {
            return Err(Error::dim(format!(
                "generator expects B×{}×{}×{} noise, got {:?}",
                self.input[0],
                self.input[1],
                self.input[2],
                z.shape()
            )));
        }
        Ok(z.dim(0))
    }

    fn squash(&self, graph: &mut Graph, v: NodeId) -> Result<NodeId> {
        match self.spec.effective_squash() {
            Squash::Smoothstep => graph.apply(SmoothstepOp, &[v]),
            Squash::Sigmoid => graph.apply(Sigmoid, &[v]),
        }
    }

    /// Record `g(z, c)` on a B×C×H×W noise node; returns a B×3×H×W node.
    pub fn build_node(&self, graph: &mut Graph, z: NodeId) -> Result<NodeId> {
        let b = self.check_input(graph.value(z))?;
        let [_, h, w] = self.input;
        let bias = cycled(&self.spec.condition, IMAGE_CHANNELS);
        match &self.body {
            Body::Linear { mix, gain } => {
                let scaled = Arc::new(mix.scaled(*gain));
                let pre = graph.apply(ChannelMix::new(scaled, bias)?, &[z])?;
                self.squash(graph, pre)
            }
            Body::Mlp { w1, b1, w2 } => {
                let flat = graph.apply(Reshape::new(&[b, self.input.iter().product()]), &[z])?;
                let hid = graph.apply(Dense::new(w1.clone(), Some(b1.clone()))?, &[flat])?;
                let act = graph.apply(Tanh, &[hid])?;
                let out = graph.apply(Dense::new(w2.clone(), None)?, &[act])?;
                let img = graph.apply(Reshape::new(&[b, IMAGE_CHANNELS, h, w]), &[out])?;
                self.squash(graph, img)
            }
            Body::Painter { lowpass, mix, gain } => {
                let low = graph.apply_shared(lowpass.clone(), &[z])?;
                let scaled = Arc::new(mix.scaled(*gain));
                let pre = graph.apply(ChannelMix::new(scaled, bias)?, &[low])?;
                self.squash(graph, pre)
            }
            Body::Bridge { client } => {
                let condition = Tensor::from_parts(vec![self.spec.condition.len()], self.spec.condition.clone());
                graph.apply(
                    BridgeGenerate {
                        client: client.clone(),
                        condition,
                    },
                    &[z],
                )
            }
        }
    }

    pub fn generate(&self, z: &NoiseBatch) -> Result<ImageBatch> {
        self.generate_tensor(z.values())
    }

    pub fn generate_tensor(&self, z: &Tensor) -> Result<ImageBatch> {
        let mut g = Graph::new();
        let id = g.constant(z.clone());
        let x = self.build_node(&mut g, id)?;
        ImageBatch::new(g.value(x).clone())
    }
}

fn cycled(values: &[f64], n: usize) -> Vec<f64> {
    if values.is_empty() {
        vec![0.0; n]
    } else {
        values.iter().cycle().take(n).cloned().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// Constant zero reward.
    #[default]
    None,
    /// `1 − mean((x − t)²) / mean(max(t, 1 − t)²)` against a seeded smooth
    /// template image `t`.
    Template { seed: u64 },
    /// Reward computed by a bridge peer.
    Bridge,
}

impl RewardSpec {
    pub fn from_id(id: &str, seed: u64) -> Result<Self> {
        match id {
            "none" => Ok(RewardSpec::None),
            "template" => Ok(RewardSpec::Template { seed }),
            "bridge" => Ok(RewardSpec::Bridge),
            other => Err(Error::Config(format!("unknown reward `{other}`"))),
        }
    }
}

/// Seeded template image in (0,1): low-pass filtered noise through a sigmoid.
pub fn template_image(seed: u64, height: usize, width: usize) -> Result<Tensor> {
    let raw = SeededRng::new(seed).gaussian(&[IMAGE_CHANNELS, height, width]);
    let low = Lowpass::new(height, width).apply(&raw)?;
    let peak = low.max_abs().max(f64::MIN_POSITIVE);
    Ok(low.map(|v| crate::diffengine::ops::sigmoid(2.0 * v / peak)))
}

/// Template reward on B×3×H×W images → [B].
pub struct TemplateReward {
    template: Arc<Tensor>,
    denom: f64,
}

impl TemplateReward {
    pub fn new(template: Tensor) -> Result<Self> {
        if template.ndim() != 3 || template.dim(0) != IMAGE_CHANNELS {
            return Err(Error::dim(format!("template must be 3×H×W, got {:?}", template.shape())));
        }
        if template.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("template values must lie in [0,1]".into()));
        }
        let denom = template.data().iter().map(|&t| t.max(1.0 - t).powi(2)).sum::<f64>() / template.len() as f64;
        Ok(Self {
            template: Arc::new(template),
            denom,
        })
    }

    pub fn template(&self) -> &Tensor {
        &self.template
    }
}

impl Op for TemplateReward {
    fn name(&self) -> &str {
        "template_reward"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.ndim() != 4 || x.shape()[1..] != *self.template.shape() {
            return Err(Error::dim(format!(
                "reward template {:?} does not match images {:?}",
                self.template.shape(),
                x.shape()
            )));
        }
        let n = self.template.len() as f64;
        let r = x
            .rows()
            .map(|row| {
                let mse = row.iter().zip(self.template.data()).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / n;
                1.0 - mse / self.denom
            })
            .collect();
        Ok(Tensor::from_parts(vec![x.dim(0)], r))
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let x = inputs[0];
        let n = self.template.len() as f64;
        let mut g = Vec::with_capacity(x.len());
        for (row, c) in x.rows().zip(cot.data()) {
            let s = -2.0 * c / (n * self.denom);
            g.extend(row.iter().zip(self.template.data()).map(|(a, t)| s * (a - t)));
        }
        Ok(vec![Tensor::from_parts(x.shape().to_vec(), g)])
    }
}

/// Reward computed by a bridge peer (`reward` / `vjp_reward`).
pub struct BridgeReward {
    client: SharedClient,
    condition: Tensor,
}

impl Op for BridgeReward {
    fn name(&self) -> &str {
        "bridge_reward"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let r = bridge::call_tensor(&self.client, "reward", &[("x", inputs[0]), ("c", &self.condition)], &[], "r")?;
        r.reshape(&[inputs[0].dim(0)])
    }

    fn vjp(&self, inputs: &[&Tensor], _out: &Tensor, cot: &Tensor) -> Result<Vec<Tensor>> {
        let g = bridge::call_tensor(
            &self.client,
            "vjp_reward",
            &[("x", inputs[0]), ("c", &self.condition), ("r_bar", cot)],
            &[],
            "x_bar",
        )?;
        Ok(vec![g.reshape(inputs[0].shape())?])
    }
}

/// A configured reward.
#[derive(Clone)]
pub enum Reward {
    None,
    Template(Arc<TemplateReward>),
    Bridge { client: SharedClient, condition: Vec<f64> },
}

impl std::fmt::Debug for Reward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reward::None => f.write_str("Reward::None"),
            Reward::Template(_) => f.write_str("Reward::Template"),
            Reward::Bridge { .. } => f.write_str("Reward::Bridge"),
        }
    }
}

impl Reward {
    pub fn build(spec: &RewardSpec, height: usize, width: usize, client: Option<SharedClient>, condition: &[f64]) -> Result<Self> {
        match spec {
            RewardSpec::None => Ok(Reward::None),
            RewardSpec::Template { seed } => Ok(Reward::Template(Arc::new(TemplateReward::new(template_image(
                *seed, height, width,
            )?)?))),
            RewardSpec::Bridge => match client {
                Some(client) => Ok(Reward::Bridge {
                    client,
                    condition: condition.to_vec(),
                }),
                None => Err(Error::Config("bridge reward needs a bridge connection".into())),
            },
        }
    }

    /// Record per-image rewards on an image node; returns a [B] node.
    pub fn build_node(&self, graph: &mut Graph, images: NodeId) -> Result<NodeId> {
        match self {
            Reward::None => {
                let b = graph.value(images).dim(0);
                Ok(graph.constant(Tensor::zeros(&[b])))
            }
            Reward::Template(op) => graph.apply_shared(op.clone(), &[images]),
            Reward::Bridge { client, condition } => graph.apply(
                BridgeReward {
                    client: client.clone(),
                    condition: Tensor::from_parts(vec![condition.len()], condition.clone()),
                },
                &[images],
            ),
        }
    }

    pub fn evaluate(&self, images: &ImageBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.values().clone());
        let r = self.build_node(&mut g, x)?;
        Ok(g.value(r).clone())
    }
}
