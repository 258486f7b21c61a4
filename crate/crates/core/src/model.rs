//! Layer stacks with shared-gate activations, and their parameters.
//!
//! Every hidden layer is a dense or convolutional map followed by the shared
//! activation; the head is a global average pool and a dense map to logits.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{self, drelu, ChannelGate, GateBank, GateCounter, GateMode, GateTensor};
use crate::sharing::{GateSpec, LayerShape};
use crate::tensor::{nchw, Conv2dConfig, Graph, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        units: usize,
    },
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerDef {
    pub kind: LayerKind,
    /// Trailing channels that stay linear (no gate, no affine pair).
    pub linear_channels: usize,
}

/// Flat serialized form of a layer, e.g. `{ type = "conv", channels = 64, stride = 2 }`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "type")]
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default)]
    linear_channels: usize,
}

impl TryFrom<RawLayer> for LayerDef {
    type Error = String;

    fn try_from(r: RawLayer) -> std::result::Result<Self, String> {
        let kind = match r.op.as_str() {
            "dense" => {
                if r.channels.is_some() || r.kernel.is_some() || r.stride.is_some() || r.padding.is_some() {
                    return Err("dense layers take only `units` and `linear_channels`".into());
                }
                LayerKind::Dense {
                    units: r.units.ok_or("dense layer needs `units`")?,
                }
            }
            "conv" => {
                if r.units.is_some() {
                    return Err("conv layers take `channels`, not `units`".into());
                }
                LayerKind::Conv {
                    channels: r.channels.ok_or("conv layer needs `channels`")?,
                    kernel: r.kernel.unwrap_or(3),
                    stride: r.stride.unwrap_or(1),
                    padding: r.padding.unwrap_or(1),
                }
            }
            other => return Err(format!("unknown layer type `{other}` (expected dense or conv)")),
        };
        Ok(LayerDef {
            kind,
            linear_channels: r.linear_channels,
        })
    }
}

impl From<LayerDef> for RawLayer {
    fn from(l: LayerDef) -> Self {
        let blank = RawLayer {
            op: String::new(),
            units: None,
            channels: None,
            kernel: None,
            stride: None,
            padding: None,
            linear_channels: l.linear_channels,
        };
        match l.kind {
            LayerKind::Dense { units } => RawLayer {
                op: "dense".into(),
                units: Some(units),
                ..blank
            },
            LayerKind::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => RawLayer {
                op: "conv".into(),
                channels: Some(channels),
                kernel: Some(kernel),
                stride: Some(stride),
                padding: Some(padding),
                ..blank
            },
        }
    }
}

impl LayerDef {
    pub fn dense(units: usize) -> Self {
        LayerDef {
            kind: LayerKind::Dense { units },
            linear_channels: 0,
        }
    }

    pub fn conv(channels: usize, stride: usize) -> Self {
        LayerDef {
            kind: LayerKind::Conv {
                channels,
                kernel: 3,
                stride,
                padding: 1,
            },
            linear_channels: 0,
        }
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            LayerKind::Dense { units } => units,
            LayerKind::Conv { channels, .. } => channels,
        }
    }

    fn with_channels(&self, c: usize) -> LayerDef {
        let mut out = self.clone();
        match &mut out.kind {
            LayerKind::Dense { units } => *units = c,
            LayerKind::Conv { channels, .. } => *channels = c,
        }
        out
    }
}

/// Input geometry plus the hidden layer stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// `[C, H, W]`; vector inputs use `[D, 1, 1]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerDef>,
    pub classes: usize,
}

impl Architecture {
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        Architecture {
            input: [inputs, 1, 1],
            layers: hidden.iter().map(|&u| LayerDef::dense(u)).collect(),
            classes,
        }
    }

    /// Output geometry of every hidden layer.
    pub fn shapes(&self) -> Result<Vec<LayerShape>> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input geometry {:?} has a zero dimension", self.input)));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Dense { units } => {
                    (c, h, w) = (units, 1, 1);
                }
                LayerKind::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if stride == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(Error::config(format!(
                            "layer {i}: kernel {kernel}, stride {stride}, padding {padding} do not fit a {h}x{w} input"
                        )));
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = channels;
                }
            }
            if c == 0 {
                return Err(Error::config(format!("layer {i} has no channels")));
            }
            if l.linear_channels >= c {
                return Err(Error::config(format!(
                    "layer {i}: {} linear channels leave no gated channel out of {c}",
                    l.linear_channels
                )));
            }
            out.push(LayerShape::new(i, c, h, w));
        }
        if self.classes == 0 {
            return Err(Error::config("classifier needs at least one class"));
        }
        Ok(out)
    }

    /// Same stack with every layer narrowed to the given channel counts.
    pub fn with_channels(&self, channels: &[usize]) -> Architecture {
        Architecture {
            input: self.input,
            layers: self
                .layers
                .iter()
                .zip(channels)
                .map(|(l, &c)| l.with_channels(c))
                .collect(),
            classes: self.classes,
        }
    }
}

/// An architecture with its per-layer sharing configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    pub specs: Vec<GateSpec>,
    #[serde(skip)]
    shapes: Vec<LayerShape>,
}

/// One learnable array with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub velocity: Vec<f64>,
    pub frozen: bool,
}

impl Param {
    fn new(name: String, value: Tensor, frozen: bool) -> Self {
        let n = value.numel();
        Param {
            name,
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            frozen,
        }
    }
}

/// Parameters in a fixed order: per layer `weight, bias, alpha, beta`, then
/// `head.weight, head.bias`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Places every parameter on the graph; frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if p.frozen {
                    g.constant(p.value.clone())
                } else {
                    g.variable(p.value.clone())
                }
            })
            .collect()
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_constant(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// Adds the graph's gradients into each parameter's accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[NodeId]) {
        for (p, &id) in self.params.iter_mut().zip(bound) {
            if let Some(grad) = g.grad(id) {
                p.grad.iter_mut().zip(grad.iter()).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn trainable(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }
}

/// Nodes produced by one forward pass.
pub struct ForwardPass {
    pub logits: NodeId,
    /// Pre-activation of each hidden layer.
    pub pre_activations: Vec<NodeId>,
    /// Activation after the shared gate of each hidden layer.
    pub activations: Vec<NodeId>,
}

const PER_LAYER: usize = 4;

impl Network {
    pub fn new(arch: Architecture, specs: Vec<GateSpec>) -> Result<Self> {
        let shapes = arch.shapes()?;
        if specs.len() != shapes.len() {
            return Err(Error::config(format!(
                "{} gate specs for {} layers",
                specs.len(),
                shapes.len()
            )));
        }
        for (i, (spec, shape)) in specs.iter().zip(&shapes).enumerate() {
            spec.validate()?;
            if spec.layer != i || spec.channels != shape.channels {
                return Err(Error::config(format!(
                    "gate spec {i} describes layer {} with {} channels; layer has {}",
                    spec.layer, spec.channels, shape.channels
                )));
            }
            let lead = &shapes[spec.group];
            if (lead.channels, lead.height, lead.width) != (shape.channels, shape.height, shape.width) {
                return Err(Error::config(format!(
                    "layer {i} shares gates with layer {} but their shapes differ",
                    spec.group
                )));
            }
            let leader = &specs[spec.group];
            if leader.pi != spec.pi {
                return Err(Error::config(format!(
                    "layer {i} must use the channel map of its group leader {}",
                    spec.group
                )));
            }
        }
        Ok(Network { arch, specs, shapes })
    }

    /// Every layer a plain ReLU layer.
    pub fn plain(arch: Architecture) -> Result<Self> {
        let shapes = arch.shapes()?;
        let specs = shapes.iter().map(|s| GateSpec::plain(s.layer, s.channels)).collect();
        Network::new(arch, specs)
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Restores derived fields after deserialization.
    pub fn rebuild(self) -> Result<Self> {
        Network::new(self.arch, self.specs)
    }

    pub fn layers(&self) -> usize {
        self.shapes.len()
    }

    /// Channels of layer `l` that carry a gate (everything but the linear tail).
    pub fn gated_channels(&self, l: usize) -> usize {
        self.shapes[l].channels - self.arch.layers[l].linear_channels
    }

    /// Modes with every gated channel set to `mode`.
    pub fn uniform_modes(&self, mode: GateMode) -> Vec<Vec<GateMode>> {
        self.shapes.iter().map(|s| vec![mode; s.channels]).collect()
    }

    /// Kaiming fan-in weights, zero biases, identity affine pairs.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let mut params = Vec::new();
        let [mut in_c, mut in_h, mut in_w] = self.arch.input;
        for (i, (layer, shape)) in self.arch.layers.iter().zip(&self.shapes).enumerate() {
            let (wshape, fan_in): (Vec<usize>, usize) = match layer.kind {
                LayerKind::Dense { units } => {
                    let fan = in_c * in_h * in_w;
                    (vec![fan, units], fan)
                }
                LayerKind::Conv { channels, kernel, .. } => {
                    (vec![channels, in_c, kernel, kernel], in_c * kernel * kernel)
                }
            };
            params.push(Param::new(format!("layer{i}.weight"), kaiming(rng, wshape, fan_in), false));
            params.push(Param::new(format!("layer{i}.bias"), Tensor::zeros([shape.channels]), false));
            let frozen_affine = !self.specs[i].affine_enabled;
            params.push(Param::new(
                format!("layer{i}.alpha"),
                Tensor::full([shape.channels], 1.0),
                frozen_affine,
            ));
            params.push(Param::new(format!("layer{i}.beta"), Tensor::zeros([shape.channels]), frozen_affine));
            (in_c, in_h, in_w) = (shape.channels, shape.height, shape.width);
        }
        params.push(Param::new(
            "head.weight".into(),
            kaiming(rng, vec![in_c, self.arch.classes], in_c),
            false,
        ));
        params.push(Param::new("head.bias".into(), Tensor::zeros([self.arch.classes]), false));
        ParamStore { params }
    }

    fn channel_gates(&self, l: usize, modes: &[GateMode]) -> Vec<ChannelGate> {
        let gated = self.gated_channels(l);
        modes
            .iter()
            .enumerate()
            .map(|(c, m)| match (c < gated, m) {
                (false, _) => ChannelGate::Linear,
                (true, GateMode::Drelu) => ChannelGate::Drelu,
                (true, GateMode::GeluGate { .. }) => ChannelGate::Gelu,
            })
            .collect()
    }

    fn check_modes(&self, modes: &[Vec<GateMode>]) -> Result<()> {
        if modes.len() != self.layers() {
            return Err(Error::config(format!(
                "{} mode vectors for {} layers",
                modes.len(),
                self.layers()
            )));
        }
        for (l, m) in modes.iter().enumerate() {
            if m.len() != self.shapes[l].channels {
                return Err(Error::config(format!(
                    "layer {l}: {} modes for {} channels",
                    m.len(),
                    self.shapes[l].channels
                )));
            }
        }
        Ok(())
    }

    /// Builds the forward graph. `bound` comes from [`ParamStore::bind`].
    /// Every DReLU evaluation is added to `counter`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        input: NodeId,
        modes: &[Vec<GateMode>],
        counter: &GateCounter,
    ) -> Result<ForwardPass> {
        self.check_modes(modes)?;
        let n = g.value(input).shape()[0];
        let [ic, ih, iw] = self.arch.input;
        let in_numel: usize = g.value(input).shape()[1..].iter().product();
        if in_numel != ic * ih * iw {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match geometry {:?}", g.value(input).shape(), self.arch.input),
            ));
        }
        let mut x = g.reshape(input, vec![n, ic, ih, iw])?;
        let mut banks: Vec<Option<GateBank>> = vec![None; self.layers()];
        let mut pre_activations = Vec::with_capacity(self.layers());
        let mut activations = Vec::with_capacity(self.layers());
        for (l, layer) in self.arch.layers.iter().enumerate() {
            let (w, b, alpha, beta) = (
                bound[l * PER_LAYER],
                bound[l * PER_LAYER + 1],
                bound[l * PER_LAYER + 2],
                bound[l * PER_LAYER + 3],
            );
            let pre = match layer.kind {
                LayerKind::Dense { .. } => {
                    let feat: usize = g.value(x).shape()[1..].iter().product();
                    let flat = g.reshape(x, vec![n, feat])?;
                    let z = g.matmul(flat, w)?;
                    g.add_channel_bias(z, b)?
                }
                LayerKind::Conv { stride, padding, .. } => {
                    let [_, c, h, wd] = nchw(g.value(x).shape()).expect("4-d activation");
                    let x4 = g.reshape(x, vec![n, c, h, wd])?;
                    let z = g.conv2d(x4, w, Conv2dConfig { stride, padding })?;
                    g.add_channel_bias(z, b)?
                }
            };
            let spec = &self.specs[l];
            if spec.is_group_leader() {
                let mut need_drelu = false;
                let mut gamma = None;
                for member in (l..self.layers()).filter(|&m| self.specs[m].group == l) {
                    let gated = self.gated_channels(member);
                    let (_, d, gm) = gates::resolve_modes(&modes[member][..gated])?;
                    need_drelu |= d;
                    if let (Some(a), Some(b)) = (gamma, gm) {
                        if a != b {
                            return Err(Error::config("a gate group mixes GELU sharpness values"));
                        }
                    }
                    gamma = gamma.or(gm);
                }
                banks[l] = Some(gates::gate_bank(g, pre, spec.prototypes, need_drelu, gamma, counter)?);
            }
            let bank = banks[spec.group].expect("leader precedes members");
            let ch = self.channel_gates(l, &modes[l]);
            let out = gates::apply_shared(g, pre, &bank, &spec.pi, alpha, beta, &ch)?;
            pre_activations.push(pre);
            activations.push(out);
            x = out;
        }
        let pooled = g.global_avg_pool(x)?;
        let hw = bound[self.layers() * PER_LAYER];
        let hb = bound[self.layers() * PER_LAYER + 1];
        let z = g.matmul(pooled, hw)?;
        let logits = g.add_channel_bias(z, hb)?;
        Ok(ForwardPass {
            logits,
            pre_activations,
            activations,
        })
    }

    /// Logits of a batch without gradient tracking.
    pub fn logits(
        &self,
        params: &ParamStore,
        inputs: &Tensor,
        modes: &[Vec<GateMode>],
        counter: &GateCounter,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = params.bind_constant(&mut g);
        let x = g.constant(inputs.clone());
        let fp = self.forward(&mut g, &bound, x, modes, counter)?;
        Ok(g.value(fp.logits).clone())
    }

    /// Argmax predictions; ties resolve to the lower class.
    pub fn predict(
        &self,
        params: &ParamStore,
        inputs: &Tensor,
        modes: &[Vec<GateMode>],
    ) -> Result<Vec<usize>> {
        let logits = self.logits(params, inputs, modes, &GateCounter::new())?;
        Ok(argmax_rows(&logits))
    }

    /// Effective binary gate of each gated channel at each position:
    /// `DReLU(pre[φ(l)][n, π(c), h, w])`.
    pub fn record_gates(
        &self,
        params: &ParamStore,
        inputs: &Tensor,
        modes: &[Vec<GateMode>],
        layers: &[usize],
    ) -> Result<Vec<GateTensor>> {
        for &l in layers {
            if l >= self.layers() {
                return Err(Error::Usage(format!(
                    "layer {l} does not exist; valid layers are 0..{}",
                    self.layers()
                )));
            }
            let gated = self.gated_channels(l);
            if modes[l][..gated].iter().any(|m| !m.is_drelu()) {
                return Err(Error::Usage(format!(
                    "layer {l} has GELU gates; gate records would not be binary"
                )));
            }
        }
        let mut g = Graph::new();
        let bound = params.bind_constant(&mut g);
        let x = g.constant(inputs.clone());
        let fp = self.forward(&mut g, &bound, x, modes, &GateCounter::new())?;
        Ok(layers
            .iter()
            .map(|&l| {
                let spec = &self.specs[l];
                let src = g.value(fp.pre_activations[spec.group]);
                let [n, c, h, w] = nchw(src.shape()).expect("activation");
                let gated = self.gated_channels(l);
                let plane = h * w;
                let mut values = Vec::with_capacity(n * gated * plane);
                for ni in 0..n {
                    for ci in 0..gated {
                        let base = (ni * c + spec.pi[ci]) * plane;
                        values.extend(src.data()[base..base + plane].iter().map(|&v| drelu(v) as u8));
                    }
                }
                GateTensor {
                    layer: l,
                    dims: [n, gated, h, w],
                    values,
                }
            })
            .collect())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn kaiming<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches")
}
