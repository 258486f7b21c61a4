//! Gate functions and the shared-gate activation.
//!
//! A ReLU is `x · DReLU(x)`. The shared activation replaces the channel's own
//! gate with the gate of a prototype channel at the same spatial position,
//! modulated by a learnable per-channel affine map:
//!
//! ```text
//! out[n, c, h, w] = x[n, c, h, w] · (α[c] · g(src[n, π(c), h, w]) + β[c])
//! ```
//!
//! `g` is either the hard step `DReLU` (zero derivative, so the prototype gets
//! no gradient through the gate) or the smooth proxy `Φ(γ·x)`, whose
//! derivative lets replicate losses reach the prototype.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{nchw, BackwardContext, BackwardRule, Graph, NodeId, Tensor};

/// `1` for `x ≥ 0`, else `0`.
#[inline]
pub fn drelu(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn drelu_tensor(x: &Tensor) -> Tensor {
    x.map(drelu)
}

/// Standard-normal CDF.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard-normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gate function assigned to one channel.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateMode {
    Drelu,
    GeluGate { gamma: f64 },
}

impl GateMode {
    pub fn is_drelu(self) -> bool {
        matches!(self, GateMode::Drelu)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            GateMode::GeluGate { gamma } if !(gamma > 0.0 && gamma.is_finite()) => Err(
                Error::config(format!("GELU gate sharpness must be positive, got {gamma}")),
            ),
            _ => Ok(()),
        }
    }
}

/// How a channel's output is formed from its input at evaluation time.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ChannelGate {
    Drelu,
    Gelu,
    /// Ungated linear neuron; reads no gate and ignores its affine pair.
    Linear,
}

/// Learnable `(α, β)` pairs of one gated layer, indexed by channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineGateParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineGateParams {
    /// `α = 1, β = 0`: plain gating.
    pub fn identity(channels: usize) -> Self {
        AffineGateParams {
            alpha: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }
}

/// Counts DReLU evaluations; shared by reference across a forward pass.
#[derive(Debug, Default)]
pub struct GateCounter(AtomicU64);

impl GateCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Elementwise DReLU as a constant node: gradient never flows back into `x`.
pub fn drelu_node(g: &mut Graph, x: NodeId, counter: Option<&GateCounter>) -> NodeId {
    let out = drelu_tensor(g.value(x));
    if let Some(c) = counter {
        c.add(out.numel() as u64);
    }
    g.constant(out)
}

struct GeluGateRule {
    gamma: f64,
}

impl BackwardRule for GeluGateRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let gamma = self.gamma;
        let (x, gout) = (ctx.input(0).data(), ctx.grad_output());
        if let Some(dx) = ctx.grad_input(0) {
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(gout) {
                *d += gv * gamma * std_normal_pdf(gamma * xv);
            }
        }
    }
}

/// Elementwise `Φ(γ·x)` with derivative `γ·φ(γ·x)`.
pub fn gelu_gate(g: &mut Graph, x: NodeId, gamma: f64) -> Result<NodeId> {
    GateMode::GeluGate { gamma }.validate()?;
    let out = g.value(x).map(|v| std_normal_cdf(gamma * v));
    Ok(g.record(out, vec![x], GeluGateRule { gamma }))
}

/// Gate values of the prototype channels of one source activation.
#[derive(Copy, Clone, Debug)]
pub struct GateBank {
    pub prototypes: usize,
    /// `[N, P, H, W]` DReLU values, a constant.
    pub drelu: Option<NodeId>,
    /// `[N, P, H, W]` values of `Φ(γ·x)`, differentiable.
    pub gelu: Option<NodeId>,
}

struct PrototypeGeluRule {
    gamma: f64,
    dims: [usize; 4],
    prototypes: usize,
}

impl BackwardRule for PrototypeGeluRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let [n, c, h, w] = self.dims;
        let plane = h * w;
        let p = self.prototypes;
        let gamma = self.gamma;
        let (src, gout) = (ctx.input(0).data(), ctx.grad_output());
        if let Some(dsrc) = ctx.grad_input(0) {
            for ni in 0..n {
                for pi in 0..p {
                    let s = (ni * c + pi) * plane;
                    let o = (ni * p + pi) * plane;
                    for k in 0..plane {
                        dsrc[s + k] += gout[o + k] * gamma * std_normal_pdf(gamma * src[s + k]);
                    }
                }
            }
        }
    }
}

/// Evaluates the gates of the first `prototypes` channels of `src`.
///
/// Every DReLU value computed here is added to `counter`.
pub fn gate_bank(
    g: &mut Graph,
    src: NodeId,
    prototypes: usize,
    need_drelu: bool,
    gelu_gamma: Option<f64>,
    counter: &GateCounter,
) -> Result<GateBank> {
    let v = g.value(src);
    let dims = nchw(v.shape()).ok_or_else(|| {
        Error::shape("gate-bank", format!("expected [N,C] or [N,C,H,W], got {:?}", v.shape()))
    })?;
    let [n, c, h, w] = dims;
    if prototypes == 0 || prototypes > c {
        return Err(Error::config(format!(
            "prototype count {prototypes} outside 1..={c}"
        )));
    }
    let plane = h * w;
    let proto_values = |f: &dyn Fn(f64) -> f64| {
        let mut out = Vec::with_capacity(n * prototypes * plane);
        for ni in 0..n {
            let s = ni * c * plane;
            out.extend(v.data()[s..s + prototypes * plane].iter().map(|&x| f(x)));
        }
        out
    };
    let shape = [n, prototypes, h, w];
    let drelu_t = if need_drelu {
        Some(Tensor::new(shape, proto_values(&drelu))?)
    } else {
        None
    };
    let gelu_t = match gelu_gamma {
        Some(gamma) => {
            GateMode::GeluGate { gamma }.validate()?;
            Some((gamma, Tensor::new(shape, proto_values(&|x| std_normal_cdf(gamma * x)))?))
        }
        None => None,
    };
    let drelu = drelu_t.map(|t| {
        counter.add(t.numel() as u64);
        g.constant(t)
    });
    let gelu = gelu_t.map(|(gamma, t)| {
        let rule = PrototypeGeluRule {
            gamma,
            dims,
            prototypes,
        };
        g.record(t, vec![src], rule)
    });
    Ok(GateBank {
        prototypes,
        drelu,
        gelu,
    })
}

/// Checks that `pi` maps every channel onto a prototype and fixes prototypes.
pub fn validate_channel_map(pi: &[usize], channels: usize, prototypes: usize) -> Result<()> {
    if pi.len() != channels {
        return Err(Error::config(format!(
            "channel map has {} entries for {channels} channels",
            pi.len()
        )));
    }
    for (c, &p) in pi.iter().enumerate() {
        if p >= prototypes {
            return Err(Error::config(format!(
                "channel {c} maps to {p}, which is not one of the {prototypes} prototypes"
            )));
        }
        if c < prototypes && p != c {
            return Err(Error::config(format!(
                "prototype channel {c} must map to itself, maps to {p}"
            )));
        }
    }
    Ok(())
}

struct SharedApplyRule {
    dims: [usize; 4],
    prototypes: usize,
    pi: Vec<usize>,
    gates: Vec<ChannelGate>,
    drelu_slot: Option<usize>,
    gelu_slot: Option<usize>,
}

impl SharedApplyRule {
    fn gate_value(&self, ctx: &BackwardContext<'_>, gate: ChannelGate, idx: usize) -> f64 {
        let slot = match gate {
            ChannelGate::Drelu => self.drelu_slot,
            ChannelGate::Gelu => self.gelu_slot,
            ChannelGate::Linear => return 0.0,
        };
        ctx.input(slot.expect("bank present for used mode")).data()[idx]
    }
}

impl BackwardRule for SharedApplyRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let [n, c, h, w] = self.dims;
        let plane = h * w;
        let p = self.prototypes;
        let gout = ctx.grad_output();
        let x = ctx.input(0).data();
        let alpha = ctx.input(1).data();
        let beta = ctx.input(2).data();

        // Gate values per (n, c, k), reused by the parameter and input grads.
        let mut gates = vec![0.0; n * c * plane];
        for ni in 0..n {
            for ci in 0..c {
                let bank_base = (ni * p + self.pi[ci]) * plane;
                let dst = &mut gates[(ni * c + ci) * plane..][..plane];
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = self.gate_value(ctx, self.gates[ci], bank_base + k);
                }
            }
        }

        if let Some(dx) = ctx.grad_input(0) {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for k in 0..plane {
                        let i = base + k;
                        let factor = match self.gates[ci] {
                            ChannelGate::Linear => 1.0,
                            _ => alpha[ci] * gates[i] + beta[ci],
                        };
                        dx[i] += gout[i] * factor;
                    }
                }
            }
        }
        if let Some(da) = ctx.grad_input(1) {
            for ni in 0..n {
                for ci in 0..c {
                    if self.gates[ci] == ChannelGate::Linear {
                        continue;
                    }
                    let base = (ni * c + ci) * plane;
                    da[ci] += (base..base + plane).map(|i| gout[i] * x[i] * gates[i]).sum::<f64>();
                }
            }
        }
        if let Some(db) = ctx.grad_input(2) {
            for ni in 0..n {
                for ci in 0..c {
                    if self.gates[ci] == ChannelGate::Linear {
                        continue;
                    }
                    let base = (ni * c + ci) * plane;
                    db[ci] += (base..base + plane).map(|i| gout[i] * x[i]).sum::<f64>();
                }
            }
        }
        if let Some(slot) = self.gelu_slot {
            if let Some(dgelu) = ctx.grad_input(slot) {
                for ni in 0..n {
                    for ci in 0..c {
                        if self.gates[ci] != ChannelGate::Gelu {
                            continue;
                        }
                        let base = (ni * c + ci) * plane;
                        let bank_base = (ni * p + self.pi[ci]) * plane;
                        for k in 0..plane {
                            dgelu[bank_base + k] += gout[base + k] * x[base + k] * alpha[ci];
                        }
                    }
                }
            }
        }
    }
}

/// Applies precomputed prototype gates to every channel of `x`.
pub fn apply_shared(
    g: &mut Graph,
    x: NodeId,
    bank: &GateBank,
    pi: &[usize],
    alpha: NodeId,
    beta: NodeId,
    gates: &[ChannelGate],
) -> Result<NodeId> {
    let vx = g.value(x);
    let dims = nchw(vx.shape()).ok_or_else(|| {
        Error::shape("shared-relu", format!("expected [N,C] or [N,C,H,W], got {:?}", vx.shape()))
    })?;
    let [n, c, h, w] = dims;
    let plane = h * w;
    validate_channel_map(pi, c, bank.prototypes)?;
    if gates.len() != c {
        return Err(Error::config(format!(
            "{} gate modes given for {c} channels",
            gates.len()
        )));
    }
    for node in [alpha, beta] {
        if g.value(node).shape() != [c] {
            return Err(Error::shape(
                "shared-relu",
                format!("affine parameters {:?} for {c} channels", g.value(node).shape()),
            ));
        }
    }
    let bank_shape = [n, bank.prototypes, h, w];
    for b in [bank.drelu, bank.gelu].into_iter().flatten() {
        if g.value(b).shape() != bank_shape {
            return Err(Error::shape(
                "shared-relu",
                format!(
                    "gate bank {:?} does not match activation {:?}",
                    g.value(b).shape(),
                    vx.shape()
                ),
            ));
        }
    }
    if gates.contains(&ChannelGate::Drelu) && bank.drelu.is_none()
        || gates.contains(&ChannelGate::Gelu) && bank.gelu.is_none()
    {
        return Err(Error::config("gate bank lacks a mode requested by a channel"));
    }

    let mut inputs = vec![x, alpha, beta];
    let mut drelu_slot = None;
    let mut gelu_slot = None;
    if let Some(d) = bank.drelu {
        drelu_slot = Some(inputs.len());
        inputs.push(d);
    }
    if let Some(ge) = bank.gelu {
        gelu_slot = Some(inputs.len());
        inputs.push(ge);
    }

    let xd = vx.data();
    let ad = g.value(alpha).data();
    let bd = g.value(beta).data();
    let dd = bank.drelu.map(|id| g.value(id).data());
    let gd = bank.gelu.map(|id| g.value(id).data());
    let mut out = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let bank_base = (ni * bank.prototypes + pi[ci]) * plane;
            let src = match gates[ci] {
                ChannelGate::Drelu => dd,
                ChannelGate::Gelu => gd,
                ChannelGate::Linear => None,
            };
            for k in 0..plane {
                out[base + k] = match src {
                    Some(bankv) => xd[base + k] * (ad[ci] * bankv[bank_base + k] + bd[ci]),
                    None => xd[base + k],
                };
            }
        }
    }
    let out = Tensor::new(vx.shape().to_vec(), out)?;
    let rule = SharedApplyRule {
        dims,
        prototypes: bank.prototypes,
        pi: pi.to_vec(),
        gates: gates.to_vec(),
        drelu_slot,
        gelu_slot,
    };
    Ok(g.record(out, inputs, rule))
}

/// Resolves per-channel modes into evaluation gates plus the bank requirements.
pub fn resolve_modes(modes: &[GateMode]) -> Result<(Vec<ChannelGate>, bool, Option<f64>)> {
    let mut gamma: Option<f64> = None;
    let mut need_drelu = false;
    let mut gates = Vec::with_capacity(modes.len());
    for m in modes {
        m.validate()?;
        match *m {
            GateMode::Drelu => {
                need_drelu = true;
                gates.push(ChannelGate::Drelu);
            }
            GateMode::GeluGate { gamma: gm } => {
                if let Some(prev) = gamma {
                    if prev != gm {
                        return Err(Error::config(format!(
                            "one gate group mixes GELU sharpness {prev} and {gm}"
                        )));
                    }
                }
                gamma = Some(gm);
                gates.push(ChannelGate::Gelu);
            }
        }
    }
    Ok((gates, need_drelu, gamma))
}

/// Single-layer shared activation: gates come from `x`'s own prototypes.
pub fn shared_relu(
    g: &mut Graph,
    x: NodeId,
    pi: &[usize],
    alpha: NodeId,
    beta: NodeId,
    modes: &[GateMode],
    counter: &GateCounter,
) -> Result<NodeId> {
    let prototypes = prototype_count(pi)?;
    let (gates, need_drelu, gamma) = resolve_modes(modes)?;
    let bank = gate_bank(g, x, prototypes, need_drelu, gamma, counter)?;
    apply_shared(g, x, &bank, pi, alpha, beta, &gates)
}

/// Shared activation over a group of same-shaped layers; gates are evaluated
/// once on the first layer and reused by every member.
pub fn layer_shared_relu(
    g: &mut Graph,
    layers: &[NodeId],
    pi: &[usize],
    params: &[(NodeId, NodeId)],
    modes: &[Vec<GateMode>],
    counter: &GateCounter,
) -> Result<Vec<NodeId>> {
    let Some(&first) = layers.first() else {
        return Ok(Vec::new());
    };
    if params.len() != layers.len() || modes.len() != layers.len() {
        return Err(Error::config("group layers, affine params and modes differ in length"));
    }
    let lead = g.value(first).shape().to_vec();
    for (i, &l) in layers.iter().enumerate().skip(1) {
        if g.value(l).shape() != lead.as_slice() {
            return Err(Error::config(format!(
                "group member {i} has shape {:?}, group leader {lead:?}",
                g.value(l).shape()
            )));
        }
    }
    let prototypes = prototype_count(pi)?;
    let mut resolved = Vec::with_capacity(layers.len());
    let mut need_drelu = false;
    let mut gamma: Option<f64> = None;
    for m in modes {
        let (gates, d, gm) = resolve_modes(m)?;
        need_drelu |= d;
        if let (Some(a), Some(b)) = (gamma, gm) {
            if a != b {
                return Err(Error::config("one gate group mixes GELU sharpness values"));
            }
        }
        gamma = gamma.or(gm);
        resolved.push(gates);
    }
    let bank = gate_bank(g, first, prototypes, need_drelu, gamma, counter)?;
    layers
        .iter()
        .zip(params)
        .zip(&resolved)
        .map(|((&x, &(a, b)), gates)| apply_shared(g, x, &bank, pi, a, b, gates))
        .collect()
}

/// Number of prototypes implied by a channel map (`max(π) + 1`).
pub fn prototype_count(pi: &[usize]) -> Result<usize> {
    pi.iter()
        .max()
        .map(|m| m + 1)
        .ok_or_else(|| Error::config("empty channel map"))
}

/// One binary gate observation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateRecord {
    pub example: usize,
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    pub channel: usize,
    pub gate: u8,
}

/// Binary gates of one layer over a batch, laid out `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTensor {
    pub layer: usize,
    pub dims: [usize; 4],
    pub values: Vec<u8>,
}

impl GateTensor {
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> u8 {
        let [_, cc, hh, ww] = self.dims;
        self.values[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn records(&self) -> impl Iterator<Item = GateRecord> + '_ {
        let [n, c, h, w] = self.dims;
        (0..n).flat_map(move |ni| {
            (0..h).flat_map(move |hi| {
                (0..w).flat_map(move |wi| {
                    (0..c).map(move |ci| GateRecord {
                        example: ni,
                        layer: self.layer,
                        h: hi,
                        w: wi,
                        channel: ci,
                        gate: self.get(ni, ci, hi, wi),
                    })
                })
            })
        })
    }

    /// Rebuilds per-layer tensors from a record stream.
    pub fn from_records(records: &[GateRecord]) -> Vec<GateTensor> {
        let mut layers: std::collections::BTreeMap<usize, [usize; 4]> = Default::default();
        for r in records {
            let d = layers.entry(r.layer).or_insert([0; 4]);
            d[0] = d[0].max(r.example + 1);
            d[1] = d[1].max(r.channel + 1);
            d[2] = d[2].max(r.h + 1);
            d[3] = d[3].max(r.w + 1);
        }
        let mut out: Vec<GateTensor> = layers
            .into_iter()
            .map(|(layer, dims)| GateTensor {
                layer,
                dims,
                values: vec![0; dims.iter().product()],
            })
            .collect();
        for r in records {
            let t = out.iter_mut().find(|t| t.layer == r.layer).expect("layer seen");
            let [_, c, h, w] = t.dims;
            t.values[((r.example * c + r.channel) * h + r.h) * w + r.w] = r.gate;
        }
        out
    }
}

/// Writes records as CSV with header `example,layer,h,w,channel,gate`.
pub fn write_gate_records<W: Write>(out: W, records: impl IntoIterator<Item = GateRecord>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<gate records>", e))?;
    Ok(())
}

pub fn read_gate_records<R: std::io::Read>(input: R) -> Result<Vec<GateRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<GateRecord>, _>>()
        .map_err(csv_err)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::data("<csv>", e.to_string())
}
