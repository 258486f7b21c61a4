//! Prototype/replicate partitioning, layer groups and DReLU budgets.
//!
//! Layer `l` with `C` channels keeps `P ≤ C` prototype channels (the first
//! `P`); the remaining channels read a prototype gate through the channel map
//! `π`. Consecutive layers with identical `(C, h, w)` may form a group whose
//! gates are computed once on the group's first layer `φ(l)`. The model's gate
//! count is `Σ P·h·w` over group leaders.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{csv_err, GateTensor};

/// Channel count and spatial size of one gated layer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerShape {
    pub fn new(layer: usize, channels: usize, height: usize, width: usize) -> Self {
        LayerShape {
            layer,
            channels,
            height,
            width,
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Gate count of the same layer with plain ReLU.
    pub fn full_count(&self) -> u64 {
        (self.channels * self.positions()) as u64
    }

    fn same_dims(&self, other: &LayerShape) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }
}

/// Sharing configuration of one gated layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSpec {
    pub layer: usize,
    pub channels: usize,
    pub prototypes: usize,
    /// `pi[c]` is the prototype whose gate channel `c` consumes.
    pub pi: Vec<usize>,
    /// `φ(l)`: first layer of this layer's sharing group.
    pub group: usize,
    pub affine_enabled: bool,
    pub layer_sharing_enabled: bool,
}

impl GateSpec {
    /// A plain ReLU layer: every channel is its own prototype.
    pub fn plain(layer: usize, channels: usize) -> Self {
        GateSpec {
            layer,
            channels,
            prototypes: channels,
            pi: (0..channels).collect(),
            group: layer,
            affine_enabled: false,
            layer_sharing_enabled: false,
        }
    }

    pub fn replicates(&self) -> usize {
        self.channels - self.prototypes
    }

    pub fn is_group_leader(&self) -> bool {
        self.group == self.layer
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes == 0 {
            return Err(Error::config(format!("layer {} has no prototype channels", self.layer)));
        }
        if self.prototypes > self.channels {
            return Err(Error::config(format!(
                "layer {}: {} prototypes exceed {} channels",
                self.layer, self.prototypes, self.channels
            )));
        }
        if self.group > self.layer {
            return Err(Error::config(format!(
                "layer {} names later layer {} as its group leader",
                self.layer, self.group
            )));
        }
        crate::gates::validate_channel_map(&self.pi, self.channels, self.prototypes)
    }
}

/// Round-robin map: prototypes map to themselves, replicate `P + i` to `i mod P`.
pub fn balanced_channel_map(channels: usize, prototypes: usize) -> Result<Vec<usize>> {
    if prototypes < 1 {
        return Err(Error::config("a layer needs at least one prototype channel"));
    }
    if prototypes > channels {
        return Err(Error::config(format!(
            "{prototypes} prototypes exceed {channels} channels"
        )));
    }
    Ok((0..channels)
        .map(|c| if c < prototypes { c } else { (c - prototypes) % prototypes })
        .collect())
}

/// `φ`: maximal runs of consecutive same-shape layers share their first layer.
pub fn build_groups(shapes: &[LayerShape], layer_sharing_enabled: bool) -> Vec<usize> {
    let mut phi = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        let leader = match phi.last() {
            Some(&prev) if layer_sharing_enabled && shapes[i - 1].same_dims(s) => prev,
            _ => i,
        };
        phi.push(leader);
    }
    phi
}

/// Builds every layer's spec from per-layer prototype counts; members of a
/// group inherit the leader's prototype count and channel map.
pub fn build_specs(
    shapes: &[LayerShape],
    prototypes: &[usize],
    phi: &[usize],
    affine_enabled: bool,
    layer_sharing_enabled: bool,
) -> Result<Vec<GateSpec>> {
    if prototypes.len() != shapes.len() || phi.len() != shapes.len() {
        return Err(Error::config("shapes, prototype counts and groups differ in length"));
    }
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let lead = phi[i];
            let p = prototypes[lead];
            let spec = GateSpec {
                layer: i,
                channels: s.channels,
                prototypes: p,
                pi: balanced_channel_map(s.channels, p)?,
                group: lead,
                affine_enabled,
                layer_sharing_enabled,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Per-layer weights that drive the budget allocation.
#[derive(Clone, Debug, PartialEq)]
pub enum BudgetSource {
    /// Weights read from a per-layer budget file (e.g. an external ReLU count).
    External(Vec<f64>),
    /// `weight ∝ C·h·w`: every group keeps the same channel fraction.
    UniformRatio,
    /// Weights from [`importance_proxy`].
    Importance(Vec<f64>),
}

/// Result of [`allocate_budget`].
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    /// Prototype count per layer (group members repeat the leader's count).
    pub prototypes: Vec<usize>,
    /// Scale reached by the proportional bisection.
    pub scale: f64,
    /// Per-layer counts from the proportional pass, before the fill pass.
    pub proportional: Vec<usize>,
    pub total: u64,
}

struct Group {
    leader: usize,
    weight: f64,
    positions: usize,
    channels: usize,
}

fn groups_of(shapes: &[LayerShape], phi: &[usize], weights: &[f64]) -> Vec<Group> {
    let mut out: Vec<Group> = Vec::new();
    let mut members: Vec<usize> = Vec::new();
    for (l, &lead) in phi.iter().enumerate() {
        if lead == l {
            out.push(Group {
                leader: l,
                weight: 0.0,
                positions: shapes[l].positions(),
                channels: shapes[l].channels,
            });
            members.push(0);
        }
        let gi = out.iter().position(|g| g.leader == lead).expect("leader precedes members");
        out[gi].weight += weights[l];
        members[gi] += 1;
    }
    // group weight is the mean member weight
    for (g, m) in out.iter_mut().zip(members) {
        g.weight /= m as f64;
    }
    out
}

/// Smallest budget any allocation can meet: one prototype per group.
pub fn minimal_budget(shapes: &[LayerShape], phi: &[usize]) -> u64 {
    phi.iter()
        .enumerate()
        .filter(|(l, &lead)| *l == lead)
        .map(|(l, _)| shapes[l].positions() as u64)
        .sum()
}

/// Allocates prototype counts so the gate total is at most `budget`.
///
/// A scale `s` is found by bisection so that
/// `P_g = clamp(round(s · weight_g / (h_g·w_g)), 1, C_g)` has the largest
/// total not exceeding the budget; a fill pass then adds single prototypes,
/// largest proportional shortfall first, while any still fits.
pub fn allocate_budget(
    shapes: &[LayerShape],
    phi: &[usize],
    budget: u64,
    source: &BudgetSource,
) -> Result<Allocation> {
    if phi.len() != shapes.len() {
        return Err(Error::config("group map and shapes differ in length"));
    }
    let weights: Vec<f64> = match source {
        BudgetSource::UniformRatio => shapes.iter().map(|s| s.full_count() as f64).collect(),
        BudgetSource::External(w) | BudgetSource::Importance(w) => {
            if w.len() != shapes.len() {
                return Err(Error::config(format!(
                    "{} budget weights for {} layers",
                    w.len(),
                    shapes.len()
                )));
            }
            if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::config(format!("layer {i} has invalid budget weight {v}")));
            }
            w.clone()
        }
    };
    let floor = minimal_budget(shapes, phi);
    if budget < floor {
        return Err(Error::config(format!(
            "budget {budget} is infeasible; the minimal feasible budget is {floor}"
        )));
    }
    let groups = groups_of(shapes, phi, &weights);
    let counts = |s: f64| -> Vec<usize> {
        groups
            .iter()
            .map(|g| {
                let raw = (s * g.weight / g.positions as f64).round();
                (raw.max(1.0) as usize).min(g.channels).max(1)
            })
            .collect()
    };
    let cost = |p: &[usize]| -> u64 {
        p.iter()
            .zip(&groups)
            .map(|(&p, g)| (p * g.positions) as u64)
            .sum()
    };

    let saturating = groups
        .iter()
        .filter(|g| g.weight > 0.0)
        .map(|g| (g.channels as f64 + 1.0) * g.positions as f64 / g.weight)
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0_f64, saturating.max(1.0));
    if cost(&counts(hi)) <= budget {
        lo = hi;
    } else {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cost(&counts(mid)) <= budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let proportional_groups = counts(lo);
    let mut filled = proportional_groups.clone();
    let mut spent = cost(&filled);
    loop {
        let pick = groups
            .iter()
            .enumerate()
            .filter(|(i, g)| filled[*i] < g.channels && spent + g.positions as u64 <= budget)
            .map(|(i, g)| (i, lo * g.weight / g.positions as f64 - filled[i] as f64))
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        let Some((i, _)) = pick else { break };
        filled[i] += 1;
        spent += groups[i].positions as u64;
    }

    let expand = |per_group: &[usize]| -> Vec<usize> {
        phi.iter()
            .map(|lead| {
                let gi = groups.iter().position(|g| g.leader == *lead).expect("leader");
                per_group[gi]
            })
            .collect()
    };
    Ok(Allocation {
        prototypes: expand(&filled),
        scale: lo,
        proportional: expand(&proportional_groups),
        total: spent,
    })
}

/// Gate-variance saliency per layer: for each channel and position the
/// Bernoulli variance `p(1-p)` of the gate across examples, averaged over
/// positions and summed over channels.
pub fn importance_proxy(gates: &[GateTensor]) -> Result<Vec<f64>> {
    gates
        .iter()
        .map(|t| {
            let [n, c, h, w] = t.dims;
            if n == 0 {
                return Err(Error::Usage("importance proxy needs a non-empty calibration shard".into()));
            }
            let mut weight = 0.0;
            for ci in 0..c {
                let mut per_channel = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        let on: usize = (0..n).map(|ni| t.get(ni, ci, hi, wi) as usize).sum();
                        let p = on as f64 / n as f64;
                        per_channel += p * (1.0 - p);
                    }
                }
                weight += per_channel / (h * w) as f64;
            }
            Ok(weight)
        })
        .collect()
}

/// Writes a budget file: one `layer_index weight` line per layer.
pub fn write_budget_file<W: Write>(mut out: W, weights: &[f64]) -> Result<()> {
    for (i, w) in weights.iter().enumerate() {
        writeln!(out, "{i} {w}").map_err(|e| Error::io("<budget file>", e))?;
    }
    Ok(())
}

/// Parses a budget file; blank lines and `#` comments are skipped.
pub fn read_budget_file<R: BufRead>(input: R, layers: usize) -> Result<Vec<f64>> {
    let mut weights = vec![None; layers];
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<budget file>", e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let bad = || Error::config(format!("budget file line {}: expected `layer weight`, got `{body}`", lineno + 1));
        let mut parts = body.split_whitespace();
        let (Some(l), Some(w), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let l: usize = l.parse().map_err(|_| bad())?;
        let w: f64 = w.parse().map_err(|_| bad())?;
        if l >= layers {
            return Err(Error::config(format!(
                "budget file line {}: layer {l} outside 0..{layers}",
                lineno + 1
            )));
        }
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::config(format!(
                "budget file line {}: weight must be nonnegative, got {w}",
                lineno + 1
            )));
        }
        weights[l] = Some(w);
    }
    weights
        .into_iter()
        .enumerate()
        .map(|(i, w)| w.ok_or_else(|| Error::config(format!("budget file has no weight for layer {i}"))))
        .collect()
}

/// Static gate count per layer; group members contribute nothing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateLedger {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

pub fn gate_ledger(specs: &[GateSpec], shapes: &[LayerShape]) -> GateLedger {
    let per_layer: Vec<u64> = specs
        .iter()
        .zip(shapes)
        .map(|(spec, shape)| {
            if spec.is_group_leader() {
                (spec.prototypes * shape.positions()) as u64
            } else {
                0
            }
        })
        .collect();
    let total = per_layer.iter().sum();
    GateLedger { per_layer, total }
}

/// Baseline count `Σ C·h·w`.
pub fn baseline_count(shapes: &[LayerShape]) -> u64 {
    shapes.iter().map(LayerShape::full_count).sum()
}

#[derive(Serialize)]
struct LedgerRow {
    layer: usize,
    gates: u64,
}

/// Ledger as CSV with header `layer,gates`.
pub fn write_ledger_csv<W: Write>(out: W, ledger: &GateLedger) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (layer, &gates) in ledger.per_layer.iter().enumerate() {
        w.serialize(LedgerRow { layer, gates }).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<ledger>", e))?;
    Ok(())
}
