//! Three-phase training: GELU gates everywhere, progressive back-to-front
//! substitution by DReLU gates under distillation, then finetuning.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::gates::{GateCounter, GateMode};
use crate::model::{argmax_rows, Network, ParamStore};
use crate::sharing::gate_ledger;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    None,
    Linear,
    Cosine,
    #[serde(alias = "polylr")]
    Poly,
}

/// Linear schedules reach their end rate at this fraction of the phase.
pub const LINEAR_END_FRACTION: f64 = 0.75;
pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub epochs: usize,
    pub lr_start: f64,
    /// Defaults to `lr_start`.
    #[serde(default)]
    pub lr_end: Option<f64>,
    #[serde(default = "no_scheduler")]
    pub scheduler: Scheduler,
}

fn no_scheduler() -> Scheduler {
    Scheduler::None
}

impl PhaseSchedule {
    pub fn constant(epochs: usize, lr: f64) -> Self {
        PhaseSchedule {
            epochs,
            lr_start: lr,
            lr_end: None,
            scheduler: Scheduler::None,
        }
    }

    pub fn end(&self) -> f64 {
        self.lr_end.unwrap_or(self.lr_start)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr_start.is_finite() && self.lr_start >= 0.0 && self.end().is_finite() && self.end() >= 0.0) {
            return Err(Error::config(format!("{name}: learning rates must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Learning rate at (possibly fractional) `epoch` of a phase.
pub fn lr_at(phase: &PhaseSchedule, epoch: f64) -> f64 {
    let (start, end) = (phase.lr_start, phase.end());
    let len = phase.epochs.max(1) as f64;
    let t = (epoch / len).clamp(0.0, 1.0);
    match phase.scheduler {
        Scheduler::None => start,
        Scheduler::Linear => {
            let u = (t / LINEAR_END_FRACTION).min(1.0);
            start + (end - start) * u
        }
        Scheduler::Cosine => end + (start - end) * (1.0 + (PI * t).cos()) / 2.0,
        Scheduler::Poly => (start * (1.0 - t).powf(POLY_POWER)).max(end),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdSettings {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Weight of the distillation term; the rest goes to cross-entropy.
    #[serde(default = "default_mix")]
    pub mix: f64,
    /// Train a separate plain GELU model as teacher for the GELU phase.
    #[serde(default)]
    pub gelu_teacher: bool,
}

fn default_temperature() -> f64 {
    4.0
}

fn default_mix() -> f64 {
    0.5
}

impl Default for KdSettings {
    fn default() -> Self {
        KdSettings {
            enabled: false,
            temperature: default_temperature(),
            mix: default_mix(),
            gelu_teacher: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSchedule {
    pub gelu_phase: PhaseSchedule,
    pub substitution: PhaseSchedule,
    pub finetune: PhaseSchedule,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub kd: KdSettings,
}

fn default_gamma() -> f64 {
    1.0
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        self.gelu_phase.validate("gelu_phase")?;
        self.substitution.validate("substitution")?;
        self.finetune.validate("finetune")?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config("momentum must lie in [0,1) and weight_decay must be non-negative"));
        }
        GateMode::GeluGate { gamma: self.gamma }.validate()?;
        if self.kd.enabled {
            if !(self.kd.temperature > 0.0 && self.kd.temperature.is_finite()) {
                return Err(Error::config(format!(
                    "KD temperature must be positive, got {}",
                    self.kd.temperature
                )));
            }
            if !(0.0..=1.0).contains(&self.kd.mix) {
                return Err(Error::config(format!("KD mix must lie in [0,1], got {}", self.kd.mix)));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.gelu_phase.epochs + self.substitution.epochs + self.finetune.epochs
    }
}

/// SGD with momentum and coupled weight decay on every unfrozen parameter.
/// Nothing is updated when any gradient is non-finite.
pub fn sgd_step(params: &mut ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    for p in params.params.iter().filter(|p| !p.frozen) {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at {}[{i}]; step aborted",
                p.grad[i], p.name
            )));
        }
    }
    for p in params.params.iter_mut().filter(|p| !p.frozen) {
        let crate::model::Param { value, grad, velocity, .. } = p;
        for ((w, &g), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// `λ·T²·KL(teacher‖student) + (1−λ)·CE(student, labels)`.
pub fn kd_loss(
    g: &mut Graph,
    student: NodeId,
    teacher: &Tensor,
    labels: &[usize],
    temperature: f64,
    mix: f64,
) -> Result<NodeId> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("KD temperature must be positive, got {temperature}")));
    }
    let kd = g.kd_divergence(student, teacher, temperature)?;
    let ce = g.cross_entropy(student, labels)?;
    let kd = g.scalar_affine(kd, mix, 0.0);
    let ce = g.scalar_affine(ce, 1.0 - mix, 0.0);
    g.add(kd, ce)
}

/// Current gate mode of every channel, and which channels carry a gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionState {
    pub modes: Vec<Vec<GateMode>>,
    pub gated: Vec<usize>,
}

impl SubstitutionState {
    pub fn uniform(net: &Network, mode: GateMode) -> Self {
        SubstitutionState {
            modes: net.uniform_modes(mode),
            gated: (0..net.layers()).map(|l| net.gated_channels(l)).collect(),
        }
    }

    pub fn remaining_in(&self, layer: usize) -> usize {
        self.modes[layer][..self.gated[layer]]
            .iter()
            .filter(|m| !m.is_drelu())
            .count()
    }

    pub fn remaining_gelu(&self) -> usize {
        (0..self.modes.len()).map(|l| self.remaining_in(l)).sum()
    }

    /// Switches the listed channels to DReLU. Switching a channel twice, or
    /// one without a gate, is refused.
    pub fn apply(&mut self, plan: &[Vec<usize>]) -> Result<()> {
        for (l, chans) in plan.iter().enumerate() {
            for &c in chans {
                if c >= self.gated[l] || self.modes[l][c].is_drelu() {
                    return Err(Error::Usage(format!("layer {l} channel {c} cannot switch to DReLU")));
                }
            }
        }
        for (l, chans) in plan.iter().enumerate() {
            for &c in chans {
                self.modes[l][c] = GateMode::Drelu;
            }
        }
        Ok(())
    }
}

/// Channels to switch at the start of substitution epoch `epoch` (0-based)
/// of `epochs`. By the end of epoch `e` (1-based) a layer with `G` gated
/// channels has `⌊G·e/E⌋` of them switched, highest index first.
pub fn substitution_plan(state: &SubstitutionState, epoch: usize, epochs: usize) -> Vec<Vec<usize>> {
    (0..state.modes.len())
        .map(|l| {
            let g = state.gated[l];
            let target = if epochs == 0 || epoch + 1 >= epochs {
                g
            } else {
                g * (epoch + 1) / epochs
            };
            let done = g - state.remaining_in(l);
            let k = target.saturating_sub(done);
            (0..g).rev().filter(|&c| !state.modes[l][c].is_drelu()).take(k).collect()
        })
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    GeluPhase,
    Substitution,
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Teacher => "teacher",
            Phase::GeluPhase => "gelu_phase",
            Phase::Substitution => "substitution",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub lr: f64,
    pub remaining_gelu: usize,
    pub ledger_total: u64,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("metrics", e))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    pub augment: Option<Augment>,
    pub eval: Option<&'a Dataset>,
    /// Begin with every gate already DReLU (no transitional phase).
    pub start_drelu: bool,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub params: ParamStore,
    pub state: SubstitutionState,
    pub metrics: Vec<EpochMetrics>,
}

/// A run stopped by a non-finite loss or gradient.
#[derive(Clone, Debug)]
pub struct TrainingAbort {
    pub phase: Phase,
    pub epoch: usize,
    pub detail: String,
    /// Parameters at the end of the last completed epoch.
    pub last_good: ParamStore,
    pub state: SubstitutionState,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug)]
pub enum TrainFailure {
    Invalid(Error),
    Diverged(Box<TrainingAbort>),
}

impl From<Error> for TrainFailure {
    fn from(e: Error) -> Self {
        TrainFailure::Invalid(e)
    }
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainFailure::Invalid(e) => e.fmt(f),
            TrainFailure::Diverged(a) => write!(f, "training diverged in {} epoch {}: {}", a.phase, a.epoch, a.detail),
        }
    }
}

impl std::error::Error for TrainFailure {}

struct Teacher<'a> {
    net: &'a Network,
    params: ParamStore,
    modes: Vec<Vec<GateMode>>,
}

struct Loop<'a, R> {
    schedule: &'a TrainingSchedule,
    data: &'a Dataset,
    opts: &'a TrainOptions<'a>,
    rng: &'a mut R,
    metrics: Vec<EpochMetrics>,
    epoch: usize,
}

impl<R: Rng> Loop<'_, R> {
    /// One pass over the data; returns (mean loss, accuracy) or the failure detail.
    fn epoch(
        &mut self,
        net: &Network,
        params: &mut ParamStore,
        modes: &[Vec<GateMode>],
        teacher: Option<&Teacher>,
        lr: f64,
    ) -> std::result::Result<(f64, f64), String> {
        let counter = GateCounter::new();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for rows in self.data.batches(self.schedule.batch_size, self.rng) {
            let mut inputs = self.data.inputs.gather_rows(&rows);
            if let Some(aug) = &self.opts.augment {
                inputs = aug.apply(&inputs, self.rng);
            }
            let labels: Vec<usize> = rows.iter().map(|&r| self.data.labels[r]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let x = g.constant(inputs);
            let fp = net.forward(&mut g, &bound, x, modes, &counter).map_err(|e| e.to_string())?;
            let loss = match teacher {
                Some(t) => {
                    let tl = t
                        .net
                        .logits(&t.params, g.value(x), &t.modes, &GateCounter::new())
                        .map_err(|e| e.to_string())?;
                    kd_loss(&mut g, fp.logits, &tl, &labels, self.schedule.kd.temperature, self.schedule.kd.mix)
                }
                None => g.cross_entropy(fp.logits, &labels),
            }
            .map_err(|e| e.to_string())?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(format!("non-finite loss {lv}"));
            }
            loss_sum += lv * rows.len() as f64;
            correct += argmax_rows(g.value(fp.logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            g.backward(loss).map_err(|e| e.to_string())?;
            params.zero_grad();
            params.accumulate_grads(&g, &bound);
            sgd_step(params, lr, self.schedule.momentum, self.schedule.weight_decay).map_err(|e| e.to_string())?;
        }
        let n = self.data.len().max(1) as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    #[allow(clippy::too_many_arguments)]
    fn phase(
        &mut self,
        which: Phase,
        spec: &PhaseSchedule,
        net: &Network,
        params: &mut ParamStore,
        state: &mut SubstitutionState,
        teacher: Option<&Teacher>,
        ledger_total: u64,
    ) -> std::result::Result<(), TrainFailure> {
        for e in 0..spec.epochs {
            if which == Phase::Substitution {
                let plan = substitution_plan(state, e, spec.epochs);
                state.apply(&plan)?;
            }
            let lr = lr_at(spec, e as f64);
            let snapshot = params.clone();
            self.epoch += 1;
            match self.epoch(net, params, &state.modes, teacher, lr) {
                Ok((loss, accuracy)) => {
                    let eval_accuracy = self
                        .opts
                        .eval
                        .map(|d| accuracy_on(net, params, d, &state.modes))
                        .transpose()?;
                    self.metrics.push(EpochMetrics {
                        epoch: self.epoch,
                        phase: which,
                        loss,
                        accuracy,
                        eval_accuracy,
                        lr,
                        remaining_gelu: state.remaining_gelu(),
                        ledger_total,
                    });
                }
                Err(detail) => {
                    return Err(TrainFailure::Diverged(Box::new(TrainingAbort {
                        phase: which,
                        epoch: self.epoch,
                        detail,
                        last_good: snapshot,
                        state: state.clone(),
                        metrics: std::mem::take(&mut self.metrics),
                    })))
                }
            }
        }
        Ok(())
    }
}

/// Fraction of `data` classified correctly.
pub fn accuracy_on(net: &Network, params: &ParamStore, data: &Dataset, modes: &[Vec<GateMode>]) -> Result<f64> {
    let mut correct = 0;
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(256) {
        let pred = net.predict(params, &data.inputs.gather_rows(chunk), modes)?;
        correct += pred.iter().zip(chunk).filter(|(p, &r)| **p == data.labels[r]).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Runs the transitional GELU phase, substitution and finetuning in order.
pub fn run_training<R: Rng>(
    net: &Network,
    params: ParamStore,
    schedule: &TrainingSchedule,
    data: &Dataset,
    opts: &TrainOptions,
    rng: &mut R,
) -> std::result::Result<TrainingOutcome, TrainFailure> {
    schedule.validate()?;
    let example: usize = data.example_shape().iter().product();
    let [c, h, w] = net.arch.input;
    if example != c * h * w || data.classes != net.arch.classes {
        return Err(Error::shape(
            "run-training",
            format!(
                "dataset examples {:?} with {} classes do not fit input {:?} with {} classes",
                data.example_shape(),
                data.classes,
                net.arch.input,
                net.arch.classes
            ),
        )
        .into());
    }
    let gelu = GateMode::GeluGate { gamma: schedule.gamma };
    let mut state = SubstitutionState::uniform(net, if opts.start_drelu { GateMode::Drelu } else { gelu });
    let ledger_total = gate_ledger(&net.specs, net.shapes()).total;
    let mut params = params;
    let mut lp = Loop {
        schedule,
        data,
        opts,
        rng,
        metrics: Vec::new(),
        epoch: 0,
    };
    let kd = schedule.kd.enabled;

    let plain_net;
    let mut gelu_teacher = None;
    if kd && schedule.kd.gelu_teacher && schedule.gelu_phase.epochs > 0 {
        plain_net = Network::plain(net.arch.clone())?;
        let mut tp = plain_net.init_params(lp.rng);
        let mut tstate = SubstitutionState::uniform(&plain_net, gelu);
        let total = gate_ledger(&plain_net.specs, plain_net.shapes()).total;
        lp.phase(Phase::Teacher, &schedule.gelu_phase, &plain_net, &mut tp, &mut tstate, None, total)?;
        gelu_teacher = Some(Teacher {
            net: &plain_net,
            params: tp,
            modes: tstate.modes,
        });
    }
    lp.phase(
        Phase::GeluPhase,
        &schedule.gelu_phase,
        net,
        &mut params,
        &mut state,
        gelu_teacher.as_ref(),
        ledger_total,
    )?;
    let snapshot = (kd && schedule.gelu_phase.epochs > 0).then(|| Teacher {
        net,
        params: params.clone(),
        modes: state.modes.clone(),
    });
    lp.phase(
        Phase::Substitution,
        &schedule.substitution,
        net,
        &mut params,
        &mut state,
        snapshot.as_ref(),
        ledger_total,
    )?;
    if state.remaining_gelu() > 0 {
        // an empty substitution phase still ends with every gate binary
        let plan = substitution_plan(&state, 0, 0);
        state.apply(&plan)?;
    }
    lp.phase(
        Phase::Finetune,
        &schedule.finetune,
        net,
        &mut params,
        &mut state,
        snapshot.as_ref(),
        ledger_total,
    )?;
    Ok(TrainingOutcome {
        params,
        state,
        metrics: lp.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_param(value: f64, grad: f64) -> ParamStore {
        let net = Network::plain(Architecture::mlp(1, &[1], 1)).unwrap();
        let mut ps = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        ps.params.truncate(1);
        ps.params[0].value = Tensor::from_vec(vec![value]);
        ps.params[0].grad = vec![grad];
        ps.params[0].velocity = vec![0.0];
        ps
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = single_param(1.5, 3.0);
        sgd_step(&mut p, 0.0, 0.9, 0.1).unwrap();
        assert_eq!(p.params[0].value.data(), &[1.5]);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = single_param(1.0, 2.0);
        sgd_step(&mut p, 0.1, 0.0, 0.0).unwrap();
        assert!((p.params[0].value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls() {
        let (lr, g) = (0.01, 3.0);
        let mut p = single_param(0.0, g);
        sgd_step(&mut p, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut p, lr, 0.9, 0.0).unwrap();
        // v1 = g, v2 = 0.9 g + g
        let expected = -lr * g * (1.0 + 1.9);
        assert!((p.params[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_aborts_untouched() {
        let mut p = single_param(1.0, f64::NAN);
        let e = sgd_step(&mut p, 0.1, 0.0, 0.0).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
        assert_eq!(p.params[0].value.data(), &[1.0]);
    }

    fn phase(s: Scheduler, start: f64, end: f64, epochs: usize) -> PhaseSchedule {
        PhaseSchedule {
            epochs,
            lr_start: start,
            lr_end: Some(end),
            scheduler: s,
        }
    }

    #[test]
    fn lr_schedules() {
        let lin = phase(Scheduler::Linear, 0.05, 5e-4, 100);
        assert!((lr_at(&lin, 75.0) - 5e-4).abs() < 1e-15);
        assert!((lr_at(&lin, 90.0) - 5e-4).abs() < 1e-15);
        assert!((lr_at(&lin, 37.5) - (0.05 + 5e-4) / 2.0).abs() < 1e-15);
        let cos = phase(Scheduler::Cosine, 0.05, 1e-5, 100);
        assert_eq!(lr_at(&cos, 0.0), 0.05);
        assert!((lr_at(&cos, 50.0) - (0.05 + 1e-5) / 2.0).abs() < 1e-15);
        let poly = phase(Scheduler::Poly, 0.005, 1e-4, 190);
        assert!((lr_at(&poly, 95.0) - 0.005 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(lr_at(&poly, 189.9), 1e-4);
        assert_eq!(lr_at(&phase(Scheduler::None, 1e-3, 0.0, 150), 80.0), 1e-3);
    }

    #[test]
    fn unknown_scheduler_is_config_error() {
        let r: std::result::Result<PhaseSchedule, _> =
            toml::from_str("epochs = 3\nlr_start = 0.1\nscheduler = \"step\"\n");
        assert!(r.is_err());
        let ok: PhaseSchedule = toml::from_str("epochs = 3\nlr_start = 0.1\nscheduler = \"polylr\"\n").unwrap();
        assert_eq!(ok.scheduler, Scheduler::Poly);
    }

    /// Direct scalar recomputation of the distillation objective.
    fn kd_reference(s: &[f64], t: &[f64], label: usize, temp: f64, mix: f64) -> f64 {
        let soft = |z: &[f64], tt: f64| {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| ((v - m) / tt).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.into_iter().map(|v| v / sum).collect::<Vec<_>>()
        };
        let (p, q) = (soft(t, temp), soft(s, temp));
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let ce = -soft(s, 1.0)[label].ln();
        mix * temp * temp * kl + (1.0 - mix) * ce
    }

    #[test]
    fn kd_loss_matches_reference() {
        let s = [1.0, -0.5, 2.0];
        let t = [0.2, 1.5, -1.0];
        let mut g = Graph::new();
        let sn = g.constant(Tensor::new([1, 3], s.to_vec()).unwrap());
        let tt = Tensor::new([1, 3], t.to_vec()).unwrap();
        let l = kd_loss(&mut g, sn, &tt, &[2], 4.0, 0.5).unwrap();
        let want = kd_reference(&s, &t, 2, 4.0, 0.5);
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);

        let l0 = kd_loss(&mut g, sn, &tt, &[2], 4.0, 0.0).unwrap();
        let ce = g.cross_entropy(sn, &[2]).unwrap();
        assert_eq!(g.value(l0).data()[0], g.value(ce).data()[0]);

        let same = kd_loss(&mut g, sn, &Tensor::new([1, 3], s.to_vec()).unwrap(), &[0], 4.0, 1.0).unwrap();
        assert!(g.value(same).data()[0].abs() < 1e-15);
        assert!(matches!(kd_loss(&mut g, sn, &tt, &[2], 0.0, 0.5), Err(Error::Config(_))));
    }

    fn state(gated: &[usize]) -> SubstitutionState {
        SubstitutionState {
            modes: gated.iter().map(|&g| vec![GateMode::GeluGate { gamma: 1.0 }; g]).collect(),
            gated: gated.to_vec(),
        }
    }

    #[test]
    fn ten_channels_over_five_epochs() {
        let mut s = state(&[10]);
        let mut order = Vec::new();
        for e in 0..5 {
            let plan = substitution_plan(&s, e, 5);
            assert_eq!(plan[0].len(), 2);
            order.extend(plan[0].iter().copied());
            s.apply(&plan).unwrap();
        }
        assert_eq!(order, (0..10).rev().collect::<Vec<_>>());
        assert_eq!(s.remaining_gelu(), 0);
    }

    #[test]
    fn last_epoch_switches_everything() {
        let s = state(&[7, 3]);
        let plan = substitution_plan(&s, 4, 5);
        assert_eq!(plan[0].len(), 7);
        assert_eq!(plan[1].len(), 3);
    }

    #[test]
    fn switched_channels_never_revert() {
        let mut s = state(&[3]);
        s.apply(&[vec![2]]).unwrap();
        assert!(s.apply(&[vec![2]]).is_err());
    }

    proptest! {
        #[test]
        fn plan_is_exact_and_back_to_front(
            gated in prop::collection::vec(1usize..40, 1..5),
            epochs in 1usize..30,
        ) {
            let mut s = state(&gated);
            let mut when: Vec<Vec<Option<usize>>> = gated.iter().map(|&g| vec![None; g]).collect();
            for e in 0..epochs {
                let plan = substitution_plan(&s, e, epochs);
                for (l, chans) in plan.iter().enumerate() {
                    for &c in chans {
                        prop_assert!(when[l][c].is_none());
                        when[l][c] = Some(e);
                    }
                }
                s.apply(&plan).unwrap();
            }
            prop_assert_eq!(s.remaining_gelu(), 0);
            for (l, w) in when.iter().enumerate() {
                for i in 0..w.len() {
                    for j in 0..i {
                        prop_assert!(w[i].unwrap() <= w[j].unwrap(), "layer {} ch {} after {}", l, i, j);
                    }
                }
                let last = w.iter().map(|e| e.unwrap()).max().unwrap();
                prop_assert_eq!(last, epochs - 1);
            }
        }
    }

    #[test]
    fn identity_specs_reduce_to_relu_training() {
        use crate::data::Dataset;
        let arch = Architecture::mlp(2, &[4], 2);
        let net = Network::plain(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = net.init_params(&mut rng);
        for p in params.params.iter_mut().filter(|p| p.name.ends_with("alpha") || p.name.ends_with("beta")) {
            p.frozen = true;
        }
        let inputs = Tensor::new([4, 2], vec![1., 1., -1., -1., 1., -1., -1., 1.]).unwrap();
        let data = Dataset::new(inputs, vec![0, 0, 1, 1], 2).unwrap();
        let sched = TrainingSchedule {
            gelu_phase: PhaseSchedule::constant(0, 0.1),
            substitution: PhaseSchedule::constant(0, 0.1),
            finetune: PhaseSchedule::constant(3, 0.1),
            batch_size: 4,
            momentum: 0.0,
            weight_decay: 0.0,
            gamma: 1.0,
            kd: KdSettings::default(),
        };
        let opts = TrainOptions {
            start_drelu: true,
            ..Default::default()
        };
        let out = run_training(&net, params.clone(), &sched, &data, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

        // the same three full-batch steps with a hand-written ReLU layer
        let (mut w1, mut b1) = (params.params[0].value.clone(), params.params[1].value.clone());
        let (mut w2, mut b2) = (params.params[4].value.clone(), params.params[5].value.clone());
        for _ in 0..3 {
            let mut g = Graph::new();
            let ids = [w1.clone(), b1.clone(), w2.clone(), b2.clone()].map(|t| g.variable(t));
            let x = g.constant(data.inputs.clone());
            let z = g.matmul(x, ids[0]).unwrap();
            let z = g.add_channel_bias(z, ids[1]).unwrap();
            let gate = crate::gates::drelu_node(&mut g, z, None);
            let a = g.mul(z, gate).unwrap();
            let o = g.matmul(a, ids[2]).unwrap();
            let o = g.add_channel_bias(o, ids[3]).unwrap();
            let l = g.cross_entropy(o, &data.labels).unwrap();
            g.backward(l).unwrap();
            for (t, id) in [&mut w1, &mut b1, &mut w2, &mut b2].into_iter().zip(ids) {
                let gr = g.grad(id).unwrap();
                t.data_mut().iter_mut().zip(gr.iter()).for_each(|(v, d)| *v -= 0.1 * d);
            }
        }
        assert_eq!(out.params.params[0].value, w1);
        assert_eq!(out.params.params[5].value, b2);
        assert_eq!(out.metrics.len(), 3);
    }

    #[test]
    fn diverging_run_returns_last_good() {
        use crate::data::Dataset;
        let net = Network::plain(Architecture::mlp(1, &[2], 2)).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let inputs = Tensor::new([2, 1], vec![1e200, -1e200]).unwrap();
        let data = Dataset::new(inputs, vec![0, 1], 2).unwrap();
        let sched = TrainingSchedule {
            gelu_phase: PhaseSchedule::constant(2, 1e10),
            substitution: PhaseSchedule::constant(0, 0.1),
            finetune: PhaseSchedule::constant(0, 0.1),
            batch_size: 2,
            momentum: 0.0,
            weight_decay: 0.0,
            gamma: 1.0,
            kd: KdSettings::default(),
        };
        match run_training(&net, params.clone(), &sched, &data, &TrainOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)) {
            Err(TrainFailure::Diverged(a)) => {
                assert!(a.last_good.params.iter().all(|p| p.value.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
