//! Self-contained invariant suite behind the `verify` command. Every check
//! is seeded and finishes in well under a minute on one core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode_params, encode_params};
use crate::error::Result;
use crate::gates::{drelu, shared_relu, GateCounter, GateMode};
use crate::model::{Architecture, LayerDef, Network};
use crate::sharing::{allocate_budget, baseline_count, build_groups, build_specs, gate_ledger, minimal_budget, BudgetSource};
use crate::tensor::{finite_diff_check, Graph, Tensor};
use crate::training::{substitution_plan, SubstitutionState};
use crate::xor::{constructive_network, corollary_fuzz, grid_accuracy, OracleConfig, GRID_SIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("xor-constructive", xor_constructive()),
        check("gate-ledger", gate_ledger_matches(seed, 20)),
        check("drelu-blocks-gradient", drelu_blocks_gradient(seed)),
        check("gelu-finite-difference", gelu_finite_difference(seed)),
        check("identity-reduction", identity_reduction(seed)),
        check("substitution-plan", substitution_schedule(seed, 200)),
        check("checkpoint-round-trip", checkpoint_round_trip(seed)),
        check("corollary-taxonomy", corollary(seed, 300)),
    ]
}

fn xor_constructive() -> Result<(bool, String)> {
    let (net, params) = constructive_network();
    let g = grid_accuracy(&net, &params, &net.uniform_modes(GateMode::Drelu), GRID_SIDE)?;
    let n = g.points.len() as u64;
    Ok((
        g.accuracy == 1.0 && g.drelu_evaluations == n,
        format!("accuracy {} with {} DReLU evaluations on {n} points", g.accuracy, g.drelu_evaluations),
    ))
}

/// A random small conv stack, sometimes with repeated shapes.
pub fn random_architecture<R: Rng>(rng: &mut R) -> Architecture {
    let side = rng.gen_range(4..=8);
    let mut layers = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let c = rng.gen_range(1..=6);
        let repeat = rng.gen_range(1..=3);
        let stride = if rng.gen_bool(0.3) { 2 } else { 1 };
        layers.push(LayerDef::conv(c, stride));
        for _ in 1..repeat {
            layers.push(LayerDef::conv(c, 1));
        }
    }
    if rng.gen_bool(0.5) {
        layers.push(LayerDef::dense(rng.gen_range(1..=5)));
    }
    Architecture {
        input: [rng.gen_range(1..=3), side, side],
        layers,
        classes: rng.gen_range(2..=4),
    }
}

fn gate_ledger_matches(seed: u64, archs: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = String::new();
    for i in 0..archs {
        let arch = random_architecture(&mut rng);
        let shapes = arch.shapes()?;
        let phi = build_groups(&shapes, i % 2 == 0);
        let floor = minimal_budget(&shapes, &phi);
        let budget = rng.gen_range(floor..=baseline_count(&shapes));
        let alloc = allocate_budget(&shapes, &phi, budget, &BudgetSource::UniformRatio)?;
        let specs = build_specs(&shapes, &alloc.prototypes, &phi, true, i % 2 == 0)?;
        let net = Network::new(arch, specs)?;
        let params = net.init_params(&mut rng);
        let n = rng.gen_range(1..=3);
        let [c, h, w] = net.arch.input;
        let x = Tensor::new([n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let counter = GateCounter::new();
        net.logits(&params, &x, &net.uniform_modes(GateMode::Drelu), &counter)?;
        let stat = gate_ledger(&net.specs, net.shapes()).total;
        if counter.get() != n as u64 * stat || stat > budget {
            worst = format!("architecture {i}: static {stat} x {n} vs dynamic {}", counter.get());
            break;
        }
    }
    Ok((worst.is_empty(), if worst.is_empty() { format!("{archs} architectures") } else { worst }))
}

fn random_affine<R: Rng>(rng: &mut R, c: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let p = rng.gen_range(1..=c);
    let pi: Vec<usize> = (0..c).map(|i| if i < p { i } else { rng.gen_range(0..p) }).collect();
    let alpha = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let beta = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (pi, alpha, beta)
}

/// Prototype gradients with DReLU gates equal those of a run where the gate
/// mask is a precomputed constant.
fn drelu_blocks_gradient(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1);
    for trial in 0..20 {
        let (n, c, h, w) = (2, rng.gen_range(1..=5), 2, 3);
        let (pi, alpha, beta) = random_affine(&mut rng, c);
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::new([n, c, h, w], x.clone())?;
        let upt = Tensor::new([n, c, h, w], up)?;

        let mut g = Graph::new();
        let xv = g.variable(xt.clone());
        let a = g.constant(Tensor::from_vec(alpha.clone()));
        let b = g.constant(Tensor::from_vec(beta.clone()));
        let y = shared_relu(&mut g, xv, &pi, a, b, &vec![GateMode::Drelu; c], &GateCounter::new())?;
        let u = g.constant(upt.clone());
        let yu = g.mul(y, u)?;
        let loss = g.sum(yu);
        g.backward(loss)?;
        let gated = g.grad(xv).expect("tracked").into_owned();

        let hw = h * w;
        let mask: Vec<f64> = (0..x.len())
            .map(|i| {
                let (ni, ci, s) = (i / (c * hw), (i / hw) % c, i % hw);
                alpha[ci] * drelu(x[(ni * c + pi[ci]) * hw + s]) + beta[ci]
            })
            .collect();
        let mut g = Graph::new();
        let xv = g.variable(xt);
        let m = g.constant(Tensor::new([n, c, h, w], mask)?);
        let y = g.mul(xv, m)?;
        let u = g.constant(upt);
        let yu = g.mul(y, u)?;
        let loss = g.sum(yu);
        g.backward(loss)?;
        let detached = g.grad(xv).expect("tracked").into_owned();
        if gated.iter().zip(&detached).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Ok((false, format!("trial {trial}: gradients differ")));
        }
    }
    Ok((true, "20 random layers, bitwise equal".into()))
}

fn gelu_finite_difference(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e);
    let mut worst: f64 = 0.0;
    for gamma in [1.0, 4.0] {
        for _ in 0..100 {
            let c = rng.gen_range(1..=4);
            let (pi, alpha, beta) = random_affine(&mut rng, c);
            let point = Tensor::new([1, c, 1, 2], (0..2 * c).map(|_| rng.gen_range(-2.0..2.0)).collect())?;
            let up = Tensor::new([1, c, 1, 2], (0..2 * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let modes = vec![GateMode::GeluGate { gamma }; c];
            let err = finite_diff_check(
                |g, x| {
                    let a = g.constant(Tensor::from_vec(alpha.clone()));
                    let b = g.constant(Tensor::from_vec(beta.clone()));
                    let y = shared_relu(g, x, &pi, a, b, &modes, &GateCounter::new())?;
                    let u = g.constant(up.clone());
                    let yu = g.mul(y, u)?;
                    Ok(g.sum(yu))
                },
                &point,
                1e-6,
            )?;
            worst = worst.max(err);
        }
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e} over 200 points")))
}

/// A plain sharing network equals a hand-written ReLU MLP exactly.
fn identity_reduction(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
    let net = Network::plain(Architecture::mlp(3, &[5, 4], 2))?;
    let params = net.init_params(&mut rng);
    let n = 7;
    let x: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let logits = net.logits(
        &params,
        &Tensor::new([n, 3], x.clone())?,
        &net.uniform_modes(GateMode::Drelu),
        &GateCounter::new(),
    )?;
    let dense = |input: &[f64], name: &str, relu: bool| -> Vec<f64> {
        let wt = params.get(&format!("{name}.weight")).expect("weight");
        let bias = params.get(&format!("{name}.bias")).expect("bias").value.data();
        let (k, m) = (wt.value.shape()[0], wt.value.shape()[1]);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..k {
                    s += input[r * k + i] * wt.value.data()[i * m + j];
                }
                let z = s + bias[j];
                out[r * m + j] = if relu { z.max(0.0) } else { z };
            }
        }
        out
    };
    let h0 = dense(&x, "layer0", true);
    let h1 = dense(&h0, "layer1", true);
    let reference = dense(&h1, "head", false);
    let same = logits.data().iter().zip(&reference).all(|(a, b)| a == b);
    Ok((same, format!("{} logits compared", reference.len())))
}

fn substitution_schedule(seed: u64, trials: usize) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b);
    for t in 0..trials {
        let layers = rng.gen_range(1..=4);
        let gated: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..=40)).collect();
        let epochs = rng.gen_range(1..=30);
        let gelu = GateMode::GeluGate { gamma: 1.0 };
        let mut state = SubstitutionState {
            modes: gated.iter().map(|&g| vec![gelu; g + rng.gen_range(0..3)]).collect(),
            gated: gated.clone(),
        };
        let mut when: Vec<Vec<Option<usize>>> = gated.iter().map(|&g| vec![None; g]).collect();
        for e in 0..epochs {
            let plan = substitution_plan(&state, e, epochs);
            for (l, chans) in plan.iter().enumerate() {
                for &c in chans {
                    if when[l][c].replace(e).is_some() {
                        return Ok((false, format!("trial {t}: layer {l} channel {c} switched twice")));
                    }
                }
            }
            state.apply(&plan)?;
        }
        for (l, w) in when.iter().enumerate() {
            let ok_all = w.iter().all(Option::is_some);
            let ordered = w.windows(2).all(|p| p[1] <= p[0]);
            let last = w.iter().flatten().max().copied();
            if !ok_all || !ordered || last != Some(epochs - 1) {
                return Ok((false, format!("trial {t}: layer {l} coverage {ok_all}, order {ordered}, last {last:?}")));
            }
        }
    }
    Ok((true, format!("{trials} random schedules")))
}

fn checkpoint_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcc);
    let arch = random_architecture(&mut rng);
    let net = Network::plain(arch)?;
    let params = net.init_params(&mut rng);
    let a = encode_params(&params);
    let b = encode_params(&decode_params(&a, std::path::Path::new("<memory>"))?);
    Ok((a == b, format!("{} bytes", a.len())))
}

fn corollary(seed: u64, draws: usize) -> Result<(bool, String)> {
    let r = corollary_fuzz(draws, seed, &OracleConfig::default());
    Ok((
        r.contradictions == 0 && r.unresolved * 1000 <= draws,
        format!(
            "{} draws: {} agree, {} contradict, {} unresolved",
            r.draws, r.agreements, r.contradictions, r.unresolved
        ),
    ))
}
