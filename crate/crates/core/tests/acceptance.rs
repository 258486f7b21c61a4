//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every criterion reports even when an earlier one
//! fails. A criterion listed in `KNOWN_RED` prints FAIL with its analysis but
//! does not fail the process; any other failure does.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use deepshare::analytics::{ed_report, paired_permutation_p, summarize};
use deepshare::config::{build_network, Config};
use deepshare::gates::{drelu, layer_shared_relu, shared_relu, GateCounter, GateMode};
use deepshare::model::{Architecture, Network};
use deepshare::run::load_data;
use deepshare::sharing::{
    allocate_budget, baseline_count, build_groups, build_specs, gate_ledger, minimal_budget, BudgetSource,
};
use deepshare::tensor::{Graph, NodeId, Tensor};
use deepshare::training::{run_training, substitution_plan, Scheduler, SubstitutionState, TrainOptions};
use deepshare::verify::random_architecture;
use deepshare::xor::{
    constructive_network, corollary_fuzz, evaluate_points, four_way_experiment, grid_points, OracleConfig,
    XorRecipe, XorVariant, GRID_SIDE,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Criterion 2 cannot pass as written; see `xor_four_way`.
const KNOWN_RED: &[usize] = &[2];

fn main() {
    let criteria: [(usize, fn() -> Outcome); 8] = [
        (1, xor_constructive),
        (2, xor_four_way),
        (3, corollary),
        (4, ledger),
        (5, gradients),
        (6, ed_direction),
        (7, substitution_property),
        (8, shipped_configs),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = Vec::new();
    for (n, f) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} PASS ({secs:.1} s): {detail}"),
            Err(detail) => {
                let known = KNOWN_RED.contains(&n);
                println!(
                    "criterion {n} FAIL{} ({secs:.1} s): {detail}",
                    if known { " [known, recorded]" } else { "" }
                );
                if !known {
                    unexpected.push(n);
                }
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn xor_constructive() -> Outcome {
    let (net, params) = constructive_network();
    let modes = net.uniform_modes(GateMode::Drelu);
    let points = grid_points(GRID_SIDE);
    let counter = GateCounter::new();
    let start = Instant::now();
    let eval = evaluate_points(&net, &params, &modes, &points, &counter).map_err(err)?;
    let elapsed = start.elapsed();
    let correct = points
        .iter()
        .zip(&eval)
        .filter(|(&(a, b), &(_, pred))| pred == usize::from(a * b < 0.0))
        .count();
    let n = points.len();
    ensure(n == 200 * 200, || format!("{n} grid points, expected 40000"))?;
    ensure(correct == n, || format!("{correct}/{n} correct"))?;
    ensure(counter.get() == n as u64, || format!("{} DReLU evaluations for {n} points", counter.get()))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{correct}/{n} correct, {} DReLU evaluations, {elapsed:.2?}", counter.get()))
}

// ---------------------------------------------------------------- 2

/// Best checkerboard accuracy reachable with one gate hyperplane: the
/// maximum of (4t − 3t² + 2)/4 over t in [0, 1].
fn single_line_optimum() -> f64 {
    (0..=100_000)
        .map(|i| {
            let t = i as f64 / 100_000.0;
            (4.0 * t - 3.0 * t * t + 2.0) / 4.0
        })
        .fold(0.0, f64::max)
}

fn xor_four_way() -> Outcome {
    let seeds: Vec<u64> = (0..5).collect();
    let runs = four_way_experiment(&XorRecipe::default(), &seeds).map_err(err)?;
    let acc = |v: XorVariant| -> Vec<f64> { runs.iter().filter(|r| r.0.variant == v).map(|r| r.0.grid_accuracy).collect() };
    let fmt = |xs: &[f64]| xs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");
    let count = |xs: &[f64], f: &dyn Fn(f64) -> bool| xs.iter().filter(|&&a| f(a)).count();
    let gelu = acc(XorVariant::DeepShareGelu);
    let single = acc(XorVariant::SingleRelu);
    let snl = acc(XorVariant::SnlStyle);
    let no_gelu = acc(XorVariant::DeepShareNoGelu);
    let optimum = single_line_optimum();
    let report = format!(
        "deepshare_gelu [{}], single_relu [{}], snl_style [{}], deepshare_no_gelu [{}]",
        fmt(&gelu),
        fmt(&single),
        fmt(&snl),
        fmt(&no_gelu)
    );
    ensure(count(&gelu, &|a| a >= 0.99) >= 4, || format!("GELU-phase variant below 0.99 too often; {report}"))?;
    ensure(count(&single, &|a| a <= 0.80) >= 4, || format!("single ReLU above 0.80 too often; {report}"))?;
    // Nothing with one hyperplane gate may beat the analytic optimum.
    let ceiling = optimum + 0.01;
    ensure(snl.iter().chain(&no_gelu).all(|&a| a <= ceiling), || {
        format!("a one-hyperplane model exceeded the {optimum:.4} optimum; {report}")
    })?;
    let snl_ok = count(&snl, &|a| a <= 0.80) >= 4;
    let no_gelu_ok = count(&no_gelu, &|a| a <= 0.80) >= 4;
    if snl_ok && no_gelu_ok {
        Ok(report)
    } else {
        Err(format!(
            "{report}. The 0.80 ceiling is below the best accuracy a single straight gate boundary \
             can reach on the checkerboard, {optimum:.4} (= 5/6). Both one-gate variants converge to \
             that optimum, so they exceed 0.80 while still failing to solve the task. The GELU and \
             single-ReLU parts hold."
        ))
    }
}

// ---------------------------------------------------------------- 3

fn corollary() -> Outcome {
    let draws = 2000;
    let start = Instant::now();
    let r = corollary_fuzz(draws, 0, &OracleConfig::default());
    let elapsed = start.elapsed();
    let detail = format!(
        "{draws} draws: {} agree, {} contradict, {} unresolved, {} marginal, {elapsed:.1?}",
        r.agreements, r.contradictions, r.unresolved, r.marginal
    );
    ensure(r.contradictions == 0, || format!("{detail}; first: {:?}", r.failures.first()))?;
    ensure(r.unresolved * 1000 <= draws, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 4

fn ledger() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut with_groups, mut archs) = (0, 0);
    while archs < 40 || with_groups < 10 {
        let arch = random_architecture(&mut rng);
        let shapes = arch.shapes().map_err(err)?;
        let sharing = archs % 2 == 0;
        let phi = build_groups(&shapes, sharing);
        let floor = minimal_budget(&shapes, &phi);
        let budget = rng.gen_range(floor..=baseline_count(&shapes));
        let alloc = allocate_budget(&shapes, &phi, budget, &BudgetSource::UniformRatio).map_err(err)?;
        let specs = build_specs(&shapes, &alloc.prototypes, &phi, true, sharing).map_err(err)?;
        let net = Network::new(arch, specs).map_err(err)?;

        // Sum over group leaders only, straight from the allocation.
        let expected: u64 = (0..shapes.len())
            .filter(|&l| phi[l] == l)
            .map(|l| (alloc.prototypes[l] * shapes[l].height * shapes[l].width) as u64)
            .sum();
        let static_total = gate_ledger(&net.specs, net.shapes()).total;

        let params = net.init_params(&mut rng);
        let n = rng.gen_range(1..=4);
        let [c, h, w] = net.arch.input;
        let x = Tensor::new([n, c, h, w], (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .map_err(err)?;
        let counter = GateCounter::new();
        net.logits(&params, &x, &net.uniform_modes(GateMode::Drelu), &counter)
            .map_err(err)?;
        ensure(static_total == expected && counter.get() == n as u64 * expected && expected <= budget, || {
            format!(
                "architecture {archs}: independent {expected}, ledger {static_total}, dynamic {} over {n} examples, budget {budget}",
                counter.get()
            )
        })?;
        with_groups += usize::from(phi.iter().enumerate().any(|(l, &p)| p != l));
        archs += 1;
    }
    Ok(format!("{archs} architectures, {with_groups} with multi-layer groups, all exact"))
}

// ---------------------------------------------------------------- 5

fn random_map<R: Rng>(rng: &mut R, c: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let p = rng.gen_range(1..=c);
    let pi = (0..c).map(|i| if i < p { i } else { rng.gen_range(0..p) }).collect();
    let alpha = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let beta = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (pi, alpha, beta)
}

fn random_tensor<R: Rng>(rng: &mut R, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `α[c]·DReLU(src[n, π(c), s]) + β[c]` as a plain array.
fn constant_mask(src: &Tensor, pi: &[usize], alpha: &[f64], beta: &[f64]) -> Vec<f64> {
    let [_, c, h, w]: [usize; 4] = src.shape().try_into().expect("4-d");
    let hw = h * w;
    (0..src.numel())
        .map(|i| {
            let (n, ch, s) = (i / (c * hw), (i / hw) % c, i % hw);
            alpha[ch] * drelu(src.data()[(n * c + pi[ch]) * hw + s]) + beta[ch]
        })
        .collect()
}

fn weighted_sum(g: &mut Graph, y: NodeId, up: &Tensor) -> Result<NodeId, String> {
    let u = g.constant(up.clone());
    let yu = g.mul(y, u).map_err(err)?;
    Ok(g.sum(yu))
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn drelu_blocking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let shape = |rng: &mut ChaCha8Rng, c| [2, c, rng.gen_range(1..=3), rng.gen_range(1..=3)];
    for trial in 0..30 {
        let c = rng.gen_range(1..=6);
        let s = shape(&mut rng, c);
        let (pi, alpha, beta) = random_map(&mut rng, c);
        let x = random_tensor(&mut rng, s, -1.0, 1.0);
        let up = random_tensor(&mut rng, s, -1.0, 1.0);

        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let a = g.constant(Tensor::from_vec(alpha.clone()));
        let b = g.constant(Tensor::from_vec(beta.clone()));
        let y = shared_relu(&mut g, xv, &pi, a, b, &vec![GateMode::Drelu; c], &GateCounter::new()).map_err(err)?;
        let loss = weighted_sum(&mut g, y, &up)?;
        g.backward(loss).map_err(err)?;
        let gated = g.grad(xv).expect("tracked").into_owned();

        let mut h = Graph::new();
        let xv = h.variable(x.clone());
        let m = h.constant(Tensor::new(s, constant_mask(&x, &pi, &alpha, &beta)).map_err(err)?);
        let y = h.mul(xv, m).map_err(err)?;
        let loss = weighted_sum(&mut h, y, &up)?;
        h.backward(loss).map_err(err)?;
        ensure(bitwise_eq(&gated, &h.grad(xv).expect("tracked")), || format!("single layer trial {trial}"))?;
    }

    // Two-layer group: both layers read their gates from the first.
    for trial in 0..30 {
        let c = rng.gen_range(1..=6);
        let s = shape(&mut rng, c);
        let (pi, a1, b1) = random_map(&mut rng, c);
        let (_, a2, b2) = random_map(&mut rng, c);
        let x1 = random_tensor(&mut rng, s, -1.0, 1.0);
        let x2 = random_tensor(&mut rng, s, -1.0, 1.0);
        let (u1, u2) = (random_tensor(&mut rng, s, -1.0, 1.0), random_tensor(&mut rng, s, -1.0, 1.0));

        let mut g = Graph::new();
        let (v1, v2) = (g.variable(x1.clone()), g.variable(x2.clone()));
        let ab = [(&a1, &b1), (&a2, &b2)].map(|(a, b)| {
            (g.constant(Tensor::from_vec(a.clone())), g.constant(Tensor::from_vec(b.clone())))
        });
        let modes = vec![vec![GateMode::Drelu; c]; 2];
        let ys = layer_shared_relu(&mut g, &[v1, v2], &pi, &ab, &modes, &GateCounter::new()).map_err(err)?;
        let l1 = weighted_sum(&mut g, ys[0], &u1)?;
        let l2 = weighted_sum(&mut g, ys[1], &u2)?;
        let loss = g.add(l1, l2).map_err(err)?;
        g.backward(loss).map_err(err)?;
        let (g1, g2) = (g.grad(v1).expect("tracked").into_owned(), g.grad(v2).expect("tracked").into_owned());

        let mut h = Graph::new();
        let (w1, w2) = (h.variable(x1.clone()), h.variable(x2.clone()));
        let m1 = h.constant(Tensor::new(s, constant_mask(&x1, &pi, &a1, &b1)).map_err(err)?);
        let m2 = h.constant(Tensor::new(s, constant_mask(&x1, &pi, &a2, &b2)).map_err(err)?);
        let y1 = h.mul(w1, m1).map_err(err)?;
        let y2 = h.mul(w2, m2).map_err(err)?;
        let l1 = weighted_sum(&mut h, y1, &u1)?;
        let l2 = weighted_sum(&mut h, y2, &u2)?;
        let loss = h.add(l1, l2).map_err(err)?;
        h.backward(loss).map_err(err)?;
        ensure(bitwise_eq(&g1, &h.grad(w1).expect("tracked")), || format!("group leader trial {trial}"))?;
        ensure(bitwise_eq(&g2, &h.grad(w2).expect("tracked")), || format!("group member trial {trial}"))?;
    }
    Ok("30 single-layer and 30 two-layer group cases bitwise equal".into())
}

/// Central differences on every coordinate; relative error with a unit floor.
fn gelu_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for gamma in [1.0, 4.0] {
        for _ in 0..100 {
            let c = rng.gen_range(1..=4);
            let s = [1, c, 1, 2];
            let (pi, alpha, beta) = random_map(&mut rng, c);
            let x = random_tensor(&mut rng, s, -2.0, 2.0);
            let up = random_tensor(&mut rng, s, -1.0, 1.0);
            let modes = vec![GateMode::GeluGate { gamma }; c];
            let eval = |x: &Tensor, grad: bool| -> Result<(f64, Vec<f64>), String> {
                let mut g = Graph::new();
                let xv = if grad { g.variable(x.clone()) } else { g.constant(x.clone()) };
                let a = g.constant(Tensor::from_vec(alpha.clone()));
                let b = g.constant(Tensor::from_vec(beta.clone()));
                let y = shared_relu(&mut g, xv, &pi, a, b, &modes, &GateCounter::new()).map_err(err)?;
                let loss = weighted_sum(&mut g, y, &up)?;
                let value = g.value(loss).data()[0];
                if !grad {
                    return Ok((value, Vec::new()));
                }
                g.backward(loss).map_err(err)?;
                Ok((value, g.grad(xv).expect("tracked").into_owned()))
            };
            let (_, analytic) = eval(&x, true)?;
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = x.clone();
                plus.data_mut()[i] += eps;
                let mut minus = x.clone();
                minus.data_mut()[i] -= eps;
                let numeric = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * eps);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0));
            }
        }
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    Ok(format!("worst relative error {worst:.2e} over 200 points"))
}

fn identity_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let net = Network::plain(Architecture::mlp(4, &[6, 5, 3], 3)).map_err(err)?;
    let params = net.init_params(&mut rng);
    for l in 0..net.layers() {
        let spec = &net.specs[l];
        ensure(spec.pi.iter().enumerate().all(|(i, &p)| i == p), || format!("layer {l}: π is not the identity"))?;
        let a = params.get(&format!("layer{l}.alpha")).ok_or("no alpha")?;
        let b = params.get(&format!("layer{l}.beta")).ok_or("no beta")?;
        ensure(a.value.data().iter().all(|&v| v == 1.0) && b.value.data().iter().all(|&v| v == 0.0), || {
            format!("layer {l}: affine is not (1, 0)")
        })?;
    }
    let n = 9;
    let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let logits = net
        .logits(
            &params,
            &Tensor::new([n, 4], x.clone()).map_err(err)?,
            &net.uniform_modes(GateMode::Drelu),
            &GateCounter::new(),
        )
        .map_err(err)?;
    let dense = |input: &[f64], name: &str, relu: bool| -> Vec<f64> {
        let wt = &params.get(&format!("{name}.weight")).expect("weight").value;
        let bias = params.get(&format!("{name}.bias")).expect("bias").value.data();
        let (k, m) = (wt.shape()[0], wt.shape()[1]);
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for i in 0..k {
                    s += input[r * k + i] * wt.data()[i * m + j];
                }
                let z = s + bias[j];
                out.push(if relu { z.max(0.0) } else { z });
            }
        }
        out
    };
    let mut h = x;
    for l in 0..net.layers() {
        h = dense(&h, &format!("layer{l}"), true);
    }
    let reference = dense(&h, "head", false);
    ensure(logits.data() == reference.as_slice(), || "logits differ from the hand-written MLP".into())?;
    Ok(format!("{} logits equal exactly", reference.len()))
}

fn gradients() -> Outcome {
    let parts = [("a", drelu_blocking()), ("b", gelu_gradients()), ("c", identity_reduction())];
    let text = parts
        .iter()
        .map(|(k, r)| match r {
            Ok(s) => format!("({k}) {s}"),
            Err(s) => format!("({k}) FAILED {s}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    if parts.iter().all(|p| p.1.is_ok()) {
        Ok(text)
    } else {
        Err(text)
    }
}

// ---------------------------------------------------------------- 6

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Trains the shipped grating recipe with every channel its own prototype,
/// so replicated gates cannot lower the aligned ED by construction.
fn ed_direction() -> Outcome {
    let base = configs_dir();
    let mut cfg = Config::load(&base.join("gratings.toml")).map_err(err)?;
    cfg.sharing.budget = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(0));
    let data = load_data(&cfg, &base, &mut rng).map_err(err)?;
    let built = build_network(&cfg, None, &base).map_err(err)?;
    let net = built.network;
    let params = net.init_params(&mut rng);
    let (schedule, start_drelu) = cfg.effective_schedule();
    let eval = data.eval.as_ref().ok_or("gratings config has no test split")?;
    let opts = TrainOptions {
        augment: data.augment,
        eval: Some(eval),
        start_drelu,
    };
    let out = run_training(&net, params, &schedule, &data.train, &opts, &mut rng).map_err(err)?;
    let accuracy = out.metrics.last().and_then(|m| m.eval_accuracy).unwrap_or(0.0);
    ensure(accuracy > 0.5, || format!("eval accuracy {accuracy:.3} is not above 0.5 (chance 0.25)"))?;

    let layers: Vec<usize> = (0..net.layers()).collect();
    let gates = net.record_gates(&out.params, &eval.inputs, &out.state.modes, &layers).map_err(err)?;
    let rows = ed_report(&gates, 6).map_err(err)?;
    let mut parts = vec![format!("eval accuracy {accuracy:.3}")];
    let mut ordered = true;
    for s in summarize(&rows, eval.len()) {
        let p = paired_permutation_p(&rows, s.layer, 2000, 6);
        ordered &= s.aligned_median < s.shuffled_median;
        parts.push(format!(
            "layer {} aligned {:.3} < shuffled {:.3} (p {:.4})",
            s.layer, s.aligned_median, s.shuffled_median, p
        ));
    }
    let detail = parts.join("; ");
    ensure(ordered, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn substitution_property() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 512,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (prop::collection::vec((1usize..=64, 0usize..=3), 1..=6), 1usize..=40);
    let result = runner.run(&strategy, |(layers, epochs)| {
        let gelu = GateMode::GeluGate { gamma: 1.0 };
        let mut state = SubstitutionState {
            modes: layers.iter().map(|&(g, lin)| vec![gelu; g + lin]).collect(),
            gated: layers.iter().map(|l| l.0).collect(),
        };
        let mut switched_at: Vec<Vec<Vec<usize>>> = layers.iter().map(|&(g, _)| vec![Vec::new(); g]).collect();
        let mut order: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
        for e in 0..epochs {
            let plan = substitution_plan(&state, e, epochs);
            for (l, chans) in plan.iter().enumerate() {
                for &c in chans {
                    prop_assert!(c < layers[l].0, "linear channel {} of layer {} scheduled", c, l);
                    switched_at[l][c].push(e);
                    order[l].push(c);
                }
            }
            state.apply(&plan).map_err(|e| TestCaseError::fail(e.to_string()))?;
        }
        for (l, chans) in switched_at.iter().enumerate() {
            prop_assert!(chans.iter().all(|v| v.len() == 1), "layer {}: {:?}", l, chans);
            let expected: Vec<usize> = (0..layers[l].0).rev().collect();
            prop_assert_eq!(&order[l], &expected, "layer {} not back-to-front", l);
            let last = chans.iter().map(|v| v[0]).max();
            prop_assert_eq!(last, Some(epochs - 1));
        }
        prop_assert!(state.modes.iter().zip(&state.gated).all(|(m, &g)| m[..g].iter().all(|x| x.is_drelu())
            && m[g..].iter().all(|x| !x.is_drelu())));
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    Ok("512 random layer sets and phase lengths".into())
}

// ---------------------------------------------------------------- 8

struct Phase {
    epochs: usize,
    lr: (f64, f64),
    scheduler: Scheduler,
}

struct Expected {
    file: &'static str,
    baseline: Option<u64>,
    batch: usize,
    momentum: f64,
    weight_decay: f64,
    gamma: f64,
    kd: Option<f64>,
    phases: [Phase; 3],
}

const fn ph(epochs: usize, start: f64, end: f64, scheduler: Scheduler) -> Phase {
    Phase {
        epochs,
        lr: (start, end),
        scheduler,
    }
}

fn table() -> Vec<Expected> {
    use Scheduler::*;
    let cifar = || {
        [
            ph(100, 0.05, 5e-4, Linear),
            ph(150, 1e-3, 1e-3, None),
            ph(120, 1e-3, 1e-5, Linear),
        ]
    };
    vec![
        Expected {
            file: "resnet18_cifar100.toml",
            baseline: Some(491_520),
            batch: 128,
            momentum: 0.9,
            weight_decay: 0.001,
            gamma: 1.0,
            kd: Some(4.0),
            phases: cifar(),
        },
        Expected {
            file: "wrn22_8_cifar100.toml",
            baseline: Some(1_359_872),
            batch: 128,
            momentum: 0.9,
            weight_decay: 0.001,
            gamma: 1.0,
            kd: Some(4.0),
            phases: cifar(),
        },
        Expected {
            file: "resnet18_tinyimagenet.toml",
            baseline: Some(1_966_080),
            batch: 128,
            momentum: 0.9,
            weight_decay: 0.001,
            gamma: 1.0,
            kd: Some(4.0),
            phases: [
                ph(100, 0.05, 1e-5, Cosine),
                ph(150, 1e-4, 1e-4, None),
                ph(150, 1e-3, 1e-5, Cosine),
            ],
        },
        Expected {
            file: "mobilenetv2_ade20k.toml",
            baseline: Option::None,
            batch: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            gamma: 4.0,
            kd: Option::None,
            phases: [
                ph(190, 0.005, 1e-4, Poly),
                ph(100, 1e-4, 1e-4, None),
                ph(100, 1e-4, 5e-6, Linear),
            ],
        },
    ]
}

fn check_config(e: &Expected) -> Result<String, String> {
    let path = configs_dir().join(e.file);
    let cfg = Config::load(&path).map_err(err)?;
    let shapes = cfg.model.architecture().shapes().map_err(err)?;
    let baseline = baseline_count(&shapes);
    if let Some(b) = e.baseline {
        ensure(baseline == b, || format!("{}: baseline {baseline}, expected {b}", e.file))?;
    }
    let budget = cfg.sharing.budget.ok_or_else(|| format!("{}: no budget", e.file))?;
    let phi = build_groups(&shapes, cfg.sharing.layer_sharing);
    let floor = minimal_budget(&shapes, &phi);
    ensure(floor <= budget && budget <= baseline, || {
        format!("{}: budget {budget} outside [{floor}, {baseline}]", e.file)
    })?;
    let alloc = allocate_budget(&shapes, &phi, budget, &BudgetSource::UniformRatio).map_err(err)?;
    ensure(alloc.total <= budget, || format!("{}: allocation {} over budget", e.file, alloc.total))?;

    let s = &cfg.schedule;
    ensure(s.batch_size == e.batch && s.momentum == e.momentum && s.weight_decay == e.weight_decay, || {
        format!("{}: optimizer settings differ", e.file)
    })?;
    ensure(s.gamma == e.gamma, || format!("{}: gamma {}", e.file, s.gamma))?;
    match e.kd {
        Some(t) => ensure(s.kd.enabled && s.kd.temperature == t && s.kd.gelu_teacher, || {
            format!("{}: KD settings differ", e.file)
        })?,
        Option::None => ensure(!s.kd.enabled, || format!("{}: KD should be off", e.file))?,
    }
    for (name, got, want) in [
        ("gelu_phase", &s.gelu_phase, &e.phases[0]),
        ("substitution", &s.substitution, &e.phases[1]),
        ("finetune", &s.finetune, &e.phases[2]),
    ] {
        ensure(
            got.epochs == want.epochs
                && got.lr_start == want.lr.0
                && got.end() == want.lr.1
                && got.scheduler == want.scheduler,
            || format!("{}: {name} differs", e.file),
        )?;
    }
    let ab = &cfg.ablation;
    ensure(
        !(ab.no_affine || ab.no_layer_sharing || ab.no_budget || ab.no_replicates || ab.no_gelu_phase),
        || format!("{}: an ablation flag is set", e.file),
    )?;
    Ok(format!("{} ({} of {baseline})", e.file, alloc.total))
}

fn shipped_configs() -> Outcome {
    let mut checked = Vec::new();
    for e in table() {
        checked.push(check_config(&e)?);
    }
    let mut toy = 0;
    for entry in std::fs::read_dir(configs_dir()).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.extension().is_some_and(|x| x == "toml") {
            Config::load(&path).map_err(err)?;
            toy += 1;
        }
    }
    ensure(toy >= checked.len(), || "configs directory is incomplete".into())?;
    Ok(format!(
        "{toy} configs parse; recipes match for {}. Not reproduced here: full-scale classification \
         accuracies (e.g. 77.98% at 49.9K ReLUs on CIFAR-100), ablation accuracies, private-inference \
         latency speedups and ADE20K mIoU",
        checked.join(", ")
    ))
}
