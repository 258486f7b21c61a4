//! The checkerboard problem: a constructive one-gate solution, the four-way
//! training comparison, and the boundary taxonomy of one-ReLU score functions.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gates::{GateCounter, GateMode};
use crate::model::{Architecture, Network, ParamStore};
use crate::sharing::{build_specs, GateSpec};
use crate::tensor::Tensor;
use crate::training::{run_training, KdSettings, PhaseSchedule, TrainOptions, TrainingSchedule};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckerboardSample {
    pub x1: f64,
    pub x2: f64,
    pub label: usize,
}

/// 1 iff the coordinates have opposite signs; `None` on an axis.
pub fn checkerboard_label(x1: f64, x2: f64) -> Option<usize> {
    if x1 == 0.0 || x2 == 0.0 {
        None
    } else {
        Some(((x1 > 0.0) != (x2 > 0.0)) as usize)
    }
}

pub fn make_checkerboard<R: Rng>(n: usize, rng: &mut R) -> Vec<CheckerboardSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (x1, x2) = (rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        if let Some(label) = checkerboard_label(x1, x2) {
            out.push(CheckerboardSample { x1, x2, label });
        }
    }
    out
}

pub fn checkerboard_dataset(samples: &[CheckerboardSample]) -> Dataset {
    let data = samples.iter().flat_map(|s| [s.x1, s.x2]).collect();
    let inputs = Tensor::new([samples.len(), 2], data).expect("two coordinates per sample");
    Dataset::new(inputs, samples.iter().map(|s| s.label).collect(), 2).expect("binary labels")
}

/// Off-axis points of the `side × side` lattice over `[−1,1]²`.
pub fn grid_points(side: usize) -> Vec<(f64, f64)> {
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (side - 1) as f64;
    let mut pts = Vec::new();
    for i in 0..side {
        for j in 0..side {
            // the middle index is exactly zero for odd sides
            if 2 * i + 1 != side && 2 * j + 1 != side {
                pts.push((coord(i), coord(j)));
            }
        }
    }
    pts
}

pub const GRID_SIDE: usize = 201;

/// One dense layer of two units sharing a single prototype gate, with the
/// hand-set weights that solve the checkerboard.
pub fn constructive_network() -> (Network, ParamStore) {
    let arch = Architecture::mlp(2, &[2], 2);
    let shapes = arch.shapes().expect("valid");
    let specs = build_specs(&shapes, &[1], &[0], true, false).expect("valid");
    let net = Network::new(arch, specs).expect("valid");
    let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let set = |p: &mut ParamStore, name: &str, v: &[f64]| {
        p.get_mut(name).expect("param").value.data_mut().copy_from_slice(v);
    };
    set(&mut params, "layer0.weight", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut params, "layer0.bias", &[0.0, 0.0]);
    set(&mut params, "layer0.alpha", &[1.0, -2.0]);
    set(&mut params, "layer0.beta", &[0.0, 1.0]);
    // logits (0, f): class 1 exactly when f > 0
    set(&mut params, "head.weight", &[0.0, 0.0, 0.0, 1.0]);
    set(&mut params, "head.bias", &[0.0, 0.0]);
    (net, params)
}

/// Score `logit₁ − logit₀` and prediction for each point.
pub fn evaluate_points(
    net: &Network,
    params: &ParamStore,
    modes: &[Vec<GateMode>],
    points: &[(f64, f64)],
    counter: &GateCounter,
) -> Result<Vec<(f64, usize)>> {
    let data = points.iter().flat_map(|&(a, b)| [a, b]).collect();
    let x = Tensor::new([points.len(), 2], data)?;
    let logits = net.logits(params, &x, modes, counter)?;
    Ok(logits
        .data()
        .chunks(2)
        .map(|r| (r[1] - r[0], (r[1] > r[0]) as usize))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub points: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub drelu_evaluations: u64,
}

pub fn grid_accuracy(net: &Network, params: &ParamStore, modes: &[Vec<GateMode>], side: usize) -> Result<GridResult> {
    let points = grid_points(side);
    let counter = GateCounter::new();
    let eval = evaluate_points(net, params, modes, &points, &counter)?;
    let correct = points
        .iter()
        .zip(&eval)
        .filter(|(&(a, b), &(_, p))| checkerboard_label(a, b) == Some(p))
        .count();
    Ok(GridResult {
        accuracy: correct as f64 / points.len() as f64,
        scores: eval.iter().map(|e| e.0).collect(),
        predictions: eval.iter().map(|e| e.1).collect(),
        drelu_evaluations: counter.get(),
        points,
    })
}

pub fn write_grid_csv<W: Write>(out: W, grid: &GridResult) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        x1: f64,
        x2: f64,
        score: f64,
        prediction: usize,
        label: usize,
    }
    let mut w = csv::Writer::from_writer(out);
    for (i, &(x1, x2)) in grid.points.iter().enumerate() {
        w.serialize(Row {
            x1,
            x2,
            score: grid.scores[i],
            prediction: grid.predictions[i],
            label: checkerboard_label(x1, x2).expect("off-axis"),
        })
        .map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("grid", e))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XorVariant {
    SingleRelu,
    SnlStyle,
    #[serde(rename = "deepshare_no_gelu")]
    DeepShareNoGelu,
    #[serde(rename = "deepshare_gelu")]
    DeepShareGelu,
}

impl XorVariant {
    pub const ALL: [XorVariant; 4] = [
        XorVariant::SingleRelu,
        XorVariant::SnlStyle,
        XorVariant::DeepShareNoGelu,
        XorVariant::DeepShareGelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            XorVariant::SingleRelu => "single_relu",
            XorVariant::SnlStyle => "snl_style",
            XorVariant::DeepShareNoGelu => "deepshare_no_gelu",
            XorVariant::DeepShareGelu => "deepshare_gelu",
        }
    }

    /// Every variant carries exactly one gate per example.
    pub fn network(self) -> Network {
        let (arch, specs): (Architecture, Vec<GateSpec>) = match self {
            XorVariant::SingleRelu => {
                let arch = Architecture::mlp(2, &[1], 2);
                let specs = vec![GateSpec::plain(0, 1)];
                (arch, specs)
            }
            XorVariant::SnlStyle => {
                let mut arch = Architecture::mlp(2, &[9], 2);
                arch.layers[0].linear_channels = 8;
                let shapes = arch.shapes().expect("valid");
                (arch, build_specs(&shapes, &[1], &[0], false, false).expect("valid"))
            }
            XorVariant::DeepShareNoGelu | XorVariant::DeepShareGelu => {
                let arch = Architecture::mlp(2, &[2], 2);
                let shapes = arch.shapes().expect("valid");
                (arch, build_specs(&shapes, &[1], &[0], true, false).expect("valid"))
            }
        };
        Network::new(arch, specs).expect("valid")
    }
}

/// Training recipe shared by the four variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XorRecipe {
    pub points: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Split of `epochs` for the variant with the transitional phase.
    pub gelu_epochs: usize,
    pub substitution_epochs: usize,
    pub gamma: f64,
}

impl Default for XorRecipe {
    fn default() -> Self {
        XorRecipe {
            points: 800,
            epochs: 5000,
            lr: 0.1,
            batch_size: 32,
            gelu_epochs: 4000,
            substitution_epochs: 500,
            gamma: 8.0,
        }
    }
}

impl XorRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.batch_size == 0 {
            return Err(Error::config("XOR recipe needs points and a positive batch size"));
        }
        if self.gelu_epochs + self.substitution_epochs > self.epochs {
            return Err(Error::config(format!(
                "GELU ({}) and substitution ({}) epochs exceed the {} total",
                self.gelu_epochs, self.substitution_epochs, self.epochs
            )));
        }
        Ok(())
    }

    fn schedule(&self, variant: XorVariant) -> (TrainingSchedule, bool) {
        let constant = |e| PhaseSchedule::constant(e, self.lr);
        let (g, s, f) = match variant {
            XorVariant::DeepShareGelu => (
                self.gelu_epochs,
                self.substitution_epochs,
                self.epochs - self.gelu_epochs - self.substitution_epochs,
            ),
            _ => (0, 0, self.epochs),
        };
        let sched = TrainingSchedule {
            gelu_phase: constant(g),
            substitution: constant(s),
            finetune: constant(f),
            batch_size: self.batch_size,
            momentum: 0.0,
            weight_decay: 0.0,
            gamma: self.gamma,
            kd: KdSettings::default(),
        };
        (sched, variant != XorVariant::DeepShareGelu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XorRun {
    pub variant: XorVariant,
    pub seed: u64,
    pub grid_accuracy: f64,
    pub train_accuracy: f64,
    pub gates_per_example: f64,
}

/// Trains one variant on the seed's checkerboard sample.
pub fn train_variant(variant: XorVariant, recipe: &XorRecipe, seed: u64) -> Result<(XorRun, GridResult)> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = checkerboard_dataset(&make_checkerboard(recipe.points, &mut rng));
    let net = variant.network();
    let params = net.init_params(&mut rng);
    let (sched, start_drelu) = recipe.schedule(variant);
    let opts = TrainOptions {
        start_drelu,
        ..Default::default()
    };
    let out = run_training(&net, params, &sched, &data, &opts, &mut rng).map_err(|e| match e {
        crate::training::TrainFailure::Invalid(e) => e,
        other => Error::Numeric(other.to_string()),
    })?;
    let grid = grid_accuracy(&net, &out.params, &out.state.modes, GRID_SIDE)?;
    let train_accuracy = crate::training::accuracy_on(&net, &out.params, &data, &out.state.modes)?;
    Ok((
        XorRun {
            variant,
            seed,
            grid_accuracy: grid.accuracy,
            train_accuracy,
            gates_per_example: grid.drelu_evaluations as f64 / grid.points.len() as f64,
        },
        grid,
    ))
}

/// All four variants over the given seeds, one thread per run.
pub fn four_way_experiment(recipe: &XorRecipe, seeds: &[u64]) -> Result<Vec<(XorRun, GridResult)>> {
    let jobs: Vec<(XorVariant, u64)> = seeds
        .iter()
        .flat_map(|&s| XorVariant::ALL.map(|v| (v, s)))
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(v, s)| scope.spawn(move || train_variant(v, recipe, s)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread")).collect()
    })
}

pub fn write_summary_csv<W: Write>(out: W, runs: &[XorRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        w.serialize(r).map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("summary", e))
}

// ---------------------------------------------------------------------------
// Boundary taxonomy of f(x) = a·relu(wᵀx + b) + vᵀx + c

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnlScoreParams {
    pub a: f64,
    pub w: [f64; 2],
    pub b: f64,
    pub v: [f64; 2],
    pub c: f64,
}

impl SnlScoreParams {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let pre = self.w[0] * x[0] + self.w[1] * x[1] + self.b;
        self.a * pre.max(0.0) + self.v[0] * x[0] + self.v[1] * x[1] + self.c
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundaryShape {
    Empty,
    SingleLine,
    TwoParallelLines,
    TwoPiecePiecewiseLinear,
}

/// Relative tolerance for treating two normals as parallel.
const PARALLEL_EPS: f64 = 1e-9;

type V2 = [f64; 2];

fn dot(a: V2, b: V2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
fn cross(a: V2, b: V2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}
fn norm(a: V2) -> f64 {
    a[0].hypot(a[1])
}
fn parallel(a: V2, b: V2) -> bool {
    cross(a, b).abs() <= PARALLEL_EPS * norm(a) * norm(b)
}

#[derive(Copy, Clone, Debug, PartialEq)]
enum Piece {
    Line { point: V2, dir: V2 },
    Ray { origin: V2, dir: V2 },
}

impl Piece {
    fn dir(&self) -> V2 {
        match *self {
            Piece::Line { dir, .. } | Piece::Ray { dir, .. } => dir,
        }
    }
    fn anchor(&self) -> V2 {
        match *self {
            Piece::Line { point, .. } => point,
            Piece::Ray { origin, .. } => origin,
        }
    }
}

/// Zero set of the affine piece `nᵀx + d` restricted to `side·(wᵀx + b) ≥ 0`.
fn piece(n: V2, d: f64, w: V2, b: f64, side: f64) -> Option<Piece> {
    let nn = dot(n, n);
    if nn == 0.0 {
        // identically zero on the half-plane: its edge bounds the zero region
        return (d == 0.0).then(|| {
            let ww = dot(w, w);
            Piece::Line {
                point: [-b * w[0] / ww, -b * w[1] / ww],
                dir: [-w[1], w[0]],
            }
        });
    }
    let p0 = [-d * n[0] / nn, -d * n[1] / nn];
    let dir = [-n[1], n[0]];
    if parallel(n, w) {
        let h = dot(w, p0) + b;
        let inside = side * h >= -PARALLEL_EPS * norm(w) * (1.0 + norm(p0));
        return inside.then_some(Piece::Line { point: p0, dir });
    }
    // crossing point with the kink line, then the half pointing into the side
    let t = -(dot(w, p0) + b) / dot(w, dir);
    let origin = [p0[0] + t * dir[0], p0[1] + t * dir[1]];
    let dir = if side * dot(w, dir) >= 0.0 { dir } else { [-dir[0], -dir[1]] };
    Some(Piece::Ray { origin, dir })
}

fn pieces(p: &SnlScoreParams) -> Vec<Piece> {
    let minus = piece(p.v, p.c, p.w, p.b, -1.0);
    let n_plus = [p.v[0] + p.a * p.w[0], p.v[1] + p.a * p.w[1]];
    let plus = piece(n_plus, p.c + p.a * p.b, p.w, p.b, 1.0);
    minus.into_iter().chain(plus).collect()
}

fn same_line(a: &Piece, b: &Piece) -> bool {
    let (da, db) = (a.dir(), b.dir());
    if !parallel(da, db) {
        return false;
    }
    let off = [b.anchor()[0] - a.anchor()[0], b.anchor()[1] - a.anchor()[1]];
    cross(da, off).abs() <= PARALLEL_EPS * norm(da) * (1.0 + norm(off))
}

fn shape_of(ps: &[Piece]) -> BoundaryShape {
    match ps {
        [] => BoundaryShape::Empty,
        [_] => BoundaryShape::SingleLine,
        [a, b] if same_line(a, b) => BoundaryShape::SingleLine,
        [Piece::Line { dir: da, .. }, Piece::Line { dir: db, .. }] if parallel(*da, *db) => {
            BoundaryShape::TwoParallelLines
        }
        _ => BoundaryShape::TwoPiecePiecewiseLinear,
    }
}

/// Global shape of `{f = 0}` from the two affine pieces on either side of the
/// kink line. A zero `w` leaves a purely affine function.
pub fn classify_snl_boundary(p: &SnlScoreParams) -> BoundaryShape {
    if p.w == [0.0, 0.0] {
        // a constant function has no sign change, zero or not
        return if p.v != [0.0, 0.0] {
            BoundaryShape::SingleLine
        } else {
            BoundaryShape::Empty
        };
    }
    shape_of(&pieces(p))
}

/// Windowed view: pieces clipped to `[−r, r]²`. Pieces whose visible length
/// is positive but under `min_len` are reported separately, since a finite
/// raster may or may not pick them up.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedShape {
    pub shape: BoundaryShape,
    /// Shape if the marginal pieces are counted as visible.
    pub with_marginal: BoundaryShape,
    pub marginal: usize,
}

fn clip_length(pc: &Piece, r: f64) -> f64 {
    let (p, d) = (pc.anchor(), pc.dir());
    let (mut lo, mut hi) = match pc {
        Piece::Line { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        Piece::Ray { .. } => (0.0, f64::INFINITY),
    };
    for k in 0..2 {
        if d[k] == 0.0 {
            if p[k].abs() > r {
                return 0.0;
            }
            continue;
        }
        let (t1, t2) = ((-r - p[k]) / d[k], (r - p[k]) / d[k]);
        lo = lo.max(t1.min(t2));
        hi = hi.min(t1.max(t2));
    }
    ((hi - lo).max(0.0)) * norm(d)
}

pub fn classify_windowed(p: &SnlScoreParams, r: f64, min_len: f64) -> WindowedShape {
    if p.w == [0.0, 0.0] {
        let s = classify_snl_boundary(p);
        return WindowedShape {
            shape: s,
            with_marginal: s,
            marginal: 0,
        };
    }
    let all = pieces(p);
    let mut vis = Vec::new();
    let mut with_marg = Vec::new();
    let mut marginal = 0;
    for pc in &all {
        let len = clip_length(pc, r);
        if len >= min_len {
            vis.push(*pc);
            with_marg.push(*pc);
        } else if len > 0.0 {
            marginal += 1;
            with_marg.push(*pc);
        }
    }
    WindowedShape {
        shape: shape_of(&vis),
        with_marginal: shape_of(&with_marg),
        marginal,
    }
}

/// Outcome of rasterizing sign(f).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OracleShape {
    Shape(BoundaryShape),
    /// A pattern outside the taxonomy, such as crossing lines.
    Other,
    Unresolved,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub half_width: f64,
    pub resolution: usize,
    /// Factor applied once when the first raster is ambiguous.
    pub widen: usize,
    pub angle_tol: f64,
    pub inlier_tol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            half_width: 2.0,
            resolution: 512,
            widen: 4,
            angle_tol: 1e-3,
            inlier_tol: 1e-7,
        }
    }
}

enum Raster {
    Clear(OracleShape),
    Ambiguous,
}

/// Black-box boundary classifier: samples `f` on a lattice, locates sign
/// changes along lattice edges, and fits lines through them.
pub fn boundary_oracle<F: Fn([f64; 2]) -> f64>(f: F, cfg: &OracleConfig) -> OracleShape {
    match raster_classify(&f, cfg, cfg.resolution) {
        Raster::Clear(s) => s,
        Raster::Ambiguous => match raster_classify(&f, cfg, cfg.resolution * cfg.widen) {
            Raster::Clear(s) => s,
            Raster::Ambiguous => OracleShape::Unresolved,
        },
    }
}

fn zero_crossings<F: Fn([f64; 2]) -> f64>(f: &F, r: f64, n: usize) -> Vec<V2> {
    let h = 2.0 * r / n as f64;
    let coord = |i: usize| -r + h * i as f64;
    let vals: Vec<f64> = (0..=n)
        .flat_map(|i| (0..=n).map(move |j| (i, j)))
        .map(|(i, j)| f([coord(i), coord(j)]))
        .collect();
    let at = |i: usize, j: usize| vals[i * (n + 1) + j];
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut pts = Vec::new();
    for i in 0..=n {
        for j in 0..=n {
            let v = at(i, j);
            let p = [coord(i), coord(j)];
            if v == 0.0 {
                pts.push(p);
                continue;
            }
            for (di, dj) in [(1usize, 0usize), (0, 1)] {
                let (ni, nj) = (i + di, j + dj);
                if ni > n || nj > n {
                    continue;
                }
                let u = at(ni, nj);
                if v * u >= 0.0 {
                    continue;
                }
                let q = [coord(ni), coord(nj)];
                if let Some(z) = locate_zero(f, p, q, v, u, 1e-12 * scale) {
                    pts.push(z);
                }
            }
        }
    }
    pts
}

/// Zero of `f` on the segment `p→q` whose end values have opposite signs.
/// A two-piece affine function has exactly one such zero; bisection narrows
/// the segment until it no longer contains the kink, then interpolates.
fn locate_zero<F: Fn([f64; 2]) -> f64>(f: &F, mut p: V2, mut q: V2, mut v: f64, mut u: f64, tol: f64) -> Option<V2> {
    for _ in 0..60 {
        let m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        let fm = f(m);
        if (fm - (v + u) / 2.0).abs() <= tol {
            let t = v / (v - u);
            return Some([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
        if fm == 0.0 {
            return Some(m);
        }
        if (v < 0.0) != (fm < 0.0) {
            (q, u) = (m, fm);
        } else {
            (p, v) = (m, fm);
        }
    }
    None
}

struct FittedLine {
    point: V2,
    dir: V2,
    members: Vec<V2>,
}

fn tls_fit(pts: &[V2]) -> (V2, V2) {
    let n = pts.len() as f64;
    let m = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in pts {
        let (dx, dy) = (p[0] - m[0], p[1] - m[1]);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    (m, [theta.cos(), theta.sin()])
}

fn dist_to_line(p: V2, point: V2, dir: V2) -> f64 {
    cross(dir, [p[0] - point[0], p[1] - point[1]]).abs()
}

/// Greedy line extraction: seeds in lexicographic order, each tried against a
/// few nearest unassigned neighbours, keeping the candidate with the most
/// inliers. Leftover points join any fitted line they lie on; the rest are strays.
fn extract_lines(pts: &[V2], tol: f64) -> (Vec<FittedLine>, usize) {
    const NEIGHBOURS: usize = 6;
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].partial_cmp(&pts[b]).expect("finite"));
    let mut assigned = vec![false; pts.len()];
    let mut lines: Vec<FittedLine> = Vec::new();
    let inliers = |assigned: &[bool], point: V2, dir: V2| -> Vec<usize> {
        (0..pts.len())
            .filter(|&m| !assigned[m] && dist_to_line(pts[m], point, dir) <= tol)
            .collect()
    };
    for &seed in &order {
        if assigned[seed] {
            continue;
        }
        let p0 = pts[seed];
        let mut near: Vec<(usize, f64)> = (0..pts.len())
            .filter(|&k| k != seed && !assigned[k])
            .map(|k| {
                let d = [pts[k][0] - p0[0], pts[k][1] - p0[1]];
                (k, dot(d, d))
            })
            .filter(|&(_, d2)| d2 > 0.0)
            .collect();
        near.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite"));
        let mut best: Option<(V2, V2, Vec<usize>)> = None;
        for &(k, d2) in near.iter().take(NEIGHBOURS) {
            let d = d2.sqrt();
            let (mut point, mut dir) = (p0, [(pts[k][0] - p0[0]) / d, (pts[k][1] - p0[1]) / d]);
            let mut members = inliers(&assigned, point, dir);
            for _ in 0..3 {
                if members.len() < 3 {
                    break;
                }
                let sel: Vec<V2> = members.iter().map(|&m| pts[m]).collect();
                (point, dir) = tls_fit(&sel);
                members = inliers(&assigned, point, dir);
            }
            if members.len() >= 3 && members.contains(&seed) && best.as_ref().is_none_or(|b| members.len() > b.2.len()) {
                best = Some((point, dir, members));
            }
        }
        if let Some((point, dir, members)) = best {
            for &m in &members {
                assigned[m] = true;
            }
            lines.push(FittedLine {
                point,
                dir,
                members: members.iter().map(|&m| pts[m]).collect(),
            });
        }
    }
    let mut strays = 0;
    for (_, p) in pts.iter().enumerate().filter(|(i, _)| !assigned[*i]) {
        match lines.iter_mut().find(|l| dist_to_line(*p, l.point, l.dir) <= tol) {
            Some(l) => l.members.push(*p),
            None => strays += 1,
        }
    }
    (lines, strays)
}

fn raster_classify<F: Fn([f64; 2]) -> f64>(f: &F, cfg: &OracleConfig, n: usize) -> Raster {
    let pts = zero_crossings(f, cfg.half_width, n);
    // coincident crossings (a zero lattice node reached twice) count once
    let mut pts = pts;
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    pts.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if pts.is_empty() {
        return Raster::Clear(OracleShape::Shape(BoundaryShape::Empty));
    }
    let (lines, strays) = extract_lines(&pts, cfg.inlier_tol);
    if strays > 0 {
        return Raster::Ambiguous;
    }
    let h = 2.0 * cfg.half_width / n as f64;
    match lines.as_slice() {
        [] => Raster::Clear(OracleShape::Shape(BoundaryShape::Empty)),
        [_] => Raster::Clear(OracleShape::Shape(BoundaryShape::SingleLine)),
        [l1, l2] => {
            let angle = cross(l1.dir, l2.dir).abs().asin();
            let q = (angle > 0.0).then(|| {
                let off = [l2.point[0] - l1.point[0], l2.point[1] - l1.point[1]];
                let t = cross(off, l2.dir) / cross(l1.dir, l2.dir);
                [l1.point[0] + t * l1.dir[0], l1.point[1] + t * l1.dir[1]]
            });
            // extent of each member set along l1's direction, measured from q
            let span = |l: &FittedLine, q: V2| {
                l.members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                    let t = dot([m[0] - q[0], m[1] - q[1]], l1.dir);
                    (lo.min(t), hi.max(t))
                })
            };
            let slack = 2.0 * h;
            let ray = |(lo, hi): (f64, f64)| lo >= -slack || hi <= slack;
            let two_piece = Raster::Clear(OracleShape::Shape(BoundaryShape::TwoPiecePiecewiseLinear));
            if angle >= 3.0 * cfg.angle_tol {
                let q = q.expect("lines cross");
                if ray(span(l1, q)) && ray(span(l2, q)) {
                    two_piece
                } else {
                    Raster::Clear(OracleShape::Other)
                }
            } else {
                // nearly parallel: a slight bend has its halves on opposite sides of q
                let opposite = q.is_some_and(|q| {
                    let (s1, s2) = (span(l1, q), span(l2, q));
                    (s1.1 <= slack && s2.0 >= -slack) || (s1.0 >= -slack && s2.1 <= slack)
                });
                if opposite {
                    two_piece
                } else if angle < cfg.angle_tol / 3.0 {
                    Raster::Clear(OracleShape::Shape(BoundaryShape::TwoParallelLines))
                } else {
                    Raster::Ambiguous
                }
            }
        }
        _ => Raster::Clear(OracleShape::Other),
    }
}

/// Random score parameters: mostly generic, with some draws forced onto the
/// parallel family and some with no ReLU contribution.
pub fn random_snl_params<R: Rng>(rng: &mut R) -> SnlScoreParams {
    let mut u = || rng.gen_range(-1.0..1.0);
    let w = [u(), u()];
    let (a, b, c) = (2.0 * u(), u(), u());
    let pick = u();
    if pick < -0.4 {
        let k = 2.0 * u();
        SnlScoreParams {
            a,
            w,
            b,
            v: [k * w[0], k * w[1]],
            c,
        }
    } else if pick < -0.2 {
        SnlScoreParams { a: 0.0, w, b, v: [u(), u()], c }
    } else {
        SnlScoreParams { a, w, b, v: [u(), u()], c }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FuzzReport {
    pub draws: usize,
    pub agreements: usize,
    pub contradictions: usize,
    pub unresolved: usize,
    /// Draws with a piece barely inside the window.
    pub marginal: usize,
    /// Draws whose windowed shape differs from the whole-plane shape.
    pub clipped: usize,
    pub failures: Vec<(SnlScoreParams, BoundaryShape, OracleShape)>,
}

/// Compares the analytic taxonomy with the raster oracle over random draws.
pub fn corollary_fuzz(draws: usize, seed: u64, cfg: &OracleConfig) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<SnlScoreParams> = (0..draws).map(|_| random_snl_params(&mut rng)).collect();
    let min_len = 8.0 * cfg.half_width / cfg.resolution as f64;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let chunk = draws.div_ceil(threads.max(1)).max(1);
    let results: Vec<(WindowedShape, OracleShape, BoundaryShape)> = std::thread::scope(|s| {
        let handles: Vec<_> = params
            .chunks(chunk)
            .map(|ps| {
                s.spawn(move || {
                    ps.iter()
                        .map(|p| {
                            let win = classify_windowed(p, cfg.half_width, min_len);
                            let oracle = boundary_oracle(|x| p.eval(x), cfg);
                            (win, oracle, classify_snl_boundary(p))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("fuzz thread")).collect()
    });
    let mut rep = FuzzReport {
        draws,
        ..Default::default()
    };
    for (p, (win, oracle, global)) in params.iter().zip(results) {
        rep.marginal += (win.marginal > 0) as usize;
        rep.clipped += (win.shape != global) as usize;
        match oracle {
            OracleShape::Unresolved => rep.unresolved += 1,
            OracleShape::Shape(s) if s == win.shape || s == win.with_marginal => rep.agreements += 1,
            other => {
                rep.contradictions += 1;
                rep.failures.push((*p, win.shape, other));
            }
        }
    }
    rep
}
