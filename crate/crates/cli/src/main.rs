use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepshare::analytics::{ed_report, paired_permutation_p, summarize, write_ed_csv, write_summary_csv};
use deepshare::checkpoint::Checkpoint;
use deepshare::config::Config;
use deepshare::data::load_records;
use deepshare::gates::GateMode;
use deepshare::model::Network;
use deepshare::run::{
    importance_of, init_importance, load_data, read_shapes_csv, train_from_config, write_allocation_csv, Outputs,
};
use deepshare::sharing::{
    allocate_budget, baseline_count, build_groups, build_specs, gate_ledger, read_budget_file, write_budget_file,
    write_ledger_csv, BudgetSource, LayerShape,
};
use deepshare::xor::{self, XorRecipe};
use deepshare::{verify, Error, Result};

#[derive(Parser)]
#[command(
    name = "deepshare",
    version,
    about = "Shared-gate ReLU networks: training, budgets and gate analysis",
    after_help = "Relative data paths in a config resolve under $DEEPSHARE_DATA when it is set, otherwise next to the config.\nExit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort."
)]
struct Cli {
    /// Seed for every random draw; defaults to the config's seed, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network a config describes.
    Train,
    /// Checkerboard experiments.
    Xor(XorArgs),
    /// Effective dimension of gate vectors from a checkpoint.
    AnalyzeGates(AnalyzeArgs),
    /// Allocate prototype counts under a gate budget.
    Budget(BudgetArgs),
    /// Run the invariant suite.
    Verify,
}

#[derive(Args)]
struct XorArgs {
    /// Only evaluate the hand-built single-gate network.
    #[arg(long, conflicts_with = "corollary_fuzz")]
    construct_only: bool,
    /// Compare the boundary taxonomy against the raster oracle on N draws.
    #[arg(long, value_name = "N")]
    corollary_fuzz: Option<usize>,
    /// Consecutive seeds to train, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Shorter runs: total epochs, phases scaled proportionally.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary record shard; otherwise the --config data is used.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    label_bytes: usize,
    /// Layers to analyze, comma separated; all layers by default.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    n_examples: usize,
    /// Permutations for the paired sign-flip test per layer.
    #[arg(long, default_value_t = 2000)]
    permutations: usize,
}

#[derive(Copy, Clone, ValueEnum)]
enum Source {
    UniformRatio,
    Importance,
    External,
}

#[derive(Args)]
struct BudgetArgs {
    /// CSV with header `layer,channels,height,width`.
    #[arg(long, conflicts_with = "checkpoint")]
    shapes: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Total gate budget.
    #[arg(long)]
    total: u64,
    #[arg(long, value_enum, default_value = "uniform-ratio")]
    source: Source,
    /// Per-layer weights for the external source.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    no_layer_sharing: bool,
    /// Calibration examples for the importance source.
    #[arg(long, default_value_t = 256)]
    n_examples: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Data { .. } | Error::Io { .. } | Error::Shape { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train => train(&cli),
        Command::Xor(a) => xor_cmd(&cli, a),
        Command::AnalyzeGates(a) => analyze(&cli, a),
        Command::Budget(a) => budget(&cli, a),
        Command::Verify => return verify_cmd(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// A config that cannot be read is a configuration problem, not a data one.
fn load_config(path: &Path) -> Result<Config> {
    Config::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn optional_config(cli: &Cli) -> Result<Option<(Config, PathBuf)>> {
    cli.config
        .as_ref()
        .map(|p| Ok((load_config(p)?, config_base(p))))
        .transpose()
}

fn seed_of(cli: &Cli, cfg: Option<&Config>) -> u64 {
    cli.seed.or(cfg.and_then(|c| c.seed)).unwrap_or(0)
}

fn train(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("train needs --config".into()))?;
    let cfg = load_config(path)?;
    let seed = seed_of(cli, Some(&cfg));
    let report = train_from_config(&cfg, &config_base(path), seed, &cli.out)?;
    let m = &report.manifest;
    println!(
        "trained {} with seed {seed}: {} DReLUs (baseline {})",
        if cfg.model.name.is_empty() { "model" } else { &cfg.model.name },
        m.gate_ledger_total.unwrap_or(0),
        m.baseline_total.unwrap_or(0)
    );
    println!("train accuracy {:.4}", report.train_accuracy);
    if let Some(a) = report.eval_accuracy {
        println!("eval accuracy {a:.4}");
    }
    if let Some(a) = report.grid_accuracy {
        println!("grid accuracy {a:.4}");
    }
    println!("artifacts in {}", cli.out.display());
    Ok(())
}

fn xor_cmd(cli: &Cli, a: &XorArgs) -> Result<()> {
    let seed = seed_of(cli, None);
    if a.construct_only {
        let (net, params) = xor::constructive_network();
        let grid = xor::grid_accuracy(&net, &params, &net.uniform_modes(GateMode::Drelu), xor::GRID_SIDE)?;
        let mut out = Outputs::create(&cli.out, "xor --construct-only", seed, None)?;
        out.write_with("grid", "grid_constructive.csv", |w| xor::write_grid_csv(w, &grid))?;
        let meta = &mut out.manifest.metadata;
        meta.insert("grid_accuracy".into(), grid.accuracy.to_string());
        meta.insert("drelu_evaluations".into(), grid.drelu_evaluations.to_string());
        meta.insert("points".into(), grid.points.len().to_string());
        out.finish()?;
        println!(
            "constructive network: accuracy {} on {} points with {} DReLU evaluations",
            grid.accuracy,
            grid.points.len(),
            grid.drelu_evaluations
        );
        return Ok(());
    }
    if let Some(draws) = a.corollary_fuzz {
        let report = xor::corollary_fuzz(draws, seed, &xor::OracleConfig::default());
        let mut out = Outputs::create(&cli.out, "xor --corollary-fuzz", seed, None)?;
        out.write_with("fuzz_report", "corollary_fuzz.json", |w| {
            serde_json::to_writer_pretty(&mut *w, &report).map_err(|e| Error::Usage(e.to_string()))
        })?;
        out.finish()?;
        println!(
            "{} draws: {} agree, {} contradict, {} unresolved ({} with a marginal piece, {} clipped by the window)",
            report.draws, report.agreements, report.contradictions, report.unresolved, report.marginal, report.clipped
        );
        return if report.contradictions == 0 {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{} contradictions", report.contradictions)))
        };
    }

    let mut recipe = XorRecipe::default();
    if let Some(e) = a.epochs {
        let d = XorRecipe::default();
        recipe.epochs = e;
        recipe.gelu_epochs = e * d.gelu_epochs / d.epochs;
        recipe.substitution_epochs = e * d.substitution_epochs / d.epochs;
    }
    recipe.validate()?;
    let seeds: Vec<u64> = (0..a.seeds.max(1) as u64).map(|i| seed + i).collect();
    let results = xor::four_way_experiment(&recipe, &seeds)?;
    let mut out = Outputs::create(&cli.out, "xor", seed, None)?;
    for (run, grid) in &results {
        let name = format!("grid_{}_seed{}.csv", run.variant.name(), run.seed);
        out.write_with("grid", &name, |w| xor::write_grid_csv(w, grid))?;
    }
    let runs: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
    out.write_with("summary", "summary.csv", |w| xor::write_summary_csv(w, &runs))?;
    out.manifest.metadata.insert("recipe".into(), format!("{recipe:?}"));
    out.finish()?;
    println!("{:<20} {:>5} {:>10} {:>10}", "variant", "seed", "grid_acc", "train_acc");
    for r in &runs {
        println!(
            "{:<20} {:>5} {:>10.4} {:>10.4}",
            r.variant.name(),
            r.seed,
            r.grid_accuracy,
            r.train_accuracy
        );
    }
    Ok(())
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = &ck.network;
    let cfg = optional_config(cli)?;
    let seed = seed_of(cli, cfg.as_ref().map(|(c, _)| c));
    let data = match (&a.data, &cfg) {
        (Some(p), _) => load_records(p, a.label_bytes, net.arch.input, net.arch.classes)?,
        (None, Some((c, base))) => {
            let loaded = load_data(c, base, &mut ChaCha8Rng::seed_from_u64(seed))?;
            loaded.eval.unwrap_or(loaded.train)
        }
        (None, None) => return Err(Error::Usage("analyze-gates needs --data or --config for its examples".into())),
    };
    let layers: Vec<usize> = if a.layers.is_empty() {
        (0..net.layers()).collect()
    } else {
        a.layers.clone()
    };
    let shard = data.head(a.n_examples);
    let gates = net.record_gates(&ck.params, &shard.inputs, &ck.state.modes, &layers)?;
    let rows = ed_report(&gates, seed)?;
    let summary = summarize(&rows, shard.len());

    let mut out = Outputs::create(&cli.out, "analyze-gates", seed, cfg.map(|(c, _)| c))?;
    out.write_with("ed_report", "ed_report.csv", |w| write_ed_csv(w, &rows))?;
    out.write_with("ed_summary", "ed_summary.csv", |w| write_summary_csv(w, &summary))?;
    let meta = &mut out.manifest.metadata;
    meta.insert("checkpoint".into(), a.checkpoint.display().to_string());
    meta.insert("n_examples".into(), shard.len().to_string());
    meta.insert("n_examples_requested".into(), a.n_examples.to_string());
    meta.insert(
        "layers".into(),
        layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    out.finish()?;
    println!("{} examples, {} positions", shard.len(), rows.len());
    println!("layer  aligned_median  shuffled_median  p_value");
    for s in &summary {
        let p = paired_permutation_p(&rows, s.layer, a.permutations, seed);
        println!(
            "{:>5}  {:>14.4}  {:>15.4}  {:>7.4}",
            s.layer, s.aligned_median, s.shuffled_median, p
        );
    }
    Ok(())
}

fn budget(cli: &Cli, a: &BudgetArgs) -> Result<()> {
    let cfg = optional_config(cli)?;
    let seed = seed_of(cli, cfg.as_ref().map(|(c, _)| c));
    let ck = a.checkpoint.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let shapes: Vec<LayerShape> = match (&a.shapes, &ck, &cfg) {
        (Some(p), _, _) => {
            let f = std::fs::File::open(p).map_err(|e| Error::Data {
                path: p.clone(),
                detail: e.to_string(),
            })?;
            read_shapes_csv(f, p)?
        }
        (None, Some(ck), _) => gated(&ck.network),
        (None, None, Some((c, _))) => gated(&Network::plain(c.model.architecture())?),
        _ => return Err(Error::Usage("budget needs --shapes, --checkpoint or --config".into())),
    };
    let layer_sharing = !a.no_layer_sharing;
    let phi = build_groups(&shapes, layer_sharing);
    let source = match a.source {
        Source::UniformRatio => BudgetSource::UniformRatio,
        Source::External => {
            let p = a
                .weights
                .as_ref()
                .ok_or_else(|| Error::Usage("the external source needs --weights".into()))?;
            let f = std::fs::File::open(p).map_err(|e| Error::Data {
                path: p.clone(),
                detail: e.to_string(),
            })?;
            BudgetSource::External(read_budget_file(std::io::BufReader::new(f), shapes.len())?)
        }
        Source::Importance => {
            let (c, base) = cfg
                .as_ref()
                .ok_or_else(|| Error::Usage("the importance source needs --config for calibration data".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = load_data(c, base, &mut rng)?.train;
            let w = match &ck {
                Some(ck) => importance_of(&ck.network, &ck.params, &data, a.n_examples)?,
                None => init_importance(&c.model.architecture(), &data, a.n_examples, &mut rng)?,
            };
            BudgetSource::Importance(w)
        }
    };
    let alloc = allocate_budget(&shapes, &phi, a.total, &source)?;
    let specs = build_specs(&shapes, &alloc.prototypes, &phi, true, layer_sharing)?;
    let ledger = gate_ledger(&specs, &shapes);
    let baseline = baseline_count(&shapes);

    let mut out = Outputs::create(&cli.out, "budget", seed, cfg.map(|(c, _)| c))?;
    let counts: Vec<f64> = alloc.prototypes.iter().map(|&p| p as f64).collect();
    out.write_with("budget_file", "prototypes.txt", |w| write_budget_file(w, &counts))?;
    out.write_with("allocation", "allocation.csv", |w| write_allocation_csv(w, &shapes, &specs))?;
    out.write_with("ledger", "ledger.csv", |w| write_ledger_csv(w, &ledger))?;
    out.write_with("summary", "budget_summary.csv", |w| {
        use std::io::Write;
        writeln!(w, "baseline_relus,budget,budgeted_drelus,fraction,accuracy,accuracy_per_relu")
            .and_then(|_| {
                writeln!(
                    w,
                    "{baseline},{},{},{},,",
                    a.total,
                    ledger.total,
                    ledger.total as f64 / baseline as f64
                )
            })
            .map_err(|e| Error::Usage(e.to_string()))
    })?;
    out.manifest.gate_ledger_total = Some(ledger.total);
    out.manifest.baseline_total = Some(baseline);
    out.finish()?;
    println!("baseline ReLUs  {baseline}");
    println!("budget          {}", a.total);
    println!("budgeted DReLUs {}", ledger.total);
    println!("layer  channels  prototypes  gates");
    for ((s, spec), g) in shapes.iter().zip(&specs).zip(&ledger.per_layer) {
        println!("{:>5}  {:>8}  {:>10}  {:>5}", s.layer, s.channels, spec.prototypes, g);
    }
    Ok(())
}

/// Shapes as far as gates are concerned: linear tail channels excluded.
fn gated(net: &Network) -> Vec<LayerShape> {
    net.shapes()
        .iter()
        .map(|s| LayerShape::new(s.layer, net.gated_channels(s.layer), s.height, s.width))
        .collect()
}

fn verify_cmd(cli: &Cli) -> ExitCode {
    let seed = cli.seed.unwrap_or(0);
    let checks = verify::run_all(seed);
    for c in &checks {
        println!("{} {:<24} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        println!("all {} checks passed", checks.len());
        ExitCode::SUCCESS
    } else {
        println!("{failed} of {} checks failed", checks.len());
        ExitCode::from(1)
    }
}
