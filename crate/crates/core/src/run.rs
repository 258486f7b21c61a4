//! End-to-end runs: data from a config, the training driver, and the
//! manifest listing everything a run writes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{build_network, resolve_data_path, Config, DataConfig, SourceKind};
use crate::data::{gratings, load_records, Augment, Dataset};
use crate::error::{Error, Result};
use crate::gates::GateMode;
use crate::model::{Architecture, Network};
use crate::sharing::{baseline_count, gate_ledger, importance_proxy, write_ledger_csv, GateSpec, LayerShape};
use crate::training::{accuracy_on, run_training, write_metrics_csv, TrainFailure, TrainOptions};
use crate::xor::{checkerboard_dataset, grid_accuracy, make_checkerboard, write_grid_csv, GRID_SIDE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory.
    pub path: PathBuf,
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Config>,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_ledger_total: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_total: Option<u64>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// An output directory that records every file written into it.
pub struct Outputs {
    dir: PathBuf,
    started: Instant,
    pub manifest: RunManifest,
}

impl Outputs {
    pub fn create(dir: &Path, command: &str, seed: u64, config: Option<Config>) -> Result<Outputs> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Ok(Outputs {
            dir: dir.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config,
                artifacts: Vec::new(),
                gate_ledger_total: None,
                baseline_total: None,
                started_unix,
                wall_seconds: 0.0,
                metadata: BTreeMap::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` and returns its full path.
    pub fn claim(&mut self, kind: &str, name: &str) -> PathBuf {
        self.manifest.artifacts.push(Artifact {
            kind: kind.into(),
            path: name.into(),
        });
        self.dir.join(name)
    }

    pub fn write_with(
        &mut self,
        kind: &str,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<PathBuf> {
        let path = self.claim(kind, name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Writes a checkpoint pair under `name`.
    pub fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<PathBuf> {
        let path = self.claim("checkpoint", name);
        let [_, m] = ck.save(&path)?;
        let mname = m.file_name().expect("file name").to_string_lossy().into_owned();
        self.manifest.artifacts.push(Artifact {
            kind: "checkpoint_manifest".into(),
            path: mname.into(),
        });
        Ok(path)
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.wall_seconds = self.started.elapsed().as_secs_f64();
        let path = self.claim("manifest", MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))
}

/// Training data, optional evaluation data and augmentation.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub eval: Option<Dataset>,
    pub augment: Option<Augment>,
}

/// Materializes the `[data]` table. Synthetic sets draw from `rng`.
pub fn load_data<R: Rng>(cfg: &Config, base: &Path, rng: &mut R) -> Result<LoadedData> {
    let classes = cfg.model.classes;
    match &cfg.data {
        DataConfig::Binary {
            train,
            test,
            label_bytes,
            limit,
            augment,
        } => {
            let mut train_set = load_records(&resolve_data_path(train, base), *label_bytes, cfg.model.input, classes)?;
            if let Some(n) = limit {
                train_set = train_set.head(*n);
            }
            let eval = test
                .as_ref()
                .map(|t| load_records(&resolve_data_path(t, base), *label_bytes, cfg.model.input, classes))
                .transpose()?;
            Ok(LoadedData {
                train: train_set,
                eval,
                augment: augment.as_ref().map(Augment::from),
            })
        }
        DataConfig::Gratings {
            examples,
            test_examples,
            noise,
        } => {
            let [c, h, w] = cfg.model.input;
            if c != 1 || h != w {
                return Err(Error::config(format!(
                    "gratings are single-channel squares; model input is {:?}",
                    cfg.model.input
                )));
            }
            let train = gratings(*examples, classes, h, *noise, rng)?;
            let eval = (*test_examples > 0)
                .then(|| gratings(*test_examples, classes, h, *noise, rng))
                .transpose()?;
            Ok(LoadedData {
                train,
                eval,
                augment: None,
            })
        }
        DataConfig::Checkerboard { points } => Ok(LoadedData {
            train: checkerboard_dataset(&make_checkerboard(*points, rng)),
            eval: None,
            augment: None,
        }),
        DataConfig::Segmentation { .. } => Err(Error::Usage(
            "segmentation recipes are recorded for their hyperparameters only; training them is not supported".into(),
        )),
    }
}

/// Gate-variance weights from a freshly initialized plain network over the
/// first `n` training examples.
pub fn init_importance<R: Rng>(arch: &Architecture, data: &Dataset, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let plain = Network::plain(arch.clone())?;
    let params = plain.init_params(rng);
    importance_of(&plain, &params, data, n)
}

pub fn importance_of(net: &Network, params: &crate::model::ParamStore, data: &Dataset, n: usize) -> Result<Vec<f64>> {
    let shard = data.head(n);
    let modes = net.uniform_modes(GateMode::Drelu);
    let layers: Vec<usize> = (0..net.layers()).collect();
    let gates = net.record_gates(params, &shard.inputs, &modes, &layers)?;
    importance_proxy(&gates)
}

/// Examples used for importance statistics when a run needs them.
pub const IMPORTANCE_EXAMPLES: usize = 256;

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub manifest: RunManifest,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    /// Checkerboard runs only: accuracy on the evaluation grid.
    pub grid_accuracy: Option<f64>,
}

/// Runs the training command: everything is validated and loaded before
/// `out` is created, so a bad config or missing dataset leaves no files.
pub fn train_from_config(cfg: &Config, base: &Path, seed: u64, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = load_data(cfg, base, &mut rng)?;
    let importance = match (cfg.sharing.budget, cfg.effective_source()) {
        (Some(_), SourceKind::Importance) => Some(init_importance(
            &cfg.model.architecture(),
            &data.train,
            IMPORTANCE_EXAMPLES,
            &mut rng,
        )?),
        _ => None,
    };
    let built = build_network(cfg, importance.as_deref(), base)?;
    let net = built.network;
    let params = net.init_params(&mut rng);
    let (schedule, start_drelu) = cfg.effective_schedule();
    let opts = TrainOptions {
        augment: data.augment,
        eval: data.eval.as_ref(),
        start_drelu,
    };
    let result = match run_training(&net, params, &schedule, &data.train, &opts, &mut rng) {
        Ok(o) => Ok(o),
        Err(TrainFailure::Invalid(e)) => return Err(e),
        Err(TrainFailure::Diverged(abort)) => Err(abort),
    };

    let mut outputs = Outputs::create(out, "train", seed, Some(cfg.clone()))?;
    let ledger = gate_ledger(&net.specs, net.shapes());
    outputs.manifest.gate_ledger_total = Some(ledger.total);
    outputs.manifest.baseline_total = Some(baseline_count(net.shapes()));
    outputs.write_with("ledger", "ledger.csv", |w| write_ledger_csv(w, &ledger))?;
    outputs.write_with("allocation", "allocation.csv", |w| write_allocation_csv(w, net.shapes(), &net.specs))?;

    let outcome = match result {
        Ok(o) => o,
        Err(abort) => {
            let ck = Checkpoint {
                network: net.clone(),
                params: abort.last_good.clone(),
                state: abort.state.clone(),
                gamma: schedule.gamma,
            };
            let path = outputs.checkpoint("last_good.ckpt", &ck)?;
            outputs.write_with("metrics", "metrics.csv", |w| write_metrics_csv(w, &abort.metrics))?;
            outputs.manifest.metadata.insert("aborted".into(), format!("{} epoch {}", abort.phase, abort.epoch));
            outputs.finish()?;
            return Err(Error::Numeric(format!(
                "training diverged in {} epoch {}: {}; last good parameters in {}",
                abort.phase,
                abort.epoch,
                abort.detail,
                path.display()
            )));
        }
    };
    let ck = Checkpoint {
        network: net.clone(),
        params: outcome.params.clone(),
        state: outcome.state.clone(),
        gamma: schedule.gamma,
    };
    outputs.checkpoint("model.ckpt", &ck)?;
    outputs.write_with("metrics", "metrics.csv", |w| write_metrics_csv(w, &outcome.metrics))?;
    let train_accuracy = accuracy_on(&net, &outcome.params, &data.train, &outcome.state.modes)?;
    let eval_accuracy = data
        .eval
        .as_ref()
        .map(|d| accuracy_on(&net, &outcome.params, d, &outcome.state.modes))
        .transpose()?;
    let grid = match cfg.data {
        DataConfig::Checkerboard { .. } => {
            let g = grid_accuracy(&net, &outcome.params, &outcome.state.modes, GRID_SIDE)?;
            outputs.write_with("grid", "grid.csv", |w| write_grid_csv(w, &g))?;
            Some(g.accuracy)
        }
        _ => None,
    };
    let meta = &mut outputs.manifest.metadata;
    meta.insert("train_accuracy".into(), train_accuracy.to_string());
    if let Some(a) = eval_accuracy {
        meta.insert("eval_accuracy".into(), a.to_string());
    }
    if let Some(a) = grid {
        meta.insert("grid_accuracy".into(), a.to_string());
    }
    meta.insert("start_drelu".into(), start_drelu.to_string());
    let manifest = outputs.finish()?;
    Ok(TrainReport {
        manifest,
        train_accuracy,
        eval_accuracy,
        grid_accuracy: grid,
    })
}

#[derive(Serialize)]
struct AllocationRow {
    layer: usize,
    channels: usize,
    height: usize,
    width: usize,
    prototypes: usize,
    group: usize,
    gates: u64,
}

/// Per-layer prototype counts with header
/// `layer,channels,height,width,prototypes,group,gates`.
pub fn write_allocation_csv<W: Write>(out: W, shapes: &[LayerShape], specs: &[GateSpec]) -> Result<()> {
    let ledger = gate_ledger(specs, shapes);
    let mut w = csv::Writer::from_writer(out);
    for ((s, spec), gates) in shapes.iter().zip(specs).zip(&ledger.per_layer) {
        w.serialize(AllocationRow {
            layer: s.layer,
            channels: s.channels,
            height: s.height,
            width: s.width,
            prototypes: spec.prototypes,
            group: spec.group,
            gates: *gates,
        })
        .map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<allocation>", e))
}

/// Reads a shapes file with header `layer,channels,height,width`.
pub fn read_shapes_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<LayerShape>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<LayerShape>().enumerate() {
        let s = row.map_err(|e| Error::data(path, format!("row {}: {e}", i + 1)))?;
        if s.layer != i {
            return Err(Error::data(path, format!("row {} describes layer {}; layers must be listed in order", i + 1, s.layer)));
        }
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::data(path, format!("layer {i} has a zero dimension")));
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::data(path, "no layers"));
    }
    Ok(out)
}

pub fn write_shapes_csv<W: Write>(out: W, shapes: &[LayerShape]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in shapes {
        w.serialize(s).map_err(crate::gates::csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<shapes>", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const XORISH: &str = r#"
[model]
input = [2, 1, 1]
classes = 2
layers = [{ type = "dense", units = 2 }]

[sharing]
budget = 1
layer_sharing = false

[schedule]
batch_size = 32
gamma = 8.0
gelu_phase = { epochs = 3, lr_start = 0.1 }
substitution = { epochs = 1, lr_start = 0.1 }
finetune = { epochs = 1, lr_start = 0.1 }

[data]
kind = "checkerboard"
points = 64
"#;

    #[test]
    fn manifest_lists_every_file() {
        let cfg = Config::parse(XORISH, Path::new("x.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let report = train_from_config(&cfg, dir.path(), 1, &out).unwrap();
        let mut listed: Vec<PathBuf> = report.manifest.artifacts.iter().map(|a| a.path.clone()).collect();
        listed.sort();
        let mut present: Vec<PathBuf> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| PathBuf::from(e.unwrap().file_name()))
            .collect();
        present.sort();
        assert_eq!(listed, present);
        assert_eq!(report.manifest.gate_ledger_total, Some(1));
        assert_eq!(read_manifest(&out).unwrap(), report.manifest);
    }

    #[test]
    fn same_seed_same_metrics() {
        let cfg = Config::parse(XORISH, Path::new("x.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        train_from_config(&cfg, dir.path(), 9, &a).unwrap();
        train_from_config(&cfg, dir.path(), 9, &b).unwrap();
        let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    }

    #[test]
    fn missing_dataset_writes_nothing() {
        let text = XORISH.replace(
            "kind = \"checkerboard\"\npoints = 64",
            "kind = \"binary\"\ntrain = \"/nonexistent/train.bin\"",
        );
        let cfg = Config::parse(&text.replace("[2, 1, 1]", "[3, 32, 32]"), Path::new("x.toml")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let e = train_from_config(&cfg, dir.path(), 0, &out).unwrap_err();
        assert!(matches!(e, Error::Io { .. }), "{e}");
        assert!(e.to_string().contains("/nonexistent/train.bin"));
        assert!(!out.exists());
    }

    #[test]
    fn shapes_csv_round_trip() {
        let shapes = vec![LayerShape::new(0, 4, 8, 8), LayerShape::new(1, 2, 1, 1)];
        let mut buf = Vec::new();
        write_shapes_csv(&mut buf, &shapes).unwrap();
        assert!(buf.starts_with(b"layer,channels,height,width\n"));
        assert_eq!(read_shapes_csv(&buf[..], Path::new("s.csv")).unwrap(), shapes);
    }
}
