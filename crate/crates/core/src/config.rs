//! Run configuration files and the network builder they drive.
//!
//! A config is TOML with `[model]`, `[sharing]`, `[schedule]`, `[data]` and
//! `[ablation]` tables. Unknown keys are rejected with their line number.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Augment;
use crate::error::{Error, Result};
use crate::model::{Architecture, LayerDef, Network};
use crate::sharing::{
    allocate_budget, build_groups, build_specs, read_budget_file, Allocation, BudgetSource, LayerShape,
};
use crate::training::{PhaseSchedule, TrainingSchedule};

/// Environment variable naming the root that relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "DEEPSHARE_DATA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Used when the command line gives no `--seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub sharing: SharingConfig,
    pub schedule: TrainingSchedule,
    pub data: DataConfig,
    #[serde(default)]
    pub ablation: Ablations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerDef>,
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.input,
            layers: self.layers.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    UniformRatio,
    Importance,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharingConfig {
    /// Total DReLU budget; absent means every channel is its own prototype.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default)]
    pub source: SourceKind,
    /// Per-layer weights for the `external` source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_file: Option<PathBuf>,
    #[serde(default = "yes")]
    pub affine: bool,
    #[serde(default = "yes")]
    pub layer_sharing: bool,
}

fn yes() -> bool {
    true
}

impl Default for SharingConfig {
    fn default() -> Self {
        SharingConfig {
            budget: None,
            source: SourceKind::UniformRatio,
            budget_file: None,
            affine: true,
            layer_sharing: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_pad")]
    pub crop_pad: usize,
    #[serde(default = "yes")]
    pub flip: bool,
    #[serde(default)]
    pub jitter: f64,
}

fn default_pad() -> usize {
    4
}

impl From<&AugmentConfig> for Augment {
    fn from(a: &AugmentConfig) -> Self {
        Augment {
            crop_pad: a.crop_pad,
            flip: a.flip,
            jitter: a.jitter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// CIFAR-style binary records: label byte(s) then channel-planar pixels.
    Binary {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
        #[serde(default = "one")]
        label_bytes: usize,
        /// Use only the first `limit` training records.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        augment: Option<AugmentConfig>,
    },
    /// Synthetic oriented gratings, one orientation per class.
    Gratings {
        examples: usize,
        #[serde(default)]
        test_examples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// Points uniform on [-1,1]² labelled by quadrant parity.
    Checkerboard { points: usize },
    /// Recorded for the segmentation recipe; not trainable here.
    Segmentation {
        root: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        augment: Option<AugmentConfig>,
    },
}

fn one() -> usize {
    1
}

fn default_noise() -> f64 {
    0.3
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablations {
    /// Freeze α = 1, β = 0.
    #[serde(default)]
    pub no_affine: bool,
    /// Every layer is its own group.
    #[serde(default)]
    pub no_layer_sharing: bool,
    /// Allocate with uniform-ratio weights whatever the configured source.
    #[serde(default)]
    pub no_budget: bool,
    /// Narrow every layer to its prototype channels.
    #[serde(default)]
    pub no_replicates: bool,
    /// Skip the GELU and substitution phases and start all-DReLU.
    #[serde(default)]
    pub no_gelu_phase: bool,
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl Config {
    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::config(format!("{}:{line}:{col}: {msg}", origin.display()))
                }
                None => Error::config(format!("{}: {msg}", origin.display())),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that need more than one table.
    pub fn validate(&self) -> Result<()> {
        self.model.architecture().shapes()?;
        self.schedule.validate()?;
        if let DataConfig::Checkerboard { .. } = self.data {
            if self.model.input != [2, 1, 1] || self.model.classes != 2 {
                return Err(Error::config("checkerboard data needs input [2, 1, 1] and 2 classes"));
            }
        }
        if let DataConfig::Binary { label_bytes, .. } = self.data {
            if !(1..=2).contains(&label_bytes) {
                return Err(Error::config(format!("label_bytes must be 1 or 2, not {label_bytes}")));
            }
        }
        if self.effective_source() == SourceKind::External && self.sharing.budget_file.is_none() {
            return Err(Error::config("sharing.source = \"external\" needs sharing.budget_file"));
        }
        Ok(())
    }

    /// Source after the `no_budget` ablation.
    pub fn effective_source(&self) -> SourceKind {
        if self.ablation.no_budget {
            SourceKind::UniformRatio
        } else {
            self.sharing.source
        }
    }

    /// Schedule after the `no_gelu_phase` ablation; the flag says whether to
    /// start all-DReLU.
    pub fn effective_schedule(&self) -> (TrainingSchedule, bool) {
        let mut s = self.schedule.clone();
        if !self.ablation.no_gelu_phase {
            return (s, false);
        }
        s.gelu_phase = PhaseSchedule {
            epochs: 0,
            ..s.gelu_phase
        };
        s.substitution = PhaseSchedule {
            epochs: 0,
            ..s.substitution
        };
        (s, true)
    }
}

/// Resolves a data path: absolute paths stand, relative ones go under
/// `$DEEPSHARE_DATA` when set, otherwise under `base`.
pub fn resolve_data_path(path: &Path, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(path),
        _ => base.join(path),
    }
}

/// A network ready for training, with the allocation behind it.
#[derive(Clone, Debug)]
pub struct BuiltNetwork {
    pub network: Network,
    pub allocation: Option<Allocation>,
    pub phi: Vec<usize>,
}

/// Allocation view of the shapes: only gated channels can be prototypes.
fn gated_shapes(arch: &Architecture, shapes: &[LayerShape]) -> Vec<LayerShape> {
    shapes
        .iter()
        .zip(&arch.layers)
        .map(|(s, l)| LayerShape::new(s.layer, s.channels - l.linear_channels, s.height, s.width))
        .collect()
}

/// Builds the network a config describes. `importance` supplies per-layer
/// weights for the importance source; `base` resolves a relative budget file.
pub fn build_network(cfg: &Config, importance: Option<&[f64]>, base: &Path) -> Result<BuiltNetwork> {
    let arch = cfg.model.architecture();
    let shapes = arch.shapes()?;
    let affine = cfg.sharing.affine && !cfg.ablation.no_affine;
    let layer_sharing = cfg.sharing.layer_sharing && !cfg.ablation.no_layer_sharing;
    let phi = build_groups(&shapes, layer_sharing);
    let alloc_shapes = gated_shapes(&arch, &shapes);

    let allocation = match cfg.sharing.budget {
        None => None,
        Some(budget) => {
            let source = match cfg.effective_source() {
                SourceKind::UniformRatio => BudgetSource::UniformRatio,
                SourceKind::Importance => BudgetSource::Importance(
                    importance
                        .ok_or_else(|| Error::config("importance source needs gate statistics"))?
                        .to_vec(),
                ),
                SourceKind::External => {
                    let file = cfg.sharing.budget_file.as_ref().expect("validated");
                    let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                    BudgetSource::External(read_budget_file(std::io::BufReader::new(f), shapes.len())?)
                }
            };
            Some(allocate_budget(&alloc_shapes, &phi, budget, &source)?)
        }
    };
    let prototypes: Vec<usize> = match &allocation {
        Some(a) => a.prototypes.clone(),
        None => alloc_shapes.iter().map(|s| s.channels).collect(),
    };

    if cfg.ablation.no_replicates {
        let widths: Vec<usize> = prototypes
            .iter()
            .zip(&arch.layers)
            .map(|(p, l)| p + l.linear_channels)
            .collect();
        let narrow = arch.with_channels(&widths);
        let nshapes = narrow.shapes()?;
        let specs = build_specs(&nshapes, &prototypes, &phi, affine, layer_sharing)?;
        return Ok(BuiltNetwork {
            network: Network::new(narrow, specs)?,
            allocation,
            phi,
        });
    }
    let specs = build_specs(&shapes, &prototypes, &phi, affine, layer_sharing)?;
    Ok(BuiltNetwork {
        network: Network::new(arch, specs)?,
        allocation,
        phi,
    })
}
