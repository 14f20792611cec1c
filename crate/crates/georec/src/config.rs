//! TOML run configuration.
//!
//! Every field has a default, so an empty file (or no file at all) is a valid
//! configuration; unknown keys are rejected rather than silently ignored.
//! Individual values can be overridden from the command line with repeated
//! `--set dotted.path=value` flags, applied to the raw TOML tree before
//! deserialization so they get exactly the same validation as file contents.
//! `GEOREC_OUT_DIR` in the environment overrides `out_dir` (and nothing
//! else), which keeps batch jobs from having to rewrite config files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::TransferConfig;
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, Which};
use crate::graph::KernelConfig;
use crate::ingest::{ColumnSchema, FilterThresholds};
use crate::model::{Activation, Channels, ModelConfig};
use crate::synth::{RegionSpec, SynthSpec};
use crate::train::{Mode, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// full | axo-m | axo-f | target-only
    pub mode: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub paths: PathsSection,
    pub ingest: IngestSection,
    pub kernel: KernelSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: "full".into(),
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            paths: PathsSection::default(),
            ingest: IngestSection::default(),
            kernel: KernelSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub source_checkins: PathBuf,
    pub source_social: PathBuf,
    pub target_checkins: PathBuf,
    pub target_social: PathBuf,
    /// Serialized graph locations; empty means `<out_dir>/graph_<region>.bin`.
    pub source_graph: PathBuf,
    pub target_graph: PathBuf,
    /// Checkpoint to evaluate or recommend from; empty means
    /// `<out_dir>/checkpoint_final.bin`.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    pub delimiter: String,
    /// Train/validation/test fractions of the temporal split.
    pub split: [f64; 3],
    pub source_min_poi_checkins: u32,
    pub source_min_user_checkins: u32,
    pub source_min_user_connections: u32,
    pub target_min_poi_checkins: u32,
    pub target_min_user_checkins: u32,
    pub target_min_user_connections: u32,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection {
            delimiter: "\t".into(),
            split: [0.7, 0.1, 0.2],
            source_min_poi_checkins: 10,
            source_min_user_checkins: 10,
            source_min_user_connections: 5,
            target_min_poi_checkins: 5,
            target_min_user_checkins: 5,
            target_min_user_connections: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub bandwidth_km: f64,
    pub cutoff_km: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        let k = KernelConfig::default();
        KernelSection { bandwidth_km: k.bandwidth_km, cutoff_km: k.cutoff_km }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// relu | linear
    pub activation: String,
    pub gat_depth: usize,
    pub sample_size: usize,
    /// both | user-only | poi-only
    pub channels: String,
    pub emb_init_limit: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 16,
            mlp_hidden: 32,
            activation: "relu".into(),
            gat_depth: 1,
            sample_size: 10,
            channels: "both".into(),
            emb_init_limit: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u32,
    pub batch_size: usize,
    pub inner_steps: u32,
    pub transfer_every: u32,
    pub lr_inner: f64,
    pub lr_global: f64,
    pub lr_social: f64,
    pub lambda_l1: f64,
    pub fine_tune_lr: f64,
    pub fine_tune_epochs: u32,
    pub patience: u32,
    pub social_anchor_cap: usize,
    pub val_every: u32,
    pub divergence_threshold: f64,
    pub transfer: TransferSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            inner_steps: t.inner_steps,
            transfer_every: t.transfer_every,
            lr_inner: t.lr_inner,
            lr_global: t.lr_global,
            lr_social: t.lr_social,
            lambda_l1: t.lambda_l1,
            fine_tune_lr: t.fine_tune_lr,
            fine_tune_epochs: t.fine_tune_epochs,
            patience: t.patience,
            social_anchor_cap: t.social_anchor_cap,
            val_every: t.val_every,
            divergence_threshold: t.divergence_threshold,
            transfer: TransferSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub clusters: usize,
    pub steps: usize,
    pub lr: f64,
    pub symmetric: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        let t = TransferConfig::default();
        TransferSection { clusters: t.k, steps: t.steps, lr: t.lr, symmetric: t.symmetric }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// test | validation
    pub split: String,
    pub transductive: bool,
    pub per_user: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10],
            split: "test".into(),
            transductive: false,
            per_user: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_groups: usize,
    pub n_categories: usize,
    pub rho: f64,
    pub n_cold_users: usize,
    pub cold_min_friends: usize,
    pub source: SynthRegionSection,
    pub target: SynthRegionSection,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSection {
            n_groups: s.n_groups,
            n_categories: s.n_categories,
            rho: s.rho,
            n_cold_users: s.n_cold_users,
            cold_min_friends: s.cold_min_friends,
            source: SynthRegionSection::from(s.source),
            target: SynthRegionSection::from(s.target),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRegionSection {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_checkins: usize,
    pub social_within: f64,
    pub social_between: f64,
}

impl From<RegionSpec> for SynthRegionSection {
    fn from(r: RegionSpec) -> Self {
        SynthRegionSection {
            n_users: r.n_users,
            n_pois: r.n_pois,
            n_checkins: r.n_checkins,
            social_within: r.social_within,
            social_between: r.social_between,
        }
    }
}

impl Default for SynthRegionSection {
    fn default() -> Self {
        SynthRegionSection::from(SynthSpec::default().source)
    }
}

/// Insert `raw` (parsed as a TOML literal, falling back to a plain string)
/// at `dotted` inside the tree, creating intermediate tables as needed.
fn apply_set(tree: &mut toml::Table, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key {dotted:?}")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Usage(format!("override {dotted:?} descends into a non-table value"))
        })?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load a configuration: optional file, then `--set` overrides, then the
/// `GEOREC_OUT_DIR` environment override.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingInput(p.to_path_buf()));
            }
            std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?
        }
        None => String::new(),
    };
    let mut tree: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {s:?}")))?;
        apply_set(&mut tree, key.trim(), value.trim())?;
    }
    let mut cfg: RunConfig = toml::Value::Table(tree)
        .try_into()
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    if let Ok(dir) = std::env::var("GEOREC_OUT_DIR") {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        Mode::parse(&self.mode)?;
        self.model()?;
        self.eval_options()?;
        let s: f64 = self.ingest.split.iter().sum();
        if self.ingest.split.iter().any(|&f| f <= 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.ingest.split
            )));
        }
        if self.ingest.delimiter.chars().count() != 1 {
            return Err(Error::Config(format!(
                "delimiter must be a single character, got {:?}",
                self.ingest.delimiter
            )));
        }
        if self.kernel.bandwidth_km <= 0.0 || self.kernel.cutoff_km <= 0.0 {
            return Err(Error::Config(
                "kernel bandwidth and cutoff must be positive".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.train.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_inner", self.train.lr_inner),
            ("lr_global", self.train.lr_global),
            ("lr_social", self.train.lr_social),
            ("fine_tune_lr", self.train.fine_tune_lr),
            ("transfer.lr", self.train.transfer.lr),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} must be a finite non-negative number")));
            }
        }
        self.synth_spec().validate()?;
        Ok(())
    }

    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema { delimiter: self.ingest.delimiter.chars().next().unwrap_or('\t') }
    }

    pub fn source_filters(&self) -> FilterThresholds {
        FilterThresholds {
            min_poi_checkins: self.ingest.source_min_poi_checkins,
            min_user_checkins: self.ingest.source_min_user_checkins,
            min_user_connections: self.ingest.source_min_user_connections,
        }
    }

    pub fn target_filters(&self) -> FilterThresholds {
        FilterThresholds {
            min_poi_checkins: self.ingest.target_min_poi_checkins,
            min_user_checkins: self.ingest.target_min_user_checkins,
            min_user_connections: self.ingest.target_min_user_connections,
        }
    }

    pub fn split_fractions(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.ingest.split;
        (a, b, c)
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            bandwidth_km: self.kernel.bandwidth_km,
            cutoff_km: self.kernel.cutoff_km,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let activation = match self.model.activation.as_str() {
            "relu" => Activation::Relu,
            "linear" => Activation::Linear,
            other => {
                return Err(Error::Config(format!(
                    "unknown activation {other:?} (expected relu or linear)"
                )))
            }
        };
        let channels = match self.model.channels.as_str() {
            "both" => Channels::Both,
            "user-only" => Channels::UserOnly,
            "poi-only" => Channels::PoiOnly,
            other => {
                return Err(Error::Config(format!(
                    "unknown channels {other:?} (expected both, user-only, or poi-only)"
                )))
            }
        };
        if self.model.embed_dim == 0 || self.model.mlp_hidden == 0 {
            return Err(Error::Config("embed_dim and mlp_hidden must be at least 1".into()));
        }
        if self.model.gat_depth == 0 {
            return Err(Error::Config("gat_depth must be at least 1".into()));
        }
        if self.model.sample_size == 0 {
            return Err(Error::Config("sample_size must be at least 1".into()));
        }
        if !self.model.emb_init_limit.is_finite() || self.model.emb_init_limit <= 0.0 {
            return Err(Error::Config("emb_init_limit must be positive".into()));
        }
        Ok(ModelConfig {
            embed_dim: self.model.embed_dim,
            mlp_hidden: self.model.mlp_hidden,
            activation,
            gat_depth: self.model.gat_depth,
            sample_size: self.model.sample_size,
            channels,
            emb_init_limit: self.model.emb_init_limit,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            mode: Mode::parse(&self.mode)?,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            inner_steps: self.train.inner_steps,
            transfer_every: self.train.transfer_every,
            lr_inner: self.train.lr_inner,
            lr_global: self.train.lr_global,
            lr_social: self.train.lr_social,
            lambda_l1: self.train.lambda_l1,
            fine_tune_lr: self.train.fine_tune_lr,
            fine_tune_epochs: self.train.fine_tune_epochs,
            patience: self.train.patience,
            social_anchor_cap: self.train.social_anchor_cap,
            val_every: self.train.val_every,
            transfer: TransferConfig {
                k: self.train.transfer.clusters,
                steps: self.train.transfer.steps,
                lr: self.train.transfer.lr,
                symmetric: self.train.transfer.symmetric,
            },
            divergence_threshold: self.train.divergence_threshold,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let which = match self.eval.split.as_str() {
            "test" => Which::Test,
            "validation" => Which::Validation,
            other => {
                return Err(Error::Config(format!(
                    "unknown eval split {other:?} (expected test or validation)"
                )))
            }
        };
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval ks must be non-empty positive integers".into()));
        }
        Ok(EvalOptions {
            ks: self.eval.ks.clone(),
            which,
            transductive: self.eval.transductive,
            per_user: self.eval.per_user,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let region = |r: &SynthRegionSection| RegionSpec {
            n_users: r.n_users,
            n_pois: r.n_pois,
            n_checkins: r.n_checkins,
            social_within: r.social_within,
            social_between: r.social_between,
        };
        SynthSpec {
            n_groups: self.synth.n_groups,
            n_categories: self.synth.n_categories,
            rho: self.synth.rho,
            source: region(&self.synth.source),
            target: region(&self.synth.target),
            n_cold_users: self.synth.n_cold_users,
            cold_min_friends: self.synth.cold_min_friends,
        }
    }

    pub fn source_graph_path(&self) -> PathBuf {
        if self.paths.source_graph.as_os_str().is_empty() {
            self.out_dir.join("graph_source.bin")
        } else {
            self.paths.source_graph.clone()
        }
    }

    pub fn target_graph_path(&self) -> PathBuf {
        if self.paths.target_graph.as_os_str().is_empty() {
            self.out_dir.join("graph_target.bin")
        } else {
            self.paths.target_graph.clone()
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.paths.checkpoint.as_os_str().is_empty() {
            self.out_dir.join("checkpoint_final.bin")
        } else {
            self.paths.checkpoint.clone()
        }
    }
}
