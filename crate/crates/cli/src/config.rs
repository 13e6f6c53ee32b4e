//! Experiment configuration: one JSON document, defaults for every field,
//! unknown keys rejected, and a content hash stamped on every artifact.

use std::fs;
use std::path::Path;

use mmrec_core::ctr::{CtrConfig, Variant};
use mmrec_core::make::MakeConfig;
use mmrec_core::scl::PretrainConfig;
use mmrec_core::synth::{CatalogConfig, ImpressionConfig};
use mmrec_pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every section's own `seed` is overwritten from this one.
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub make: MakeConfig,
    pub ctr: CtrConfig,
    pub eval: EvalConfig,
    pub pipeline: PipelineSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub catalog: CatalogConfig,
    pub impressions: ImpressionConfig,
    pub triplets: TripletConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub n_train: usize,
    /// Held-out draws; retrieval keeps one query per distinct purchased item.
    pub n_eval: usize,
    pub query_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub acc_ns: Vec<usize>,
    /// Variants trained by `train-ctr` when none are named.
    pub variants: Vec<Variant>,
    pub freq_buckets: usize,
    /// Compared against `id_base` per frequency bucket.
    pub bucket_variant: Variant,
    /// Extractor epochs for the MAKE sweep; 0 trains the extractor jointly.
    pub make_epochs: Vec<usize>,
    pub make_sweep_variant: Variant,
    pub curve_variants: Vec<Variant>,
    pub curve_epochs: usize,
    /// Epochs of the full arm whose checkpoints join the correlation study,
    /// in addition to every arm's final checkpoint.
    pub correlation_epochs: Vec<usize>,
    pub correlation_variant: Variant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub engine: PipelineConfig,
    /// Event log written by `gen-data` for `simulate-pipeline`.
    pub n_events: usize,
    pub event_interval_us: u64,
    pub addr: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            pretrain: PretrainConfig {
                hidden: 128,
                bank_size: 1024,
                margin: 0.05,
                triplet_weight: 3.0,
                lr: 3e-3,
                ..Default::default()
            },
            make: MakeConfig::default(),
            ctr: CtrConfig::default(),
            eval: EvalConfig::default(),
            pipeline: PipelineSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            catalog: CatalogConfig {
                n_items: 500,
                ..Default::default()
            },
            impressions: ImpressionConfig {
                w_sem: 2.0,
                bias: -3.8,
                ..Default::default()
            },
            triplets: TripletConfig::default(),
        }
    }
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_eval: 40_000,
            query_noise: 0.045,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            acc_ns: vec![1, 5],
            variants: Variant::LADDER.to_vec(),
            freq_buckets: 8,
            bucket_variant: Variant::SimtierMake,
            make_epochs: vec![0, 1, 2, 4],
            make_sweep_variant: Variant::Make,
            curve_variants: vec![Variant::IdBase, Variant::MmOnly],
            curve_epochs: 3,
            correlation_epochs: vec![1, 3],
            correlation_variant: Variant::Simtier,
        }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            engine: PipelineConfig::default(),
            n_events: 10_000,
            event_interval_us: 50,
            addr: "127.0.0.1:7878".into(),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts from the defaults), applies `key.path=value`
    /// overrides and the seed flag, then validates.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                let parsed: ExperimentConfig =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        for s in sets {
            apply_override(&mut value, s)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        let s = self.seed;
        self.data.catalog.seed = s;
        self.data.impressions.seed = s;
        self.pretrain.seed = s;
        self.make.seed = s;
        self.ctr.seed = s;
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: mmrec_core::CoreError| CliError::Config(e.to_string());
        self.pretrain.validate().map_err(wrap)?;
        self.make.validate().map_err(wrap)?;
        self.ctr.validate().map_err(wrap)?;
        if self.make.l_max != self.ctr.l_max {
            return Err(CliError::Config("make.l_max and ctr.l_max must agree".into()));
        }
        if self.data.catalog.d_raw == 0 || self.data.triplets.n_train == 0 {
            return Err(CliError::Config("data sizes must be positive".into()));
        }
        if self.eval.acc_ns.is_empty() || self.eval.acc_ns.contains(&0) {
            return Err(CliError::Config("eval.acc_ns must list positive cutoffs".into()));
        }
        if self.eval.make_epochs.iter().any(|&k| k > self.make.epochs) {
            return Err(CliError::Config("eval.make_epochs may not exceed make.epochs".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    pub fn triplet_seeds(&self) -> (u64, u64) {
        (2 * self.seed + 1, 2 * self.seed + 2)
    }

    /// Pretty JSON with the hash alongside the resolved fields.
    pub fn echo(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["config_hash"] = Value::String(self.hash());
        serde_json::to_string_pretty(&v).expect("config serializes") + "\n"
    }
}

/// `a.b.c=<json>`; a value that is not valid JSON is taken as a string. The
/// path must already exist.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for key in path.split('.') {
        cur = cur
            .get_mut(key)
            .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
    }
    *cur = new;
    Ok(())
}
