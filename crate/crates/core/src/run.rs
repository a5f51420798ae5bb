//! A complete training run described by one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{plan_sites, count_trainable, AdaptedModel, AdapterKind, AdapterPlan, SiteDims, Variant};
use crate::checkpoint;
use crate::data::{self, DatasetSplits, GeneratorSpec, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, MetricsReport};
use crate::model::{ModelConfig, Vlsm};
use crate::train::{self, RunHistory, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Path to a JSONL manifest.
    Manifest(PathBuf),
    Generate(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adapter: AdapterPlan,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    /// Seed of the frozen backbone. Held fixed across training seeds so it
    /// plays the part of a shared pretrained model.
    #[serde(default)]
    pub backbone_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            adapter: AdapterPlan::new(Variant::VL, AdapterKind::Dense, 8),
            train: TrainConfig::default(),
            data: DataSource::Generate(GeneratorSpec { seed: 0, n: 300, size: 64 }),
            out_dir: PathBuf::from("runs/toy"),
            backbone_seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        plan_sites(&self.adapter, &SiteDims::from_config(&self.model))?;
        if let DataSource::Generate(g) = &self.data {
            if g.n < 3 {
                return Err(Error::config("data.generate.n", format!("{} samples cannot fill three splits", g.n)));
            }
            if g.size != self.model.image_size {
                return Err(Error::config(
                    "data.generate.size",
                    format!("{} does not match model.image_size {}", g.size, self.model.image_size),
                ));
            }
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<DatasetSplits> {
        match &self.data {
            DataSource::Manifest(p) => data::load(p),
            DataSource::Generate(g) => data::generate(g),
        }
    }

    /// Backbone plus freshly attached adapters, before any training.
    pub fn build_model(&self) -> Result<AdaptedModel> {
        let backbone = Vlsm::new(self.model.clone(), self.backbone_seed)?;
        AdaptedModel::attach(self.adapter.clone(), backbone, self.train.seed)
    }
}

/// Scores a model on `samples`, prompting each with its first prompt.
pub fn evaluate(model: &AdaptedModel, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::config("split", "no samples to evaluate"));
    }
    let tok = model.backbone.tokenizer();
    crate::autodiff::no_grad(|| {
        evaluate_with(samples, |s| &s.mask, threshold, |s| {
            let size = model.config().image_size;
            if s.size() != size {
                return Err(Error::config(
                    "model.image_size",
                    format!("checkpoint expects {size}x{size} images, sample is {0}x{0}", s.size()),
                ));
            }
            Ok(model.forward(&s.image_tensor(), &tok.encode(&s.prompts[0]))?.to_vec())
        })
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const VAL_REPORT_FILE: &str = "val_report.json";
pub const CONFIG_FILE: &str = "config.json";

pub struct RunOutcome {
    pub model: AdaptedModel,
    pub history: RunHistory,
    pub val_report: MetricsReport,
    pub checkpoint: PathBuf,
}

/// Validates, trains, and writes the checkpoint, epoch log, timing log,
/// resolved config and validation report into `out_dir`.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("data", "train and val splits must be nonempty"));
    }
    let mut model = cfg.build_model()?;
    let predicted = count_trainable(&cfg.adapter, &SiteDims::from_config(&cfg.model))?;
    let census = model.trainable_count();
    if predicted != census {
        return Err(Error::Checkpoint(format!("trainable census {census} differs from plan total {predicted}")));
    }
    log::info!("{} trainable parameters ({} {})", census, cfg.adapter.variant, cfg.adapter.kind);
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(out, e))?;

    let history = train::train(&mut model, &data, &cfg.train)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &checkpoint)?;
    history.write_jsonl(&out.join(EPOCH_LOG_FILE))?;
    history.write_timing(&out.join(TIMING_FILE))?;
    let val_report = evaluate(&model, &data.val, cfg.train.threshold)?;
    let report_path = out.join(VAL_REPORT_FILE);
    fs::write(&report_path, serde_json::to_string_pretty(&val_report)?).map_err(|e| Error::io(&report_path, e))?;
    Ok(RunOutcome { model, history, val_report, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn dense_depth_beyond_encoder_names_field() {
        let mut cfg = RunConfig::default();
        cfg.adapter.dense_max_layer = Some(cfg.model.n_layers_v + 1);
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "adapter.dense_max_layer"));
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["train"]["learning_rate"] = serde_json::json!(0.1);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }
}
