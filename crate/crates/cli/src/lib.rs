//! Pieces of the `piclick` binary that are worth calling from tests.

pub mod desk;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use piclick_core::eval::{evaluate_dataset, EvalConfig, EvalInstance, EvalResult};
use piclick_core::train::{train, TrainConfig, TrainOutcome, Trainer};
use piclick_core::{ModelConfig, PiClickF32, TrainingSample};
use piclick_data::{load_dataset, Format};
use serde::{Deserialize, Serialize};

/// Contents of the `--config` file: a `[model]` and a `[train]` table, both
/// optional and defaulted field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }
}

pub fn load_samples(root: &Path, format: Format) -> anyhow::Result<Vec<TrainingSample>> {
    let d = load_dataset(root, format).with_context(|| format!("loading {}", root.display()))?;
    if !d.report.skipped.is_empty() || d.report.dropped_annotations > 0 {
        log::warn!(
            "{}: loaded {}, skipped {}, dropped {} annotations",
            root.display(),
            d.report.loaded,
            d.report.skipped.len(),
            d.report.dropped_annotations
        );
    }
    if d.samples.is_empty() {
        bail!("no usable samples under {}", root.display());
    }
    Ok(d.samples)
}

/// One evaluation instance per ground-truth mask.
pub fn eval_instances(samples: &[TrainingSample]) -> Vec<EvalInstance<f32>> {
    samples
        .iter()
        .flat_map(|s| {
            s.masks.iter().map(|m| EvalInstance {
                image: s.image.clone(),
                gt: m.clone(),
            })
        })
        .collect()
}

pub fn run_training(
    config: &RunConfig,
    samples: &[TrainingSample],
    out: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::<f32>::resume(ckpt, Some(config.train.clone()))
                .with_context(|| format!("resuming from {}", ckpt.display()))?;
            if t.model.config() != &config.model {
                log::warn!("model settings in the config file are ignored; the checkpoint's are used");
            }
            t
        }
        None => Trainer::new(PiClickF32::new(config.model.clone())?, config.train.clone())?,
    };
    log::info!(
        "training from epoch {} to {} on {} samples",
        trainer.epoch,
        config.train.epochs,
        samples.len()
    );
    Ok(train(&mut trainer, samples, out)?)
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub result: EvalResult,
}

pub fn run_eval(ckpt: &Path, samples: &[TrainingSample], config: &EvalConfig) -> anyhow::Result<EvalResult> {
    let model = PiClickF32::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(evaluate_dataset(&model, &eval_instances(samples), config)?)
}
