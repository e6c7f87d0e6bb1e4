//! The small-scale reproduction: three models trained on the synthetic
//! nested-shape corpus with identical budgets, differing in one knob each.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use piclick_core::data::synth_ambiguity_dataset;
use piclick_core::simulate::PrevMaskPolicy;
use piclick_core::train::{TrainConfig, Trainer};
use piclick_core::{ModelConfig, PiClickF32, TrainingSample};

use crate::RunConfig;

pub const IMAGE_SIZE: usize = 64;
pub const CORPUS_SEED: u64 = 1;
pub const TRAIN_LEN: usize = 2000;
pub const TEST_LEN: usize = 200;

/// Training and held-out samples. Synthetic sample `i` does not depend on
/// the corpus size, so the split is stable.
pub fn split() -> anyhow::Result<(Vec<TrainingSample>, Vec<TrainingSample>)> {
    let mut all = synth_ambiguity_dataset(TRAIN_LEN + TEST_LEN, IMAGE_SIZE, CORPUS_SEED)?;
    let test = all.split_off(TRAIN_LEN);
    Ok((all, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Seven queries, random previous-mask policy: the reference model.
    MultiQuery,
    SingleQuery,
    /// Seven queries, previous mask taken from the best-matching proposal.
    LargestIouPrev,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::MultiQuery, Variant::SingleQuery, Variant::LargestIouPrev];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MultiQuery => "n7_random",
            Variant::SingleQuery => "n1_random",
            Variant::LargestIouPrev => "n7_largest_iou",
        }
    }

    pub fn config(self) -> RunConfig {
        let mut c = base_config();
        match self {
            Variant::MultiQuery => {}
            Variant::SingleQuery => c.model.num_queries = 1,
            Variant::LargestIouPrev => c.train.simulation.prev_mask_policy = PrevMaskPolicy::LargestIou,
        }
        c
    }

    pub fn checkpoint(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.safetensors", self.name()))
    }
}

impl std::str::FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown variant {s:?}; expected n7_random, n1_random or n7_largest_iou"))
    }
}

/// About an hour per model on one CPU core.
pub fn base_config() -> RunConfig {
    RunConfig {
        model: ModelConfig::default(),
        train: TrainConfig {
            epochs: 40,
            lr: 5e-4,
            lr_decay_epoch: Some(32),
            batch_size: 8,
            ..TrainConfig::default()
        },
    }
}

pub fn train_variant(variant: Variant, samples: &[TrainingSample]) -> anyhow::Result<PiClickF32> {
    let c = variant.config();
    let mut trainer = Trainer::new(PiClickF32::new(c.model)?, c.train)?;
    let start = Instant::now();
    while trainer.epoch < trainer.config.epochs {
        let (mut total, mut n, mut skipped) = (0.0, 0usize, 0usize);
        trainer.run_epoch(samples, |r| {
            total += r.total * r.samples as f64;
            n += r.samples;
            skipped += r.skipped;
            Ok(())
        })?;
        log::info!(
            "{} epoch {} loss {:.4} skipped {} ({:.0?})",
            variant.name(),
            trainer.epoch,
            total / n.max(1) as f64,
            skipped,
            start.elapsed()
        );
    }
    Ok(trainer.model)
}

/// Loads `dir/<variant>.safetensors`, training and saving it first if absent.
pub fn load_or_train(variant: Variant, dir: &Path, samples: &[TrainingSample]) -> anyhow::Result<PiClickF32> {
    let path = variant.checkpoint(dir);
    if path.is_file() {
        let m = PiClickF32::load(&path).with_context(|| format!("loading {}", path.display()))?;
        if m.config() != &variant.config().model {
            anyhow::bail!("{} was trained with a different model config", path.display());
        }
        return Ok(m);
    }
    log::warn!("{} missing; training it (slow)", path.display());
    let m = train_variant(variant, samples)?;
    std::fs::create_dir_all(dir)?;
    m.save(&path)?;
    Ok(m)
}
