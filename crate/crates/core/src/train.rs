//! Training loop: augmentation, simulated interaction, set-matching loss, Adam.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::data::TrainingSample;
use crate::error::{Error, Result};
use crate::mask::MaskGrid;
use crate::matching::{feasible_targets, match_and_loss, FocalParams, LossBreakdown, LossWeights};
use crate::model::PiClick;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::simulate::{simulate_iteration, SimulationConfig};
use crate::tape::ParamId;
use crate::tensor::Tensor;

/// Attempts at drawing a geometric augmentation that keeps every mask nonempty.
const AUGMENT_RETRIES: usize = 8;

const TRAIN_CONFIG_KEY: &str = "piclick.train_config";
const EPOCH_KEY: &str = "piclick.epoch";
const STEP_KEY: &str = "piclick.step";
const ADAM_T_KEY: &str = "piclick.adam_t";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale: bool,
    pub scale_range: (f64, f64),
    pub rotate: bool,
    pub max_rotation_deg: f64,
    /// Random crop offset; otherwise the working window is centred.
    pub crop: bool,
    pub color_jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            scale: true,
            scale_range: (0.75, 1.25),
            rotate: true,
            max_rotation_deg: 20.0,
            crop: true,
            color_jitter: true,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            scale: false,
            rotate: false,
            crop: false,
            color_jitter: false,
            ..Self::default()
        }
    }

    fn geometric(&self) -> bool {
        self.scale || self.rotate || self.crop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by
    /// `lr_decay_factor`; `None` keeps it constant.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub loss: LossWeights,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            lr_decay_epoch: Some(24),
            lr_decay_factor: 0.1,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: AugmentConfig::default(),
            seed: 0,
            simulation: SimulationConfig::default(),
            loss: LossWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor {} outside (0, 1)", self.lr_decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        let (lo, hi) = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale range ({lo}, {hi}) is invalid"));
        }
        self.simulation.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(d) if epoch >= d => self.lr * self.lr_decay_factor,
            _ => self.lr,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

pub fn flip_sample(sample: &TrainingSample) -> TrainingSample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let image = Tensor::from_fn(vec![3, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    });
    TrainingSample {
        image,
        masks: sample.masks.iter().map(MaskGrid::flip_horizontal).collect(),
        ids: sample.ids.clone(),
    }
}

/// Output-to-source map: scale about the origin, rotate about the centre of
/// the scaled image, then take a `w × h` window at `offset`.
#[derive(Debug, Clone, Copy)]
struct Warp {
    scale: f64,
    angle: f64,
    offset: (f64, f64),
    h: usize,
    w: usize,
}

impl Warp {
    fn source(&self, u: usize, v: usize) -> (f64, f64) {
        let (sw, sh) = (self.w as f64 * self.scale, self.h as f64 * self.scale);
        let rx = u as f64 + 0.5 + self.offset.0 - sw / 2.0;
        let ry = v as f64 + 0.5 + self.offset.1 - sh / 2.0;
        let (s, c) = self.angle.sin_cos();
        let px = c * rx + s * ry + sw / 2.0;
        let py = -s * rx + c * ry + sh / 2.0;
        (px / self.scale, py / self.scale)
    }

    fn apply(&self, sample: &TrainingSample) -> TrainingSample {
        let (h, w) = (self.h, self.w);
        let src = sample.image.data();
        let mut image = vec![0.0f32; 3 * h * w];
        let mut masks: Vec<Vec<bool>> = vec![vec![false; h * w]; sample.masks.len()];
        for v in 0..h {
            for u in 0..w {
                let (px, py) = self.source(u, v);
                let o = v * w + u;
                let (nx, ny) = (px.floor(), py.floor());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    for (k, m) in sample.masks.iter().enumerate() {
                        masks[k][o] = m.get(nx as usize, ny as usize);
                    }
                }
                // Bilinear on pixel centres, zero outside.
                let (fx, fy) = (px - 0.5, py - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
                let taps = [
                    (x0, y0, (1.0 - ax) * (1.0 - ay)),
                    (x0 + 1.0, y0, ax * (1.0 - ay)),
                    (x0, y0 + 1.0, (1.0 - ax) * ay),
                    (x0 + 1.0, y0 + 1.0, ax * ay),
                ];
                for c in 0..3 {
                    let mut acc = 0.0f32;
                    for &(tx, ty, wt) in &taps {
                        if wt != 0.0 && tx >= 0.0 && ty >= 0.0 && (tx as usize) < w && (ty as usize) < h {
                            acc += wt * src[c * h * w + ty as usize * w + tx as usize];
                        }
                    }
                    image[c * h * w + o] = acc;
                }
            }
        }
        TrainingSample {
            image: Tensor::new(vec![3, h, w], image),
            masks: masks.into_iter().map(|b| MaskGrid::from_bits(w, h, b)).collect(),
            ids: sample.ids.clone(),
        }
    }
}

/// Random flip, resize, rotation, crop and colour jitter per `config`. Masks
/// follow the image geometry with nearest-neighbour sampling. Fails with
/// `InvalidSample` when no draw keeps every mask nonempty.
pub fn augment<R: Rng + ?Sized>(
    sample: &TrainingSample,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let mut out = if config.flip && rng.gen_bool(0.5) {
        flip_sample(sample)
    } else {
        sample.clone()
    };
    if config.geometric() {
        let (h, w) = (out.height(), out.width());
        let mut accepted = None;
        for _ in 0..AUGMENT_RETRIES {
            let scale = if config.scale {
                rng.gen_range(config.scale_range.0..=config.scale_range.1)
            } else {
                1.0
            };
            let angle = if config.rotate {
                rng.gen_range(-config.max_rotation_deg..=config.max_rotation_deg).to_radians()
            } else {
                0.0
            };
            let slack = |n: usize| n as f64 * scale - n as f64;
            let pick = |rng: &mut R, d: f64| {
                if config.crop && d != 0.0 {
                    rng.gen_range(d.min(0.0)..=d.max(0.0))
                } else {
                    d / 2.0
                }
            };
            let offset = (pick(rng, slack(w)), pick(rng, slack(h)));
            let warped = Warp {
                scale,
                angle,
                offset,
                h,
                w,
            }
            .apply(&out);
            if warped.masks.iter().all(|m| !m.is_empty()) {
                accepted = Some(warped);
                break;
            }
        }
        out = accepted.ok_or_else(|| Error::InvalidSample("augmentation emptied a mask".into()))?;
    }
    if config.color_jitter {
        let b = rng.gen_range(-config.brightness..=config.brightness) as f32;
        let c = rng.gen_range(1.0 - config.contrast..=1.0 + config.contrast) as f32;
        for v in out.image.data_mut() {
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Adam without weight decay; one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from dense per-parameter gradients (indexed by `ParamId`).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        for (id, g) in grads.iter().enumerate() {
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g.data()[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g.data()[i] * g.data()[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Augmentation,
    EmptyFeasibleSet,
}

/// Result of one sample's forward/backward.
#[derive(Debug, Clone)]
pub enum SampleOutcome<T> {
    Loss {
        breakdown: LossBreakdown,
        grads: Vec<(ParamId, Tensor<T>)>,
        primary: usize,
        clicks: usize,
    },
    Skipped(SkipReason),
}

/// Augment, pick a primary target, simulate clicks and a previous mask with
/// the current parameters, then back-propagate the matched loss. Parameters
/// are not touched.
pub fn sample_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &PiClick<T>,
    sample: &TrainingSample,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<SampleOutcome<T>> {
    let sample = match augment(sample, &config.augment, rng) {
        Ok(s) => s,
        Err(Error::InvalidSample(_)) => return Ok(SampleOutcome::Skipped(SkipReason::Augmentation)),
        Err(e) => return Err(e),
    };
    let primary = rng.gen_range(0..sample.masks.len());
    let image: Tensor<T> = sample.image.cast();
    let sim = simulate_iteration(model, &image, &sample.masks, primary, &config.simulation, rng)?;
    let feasible = match feasible_targets(&sample.masks, &sim.clicks) {
        Ok(f) => f,
        Err(Error::EmptyFeasibleSet) => return Ok(SampleOutcome::Skipped(SkipReason::EmptyFeasibleSet)),
        Err(e) => return Err(e),
    };
    let trace = model.trace(&image, &sim.clicks, &sim.prev_mask, None)?;
    let proposals = trace.proposals();
    let loss = match_and_loss(
        &proposals,
        &feasible,
        &sample.masks[primary],
        config.loss,
        config.focal,
    )?;
    let grads = trace.backward(&loss.grad.logits, &loss.grad.conf, &loss.grad.iou);
    Ok(SampleOutcome::Loss {
        breakdown: loss.breakdown,
        grads,
        primary,
        clicks: sim.clicks.len(),
    })
}

/// One metrics-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub samples: usize,
    pub skipped: usize,
    pub dice: f64,
    pub focal: f64,
    pub iou_l1: f64,
    pub conf_bce: f64,
    pub total: f64,
}

/// Per-sample random stream, independent of batch composition.
pub fn sample_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(epoch as u64);
    rng
}

/// Model, optimizer state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: PiClick<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: PiClick<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Accumulates gradients over `batch` (mean over non-skipped samples) and
    /// applies one optimizer step at learning rate `lr`.
    pub fn train_batch<R: Rng>(&mut self, batch: &[&TrainingSample], rngs: &mut [R], lr: f64) -> Result<StepRecord> {
        assert_eq!(batch.len(), rngs.len(), "one rng per sample");
        let mut sum: Vec<Tensor<T>> = self
            .model
            .params()
            .iter()
            .map(|(_, _, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        let mut rec = StepRecord {
            epoch: self.epoch,
            step: self.step,
            lr,
            samples: batch.len(),
            skipped: 0,
            dice: 0.0,
            focal: 0.0,
            iou_l1: 0.0,
            conf_bce: 0.0,
            total: 0.0,
        };
        let mut used = 0usize;
        for (sample, rng) in batch.iter().zip(rngs.iter_mut()) {
            match sample_gradients(&self.model, sample, &self.config, rng)? {
                SampleOutcome::Loss { breakdown, grads, .. } => {
                    used += 1;
                    for (id, g) in grads {
                        sum[id].add_assign(&g);
                    }
                    rec.dice += breakdown.dice;
                    rec.focal += breakdown.focal;
                    rec.iou_l1 += breakdown.iou_l1;
                    rec.conf_bce += breakdown.conf_bce;
                    rec.total += breakdown.total;
                }
                SampleOutcome::Skipped(_) => rec.skipped += 1,
            }
        }
        if used > 0 {
            let inv = T::one() / T::from_usize(used).unwrap();
            for g in &mut sum {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            self.optimizer.step(self.model.params_mut(), &sum, lr);
            let n = used as f64;
            rec.dice /= n;
            rec.focal /= n;
            rec.iou_l1 /= n;
            rec.conf_bce /= n;
            rec.total /= n;
        }
        self.step += 1;
        Ok(rec)
    }

    /// One pass over `dataset` in a seed-determined order; calls `log` after
    /// every optimizer step.
    pub fn run_epoch(&mut self, dataset: &[TrainingSample], mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_rng(self.config.seed, epoch));
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&TrainingSample> = chunk.iter().map(|i| &dataset[*i]).collect();
            let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
                .map(|j| sample_rng(self.config.seed, epoch, b * self.config.batch_size + j))
                .collect();
            let rec = self.train_batch(&batch, &mut rngs, lr)?;
            log(&rec)?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile<T>> {
        let mut file = self.model.to_tensor_file()?;
        let store = self.model.params();
        for (prefix, moments) in [("adam_m/", &self.optimizer.m), ("adam_v/", &self.optimizer.v)] {
            for ((_, name, _), t) in store.iter().zip(moments) {
                file.tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        file.metadata.insert(TRAIN_CONFIG_KEY.into(), cfg);
        file.metadata.insert(EPOCH_KEY.into(), self.epoch.to_string());
        file.metadata.insert(STEP_KEY.into(), self.step.to_string());
        file.metadata.insert(ADAM_T_KEY.into(), self.optimizer.t.to_string());
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    /// Restores model, optimizer moments and schedule position. `config`
    /// replaces the stored training config (e.g. to extend `epochs`); `None`
    /// keeps the stored one.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let file = TensorFile::<T>::load(path)?;
        let model = PiClick::from_tensor_file(&file)?;
        let meta = |k: &str| {
            file.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} has no {k}; not a training checkpoint", path.display())))
        };
        let config = match config {
            Some(c) => c,
            None => serde_json::from_str(meta(TRAIN_CONFIG_KEY)?)
                .map_err(|e| Error::Checkpoint(format!("train config: {e}")))?,
        };
        let num = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{k}: {e}")))
        };
        let mut trainer = Trainer::new(model, config)?;
        trainer.epoch = num(EPOCH_KEY)? as usize;
        trainer.step = num(STEP_KEY)?;
        trainer.optimizer.t = num(ADAM_T_KEY)?;
        let mut moments = ParamStore::new();
        for (_, name, p) in trainer.model.params().iter() {
            moments.add(name, Tensor::zeros(p.shape().to_vec()));
        }
        for (prefix, slot) in [("adam_m/", &mut trainer.optimizer.m), ("adam_v/", &mut trainer.optimizer.v)] {
            file.fill_store(prefix, &mut moments)?;
            *slot = moments.iter().map(|(_, _, t)| t.clone()).collect();
        }
        Ok(trainer)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub last: Option<StepRecord>,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:04}.safetensors"))
}

/// Runs the remaining epochs of `trainer`, writing one checkpoint per epoch
/// and appending step records to `out_dir/metrics.jsonl`.
pub fn train<T: Scalar>(trainer: &mut Trainer<T>, dataset: &[TrainingSample], out_dir: &Path) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let metrics = out_dir.join("metrics.jsonl");
    let mut log = OpenOptions::new().create(true).append(true).open(&metrics)?;
    let mut checkpoints = Vec::new();
    let mut last = None;
    while trainer.epoch < trainer.config.epochs {
        trainer.run_epoch(dataset, |rec| {
            let line = serde_json::to_string(rec).map_err(|e| Error::InvalidInput(e.to_string()))?;
            writeln!(log, "{line}")?;
            last = Some(rec.clone());
            Ok(())
        })?;
        log.flush()?;
        let path = checkpoint_path(out_dir, trainer.epoch);
        trainer.save(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        checkpoints,
        metrics,
        last,
    })
}
