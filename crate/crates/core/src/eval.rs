//! Automatic interactive evaluation: NoC@τ, mIoU@k and selection re-picks.

use serde::{Deserialize, Serialize};

use crate::click::Click;
use crate::error::{Error, Result};
use crate::mask::{iou, MaskGrid};
use crate::model::{argmax_first, select_mask, ProposalModel, Proposals};
use crate::scalar::Scalar;
use crate::simulate::next_click;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    IouOnly,
    ConfOnly,
    #[default]
    Product,
}

/// Index chosen under `mode`; ties go to the lowest index.
pub fn selection_ablation<T: Scalar>(proposals: &Proposals<T>, mode: SelectionMode) -> Result<usize> {
    let empty = || Error::InvalidInput("no proposals to select from".into());
    match mode {
        SelectionMode::IouOnly => argmax_first(&proposals.iou_pred).map(|p| p.0).ok_or_else(empty),
        SelectionMode::ConfOnly => argmax_first(&proposals.conf).map(|p| p.0).ok_or_else(empty),
        SelectionMode::Product => select_mask(proposals).map(|p| p.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub max_clicks: usize,
    pub k_list: Vec<usize>,
    pub selection_mode: SelectionMode,
    /// A click counts as needing a re-pick when some other proposal beats the
    /// selected one by more than this IoU margin.
    pub repick_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.85, 0.90],
            max_clicks: 20,
            k_list: vec![1, 3, 5],
            selection_mode: SelectionMode::Product,
            repick_margin: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clicks == 0 {
            return Err(Error::Config("max_clicks must be at least 1".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
        }
        if let Some(k) = self.k_list.iter().find(|k| **k == 0 || **k > self.max_clicks) {
            return Err(Error::Config(format!(
                "k = {k} outside 1..={}",
                self.max_clicks
            )));
        }
        Ok(())
    }

    fn horizon(&self) -> usize {
        self.k_list.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub clicks: Vec<Click>,
    /// IoU of the selected mask after `k + 1` clicks.
    pub ious: Vec<f64>,
    pub selected: Vec<usize>,
    /// Clicks after which a clearly better proposal than the selected one existed.
    pub repicks: usize,
    /// Clicks needed per threshold, `max_clicks` when never reached.
    pub noc: Vec<usize>,
}

impl Trajectory {
    /// IoU after `k` clicks; the last value carries over once the loop stopped.
    pub fn iou_at(&self, k: usize) -> f64 {
        match self.ious.get(k.saturating_sub(1)) {
            Some(v) => *v,
            None => self.ious.last().copied().unwrap_or(0.0),
        }
    }
}

/// First `k` with `ious[k-1] ≥ τ`, else `max_clicks`.
pub fn clicks_to_reach(ious: &[f64], threshold: f64, max_clicks: usize) -> usize {
    ious.iter()
        .position(|v| *v >= threshold)
        .map_or(max_clicks, |i| i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance<T> {
    pub image: Tensor<T>,
    pub gt: MaskGrid,
}

pub fn evaluate_instance<T: Scalar, M: ProposalModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    gt: &MaskGrid,
    config: &EvalConfig,
) -> Result<Trajectory> {
    config.validate()?;
    if gt.is_empty() {
        return Err(Error::InvalidSample("ground-truth mask is empty".into()));
    }
    let (h, w) = (gt.height(), gt.width());
    let mut clicks = vec![next_click(&MaskGrid::empty(w, h), gt, 0)?];
    let mut prev = Tensor::zeros(vec![h, w]);
    let mut ious = Vec::new();
    let mut selected = Vec::new();
    let mut repicks = 0;
    let horizon = config.horizon();
    loop {
        let proposals = model.propose(image, &clicks, &prev)?;
        let pick = selection_ablation(&proposals, config.selection_mode)?;
        let mask = proposals.mask(pick);
        let score = iou(&mask, gt);
        let best = (0..proposals.len())
            .map(|i| iou(&proposals.mask(i), gt))
            .fold(f64::NEG_INFINITY, f64::max);
        if score < best - config.repick_margin {
            repicks += 1;
        }
        ious.push(score);
        selected.push(pick);
        prev = Tensor::new(vec![h, w], proposals.probs(pick));

        let k = ious.len();
        let pending = config
            .iou_thresholds
            .iter()
            .any(|t| ious.iter().all(|v| v < t));
        if k >= config.max_clicks || (!pending && k >= horizon) {
            break;
        }
        match next_click(&mask, gt, clicks.len()) {
            Ok(c) => clicks.push(c),
            Err(Error::NoError) => break,
            Err(e) => return Err(e),
        }
    }
    let noc = config
        .iou_thresholds
        .iter()
        .map(|t| clicks_to_reach(&ious, *t, config.max_clicks))
        .collect();
    Ok(Trajectory {
        clicks,
        ious,
        selected,
        repicks,
        noc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    pub noc: f64,
    /// Instances that never reached the threshold.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config: EvalConfig,
    pub instances: Vec<Trajectory>,
    pub noc: Vec<ThresholdSummary>,
    pub miou: Vec<KSummary>,
    pub mean_repicks: f64,
}

impl EvalResult {
    pub fn noc_at(&self, threshold: f64) -> Option<f64> {
        self.noc
            .iter()
            .find(|s| s.threshold == threshold)
            .map(|s| s.noc)
    }

    pub fn miou_at(&self, k: usize) -> Option<f64> {
        self.miou.iter().find(|s| s.k == k).map(|s| s.miou)
    }
}

/// Aggregates per-instance trajectories in order.
pub fn summarize(config: &EvalConfig, instances: Vec<Trajectory>) -> Result<EvalResult> {
    if instances.is_empty() {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    let n = instances.len() as f64;
    let noc = config
        .iou_thresholds
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let reached = |tr: &Trajectory| tr.ious.iter().any(|v| v >= t);
            ThresholdSummary {
                threshold: *t,
                noc: instances.iter().map(|tr| tr.noc[i] as f64).sum::<f64>() / n,
                failures: instances.iter().filter(|tr| !reached(tr)).count(),
            }
        })
        .collect();
    let miou = config
        .k_list
        .iter()
        .map(|k| KSummary {
            k: *k,
            miou: instances.iter().map(|tr| tr.iou_at(*k)).sum::<f64>() / n,
        })
        .collect();
    let mean_repicks = instances.iter().map(|tr| tr.repicks as f64).sum::<f64>() / n;
    Ok(EvalResult {
        config: config.clone(),
        instances,
        noc,
        miou,
        mean_repicks,
    })
}

pub fn evaluate_dataset<T: Scalar, M: ProposalModel<T> + ?Sized>(
    model: &M,
    dataset: &[EvalInstance<T>],
    config: &EvalConfig,
) -> Result<EvalResult> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let instances = dataset
        .iter()
        .map(|inst| evaluate_instance(model, &inst.image, &inst.gt, config))
        .collect::<Result<Vec<_>>>()?;
    summarize(config, instances)
}
