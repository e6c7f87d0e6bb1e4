//! Click and previous-mask simulation for training and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::click::{Click, Polarity};
use crate::error::{Error, Result};
use crate::mask::{deepest_point, iou, Components, MaskGrid};
use crate::model::{argmax_first, ProposalModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Redraws allowed when a sampled click lands on an occupied pixel.
const DEDUP_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrevMaskPolicy {
    /// Any proposal, uniformly.
    #[default]
    Random,
    /// The proposal closest to the primary target.
    LargestIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Anywhere outside the primary mask.
    #[default]
    Complement,
    /// Inside other annotated objects when there are any, else the complement.
    OtherMasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Inclusive range of random clicks per sample.
    pub n_init: (usize, usize),
    /// Inclusive range of simulated interactions.
    pub n_inter: (usize, usize),
    pub prev_mask_policy: PrevMaskPolicy,
    /// Chance that each click after the first is positive.
    pub positive_prob: f64,
    pub negative_source: NegativeSource,
    /// Put the first click at the centre of the primary mask (as the
    /// evaluation protocol does) instead of a uniformly random pixel.
    pub center_first_click: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_init: (1, 10),
            n_inter: (0, 4),
            prev_mask_policy: PrevMaskPolicy::Random,
            positive_prob: 0.5,
            negative_source: NegativeSource::Complement,
            center_first_click: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.n_init;
        if a == 0 || a > b {
            return Err(Error::Config(format!("n_init range ({a}, {b}) must satisfy 1 ≤ lo ≤ hi")));
        }
        if self.n_inter.0 > self.n_inter.1 {
            return Err(Error::Config(format!("n_inter range {:?} is reversed", self.n_inter)));
        }
        if !(0.0..=1.0).contains(&self.positive_prob) {
            return Err(Error::Config(format!(
                "positive_prob {} outside [0, 1]",
                self.positive_prob
            )));
        }
        Ok(())
    }
}

fn pixels_where(mask: &MaskGrid, value: bool) -> Vec<(usize, usize)> {
    let w = mask.width();
    mask.bits()
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == value)
        .map(|(i, _)| (i % w, i / w))
        .collect()
}

/// Random clicks consistent with `primary`: the first is positive, later ones
/// positive with `positive_prob`, negatives drawn per `negative_source`.
pub fn random_clicks<R: Rng + ?Sized>(
    primary: &MaskGrid,
    all_masks: &[MaskGrid],
    n: usize,
    config: &SimulationConfig,
    rng: &mut R,
) -> Result<Vec<Click>> {
    if primary.is_empty() {
        return Err(Error::InvalidSample("primary mask is empty".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("at least one click must be generated".into()));
    }
    let inside = pixels_where(primary, true);
    let outside = pixels_where(primary, false);
    let negatives = match config.negative_source {
        NegativeSource::Complement => outside,
        NegativeSource::OtherMasks => {
            let mut others = MaskGrid::empty(primary.width(), primary.height());
            for m in all_masks.iter().filter(|m| *m != primary) {
                others = others.or(m);
            }
            let others = pixels_where(&others.and(&primary.not()), true);
            if others.is_empty() {
                outside
            } else {
                others
            }
        }
    };

    let mut clicks: Vec<Click> = Vec::with_capacity(n);
    if config.center_first_click {
        clicks.push(next_click(&MaskGrid::empty(primary.width(), primary.height()), primary, 0)?);
    }
    for i in clicks.len()..n {
        let positive = i == 0 || negatives.is_empty() || rng.gen_bool(config.positive_prob);
        let pool = if positive { &inside } else { &negatives };
        for _ in 0..DEDUP_ATTEMPTS {
            let &(x, y) = pool.choose(rng).expect("pool is nonempty");
            if clicks.iter().all(|c| (c.x, c.y) != (x, y)) {
                clicks.push(Click {
                    x,
                    y,
                    polarity: Polarity::from_flag(positive),
                    order: clicks.len(),
                });
                break;
            }
        }
    }
    Ok(clicks)
}

/// Corrective click at the centre of the largest erroneous region.
pub fn next_click(pred: &MaskGrid, gt: &MaskGrid, order: usize) -> Result<Click> {
    if !pred.same_shape(gt) {
        return Err(Error::Shape(format!(
            "prediction {}×{} vs ground truth {}×{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let errors = pred.xor(gt);
    let comps = Components::of(&errors);
    let largest = comps.largest().ok_or(Error::NoError)?;
    let region = comps.mask_of(largest);
    let (x, y) = deepest_point(&region).expect("component is nonempty");
    Ok(Click {
        x,
        y,
        polarity: Polarity::from_flag(gt.get(x, y)),
        order,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedInput<T> {
    pub clicks: Vec<Click>,
    /// Probabilities `[H, W]` of the mask fed back to the network.
    pub prev_mask: Tensor<T>,
    /// Interactions actually simulated (fewer than drawn if a prediction was exact).
    pub interactions: usize,
}

/// Random clicks followed by a few model-in-the-loop corrective clicks.
pub fn simulate_iteration<T: Scalar, M: ProposalModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    all_masks: &[MaskGrid],
    primary: usize,
    config: &SimulationConfig,
    rng: &mut R,
) -> Result<SimulatedInput<T>> {
    let gt = all_masks
        .get(primary)
        .ok_or_else(|| Error::InvalidInput(format!("primary index {primary} out of range")))?;
    let n_init = rng.gen_range(config.n_init.0..=config.n_init.1);
    let mut clicks = random_clicks(gt, all_masks, n_init, config, rng)?;
    let n_inter = rng.gen_range(config.n_inter.0..=config.n_inter.1);
    let (h, w) = (gt.height(), gt.width());
    let mut prev_mask = Tensor::zeros(vec![h, w]);
    let mut done = 0;
    for _ in 0..n_inter {
        let proposals = model.propose(image, &clicks, &prev_mask)?;
        let pick = match config.prev_mask_policy {
            PrevMaskPolicy::Random => rng.gen_range(0..proposals.len()),
            PrevMaskPolicy::LargestIou => {
                let ious: Vec<f64> = (0..proposals.len())
                    .map(|i| iou(&proposals.mask(i), gt))
                    .collect();
                argmax_first(&ious).map(|(i, _)| i).unwrap_or(0)
            }
        };
        let chosen = proposals.mask(pick);
        prev_mask = Tensor::new(vec![h, w], proposals.probs(pick));
        done += 1;
        match next_click(&chosen, gt, clicks.len()) {
            Ok(c) => {
                if clicks.iter().all(|o| (o.x, o.y) != (c.x, c.y)) {
                    clicks.push(c);
                }
            }
            Err(Error::NoError) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(SimulatedInput {
        clicks,
        prev_mask,
        interactions: done,
    })
}
