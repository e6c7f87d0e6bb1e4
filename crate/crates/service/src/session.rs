//! Interaction state for one image, independent of HTTP.
//!
//! Every mutation is recorded as an [`Event`]; [`Session::replay`] rebuilds
//! the state from the log alone, and undo is implemented as a replay of a
//! shortened log.

use piclick_core::model::ProposalModel;
use piclick_core::{select_mask, Click, MaskGrid, Polarity, Proposals, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("click ({x}, {y}) is outside the {width}×{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("no proposals yet; add a click first")]
    NoProposals,
    #[error("proposal index {index} out of range (have {len})")]
    BadIndex { index: usize, len: usize },
    #[error("nothing to undo")]
    EmptyHistory,
    #[error("model: {0}")]
    Model(#[from] piclick_core::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Click { x: usize, y: usize, polarity: Polarity },
    Select { proposal_index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub clicks: Vec<Click>,
    /// Probabilities `[H, W]` of the selected proposal; zeros before the first click.
    pub prev_mask: Tensor<f32>,
    pub proposals: Option<Proposals<f32>>,
    pub selected: Option<usize>,
    /// Times the user overrode the automatic choice.
    pub repicks: usize,
    pub revision: u64,
    pub log: Vec<Event>,
}

impl Session {
    pub fn new(id: impl Into<String>, image: Tensor<f32>) -> Self {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        Self {
            id: id.into(),
            image,
            clicks: Vec::new(),
            prev_mask: Tensor::zeros(vec![h, w]),
            proposals: None,
            selected: None,
            repicks: 0,
            revision: 0,
            log: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Appends a click, predicts with the current previous mask and
    /// auto-selects the best-scoring proposal.
    pub fn click<M: ProposalModel<f32> + ?Sized>(
        &mut self,
        model: &M,
        x: usize,
        y: usize,
        polarity: Polarity,
    ) -> Result<(), SessionError> {
        let click = Click {
            x,
            y,
            polarity,
            order: self.clicks.len(),
        };
        if !click.in_bounds(self.width(), self.height()) {
            return Err(SessionError::OutOfBounds {
                x,
                y,
                width: self.width(),
                height: self.height(),
            });
        }
        let mut clicks = self.clicks.clone();
        clicks.push(click);
        let proposals = model.propose(&self.image, &clicks, &self.prev_mask)?;
        let (best, _) = select_mask(&proposals)?;
        self.prev_mask = Tensor::new(vec![self.height(), self.width()], proposals.probs(best));
        self.clicks = clicks;
        self.proposals = Some(proposals);
        self.selected = Some(best);
        self.log.push(Event::Click { x, y, polarity });
        self.revision += 1;
        Ok(())
    }

    /// Replaces the selection; the next click refines this proposal.
    pub fn select(&mut self, index: usize) -> Result<(), SessionError> {
        let proposals = self.proposals.as_ref().ok_or(SessionError::NoProposals)?;
        if index >= proposals.len() {
            return Err(SessionError::BadIndex {
                index,
                len: proposals.len(),
            });
        }
        self.prev_mask = Tensor::new(vec![self.height(), self.width()], proposals.probs(index));
        self.selected = Some(index);
        self.repicks += 1;
        self.log.push(Event::Select { proposal_index: index });
        self.revision += 1;
        Ok(())
    }

    /// Drops the last click, and any selections made after it, by replaying
    /// the rest of the log.
    pub fn undo<M: ProposalModel<f32> + ?Sized>(&mut self, model: &M) -> Result<(), SessionError> {
        let last_click = self
            .log
            .iter()
            .rposition(|e| matches!(e, Event::Click { .. }))
            .ok_or(SessionError::EmptyHistory)?;
        let mut replayed = Session::replay(self.id.clone(), self.image.clone(), &self.log[..last_click], model)?;
        replayed.revision = self.revision + 1;
        *self = replayed;
        Ok(())
    }

    pub fn apply<M: ProposalModel<f32> + ?Sized>(&mut self, model: &M, event: Event) -> Result<(), SessionError> {
        match event {
            Event::Click { x, y, polarity } => self.click(model, x, y, polarity),
            Event::Select { proposal_index } => self.select(proposal_index),
        }
    }

    /// Rebuilds a session from its image and event log.
    pub fn replay<M: ProposalModel<f32> + ?Sized>(
        id: impl Into<String>,
        image: Tensor<f32>,
        log: &[Event],
        model: &M,
    ) -> Result<Self, SessionError> {
        let mut s = Session::new(id, image);
        for e in log {
            s.apply(model, *e)?;
        }
        Ok(s)
    }

    /// The selected proposal binarized at 0.5.
    pub fn selected_mask(&self) -> Option<MaskGrid> {
        self.selected
            .map(|_| MaskGrid::from_probs(self.width(), self.height(), self.prev_mask.data()))
    }

    pub fn view(&self) -> SessionView {
        let mut proposals: Vec<ProposalView> = match &self.proposals {
            None => Vec::new(),
            Some(p) => {
                let products = p.products();
                (0..p.len())
                    .map(|i| ProposalView {
                        index: i,
                        conf: p.conf[i],
                        iou_pred: p.iou_pred[i],
                        product: products[i],
                        selected: self.selected == Some(i),
                        mask: RleMask::encode(&p.mask(i)),
                    })
                    .collect()
            }
        };
        // Stable: equal products keep model order.
        proposals.sort_by(|a, b| b.product.total_cmp(&a.product));
        SessionView {
            session_id: self.id.clone(),
            height: self.height(),
            width: self.width(),
            revision: self.revision,
            clicks: self.clicks.clone(),
            selected_index: self.selected,
            repicks: self.repicks,
            proposals,
            selected_mask: self.selected_mask().map(|m| RleMask::encode(&m)),
            log: self.log.clone(),
        }
    }
}

/// Row-major run lengths, alternating outside/inside and starting with an
/// outside run (zero when the first pixel is inside).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub rle: Vec<u32>,
    pub width: usize,
    pub height: usize,
}

impl RleMask {
    pub fn encode(mask: &MaskGrid) -> Self {
        let mut rle = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in mask.bits() {
            if b != current {
                rle.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        rle.push(run);
        Self {
            rle,
            width: mask.width(),
            height: mask.height(),
        }
    }

    /// `None` when the runs do not cover the grid exactly.
    pub fn decode(&self) -> Option<MaskGrid> {
        let total: u64 = self.rle.iter().map(|r| *r as u64).sum();
        if total != (self.width * self.height) as u64 {
            return None;
        }
        let mut bits = Vec::with_capacity(self.width * self.height);
        for (k, r) in self.rle.iter().enumerate() {
            bits.extend(std::iter::repeat(k % 2 == 1).take(*r as usize));
        }
        Some(MaskGrid::from_bits(self.width, self.height, bits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalView {
    /// Position in the model's output; this is what `/select` takes.
    pub index: usize,
    pub conf: f32,
    pub iou_pred: f32,
    pub product: f32,
    pub selected: bool,
    pub mask: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub revision: u64,
    pub clicks: Vec<Click>,
    pub selected_index: Option<usize>,
    pub repicks: usize,
    /// Ordered by `product`, highest first.
    pub proposals: Vec<ProposalView>,
    pub selected_mask: Option<RleMask>,
    pub log: Vec<Event>,
}
