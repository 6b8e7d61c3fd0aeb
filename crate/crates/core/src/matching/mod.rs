//! Set matching between predicted trajectories and ground truth, and the
//! training losses.

mod boxes;
mod cost;
mod hungarian;
mod loss;
mod target;

pub use boxes::{giou, giou_rows, iou, MIN_SIDE};
pub use cost::trajectory_match_cost;
pub use hungarian::{hungarian, Assignment};
pub use loss::{
    binary_cross_entropy, compute_losses, dice_loss, mask_loss_layers, mask_targets, mask_terms, match_predictions,
    positives, LossReport, Positive, DICE_SMOOTH,
};
pub use target::{GroundTruthClip, GtFrame, GtInstance};

use crate::error::{CoreError, Result};

/// Loss and matching weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub mask: f64,
    /// Class weight of the "no object" target.
    pub no_object: f64,
    /// Per decoder layer, first to last.
    pub aux: Vec<f64>,
}

impl LossWeights {
    pub fn new(dec_layers: usize) -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            dice: 1.0,
            mask: 1.0,
            no_object: 0.1,
            aux: aux_schedule(dec_layers),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.aux.iter().sum();
        if self.aux.is_empty() || (s - 1.0).abs() > 1e-12 {
            return Err(CoreError::Config(format!("aux weights sum to {s}, expected 1")));
        }
        let all = [self.class, self.l1, self.giou, self.dice, self.mask, self.no_object];
        if all.iter().chain(&self.aux).any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Layer weights: half on the final layer, the other half spread over the
/// earlier layers in proportion to depth (`1/30 … 5/30, 1/2` for six).
pub fn aux_schedule(layers: usize) -> Vec<f64> {
    match layers {
        0 => Vec::new(),
        1 => vec![1.0],
        d => {
            let denom = (d * (d - 1)) as f64;
            let mut w: Vec<f64> = (1..d).map(|l| l as f64 / denom).collect();
            w.push(0.5);
            w
        }
    }
}
