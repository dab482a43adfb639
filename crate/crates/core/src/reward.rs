//! Candidate rewards and group-relative advantages.

use crate::consolidation::{alignment_cost, ShapingSet};
use crate::geometry::{BoxN, PointN};
use crate::matching::MatchError;
use crate::response::{parse, Response};

/// Stabilizer added to the group standard deviation.
pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("group advantages need at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Every term that went into one candidate's reward and advantage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_acc: f64,
    pub delta_phi: f64,
    /// Shaping weight actually applied (0 when consolidation is off).
    pub omega: f64,
    pub total: f64,
    pub advantage: f64,
    pub scaled_advantage: f64,
    /// Whether `scaled_advantage = (1 + delta_phi) * advantage`; otherwise
    /// it equals `advantage`.
    pub postscale_applied: bool,
}

/// 1 when `raw_text` parses as a well-formed response, else 0.
pub fn format_reward(raw_text: &str) -> f64 {
    if parse(raw_text).is_ok() {
        1.0
    } else {
        0.0
    }
}

/// `1 - alignment_cost` of the response against the ground truth.
pub fn accuracy_reward(
    response: &Response,
    gt_boxes: &[BoxN],
    gt_points: &[PointN],
) -> Result<f64, MatchError> {
    let (phi, _) = alignment_cost(&ShapingSet {
        pred_boxes: response.boxes(),
        pred_points: response.points(),
        gt_boxes,
        gt_points,
    })?;
    Ok(1.0 - phi)
}

pub fn total_reward(r_format: f64, r_acc: f64, delta_phi: f64, omega: f64) -> f64 {
    r_format + r_acc + omega * delta_phi
}

/// Mean and population standard deviation of a group.
pub fn group_stats(rewards: &[f64]) -> (f64, f64) {
    let g = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / g;
    (mu, var.sqrt())
}

/// Z-score advantages `(r_i - mu) / (sigma + eps)`.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.len() < 2 {
        return Err(RewardError::GroupTooSmall(rewards.len()));
    }
    let (mu, sigma) = group_stats(rewards);
    Ok(rewards
        .iter()
        .map(|r| (r - mu) / (sigma + SIGMA_EPS))
        .collect())
}

pub fn post_scale(advantage: f64, delta_phi: f64) -> f64 {
    (1.0 + delta_phi) * advantage
}
