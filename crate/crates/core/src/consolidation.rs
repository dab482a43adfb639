//! Alignment cost of a prediction set and the shaping signal between an
//! initial response and a revision candidate.

use crate::geometry::{iou, l1_box, l1_point, BoxN, PointN};
use crate::matching::{match_objects, Assignment, MatchError, ObjectMatch};

/// Below this initial alignment cost the initial response counts as perfect
/// and the shaping signal is zero.
pub const PHI_FLOOR: f64 = 1e-6;

/// Per-object cost: mean of `(1 - IoU)`, box L1 and point L1.
pub fn pairwise_cost(
    pred_box: &BoxN,
    pred_point: &PointN,
    gt_box: &BoxN,
    gt_point: &PointN,
) -> f64 {
    ((1.0 - iou(pred_box, gt_box)) + l1_box(pred_box, gt_box) + l1_point(pred_point, gt_point))
        / 3.0
}

/// One response's predictions bundled with the scene's ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ShapingSet<'a> {
    pub pred_boxes: &'a [BoxN],
    pub pred_points: &'a [PointN],
    pub gt_boxes: &'a [BoxN],
    pub gt_points: &'a [PointN],
}

/// Matching outcome for one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub phi: f64,
    pub assignment: Assignment,
    pub matches: Vec<ObjectMatch>,
}

impl Alignment {
    /// IoU of each ground-truth object with its matched prediction (0 when
    /// matched to a dummy).
    pub fn matched_ious(&self, s: &ShapingSet<'_>) -> Vec<f64> {
        let mut out = vec![0.0; s.gt_boxes.len()];
        for m in &self.matches {
            if let (Some(p), Some(g)) = (m.pred, m.gt) {
                out[g] = iou(&s.pred_boxes[p], &s.gt_boxes[g]);
            }
        }
        out
    }
}

/// Mean pair cost over every matched pair, dummies included.
pub fn alignment_cost(s: &ShapingSet<'_>) -> Result<(f64, Assignment), MatchError> {
    align(s).map(|a| (a.phi, a.assignment))
}

/// Like [`alignment_cost`] but keeps the per-pair breakdown.
pub fn align(s: &ShapingSet<'_>) -> Result<Alignment, MatchError> {
    let (assignment, matches) =
        match_objects(s.pred_boxes, s.pred_points, s.gt_boxes, s.gt_points)?;
    let phi = if s.pred_boxes.is_empty() {
        1.0
    } else {
        (assignment.total_cost / matches.len() as f64).clamp(0.0, 1.0)
    };
    Ok(Alignment {
        phi,
        assignment,
        matches,
    })
}

/// Clamped relative improvement of `phi_revised` over `phi_initial`.
pub fn shaping_signal(phi_initial: f64, phi_revised: f64) -> f64 {
    if phi_initial < PHI_FLOOR {
        return 0.0;
    }
    ((phi_initial - phi_revised) / phi_initial).clamp(0.0, 1.0)
}

/// Alignment costs of the initial response and one revision candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapingRecord {
    pub phi_initial: f64,
    pub phi_revised: f64,
    pub delta_phi: f64,
    /// Matching behind `phi_revised`.
    pub assignment: Assignment,
}

impl ShapingRecord {
    pub fn new(phi_initial: f64, revised: &Alignment) -> Self {
        Self {
            phi_initial,
            phi_revised: revised.phi,
            delta_phi: shaping_signal(phi_initial, revised.phi),
            assignment: revised.assignment.clone(),
        }
    }

    /// Record for plain-GRPO samples: no initial response, no shaping.
    pub fn unshaped(revised: &Alignment) -> Self {
        Self {
            phi_initial: revised.phi,
            phi_revised: revised.phi,
            delta_phi: 0.0,
            assignment: revised.assignment.clone(),
        }
    }
}
