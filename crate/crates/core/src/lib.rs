//! Group-revision policy optimization on a synthetic grounding environment.
//!
//! A behaviour policy first emits a single grounding response for a scene. A
//! group of revision responses is then sampled conditioned on that initial
//! answer, each candidate is Hungarian-matched against the ground truth, and
//! the relative drop in alignment cost ("shaping signal") both shapes the
//! candidate reward and scales its group-relative advantage inside a clipped,
//! KL-regularized policy update.
//!
//! Module map:
//!
//! - [`geometry`]: unit-square boxes and points, IoU and normalized L1.
//! - [`matching`]: Hungarian assignment with unit-cost dummy padding.
//! - [`consolidation`]: pairwise cost, alignment cost and shaping signal.
//! - [`reward`]: format/accuracy/shaping reward, z-score advantages, post-scaling.
//! - [`response`]: the `<think>`/`<answer>` text protocol and revision prompt.
//! - [`scenes`]: procedural scenes, anchor grid, dataset files.
//! - [`policy`]: categorical grounding policy with exact log-probs, gradients and KL.
//! - [`trainer`]: rollouts, surrogate objective, updates, training and evaluation.

pub mod consolidation;
pub mod geometry;
pub mod matching;
pub mod policy;
pub mod response;
pub mod reward;
pub mod scenes;
pub mod seed;
pub mod trainer;

pub use consolidation::{alignment_cost, pairwise_cost, shaping_signal, ShapingRecord, ShapingSet};
pub use geometry::{iou, l1_box, l1_point, BoxN, GeometryError, PointN};
pub use matching::{hungarian, match_objects, Assignment, CostMatrix, MatchError, ObjectMatch};
pub use policy::{ActionTrace, PolicyError, PolicyInit, PolicyParams, PolicyShape, RoundContext};
pub use response::{FormatError, Response, RevisionQuery};
pub use reward::RewardBreakdown;
pub use scenes::{AnchorGrid, Difficulty, EnvConfig, SceneSpec};
pub use trainer::{EvalReport, RolloutRecord, StepMetrics, TrainConfig, TrainError};
