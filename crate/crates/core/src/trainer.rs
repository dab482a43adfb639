//! Two-round rollouts, the clipped surrogate objective and the training loop.
//!
//! One rollout samples a single initial response from the behaviour policy,
//! serializes it (optionally through the corruption channel) and re-parses
//! it. A successful parse conditions a group of `G` revision candidates on
//! the initial answer; a failed parse, or revision being disabled, samples
//! the group directly from the scene as in plain GRPO.
//!
//! Every candidate is matched against the ground truth; its reward is
//! `R_format + R_acc + omega * delta_phi` and its advantage the group z-score,
//! optionally scaled by `1 + delta_phi`. The policy ascends
//!
//! ```text
//! J = mean_batch mean_group [ min(l A, clip(l, 1-eps, 1+eps) A) - beta * KL_trace ]
//! ```
//!
//! with `l` the trace likelihood ratio between current and behaviour policy
//! and `KL_trace` the exact slot-summed KL to the frozen reference.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consolidation::{align, Alignment, ShapingRecord, ShapingSet};
use crate::policy::{
    response_from_trace, sample_response, trace_kl, trace_log_prob, ActionTrace, ContextGrad,
    ContextLogits, PolicyError, PolicyInit, PolicyParams, PolicyShape, RoundContext,
};
use crate::response::{build_revision_query, corrupt, parse, Response};
use crate::reward::{group_advantages, group_stats, post_scale, total_reward, RewardBreakdown};
use crate::scenes::{AnchorGrid, Difficulty, SceneSpec};
use crate::seed;

/// IoU above which a grounding counts as a hit.
pub const HIT_IOU: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite {what} at step {step}")]
    NonFinite {
        step: u64,
        what: String,
        /// Metrics of the offending step, when they could be computed.
        diagnostic: Option<Box<StepMetrics>>,
    },
    #[error("metrics sink failed: {0}")]
    Sink(#[from] std::io::Error),
}

/// Optimization hyperparameters and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Candidates per group `G`.
    pub group_size: usize,
    /// Shaping weight `omega`.
    pub omega: f64,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    /// Step size of plain gradient ascent. Large-model recipes use 1e-6 with
    /// weight decay 0.01; the categorical policy here needs far larger steps.
    pub learning_rate: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub steps: u64,
    /// Scenes per rollout batch.
    pub batch_size: usize,
    /// Updates between refreshes of the behaviour policy snapshot.
    pub old_policy_refresh_interval: u64,
    /// Rollout batches whose gradients are averaged into one update.
    pub grad_accumulation: usize,
    pub revision_enabled: bool,
    /// Adds `omega * delta_phi` to the reward.
    pub consolidation_enabled: bool,
    /// Scales advantages by `1 + delta_phi`; only active with consolidation.
    pub postscale_enabled: bool,
    /// Probability that a sampled response's text loses a structural tag.
    pub p_corrupt: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints (0 disables them).
    pub checkpoint_interval: u64,
    pub init: PolicyInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            omega: 5.0,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            learning_rate: 1.0,
            weight_decay: 1e-4,
            steps: 200,
            batch_size: 64,
            old_policy_refresh_interval: 2,
            grad_accumulation: 1,
            revision_enabled: true,
            consolidation_enabled: true,
            postscale_enabled: true,
            p_corrupt: 0.0,
            seed: 0,
            checkpoint_interval: 100,
            init: PolicyInit::default(),
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.group_size < 2 {
            v.push(format!(
                "train.group_size must be >= 2 (got {})",
                self.group_size
            ));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            v.push(format!(
                "train.clip_epsilon must lie in (0, 1) (got {})",
                self.clip_epsilon
            ));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            v.push(format!("train.kl_beta must be >= 0 (got {})", self.kl_beta));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            v.push(format!("train.omega must be >= 0 (got {})", self.omega));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "train.learning_rate must be >= 0 (got {})",
                self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!(
                "train.weight_decay must be >= 0 (got {})",
                self.weight_decay
            ));
        }
        if self.batch_size < 1 {
            v.push("train.batch_size must be >= 1".into());
        }
        if self.old_policy_refresh_interval < 1 {
            v.push("train.old_policy_refresh_interval must be >= 1".into());
        }
        if self.grad_accumulation < 1 {
            v.push("train.grad_accumulation must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_corrupt) {
            v.push(format!(
                "train.p_corrupt must lie in [0, 1] (got {})",
                self.p_corrupt
            ));
        }
        for (name, x) in [
            ("descriptor_gain", self.init.descriptor_gain),
            ("anchor_bias", self.init.anchor_bias),
            ("stop_bias", self.init.stop_bias),
            ("stop_slope", self.init.stop_slope),
        ] {
            if !x.is_finite() {
                v.push(format!("train.init.{name} must be finite (got {x})"));
            }
        }
        v
    }

    fn shaping_weight(&self) -> f64 {
        if self.consolidation_enabled {
            self.omega
        } else {
            0.0
        }
    }

    fn applies_postscale(&self) -> bool {
        self.consolidation_enabled && self.postscale_enabled
    }
}

/// How a rollout's group was sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Candidates conditioned on a parsed initial response.
    Revision,
    /// The initial response failed to parse; plain GRPO group.
    Fallback,
    /// Revision disabled; plain GRPO group.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialResponse {
    pub trace: ActionTrace,
    /// Text after the corruption channel.
    pub text: String,
    /// Parsed response and its alignment cost, absent on parse failure.
    pub parsed: Option<(Response, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub trace: ActionTrace,
    pub text: String,
    /// Parsed predictions; empty when the text failed to parse.
    pub response: Response,
    pub shaping: ShapingRecord,
    pub reward: RewardBreakdown,
    /// Matched IoU averaged over every pair of the padded assignment, so
    /// missing and surplus predictions both count as 0.
    pub set_iou: f64,
}

/// One sample of the objective's expectation: a scene, its initial response
/// and the scored candidate group.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// Position of the scene in the dataset slice the rollout was drawn from.
    pub scene_index: usize,
    pub scene_id: u64,
    pub mode: RolloutMode,
    pub initial: Option<InitialResponse>,
    pub revision_prompt: Option<String>,
    /// Conditioning shared by every candidate.
    pub context: RoundContext,
    pub candidates: Vec<Candidate>,
    pub mu: f64,
    pub sigma: f64,
}

impl RolloutRecord {
    pub fn is_fallback(&self) -> bool {
        self.mode == RolloutMode::Fallback
    }

    pub fn group_best_iou(&self) -> f64 {
        self.candidates
            .iter()
            .map(|c| c.set_iou)
            .fold(0.0, f64::max)
    }
}

fn alignment_of(response: &Response, scene: &SceneSpec) -> Alignment {
    align(&ShapingSet {
        pred_boxes: response.boxes(),
        pred_points: response.points(),
        gt_boxes: &scene.gt_boxes,
        gt_points: &scene.gt_points,
    })
    .expect("scenes always carry ground truth")
}

/// Matched IoU averaged over `max(M, N_x)` pairs.
pub fn set_iou(alignment: &Alignment, response: &Response, scene: &SceneSpec) -> f64 {
    let s = ShapingSet {
        pred_boxes: response.boxes(),
        pred_points: response.points(),
        gt_boxes: &scene.gt_boxes,
        gt_points: &scene.gt_points,
    };
    let ious = alignment.matched_ious(&s);
    ious.iter().sum::<f64>() / ious.len().max(response.len()) as f64
}

/// Samples and scores one group for `scene` under the behaviour policy.
pub fn rollout<R: rand::Rng + ?Sized>(
    scene_index: usize,
    scene: &SceneSpec,
    grid: &AnchorGrid,
    old_params: &PolicyParams,
    config: &TrainConfig,
    rng: &mut R,
) -> RolloutRecord {
    let shape = old_params.shape();
    let mut mode = RolloutMode::Direct;
    let mut initial = None;
    let mut revision_prompt = None;
    let mut context = RoundContext::initial(shape);
    let mut phi_initial = None;

    if config.revision_enabled {
        let (_, trace) = sample_response(old_params, scene, grid, &context, rng);
        let text = corrupt(
            &response_from_trace(grid, &trace).serialize(),
            config.p_corrupt,
            rng,
        );
        match parse(&text) {
            Ok(parsed) => {
                let phi = alignment_of(&parsed, scene).phi;
                mode = RolloutMode::Revision;
                phi_initial = Some(phi);
                revision_prompt =
                    Some(build_revision_query(&scene.question(), &parsed).combined_prompt);
                context = RoundContext::revision(shape, &trace);
                initial = Some(InitialResponse {
                    trace,
                    text,
                    parsed: Some((parsed, phi)),
                });
            }
            Err(_) => {
                mode = RolloutMode::Fallback;
                initial = Some(InitialResponse {
                    trace,
                    text,
                    parsed: None,
                });
            }
        }
    }

    let omega = config.shaping_weight();
    let mut candidates: Vec<Candidate> = (0..config.group_size)
        .map(|_| {
            let (_, trace) = sample_response(old_params, scene, grid, &context, rng);
            let text = corrupt(
                &response_from_trace(grid, &trace).serialize(),
                config.p_corrupt,
                rng,
            );
            let (r_format, response) = match parse(&text) {
                Ok(r) => (1.0, r),
                Err(_) => (0.0, Response::empty("")),
            };
            let alignment = alignment_of(&response, scene);
            let shaping = match phi_initial {
                Some(phi1) => ShapingRecord::new(phi1, &alignment),
                None => ShapingRecord::unshaped(&alignment),
            };
            let r_acc = 1.0 - alignment.phi;
            let total = total_reward(r_format, r_acc, shaping.delta_phi, omega);
            let iou = set_iou(&alignment, &response, scene);
            Candidate {
                trace,
                text,
                response,
                reward: RewardBreakdown {
                    r_format,
                    r_acc,
                    delta_phi: shaping.delta_phi,
                    omega,
                    total,
                    advantage: 0.0,
                    scaled_advantage: 0.0,
                    postscale_applied: config.applies_postscale(),
                },
                shaping,
                set_iou: iou,
            }
        })
        .collect();

    let totals: Vec<f64> = candidates.iter().map(|c| c.reward.total).collect();
    let (mu, sigma) = group_stats(&totals);
    let advantages = group_advantages(&totals).expect("validated group size");
    for (c, a) in candidates.iter_mut().zip(advantages) {
        c.reward.advantage = a;
        c.reward.scaled_advantage = if config.applies_postscale() {
            post_scale(a, c.reward.delta_phi)
        } else {
            a
        };
    }

    RolloutRecord {
        scene_index,
        scene_id: scene.id,
        mode,
        initial,
        revision_prompt,
        context,
        candidates,
        mu,
        sigma,
    }
}

/// Objective value, its gradient and the diagnostics gathered on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub objective: f64,
    /// Theta-shaped gradient of `objective`.
    pub grad: Vec<f64>,
    /// Mean over candidates of the slot-summed KL to the reference.
    pub mean_kl: f64,
    /// Fraction of candidates whose clipped branch was selected.
    pub clip_fraction: f64,
}

struct RecordTerms {
    objective: f64,
    kl: f64,
    clipped: usize,
    grad: ContextGrad,
}

/// Clipped surrogate minus `beta * KL`, averaged over each group and then
/// over the batch, with its exact gradient.
pub fn surrogate_and_grad(
    params: &PolicyParams,
    old_params: &PolicyParams,
    ref_params: &PolicyParams,
    scenes: &[SceneSpec],
    records: &[RolloutRecord],
    config: &TrainConfig,
) -> Result<Surrogate, TrainError> {
    params.check_compatible(old_params)?;
    params.check_compatible(ref_params)?;
    let shape = params.shape();
    for r in records {
        for c in &r.candidates {
            c.trace.validate(shape)?;
        }
        if r.scene_index >= scenes.len() {
            return Err(PolicyError::Shape(format!(
                "record refers to scene {} of {}",
                r.scene_index,
                scenes.len()
            ))
            .into());
        }
    }
    let eps = config.clip_epsilon;
    let beta = config.kl_beta;

    let terms: Vec<RecordTerms> = records
        .par_iter()
        .map(|r| {
            let scene = &scenes[r.scene_index];
            let cl = ContextLogits::new(params, scene, &r.context);
            let cl_old = ContextLogits::new(old_params, scene, &r.context);
            let cl_ref = ContextLogits::new(ref_params, scene, &r.context);
            let g = r.candidates.len() as f64;
            let mut grad = ContextGrad::new(shape);
            let mut objective = 0.0;
            let mut kl_sum = 0.0;
            let mut clipped = 0;
            for c in &r.candidates {
                let adv = c.reward.scaled_advantage;
                let ratio = (trace_log_prob(params, &cl, &c.trace)
                    - trace_log_prob(old_params, &cl_old, &c.trace))
                .exp();
                let unclipped = ratio * adv;
                let clipped_term = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                let kl = trace_kl(params, &cl, ref_params, &cl_ref, &c.trace);
                if clipped_term < unclipped {
                    clipped += 1;
                    objective += clipped_term / g;
                } else {
                    objective += unclipped / g;
                    grad.add_log_prob(params, &cl, &c.trace, adv * ratio / g);
                }
                objective -= beta * kl / g;
                kl_sum += kl;
                grad.add_kl(params, &cl, ref_params, &cl_ref, &c.trace, -beta / g);
            }
            RecordTerms {
                objective,
                kl: kl_sum,
                clipped,
                grad,
            }
        })
        .collect();

    let b = records.len().max(1) as f64;
    let n_cand: usize = records.iter().map(|r| r.candidates.len()).sum();
    let mut grad = vec![0.0; params.theta().len()];
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0;
    for (r, t) in records.iter().zip(&terms) {
        t.grad.accumulate(
            shape,
            &scenes[r.scene_index],
            &r.context,
            1.0 / b,
            &mut grad,
        );
        objective += t.objective / b;
        kl += t.kl;
        clipped += t.clipped;
    }
    let denom = n_cand.max(1) as f64;
    Ok(Surrogate {
        objective,
        grad,
        mean_kl: kl / denom,
        clip_fraction: clipped as f64 / denom,
    })
}

/// One gradient-ascent step with decoupled weight decay.
pub fn update(
    params: &PolicyParams,
    gradient: &[f64],
    config: &TrainConfig,
) -> Result<PolicyParams, TrainError> {
    if gradient.len() != params.theta().len() {
        return Err(PolicyError::Shape(format!(
            "gradient has {} entries, expected {}",
            gradient.len(),
            params.theta().len()
        ))
        .into());
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step: 0,
            what: format!("gradient entry {i}"),
            diagnostic: None,
        });
    }
    let lr = config.learning_rate;
    let decay = lr * config.weight_decay;
    let mut next = params.clone();
    for (w, g) in next.theta_mut().iter_mut().zip(gradient) {
        *w += lr * g - decay * *w;
    }
    Ok(next)
}

/// Per-step training metrics; one JSON line each in the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_r_format: f64,
    pub mean_r_acc: f64,
    pub mean_delta_phi: f64,
    /// Mean total reward `r_i`.
    pub mean_reward: f64,
    pub mean_kl: f64,
    #[serde(rename = "frac_group_best_iou_above_0.5")]
    pub frac_group_best_iou_above_0_5: f64,
    pub clip_fraction: f64,
    /// Batch mean of each group's largest shaping signal.
    pub mean_group_max_delta_phi: f64,
    pub fallback_fraction: f64,
    pub objective: f64,
}

/// Names of the metrics fields, in stream order.
pub const METRIC_FIELDS: [&str; 11] = [
    "step",
    "mean_r_format",
    "mean_r_acc",
    "mean_delta_phi",
    "mean_reward",
    "mean_kl",
    "frac_group_best_iou_above_0.5",
    "clip_fraction",
    "mean_group_max_delta_phi",
    "fallback_fraction",
    "objective",
];

fn step_metrics(step: u64, records: &[RolloutRecord], s: &Surrogate) -> StepMetrics {
    let cands: Vec<&Candidate> = records.iter().flat_map(|r| &r.candidates).collect();
    let n = cands.len().max(1) as f64;
    let b = records.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Candidate) -> f64| cands.iter().map(|c| f(c)).sum::<f64>() / n;
    StepMetrics {
        step,
        mean_r_format: mean(&|c| c.reward.r_format),
        mean_r_acc: mean(&|c| c.reward.r_acc),
        mean_delta_phi: mean(&|c| c.reward.delta_phi),
        mean_reward: mean(&|c| c.reward.total),
        mean_kl: s.mean_kl,
        frac_group_best_iou_above_0_5: records
            .iter()
            .filter(|r| r.group_best_iou() > HIT_IOU)
            .count() as f64
            / b,
        clip_fraction: s.clip_fraction,
        mean_group_max_delta_phi: records
            .iter()
            .map(|r| {
                r.candidates
                    .iter()
                    .map(|c| c.reward.delta_phi)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / b,
        fallback_fraction: records.iter().filter(|r| r.is_fallback()).count() as f64 / b,
        objective: s.objective,
    }
}

/// Deterministic epoch-wise shuffled batches over a dataset.
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut seed::stream(self.seed, &[seed::SHUFFLE, self.epoch]));
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Rollouts for a batch of dataset indices, one independent stream per slot.
pub fn rollout_batch(
    indices: &[usize],
    scenes: &[SceneSpec],
    grid: &AnchorGrid,
    old_params: &PolicyParams,
    config: &TrainConfig,
    stream_key: &[u64],
) -> Vec<RolloutRecord> {
    indices
        .par_iter()
        .enumerate()
        .map(|(pos, &i)| {
            let mut key = stream_key.to_vec();
            key.push(pos as u64);
            let mut rng = seed::stream(config.seed, &key);
            rollout(i, &scenes[i], grid, old_params, config, &mut rng)
        })
        .collect()
}

pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
}

/// Mean and maximum shaping signal within one candidate group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupShaping {
    pub mean: f64,
    pub max: f64,
}

impl GroupShaping {
    pub fn of(record: &RolloutRecord) -> Self {
        let d: Vec<f64> = record
            .candidates
            .iter()
            .map(|c| c.reward.delta_phi)
            .collect();
        Self {
            mean: d.iter().sum::<f64>() / d.len().max(1) as f64,
            max: d.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// What a training step exposes to its observer.
pub struct StepReport<'a> {
    pub metrics: &'a StepMetrics,
    /// Parameters after the step's update.
    pub params: &'a PolicyParams,
    /// One entry per rollout of the step, in batch order.
    pub groups: &'a [GroupShaping],
}

/// Runs `config.steps` updates. `on_step` sees each step's report before the
/// next step starts.
pub fn train<F>(
    config: &TrainConfig,
    grid: &AnchorGrid,
    max_slots: usize,
    dataset: &[SceneSpec],
    mut on_step: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&StepReport<'_>) -> std::io::Result<()>,
{
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(TrainError::Config(problems));
    }
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let shape = PolicyShape::new(grid.len(), max_slots);
    if let Some(s) = dataset
        .iter()
        .find(|s| s.descriptor.len() != shape.num_actions())
    {
        return Err(PolicyError::Shape(format!(
            "scene {} has descriptor length {}, expected {}",
            s.id,
            s.descriptor.len(),
            shape.num_actions()
        ))
        .into());
    }
    let ref_params = PolicyParams::init(shape, &config.init);
    let mut params = ref_params.clone();
    let mut old_params = params.clone();
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let mut metrics = Vec::with_capacity(config.steps as usize);

    for step in 1..=config.steps {
        if (step - 1) % config.old_policy_refresh_interval == 0 {
            old_params = params.clone();
        }
        let mut grad = vec![0.0; params.theta().len()];
        let mut all_records = Vec::new();
        let mut objective = 0.0;
        let mut kl = 0.0;
        let mut clip = 0.0;
        let acc = config.grad_accumulation as f64;
        for micro in 0..config.grad_accumulation {
            let indices = sampler.next_batch(config.batch_size);
            let records = rollout_batch(
                &indices,
                dataset,
                grid,
                &old_params,
                config,
                &[seed::ROLLOUT, step, micro as u64],
            );
            let s =
                surrogate_and_grad(&params, &old_params, &ref_params, dataset, &records, config)?;
            for (g, x) in grad.iter_mut().zip(&s.grad) {
                *g += x / acc;
            }
            objective += s.objective / acc;
            kl += s.mean_kl / acc;
            clip += s.clip_fraction / acc;
            all_records.extend(records);
        }
        let summary = Surrogate {
            objective,
            grad: Vec::new(),
            mean_kl: kl,
            clip_fraction: clip,
        };
        let m = step_metrics(step, &all_records, &summary);
        if !objective.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "objective".into(),
                diagnostic: Some(Box::new(m)),
            });
        }
        params = update(&params, &grad, config).map_err(|e| match e {
            TrainError::NonFinite { what, .. } => TrainError::NonFinite {
                step,
                what,
                diagnostic: Some(Box::new(m.clone())),
            },
            other => other,
        })?;
        let groups: Vec<GroupShaping> = all_records.iter().map(GroupShaping::of).collect();
        on_step(&StepReport {
            metrics: &m,
            params: &params,
            groups: &groups,
        })?;
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

/// Inference metrics for one difficulty tier (or the whole dataset).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierReport {
    pub num_scenes: usize,
    pub num_objects: usize,
    /// Mean matched IoU over ground-truth objects.
    pub mean_iou: f64,
    /// Fraction of ground-truth objects whose matched prediction has IoU > 0.5.
    #[serde(rename = "acc_at_0.5")]
    pub acc_at_0_5: f64,
    /// Fraction of scenes whose predicted count equals the ground truth.
    pub count_acc: f64,
    /// Mean alignment cost.
    pub mean_phi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: TierReport,
    pub per_tier: BTreeMap<Difficulty, TierReport>,
}

#[derive(Default)]
struct TierAcc {
    scenes: usize,
    objects: usize,
    iou_sum: f64,
    hits: usize,
    counts_right: usize,
    phi_sum: f64,
}

impl TierAcc {
    fn add(&mut self, ious: &[f64], count_ok: bool, phi: f64) {
        self.scenes += 1;
        self.objects += ious.len();
        self.iou_sum += ious.iter().sum::<f64>();
        self.hits += ious.iter().filter(|v| **v > HIT_IOU).count();
        self.counts_right += usize::from(count_ok);
        self.phi_sum += phi;
    }

    fn report(&self) -> TierReport {
        if self.scenes == 0 {
            return TierReport::default();
        }
        TierReport {
            num_scenes: self.scenes,
            num_objects: self.objects,
            mean_iou: self.iou_sum / self.objects as f64,
            acc_at_0_5: self.hits as f64 / self.objects as f64,
            count_acc: self.counts_right as f64 / self.scenes as f64,
            mean_phi: self.phi_sum / self.scenes as f64,
        }
    }
}

/// Samples one direct response per scene and scores it; no revision round.
pub fn evaluate(
    params: &PolicyParams,
    grid: &AnchorGrid,
    dataset: &[SceneSpec],
    seed_value: u64,
) -> EvalReport {
    let shape = params.shape();
    let ctx = RoundContext::initial(shape);
    let per_scene: Vec<(Difficulty, Vec<f64>, bool, f64)> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = seed::stream(seed_value, &[seed::EVAL, i as u64]);
            let (response, _) = sample_response(params, scene, grid, &ctx, &mut rng);
            let a = alignment_of(&response, scene);
            let s = ShapingSet {
                pred_boxes: response.boxes(),
                pred_points: response.points(),
                gt_boxes: &scene.gt_boxes,
                gt_points: &scene.gt_points,
            };
            (
                scene.difficulty,
                a.matched_ious(&s),
                response.len() == scene.num_objects(),
                a.phi,
            )
        })
        .collect();

    let mut overall = TierAcc::default();
    let mut tiers: BTreeMap<Difficulty, TierAcc> = BTreeMap::new();
    for (tier, ious, ok, phi) in &per_scene {
        overall.add(ious, *ok, *phi);
        tiers.entry(*tier).or_default().add(ious, *ok, *phi);
    }
    EvalReport {
        overall: overall.report(),
        per_tier: tiers.into_iter().map(|(k, v)| (k, v.report())).collect(),
    }
}

/// Group-best IoU of revision groups versus direct groups under one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionComparison {
    pub num_scenes: usize,
    /// Fraction of scenes whose revision-group best IoU exceeds 0.5.
    pub frac_revision_hit: f64,
    /// Same for groups sampled directly from the scene.
    pub frac_direct_hit: f64,
    pub mean_revision_best_iou: f64,
    pub mean_direct_best_iou: f64,
}

/// For each scene, samples an initial response plus `G` revision candidates,
/// and independently `G` direct candidates, all from `params`.
pub fn compare_revision_vs_direct(
    params: &PolicyParams,
    grid: &AnchorGrid,
    dataset: &[SceneSpec],
    group_size: usize,
    seed_value: u64,
) -> RevisionComparison {
    let shape = params.shape();
    let best = |scene: &SceneSpec, ctx: &RoundContext, rng: &mut rand_chacha::ChaCha8Rng| {
        (0..group_size)
            .map(|_| {
                let (r, _) = sample_response(params, scene, grid, ctx, rng);
                set_iou(&alignment_of(&r, scene), &r, scene)
            })
            .fold(0.0, f64::max)
    };
    let pairs: Vec<(f64, f64)> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let direct_ctx = RoundContext::initial(shape);
            let mut rng = seed::stream(seed_value, &[seed::COMPARE, i as u64, 0]);
            let (_, initial) = sample_response(params, scene, grid, &direct_ctx, &mut rng);
            let rev_ctx = RoundContext::revision(shape, &initial);
            let rev = best(scene, &rev_ctx, &mut rng);
            let mut rng = seed::stream(seed_value, &[seed::COMPARE, i as u64, 1]);
            let direct = best(scene, &direct_ctx, &mut rng);
            (rev, direct)
        })
        .collect();
    let n = pairs.len().max(1) as f64;
    RevisionComparison {
        num_scenes: pairs.len(),
        frac_revision_hit: pairs.iter().filter(|p| p.0 > HIT_IOU).count() as f64 / n,
        frac_direct_hit: pairs.iter().filter(|p| p.1 > HIT_IOU).count() as f64 / n,
        mean_revision_best_iou: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        mean_direct_best_iou: pairs.iter().map(|p| p.1).sum::<f64>() / n,
    }
}
