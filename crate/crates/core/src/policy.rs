//! Categorical grounding policy with closed-form probabilities.
//!
//! A response is produced slot by slot. At every slot the policy scores the
//! `K` anchors plus a STOP action with a linear map `thetaᵀ f` of the feature
//! vector
//!
//! ```text
//! f = [ descriptor (K+1) | slot one-hot (M_max+1) | revision flag (1) | initial summary (K+1) ]
//! ```
//!
//! and samples from the softmax over the actions still available: anchors
//! already chosen in the same response are masked out, and at slot `M_max`
//! only STOP remains. Every trace therefore ends with STOP and holds at most
//! `M_max` distinct anchors.
//!
//! Because only the slot block changes between slots, the logits of a whole
//! response share one "context" product and differ by a single theta row.
//! Gradients exploit the same structure (see [`ContextGrad`]).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BoxN, PointN};
use crate::response::Response;
use crate::scenes::{AnchorGrid, SceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("inconsistent action trace: {0}")]
    Trace(String),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is malformed: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// Sizes that fix the parameter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    /// Number of anchors `K`.
    pub num_anchors: usize,
    /// Maximum number of predicted objects `M_max`.
    pub max_slots: usize,
}

impl PolicyShape {
    pub fn new(num_anchors: usize, max_slots: usize) -> Self {
        Self {
            num_anchors,
            max_slots,
        }
    }

    /// `K + 1` actions; the last one is STOP.
    pub fn num_actions(&self) -> usize {
        self.num_anchors + 1
    }

    pub fn stop(&self) -> usize {
        self.num_anchors
    }

    pub fn feature_dim(&self) -> usize {
        2 * (self.num_anchors + 1) + self.max_slots + 2
    }

    pub fn slot_offset(&self) -> usize {
        self.num_anchors + 1
    }

    pub fn flag_offset(&self) -> usize {
        self.slot_offset() + self.max_slots + 1
    }

    pub fn summary_offset(&self) -> usize {
        self.flag_offset() + 1
    }
}

/// Hand-set starting point standing in for a pretrained model: logits follow
/// the descriptor evidence, and STOP becomes likelier slot by slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyInit {
    /// Weight from each anchor's evidence to its own logit.
    pub descriptor_gain: f64,
    /// Logit offset shared by every anchor action.
    pub anchor_bias: f64,
    /// STOP logit at slot 0.
    pub stop_bias: f64,
    /// Increase of the STOP logit per slot.
    pub stop_slope: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            descriptor_gain: 8.0,
            anchor_bias: -5.0,
            stop_bias: -1.0,
            stop_slope: 1.5,
        }
    }
}

impl PolicyInit {
    /// Saturated preset that reproduces sharp descriptor evidence exactly:
    /// every anchor with evidence near 1 is chosen, then STOP.
    pub fn oracle() -> Self {
        Self {
            descriptor_gain: 200.0,
            anchor_bias: -100.0,
            stop_bias: 0.0,
            stop_slope: 0.0,
        }
    }
}

/// Row-major `F x (K+1)` parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            theta: vec![0.0; shape.feature_dim() * shape.num_actions()],
        }
    }

    pub fn init(shape: PolicyShape, init: &PolicyInit) -> Self {
        let mut p = Self::zeros(shape);
        for a in 0..shape.num_anchors {
            p.set(a, a, init.descriptor_gain);
            p.set(shape.num_anchors, a, init.anchor_bias);
        }
        for s in 0..=shape.max_slots {
            p.set(
                shape.slot_offset() + s,
                shape.stop(),
                init.stop_bias + init.stop_slope * s as f64,
            );
        }
        p
    }

    pub fn from_theta(shape: PolicyShape, theta: Vec<f64>) -> Result<Self, PolicyError> {
        let want = shape.feature_dim() * shape.num_actions();
        if theta.len() != want {
            return Err(PolicyError::Shape(format!(
                "theta has {} entries, expected {want}",
                theta.len()
            )));
        }
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(Self { shape, theta })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.theta[row * self.shape.num_actions() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape.num_actions();
        self.theta[row * cols + col] = value;
    }

    fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape.num_actions();
        &self.theta[row * cols..(row + 1) * cols]
    }

    pub fn check_compatible(&self, other: &PolicyParams) -> Result<(), PolicyError> {
        if self.shape != other.shape {
            return Err(PolicyError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Which round a response belongs to, plus the initial-response summary the
/// revision round conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundContext {
    pub revision: bool,
    /// Length `K + 1`: histogram of the initial anchors normalized by their
    /// count, then the initial count divided by `M_max`. All zero in round 1.
    pub summary: Vec<f64>,
}

impl RoundContext {
    pub fn initial(shape: PolicyShape) -> Self {
        Self {
            revision: false,
            summary: vec![0.0; shape.num_actions()],
        }
    }

    pub fn revision(shape: PolicyShape, initial: &ActionTrace) -> Self {
        let anchors = initial.anchors();
        let mut summary = vec![0.0; shape.num_actions()];
        if !anchors.is_empty() {
            let w = 1.0 / anchors.len() as f64;
            for a in &anchors {
                summary[*a] += w;
            }
        }
        summary[shape.stop()] = anchors.len() as f64 / shape.max_slots as f64;
        Self {
            revision: true,
            summary,
        }
    }
}

/// Features of one slot: `[descriptor | slot one-hot | round flag | summary]`.
pub fn features(
    scene: &SceneSpec,
    slot: usize,
    ctx: &RoundContext,
    shape: PolicyShape,
) -> Vec<f64> {
    let mut f = Vec::with_capacity(shape.feature_dim());
    f.extend_from_slice(&scene.descriptor);
    let mut slots = vec![0.0; shape.max_slots + 1];
    slots[slot] = 1.0;
    f.extend(slots);
    f.push(if ctx.revision { 1.0 } else { 0.0 });
    f.extend_from_slice(&ctx.summary);
    debug_assert_eq!(f.len(), shape.feature_dim());
    f
}

fn logits(params: &PolicyParams, f: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; params.shape.num_actions()];
    for (j, &fj) in f.iter().enumerate() {
        if fj != 0.0 {
            for (zk, w) in z.iter_mut().zip(params.row(j)) {
                *zk += fj * w;
            }
        }
    }
    z
}

/// Log-softmax over the unmasked entries; masked entries get `-inf`.
fn masked_log_softmax(z: &[f64], masked: &[bool]) -> Vec<f64> {
    let max = z
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z
        .iter()
        .zip(masked)
        .filter(|(_, m)| !**m)
        .map(|(v, _)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    z.iter()
        .zip(masked)
        .map(|(v, m)| if *m { f64::NEG_INFINITY } else { v - lse })
        .collect()
}

/// Unmasked action distribution `softmax(thetaᵀ f)`.
pub fn action_probs(params: &PolicyParams, f: &[f64]) -> Vec<f64> {
    let z = logits(params, f);
    let none = vec![false; z.len()];
    masked_log_softmax(&z, &none)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Exact `KL(pi_params(.|f) || pi_ref(.|f))` over the unmasked distribution.
pub fn kl_to_ref(params: &PolicyParams, ref_params: &PolicyParams, f: &[f64]) -> f64 {
    let none = vec![false; params.shape.num_actions()];
    let lp = masked_log_softmax(&logits(params, f), &none);
    let lq = masked_log_softmax(&logits(ref_params, f), &none);
    categorical_kl(&lp, &lq)
}

fn categorical_kl(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .filter(|(p, _)| p.is_finite())
        .map(|(p, q)| p.exp() * (p - q))
        .sum::<f64>()
        .max(0.0)
}

/// One slot decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Anchor(usize),
    Stop,
}

/// Sampled choices with their log-probabilities under the sampling policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrace {
    pub choices: Vec<Action>,
    pub per_slot_logprobs: Vec<f64>,
}

impl ActionTrace {
    pub fn anchors(&self) -> Vec<usize> {
        self.choices
            .iter()
            .filter_map(|c| match c {
                Action::Anchor(a) => Some(*a),
                Action::Stop => None,
            })
            .collect()
    }

    pub fn total_logprob(&self) -> f64 {
        self.per_slot_logprobs.iter().sum()
    }

    /// Checks the structural invariants against a policy shape.
    pub fn validate(&self, shape: PolicyShape) -> Result<(), PolicyError> {
        let n = self.choices.len();
        if n == 0 || n > shape.max_slots + 1 {
            return Err(PolicyError::Trace(format!(
                "length {n} outside 1..={}",
                shape.max_slots + 1
            )));
        }
        if self.choices[n - 1] != Action::Stop {
            return Err(PolicyError::Trace("trace does not end with STOP".into()));
        }
        let mut seen = vec![false; shape.num_anchors];
        for c in &self.choices[..n - 1] {
            match *c {
                Action::Stop => {
                    return Err(PolicyError::Trace("STOP before the final slot".into()))
                }
                Action::Anchor(a) if a >= shape.num_anchors => {
                    return Err(PolicyError::Trace(format!("anchor {a} out of range")))
                }
                Action::Anchor(a) if seen[a] => {
                    return Err(PolicyError::Trace(format!("anchor {a} repeated")))
                }
                Action::Anchor(a) => seen[a] = true,
            }
        }
        Ok(())
    }
}

/// Logits shared by every slot of one response: `thetaᵀ f` with the slot
/// block left out.
#[derive(Debug, Clone)]
pub struct ContextLogits {
    base: Vec<f64>,
}

impl ContextLogits {
    pub fn new(params: &PolicyParams, scene: &SceneSpec, ctx: &RoundContext) -> Self {
        let shape = params.shape;
        let mut f = vec![0.0; shape.feature_dim()];
        f[..shape.num_actions()].copy_from_slice(&scene.descriptor);
        f[shape.flag_offset()] = if ctx.revision { 1.0 } else { 0.0 };
        f[shape.summary_offset()..].copy_from_slice(&ctx.summary);
        Self {
            base: logits(params, &f),
        }
    }

    /// Log-probabilities at `slot` with the given anchors masked.
    fn slot_log_probs(&self, params: &PolicyParams, slot: usize, masked: &[bool]) -> Vec<f64> {
        let row = params.row(params.shape.slot_offset() + slot);
        let z: Vec<f64> = self.base.iter().zip(row).map(|(b, w)| b + w).collect();
        masked_log_softmax(&z, masked)
    }
}

/// Walks a trace slot by slot, yielding `(slot, mask, action index)`.
fn trace_slots(
    shape: PolicyShape,
    trace: &ActionTrace,
) -> impl Iterator<Item = (usize, Vec<bool>, usize)> + '_ {
    let mut masked = vec![false; shape.num_actions()];
    trace.choices.iter().enumerate().map(move |(slot, c)| {
        if slot == shape.max_slots {
            masked[..shape.num_anchors]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        let current = masked.clone();
        let idx = match *c {
            Action::Anchor(a) => {
                masked[a] = true;
                a
            }
            Action::Stop => shape.stop(),
        };
        (slot, current, idx)
    })
}

/// Samples one response slot by slot until STOP.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    scene: &SceneSpec,
    grid: &AnchorGrid,
    ctx: &RoundContext,
    rng: &mut R,
) -> (Response, ActionTrace) {
    let shape = params.shape;
    let cl = ContextLogits::new(params, scene, ctx);
    let mut masked = vec![false; shape.num_actions()];
    let mut choices = Vec::new();
    let mut lps = Vec::new();
    for slot in 0..=shape.max_slots {
        if slot == shape.max_slots {
            masked[..shape.num_anchors]
                .iter_mut()
                .for_each(|m| *m = true);
        }
        let lp = cl.slot_log_probs(params, slot, &masked);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (k, l) in lp.iter().enumerate() {
            if l.is_finite() {
                acc += l.exp();
                pick = Some(k);
                if u < acc {
                    break;
                }
            }
        }
        let pick = pick.expect("STOP is never masked");
        lps.push(lp[pick]);
        if pick == shape.stop() {
            choices.push(Action::Stop);
            break;
        }
        choices.push(Action::Anchor(pick));
        masked[pick] = true;
    }
    let trace = ActionTrace {
        choices,
        per_slot_logprobs: lps,
    };
    (response_from_trace(grid, &trace), trace)
}

/// Maps chosen anchors to boxes and centre points with a templated rationale.
pub fn response_from_trace(grid: &AnchorGrid, trace: &ActionTrace) -> Response {
    let anchors = trace.anchors();
    let reasoning = if anchors.is_empty() {
        "Evidence review found no referenced object.".to_string()
    } else {
        let ids: Vec<String> = anchors.iter().map(|a| a.to_string()).collect();
        format!(
            "Evidence review selected anchors [{}]; reporting {} object(s).",
            ids.join(", "),
            anchors.len()
        )
    };
    let (boxes, points): (Vec<BoxN>, Vec<PointN>) = anchors.iter().map(|&a| grid.anchor(a)).unzip();
    Response::new(reasoning, boxes, points).expect("equal lengths")
}

/// Sum of per-slot log-probabilities of the recorded choices.
pub fn log_prob(
    params: &PolicyParams,
    scene: &SceneSpec,
    ctx: &RoundContext,
    trace: &ActionTrace,
) -> Result<f64, PolicyError> {
    trace.validate(params.shape)?;
    let cl = ContextLogits::new(params, scene, ctx);
    Ok(trace_log_prob(params, &cl, trace))
}

pub fn trace_log_prob(params: &PolicyParams, cl: &ContextLogits, trace: &ActionTrace) -> f64 {
    trace_slots(params.shape, trace)
        .map(|(slot, masked, idx)| cl.slot_log_probs(params, slot, &masked)[idx])
        .sum()
}

/// Sum over the trace's slots of the exact KL between the masked slot
/// distributions of `params` and `ref_params`.
pub fn trace_kl(
    params: &PolicyParams,
    cl: &ContextLogits,
    ref_params: &PolicyParams,
    ref_cl: &ContextLogits,
    trace: &ActionTrace,
) -> f64 {
    trace_slots(params.shape, trace)
        .map(|(slot, masked, _)| {
            let lp = cl.slot_log_probs(params, slot, &masked);
            let lq = ref_cl.slot_log_probs(ref_params, slot, &masked);
            categorical_kl(&lp, &lq)
        })
        .sum()
}

/// Per-slot logit coefficients for responses that share one context.
///
/// The gradient of any objective that depends on theta only through the slot
/// logits of a context is `base_f ⊗ Σ_s coef[s] + Σ_s e_slot(s) ⊗ coef[s]`,
/// with `coef[s]` the objective's derivative with respect to slot `s` logits.
#[derive(Debug, Clone)]
pub struct ContextGrad {
    coef: Vec<Vec<f64>>,
}

impl ContextGrad {
    pub fn new(shape: PolicyShape) -> Self {
        Self {
            coef: vec![vec![0.0; shape.num_actions()]; shape.max_slots + 1],
        }
    }

    /// Adds `weight * d log pi(trace) / d logits`.
    pub fn add_log_prob(
        &mut self,
        params: &PolicyParams,
        cl: &ContextLogits,
        trace: &ActionTrace,
        weight: f64,
    ) {
        if weight == 0.0 {
            return;
        }
        for (slot, masked, idx) in trace_slots(params.shape, trace) {
            let lp = cl.slot_log_probs(params, slot, &masked);
            let row = &mut self.coef[slot];
            for (k, l) in lp.iter().enumerate() {
                if l.is_finite() {
                    row[k] -= weight * l.exp();
                }
            }
            row[idx] += weight;
        }
    }

    /// Adds `weight * d KL_trace / d logits` (reference held fixed).
    pub fn add_kl(
        &mut self,
        params: &PolicyParams,
        cl: &ContextLogits,
        ref_params: &PolicyParams,
        ref_cl: &ContextLogits,
        trace: &ActionTrace,
        weight: f64,
    ) {
        if weight == 0.0 {
            return;
        }
        for (slot, masked, _) in trace_slots(params.shape, trace) {
            let lp = cl.slot_log_probs(params, slot, &masked);
            let lq = ref_cl.slot_log_probs(ref_params, slot, &masked);
            let kl = categorical_kl(&lp, &lq);
            let row = &mut self.coef[slot];
            for k in 0..lp.len() {
                if lp[k].is_finite() {
                    row[k] += weight * lp[k].exp() * (lp[k] - lq[k] - kl);
                }
            }
        }
    }

    /// Accumulates `scale * gradient` into a theta-shaped buffer.
    pub fn accumulate(
        &self,
        shape: PolicyShape,
        scene: &SceneSpec,
        ctx: &RoundContext,
        scale: f64,
        out: &mut [f64],
    ) {
        let cols = shape.num_actions();
        let mut total = vec![0.0; cols];
        for (s, row) in self.coef.iter().enumerate() {
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let dst =
                &mut out[(shape.slot_offset() + s) * cols..(shape.slot_offset() + s + 1) * cols];
            for k in 0..cols {
                dst[k] += scale * row[k];
                total[k] += row[k];
            }
        }
        let mut axpy = |feature: usize, value: f64| {
            if value != 0.0 {
                let dst = &mut out[feature * cols..(feature + 1) * cols];
                for k in 0..cols {
                    dst[k] += scale * value * total[k];
                }
            }
        };
        for (j, &v) in scene.descriptor.iter().enumerate() {
            axpy(j, v);
        }
        axpy(shape.flag_offset(), if ctx.revision { 1.0 } else { 0.0 });
        for (j, &v) in ctx.summary.iter().enumerate() {
            axpy(shape.summary_offset() + j, v);
        }
    }
}

/// `log pi(trace)` and its gradient with respect to theta.
pub fn log_prob_grad(
    params: &PolicyParams,
    scene: &SceneSpec,
    ctx: &RoundContext,
    trace: &ActionTrace,
) -> Result<(f64, Vec<f64>), PolicyError> {
    trace.validate(params.shape)?;
    let cl = ContextLogits::new(params, scene, ctx);
    let mut g = ContextGrad::new(params.shape);
    g.add_log_prob(params, &cl, trace, 1.0);
    let mut out = vec![0.0; params.theta.len()];
    g.accumulate(params.shape, scene, ctx, 1.0, &mut out);
    Ok((trace_log_prob(params, &cl, trace), out))
}

pub const CHECKPOINT_FORMAT: &str = "revgrpo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized policy state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Fingerprint of the environment config the parameters were shaped for.
    pub config_hash: String,
    pub step: u64,
    /// Master seed of the derived random streams; together with `step` it
    /// determines every subsequent draw.
    pub rng_state: u64,
    pub shape: PolicyShape,
    /// Row-major `F x (K+1)` parameters.
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        params: &PolicyParams,
        config_hash: impl Into<String>,
        step: u64,
        rng_state: u64,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            step,
            rng_state,
            shape: params.shape,
            theta: params.theta.clone(),
        }
    }

    pub fn params(&self) -> Result<PolicyParams, PolicyError> {
        PolicyParams::from_theta(self.shape, self.theta.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |msg: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format {}/{}",
                c.format, c.version
            )));
        }
        c.params().map_err(|e| bad(e.to_string()))?;
        Ok(c)
    }
}
