//! Recursive clip selection: preview with cheap features, pick clips, reveal
//! their expensive features, and repeat.

use ndarray::Array2;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::model::layers::{Ctx, Mlp};
use crate::model::{Localizer, ModelError, Parameters};
use crate::rng::Rng;
use crate::types::SelectionMask;

/// Selection probabilities are clamped to `[ε, 1 − ε]`.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SpotterError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid spotter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpotterConfig {
    pub steps: usize,
    /// Target fraction of clips selected overall.
    pub budget: f64,
    pub temperature: f64,
    pub inference_threshold: f64,
    /// Optional hard cap on clips picked per step (highest probability first).
    pub max_per_step: Option<usize>,
}

impl Default for SpotterConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            budget: 0.1,
            temperature: 1.0,
            inference_threshold: 0.5,
            max_per_step: None,
        }
    }
}

impl SpotterConfig {
    pub fn validate(&self) -> Result<(), SpotterError> {
        if self.steps == 0 {
            return Err(SpotterError::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.budget > 0.0 && self.budget <= 1.0) {
            return Err(SpotterError::InvalidConfig("budget must lie in (0, 1]".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(SpotterError::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

/// How binary decisions are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Gumbel-perturbed hard samples, straight-through gradients.
    Train,
    /// Same noise, but the relaxed value is used in the forward pass too.
    /// Makes the objective smooth for finite-difference checks.
    TrainRelaxed,
    /// Deterministic thresholding, no noise.
    Eval,
}

impl SampleMode {
    pub fn is_train(self) -> bool {
        !matches!(self, SampleMode::Eval)
    }
}

/// Two-class relaxed sample `y_0` for selection probability `pi` and noises `g0`, `g1`.
pub fn gumbel_relaxed(pi: f64, tau: f64, g0: f64, g1: f64) -> f64 {
    let pi = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let z0 = (pi.ln() + g0) / tau;
    let z1 = ((1.0 - pi).ln() + g1) / tau;
    sigmoid(z0 - z1)
}

/// One binary decision for a clip with selection probability `pi`.
///
/// Returns `(hard, relaxed)`. In eval mode no noise is drawn, `hard = pi ≥ threshold`
/// and `relaxed = pi`.
pub fn gumbel_binary_sample(
    pi: f64,
    tau: f64,
    mode: SampleMode,
    threshold: f64,
    rng: &mut Rng,
) -> Result<(bool, f64), SpotterError> {
    if !(tau > 0.0) {
        return Err(SpotterError::NonPositiveTemperature(tau));
    }
    let pi = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if mode == SampleMode::Eval {
        return Ok((pi >= threshold, pi));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let (g0, g1) = (gumbel.sample(rng), gumbel.sample(rng));
    let y0 = gumbel_relaxed(pi, tau, g0, g1);
    // argmax over (y0, y1) picks index 0 on ties
    Ok((y0 >= 1.0 - y0, y0))
}

/// Two-layer head producing per-clip select/skip logits.
#[derive(Clone, Debug)]
pub struct SelectionPolicy {
    pub mlp: Mlp,
}

impl SelectionPolicy {
    pub fn new(params: &mut Parameters, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(params, "policy", hidden, hidden, 2, rng),
        }
    }

    /// Logit of selecting versus skipping each clip (`L×1`), clamped to the ε range.
    pub fn select_logit(&self, tape: &mut Tape, params: &Parameters, features: Var) -> Var {
        let logits = self.mlp.forward(tape, params, features);
        // log π − log(1 − π) of the two-way softmax equals the logit difference
        let z0 = tape.slice_cols(logits, 0, 1);
        let z1 = tape.slice_cols(logits, 1, 2);
        let diff = tape.sub(z0, z1);
        let bound = ((1.0 - PROB_EPS) / PROB_EPS).ln();
        tape.clamp(diff, -bound, bound)
    }
}

/// Result of one selection round.
#[derive(Clone, Debug)]
pub struct StepSelection {
    pub mask: SelectionMask,
    /// `L×1` gate applied to revealed rows: hard values forward; in training the
    /// backward pass follows the relaxed sample.
    pub gate: Var,
    /// Mean relaxed (training) or hard (eval) selection over all clips, `1×1`.
    pub fraction: Var,
    pub probs: Vec<f64>,
}

/// Picks new clips from `features`, never re-selecting clips in `prev_joint`.
#[allow(clippy::too_many_arguments)]
pub fn select_step(
    tape: &mut Tape,
    params: &Parameters,
    policy: &SelectionPolicy,
    features: Var,
    prev_joint: &SelectionMask,
    config: &SpotterConfig,
    mode: SampleMode,
    rng: &mut Rng,
) -> StepSelection {
    let clips = prev_joint.len();
    let logit = policy.select_logit(tape, params, features);
    let available: Vec<bool> = prev_joint.bits().iter().map(|b| !b).collect();
    let avail_col = Array2::from_shape_fn((clips, 1), |(i, _)| if available[i] { 1.0 } else { 0.0 });
    let probs: Vec<f64> = tape
        .value(logit)
        .iter()
        .zip(&available)
        .map(|(&z, &a)| if a { sigmoid(z) } else { 0.0 })
        .collect();

    let (mut hard, relaxed_var, ranking): (Vec<bool>, Option<Var>, Vec<f64>) = match mode {
        SampleMode::Eval => {
            let hard = probs
                .iter()
                .zip(&available)
                .map(|(&p, &a)| a && p >= config.inference_threshold)
                .collect();
            (hard, None, probs.clone())
        }
        SampleMode::Train | SampleMode::TrainRelaxed => {
            let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
            let noise = Array2::from_shape_simple_fn((clips, 1), || gumbel.sample(rng) - gumbel.sample(rng));
            let z = tape.add_const(logit, noise);
            let z = tape.scale(z, 1.0 / config.temperature);
            let y0 = tape.sigmoid(z);
            let relaxed = tape.mul_const(y0, avail_col.clone());
            let values: Vec<f64> = tape.value(relaxed).iter().copied().collect();
            let hard = values
                .iter()
                .zip(&available)
                .map(|(&y, &a)| a && y >= 0.5)
                .collect();
            (hard, Some(relaxed), values)
        }
    };

    if let Some(cap) = config.max_per_step {
        let mut chosen: Vec<usize> = (0..clips).filter(|&i| hard[i]).collect();
        if chosen.len() > cap {
            chosen.sort_by(|&a, &b| ranking[b].total_cmp(&ranking[a]).then(a.cmp(&b)));
            for &i in &chosen[cap..] {
                hard[i] = false;
            }
        }
    }

    let hard_col = Array2::from_shape_fn((clips, 1), |(i, _)| if hard[i] { 1.0 } else { 0.0 });
    let (gate, fraction) = match (mode, relaxed_var) {
        (SampleMode::Train, Some(r)) => {
            let gate = tape.straight_through(hard_col, r);
            (gate, tape.mean(r))
        }
        (SampleMode::TrainRelaxed, Some(r)) => (r, tape.mean(r)),
        _ => {
            let gate = tape.constant(hard_col);
            (gate, tape.mean(gate))
        }
    };
    StepSelection {
        mask: SelectionMask::from_bits(hard),
        gate,
        fraction,
        probs,
    }
}

/// Per-step history of a recursive selection run.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTrace {
    pub per_step_masks: Vec<SelectionMask>,
    pub joint_mask: SelectionMask,
    pub per_step_probs: Vec<Vec<f64>>,
}

impl SelectionTrace {
    /// Per-step masks are pairwise disjoint and their union is the joint mask.
    pub fn is_consistent(&self) -> bool {
        let len = self.joint_mask.len();
        let mut union = SelectionMask::zeros(len);
        for m in &self.per_step_masks {
            if !m.is_disjoint(&union) {
                return false;
            }
            union = union.or(m);
        }
        union == self.joint_mask
    }
}

/// Everything the recursive loop produces on the tape.
pub struct RecursiveOutput {
    /// `L × D_v` revealed expensive features `v̄_{N+1}`.
    pub revealed: Var,
    pub trace: SelectionTrace,
    /// Per-step selected fraction (`1×1` each).
    pub step_fractions: Vec<Var>,
    /// Cross-modal features computed at each step.
    pub step_features: Vec<Var>,
}

/// Runs `config.steps` rounds of encode → select → reveal.
#[allow(clippy::too_many_arguments)]
pub fn run_recursive(
    tape: &mut Tape,
    params: &Parameters,
    localizer: &Localizer,
    policy: &SelectionPolicy,
    cheap: &Array2<f64>,
    expensive: &Array2<f64>,
    query: Var,
    config: &SpotterConfig,
    mode: SampleMode,
    rng: &mut Rng,
    ctx: &mut Ctx,
) -> Result<RecursiveOutput, SpotterError> {
    config.validate()?;
    let clips = cheap.nrows();
    let cheap_var = tape.constant(cheap.clone());
    let expensive_var = tape.constant(expensive.clone());
    let mut revealed = tape.constant(Array2::zeros(expensive.dim()));
    let mut joint = SelectionMask::zeros(clips);
    let mut per_step_masks = Vec::with_capacity(config.steps);
    let mut per_step_probs = Vec::with_capacity(config.steps);
    let mut step_fractions = Vec::with_capacity(config.steps);
    let mut step_features = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let visual = tape.concat_cols(&[cheap_var, revealed]);
        let features = localizer.cross_modal_encode(tape, params, visual, query, ctx)?;
        let step = select_step(tape, params, policy, features, &joint, config, mode, rng);
        let newly = tape.mul(expensive_var, step.gate);
        revealed = tape.add(revealed, newly);
        joint = joint.or(&step.mask);
        per_step_masks.push(step.mask);
        per_step_probs.push(step.probs);
        step_fractions.push(step.fraction);
        step_features.push(features);
    }
    Ok(RecursiveOutput {
        revealed,
        trace: SelectionTrace {
            per_step_masks,
            joint_mask: joint,
            per_step_probs,
        },
        step_fractions,
        step_features,
    })
}
