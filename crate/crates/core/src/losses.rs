//! Training objectives.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::model::{LocalizerOutputs, LocalizerValues};
use crate::types::TimeWindow;

/// Probabilities fed to cross-entropies are clamped to `[CLAMP, 1 − CLAMP]`.
const CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: expert {expert:?} vs student {student:?}")]
    ShapeMismatch {
        expert: (usize, usize),
        student: (usize, usize),
    },
    #[error("non-finite {term} loss: {value}")]
    NonFinite { term: &'static str, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sel: f64,
    pub fd: f64,
    pub pd: f64,
    pub pd_low: f64,
    pub pd_high: f64,
    /// Multiplier on the per-step part of the selection loss.
    pub step: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sel: 300.0,
            fd: 1.0,
            pd: 1.0,
            pd_low: 1.0,
            pd_high: 10.0,
            step: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.sel, self.fd, self.pd, self.pd_low, self.pd_high, self.step];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err("loss weights must be finite and nonnegative".into())
        }
    }

    pub fn without_distillation(&self) -> Self {
        Self {
            fd: 0.0,
            pd: 0.0,
            ..self.clone()
        }
    }
}

/// One-hot span labels plus the extended highlight window.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthTargets {
    pub start: usize,
    pub end: usize,
    pub highlight: Vec<bool>,
}

impl GroundTruthTargets {
    /// Highlight covers the window widened by `round(extend_ratio · len)` clips per side.
    pub fn new(window: TimeWindow, clips: usize, extend_ratio: f64) -> Self {
        let pad = (extend_ratio * window.len() as f64 + 0.5).floor() as usize;
        let lo = window.start.saturating_sub(pad);
        let hi = (window.end + pad).min(clips - 1);
        Self {
            start: window.start,
            end: window.end,
            highlight: (0..clips).map(|l| (lo..=hi).contains(&l)).collect(),
        }
    }

    pub fn highlight_column(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.highlight.len(), 1), |(l, _)| f64::from(u8::from(self.highlight[l])))
    }
}

/// `½ [CE(start) + CE(end)]` on `1×L` log-probability rows.
pub fn span_loss(tape: &mut Tape, start_logp: Var, end_logp: Var, targets: &GroundTruthTargets) -> Var {
    let s = tape.pick(start_logp, 0, targets.start);
    let e = tape.pick(end_logp, 0, targets.end);
    let sum = tape.add(s, e);
    tape.scale(sum, -0.5)
}

/// Mean binary cross-entropy of the `L×1` highlight scores.
pub fn qgh_loss(tape: &mut Tape, highlight: Var, targets: &GroundTruthTargets) -> Var {
    let y = targets.highlight_column();
    let h = tape.clamp(highlight, CLAMP, 1.0 - CLAMP);
    let log_h = tape.log(h);
    let neg = tape.scale(h, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_1mh = tape.log(one_minus);
    let pos_term = tape.mul_const(log_h, y.clone());
    let neg_term = tape.mul_const(log_1mh, y.mapv(|v| 1.0 - v));
    let ll = tape.add(pos_term, neg_term);
    let m = tape.mean(ll);
    tape.scale(m, -1.0)
}

/// `span_loss + qgh_loss`.
pub fn em_loss(tape: &mut Tape, out: &LocalizerOutputs, targets: &GroundTruthTargets) -> Var {
    let span = span_loss(tape, out.start_logp, out.end_logp, targets);
    let qgh = qgh_loss(tape, out.highlight, targets);
    tape.add(span, qgh)
}

/// Budget loss value and its gradients with respect to each input fraction.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLoss {
    pub joint_term: f64,
    pub step_term: f64,
    pub value: f64,
    pub d_joint: Vec<f64>,
    /// `d_steps[b][n]`.
    pub d_steps: Vec<Vec<f64>>,
}

/// `(mean joint − γ)² + w · (1/N) Σ_n (mean step_n − γ/N)²` over a batch.
///
/// `joint[b]` is instance `b`'s selected fraction, `steps[b][n]` its fraction at step `n`.
pub fn selection_loss(joint: &[f64], steps: &[Vec<f64>], budget: f64, step_weight: f64) -> SelectionLoss {
    let batch = joint.len();
    assert!(batch > 0, "selection loss over empty batch");
    assert_eq!(steps.len(), batch);
    let n_steps = steps[0].len();
    let b = batch as f64;
    let mean_joint = joint.iter().sum::<f64>() / b;
    let joint_term = (mean_joint - budget).powi(2);
    let d_joint = vec![2.0 * (mean_joint - budget) / b; batch];

    let mut step_term = 0.0;
    let mut d_step_n = vec![0.0; n_steps];
    if n_steps > 0 {
        let target = budget / n_steps as f64;
        for (n, d) in d_step_n.iter_mut().enumerate() {
            let mean = steps.iter().map(|s| s[n]).sum::<f64>() / b;
            step_term += (mean - target).powi(2) / n_steps as f64;
            *d = step_weight * 2.0 * (mean - target) / (n_steps as f64 * b);
        }
    }
    SelectionLoss {
        joint_term,
        step_term,
        value: joint_term + step_weight * step_term,
        d_joint,
        d_steps: vec![d_step_n; batch],
    }
}

/// Mean absolute difference; no gradient reaches `expert`.
pub fn feature_distill_loss(tape: &mut Tape, expert: Var, student: Var) -> Result<Var, LossError> {
    let (e, s) = (tape.shape(expert), tape.shape(student));
    if e != s {
        return Err(LossError::ShapeMismatch { expert: e, student: s });
    }
    let frozen = tape.stop_grad(expert);
    let diff = tape.sub(student, frozen);
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// `high · mean_l KL(Bern(s_l) ‖ Bern(e_l)) + low · [KL(start) + KL(end)]`, student first.
pub fn prediction_distill_loss(
    tape: &mut Tape,
    expert: &LocalizerValues,
    student: &LocalizerOutputs,
    high: f64,
    low: f64,
) -> Var {
    let e = expert.highlight_column().mapv(|v| v.clamp(CLAMP, 1.0 - CLAMP));
    let s = tape.clamp(student.highlight, CLAMP, 1.0 - CLAMP);
    let log_s = tape.log(s);
    let neg = tape.scale(s, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_1ms = tape.log(one_minus);
    let pos_ratio = tape.add_const(log_s, e.mapv(|v| -v.ln()));
    let neg_ratio = tape.add_const(log_1ms, e.mapv(|v| -(1.0 - v).ln()));
    let pos = tape.mul(s, pos_ratio);
    let negt = tape.mul(one_minus, neg_ratio);
    let per_pos = tape.add(pos, negt);
    let highlight_kl = tape.mean(per_pos);

    let start_kl = tape.kl_log_prob(student.start_logp, expert.start_row());
    let end_kl = tape.kl_log_prob(student.end_logp, expert.end_row());
    let span_kl = tape.add(start_kl, end_kl);
    let h = tape.scale(highlight_kl, high);
    let l = tape.scale(span_kl, low);
    tape.add(h, l)
}

/// Unweighted loss components of one step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "L_EM")]
    pub em: f64,
    #[serde(rename = "L_SEL")]
    pub sel: f64,
    #[serde(rename = "L_FD")]
    pub fd: f64,
    #[serde(rename = "L_PD")]
    pub pd: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, k: f64) {
        self.em += k * other.em;
        self.sel += k * other.sel;
        self.fd += k * other.fd;
        self.pd += k * other.pd;
    }
}

/// `L_EM + λ_SEL·L_SEL + λ_FD·L_FD + λ_PD·L_PD`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64, LossError> {
    for (term, value) in [("L_EM", parts.em), ("L_SEL", parts.sel), ("L_FD", parts.fd), ("L_PD", parts.pd)] {
        if !value.is_finite() {
            return Err(LossError::NonFinite { term, value });
        }
    }
    Ok(parts.em + weights.sel * parts.sel + weights.fd * parts.fd + weights.pd * parts.pd)
}
