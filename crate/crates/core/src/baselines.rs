//! Comparator clip selectors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::model::layers::{Linear, Mlp};
use crate::model::spans::propose_spans;
use crate::model::Parameters;
use crate::rng::Rng;
use crate::spotter::SampleMode;
use crate::types::SelectionMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Zero,
    All,
    Random,
    Uniform,
    TopkOneshot,
    SequentialGate,
    DirectSupervision,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 7] = [
        Self::Zero,
        Self::All,
        Self::Random,
        Self::Uniform,
        Self::TopkOneshot,
        Self::SequentialGate,
        Self::DirectSupervision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::All => "all",
            Self::Random => "random",
            Self::Uniform => "uniform",
            Self::TopkOneshot => "topk_oneshot",
            Self::SequentialGate => "sequential_gate",
            Self::DirectSupervision => "direct_supervision",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| format!("unknown baseline {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Percentage of clips to select (non-learned and top-k methods).
    pub sample_fraction: f64,
    /// Spans proposed by the ZeroClips model for direct supervision.
    pub top_k_responses: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::Uniform,
            sample_fraction: 10.0,
            top_k_responses: 5,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=100.0).contains(&self.sample_fraction) {
            return Err(format!("sample_fraction {} outside [0, 100]", self.sample_fraction));
        }
        if self.method == BaselineMethod::DirectSupervision && self.top_k_responses == 0 {
            return Err("top_k_responses must be at least 1".into());
        }
        Ok(())
    }
}

/// `round(k% · L / 100)`, halves rounded up.
pub fn clip_count(clips: usize, percent: f64) -> usize {
    ((percent * clips as f64 / 100.0 + 0.5).floor() as usize).min(clips)
}

pub fn select_zero(clips: usize) -> SelectionMask {
    SelectionMask::zeros(clips)
}

pub fn select_all(clips: usize) -> SelectionMask {
    SelectionMask::ones(clips)
}

pub fn select_random(clips: usize, percent: f64, rng: &mut Rng) -> SelectionMask {
    let m = clip_count(clips, percent);
    SelectionMask::from_indices(clips, sample(rng, clips, m).into_iter())
}

pub fn select_uniform(clips: usize, percent: f64) -> SelectionMask {
    let m = clip_count(clips, percent);
    SelectionMask::from_indices(clips, (0..m).map(|i| ((i as f64 + 0.5) * clips as f64 / m as f64).floor() as usize))
}

/// Indices of the `m` largest scores; ties go to the lower index.
pub fn top_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Union of the clips covered by the top-`k` spans.
pub fn select_direct_supervision(start_logp: &[f64], end_logp: &[f64], top_k: usize, max_span_length: usize) -> SelectionMask {
    let clips = start_logp.len();
    let mut mask = SelectionMask::zeros(clips);
    for w in propose_spans(start_logp, end_logp, top_k, max_span_length) {
        for l in w.clips() {
            mask.set(l, true);
        }
    }
    mask
}

/// `[s ; mean(q)]` with the pooled query repeated on every row.
fn fuse_query(tape: &mut Tape, cheap: Var, query: Var) -> Var {
    let clips = tape.shape(cheap).0;
    let t = tape.shape(query).0;
    let pool = tape.constant(Array2::from_elem((1, t), 1.0 / t as f64));
    let pooled = tape.matmul(pool, query);
    let ones = tape.constant(Array2::ones((clips, 1)));
    let rows = tape.matmul(ones, pooled);
    tape.concat_cols(&[cheap, rows])
}

/// Selector output on the tape.
pub struct GateOutput {
    pub mask: SelectionMask,
    /// `L×1`: hard forward values, gradients through the soft score.
    pub gate: Var,
    /// Mean soft selection, `1×1`.
    pub fraction: Var,
}

/// One-shot scorer: picks the top-k clips by a per-clip score.
#[derive(Clone, Debug)]
pub struct TopkScorer {
    pub mlp: Mlp,
}

impl TopkScorer {
    pub fn new(params: &mut Parameters, d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(params, "topk", d_in, hidden, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Parameters, cheap: Var, query: Var, percent: f64) -> GateOutput {
        let x = fuse_query(tape, cheap, query);
        let scores = self.mlp.forward(tape, params, x);
        let soft = tape.sigmoid(scores);
        let clips = tape.shape(cheap).0;
        let values: Vec<f64> = tape.value(scores).iter().copied().collect();
        let mask = SelectionMask::from_indices(clips, top_indices(&values, clip_count(clips, percent)));
        let gate = tape.straight_through(mask.to_column(), soft);
        let fraction = tape.mean(soft);
        GateOutput { mask, gate, fraction }
    }
}

/// Left-to-right recurrent gate with a per-clip binary decision.
#[derive(Clone, Debug)]
pub struct SequentialGate {
    pub input: Linear,
    pub recurrent: Linear,
    pub head: Linear,
    pub hidden: usize,
}

impl SequentialGate {
    pub fn new(params: &mut Parameters, d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            input: Linear::new(params, "seqgate.input", d_in, hidden, rng),
            recurrent: Linear::new(params, "seqgate.recurrent", hidden, hidden, rng),
            head: Linear::new(params, "seqgate.head", hidden, 1, rng),
            hidden,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Parameters,
        cheap: Var,
        query: Var,
        temperature: f64,
        mode: SampleMode,
        rng: &mut Rng,
    ) -> GateOutput {
        let x = fuse_query(tape, cheap, query);
        let pre = self.input.forward(tape, params, x);
        let clips = tape.shape(cheap).0;
        let mut state = tape.constant(Array2::zeros((1, self.hidden)));
        let mut states = Vec::with_capacity(clips);
        for l in 0..clips {
            let row = tape.slice_rows(pre, l, l + 1);
            let rec = self.recurrent.forward(tape, params, state);
            let sum = tape.add(row, rec);
            state = tape.tanh(sum);
            states.push(state);
        }
        let h = tape.concat_rows(&states);
        let logit = self.head.forward(tape, params, h);
        match mode {
            SampleMode::Eval => {
                let soft = tape.sigmoid(logit);
                let bits = tape.value(soft).iter().map(|&p| p >= 0.5).collect();
                let mask = SelectionMask::from_bits(bits);
                let gate = tape.constant(mask.to_column());
                let fraction = tape.mean(gate);
                GateOutput { mask, gate, fraction }
            }
            SampleMode::Train | SampleMode::TrainRelaxed => {
                let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
                let noise = Array2::from_shape_simple_fn((clips, 1), || gumbel.sample(rng) - gumbel.sample(rng));
                let z = tape.add_const(logit, noise);
                let z = tape.scale(z, 1.0 / temperature);
                let soft = tape.sigmoid(z);
                let bits = tape.value(soft).iter().map(|&p| p >= 0.5).collect();
                let mask = SelectionMask::from_bits(bits);
                let gate = if mode == SampleMode::Train {
                    tape.straight_through(mask.to_column(), soft)
                } else {
                    soft
                };
                let fraction = tape.mean(soft);
                GateOutput { mask, gate, fraction }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::SeedableRng;

    #[test]
    fn fixed_masks() {
        assert_eq!(select_zero(5).to_bit_string(), "00000");
        assert_eq!(select_all(5).to_bit_string(), "11111");
        let eta = crate::metrics::efficiency_level(&[select_zero(5).count()], &[5]).unwrap();
        assert_eq!(eta, 100.0);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(clip_count(128, 10.0), 13);
        assert_eq!(clip_count(8, 25.0), 2);
        assert_eq!(clip_count(10, 25.0), 3);
        assert_eq!(clip_count(7, 0.0), 0);
        assert_eq!(clip_count(7, 100.0), 7);
    }

    #[test]
    fn random_examples() {
        let mut rng = Rng::seed_from_u64(5);
        assert_eq!(select_random(128, 10.0, &mut rng).count(), 13);
        assert_eq!(select_random(128, 0.0, &mut rng).count(), 0);
        let a = select_random(64, 30.0, &mut Rng::seed_from_u64(8));
        let b = select_random(64, 30.0, &mut Rng::seed_from_u64(8));
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_examples() {
        assert_eq!(select_uniform(8, 25.0).indices().collect::<Vec<_>>(), vec![2, 6]);
        assert_eq!(select_uniform(9, 100.0), select_all(9));
        assert_eq!(select_uniform(50, 33.0), select_uniform(50, 33.0));
    }

    #[test]
    fn topk_ordering() {
        let rising: Vec<f64> = (0..6).map(f64::from).collect();
        assert_eq!(top_indices(&rising, 2), vec![5, 4]);
        assert_eq!(top_indices(&[0.5; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn direct_supervision_examples() {
        let mut s = vec![f64::NEG_INFINITY; 8];
        let mut e = vec![f64::NEG_INFINITY; 8];
        s[3] = 0.0;
        e[5] = 0.0;
        assert_eq!(select_direct_supervision(&s, &e, 1, 8).indices().collect::<Vec<_>>(), vec![3, 4, 5]);

        let s = vec![-1.0, -0.5, -2.0, -3.0, -1.5, -0.7, -2.5, -4.0];
        let e = vec![-2.0, -1.0, -0.3, -0.9, -1.1, -2.0, -0.6, -1.4];
        let one = select_direct_supervision(&s, &e, 1, 8);
        let five = select_direct_supervision(&s, &e, 5, 8);
        assert!(five.count() >= one.count());
        assert!(one.indices().all(|i| five.get(i)));
        let spans = propose_spans(&s, &e, 5, 8);
        let covered: std::collections::BTreeSet<usize> = spans.iter().flat_map(|w| w.clips()).collect();
        assert_eq!(five.count(), covered.len());
    }

    fn gate_setup() -> (Parameters, TopkScorer, SequentialGate) {
        let mut params = Parameters::new();
        let mut rng = Rng::seed_from_u64(3);
        let topk = TopkScorer::new(&mut params, 5, 6, &mut rng);
        let seq = SequentialGate::new(&mut params, 5, 6, &mut rng);
        (params, topk, seq)
    }

    #[test]
    fn learned_selectors_produce_valid_masks() {
        let (params, topk, seq) = gate_setup();
        let cheap = Array2::from_shape_fn((10, 3), |(i, j)| ((i + 2 * j) as f64).cos());
        let q = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut tape = Tape::new();
        let c = tape.constant(cheap);
        let qv = tape.constant(q);
        let out = topk.forward(&mut tape, &params, c, qv, 30.0);
        assert_eq!(out.mask.count(), 3);
        assert_eq!(tape.value(out.gate), &out.mask.to_column());

        let eval = |tape: &mut Tape| {
            let mut rng = Rng::seed_from_u64(0);
            seq.forward(tape, &params, c, qv, 1.0, SampleMode::Eval, &mut rng).mask
        };
        assert_eq!(eval(&mut tape), eval(&mut tape));
        let mut rng = Rng::seed_from_u64(1);
        let tr = seq.forward(&mut tape, &params, c, qv, 1.0, SampleMode::Train, &mut rng);
        assert_eq!(tape.value(tr.gate), &tr.mask.to_column());
    }

    #[test]
    fn method_names_round_trip() {
        for m in BaselineMethod::ALL {
            assert_eq!(m.name().parse::<BaselineMethod>().unwrap(), m);
        }
        assert_eq!("topk-oneshot".parse::<BaselineMethod>().unwrap(), BaselineMethod::TopkOneshot);
        assert!("ocsampler".parse::<BaselineMethod>().is_err());
    }

    proptest! {
        #[test]
        fn counts_match_rounding(l in 1usize..300, pct in 0.0f64..=100.0, seed in any::<u64>()) {
            let m = clip_count(l, pct);
            prop_assert_eq!(select_uniform(l, pct).count(), m);
            prop_assert_eq!(select_random(l, pct, &mut Rng::seed_from_u64(seed)).count(), m);
        }
    }
}
