use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::types::TimeWindow;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    score: f64,
    start: usize,
    end: usize,
}

impl Candidate {
    /// Ranking order: higher score first, then smaller start, then smaller end.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.start.cmp(&other.start))
            .then(self.end.cmp(&other.end))
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // max-heap keeps the worst-ranked candidate on top
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank_cmp(other)
    }
}

/// Top-`k` windows `[i, j]` with `i ≤ j < i + max_span_length`, ranked by
/// `start_logp[i] + end_logp[j]` (ties: smaller `i`, then smaller `j`).
/// Returns every feasible span when fewer than `k` exist.
pub fn propose_spans(start_logp: &[f64], end_logp: &[f64], k: usize, max_span_length: usize) -> Vec<TimeWindow> {
    assert_eq!(start_logp.len(), end_logp.len(), "start/end lengths differ");
    let clips = start_logp.len();
    if k == 0 || clips == 0 || max_span_length == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for (i, &ps) in start_logp.iter().enumerate() {
        let last = (i + max_span_length).min(clips);
        for (j, &pe) in end_logp.iter().enumerate().take(last).skip(i) {
            let cand = Candidate {
                score: ps + pe,
                start: i,
                end: j,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand.rank_cmp(worst) == Ordering::Less {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|c| TimeWindow { start: c.start, end: c.end })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive O(L²) enumeration with a full sort.
    fn brute_force(ps: &[f64], pe: &[f64], k: usize, max_len: usize) -> Vec<TimeWindow> {
        let n = ps.len();
        let mut all = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i <= j && j - i < max_len {
                    all.push((ps[i] + pe[j], i, j));
                }
            }
        }
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        all.into_iter()
            .take(k)
            .map(|(_, i, j)| TimeWindow { start: i, end: j })
            .collect()
    }

    fn log_onehot(n: usize, at: usize) -> Vec<f64> {
        (0..n).map(|i| if i == at { 0.0 } else { f64::NEG_INFINITY }).collect()
    }

    #[test]
    fn onehot_start_and_end() {
        let top = propose_spans(&log_onehot(8, 2), &log_onehot(8, 5), 1, 8);
        assert_eq!(top, vec![TimeWindow { start: 2, end: 5 }]);
    }

    #[test]
    fn uniform_ties_break_to_origin() {
        let u = vec![-(8f64.ln()); 8];
        let top = propose_spans(&u, &u, 3, 4);
        assert_eq!(
            top,
            vec![
                TimeWindow { start: 0, end: 0 },
                TimeWindow { start: 0, end: 1 },
                TimeWindow { start: 0, end: 2 }
            ]
        );
    }

    #[test]
    fn single_clip() {
        assert_eq!(propose_spans(&[0.0], &[0.0], 5, 1), vec![TimeWindow { start: 0, end: 0 }]);
    }

    #[test]
    fn k_beyond_feasible_returns_all() {
        let v = vec![0.1, 0.2, 0.3];
        assert_eq!(propose_spans(&v, &v, 100, 2).len(), 5);
    }

    proptest! {
        #[test]
        fn matches_brute_force(l in 1usize..=32, k in 1usize..8, max_len in 1usize..40,
                               seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // coarse grid so ties actually occur
            let ps: Vec<f64> = (0..l).map(|_| f64::from(rng.gen_range(-4i32..4)) * 0.5).collect();
            let pe: Vec<f64> = (0..l).map(|_| f64::from(rng.gen_range(-4i32..4)) * 0.5).collect();
            prop_assert_eq!(propose_spans(&ps, &pe, k, max_len), brute_force(&ps, &pe, k, max_len));
        }
    }
}
