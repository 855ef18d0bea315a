//! Localization and efficiency metrics.

use crate::types::{BehaviorStats, SelectionMask, TimeWindow};

/// IoU thresholds averaged by the mean-recall metric.
pub const MR_IOU_THRESHOLDS: [f64; 2] = [0.3, 0.5];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    EmptyEvaluationSet,
    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("empty video")]
    EmptyVideo,
    #[error("selected {selected} clips out of {total}")]
    OverSelected { selected: usize, total: usize },
}

/// Inclusive-endpoint temporal IoU measured in clips.
pub fn temporal_iou(a: TimeWindow, b: TimeWindow) -> f64 {
    let inter_start = a.start.max(b.start);
    let inter_end = a.end.min(b.end);
    let inter = if inter_start <= inter_end {
        inter_end - inter_start + 1
    } else {
        0
    };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// 1 if any of the top-`k` predictions reaches `iou_threshold` against `gt`.
pub fn recall_at_k(predictions: &[TimeWindow], gt: TimeWindow, k: usize, iou_threshold: f64) -> u8 {
    let hit = predictions
        .iter()
        .take(k)
        .any(|&p| temporal_iou(p, gt) >= iou_threshold);
    u8::from(hit)
}

/// Per-query recall@k averaged over [`MR_IOU_THRESHOLDS`].
pub fn query_mean_recall(predictions: &[TimeWindow], gt: TimeWindow, k: usize) -> f64 {
    let hits: u32 = MR_IOU_THRESHOLDS
        .iter()
        .map(|&t| u32::from(recall_at_k(predictions, gt, k, t)))
        .sum();
    f64::from(hits) / MR_IOU_THRESHOLDS.len() as f64
}

/// MR@k over a query set.
pub fn mean_recall(
    predictions_per_query: &[Vec<TimeWindow>],
    gts: &[TimeWindow],
    k: usize,
) -> Result<f64, MetricsError> {
    if predictions_per_query.len() != gts.len() {
        return Err(MetricsError::LengthMismatch(predictions_per_query.len(), gts.len()));
    }
    if gts.is_empty() {
        return Err(MetricsError::EmptyEvaluationSet);
    }
    let total: f64 = predictions_per_query
        .iter()
        .zip(gts)
        .map(|(p, &g)| query_mean_recall(p, g, k))
        .sum();
    Ok(total / gts.len() as f64)
}

/// Mean over queries of `100 − 100·selected/total`.
pub fn efficiency_level(selected_counts: &[usize], totals: &[usize]) -> Result<f64, MetricsError> {
    if selected_counts.len() != totals.len() {
        return Err(MetricsError::LengthMismatch(selected_counts.len(), totals.len()));
    }
    if totals.is_empty() {
        return Err(MetricsError::EmptyEvaluationSet);
    }
    let mut acc = 0.0;
    for (&sel, &tot) in selected_counts.iter().zip(totals) {
        if tot == 0 {
            return Err(MetricsError::EmptyVideo);
        }
        if sel > tot {
            return Err(MetricsError::OverSelected { selected: sel, total: tot });
        }
        acc += 100.0 - 100.0 * sel as f64 / tot as f64;
    }
    Ok(acc / totals.len() as f64)
}

/// IoU between the set of selected clips and the clips of `gt`.
pub fn selection_iou(mask: &SelectionMask, gt: TimeWindow) -> f64 {
    let inter = gt.clips().filter(|&i| mask.get(i)).count();
    let union = mask.count() + gt.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn selection_hits(mask: &SelectionMask, gt: TimeWindow) -> bool {
    gt.clips().any(|i| mask.get(i))
}

/// Mean selection IoU and percentage of non-empty intersections over a query subset.
pub fn behavior_stats<'a>(items: impl IntoIterator<Item = (&'a SelectionMask, TimeWindow)>) -> BehaviorStats {
    let mut n = 0usize;
    let mut iou = 0.0;
    let mut hits = 0usize;
    for (mask, gt) in items {
        n += 1;
        iou += selection_iou(mask, gt);
        hits += usize::from(selection_hits(mask, gt));
    }
    if n == 0 {
        return BehaviorStats::default();
    }
    BehaviorStats {
        mean_iou: iou / n as f64,
        nonzero_pct: 100.0 * hits as f64 / n as f64,
        n,
    }
}
