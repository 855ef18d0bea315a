use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::system::{prepare, Prepared, System};
use super::{RunRecord, RunnerError};
use crate::costmodel::{dataset_cost_report, CostTable};
use crate::metrics::{behavior_stats, mean_recall, query_mean_recall, selection_hits, selection_iou};
use crate::model::layers::Ctx;
use crate::model::spans::propose_spans;
use crate::model::LocalizerValues;
use crate::rng::{rng_from, tag};
use crate::spotter::SampleMode;
use crate::taskgen::SyntheticDataset;
use crate::types::{BehaviorSplit, MetricsReport, SelectionMask, TimeWindow};

/// Number of ranked spans kept per query.
pub const TOP_SPANS: usize = 5;

/// Per-query dump line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub id: String,
    pub ground_truth: TimeWindow,
    pub predictions: Vec<TimeWindow>,
    pub mr1: f64,
    pub mr5: f64,
    /// Joint selection as a bit string.
    pub mask: String,
    /// Per-step selections, recursive selector only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub step_masks: Vec<String>,
}

fn predict(system: &System, inst: &Prepared, index: usize) -> Result<(Vec<TimeWindow>, SelectionMask, Vec<String>), RunnerError> {
    let seed = system.config().seed;
    let mut rng = rng_from(seed, &[tag("eval"), index as u64]);
    let mut ctx = Ctx::eval(rng_from(seed, &[tag("eval-ctx")]));
    let run = system.forward(inst, SampleMode::Eval, &mut rng, &mut ctx, None)?;
    let values = LocalizerValues::read(&run.tape, &run.outputs);
    let limit = system.config().model.span_limit(inst.clips());
    let spans = propose_spans(&values.start_logp, &values.end_logp, TOP_SPANS, limit);
    let steps = run
        .trace
        .map(|t| t.per_step_masks.iter().map(SelectionMask::to_bit_string).collect())
        .unwrap_or_default();
    Ok((spans, run.mask, steps))
}

/// Metrics plus per-query predictions on `data`.
pub fn evaluate_system(
    system: &System,
    data: &[Prepared],
    table: &CostTable,
) -> Result<(MetricsReport, Vec<QueryPrediction>), RunnerError> {
    let results: Vec<(Vec<TimeWindow>, SelectionMask, Vec<String>)> = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| predict(system, inst, i))
        .collect::<Result<_, _>>()?;
    let gts: Vec<TimeWindow> = data.iter().map(|d| d.ground_truth).collect();
    let preds: Vec<Vec<TimeWindow>> = results.iter().map(|r| r.0.clone()).collect();
    let masks: Vec<SelectionMask> = results.iter().map(|r| r.1.clone()).collect();
    let mr1 = mean_recall(&preds, &gts, 1)?;
    let mr5 = mean_recall(&preds, &gts, 5)?;
    let cost = dataset_cost_report(&masks, table, system.method().uses_index())?;
    let n = data.len() as f64;
    let mean_iou = masks.iter().zip(&gts).map(|(m, &g)| selection_iou(m, g)).sum::<f64>() / n;
    let hits = masks.iter().zip(&gts).filter(|(m, &g)| selection_hits(m, g)).count();

    let per_query: Vec<QueryPrediction> = data
        .iter()
        .zip(results)
        .map(|(inst, (predictions, mask, step_masks))| QueryPrediction {
            id: inst.id.clone(),
            ground_truth: inst.ground_truth,
            mr1: query_mean_recall(&predictions, inst.ground_truth, 1),
            mr5: query_mean_recall(&predictions, inst.ground_truth, 5),
            predictions,
            mask: mask.to_bit_string(),
            step_masks,
        })
        .collect();
    let correct = per_query.iter().zip(&masks).filter(|(q, _)| q.mr5 == 1.0);
    let wrong = per_query.iter().zip(&masks).filter(|(q, _)| q.mr5 != 1.0);
    let behavior = BehaviorSplit {
        correct: behavior_stats(correct.map(|(q, m)| (m, q.ground_truth))),
        wrong: behavior_stats(wrong.map(|(q, m)| (m, q.ground_truth))),
    };
    let report = MetricsReport {
        mr_at_1: mr1,
        mr_at_5: mr5,
        efficiency_eta: cost.eta,
        tflops: cost.mean_tflops,
        mean_iou_selected_vs_gt: mean_iou,
        mean_nonzero_intersection: 100.0 * hits as f64 / n,
        behavior,
    };
    Ok((report, per_query))
}

/// Loads a stored run and evaluates it on `dataset`.
pub fn evaluate(
    record_dir: &Path,
    dataset: &SyntheticDataset,
    table: &CostTable,
) -> Result<(MetricsReport, Vec<QueryPrediction>), RunnerError> {
    let system = RunRecord::load_system(record_dir)?;
    let dims = &system.spec.dims;
    let t = &dataset.config;
    if t.clips != dims.clips || t.cheap_width() != dims.cheap_width || t.expensive_width != dims.expensive_width {
        return Err(RunnerError::Model(crate::model::ModelError::DimensionMismatch(format!(
            "dataset (L={}, D_s={}, D_v={}) vs checkpoint (L={}, D_s={}, D_v={})",
            t.clips,
            t.cheap_width(),
            t.expensive_width,
            dims.clips,
            dims.cheap_width,
            dims.expensive_width
        ))));
    }
    let data = prepare(dataset, system.config());
    evaluate_system(&system, &data, table)
}
