use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::system::{prepare, System};
use super::train::{train_expert, train_student, EpochLog};
use super::{evaluate_system, ExperimentConfig, RunnerError};
use crate::costmodel::CostTable;
use crate::taskgen::SyntheticDataset;
use crate::types::{Channel, MetricsReport};

/// Recursion depths swept by the recursion ablation.
pub const RECURSION_STEPS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Recursion,
    Channels,
}

impl FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recursion" => Ok(Self::Recursion),
            "channels" => Ok(Self::Channels),
            other => Err(format!("unknown ablation axis {other:?} (expected recursion or channels)")),
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Recursion => "recursion",
            Self::Channels => "channels",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricsReport,
}

/// The settings an axis expands to, as `(label, config)` pairs.
pub fn settings(config: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    match axis {
        AblationAxis::Recursion => RECURSION_STEPS
            .iter()
            .map(|&n| {
                let mut c = config.clone();
                c.spotter.steps = n;
                (format!("N={n}"), c)
            })
            .collect(),
        AblationAxis::Channels => [None, Some(Channel::Rooms), Some(Channel::Interactions), Some(Channel::Objects)]
            .into_iter()
            .map(|ch| {
                let mut c = config.clone();
                c.ablate_channel = ch;
                let label = ch.map_or("full".to_string(), |ch| format!("-{}", ch.short_name()));
                (label, c)
            })
            .collect(),
    }
}

/// Trains and evaluates one student per setting of `axis`.
pub fn ablate(
    config: &ExperimentConfig,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
    axis: AblationAxis,
    table: &CostTable,
    progress: &mut dyn FnMut(&str, &EpochLog),
) -> Result<Vec<AblationRow>, RunnerError> {
    let mut rows = Vec::new();
    // the expert never selects, so recursion settings share one
    let mut shared_expert: Option<System> = None;
    for (label, c) in settings(config, axis) {
        let c = c.resolved();
        let train_data = prepare(train, &c);
        let val_data = prepare(val, &c);
        let expert = if !c.distill {
            None
        } else if axis == AblationAxis::Recursion && shared_expert.is_some() {
            shared_expert.clone()
        } else {
            let (e, _) = train_expert(&c, &train_data, &mut |log| progress(&format!("{label} expert"), log))?;
            Some(e)
        };
        let (student, _) = train_student(&c, &train_data, expert.as_ref(), &mut |log| progress(&label, log))?;
        let (report, _) = evaluate_system(&student, &val_data, table)?;
        rows.push(AblationRow { label, report });
        if axis == AblationAxis::Recursion {
            shared_expert = expert;
        }
    }
    Ok(rows)
}
