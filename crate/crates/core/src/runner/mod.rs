//! Experiment orchestration: datasets, two-stage training, baselines,
//! evaluation, ablations and plots.

mod ablate;
mod config;
mod eval;
mod plot;
mod record;
mod system;
mod train;

pub use ablate::{ablate, settings as ablation_settings, AblationAxis, AblationRow};
pub use config::{ExperimentConfig, Method};
pub use eval::{evaluate, evaluate_system, QueryPrediction};
pub use plot::{plot, render_svg, PlotSeries};
pub use record::RunRecord;
pub use system::{prepare, InstanceRun, Prepared, System, SystemSpec};
pub use train::{
    batch_objective, expert_cache, train_baseline, train_expert, train_student, EpochLog, ExpertCache, Objective,
};

use std::path::PathBuf;

use crate::costmodel::CostError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::checkpoint::CheckpointError;
use crate::model::ModelError;
use crate::spotter::SpotterError;
use crate::taskgen::{DatasetIoError, TaskGenError};

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: LossError,
    },
    #[error("missing expert run at {0}")]
    MissingExpert(PathBuf),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spotter(#[from] SpotterError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Dataset(#[from] DatasetIoError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },
}

impl RunnerError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Diverged { .. } => 3,
            RunnerError::Config(_) | RunnerError::TaskGen(_) | RunnerError::Cost(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}
