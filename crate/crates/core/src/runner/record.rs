//! On-disk run layout:
//!
//! ```text
//! <dir>/record.json        RunRecord
//! <dir>/checkpoint/        model weights
//! <dir>/proposer/          direct-supervision proposer weights (optional)
//! <dir>/losses.jsonl       one EpochLog per line
//! <dir>/predictions.jsonl  one QueryPrediction per line
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::system::{System, SystemSpec};
use super::train::EpochLog;
use super::{io_err, ExperimentConfig, Method, QueryPrediction, RunnerError};
use crate::model::checkpoint;
use crate::types::MetricsReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub config: ExperimentConfig,
    /// Relative to the record directory.
    pub checkpoint: PathBuf,
    pub shape_hash: String,
    pub epochs: Vec<EpochLog>,
    /// Validation metrics, when evaluated.
    pub metrics: Option<MetricsReport>,
    /// Expert run the student was distilled from.
    pub expert: Option<PathBuf>,
}

impl RunRecord {
    pub fn new(system: &System, epochs: Vec<EpochLog>) -> Self {
        Self {
            method: system.method(),
            config: system.config().clone(),
            checkpoint: PathBuf::from("checkpoint"),
            shape_hash: system.params.shape_hash(),
            epochs,
            metrics: None,
            expert: None,
        }
    }

    /// Writes the record, the checkpoint(s) and the loss log.
    pub fn save(&self, dir: &Path, system: &System) -> Result<(), RunnerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        checkpoint::save(&dir.join(&self.checkpoint), &system.spec, &system.params)?;
        if let Some(p) = &system.proposer {
            checkpoint::save(&dir.join("proposer"), &p.spec, &p.params)?;
        }
        self.save_record(dir)?;
        let lines: Vec<String> = self
            .epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes"))
            .collect();
        write_lines(&dir.join("losses.jsonl"), &lines)
    }

    /// Rewrites only `record.json` (after attaching metrics, say).
    pub fn save_record(&self, dir: &Path) -> Result<(), RunnerError> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        let path = dir.join("record.json");
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self, RunnerError> {
        let path = dir.join("record.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunnerError::Malformed {
            what: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Rebuilds the trained system stored under `dir`.
    pub fn load_system(dir: &Path) -> Result<System, RunnerError> {
        let record = Self::load(dir)?;
        let mut system = load_checkpoint(&dir.join(&record.checkpoint))?;
        if system.params.shape_hash() != record.shape_hash {
            return Err(RunnerError::Malformed {
                what: dir.display().to_string(),
                message: "checkpoint shapes differ from the record".into(),
            });
        }
        let proposer_dir = dir.join("proposer");
        if proposer_dir.is_dir() {
            system.proposer = Some(Box::new(load_checkpoint(&proposer_dir)?));
        }
        Ok(system)
    }

    pub fn write_predictions(dir: &Path, predictions: &[QueryPrediction]) -> Result<(), RunnerError> {
        let lines: Vec<String> = predictions
            .iter()
            .map(|p| serde_json::to_string(p).expect("prediction serializes"))
            .collect();
        write_lines(&dir.join("predictions.jsonl"), &lines)
    }

    pub fn read_predictions(dir: &Path) -> Result<Vec<QueryPrediction>, RunnerError> {
        let path = dir.join("predictions.jsonl");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| RunnerError::Malformed {
                    what: path.display().to_string(),
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

fn load_checkpoint(dir: &Path) -> Result<System, RunnerError> {
    let (spec, params): (SystemSpec, _) = checkpoint::load(dir)?;
    let mut system = System::new(spec.method, &spec.config, spec.config.seed)?;
    if system.spec.dims != spec.dims {
        return Err(RunnerError::Malformed {
            what: dir.display().to_string(),
            message: "stored dimensions disagree with the stored config".into(),
        });
    }
    checkpoint::restore_into(&mut system.params, &params)?;
    Ok(system)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), RunnerError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for l in lines {
        writeln!(f, "{l}").map_err(io_err(path))?;
    }
    Ok(())
}
