use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::costmodel::CostTable;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::spotter::SpotterConfig;
use crate::taskgen::TaskGenConfig;
use crate::types::Channel;

/// Which model family a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Full features, no selection; the distillation teacher.
    Expert,
    /// Recursive selection student.
    Spotem,
    Zero,
    All,
    Random,
    Uniform,
    TopkOneshot,
    SequentialGate,
    DirectSupervision,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Expert => "expert",
            Method::Spotem => "spotem",
            other => other.baseline().expect("baseline").name(),
        }
    }

    pub fn baseline(self) -> Option<BaselineMethod> {
        Some(match self {
            Method::Expert | Method::Spotem => return None,
            Method::Zero => BaselineMethod::Zero,
            Method::All => BaselineMethod::All,
            Method::Random => BaselineMethod::Random,
            Method::Uniform => BaselineMethod::Uniform,
            Method::TopkOneshot => BaselineMethod::TopkOneshot,
            Method::SequentialGate => BaselineMethod::SequentialGate,
            Method::DirectSupervision => BaselineMethod::DirectSupervision,
        })
    }

    /// Whether the preview features are charged in the cost model.
    pub fn uses_index(self) -> bool {
        self != Method::All
    }
}

impl From<BaselineMethod> for Method {
    fn from(b: BaselineMethod) -> Self {
        match b {
            BaselineMethod::Zero => Method::Zero,
            BaselineMethod::All => Method::All,
            BaselineMethod::Random => Method::Random,
            BaselineMethod::Uniform => Method::Uniform,
            BaselineMethod::TopkOneshot => Method::TopkOneshot,
            BaselineMethod::SequentialGate => Method::SequentialGate,
            BaselineMethod::DirectSupervision => Method::DirectSupervision,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "expert" => Ok(Method::Expert),
            "spotem" => Ok(Method::Spotem),
            other => other.parse::<BaselineMethod>().map(Method::from),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub taskgen: TaskGenConfig,
    pub model: ModelConfig,
    pub spotter: SpotterConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub baseline: BaselineConfig,
    /// η in percent; the selection budget is `1 − η/100`.
    pub target_efficiency: f64,
    pub train_size: usize,
    pub val_size: usize,
    /// Highlight labels extend the window by this fraction of its length per side.
    pub extend_ratio: f64,
    /// Distillation on: student starts from the expert and uses the distillation terms.
    /// Off: the same architecture trained from scratch with `λ_FD = λ_PD = 0`.
    pub distill: bool,
    /// Cheap channel zeroed at train and eval time.
    pub ablate_channel: Option<Channel>,
    pub cost_preset: String,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            taskgen: TaskGenConfig::default(),
            model: ModelConfig::default(),
            spotter: SpotterConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            baseline: BaselineConfig::default(),
            target_efficiency: 90.0,
            train_size: 2000,
            val_size: 500,
            extend_ratio: 0.1,
            distill: true,
            ablate_channel: None,
            cost_preset: "internvideo".into(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn budget(&self) -> f64 {
        1.0 - self.target_efficiency / 100.0
    }

    /// Copy with every derived field filled in: selection budget and baseline
    /// sample fraction follow η, and distillation weights vanish when distillation is off.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.spotter.budget = c.budget();
        c.baseline.sample_fraction = 100.0 - c.target_efficiency;
        if !c.distill {
            c.weights = c.weights.without_distillation();
        }
        c
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let cfg = |e: String| RunnerError::Config(e);
        if !(0.0..100.0).contains(&self.target_efficiency) {
            return Err(cfg(format!("target_efficiency {} outside [0, 100)", self.target_efficiency)));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(cfg("train_size and val_size must be positive".into()));
        }
        if !(self.extend_ratio >= 0.0) {
            return Err(cfg("extend_ratio must be nonnegative".into()));
        }
        self.taskgen.validate()?;
        self.model.validate()?;
        let r = self.resolved();
        r.spotter.validate()?;
        r.weights.validate().map_err(cfg)?;
        r.optimizer.validate().map_err(cfg)?;
        r.baseline.validate().map_err(cfg)?;
        self.cost_table()?;
        Ok(())
    }

    pub fn cost_table(&self) -> Result<CostTable, RunnerError> {
        Ok(self.cost_preset.parse::<CostTable>()?)
    }

    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(super::io_err(path))?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let malformed = |message: String| RunnerError::Config(format!("{}: {message}", path.display()));
        if is_toml {
            toml::from_str(&text).map_err(|e| malformed(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))
        }
    }
}
