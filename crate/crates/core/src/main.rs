use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spotem::costmodel::{instance_cost, CostTable};
use spotem::runner::{
    ablate, evaluate, evaluate_system, plot, prepare, train_baseline, train_expert, train_student, AblationAxis,
    EpochLog, ExperimentConfig, Method, PlotSeries, RunRecord, RunnerError, System,
};
use spotem::taskgen::{generate_dataset, read_dataset, write_dataset, Split, SyntheticDataset};

#[derive(Parser)]
#[command(name = "spotem", version, about = "Budgeted clip selection for temporal query localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON or TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Target efficiency η in percent.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cost: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, RunnerError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.eta {
            c.target_efficiency = e;
        }
        if let Some(e) = self.epochs {
            c.optimizer.epochs = e;
        }
        if let Some(b) = self.batch {
            c.optimizer.batch = b;
        }
        if let Some(n) = self.steps {
            c.spotter.steps = n;
        }
        if let Some(cost) = &self.cost {
            c.cost_preset = cost.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and val splits into DIR/train and DIR/val.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full-feature expert.
    TrainExpert {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the selection student, distilled from an expert run.
    TrainStudent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Expert run directory (required unless --no-distill).
        #[arg(long)]
        expert: Option<PathBuf>,
        /// Train from scratch without distillation terms.
        #[arg(long)]
        no_distill: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a comparator selector.
    TrainBaseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// zero | all | random | uniform | topk_oneshot | sequential_gate | direct_supervision
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a run on a dataset split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Split directory (e.g. DATA/val).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "internvideo")]
        cost: String,
    },
    /// Train and evaluate one student per setting of an axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// recursion | channels
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
    },
    /// MR@1 versus TFLOPs figure over evaluated runs.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        title: String,
    },
    /// Per-query cost in GFLOPs.
    Cost {
        #[arg(long, default_value = "internvideo")]
        preset: String,
        #[arg(long)]
        selected: usize,
        #[arg(long, default_value_t = 128)]
        clips: usize,
        /// Leave out the preview term (AllClips accounting).
        #[arg(long)]
        no_index: bool,
    },
}

/// Relative output paths land under `$SPOTEM_OUT` when it is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os("SPOTEM_OUT") {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_split(data: &Path, split: Split) -> Result<SyntheticDataset, RunnerError> {
    Ok(read_dataset(&data.join(split.name()))?)
}

fn check_dataset(config: &ExperimentConfig, data: &SyntheticDataset) -> Result<(), RunnerError> {
    if data.config != config.taskgen {
        return Err(RunnerError::Config(
            "dataset was generated with a different taskgen config".into(),
        ));
    }
    Ok(())
}

fn log_epoch(label: &str) -> impl FnMut(&EpochLog) + '_ {
    move |log| eprintln!("[{label}] {}", serde_json::to_string(log).expect("log serializes"))
}

/// Evaluates on val, then writes record, metrics.json and predictions.
fn finish(system: &System, epochs: Vec<EpochLog>, data: &Path, out: &Path, expert: Option<PathBuf>) -> Result<(), RunnerError> {
    let config = system.config();
    let val = load_split(data, Split::Val)?;
    let (report, predictions) = evaluate_system(system, &prepare(&val, config), &config.cost_table()?)?;
    let mut record = RunRecord::new(system, epochs);
    record.metrics = Some(report);
    record.expert = expert;
    record.save(out, system)?;
    RunRecord::write_predictions(out, &predictions)?;
    write_metrics(out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn write_metrics(dir: &Path, report: &spotem::MetricsReport) -> Result<(), RunnerError> {
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(report).expect("report serializes")).map_err(|source| {
        RunnerError::Io { path, source }
    })
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Generate { cfg, out } => {
            let config = cfg.load()?;
            let out = out_path(&out);
            for (split, n) in [(Split::Train, config.train_size), (Split::Val, config.val_size)] {
                let ds = generate_dataset(&config.taskgen, n, split)?;
                write_dataset(&ds, &out.join(split.name()))?;
                eprintln!("wrote {n} {} instances to {}", split.name(), out.join(split.name()).display());
            }
            Ok(())
        }
        Command::TrainExpert { cfg, data, out } => {
            let config = cfg.load()?;
            let train = load_split(&data, Split::Train)?;
            check_dataset(&config, &train)?;
            let (system, logs) = train_expert(&config, &prepare(&train, &config.resolved()), &mut log_epoch("expert"))?;
            finish(&system, logs, &data, &out_path(&out), None)
        }
        Command::TrainStudent {
            cfg,
            data,
            expert,
            no_distill,
            out,
        } => {
            let mut config = cfg.load()?;
            if no_distill {
                config.distill = false;
            }
            let train = load_split(&data, Split::Train)?;
            check_dataset(&config, &train)?;
            let expert_system = match (&expert, config.distill) {
                (Some(dir), true) => {
                    if !dir.join("record.json").is_file() {
                        return Err(RunnerError::MissingExpert(dir.clone()));
                    }
                    Some(RunRecord::load_system(dir)?)
                }
                (None, true) => return Err(RunnerError::Config("--expert is required unless --no-distill".into())),
                (_, false) => None,
            };
            let prepared = prepare(&train, &config.resolved());
            let (system, logs) = train_student(&config, &prepared, expert_system.as_ref(), &mut log_epoch("student"))?;
            finish(&system, logs, &data, &out_path(&out), expert)
        }
        Command::TrainBaseline { cfg, method, data, out } => {
            let config = cfg.load()?;
            let method: Method = method.parse().map_err(RunnerError::Config)?;
            let train = load_split(&data, Split::Train)?;
            check_dataset(&config, &train)?;
            let prepared = prepare(&train, &config.resolved());
            let (system, logs) = train_baseline(method, &config, &prepared, &mut log_epoch(method.name()))?;
            finish(&system, logs, &data, &out_path(&out), None)
        }
        Command::Evaluate { run, data, cost } => {
            let table: CostTable = cost.parse()?;
            let dataset = read_dataset(&data)?;
            let (report, predictions) = evaluate(&run, &dataset, &table)?;
            RunRecord::write_predictions(&run, &predictions)?;
            write_metrics(&run, &report)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Ablate { cfg, axis, data, out } => {
            let config = cfg.load()?;
            let axis: AblationAxis = axis.parse().map_err(RunnerError::Config)?;
            let train = load_split(&data, Split::Train)?;
            let val = load_split(&data, Split::Val)?;
            check_dataset(&config, &train)?;
            let rows = ablate(&config, &train, &val, axis, &config.cost_table()?, &mut |label, log| {
                log_epoch(label)(log)
            })?;
            let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
            let out = out_path(&out);
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|source| RunnerError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            std::fs::write(&out, &text).map_err(|source| RunnerError::Io { path: out.clone(), source })?;
            println!("{text}");
            Ok(())
        }
        Command::Plot { runs, out, title } => {
            let mut series: Vec<PlotSeries> = Vec::new();
            for dir in &runs {
                let record = RunRecord::load(dir)?;
                let Some(m) = record.metrics else {
                    return Err(RunnerError::Config(format!("{} has no metrics; evaluate it first", dir.display())));
                };
                let name = record.method.name().to_string();
                match series.iter_mut().find(|s| s.name == name) {
                    Some(s) => s.points.push((m.tflops, m.mr_at_1)),
                    None => series.push(PlotSeries {
                        name,
                        points: vec![(m.tflops, m.mr_at_1)],
                    }),
                }
            }
            plot(&title, &series, &out_path(&out))
        }
        Command::Cost {
            preset,
            selected,
            clips,
            no_index,
        } => {
            let table: CostTable = preset.parse()?;
            let g = instance_cost(selected, clips, &table, !no_index)?;
            println!("{g:.2} GFLOPs ({:.2} TFLOPs)", g / 1000.0);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
