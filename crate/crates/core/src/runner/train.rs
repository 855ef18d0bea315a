use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::system::{InstanceRun, Prepared, System};
use super::{ExperimentConfig, Method, RunnerError};
use crate::autograd::Var;
use crate::losses::{em_loss, feature_distill_loss, prediction_distill_loss, selection_loss, total_loss, LossParts};
use crate::model::layers::Ctx;
use crate::model::LocalizerValues;
use crate::optim::AdamW;
use crate::rng::{derive_seed, rng_from, tag};
use crate::spotter::SampleMode;
use crate::types::SelectionMask;

/// Frozen teacher outputs for one training instance.
#[derive(Clone, Debug)]
pub struct ExpertCache {
    pub features: Array2<f64>,
    pub values: LocalizerValues,
}

/// Mean loss components of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

/// Batch loss and its parameter gradients.
pub struct Objective {
    pub parts: LossParts,
    pub total: f64,
    /// Indexed by parameter id.
    pub grads: Vec<Option<Array2<f64>>>,
}

/// Teacher outputs on every instance, in eval mode.
pub fn expert_cache(expert: &System, data: &[Prepared]) -> Result<Vec<ExpertCache>, RunnerError> {
    data.par_iter()
        .map(|inst| {
            let mut rng = rng_from(0, &[]);
            let mut ctx = Ctx::eval(rng_from(0, &[]));
            let run = expert.forward(inst, SampleMode::Eval, &mut rng, &mut ctx, None)?;
            Ok(ExpertCache {
                features: run.tape.value(run.features).clone(),
                values: LocalizerValues::read(&run.tape, &run.outputs),
            })
        })
        .collect()
}

struct InstanceLoss {
    run: InstanceRun,
    total: Var,
    parts: LossParts,
}

fn instance_loss(
    system: &System,
    inst: &Prepared,
    expert: Option<&ExpertCache>,
    fixed_mask: Option<&SelectionMask>,
    mode: SampleMode,
    seed: u64,
    dropout: bool,
) -> Result<InstanceLoss, RunnerError> {
    let weights = &system.config().weights;
    let mut rng = rng_from(seed, &[tag("sample")]);
    let ctx_rng = rng_from(seed, &[tag("dropout")]);
    let mut ctx = if dropout {
        Ctx::train(system.config().model.dropout, ctx_rng)
    } else {
        Ctx::eval(ctx_rng)
    };
    let mut run = system.forward(inst, mode, &mut rng, &mut ctx, fixed_mask)?;
    let tape = &mut run.tape;
    let em = em_loss(tape, &run.outputs, &inst.targets);
    let mut parts = LossParts {
        em: tape.scalar(em),
        ..LossParts::default()
    };
    let mut total = em;
    if let Some(cache) = expert {
        if weights.fd > 0.0 {
            let teacher = tape.constant(cache.features.clone());
            let fd = feature_distill_loss(tape, teacher, run.features)?;
            parts.fd = tape.scalar(fd);
            let scaled = tape.scale(fd, weights.fd);
            total = tape.add(total, scaled);
        }
        if weights.pd > 0.0 {
            let pd = prediction_distill_loss(tape, &cache.values, &run.outputs, weights.pd_high, weights.pd_low);
            parts.pd = tape.scalar(pd);
            let scaled = tape.scale(pd, weights.pd);
            total = tape.add(total, scaled);
        }
    }
    Ok(InstanceLoss { run, total, parts })
}

/// Loss and gradients over `batch` (indices into `data`).
///
/// Every instance draws its noise from `seed` and its index, so two calls with the
/// same arguments see identical noise.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    system: &System,
    data: &[Prepared],
    batch: &[usize],
    expert: Option<&[ExpertCache]>,
    masks: Option<&[SelectionMask]>,
    mode: SampleMode,
    seed: u64,
    dropout: bool,
) -> Result<Objective, RunnerError> {
    let weights = &system.config().weights;
    let losses: Vec<InstanceLoss> = batch
        .par_iter()
        .map(|&i| {
            instance_loss(
                system,
                &data[i],
                expert.map(|e| &e[i]),
                masks.map(|m| &m[i]),
                mode,
                derive_seed(seed, &[i as u64]),
                dropout,
            )
        })
        .collect::<Result<_, _>>()?;

    let b = batch.len() as f64;
    let mut parts = LossParts::default();
    for l in &losses {
        parts.add_scaled(&l.parts, 1.0 / b);
    }

    // fraction seeds per instance from the batch-level budget loss
    let uses_budget = !losses.is_empty() && !losses[0].run.fractions.is_empty();
    let mut fraction_seeds: Vec<Vec<f64>> = vec![Vec::new(); losses.len()];
    if uses_budget {
        let values: Vec<Vec<f64>> = losses
            .iter()
            .map(|l| l.run.fractions.iter().map(|&f| l.run.tape.scalar(f)).collect())
            .collect();
        let per_step = system.method() == Method::Spotem;
        let joint: Vec<f64> = values.iter().map(|v| v.iter().sum()).collect();
        let steps: Vec<Vec<f64>> = if per_step { values.clone() } else { vec![Vec::new(); values.len()] };
        let sel = selection_loss(&joint, &steps, system.config().spotter.budget, weights.step);
        parts.sel = sel.value;
        for (b, seeds) in fraction_seeds.iter_mut().enumerate() {
            *seeds = (0..values[b].len())
                .map(|n| {
                    let d_step = if per_step { sel.d_steps[b][n] } else { 0.0 };
                    weights.sel * (sel.d_joint[b] + d_step)
                })
                .collect();
        }
    }
    let total = total_loss(&parts, weights)?;

    let per_instance: Vec<Vec<Option<Array2<f64>>>> = losses
        .par_iter()
        .zip(fraction_seeds.par_iter())
        .map(|(l, fs)| {
            let mut seeds = vec![(l.total, 1.0 / b)];
            seeds.extend(l.run.fractions.iter().copied().zip(fs.iter().copied()));
            l.run.tape.backward(&seeds).into_params()
        })
        .collect();
    drop(losses);

    let mut grads: Vec<Option<Array2<f64>>> = vec![None; system.params.len()];
    for inst in per_instance {
        for (id, g) in inst.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut grads[id] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
    }
    Ok(Objective { parts, total, grads })
}

fn fit(
    system: &mut System,
    data: &[Prepared],
    expert: Option<&[ExpertCache]>,
    masks: Option<&[SelectionMask]>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, RunnerError> {
    let config = system.config().clone();
    let opt_cfg = config.optimizer.clone();
    let batch = opt_cfg.batch.min(data.len());
    let per_epoch = data.len().div_ceil(batch);
    let mut opt = AdamW::new(opt_cfg.clone(), &system.params, per_epoch * opt_cfg.epochs);
    let seed = derive_seed(config.seed, &[tag("train"), tag(system.method().name())]);
    let mut logs = Vec::with_capacity(opt_cfg.epochs);
    for epoch in 0..opt_cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(seed, &[tag("shuffle"), epoch as u64]));
        let mut parts = LossParts::default();
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let batch_seed = derive_seed(seed, &[tag("batch"), epoch as u64, bi as u64]);
            let obj = batch_objective(system, data, chunk, expert, masks, SampleMode::Train, batch_seed, true)
                .map_err(|e| match e {
                    RunnerError::Loss(source) => RunnerError::Diverged { epoch, source },
                    other => other,
                })?;
            opt.update(&mut system.params, &obj.grads);
            if !system.params.all_finite() {
                return Err(RunnerError::Diverged {
                    epoch,
                    source: crate::losses::LossError::NonFinite {
                        term: "parameters",
                        value: f64::NAN,
                    },
                });
            }
            let w = chunk.len() as f64 / data.len() as f64;
            parts.add_scaled(&obj.parts, w);
            total += w * obj.total;
        }
        let log = EpochLog { epoch, parts, total };
        progress(&log);
        logs.push(log);
    }
    system.params.round_to_f32();
    Ok(logs)
}

/// Localizer on full features with the task loss only.
pub fn train_expert(
    config: &ExperimentConfig,
    train: &[Prepared],
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(System, Vec<EpochLog>), RunnerError> {
    let config = config.resolved();
    let mut system = System::new(Method::Expert, &config, config.seed)?;
    let logs = fit(&mut system, train, None, None, progress)?;
    Ok((system, logs))
}

/// Selection student. With distillation on it starts from the expert's localizer
/// weights and is pulled towards the expert's features and predictions.
pub fn train_student(
    config: &ExperimentConfig,
    train: &[Prepared],
    expert: Option<&System>,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(System, Vec<EpochLog>), RunnerError> {
    let config = config.resolved();
    let mut system = System::new(Method::Spotem, &config, config.seed)?;
    let cache = if config.distill {
        let expert = expert.ok_or_else(|| RunnerError::Config("distillation needs an expert model".into()))?;
        if expert.spec.dims != system.spec.dims || expert.config().model != config.model {
            return Err(RunnerError::Config("expert architecture differs from the student".into()));
        }
        system.params.copy_matching_from(&expert.params);
        Some(expert_cache(expert, train)?)
    } else {
        None
    };
    let logs = fit(&mut system, train, cache.as_deref(), None, progress)?;
    Ok((system, logs))
}

/// Any comparator selector with its own localizer.
pub fn train_baseline(
    method: Method,
    config: &ExperimentConfig,
    train: &[Prepared],
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<(System, Vec<EpochLog>), RunnerError> {
    if method.baseline().is_none() {
        return Err(RunnerError::Config(format!("{method} is not a baseline")));
    }
    let config = config.resolved();
    let mut system = System::new(method, &config, config.seed)?;
    let mut masks = None;
    if method == Method::DirectSupervision {
        let (proposer, _) = train_baseline(Method::Zero, &config, train, &mut |_| {})?;
        system.proposer = Some(Box::new(proposer));
        let computed: Vec<SelectionMask> = train
            .par_iter()
            .map(|inst| system.proposal_mask(inst))
            .collect::<Result<_, _>>()?;
        masks = Some(computed);
    }
    let logs = fit(&mut system, train, None, masks.as_deref(), progress)?;
    Ok((system, logs))
}
