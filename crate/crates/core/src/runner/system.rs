use ndarray::{s, Array2};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, Method, RunnerError};
use crate::autograd::{Tape, Var};
use crate::baselines::{select_direct_supervision, select_random, select_uniform, SequentialGate, TopkScorer};
use crate::losses::GroundTruthTargets;
use crate::model::layers::Ctx;
use crate::model::{Localizer, LocalizerOutputs, LocalizerValues, ModelDims, Parameters};
use crate::rng::{rng_from, tag, Rng};
use crate::spotter::{run_recursive, SampleMode, SelectionPolicy, SelectionTrace};
use crate::taskgen::SyntheticDataset;
use crate::types::{EmInstance, SelectionMask, TimeWindow};

/// An instance converted to f64 with its training targets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub tokens: Vec<u32>,
    pub cheap: Array2<f64>,
    pub expensive: Array2<f64>,
    pub ground_truth: TimeWindow,
    pub targets: GroundTruthTargets,
}

impl Prepared {
    pub fn clips(&self) -> usize {
        self.cheap.nrows()
    }
}

/// Converts a dataset, zeroing the ablated cheap channel if any.
pub fn prepare(dataset: &SyntheticDataset, config: &ExperimentConfig) -> Vec<Prepared> {
    dataset.instances.iter().map(|i| prepare_one(i, config)).collect()
}

fn prepare_one(inst: &EmInstance, config: &ExperimentConfig) -> Prepared {
    let mut cheap = inst.cheap.mapv(f64::from);
    if let Some(ch) = config.ablate_channel {
        cheap.slice_mut(s![.., inst.channels.range(ch)]).fill(0.0);
    }
    let clips = inst.clip_count();
    Prepared {
        id: inst.instance_id.clone(),
        tokens: inst.query_tokens.clone(),
        cheap,
        expensive: inst.expensive.mapv(f64::from),
        ground_truth: inst.ground_truth,
        targets: GroundTruthTargets::new(inst.ground_truth, clips, config.extend_ratio),
    }
}

/// Everything needed to rebuild a [`System`] around stored parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub method: Method,
    pub config: ExperimentConfig,
    pub dims: ModelDims,
}

/// Localizer plus whichever selector the method needs, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct System {
    pub spec: SystemSpec,
    pub localizer: Localizer,
    pub policy: Option<SelectionPolicy>,
    pub topk: Option<TopkScorer>,
    pub seqgate: Option<SequentialGate>,
    /// ZeroClips model whose top spans define direct-supervision selections.
    pub proposer: Option<Box<System>>,
    pub params: Parameters,
}

/// One forward pass over an instance.
pub struct InstanceRun {
    pub tape: Tape,
    pub outputs: LocalizerOutputs,
    /// Final cross-modal features.
    pub features: Var,
    pub mask: SelectionMask,
    pub trace: Option<SelectionTrace>,
    /// Selection fractions that enter the budget loss: one per recursive step,
    /// or a single joint fraction for the sequential gate.
    pub fractions: Vec<Var>,
}

impl System {
    /// `config` should already be resolved.
    pub fn new(method: Method, config: &ExperimentConfig, seed: u64) -> Result<Self, RunnerError> {
        let t = &config.taskgen;
        let dims = ModelDims {
            vocab_size: t.vocab_size(),
            cheap_width: t.cheap_width(),
            expensive_width: t.expensive_width,
            clips: t.clips,
        };
        let mut params = Parameters::new();
        let mut rng = rng_from(seed, &[tag("init"), tag(method.name())]);
        let localizer = Localizer::new(&config.model, dims, &mut params, &mut rng)?;
        let hidden = config.model.hidden_size;
        let fused = dims.cheap_width + config.model.query_embed_dim;
        let policy = (method == Method::Spotem).then(|| SelectionPolicy::new(&mut params, hidden, &mut rng));
        let topk = (method == Method::TopkOneshot).then(|| TopkScorer::new(&mut params, fused, hidden, &mut rng));
        let seqgate = (method == Method::SequentialGate).then(|| SequentialGate::new(&mut params, fused, hidden, &mut rng));
        Ok(Self {
            spec: SystemSpec {
                method,
                config: config.clone(),
                dims,
            },
            localizer,
            policy,
            topk,
            seqgate,
            proposer: None,
            params,
        })
    }

    /// Direct-supervision selection: clips covered by the proposer's top spans.
    pub fn proposal_mask(&self, inst: &Prepared) -> Result<SelectionMask, RunnerError> {
        let proposer = self
            .proposer
            .as_ref()
            .ok_or_else(|| RunnerError::Config("direct supervision needs a proposer model".into()))?;
        let mut rng = Rng::seed_from_u64(0);
        let mut ctx = Ctx::eval(Rng::seed_from_u64(0));
        let run = proposer.forward(inst, SampleMode::Eval, &mut rng, &mut ctx, None)?;
        let values = LocalizerValues::read(&run.tape, &run.outputs);
        let limit = proposer.config().model.span_limit(inst.clips());
        Ok(select_direct_supervision(
            &values.start_logp,
            &values.end_logp,
            self.config().baseline.top_k_responses,
            limit,
        ))
    }

    pub fn method(&self) -> Method {
        self.spec.method
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.spec.config
    }

    /// Forward pass. `fixed_mask` supplies precomputed selections (direct supervision).
    pub fn forward(
        &self,
        inst: &Prepared,
        mode: SampleMode,
        rng: &mut Rng,
        ctx: &mut Ctx,
        fixed_mask: Option<&SelectionMask>,
    ) -> Result<InstanceRun, RunnerError> {
        let params = &self.params;
        let config = &self.spec.config;
        let clips = inst.clips();
        let mut tape = Tape::new();
        let query = self.localizer.encode_query(&mut tape, params, &inst.tokens)?;
        let cheap = tape.constant(inst.cheap.clone());
        let percent = config.baseline.sample_fraction;
        let mut trace = None;
        let mut fractions = Vec::new();

        let reveal_fixed = |tape: &mut Tape, mask: &SelectionMask| {
            let v = &inst.expensive * &mask.to_column();
            tape.constant(v)
        };
        let (revealed, mask) = match self.spec.method {
            Method::Expert => (tape.constant(inst.expensive.clone()), SelectionMask::ones(clips)),
            Method::All => (tape.constant(inst.expensive.clone()), SelectionMask::ones(clips)),
            Method::Zero => (tape.constant(Array2::zeros(inst.expensive.dim())), SelectionMask::zeros(clips)),
            Method::Random => {
                let m = select_random(clips, percent, rng);
                (reveal_fixed(&mut tape, &m), m)
            }
            Method::Uniform => {
                let m = select_uniform(clips, percent);
                (reveal_fixed(&mut tape, &m), m)
            }
            Method::DirectSupervision => {
                let m = match fixed_mask {
                    Some(m) => m.clone(),
                    None => self.proposal_mask(inst)?,
                };
                (reveal_fixed(&mut tape, &m), m)
            }
            Method::TopkOneshot => {
                let scorer = self.topk.as_ref().expect("topk scorer");
                let out = scorer.forward(&mut tape, params, cheap, query, percent);
                let v = tape.constant(inst.expensive.clone());
                (tape.mul(v, out.gate), out.mask)
            }
            Method::SequentialGate => {
                let gate = self.seqgate.as_ref().expect("sequential gate");
                let out = gate.forward(&mut tape, params, cheap, query, config.spotter.temperature, mode, rng);
                fractions.push(out.fraction);
                let v = tape.constant(inst.expensive.clone());
                (tape.mul(v, out.gate), out.mask)
            }
            Method::Spotem => {
                let policy = self.policy.as_ref().expect("selection policy");
                let out = run_recursive(
                    &mut tape,
                    params,
                    &self.localizer,
                    policy,
                    &inst.cheap,
                    &inst.expensive,
                    query,
                    &config.spotter,
                    mode,
                    rng,
                    ctx,
                )?;
                fractions = out.step_fractions;
                let mask = out.trace.joint_mask.clone();
                trace = Some(out.trace);
                (out.revealed, mask)
            }
        };
        let preview = if self.spec.method == Method::All {
            tape.constant(Array2::zeros(inst.cheap.dim()))
        } else {
            cheap
        };
        let visual = tape.concat_cols(&[preview, revealed]);
        let features = self.localizer.cross_modal_encode(&mut tape, params, visual, query, ctx)?;
        let outputs = self.localizer.localize(&mut tape, params, features, ctx);
        Ok(InstanceRun {
            tape,
            outputs,
            features,
            mask,
            trace,
            fractions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{generate_dataset, Split};
    use crate::types::Channel;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.taskgen.clips = 16;
        c.taskgen.response_ratio = 0.125;
        c.taskgen.expensive_width = 8;
        c.model.hidden_size = 8;
        c.model.encoder_layers = 1;
        c.model.attention_heads = 1;
        c.model.query_embed_dim = 4;
        c.model.dropout = 0.0;
        c.spotter.steps = 2;
        c.resolved()
    }

    #[test]
    fn every_method_runs_forward() {
        let config = tiny_config();
        let data = generate_dataset(&config.taskgen, 2, Split::Train).unwrap();
        let prepared = prepare(&data, &config);
        for method in [
            Method::Expert,
            Method::Spotem,
            Method::Zero,
            Method::All,
            Method::Random,
            Method::Uniform,
            Method::TopkOneshot,
            Method::SequentialGate,
            Method::DirectSupervision,
        ] {
            let system = System::new(method, &config, 1).unwrap();
            let fixed = SelectionMask::from_indices(16, [1, 2]);
            let mut rng = Rng::seed_from_u64(0);
            let mut ctx = Ctx::eval(Rng::seed_from_u64(0));
            let run = system
                .forward(&prepared[0], SampleMode::Eval, &mut rng, &mut ctx, Some(&fixed))
                .unwrap();
            assert_eq!(run.tape.shape(run.outputs.start_logp), (1, 16), "{method}");
            let expected = match method {
                Method::Zero => Some(0),
                Method::All | Method::Expert => Some(16),
                Method::Random | Method::Uniform => Some(2),
                Method::TopkOneshot => Some(2),
                Method::DirectSupervision => Some(2),
                _ => None,
            };
            if let Some(n) = expected {
                assert_eq!(run.mask.count(), n, "{method}");
            }
        }
    }

    #[test]
    fn ablated_channel_is_zero_in_model_input() {
        let mut config = tiny_config();
        config.ablate_channel = Some(Channel::Interactions);
        let data = generate_dataset(&config.taskgen, 3, Split::Val).unwrap();
        let prepared = prepare(&data, &config);
        let range = data.instances[0].channels.range(Channel::Interactions);
        for p in &prepared {
            assert!(p.cheap.slice(s![.., range.clone()]).iter().all(|&x| x == 0.0));
            let other = data.instances[0].channels.range(Channel::Objects);
            assert!(p.cheap.slice(s![.., other]).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn distill_flag_keeps_architecture() {
        let with = tiny_config();
        let without = ExperimentConfig {
            distill: false,
            ..with.clone()
        }
        .resolved();
        let a = System::new(Method::Spotem, &with, 3).unwrap();
        let b = System::new(Method::Spotem, &without, 3).unwrap();
        assert_eq!(a.params.shape_hash(), b.params.shape_hash());
    }
}
