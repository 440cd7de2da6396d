//! The rollout-update loop: sample groups, build the configured loss, take
//! an optimizer step, periodically hard-reset the reference policy, and
//! log training dynamics.

pub mod adam;
pub mod run;
pub mod value;

pub use adam::{adaptive_moment_step, OptimizerState, StepError};
pub use run::{run_training, RunOutcome};
pub use value::ValueNet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::GradientMap;
use crate::eval::EvalError;
use crate::objectives::{
    class_weights, grpo_loss, pacs_batch_loss, ppo_loss, ClassWeights, GradientMode,
    ObjectiveError, PacsSettings, RolloutGroup, WeightScope,
};
use crate::policy::{
    query_embedding, sample_sequences, sequence_log_prob, PolicyCheckpoint, PolicyError,
    PolicyParameters, PolicySnapshot, SnapshotRole,
};
use crate::rng::derive_rng;
use crate::scores::{gae_advantages, AdvantageVector, Estimator, ScoreError, StdKind};
use crate::tasks::{Task, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("parameters became non-finite at step {step}")]
    NonFiniteParams { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint does not match the configured architecture")]
    CheckpointMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Pacs,
    Ppo,
    Grpo,
}

impl Algorithm {
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "pacs" => Some(Algorithm::Pacs),
            "ppo" => Some(Algorithm::Ppo),
            "grpo" => Some(Algorithm::Grpo),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Algorithm::Pacs => "pacs",
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
        }
    }
}

/// Everything one training run needs. Defaults follow the desk-scale
/// calibration: 8 rollouts per query, proxy scale 1.0, reference reset
/// every 100 steps, on-policy sampling at temperature 1.
#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub task: Task,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub estimator: Estimator,
    pub gradient_mode: GradientMode,
    pub weighting: bool,
    pub weight_scope: WeightScope,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub reset_period: Option<usize>,
    pub total_steps: usize,
    pub seed: u64,
    pub temperature: f64,
    pub top_p: f64,
    pub context_window: usize,
    pub hidden: usize,
    pub std_kind: StdKind,
    pub score_clamp: Option<f64>,
    /// Gradient epochs per rollout batch. Values above 1 reuse samples
    /// off-policy with no importance correction; logged loudly.
    pub inner_epochs: usize,
    pub gamma: f64,
    pub lam: f64,
    pub value_hidden: usize,
}

impl TrainerConfig {
    pub fn new(algorithm: Algorithm, task: Task) -> Self {
        TrainerConfig {
            algorithm,
            task,
            group_size: 8,
            groups_per_step: 4,
            learning_rate: 3e-3,
            beta: 1.0,
            estimator: Estimator::Rloo,
            gradient_mode: GradientMode::Full,
            weighting: true,
            weight_scope: WeightScope::Batch,
            clip_eps: 0.2,
            kl_beta: 0.0,
            reset_period: Some(100),
            total_steps: 300,
            seed: 0,
            temperature: 1.0,
            top_p: 1.0,
            context_window: 4,
            hidden: 32,
            std_kind: StdKind::Population,
            score_clamp: None,
            inner_epochs: 1,
            gamma: 1.0,
            lam: 1.0,
            value_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::BadConfig(msg.to_string()));
        if self.group_size == 0 || self.groups_per_step == 0 {
            return fail("group-size and groups-per-step must be at least 1");
        }
        if self.algorithm == Algorithm::Pacs
            && self.estimator == Estimator::Rloo
            && self.group_size < 2
        {
            return fail("leave-one-out undefined for singleton groups: group-size must be >= 2");
        }
        if self.algorithm == Algorithm::Grpo && self.group_size < 2 {
            return fail("group-normalized advantages need group-size >= 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail("learning-rate must be finite and non-negative");
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return fail("beta must be positive");
        }
        if self.clip_eps <= 0.0 {
            return fail("clip-eps must be positive");
        }
        if self.kl_beta < 0.0 {
            return fail("kl-beta must be non-negative");
        }
        if self.temperature < 0.0 {
            return fail("temperature must be non-negative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return fail("top-p must lie in (0, 1]");
        }
        if self.reset_period == Some(0) {
            return fail("reset-period must be >= 1, or disabled");
        }
        if self.inner_epochs == 0 {
            return fail("inner-epochs must be >= 1");
        }
        if self.context_window == 0 || self.hidden == 0 {
            return fail("context-window and hidden must be at least 1");
        }
        Ok(())
    }

    pub fn checkpoint_cadence(&self) -> usize {
        (self.total_steps / 10).max(1)
    }
}

/// One step of training dynamics. `loss` and `grad_norm` are absent when
/// the step failed numerically and skipped its update.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    pub mean_response_len: f64,
    pub group_accuracy: f64,
    pub w_correct: f64,
    pub w_incorrect: f64,
    #[serde(default)]
    pub reference_reset: bool,
    #[serde(default)]
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_loss: Option<f64>,
}

/// Full resumable training state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub step: usize,
    pub policy: PolicyCheckpoint,
    pub reference: PolicyCheckpoint,
    pub optimizer: OptimizerState,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<(ValueNet, OptimizerState)>,
}

pub struct Trainer {
    config: TrainerConfig,
    params: PolicyParameters,
    reference: PolicySnapshot,
    opt: OptimizerState,
    value: Option<(ValueNet, OptimizerState)>,
    step_index: usize,
}

const INIT_STREAM: u64 = 0x11;
const STEP_STREAM: u64 = 0x22;

impl Trainer {
    pub fn new(config: TrainerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let arch = config.task.arch(config.context_window, config.hidden);
        let mut rng = derive_rng(config.seed, &[INIT_STREAM]);
        let params = PolicyParameters::init(arch, &mut rng)?;
        let reference = params.snapshot(SnapshotRole::Reference);
        let opt = OptimizerState::new(params.theta().len(), config.learning_rate);
        let value = (config.algorithm == Algorithm::Ppo).then(|| {
            let net = ValueNet::new(config.hidden, config.value_hidden);
            // value scorer learns 10x faster than the actor
            let opt = OptimizerState::new(net.param_count(), config.learning_rate * 10.0);
            (net, opt)
        });
        Ok(Trainer {
            config,
            params,
            reference,
            opt,
            value,
            step_index: 0,
        })
    }

    /// Resume from a checkpoint; continuation is bit-identical to a run
    /// that never stopped, because every step derives its own rng.
    pub fn from_state(config: TrainerConfig, state: TrainingCheckpoint) -> Result<Self, TrainError> {
        config.validate()?;
        let arch = config.task.arch(config.context_window, config.hidden);
        if state.policy.arch != arch {
            return Err(TrainError::CheckpointMismatch);
        }
        let params = PolicyParameters::from_checkpoint(state.policy)?;
        let reference =
            PolicyParameters::from_checkpoint(state.reference)?.snapshot(SnapshotRole::Reference);
        Ok(Trainer {
            config,
            params,
            reference,
            opt: state.optimizer,
            value: state.value,
            step_index: state.step,
        })
    }

    pub fn state(&self) -> TrainingCheckpoint {
        TrainingCheckpoint {
            step: self.step_index,
            policy: self.params.to_checkpoint(),
            reference: self.reference.params().to_checkpoint(),
            optimizer: self.opt.clone(),
            value: self.value.clone(),
        }
    }

    pub fn params(&self) -> &PolicyParameters {
        &self.params
    }

    pub fn reference(&self) -> &PolicySnapshot {
        &self.reference
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn completed_steps(&self) -> usize {
        self.step_index
    }

    fn collect_groups(&self, step: usize) -> Result<Vec<RolloutGroup>, TrainError> {
        let mut rng = derive_rng(self.config.seed, &[STEP_STREAM, step as u64]);
        let mut groups = Vec::with_capacity(self.config.groups_per_step);
        for _ in 0..self.config.groups_per_step {
            let query = self.config.task.sample_query(&mut rng);
            let sampled = sample_sequences(
                &self.params,
                &query,
                self.config.group_size,
                self.config.temperature,
                self.config.top_p,
                &mut rng,
            );
            let mut outputs = Vec::with_capacity(sampled.len());
            let mut rollout = Vec::with_capacity(sampled.len());
            let mut reference = Vec::with_capacity(sampled.len());
            let mut rewards = Vec::with_capacity(sampled.len());
            for (o, lp) in sampled {
                reference.push(sequence_log_prob(self.reference.params(), &query, &o)?);
                rewards.push(self.config.task.verify(&query, &o));
                rollout.push(lp);
                outputs.push(o);
            }
            groups.push(RolloutGroup::new(
                query,
                outputs,
                rollout.clone(),
                reference,
                rollout,
                rewards,
            )?);
        }
        Ok(groups)
    }

    fn step_weights(&self, groups: &[RolloutGroup]) -> (Vec<Option<ClassWeights>>, ClassWeights) {
        let pooled: Vec<_> = groups
            .iter()
            .flat_map(|g| g.rewards().iter().copied())
            .collect();
        let batch_weights = class_weights(&pooled, WeightScope::Batch);
        if !self.config.weighting {
            return (
                vec![None; groups.len()],
                ClassWeights::balanced(WeightScope::Batch),
            );
        }
        let per_group = match self.config.weight_scope {
            WeightScope::Batch => vec![Some(batch_weights); groups.len()],
            WeightScope::Group => groups
                .iter()
                .map(|g| Some(class_weights(g.rewards(), WeightScope::Group)))
                .collect(),
        };
        (per_group, batch_weights)
    }

    fn pacs_settings(&self) -> PacsSettings {
        PacsSettings {
            estimator: self.config.estimator,
            gradient_mode: self.config.gradient_mode,
            beta: self.config.beta,
            epsilon: 1e-8,
            std_kind: self.config.std_kind,
            score_clamp: self.config.score_clamp,
        }
    }

    fn ppo_advantages(&self, group: &RolloutGroup) -> Result<Vec<AdvantageVector>, TrainError> {
        let (net, _) = self.value.as_ref().expect("ppo trainer carries a value net");
        let emb = query_embedding(&self.params, group.query());
        let max_len = self.params.arch().max_len;
        let mut out = Vec::with_capacity(group.group_size());
        for (i, lp) in group.logp_rollout().iter().enumerate() {
            let steps = lp.per_token.len();
            let mut values = Vec::with_capacity(steps + 1);
            for t in 0..steps {
                values.push(net.predict(&emb, t, max_len));
            }
            values.push(0.0); // terminal bootstrap
            let mut rewards = vec![0.0; steps];
            if steps > 0 {
                rewards[steps - 1] = group.rewards()[i].as_f64();
            }
            out.push(gae_advantages(
                &rewards,
                &values,
                self.config.gamma,
                self.config.lam,
            )?);
        }
        Ok(out)
    }

    /// Loss value and policy gradient for one pass over the batch.
    fn loss_and_grad(
        &self,
        groups: &[RolloutGroup],
        weights: &[Option<ClassWeights>],
    ) -> Result<(f64, GradientMap), TrainError> {
        match self.config.algorithm {
            Algorithm::Pacs => {
                let graph = pacs_batch_loss(&self.params, groups, weights, &self.pacs_settings())?;
                let grad = graph.tape.backward(graph.root).map_err(ObjectiveError::from)?;
                Ok((graph.objective, grad))
            }
            Algorithm::Ppo => {
                let mut total = GradientMap::zeros(self.params.theta().len());
                let mut loss = 0.0;
                for group in groups {
                    let adv = self.ppo_advantages(group)?;
                    let graph = ppo_loss(&self.params, group, &adv, self.config.clip_eps)?;
                    let grad = graph.tape.backward(graph.root).map_err(ObjectiveError::from)?;
                    total = total.add(&grad);
                    loss += graph.objective;
                }
                let inv = 1.0 / groups.len() as f64;
                Ok((loss * inv, total.scale(inv)))
            }
            Algorithm::Grpo => {
                let mut total = GradientMap::zeros(self.params.theta().len());
                let mut loss = 0.0;
                for group in groups {
                    let graph = grpo_loss(
                        &self.params,
                        group,
                        self.config.clip_eps,
                        self.config.kl_beta,
                        1e-8,
                        self.config.std_kind,
                    )?;
                    let grad = graph.tape.backward(graph.root).map_err(ObjectiveError::from)?;
                    total = total.add(&grad);
                    loss += graph.objective;
                }
                let inv = 1.0 / groups.len() as f64;
                Ok((loss * inv, total.scale(inv)))
            }
        }
    }

    fn update_value_net(&mut self, groups: &[RolloutGroup]) -> Option<f64> {
        let max_len = self.params.arch().max_len;
        let mut batch: Vec<(Vec<f64>, usize, usize, f64)> = Vec::new();
        for group in groups {
            let emb = query_embedding(&self.params, group.query());
            for (i, lp) in group.logp_rollout().iter().enumerate() {
                let target = group.rewards()[i].as_f64();
                for t in 0..lp.per_token.len() {
                    batch.push((emb.clone(), t, max_len, target));
                }
            }
        }
        if batch.is_empty() {
            return None;
        }
        let (net, opt) = self.value.as_mut()?;
        let (loss, grad) = net.loss_and_grad(&batch);
        match adaptive_moment_step(net.theta_mut(), &grad, opt) {
            Ok(()) => Some(loss),
            Err(_) => None,
        }
    }

    /// Hard-reset the reference to the online policy when `step` hits the
    /// schedule, zeroing the optimizer accumulators. The policy itself is
    /// untouched.
    pub fn maybe_reset_reference(&mut self, step: usize) -> bool {
        match self.config.reset_period {
            Some(period) if step > 0 && step % period == 0 => {
                self.reference = self.params.snapshot(SnapshotRole::Reference);
                self.opt.reset();
                true
            }
            _ => false,
        }
    }

    /// One rollout-update step. Deterministic given (seed, step). Numeric
    /// failures skip the update and come back as a `failed` record.
    pub fn step(&mut self) -> Result<MetricsRecord, TrainError> {
        self.step_index += 1;
        let step = self.step_index;
        let groups = self.collect_groups(step)?;

        let arch = self.params.arch();
        let (mut nats, mut entropy_steps) = (0.0, 0usize);
        let (mut len_total, mut outputs_total, mut correct_total) = (0usize, 0usize, 0.0);
        for g in &groups {
            let (n, s) = crate::policy::entropy_stats(&self.params, g.query(), g.outputs());
            nats += n;
            entropy_steps += s;
            for o in g.outputs() {
                len_total += o.steps(arch);
                outputs_total += 1;
            }
            correct_total += g.rewards().iter().map(|r| r.as_f64()).sum::<f64>();
        }
        let entropy = if entropy_steps == 0 {
            0.0
        } else {
            nats / entropy_steps as f64
        };
        let mean_response_len = len_total as f64 / outputs_total.max(1) as f64;
        let group_accuracy = correct_total / outputs_total.max(1) as f64;

        let (weights, logged_weights) = self.step_weights(&groups);
        let logged_weights = if self.config.weighting {
            logged_weights
        } else {
            ClassWeights::balanced(WeightScope::Batch)
        };

        let mut failed = false;
        let mut loss = None;
        let mut grad_norm = None;
        let mut value_loss = None;
        for _ in 0..self.config.inner_epochs {
            match self.loss_and_grad(&groups, &weights) {
                Ok((step_loss, grad)) => {
                    match adaptive_moment_step(self.params.theta_mut(), &grad, &mut self.opt) {
                        Ok(()) => {
                            loss = Some(step_loss);
                            grad_norm = Some(grad.l2_norm());
                        }
                        Err(StepError::AbortStep) => {
                            failed = true;
                            break;
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                Err(TrainError::Objective(ObjectiveError::Numeric(_))) => {
                    failed = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if !failed && self.config.algorithm == Algorithm::Ppo {
            value_loss = self.update_value_net(&groups);
        }

        let reference_reset = self.maybe_reset_reference(step);
        Ok(MetricsRecord {
            step,
            loss,
            entropy,
            grad_norm,
            mean_response_len,
            group_accuracy,
            w_correct: logged_weights.w_correct,
            w_incorrect: logged_weights.w_incorrect,
            reference_reset,
            failed,
            value_loss,
        })
    }
}
