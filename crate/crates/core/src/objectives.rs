//! Loss constructions and the actor/critic gradient decomposition.
//!
//! The reward-prediction loss treats each output's binary verdict as a
//! label for `sigmoid(psi)` and scores it with cross-entropy. Two gradient
//! modes are built:
//!
//! - `direct`: backward of the group loss as written, samples held fixed.
//! - `full`: a score-function surrogate is added so the pathwise autodiff
//!   gradient is an unbiased estimate of the gradient of the sampled
//!   expectation. Because the leave-one-out score couples every group
//!   member, the surrogate attaches the stop-gradded weighted group-mean
//!   loss to every member's sequence log-probability.
//!
//! The clipped-ratio baselines (token-mean PPO objective and the
//! group-normalized variant with the non-negative k3 KL estimate) share
//! the same tape machinery.

use thiserror::Error;

use crate::autodiff::{log_sigmoid, sigmoid, Context, GradientMap, NodeId, Tape, Trace};
use crate::policy::{
    sequence_log_prob_traced, PolicyError, PolicyParameters, SequenceLogProb, TokenSequence,
    TracedSequenceLogProb,
};
use crate::scores::{
    group_normalize_in, rloo_scores_in, AdvantageVector, Estimator, NormalizeMode, ScoreError,
    StdKind,
};
use crate::tasks::{BinaryReward, Query};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("rollout group lists disagree in length")]
    GroupShape,
    #[error("group is empty")]
    EmptyGroup,
    #[error("output {output} log-prob record has {got} steps, expected {want}")]
    StepMismatch {
        output: usize,
        got: usize,
        want: usize,
    },
    #[error("output {output}: advantage vector has {got} entries, expected {want}")]
    AdvantageShape {
        output: usize,
        got: usize,
        want: usize,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numeric(#[from] crate::autodiff::AutodiffError),
}

/// One query with its sampled outputs, their log-prob records under the
/// current / reference / rollout-time policies, and the binary verdicts.
/// Rollout log-probs are captured at sampling time and never recomputed.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    query: Query,
    outputs: Vec<TokenSequence>,
    logp_current: Vec<SequenceLogProb>,
    logp_reference: Vec<SequenceLogProb>,
    logp_rollout: Vec<SequenceLogProb>,
    rewards: Vec<BinaryReward>,
}

impl RolloutGroup {
    pub fn new(
        query: Query,
        outputs: Vec<TokenSequence>,
        logp_current: Vec<SequenceLogProb>,
        logp_reference: Vec<SequenceLogProb>,
        logp_rollout: Vec<SequenceLogProb>,
        rewards: Vec<BinaryReward>,
    ) -> Result<Self, ObjectiveError> {
        let g = outputs.len();
        if g == 0 {
            return Err(ObjectiveError::EmptyGroup);
        }
        if [
            logp_current.len(),
            logp_reference.len(),
            logp_rollout.len(),
            rewards.len(),
        ]
        .iter()
        .any(|&l| l != g)
        {
            return Err(ObjectiveError::GroupShape);
        }
        Ok(RolloutGroup {
            query,
            outputs,
            logp_current,
            logp_reference,
            logp_rollout,
            rewards,
        })
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn outputs(&self) -> &[TokenSequence] {
        &self.outputs
    }

    pub fn logp_current(&self) -> &[SequenceLogProb] {
        &self.logp_current
    }

    pub fn logp_reference(&self) -> &[SequenceLogProb] {
        &self.logp_reference
    }

    pub fn logp_rollout(&self) -> &[SequenceLogProb] {
        &self.logp_rollout
    }

    pub fn rewards(&self) -> &[BinaryReward] {
        &self.rewards
    }

    pub fn group_size(&self) -> usize {
        self.outputs.len()
    }

    /// Fraction of correct outputs.
    pub fn accuracy(&self) -> f64 {
        self.rewards.iter().map(|r| r.as_f64()).sum::<f64>() / self.group_size() as f64
    }
}

/// Which weights to pool when correcting class imbalance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScope {
    Batch,
    Group,
}

impl WeightScope {
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "batch" => Some(WeightScope::Batch),
            "group" => Some(WeightScope::Group),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            WeightScope::Batch => "batch",
            WeightScope::Group => "group",
        }
    }
}

/// Inverse-frequency class weights, normalized so the sample-weighted mean
/// is one. With a class absent, weighting degenerates to (1, 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub w_correct: f64,
    pub w_incorrect: f64,
    pub scope: WeightScope,
}

impl ClassWeights {
    pub fn balanced(scope: WeightScope) -> Self {
        ClassWeights {
            w_correct: 1.0,
            w_incorrect: 1.0,
            scope,
        }
    }

    pub fn weight_for(&self, reward: BinaryReward) -> f64 {
        if reward.is_correct() {
            self.w_correct
        } else {
            self.w_incorrect
        }
    }
}

/// `w+ = N / (2 n+)`, `w- = N / (2 n-)` over the given pool.
pub fn class_weights(rewards: &[BinaryReward], scope: WeightScope) -> ClassWeights {
    assert!(!rewards.is_empty(), "class weights need a non-empty pool");
    let n = rewards.len() as f64;
    let pos = rewards.iter().filter(|r| r.is_correct()).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return ClassWeights::balanced(scope);
    }
    ClassWeights {
        w_correct: n / (2.0 * pos),
        w_incorrect: n / (2.0 * neg),
        scope,
    }
}

/// Per-sample cross-entropy term
/// `l = R log(sigmoid(psi)) + (1 - R) log(1 - sigmoid(psi))`, always <= 0.
pub fn per_sample_loss(reward: BinaryReward, psi: f64) -> f64 {
    if reward.is_correct() {
        log_sigmoid(psi)
    } else {
        log_sigmoid(-psi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    Direct,
    Full,
}

impl GradientMode {
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "direct" => Some(GradientMode::Direct),
            "full" => Some(GradientMode::Full),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            GradientMode::Direct => "direct",
            GradientMode::Full => "full",
        }
    }
}

/// Knobs of the reward-prediction objective.
#[derive(Clone, Debug)]
pub struct PacsSettings {
    pub estimator: Estimator,
    pub gradient_mode: GradientMode,
    pub beta: f64,
    /// Epsilon guard for the mean-std estimator variant.
    pub epsilon: f64,
    pub std_kind: StdKind,
    /// Optional symmetric clamp on psi, off by default. The proxy grows
    /// with output length and can saturate the sigmoid between reference
    /// resets; the clamp is an escape hatch for long-output configs.
    pub score_clamp: Option<f64>,
}

impl Default for PacsSettings {
    fn default() -> Self {
        PacsSettings {
            estimator: Estimator::Rloo,
            gradient_mode: GradientMode::Full,
            beta: 1.0,
            epsilon: 1e-8,
            std_kind: StdKind::Population,
            score_clamp: None,
        }
    }
}

/// A loss rooted on its own tape, ready for `backward(root)`.
pub struct LossGraph {
    pub tape: Tape,
    pub root: NodeId,
    /// Value of the objective as written (for the reward-prediction loss:
    /// the weighted BCE group loss), independent of any surrogate terms
    /// folded into `root`.
    pub objective: f64,
}

fn traced_group_log_probs(
    tape: &mut Tape,
    theta_nodes: &[NodeId],
    params: &PolicyParameters,
    group: &RolloutGroup,
) -> Result<Vec<TracedSequenceLogProb>, ObjectiveError> {
    let mut out = Vec::with_capacity(group.group_size());
    for (i, o) in group.outputs().iter().enumerate() {
        let lp = sequence_log_prob_traced(tape, theta_nodes, params.arch(), group.query(), o)?;
        let want = group.logp_reference()[i].per_token.len();
        if lp.per_token.len() != want {
            return Err(ObjectiveError::StepMismatch {
                output: i,
                got: lp.per_token.len(),
                want,
            });
        }
        out.push(lp);
    }
    Ok(out)
}

/// Traced psi scores for one group from its traced current log-probs.
fn traced_scores(
    tape: &mut Tape,
    theta_nodes: &[NodeId],
    group: &RolloutGroup,
    lps: &[TracedSequenceLogProb],
    settings: &PacsSettings,
) -> Result<Vec<NodeId>, ObjectiveError> {
    let mut ctx = Trace::new(tape, theta_nodes);
    let rhat: Vec<NodeId> = lps
        .iter()
        .zip(group.logp_reference())
        .map(|(lp, rf)| {
            let rc = ctx.constant(rf.total);
            let diff = ctx.sub(lp.total, rc);
            ctx.scale(diff, settings.beta)
        })
        .collect();
    let mut psi = match settings.estimator {
        Estimator::Rloo => rloo_scores_in(&mut ctx, &rhat)?,
        Estimator::Grpo => group_normalize_in(
            &mut ctx,
            &rhat,
            NormalizeMode::MeanStd,
            settings.epsilon,
            settings.std_kind,
        )?,
        Estimator::DrGrpo => group_normalize_in(
            &mut ctx,
            &rhat,
            NormalizeMode::MeanOnly,
            settings.epsilon,
            settings.std_kind,
        )?,
    };
    if let Some(max) = settings.score_clamp {
        crate::scores::clamp_scores_in(&mut ctx, &mut psi, max);
    }
    Ok(psi)
}

struct GroupLossNodes {
    direct: NodeId,
    full: NodeId,
}

fn pacs_group_nodes(
    tape: &mut Tape,
    theta_nodes: &[NodeId],
    params: &PolicyParameters,
    group: &RolloutGroup,
    weights: Option<&ClassWeights>,
    settings: &PacsSettings,
) -> Result<GroupLossNodes, ObjectiveError> {
    if settings.estimator == Estimator::Rloo && group.group_size() < 2 {
        return Err(ObjectiveError::Score(ScoreError::GroupTooSmall {
            got: group.group_size(),
        }));
    }
    let lps = traced_group_log_probs(tape, theta_nodes, params, group)?;
    let psi = traced_scores(tape, theta_nodes, group, &lps, settings)?;

    let g = group.group_size() as f64;
    let weighted: Vec<NodeId> = psi
        .iter()
        .zip(group.rewards())
        .map(|(&p, &r)| {
            let l = if r.is_correct() {
                tape.log_sigmoid(p)
            } else {
                let np = tape.neg(p);
                tape.log_sigmoid(np)
            };
            match weights {
                Some(w) => tape.scale(l, w.weight_for(r)),
                None => l,
            }
        })
        .collect();
    let total = tape.sum(&weighted);
    let mean_weighted = tape.scale(total, 1.0 / g);
    let direct = tape.neg(mean_weighted);

    let totals: Vec<NodeId> = lps.iter().map(|lp| lp.total).collect();
    let sum_logp = tape.sum(&totals);
    let frozen_mean = tape.stop_grad(mean_weighted);
    let score_term = tape.mul(sum_logp, frozen_mean);
    let inner = tape.add(score_term, mean_weighted);
    let full = tape.neg(inner);

    Ok(GroupLossNodes { direct, full })
}

/// Reward-prediction loss over a batch of rollout groups (their mean).
/// `weights` is parallel to `groups`; pass the same pooled weights for
/// batch scope or per-group weights for group scope.
pub fn pacs_batch_loss(
    params: &PolicyParameters,
    groups: &[RolloutGroup],
    weights: &[Option<ClassWeights>],
    settings: &PacsSettings,
) -> Result<LossGraph, ObjectiveError> {
    assert_eq!(groups.len(), weights.len(), "weights must parallel groups");
    if groups.is_empty() {
        return Err(ObjectiveError::EmptyGroup);
    }
    let mut tape = Tape::new();
    let theta_nodes = tape.bind_params(params.theta());
    let mut direct_nodes = Vec::with_capacity(groups.len());
    let mut full_nodes = Vec::with_capacity(groups.len());
    for (group, w) in groups.iter().zip(weights) {
        let nodes = pacs_group_nodes(&mut tape, &theta_nodes, params, group, w.as_ref(), settings)?;
        direct_nodes.push(nodes.direct);
        full_nodes.push(nodes.full);
    }
    let inv = 1.0 / groups.len() as f64;
    let direct_sum = tape.sum(&direct_nodes);
    let direct_mean = tape.scale(direct_sum, inv);
    let objective = tape.value(direct_mean);
    let root = match settings.gradient_mode {
        GradientMode::Direct => direct_mean,
        GradientMode::Full => {
            let full_sum = tape.sum(&full_nodes);
            tape.scale(full_sum, inv)
        }
    };
    Ok(LossGraph {
        tape,
        root,
        objective,
    })
}

/// Single-group reward-prediction loss.
pub fn pacs_loss(
    params: &PolicyParameters,
    group: &RolloutGroup,
    weights: Option<&ClassWeights>,
    settings: &PacsSettings,
) -> Result<LossGraph, ObjectiveError> {
    pacs_batch_loss(
        params,
        std::slice::from_ref(group),
        &[weights.copied()],
        settings,
    )
}

/// The two components of the loss gradient plus their sum, each computed
/// by its own backward pass:
///
/// - actor: `-mean_i l_i * grad log pi(o_i|q)` (policy gradient weighted by
///   the per-sample cross-entropy)
/// - critic: `-mean_i (R_i - sigmoid(psi_i)) * grad psi_i` (prediction
///   residual times the score gradient)
///
/// These are gradients of the loss; descent moves against `total`.
#[derive(Clone, Debug)]
pub struct GradientDecomposition {
    pub actor: GradientMap,
    pub critic: GradientMap,
    pub total: GradientMap,
}

/// Test hook: lets the verification suites force the critic residual or
/// flip its sign to prove the decomposition check has teeth.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionHook {
    pub critic_sign: f64,
    pub forced_residual: Option<f64>,
}

impl Default for DecompositionHook {
    fn default() -> Self {
        DecompositionHook {
            critic_sign: 1.0,
            forced_residual: None,
        }
    }
}

pub fn pacs_gradient_terms(
    params: &PolicyParameters,
    group: &RolloutGroup,
    estimator: Estimator,
    beta: f64,
) -> Result<GradientDecomposition, ObjectiveError> {
    pacs_gradient_terms_hooked(params, group, estimator, beta, DecompositionHook::default())
}

pub fn pacs_gradient_terms_hooked(
    params: &PolicyParameters,
    group: &RolloutGroup,
    estimator: Estimator,
    beta: f64,
    hook: DecompositionHook,
) -> Result<GradientDecomposition, ObjectiveError> {
    let settings = PacsSettings {
        estimator,
        beta,
        ..PacsSettings::default()
    };
    if settings.estimator == Estimator::Rloo && group.group_size() < 2 {
        return Err(ObjectiveError::Score(ScoreError::GroupTooSmall {
            got: group.group_size(),
        }));
    }
    let mut tape = Tape::new();
    let theta_nodes = tape.bind_params(params.theta());
    let lps = traced_group_log_probs(&mut tape, &theta_nodes, params, group)?;
    let psi = traced_scores(&mut tape, &theta_nodes, group, &lps, &settings)?;

    let g = group.group_size() as f64;
    let mut actor_terms = Vec::with_capacity(group.group_size());
    let mut critic_terms = Vec::with_capacity(group.group_size());
    let mut total_terms = Vec::with_capacity(group.group_size());
    for (i, (&psi_i, &r)) in psi.iter().zip(group.rewards()).enumerate() {
        let psi_val = tape.value(psi_i);
        let l_val = per_sample_loss(r, psi_val);
        let residual = hook
            .forced_residual
            .unwrap_or_else(|| r.as_f64() - sigmoid(psi_val))
            * hook.critic_sign;

        let actor_i = tape.scale(lps[i].total, l_val);
        actor_terms.push(actor_i);
        let critic_i = tape.scale(psi_i, residual);
        critic_terms.push(critic_i);

        // Per-sample full surrogate: log pi_i * sg(l_i) + l_i.
        let l_node = if r.is_correct() {
            tape.log_sigmoid(psi_i)
        } else {
            let np = tape.neg(psi_i);
            tape.log_sigmoid(np)
        };
        let weighted_lp = tape.scale(lps[i].total, l_val);
        let total_i = tape.add(weighted_lp, l_node);
        total_terms.push(total_i);
    }

    let root_of = |tape: &mut Tape, terms: &[NodeId]| {
        let s = tape.sum(terms);
        let m = tape.scale(s, 1.0 / g);
        tape.neg(m)
    };
    let actor_root = root_of(&mut tape, &actor_terms);
    let critic_root = root_of(&mut tape, &critic_terms);
    let total_root = root_of(&mut tape, &total_terms);

    let actor = tape.backward(actor_root)?;
    let critic = tape.backward(critic_root)?;
    let total = tape.backward(total_root)?;
    Ok(GradientDecomposition {
        actor,
        critic,
        total,
    })
}

/// Non-negative per-token KL estimate `r - log r - 1` with
/// `r = exp(logp_reference - logp_current)`.
pub fn kl_estimate_k3(logp_current: f64, logp_reference: f64) -> f64 {
    let log_r = logp_reference - logp_current;
    log_r.exp() - log_r - 1.0
}

fn clipped_token_objective(
    tape: &mut Tape,
    cur: NodeId,
    rollout_lp: f64,
    advantage: f64,
    clip_eps: f64,
) -> NodeId {
    let mut ctx = Trace::new(tape, &[]);
    let old = ctx.constant(rollout_lp);
    let diff = ctx.sub(cur, old);
    let rho = ctx.exp(diff);
    let unclipped = ctx.scale(rho, advantage);
    let clipped_rho = ctx.clamp_const(rho, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = ctx.scale(clipped_rho, advantage);
    ctx.min_by_value(unclipped, clipped)
}

/// Token-mean clipped-ratio loss:
/// `-(1/G) sum_i (1/|o_i|) sum_t min(rho A, clip(rho) A)` with the ratio
/// against the rollout-time policy.
pub fn ppo_loss(
    params: &PolicyParameters,
    group: &RolloutGroup,
    advantages: &[AdvantageVector],
    clip_eps: f64,
) -> Result<LossGraph, ObjectiveError> {
    assert!(clip_eps > 0.0, "clip epsilon must be positive");
    if advantages.len() != group.group_size() {
        return Err(ObjectiveError::GroupShape);
    }
    let mut tape = Tape::new();
    let theta_nodes = tape.bind_params(params.theta());
    let lps = traced_group_log_probs(&mut tape, &theta_nodes, params, group)?;

    let mut per_output = Vec::with_capacity(group.group_size());
    for (i, lp) in lps.iter().enumerate() {
        let steps = lp.per_token.len();
        let rollout = &group.logp_rollout()[i];
        if rollout.per_token.len() != steps {
            return Err(ObjectiveError::StepMismatch {
                output: i,
                got: rollout.per_token.len(),
                want: steps,
            });
        }
        if advantages[i].values.len() != steps {
            return Err(ObjectiveError::AdvantageShape {
                output: i,
                got: advantages[i].values.len(),
                want: steps,
            });
        }
        let terms: Vec<NodeId> = (0..steps)
            .map(|t| {
                clipped_token_objective(
                    &mut tape,
                    lp.per_token[t],
                    rollout.per_token[t],
                    advantages[i].values[t],
                    clip_eps,
                )
            })
            .collect();
        let s = tape.sum(&terms);
        per_output.push(tape.scale(s, 1.0 / steps.max(1) as f64));
    }
    let total = tape.sum(&per_output);
    let mean = tape.scale(total, 1.0 / group.group_size() as f64);
    let root = tape.neg(mean);
    let objective = tape.value(root);
    Ok(LossGraph {
        tape,
        root,
        objective,
    })
}

/// Clipped-ratio loss with group-normalized reward advantages broadcast
/// per token, minus `kl_beta` times the token-mean k3 KL penalty against
/// the reference policy. `kl_beta = 0` drops the penalty entirely.
pub fn grpo_loss(
    params: &PolicyParameters,
    group: &RolloutGroup,
    clip_eps: f64,
    kl_beta: f64,
    epsilon: f64,
    std_kind: StdKind,
) -> Result<LossGraph, ObjectiveError> {
    assert!(clip_eps > 0.0, "clip epsilon must be positive");
    if group.group_size() < 2 {
        return Err(ObjectiveError::Score(ScoreError::GroupTooSmall {
            got: group.group_size(),
        }));
    }
    let raw: Vec<f64> = group.rewards().iter().map(|r| r.as_f64()).collect();
    let advantages = {
        let mut ctx = crate::autodiff::Values::new(&[]);
        group_normalize_in(&mut ctx, &raw, NormalizeMode::MeanStd, epsilon, std_kind)?
    };

    let mut tape = Tape::new();
    let theta_nodes = tape.bind_params(params.theta());
    let lps = traced_group_log_probs(&mut tape, &theta_nodes, params, group)?;

    let mut per_output = Vec::with_capacity(group.group_size());
    for (i, lp) in lps.iter().enumerate() {
        let steps = lp.per_token.len();
        let rollout = &group.logp_rollout()[i];
        if rollout.per_token.len() != steps {
            return Err(ObjectiveError::StepMismatch {
                output: i,
                got: rollout.per_token.len(),
                want: steps,
            });
        }
        let reference = &group.logp_reference()[i];
        let terms: Vec<NodeId> = (0..steps)
            .map(|t| {
                let clipped = clipped_token_objective(
                    &mut tape,
                    lp.per_token[t],
                    rollout.per_token[t],
                    advantages[i],
                    clip_eps,
                );
                if kl_beta == 0.0 {
                    clipped
                } else {
                    // k3 = r - log r - 1, r = pi_ref / pi_theta
                    let refc = tape.constant(reference.per_token[t]);
                    let log_r = tape.sub(refc, lp.per_token[t]);
                    let r = tape.exp(log_r);
                    let r_minus = tape.sub(r, log_r);
                    let one = tape.constant(1.0);
                    let k3 = tape.sub(r_minus, one);
                    let penalty = tape.scale(k3, kl_beta);
                    tape.sub(clipped, penalty)
                }
            })
            .collect();
        let s = tape.sum(&terms);
        per_output.push(tape.scale(s, 1.0 / steps.max(1) as f64));
    }
    let total = tape.sum(&per_output);
    let mean = tape.scale(total, 1.0 / group.group_size() as f64);
    let root = tape.neg(mean);
    let objective = tape.value(root);
    Ok(LossGraph {
        tape,
        root,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::policy::{sequence_log_prob, PolicyArch};
    use crate::tasks::Query;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> PolicyArch {
        PolicyArch {
            vocab: 3,
            query_tokens: 2,
            context_window: 2,
            hidden: 4,
            max_len: 3,
            terminal: Some(2),
        }
    }

    fn params(seed: u64) -> PolicyParameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = arch();
        let theta: Vec<f64> = (0..a.param_count())
            .map(|_| rng.gen_range(-0.4..0.4))
            .collect();
        PolicyParameters::from_theta(a, theta).unwrap()
    }

    fn group_for(
        params: &PolicyParameters,
        reference: &PolicyParameters,
        outputs: Vec<TokenSequence>,
        rewards: Vec<BinaryReward>,
    ) -> RolloutGroup {
        let q = Query::new("test", 0, vec![3]);
        let cur: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(params, &q, o).unwrap())
            .collect();
        let refp: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(reference, &q, o).unwrap())
            .collect();
        RolloutGroup::new(q, outputs, cur.clone(), refp, cur, rewards).unwrap()
    }

    #[test]
    fn per_sample_loss_examples() {
        assert!((per_sample_loss(BinaryReward::correct(), 0.0) + std::f64::consts::LN_2).abs()
            < 1e-15);
        // perfect prediction limit for an incorrect sample
        assert_eq!(per_sample_loss(BinaryReward::incorrect(), -1.0e9), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let psi: f64 = rng.gen_range(-8.0..8.0);
            let a = per_sample_loss(BinaryReward::correct(), psi);
            let b = per_sample_loss(BinaryReward::incorrect(), -psi);
            assert_eq!(a, b);
            assert!(a <= 0.0);
        }
    }

    #[test]
    fn class_weight_examples() {
        let pos = BinaryReward::correct();
        let neg = BinaryReward::incorrect();
        let balanced = class_weights(&[pos, neg, pos, neg], WeightScope::Batch);
        assert_eq!((balanced.w_correct, balanced.w_incorrect), (1.0, 1.0));

        let skewed = class_weights(
            &[pos, pos, neg, neg, neg, neg, neg, neg],
            WeightScope::Batch,
        );
        assert!((skewed.w_correct - 2.0).abs() < 1e-12);
        assert!((skewed.w_incorrect - 8.0 / 12.0).abs() < 1e-12);
        // sample-weighted mean is one
        let mean = (2.0 * skewed.w_correct + 6.0 * skewed.w_incorrect) / 8.0;
        assert!((mean - 1.0).abs() < 1e-12);

        let degenerate = class_weights(&[neg, neg, neg], WeightScope::Group);
        assert_eq!((degenerate.w_correct, degenerate.w_incorrect), (1.0, 1.0));
    }

    #[test]
    fn matched_reference_gives_ln2_loss() {
        // With pi_theta == pi_ref every proxy is zero, so every psi is zero
        // and the unweighted loss on rewards (1, 0) is ln 2.
        let p = params(5);
        let outputs = vec![
            TokenSequence::new(vec![0, 1], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &p, outputs, rewards);
        let loss = pacs_loss(&p, &g, None, &PacsSettings::default()).unwrap();
        assert!((loss.objective - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn balanced_weights_equal_unweighted_exactly() {
        let p = params(6);
        let refp = params(7);
        let outputs = vec![
            TokenSequence::new(vec![0, 1], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &refp, outputs, rewards.clone());
        let settings = PacsSettings::default();
        let w = class_weights(&rewards, WeightScope::Group);
        let weighted = pacs_loss(&p, &g, Some(&w), &settings).unwrap();
        let plain = pacs_loss(&p, &g, None, &settings).unwrap();
        assert_eq!(weighted.objective, plain.objective);
    }

    #[test]
    fn pacs_loss_is_nonnegative() {
        let p = params(8);
        let refp = params(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let outputs = vec![
                TokenSequence::new(vec![rng.gen_range(0..2)], true),
                TokenSequence::new(vec![rng.gen_range(0..2), rng.gen_range(0..2)], true),
            ];
            let rewards = vec![
                if rng.gen() {
                    BinaryReward::correct()
                } else {
                    BinaryReward::incorrect()
                },
                if rng.gen() {
                    BinaryReward::correct()
                } else {
                    BinaryReward::incorrect()
                },
            ];
            let g = group_for(&p, &refp, outputs, rewards);
            let loss = pacs_loss(&p, &g, None, &PacsSettings::default()).unwrap();
            assert!(loss.objective >= 0.0);
        }
    }

    #[test]
    fn direct_mode_gradient_matches_finite_differences() {
        let p = params(11);
        let refp = params(12);
        let outputs = vec![
            TokenSequence::new(vec![0, 1], true),
            TokenSequence::new(vec![1, 0], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &refp, outputs.clone(), rewards.clone());
        let settings = PacsSettings {
            gradient_mode: GradientMode::Direct,
            ..PacsSettings::default()
        };
        let loss = pacs_loss(&p, &g, None, &settings).unwrap();
        let grad = loss.tape.backward(loss.root).unwrap();

        let arch = p.arch().clone();
        let fd = finite_diff_gradient(
            |theta| {
                let moved =
                    PolicyParameters::from_theta(arch.clone(), theta.to_vec()).unwrap();
                let g2 = group_for(&moved, &refp, outputs.clone(), rewards.clone());
                pacs_loss(&moved, &g2, None, &settings).unwrap().objective
            },
            p.theta(),
            1e-5,
        )
        .unwrap();
        for i in 0..fd.len() {
            let denom = fd.get(i).abs().max(1e-6);
            assert!(
                (fd.get(i) - grad.get(i)).abs() / denom < 1e-5,
                "coord {i}: fd {} vs ad {}",
                fd.get(i),
                grad.get(i)
            );
        }
    }

    #[test]
    fn decomposition_sums_to_total() {
        let p = params(13);
        let refp = params(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..25 {
            let outputs: Vec<TokenSequence> = (0..3)
                .map(|_| TokenSequence::new(vec![rng.gen_range(0..2)], rng.gen()))
                .collect();
            let rewards: Vec<BinaryReward> = (0..3)
                .map(|_| {
                    if rng.gen() {
                        BinaryReward::correct()
                    } else {
                        BinaryReward::incorrect()
                    }
                })
                .collect();
            let g = group_for(&p, &refp, outputs, rewards);
            let d = pacs_gradient_terms(&p, &g, Estimator::Rloo, 1.0).unwrap();
            let sum = d.actor.add(&d.critic);
            assert!(sum.max_abs_diff(&d.total) < 1e-10);
        }
    }

    #[test]
    fn critic_vanishes_under_forced_zero_residual() {
        let p = params(16);
        let refp = params(17);
        let outputs = vec![
            TokenSequence::new(vec![0], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &refp, outputs, rewards);
        let hook = DecompositionHook {
            forced_residual: Some(0.0),
            ..DecompositionHook::default()
        };
        let d = pacs_gradient_terms_hooked(&p, &g, Estimator::Rloo, 1.0, hook).unwrap();
        assert_eq!(d.critic.l2_norm(), 0.0);
        // the hook touches only the critic route
        let plain = pacs_gradient_terms(&p, &g, Estimator::Rloo, 1.0).unwrap();
        assert_eq!(d.actor.max_abs_diff(&plain.actor), 0.0);
        assert_eq!(d.total.max_abs_diff(&plain.total), 0.0);
    }

    #[test]
    fn critic_residual_half_at_zero_psi() {
        // R = 1, psi = 0: the critic residual is 0.5 and the critic term is
        // -0.5 * grad psi averaged. Check against a direct construction.
        let p = params(18);
        let outputs = vec![
            TokenSequence::new(vec![0], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::correct()];
        let g = group_for(&p, &p, outputs, rewards); // matched reference: psi = 0
        let d = pacs_gradient_terms(&p, &g, Estimator::Rloo, 1.0).unwrap();
        let forced = pacs_gradient_terms_hooked(
            &p,
            &g,
            Estimator::Rloo,
            1.0,
            DecompositionHook {
                forced_residual: Some(0.5),
                ..DecompositionHook::default()
            },
        )
        .unwrap();
        assert!(d.critic.max_abs_diff(&forced.critic) < 1e-12);
    }

    #[test]
    fn k3_examples_and_nonnegativity() {
        assert_eq!(kl_estimate_k3(-1.0, -1.0), 0.0);
        assert!((kl_estimate_k3(-2.0, -2.0 + std::f64::consts::LN_2) - 0.3068528194400547)
            .abs()
            < 1e-12);
        assert!(
            (kl_estimate_k3(-2.0, -2.0 - std::f64::consts::LN_2) - 0.19314718055994531).abs()
                < 1e-12
        );
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let a = rng.gen_range(-10.0..0.0);
            let b = rng.gen_range(-10.0..0.0);
            assert!(kl_estimate_k3(a, b) >= 0.0);
        }
    }

    fn shift_rollout(group: &RolloutGroup, delta: f64) -> RolloutGroup {
        // Rollout log-probs shifted so that rho = exp(-delta per token).
        let shifted: Vec<SequenceLogProb> = group
            .logp_rollout()
            .iter()
            .map(|lp| {
                let per_token: Vec<f64> = lp.per_token.iter().map(|v| v + delta).collect();
                let total = per_token.iter().sum();
                SequenceLogProb { per_token, total }
            })
            .collect();
        RolloutGroup::new(
            group.query().clone(),
            group.outputs().to_vec(),
            group.logp_current().to_vec(),
            group.logp_reference().to_vec(),
            shifted,
            group.rewards().to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn ppo_on_policy_objective_is_mean_advantage() {
        let p = params(20);
        let outputs = vec![TokenSequence::new(vec![0], true)]; // 2 steps: token + terminal
        let rewards = vec![BinaryReward::correct()];
        let g = group_for(&p, &p, outputs, rewards);
        let adv = vec![AdvantageVector {
            values: vec![0.7, -0.3],
            gamma: 1.0,
            lam: 1.0,
        }];
        let loss = ppo_loss(&p, &g, &adv, 0.2).unwrap();
        // rho = 1 everywhere: objective term is A_t, token-mean 0.2, loss -0.2
        assert!((loss.objective + 0.2).abs() < 1e-12);
    }

    #[test]
    fn ppo_clip_arithmetic() {
        let p = params(21);
        let outputs = vec![TokenSequence::new(vec![], true)]; // single terminal step
        let rewards = vec![BinaryReward::correct()];
        let base = group_for(&p, &p, outputs, rewards);

        // rho = 1.5, A = +1, eps = 0.2 -> min(1.5, 1.2) = 1.2
        let g = shift_rollout(&base, -(1.5f64.ln()));
        let adv = vec![AdvantageVector {
            values: vec![1.0],
            gamma: 1.0,
            lam: 1.0,
        }];
        let loss = ppo_loss(&p, &g, &adv, 0.2).unwrap();
        assert!((loss.objective + 1.2).abs() < 1e-12);

        // rho = 0.5, A = -1, eps = 0.2 -> min(-0.5, -0.8) = -0.8
        let g = shift_rollout(&base, -(0.5f64.ln()));
        let adv = vec![AdvantageVector {
            values: vec![-1.0],
            gamma: 1.0,
            lam: 1.0,
        }];
        let loss = ppo_loss(&p, &g, &adv, 0.2).unwrap();
        assert!((loss.objective - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ppo_invariant_to_clip_eps_when_ratios_interior() {
        let p = params(22);
        let outputs = vec![TokenSequence::new(vec![0, 1], true)];
        let rewards = vec![BinaryReward::correct()];
        let base = group_for(&p, &p, outputs, rewards);
        let g = shift_rollout(&base, -0.01); // rho = e^0.01 per token
        let adv = vec![AdvantageVector {
            values: vec![0.4, -1.1, 0.2],
            gamma: 1.0,
            lam: 1.0,
        }];
        let a = ppo_loss(&p, &g, &adv, 0.1).unwrap();
        let b = ppo_loss(&p, &g, &adv, 0.3).unwrap();
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn grpo_degenerate_group_contributes_zero() {
        let p = params(23);
        let outputs = vec![
            TokenSequence::new(vec![0], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::correct()];
        let g = group_for(&p, &p, outputs, rewards);
        let loss = grpo_loss(&p, &g, 0.2, 0.0, 1e-8, StdKind::Population).unwrap();
        assert_eq!(loss.objective, 0.0);
    }

    #[test]
    fn grpo_zero_mean_advantages_on_policy() {
        let p = params(24);
        let outputs = vec![
            TokenSequence::new(vec![0], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &p, outputs, rewards);
        let loss = grpo_loss(&p, &g, 0.2, 0.0, 1e-8, StdKind::Population).unwrap();
        assert!(loss.objective.abs() < 1e-12);
    }

    #[test]
    fn grpo_kl_penalty_vanishes_at_matched_reference() {
        let p = params(25);
        let outputs = vec![
            TokenSequence::new(vec![0], true),
            TokenSequence::new(vec![1], true),
        ];
        let rewards = vec![BinaryReward::correct(), BinaryReward::incorrect()];
        let g = group_for(&p, &p, outputs, rewards);
        let without = grpo_loss(&p, &g, 0.2, 0.0, 1e-8, StdKind::Population).unwrap();
        let with = grpo_loss(&p, &g, 0.2, 0.7, 1e-8, StdKind::Population).unwrap();
        assert!((without.objective - with.objective).abs() < 1e-12);
    }
}
