//! Tiny autoregressive categorical policy over a fixed context window.
//!
//! The model embeds the last `W` tokens of the conditioning stream (query
//! prefix followed by generated tokens) plus a pooled query embedding,
//! feeds the concatenation through one tanh hidden layer, and scores the
//! output vocabulary with a linear softmax head. Small enough that every
//! output distribution can be enumerated exactly, while keeping the
//! autoregressive factorization `pi(o|q) = prod_t pi(o_t | q, o_<t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Context, NodeId, Tape, Trace, Values};
use crate::tasks::Query;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence occupies {steps} generation steps, max is {max}")]
    TooLong { steps: usize, max: usize },
    #[error("enumeration space of {space} sequences exceeds the {limit} cap")]
    Capacity { space: u64, limit: u64 },
    #[error("parameter vector has {got} entries, architecture needs {want}")]
    ParamCountMismatch { got: usize, want: usize },
    #[error("terminal token id {terminal} outside vocabulary of size {vocab}")]
    BadTerminal { terminal: u32, vocab: usize },
}

/// Architecture descriptor: shapes only, no weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    /// Output vocabulary size, including the terminal token when present.
    pub vocab: usize,
    /// Number of reserved query-prefix token ids (never generated).
    pub query_tokens: usize,
    /// Context window width `W`.
    pub context_window: usize,
    /// Embedding dimension and hidden width `H`.
    pub hidden: usize,
    /// Maximum generation steps per output, terminal emission included.
    pub max_len: usize,
    /// Terminal token id, if the vocabulary has one.
    pub terminal: Option<u32>,
}

impl PolicyArch {
    /// Rows of the embedding table: outputs, query tokens, one pad row.
    pub fn embedding_rows(&self) -> usize {
        self.vocab + self.query_tokens + 1
    }

    fn pad_row(&self) -> usize {
        self.vocab + self.query_tokens
    }

    /// Width of the hidden layer input: `W` window slots plus the query slot.
    pub fn input_width(&self) -> usize {
        (self.context_window + 1) * self.hidden
    }

    pub fn param_count(&self) -> usize {
        let (r, h, v) = (self.embedding_rows(), self.hidden, self.vocab);
        r * h + h * self.input_width() + h + v * h + v
    }

    fn emb_at(&self, row: usize, dim: usize) -> usize {
        row * self.hidden + dim
    }

    fn hidden_w_at(&self, unit: usize, input: usize) -> usize {
        self.embedding_rows() * self.hidden + unit * self.input_width() + input
    }

    fn hidden_b_at(&self, unit: usize) -> usize {
        self.embedding_rows() * self.hidden + self.hidden * self.input_width() + unit
    }

    fn head_w_at(&self, token: usize, unit: usize) -> usize {
        self.hidden_b_at(self.hidden) + token * self.hidden + unit
    }

    fn head_b_at(&self, token: usize) -> usize {
        self.hidden_b_at(self.hidden) + self.vocab * self.hidden + token
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if let Some(t) = self.terminal {
            if t as usize >= self.vocab {
                return Err(PolicyError::BadTerminal {
                    terminal: t,
                    vocab: self.vocab,
                });
            }
        }
        Ok(())
    }

    /// Token ids the policy may emit, excluding the terminal.
    pub fn content_tokens(&self) -> Vec<u32> {
        (0..self.vocab as u32)
            .filter(|&t| Some(t) != self.terminal)
            .collect()
    }
}

/// Flat parameter store for one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    arch: PolicyArch,
    theta: Vec<f64>,
}

/// Role a frozen copy plays in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotRole {
    Reference,
    Rollout,
}

/// Immutable copy of a policy taken at a point in time.
#[derive(Clone, Debug)]
pub struct PolicySnapshot {
    params: PolicyParameters,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParameters {
        &self.params
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }
}

/// Serialized form: architecture plus the flat parameter list. JSON keeps
/// f64 round-trips bit-exact for finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub arch: PolicyArch,
    pub theta: Vec<f64>,
}

impl PolicyParameters {
    /// Small uniform noise scaled 0.01 everywhere except the softmax head,
    /// which starts at zero so the initial policy is exactly uniform.
    pub fn init<R: Rng>(arch: PolicyArch, rng: &mut R) -> Result<Self, PolicyError> {
        arch.validate()?;
        let head_start = arch.head_w_at(0, 0);
        let theta = (0..arch.param_count())
            .map(|i| {
                if i < head_start {
                    rng.gen_range(-0.01..0.01)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(PolicyParameters { arch, theta })
    }

    pub fn from_theta(arch: PolicyArch, theta: Vec<f64>) -> Result<Self, PolicyError> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(PolicyError::ParamCountMismatch {
                got: theta.len(),
                want: arch.param_count(),
            });
        }
        Ok(PolicyParameters { arch, theta })
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    /// Deep, frozen copy tagged with its role.
    pub fn snapshot(&self, role: SnapshotRole) -> PolicySnapshot {
        PolicySnapshot {
            params: self.clone(),
            role,
        }
    }

    pub fn to_checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            arch: self.arch.clone(),
            theta: self.theta.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: PolicyCheckpoint) -> Result<Self, PolicyError> {
        PolicyParameters::from_theta(ckpt.arch, ckpt.theta)
    }
}

/// One generated output: content token ids (terminal excluded) plus a flag
/// recording whether generation ended with the terminal token. Keeping the
/// terminal out of `tokens` makes "terminal only in final position" hold by
/// construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    terminated: bool,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, terminated: bool) -> Self {
        TokenSequence { tokens, terminated }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Generation steps this output occupied under `arch`, counting the
    /// terminal emission when there is one.
    pub fn steps(&self, arch: &PolicyArch) -> usize {
        self.tokens.len() + usize::from(self.terminated && arch.terminal.is_some())
    }
}

/// Per-token conditional log-probabilities and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLogProb {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl SequenceLogProb {
    fn from_tokens(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        SequenceLogProb { per_token, total }
    }

    pub fn steps(&self) -> usize {
        self.per_token.len()
    }
}

/// Tape-resident variant of [`SequenceLogProb`] rooted in parameter leaves.
#[derive(Clone, Debug)]
pub struct TracedSequenceLogProb {
    pub per_token: Vec<NodeId>,
    pub total: NodeId,
}

fn check_tokens(arch: &PolicyArch, o: &TokenSequence) -> Result<(), PolicyError> {
    for &t in o.tokens() {
        if t as usize >= arch.vocab || Some(t) == arch.terminal {
            return Err(PolicyError::TokenOutOfRange {
                token: t,
                vocab: arch.vocab,
            });
        }
    }
    let steps = o.steps(arch);
    if steps > arch.max_len {
        return Err(PolicyError::TooLong {
            steps,
            max: arch.max_len,
        });
    }
    Ok(())
}

/// Logits for the next token given `prefix ++ generated`.
fn next_token_logits<C: Context>(
    ctx: &mut C,
    arch: &PolicyArch,
    prefix: &[u32],
    generated: &[u32],
) -> Vec<C::V> {
    let (w, h) = (arch.context_window, arch.hidden);
    let stream_len = (prefix.len() + generated.len()) as isize;

    // Window slots: last W ids of the stream, left-padded with the pad row.
    let mut inputs: Vec<C::V> = Vec::with_capacity(arch.input_width());
    for slot in 0..w {
        let pos = stream_len - w as isize + slot as isize;
        let row = if pos < 0 {
            arch.pad_row()
        } else if (pos as usize) < prefix.len() {
            prefix[pos as usize] as usize
        } else {
            generated[pos as usize - prefix.len()] as usize
        };
        for dim in 0..h {
            let p = ctx.param(arch.emb_at(row, dim));
            inputs.push(p);
        }
    }

    // Query slot: mean of the prefix-token embeddings.
    if prefix.is_empty() {
        for dim in 0..h {
            let p = ctx.param(arch.emb_at(arch.pad_row(), dim));
            inputs.push(p);
        }
    } else {
        let inv = 1.0 / prefix.len() as f64;
        for dim in 0..h {
            let rows: Vec<C::V> = prefix
                .iter()
                .map(|&t| ctx.param(arch.emb_at(t as usize, dim)))
                .collect();
            let pooled = ctx.sum(&rows);
            let scaled = ctx.scale(pooled, inv);
            inputs.push(scaled);
        }
    }

    let mut acts: Vec<C::V> = Vec::with_capacity(h);
    let mut terms: Vec<C::V> = Vec::with_capacity(arch.input_width());
    for unit in 0..h {
        terms.clear();
        for (i, &x) in inputs.iter().enumerate() {
            let wgt = ctx.param(arch.hidden_w_at(unit, i));
            terms.push(ctx.mul(wgt, x));
        }
        let dot = ctx.sum(&terms);
        let bias = ctx.param(arch.hidden_b_at(unit));
        let pre = ctx.add(dot, bias);
        acts.push(ctx.tanh(pre));
    }

    let mut logits: Vec<C::V> = Vec::with_capacity(arch.vocab);
    let mut head_terms: Vec<C::V> = Vec::with_capacity(h);
    for token in 0..arch.vocab {
        head_terms.clear();
        for (unit, &a) in acts.iter().enumerate() {
            let wgt = ctx.param(arch.head_w_at(token, unit));
            head_terms.push(ctx.mul(wgt, a));
        }
        let dot = ctx.sum(&head_terms);
        let bias = ctx.param(arch.head_b_at(token));
        logits.push(ctx.add(dot, bias));
    }
    logits
}

/// Log-probability of one token choice under the softmax head. With
/// `exclude_terminal`, the distribution is renormalized over content tokens
/// only (enumeration mode).
fn token_log_prob<C: Context>(
    ctx: &mut C,
    arch: &PolicyArch,
    logits: &[C::V],
    token: u32,
    exclude_terminal: bool,
) -> C::V {
    let z = if exclude_terminal {
        arch.content_tokens()
            .iter()
            .map(|&t| logits[t as usize])
            .collect::<Vec<_>>()
    } else {
        logits.to_vec()
    };
    let lse = ctx.logsumexp(&z);
    ctx.sub(logits[token as usize], lse)
}

fn log_prob_in<C: Context>(
    ctx: &mut C,
    arch: &PolicyArch,
    query: &Query,
    prior: &[u32],
    o: &TokenSequence,
    exclude_terminal: bool,
) -> Result<(Vec<C::V>, C::V), PolicyError> {
    check_tokens(arch, o)?;
    let prefix = query.prefix();
    let mut generated: Vec<u32> = prior.to_vec();
    let mut per_token = Vec::with_capacity(o.steps(arch));
    for &tok in o.tokens() {
        let logits = next_token_logits(ctx, arch, prefix, &generated);
        per_token.push(token_log_prob(ctx, arch, &logits, tok, exclude_terminal));
        generated.push(tok);
    }
    if o.terminated() {
        if let Some(term) = arch.terminal {
            if exclude_terminal {
                return Err(PolicyError::TokenOutOfRange {
                    token: term,
                    vocab: arch.vocab,
                });
            }
            let logits = next_token_logits(ctx, arch, prefix, &generated);
            per_token.push(token_log_prob(ctx, arch, &logits, term, false));
        }
    }
    let total = ctx.sum(&per_token);
    Ok((per_token, total))
}

/// Per-token conditional log-probabilities of `o` under the softmax head.
pub fn sequence_log_prob(
    params: &PolicyParameters,
    query: &Query,
    o: &TokenSequence,
) -> Result<SequenceLogProb, PolicyError> {
    let mut ctx = Values::new(params.theta());
    let (per_token, _) = log_prob_in(&mut ctx, params.arch(), query, &[], o, false)?;
    Ok(SequenceLogProb::from_tokens(per_token))
}

/// As [`sequence_log_prob`], but conditioned on `prior` already-generated
/// tokens. Used by the additivity property tests.
pub fn conditional_log_prob(
    params: &PolicyParameters,
    query: &Query,
    prior: &[u32],
    o: &TokenSequence,
) -> Result<SequenceLogProb, PolicyError> {
    let mut ctx = Values::new(params.theta());
    let (per_token, _) = log_prob_in(&mut ctx, params.arch(), query, prior, o, false)?;
    Ok(SequenceLogProb::from_tokens(per_token))
}

/// Differentiable variant: values are tape nodes rooted in the bound
/// parameter leaves.
pub fn sequence_log_prob_traced(
    tape: &mut Tape,
    params_nodes: &[NodeId],
    arch: &PolicyArch,
    query: &Query,
    o: &TokenSequence,
) -> Result<TracedSequenceLogProb, PolicyError> {
    let mut ctx = Trace::new(tape, params_nodes);
    let (per_token, total) = log_prob_in(&mut ctx, arch, query, &[], o, false)?;
    Ok(TracedSequenceLogProb { per_token, total })
}

/// Restricted-model variant used by the enumeration oracles: the terminal
/// token is masked out and each step renormalized over content tokens.
pub fn sequence_log_prob_traced_fixed_len(
    tape: &mut Tape,
    params_nodes: &[NodeId],
    arch: &PolicyArch,
    query: &Query,
    o: &TokenSequence,
) -> Result<TracedSequenceLogProb, PolicyError> {
    let mut ctx = Trace::new(tape, params_nodes);
    let (per_token, total) = log_prob_in(&mut ctx, arch, query, &[], o, true)?;
    Ok(TracedSequenceLogProb { per_token, total })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Next-token probabilities at the given context, plain f64 path.
fn step_distribution(
    params: &PolicyParameters,
    query: &Query,
    generated: &[u32],
) -> (Vec<f64>, Vec<f64>) {
    let mut ctx = Values::new(params.theta());
    let logits = next_token_logits(&mut ctx, params.arch(), query.prefix(), generated);
    let probs = softmax(&logits);
    (logits, probs)
}

/// Nucleus filter: smallest descending-probability prefix with cumulative
/// mass >= `top_p`, boundary ties included, then renormalized.
fn top_p_filter(probs: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut cum = 0.0;
    let mut boundary = 0.0;
    for &idx in &order {
        if cum >= top_p && probs[idx] != boundary {
            break;
        }
        kept.push(idx);
        boundary = probs[idx];
        cum += probs[idx];
    }
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

fn sample_step<R: Rng>(
    params: &PolicyParameters,
    query: &Query,
    generated: &[u32],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> (u32, f64) {
    let (logits, probs) = step_distribution(params, query, generated);
    let raw_log_probs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();

    let chosen = if temperature == 0.0 {
        // Greedy limit: argmax, lowest index on ties.
        logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0
    } else {
        let tempered: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let shaped = softmax(&tempered);
        let nucleus = top_p_filter(&shaped, top_p);
        let draw: f64 = rng.gen();
        let mut cum = 0.0;
        let mut picked = nucleus[nucleus.len() - 1].0;
        for &(idx, p) in &nucleus {
            cum += p;
            if draw < cum {
                picked = idx;
                break;
            }
        }
        picked
    };
    (chosen as u32, raw_log_probs[chosen])
}

/// Ancestral sampling of `count` outputs. Temperature and top-p shape the
/// sampling distribution only; the recorded log-probabilities are always
/// under the unmodified policy.
pub fn sample_sequences<R: Rng>(
    params: &PolicyParameters,
    query: &Query,
    count: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Vec<(TokenSequence, SequenceLogProb)> {
    assert!(count >= 1, "need at least one sample");
    assert!(temperature >= 0.0, "temperature must be non-negative");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must lie in (0, 1]");
    let arch = params.arch();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tokens: Vec<u32> = Vec::new();
        let mut lps: Vec<f64> = Vec::new();
        let mut terminated = arch.terminal.is_none();
        for _ in 0..arch.max_len {
            let (tok, lp) = sample_step(params, query, &tokens, temperature, top_p, rng);
            lps.push(lp);
            if Some(tok) == arch.terminal {
                terminated = true;
                break;
            }
            tokens.push(tok);
        }
        out.push((
            TokenSequence::new(tokens, terminated),
            SequenceLogProb::from_tokens(lps),
        ));
    }
    out
}

/// Mean per-token entropy (nats) of the next-token distributions over every
/// generation step the group's outputs took.
pub fn policy_entropy(
    params: &PolicyParameters,
    query: &Query,
    outputs: &[TokenSequence],
) -> f64 {
    let (nats, steps) = entropy_stats(params, query, outputs);
    if steps == 0 {
        0.0
    } else {
        nats / steps as f64
    }
}

/// Total entropy in nats plus the step count, for pooling across groups.
pub fn entropy_stats(
    params: &PolicyParameters,
    query: &Query,
    outputs: &[TokenSequence],
) -> (f64, usize) {
    let arch = params.arch();
    let mut nats = 0.0;
    let mut steps = 0usize;
    for o in outputs {
        for t in 0..o.steps(arch) {
            let (_, probs) = step_distribution(params, query, &o.tokens()[..t.min(o.len())]);
            nats += probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>();
            steps += 1;
        }
    }
    (nats, steps)
}

/// Pooled query-embedding values under the current parameters (the same
/// vector the forward pass feeds into the query slot).
pub fn query_embedding(params: &PolicyParameters, query: &Query) -> Vec<f64> {
    let arch = params.arch();
    let prefix = query.prefix();
    (0..arch.hidden)
        .map(|dim| {
            if prefix.is_empty() {
                params.theta()[arch.emb_at(arch.pad_row(), dim)]
            } else {
                prefix
                    .iter()
                    .map(|&t| params.theta()[arch.emb_at(t as usize, dim)])
                    .sum::<f64>()
                    / prefix.len() as f64
            }
        })
        .collect()
}

const ENUMERATION_CAP: u64 = 1_000_000;

/// Every fixed-length output with its exact probability under the
/// terminal-masked model. Probabilities sum to one.
pub fn enumerate_all_outputs(
    params: &PolicyParameters,
    query: &Query,
    exact_len: usize,
) -> Result<Vec<(TokenSequence, f64)>, PolicyError> {
    let arch = params.arch();
    let content = arch.content_tokens();
    let space = (content.len() as u64)
        .checked_pow(exact_len as u32)
        .unwrap_or(u64::MAX);
    if space > ENUMERATION_CAP {
        return Err(PolicyError::Capacity {
            space,
            limit: ENUMERATION_CAP,
        });
    }

    let mut results = Vec::with_capacity(space as usize);
    let mut stack: Vec<u32> = Vec::with_capacity(exact_len);
    descend(params, query, &content, exact_len, 1.0, &mut stack, &mut results);
    Ok(results)
}

fn descend(
    params: &PolicyParameters,
    query: &Query,
    content: &[u32],
    exact_len: usize,
    prob: f64,
    stack: &mut Vec<u32>,
    results: &mut Vec<(TokenSequence, f64)>,
) {
    if stack.len() == exact_len {
        results.push((TokenSequence::new(stack.clone(), true), prob));
        return;
    }
    let (_, probs) = step_distribution(params, query, stack);
    let mass: f64 = content.iter().map(|&t| probs[t as usize]).sum();
    for &t in content {
        stack.push(t);
        descend(
            params,
            query,
            content,
            exact_len,
            prob * probs[t as usize] / mass,
            stack,
            results,
        );
        stack.pop();
    }
}
