//! Synthetic verifiable environments: query distributions plus rule-based
//! binary verifiers.
//!
//! Three families with very different reward densities:
//! - `modsum`: digit strings whose sum must hit a target residue (density ~ 1/M)
//! - `paren`: balanced bracket strings of a requested length (Catalan-sparse)
//! - `copy`: echo the query symbols exactly (single accepting output)
//!
//! Queries are rendered as reserved prefix tokens so the policy conditions
//! on them through its context window.

use rand::Rng;
use thiserror::Error;

use crate::policy::{PolicyArch, TokenSequence};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task id {0:?}; valid ids are: modsum, paren, copy")]
    UnknownId(String),
    #[error("task {task} has no accepting output for payload {payload} within {max_len} steps")]
    Unsolvable {
        task: &'static str,
        payload: i64,
        max_len: usize,
    },
    #[error("{0}")]
    BadConfig(String),
}

/// Verifiable outcome: exactly correct or incorrect, never fractional.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryReward(bool);

impl BinaryReward {
    pub fn correct() -> Self {
        BinaryReward(true)
    }

    pub fn incorrect() -> Self {
        BinaryReward(false)
    }

    pub fn is_correct(self) -> bool {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

/// A sampled problem instance: integer payload plus its rendering as
/// reserved conditioning tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    task: String,
    payload: i64,
    prefix: Vec<u32>,
}

impl Query {
    pub fn new(task: &str, payload: i64, prefix: Vec<u32>) -> Self {
        Query {
            task: task.to_string(),
            payload,
            prefix,
        }
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn payload(&self) -> i64 {
        self.payload
    }

    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskKind {
    /// Reward 1 iff the digit sum of the output is `payload (mod modulus)`.
    ModSum { modulus: u32 },
    /// Reward 1 iff the output is a balanced bracket string of exactly the
    /// requested (even) length.
    Paren,
    /// Reward 1 iff the output repeats the query's symbols exactly.
    Copy { symbols: u32, prefix_len: usize },
}

/// A registered task: family, generation budget, terminal-token choice.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    kind: TaskKind,
    max_len: usize,
    use_terminal: bool,
}

/// Configurable task parameters, addressable by string id.
#[derive(Clone, Debug)]
pub struct TaskConfig {
    pub modulus: u32,
    pub copy_symbols: u32,
    pub copy_len: usize,
    pub max_len: usize,
    pub use_terminal: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            modulus: 10,
            copy_symbols: 4,
            copy_len: 2,
            max_len: 4,
            use_terminal: true,
        }
    }
}

const SOLVABILITY_SEARCH_CAP: u64 = 1_000_000;

impl Task {
    pub fn new(kind: TaskKind, max_len: usize, use_terminal: bool) -> Result<Self, TaskError> {
        if max_len == 0 {
            return Err(TaskError::BadConfig("max_len must be at least 1".into()));
        }
        match &kind {
            TaskKind::ModSum { modulus } if *modulus < 2 => {
                return Err(TaskError::BadConfig("modulus must be at least 2".into()));
            }
            TaskKind::Copy { symbols, .. } if *symbols < 2 => {
                return Err(TaskError::BadConfig(
                    "copy needs at least two symbols".into(),
                ));
            }
            _ => {}
        }
        let task = Task {
            kind,
            max_len,
            use_terminal,
        };
        task.check_solvable()?;
        Ok(task)
    }

    /// Registry lookup by string id.
    pub fn from_id(id: &str, cfg: &TaskConfig) -> Result<Self, TaskError> {
        let kind = match id {
            "modsum" => TaskKind::ModSum {
                modulus: cfg.modulus,
            },
            "paren" => TaskKind::Paren,
            "copy" => TaskKind::Copy {
                symbols: cfg.copy_symbols,
                prefix_len: cfg.copy_len,
            },
            other => return Err(TaskError::UnknownId(other.to_string())),
        };
        Task::new(kind, cfg.max_len, cfg.use_terminal)
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            TaskKind::ModSum { .. } => "modsum",
            TaskKind::Paren => "paren",
            TaskKind::Copy { .. } => "copy",
        }
    }

    pub fn kind(&self) -> &TaskKind {
        &self.kind
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Content tokens the policy may emit, excluding the terminal.
    pub fn content_vocab(&self) -> usize {
        match self.kind {
            TaskKind::ModSum { modulus } => modulus as usize,
            TaskKind::Paren => 2,
            TaskKind::Copy { symbols, .. } => symbols as usize,
        }
    }

    /// Output vocabulary size, terminal included when in use.
    pub fn vocab(&self) -> usize {
        self.content_vocab() + usize::from(self.use_terminal)
    }

    pub fn terminal(&self) -> Option<u32> {
        self.use_terminal.then(|| self.content_vocab() as u32)
    }

    /// Generation steps available for content tokens.
    fn content_budget(&self) -> usize {
        self.max_len - usize::from(self.use_terminal)
    }

    fn query_token_count(&self) -> usize {
        match self.kind {
            TaskKind::ModSum { modulus } => modulus as usize,
            TaskKind::Paren => (self.content_budget() / 2).max(1),
            TaskKind::Copy { symbols, .. } => symbols as usize,
        }
    }

    /// Policy architecture matching this task's vocabulary and budget.
    pub fn arch(&self, context_window: usize, hidden: usize) -> PolicyArch {
        PolicyArch {
            vocab: self.vocab(),
            query_tokens: self.query_token_count(),
            context_window,
            hidden,
            max_len: self.max_len,
            terminal: self.terminal(),
        }
    }

    /// All payloads in the query domain.
    pub fn payloads(&self) -> Vec<i64> {
        match self.kind {
            TaskKind::ModSum { modulus } => (0..modulus as i64).collect(),
            TaskKind::Paren => {
                let mut lens = Vec::new();
                let mut l = 2;
                while l <= self.content_budget() {
                    lens.push(l as i64);
                    l += 2;
                }
                lens
            }
            TaskKind::Copy {
                symbols,
                prefix_len,
            } => (0..(symbols as i64).pow(prefix_len as u32)).collect(),
        }
    }

    /// Deterministic query construction from a payload.
    pub fn query_from_payload(&self, payload: i64) -> Query {
        let base = self.vocab() as u32;
        let prefix = match self.kind {
            TaskKind::ModSum { .. } => vec![base + payload as u32],
            TaskKind::Paren => vec![base + (payload as u32 / 2 - 1)],
            TaskKind::Copy { .. } => self
                .copy_symbols_of(payload)
                .iter()
                .map(|&s| base + s)
                .collect(),
        };
        Query::new(self.id(), payload, prefix)
    }

    /// Uniform draw over the query domain; deterministic given the rng state.
    pub fn sample_query<R: Rng>(&self, rng: &mut R) -> Query {
        let payload = match self.kind {
            TaskKind::ModSum { modulus } => rng.gen_range(0..modulus as i64),
            TaskKind::Paren => {
                let lens = self.payloads();
                lens[rng.gen_range(0..lens.len())]
            }
            TaskKind::Copy {
                symbols,
                prefix_len,
            } => rng.gen_range(0..(symbols as i64).pow(prefix_len as u32)),
        };
        self.query_from_payload(payload)
    }

    fn copy_symbols_of(&self, payload: i64) -> Vec<u32> {
        let TaskKind::Copy {
            symbols,
            prefix_len,
        } = self.kind
        else {
            unreachable!("copy_symbols_of on non-copy task");
        };
        let mut digits = vec![0u32; prefix_len];
        let mut rest = payload as u64;
        for slot in (0..prefix_len).rev() {
            digits[slot] = (rest % symbols as u64) as u32;
            rest /= symbols as u64;
        }
        digits
    }

    /// Pure rule-based verdict. Malformed, over-length, or unterminated
    /// outputs verify to 0; the reward is never fractional.
    pub fn verify(&self, query: &Query, output: &TokenSequence) -> BinaryReward {
        if !output.terminated() || output.len() > self.content_budget() {
            return BinaryReward::incorrect();
        }
        let content = self.content_vocab() as u32;
        if output.tokens().iter().any(|&t| t >= content) {
            return BinaryReward::incorrect();
        }
        let ok = match self.kind {
            TaskKind::ModSum { modulus } => {
                let sum: u64 = output.tokens().iter().map(|&t| t as u64).sum();
                sum % modulus as u64 == query.payload() as u64
            }
            TaskKind::Paren => {
                output.len() == query.payload() as usize && balanced(output.tokens())
            }
            TaskKind::Copy { .. } => {
                output.tokens() == self.copy_symbols_of(query.payload()).as_slice()
            }
        };
        if ok {
            BinaryReward::correct()
        } else {
            BinaryReward::incorrect()
        }
    }

    /// Exhaustive search for an accepting output per query, run at
    /// registration for enumeration-scale configurations.
    fn check_solvable(&self) -> Result<(), TaskError> {
        let v = self.content_vocab() as u64;
        let budget = self.content_budget() as u32;
        let space: u64 = (0..=budget).map(|l| v.saturating_pow(l)).sum();
        if space > SOLVABILITY_SEARCH_CAP {
            return Ok(()); // beyond enumeration scale; trusted by construction
        }
        for payload in self.payloads() {
            let query = self.query_from_payload(payload);
            if !self.has_accepting_output(&query, budget as usize) {
                return Err(TaskError::Unsolvable {
                    task: self.id(),
                    payload,
                    max_len: self.max_len,
                });
            }
        }
        Ok(())
    }

    fn has_accepting_output(&self, query: &Query, budget: usize) -> bool {
        let v = self.content_vocab() as u32;
        for len in 0..=budget {
            let mut tokens = vec![0u32; len];
            loop {
                let seq = TokenSequence::new(tokens.clone(), true);
                if self.verify(query, &seq).is_correct() {
                    return true;
                }
                // odometer increment
                let mut slot = len;
                loop {
                    if slot == 0 {
                        break;
                    }
                    slot -= 1;
                    tokens[slot] += 1;
                    if tokens[slot] < v {
                        break;
                    }
                    tokens[slot] = 0;
                }
                if tokens.iter().all(|&t| t == 0) {
                    break;
                }
            }
        }
        false
    }
}

fn balanced(tokens: &[u32]) -> bool {
    let mut depth: i64 = 0;
    for &t in tokens {
        match t {
            0 => depth += 1,
            1 => depth -= 1,
            _ => return false,
        }
        if depth < 0 {
            return false;
        }
    }
    depth == 0
}
