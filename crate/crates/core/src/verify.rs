//! Release-gate verification suites.
//!
//! Each suite pits an implementation path against an independent oracle:
//! reverse-mode gradients against central finite differences, the
//! score-function surrogate against the finite-differenced exactly
//! enumerated objective, the closed-form pass@k against subset
//! enumeration and Monte-Carlo resampling, and so on. The `verify` CLI
//! command prints one verdict per suite; the acceptance tests assert on
//! the same results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_gradient, Context, GradientMap, Tape, Trace, Values};
use crate::eval::pass_at_k;
use crate::objectives::{
    class_weights, kl_estimate_k3, pacs_gradient_terms_hooked, pacs_loss, per_sample_loss,
    DecompositionHook, GradientMode, PacsSettings, RolloutGroup, WeightScope,
};
use crate::policy::{
    enumerate_all_outputs, sequence_log_prob, PolicyParameters, TokenSequence,
};
use crate::scores::{rloo_scores_in, Estimator};
use crate::tasks::{BinaryReward, Task, TaskKind};
use crate::trainer::{Algorithm, Trainer, TrainerConfig};

/// Outcome of one suite: a verdict plus a human-readable measurement.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{:<22} {}  {}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Test hooks threaded into the suites; defaults run the real checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyHooks {
    pub decomposition: Option<DecompositionHook>,
}

pub fn run_all(hooks: VerifyHooks) -> Vec<SuiteResult> {
    vec![
        backward_vs_finite_diff_suite(),
        gradient_identity_suite(),
        decomposition_suite(hooks.decomposition.unwrap_or_default()),
        rloo_suite(),
        pass_at_k_suite(),
        k3_suite(),
        loss_direction_suite(),
        reset_suite(),
    ]
}

// ---------------------------------------------------------------------------
// Random scalar graphs: backward against central differences.

#[derive(Clone, Debug)]
enum ProgramOp {
    Add(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    LogSigmoid(usize),
    Sum(Vec<usize>),
    Select(Vec<usize>, usize),
}

fn run_program<C: Context>(ctx: &mut C, n_params: usize, prog: &[ProgramOp]) -> C::V {
    let mut slots: Vec<C::V> = (0..n_params).map(|i| ctx.param(i)).collect();
    for op in prog {
        let v = match op {
            ProgramOp::Add(a, b) => ctx.add(slots[*a], slots[*b]),
            ProgramOp::Mul(a, b) => ctx.mul(slots[*a], slots[*b]),
            ProgramOp::Neg(a) => ctx.neg(slots[*a]),
            ProgramOp::Exp(a) => ctx.exp(slots[*a]),
            ProgramOp::Ln(a) => ctx.ln(slots[*a]),
            ProgramOp::Tanh(a) => ctx.tanh(slots[*a]),
            ProgramOp::LogSigmoid(a) => ctx.log_sigmoid(slots[*a]),
            ProgramOp::Sum(args) => {
                let vs: Vec<C::V> = args.iter().map(|&i| slots[i]).collect();
                ctx.sum(&vs)
            }
            ProgramOp::Select(args, choice) => {
                let vs: Vec<C::V> = args.iter().map(|&i| slots[i]).collect();
                ctx.select(&vs, *choice)
            }
        };
        slots.push(v);
    }
    *slots.last().expect("program is non-empty")
}

fn random_program(rng: &mut ChaCha8Rng, theta: &[f64]) -> Vec<ProgramOp> {
    // Track slot values so exp/ln stay finite and well-conditioned.
    let mut vals: Vec<f64> = theta.to_vec();
    let mut prog = Vec::new();
    let ops = rng.gen_range(3..=40);
    for _ in 0..ops {
        let n = vals.len();
        let op = match rng_range(rng, 9) {
            0 => ProgramOp::Add(rng_range(rng, n), rng_range(rng, n)),
            1 => ProgramOp::Mul(rng_range(rng, n), rng_range(rng, n)),
            2 => ProgramOp::Neg(rng_range(rng, n)),
            3 => {
                let a = rng_range(rng, n);
                if vals[a].abs() < 4.0 {
                    ProgramOp::Exp(a)
                } else {
                    ProgramOp::Tanh(a)
                }
            }
            4 => {
                let a = rng_range(rng, n);
                if vals[a] > 0.1 {
                    ProgramOp::Ln(a)
                } else {
                    ProgramOp::LogSigmoid(a)
                }
            }
            5 => ProgramOp::Tanh(rng_range(rng, n)),
            6 => ProgramOp::LogSigmoid(rng_range(rng, n)),
            7 => {
                let count = 2 + rng_range(rng, 3.min(n - 1));
                ProgramOp::Sum((0..count).map(|_| rng_range(rng, n)).collect())
            }
            _ => {
                let count = 2 + rng_range(rng, 2.min(n - 1));
                let args: Vec<usize> = (0..count).map(|_| rng_range(rng, n)).collect();
                let choice = rng_range(rng, args.len());
                ProgramOp::Select(args, choice)
            }
        };
        let v = match &op {
            ProgramOp::Add(a, b) => vals[*a] + vals[*b],
            ProgramOp::Mul(a, b) => vals[*a] * vals[*b],
            ProgramOp::Neg(a) => -vals[*a],
            ProgramOp::Exp(a) => vals[*a].exp(),
            ProgramOp::Ln(a) => vals[*a].ln(),
            ProgramOp::Tanh(a) => vals[*a].tanh(),
            ProgramOp::LogSigmoid(a) => crate::autodiff::log_sigmoid(vals[*a]),
            ProgramOp::Sum(args) => args.iter().map(|&i| vals[i]).sum(),
            ProgramOp::Select(args, choice) => vals[args[*choice]],
        };
        if !v.is_finite() || v.abs() > 1e8 {
            continue; // skip ops that would blow up
        }
        vals.push(v);
        prog.push(op);
    }
    if prog.is_empty() {
        prog.push(ProgramOp::Tanh(0));
    }
    prog
}

fn rng_range(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n.max(1))
}

pub fn backward_vs_finite_diff_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1FF);
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for _ in 0..1000 {
        let n_params = rng.gen_range(1..=8);
        let theta: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let prog = random_program(&mut rng, &theta);

        let mut tape = Tape::new();
        let nodes = tape.bind_params(&theta);
        let mut trace = Trace::new(&mut tape, &nodes);
        let root = run_program(&mut trace, n_params, &prog);
        let Ok(ad) = tape.backward(root) else {
            failures += 1;
            continue;
        };
        let fd = finite_diff_gradient(
            |t| {
                let mut ctx = Values::new(t);
                run_program(&mut ctx, n_params, &prog)
            },
            &theta,
            1e-5,
        );
        let Ok(fd) = fd else {
            failures += 1;
            continue;
        };
        for i in 0..n_params {
            let diff = (ad.get(i) - fd.get(i)).abs();
            let bound = (1e-4 * ad.get(i).abs()).max(1e-6);
            worst = worst.max(diff / bound);
            if diff > bound {
                failures += 1;
            }
        }
    }
    SuiteResult {
        name: "gradient-random",
        passed: failures == 0,
        detail: format!("1000 random graphs, worst error {worst:.3e} of bound, {failures} failures"),
    }
}

// ---------------------------------------------------------------------------
// Gradient identity on the exactly enumerated objective.

/// Enumerable instance: two content tokens, fixed length two, no terminal,
/// well under 200 parameters.
pub fn enumerable_instance() -> (Task, usize, usize) {
    let task = Task::new(TaskKind::ModSum { modulus: 2 }, 2, false)
        .expect("enumerable instance is solvable");
    (task, 2, 4) // (task, context_window, hidden)
}

fn random_policy(task: &Task, window: usize, hidden: usize, rng: &mut ChaCha8Rng) -> PolicyParameters {
    let arch = task.arch(window, hidden);
    let theta: Vec<f64> = (0..arch.param_count())
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    PolicyParameters::from_theta(arch, theta).unwrap()
}

/// The weighted group loss of one G=2 tuple, computed with plain floats
/// and inline score algebra (independent of the tape route).
fn tuple_loss_plain(
    lp: (f64, f64),
    lp_ref: (f64, f64),
    rewards: (BinaryReward, BinaryReward),
    beta: f64,
) -> f64 {
    let rhat = (beta * (lp.0 - lp_ref.0), beta * (lp.1 - lp_ref.1));
    let psi = (rhat.0 - rhat.1, rhat.1 - rhat.0);
    let w = class_weights(&[rewards.0, rewards.1], WeightScope::Group);
    let l0 = w.weight_for(rewards.0) * per_sample_loss(rewards.0, psi.0);
    let l1 = w.weight_for(rewards.1) * per_sample_loss(rewards.1, psi.1);
    -((l0 + l1) / 2.0)
}

pub fn gradient_identity_suite() -> SuiteResult {
    let (task, window, hidden) = enumerable_instance();
    let query = task.query_from_payload(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1DEA);
    let mut worst: f64 = 0.0;

    for _trial in 0..20 {
        let params = random_policy(&task, window, hidden, &mut rng);
        let reference = random_policy(&task, window, hidden, &mut rng);
        let outputs: Vec<TokenSequence> = enumerate_all_outputs(&params, &query, 2)
            .unwrap()
            .into_iter()
            .map(|(o, _)| o)
            .collect();
        let rewards: Vec<BinaryReward> =
            outputs.iter().map(|o| task.verify(&query, o)).collect();
        let ref_lps: Vec<f64> = outputs
            .iter()
            .map(|o| sequence_log_prob(&reference, &query, o).unwrap().total)
            .collect();

        // J(theta) = -E over all tuples of the weighted group loss
        let arch = params.arch().clone();
        let objective = |theta: &[f64]| -> f64 {
            let moved = PolicyParameters::from_theta(arch.clone(), theta.to_vec()).unwrap();
            let probs: Vec<f64> = enumerate_all_outputs(&moved, &query, 2)
                .unwrap()
                .iter()
                .map(|(_, p)| *p)
                .collect();
            let lps: Vec<f64> = outputs
                .iter()
                .map(|o| sequence_log_prob(&moved, &query, o).unwrap().total)
                .collect();
            let mut j = 0.0;
            for i in 0..outputs.len() {
                for k in 0..outputs.len() {
                    j += probs[i]
                        * probs[k]
                        * tuple_loss_plain(
                            (lps[i], lps[k]),
                            (ref_lps[i], ref_lps[k]),
                            (rewards[i], rewards[k]),
                            1.0,
                        );
                }
            }
            j
        };
        let fd = finite_diff_gradient(objective, params.theta(), 1e-5).unwrap();

        // Expected full-mode pathwise gradient over all tuples.
        let probs: Vec<f64> = enumerate_all_outputs(&params, &query, 2)
            .unwrap()
            .iter()
            .map(|(_, p)| *p)
            .collect();
        let settings = PacsSettings {
            estimator: Estimator::Rloo,
            gradient_mode: GradientMode::Full,
            beta: 1.0,
            ..PacsSettings::default()
        };
        let mut expected = GradientMap::zeros(params.theta().len());
        for i in 0..outputs.len() {
            for k in 0..outputs.len() {
                let pair = vec![outputs[i].clone(), outputs[k].clone()];
                let cur: Vec<_> = pair
                    .iter()
                    .map(|o| sequence_log_prob(&params, &query, o).unwrap())
                    .collect();
                let refl: Vec<_> = pair
                    .iter()
                    .map(|o| sequence_log_prob(&reference, &query, o).unwrap())
                    .collect();
                let group = RolloutGroup::new(
                    query.clone(),
                    pair,
                    cur.clone(),
                    refl,
                    cur,
                    vec![rewards[i], rewards[k]],
                )
                .unwrap();
                let w = class_weights(group.rewards(), WeightScope::Group);
                let graph = pacs_loss(&params, &group, Some(&w), &settings).unwrap();
                let grad = graph.tape.backward(graph.root).unwrap();
                expected = expected.add(&grad.scale(probs[i] * probs[k]));
            }
        }

        for c in 0..fd.len() {
            let rel = (expected.get(c) - fd.get(c)).abs() / fd.get(c).abs().max(1e-6);
            worst = worst.max(rel);
        }
    }
    SuiteResult {
        name: "gradient-identity",
        passed: worst <= 1e-4,
        detail: format!("20 random parameter draws, max relative error {worst:.3e} (bound 1e-4)"),
    }
}

// ---------------------------------------------------------------------------
// Actor + critic = total on random small instances.

pub fn decomposition_suite(hook: DecompositionHook) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDEC0);
    let task = Task::new(TaskKind::ModSum { modulus: 3 }, 2, true).unwrap();
    let query = task.query_from_payload(1);
    let mut worst: f64 = 0.0;
    let mut forced_ok = true;

    for trial in 0..500 {
        let params = random_policy(&task, 2, 3, &mut rng);
        let reference = random_policy(&task, 2, 3, &mut rng);
        let g = rng.gen_range(2..=4);
        let outputs: Vec<TokenSequence> = (0..g)
            .map(|_| {
                let len = rng.gen_range(0..=1);
                let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..3)).collect();
                TokenSequence::new(toks, true)
            })
            .collect();
        let rewards: Vec<BinaryReward> = outputs.iter().map(|o| task.verify(&query, o)).collect();
        let cur: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(&params, &query, o).unwrap())
            .collect();
        let refl: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(&reference, &query, o).unwrap())
            .collect();
        let group =
            RolloutGroup::new(query.clone(), outputs, cur.clone(), refl, cur, rewards).unwrap();

        let d = pacs_gradient_terms_hooked(&params, &group, Estimator::Rloo, 1.0, hook).unwrap();
        let sum = d.actor.add(&d.critic);
        worst = worst.max(sum.max_abs_diff(&d.total));

        if trial == 0 {
            let zeroed = pacs_gradient_terms_hooked(
                &params,
                &group,
                Estimator::Rloo,
                1.0,
                DecompositionHook {
                    forced_residual: Some(0.0),
                    critic_sign: hook.critic_sign,
                },
            )
            .unwrap();
            forced_ok = zeroed.critic.l2_norm() == 0.0;
        }
    }
    SuiteResult {
        name: "decomposition",
        passed: worst <= 1e-10 && forced_ok,
        detail: format!(
            "500 instances, max |actor+critic-total| = {worst:.3e} (bound 1e-10), forced-residual critic zero: {forced_ok}"
        ),
    }
}

// ---------------------------------------------------------------------------
// Leave-one-out score properties.

pub fn rloo_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1700);
    let mut worst_sum: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for _ in 0..1000 {
        let g = rng.gen_range(2..=16);
        let vals: Vec<f64> = (0..g).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let delta: f64 = rng.gen_range(-5.0..5.0);
        let mut ctx = Values::new(&[]);
        let psi = rloo_scores_in(&mut ctx, &vals).unwrap();
        worst_sum = worst_sum.max(psi.iter().sum::<f64>().abs());
        let shifted: Vec<f64> = vals.iter().map(|v| v + delta).collect();
        let psi_shifted = rloo_scores_in(&mut ctx, &shifted).unwrap();
        for (a, b) in psi.iter().zip(&psi_shifted) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    SuiteResult {
        name: "rloo-scores",
        passed: worst_sum <= 1e-9 && worst_shift <= 1e-9,
        detail: format!(
            "1000 groups: max |sum psi| = {worst_sum:.3e}, max shift deviation = {worst_shift:.3e} (bounds 1e-9)"
        ),
    }
}

// ---------------------------------------------------------------------------
// pass@k against subset enumeration and Monte-Carlo resampling.

/// Exhaustive oracle: fraction of k-subsets containing a correct sample.
pub fn pass_at_k_enumeration_oracle(n: usize, c: usize, k: usize) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        total += 1;
        if subset.iter().any(|&i| i < c) {
            hit += 1;
        }
        let mut i = k;
        loop {
            if i == 0 {
                return hit as f64 / total as f64;
            }
            i -= 1;
            if subset[i] != i + n - k {
                subset[i] += 1;
                for j in i + 1..k {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn pass_at_k_suite() -> SuiteResult {
    // exact agreement for all n <= 10
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..=n {
                let lib = pass_at_k(n, c, k).unwrap();
                let oracle = pass_at_k_enumeration_oracle(n, c, k);
                if lib.to_bits() != oracle.to_bits() {
                    return SuiteResult {
                        name: "pass-at-k",
                        passed: false,
                        detail: format!("mismatch at n={n} c={c} k={k}: {lib} vs {oracle}"),
                    };
                }
            }
        }
    }

    // Monte-Carlo subset resampling at n = 512
    let mut rng = ChaCha8Rng::seed_from_u64(0x512);
    let resamples = 100_000usize;
    let mut worst_sigmas: f64 = 0.0;
    for _ in 0..50 {
        let n = 512usize;
        let c = rng.gen_range(0..=n);
        let k = rng.gen_range(1..=n);
        let exact = pass_at_k(n, c, k).unwrap();
        let mut hits = 0usize;
        let mut pool: Vec<usize> = (0..n).collect();
        for _ in 0..resamples {
            // partial Fisher-Yates; the first c indices are the correct ones
            let mut hit = false;
            for slot in 0..k {
                let pick = rng.gen_range(slot..n);
                pool.swap(slot, pick);
                if pool[slot] < c {
                    hit = true;
                    break;
                }
            }
            hits += usize::from(hit);
        }
        let estimate = hits as f64 / resamples as f64;
        let se = (exact * (1.0 - exact) / resamples as f64).sqrt();
        let sigmas = if se == 0.0 {
            if estimate == exact {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (estimate - exact).abs() / se
        };
        worst_sigmas = worst_sigmas.max(sigmas);
    }
    SuiteResult {
        name: "pass-at-k",
        passed: worst_sigmas <= 3.0,
        detail: format!(
            "exact on all n<=10; 50 triples at n=512 within {worst_sigmas:.2} standard errors (bound 3)"
        ),
    }
}

// ---------------------------------------------------------------------------
// k3 estimator non-negativity.

pub fn k3_suite() -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6B33);
    let mut min_val = f64::INFINITY;
    let mut matched_ok = true;
    for _ in 0..10_000 {
        let a = rng.gen_range(-12.0..0.0);
        let b = rng.gen_range(-12.0..0.0);
        let v = kl_estimate_k3(a, b);
        min_val = min_val.min(v);
        if (a - b).abs() > 1e-6 && v <= 0.0 {
            matched_ok = false;
        }
        if kl_estimate_k3(a, a) != 0.0 {
            matched_ok = false;
        }
    }
    SuiteResult {
        name: "k3-estimate",
        passed: min_val >= 0.0 && matched_ok,
        detail: format!("10000 pairs, min value {min_val:.3e}, zero only at matched log-probs"),
    }
}

// ---------------------------------------------------------------------------
// Loss direction: one descent step favors the correct output.

pub fn loss_direction_suite() -> SuiteResult {
    // Single-step instance: the pair differs in its one token, so the
    // correct/incorrect probabilities must move in opposite directions.
    let task = Task::new(TaskKind::ModSum { modulus: 2 }, 1, false)
        .expect("single-token instance is solvable");
    let (window, hidden) = (2, 4);
    let query = task.query_from_payload(1);
    let good = TokenSequence::new(vec![1], true); // digit sum 1 = payload
    let bad = TokenSequence::new(vec![0], true); // digit sum 0
    assert!(task.verify(&query, &good).is_correct());
    assert!(!task.verify(&query, &bad).is_correct());

    let mut rng = ChaCha8Rng::seed_from_u64(0xD1E);
    let settings = PacsSettings {
        estimator: Estimator::Rloo,
        gradient_mode: GradientMode::Direct,
        beta: 1.0,
        ..PacsSettings::default()
    };
    let mut successes = 0usize;
    for _ in 0..100 {
        let arch = task.arch(window, hidden);
        let params = PolicyParameters::init(arch.clone(), &mut rng).unwrap();
        let reference = PolicyParameters::init(arch, &mut rng).unwrap();
        let outputs = vec![good.clone(), bad.clone()];
        let cur: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(&params, &query, o).unwrap())
            .collect();
        let refl: Vec<_> = outputs
            .iter()
            .map(|o| sequence_log_prob(&reference, &query, o).unwrap())
            .collect();
        let group = RolloutGroup::new(
            query.clone(),
            outputs,
            cur.clone(),
            refl,
            cur,
            vec![BinaryReward::correct(), BinaryReward::incorrect()],
        )
        .unwrap();
        let graph = pacs_loss(&params, &group, None, &settings).unwrap();
        let grad = graph.tape.backward(graph.root).unwrap();

        let before_good = sequence_log_prob(&params, &query, &good).unwrap().total;
        let before_bad = sequence_log_prob(&params, &query, &bad).unwrap().total;
        let stepped: Vec<f64> = params
            .theta()
            .iter()
            .enumerate()
            .map(|(i, t)| t - 1e-3 * grad.get(i))
            .collect();
        let moved = PolicyParameters::from_theta(params.arch().clone(), stepped).unwrap();
        let after_good = sequence_log_prob(&moved, &query, &good).unwrap().total;
        let after_bad = sequence_log_prob(&moved, &query, &bad).unwrap().total;
        if after_good > before_good && after_bad < before_bad {
            successes += 1;
        }
    }
    SuiteResult {
        name: "loss-direction",
        passed: successes == 100,
        detail: format!("{successes}/100 random initializations moved both outputs the right way"),
    }
}

// ---------------------------------------------------------------------------
// Reference reset semantics.

pub fn reset_suite() -> SuiteResult {
    let task = Task::new(TaskKind::ModSum { modulus: 4 }, 3, true).unwrap();
    let mut cfg = TrainerConfig::new(Algorithm::Pacs, task);
    cfg.group_size = 3;
    cfg.groups_per_step = 1;
    cfg.context_window = 2;
    cfg.hidden = 6;
    cfg.reset_period = Some(3);
    cfg.seed = 77;
    let mut t = Trainer::new(cfg).unwrap();
    t.step().unwrap();
    t.step().unwrap();

    let probe_q = t.config().task.query_from_payload(2);
    let probes = [
        TokenSequence::new(vec![1, 3], true),
        TokenSequence::new(vec![2], true),
        TokenSequence::new(vec![], true),
    ];
    let before: Vec<u64> = probes
        .iter()
        .map(|o| {
            sequence_log_prob(t.params(), &probe_q, o)
                .unwrap()
                .total
                .to_bits()
        })
        .collect();
    let fired = t.maybe_reset_reference(3);
    let after: Vec<u64> = probes
        .iter()
        .map(|o| {
            sequence_log_prob(t.params(), &probe_q, o)
                .unwrap()
                .total
                .to_bits()
        })
        .collect();
    let opt_zeroed = t.optimizer().is_zeroed();
    let proxy_zero = probes.iter().all(|o| {
        let cur = sequence_log_prob(t.params(), &probe_q, o).unwrap();
        let refp = sequence_log_prob(t.reference().params(), &probe_q, o).unwrap();
        crate::scores::reward_proxy(&cur, &refp, 1.0).unwrap().value == 0.0
    });
    let passed = fired && before == after && opt_zeroed && proxy_zero;
    SuiteResult {
        name: "reference-reset",
        passed,
        detail: format!(
            "reset fired: {fired}, probe log-probs bit-identical: {}, optimizer zeroed: {opt_zeroed}, fresh proxies zero: {proxy_zero}",
            before == after
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_with_default_hooks() {
        for suite in run_all(VerifyHooks::default()) {
            assert!(suite.passed, "{}", suite.line());
        }
    }

    #[test]
    fn critic_sign_flip_is_caught_by_the_decomposition_suite() {
        let flipped = decomposition_suite(DecompositionHook {
            critic_sign: -1.0,
            forced_residual: None,
        });
        assert!(!flipped.passed, "{}", flipped.line());
    }
}
