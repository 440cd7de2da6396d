//! Reward proxies and score/advantage functions.
//!
//! The reward proxy is a beta-scaled log-probability ratio of the current
//! policy against a frozen reference, summed over tokens. Group scores
//! turn proxies into advantage-like values: leave-one-out baselining
//! (`rloo`), mean-std normalization (`grpo`), or plain centering
//! (`dr-grpo`). GAE lives here too, for the clipped-objective baseline.
//!
//! Everything that must be differentiable is written against
//! [`Context`], so the same formulas run as plain math or as tape ops.

use thiserror::Error;

use crate::autodiff::{Context, Values};
use crate::policy::SequenceLogProb;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("per-token log-prob records differ in length: {current} vs {reference}")]
    LengthMismatch { current: usize, reference: usize },
    #[error("leave-one-out undefined for singleton groups (got {got})")]
    GroupTooSmall { got: usize },
    #[error("empty value list")]
    Empty,
    #[error("rewards ({rewards}) and values ({values}) misaligned; values need one bootstrap entry")]
    GaeShape { rewards: usize, values: usize },
}

/// Score estimator selection, addressable by the configuration ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Rloo,
    Grpo,
    DrGrpo,
}

impl Estimator {
    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "rloo" => Some(Estimator::Rloo),
            "grpo" => Some(Estimator::Grpo),
            "dr-grpo" => Some(Estimator::DrGrpo),
            _ => None,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Estimator::Rloo => "rloo",
            Estimator::Grpo => "grpo",
            Estimator::DrGrpo => "dr-grpo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizeMode {
    MeanStd,
    MeanOnly,
}

/// Sample-vs-population choice for the std term. Group-relative methods
/// conventionally divide by the group size, so population is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StdKind {
    Population,
    Sample,
}

/// Beta-scaled log-ratio of one output under current vs reference policy.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardProxy {
    pub value: f64,
    pub per_token: Vec<f64>,
    pub beta: f64,
}

/// Per-output scores feeding the sigmoid predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub estimator: Estimator,
}

/// Per-token advantages plus the (gamma, lambda) that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub gamma: f64,
    pub lam: f64,
}

/// `beta * sum_t (log pi_theta(o_t|.) - log pi_ref(o_t|.))`, with the
/// per-token contributions retained for diagnostics.
pub fn reward_proxy(
    current: &SequenceLogProb,
    reference: &SequenceLogProb,
    beta: f64,
) -> Result<RewardProxy, ScoreError> {
    if current.per_token.len() != reference.per_token.len() {
        return Err(ScoreError::LengthMismatch {
            current: current.per_token.len(),
            reference: reference.per_token.len(),
        });
    }
    let per_token: Vec<f64> = current
        .per_token
        .iter()
        .zip(&reference.per_token)
        .map(|(c, r)| beta * (c - r))
        .collect();
    let value = per_token.iter().sum();
    Ok(RewardProxy {
        value,
        per_token,
        beta,
    })
}

/// Literal leave-one-out score: `psi_i = rhat_i - mean_{j != i} rhat_j`.
pub fn rloo_scores_in<C: Context>(
    ctx: &mut C,
    rhat: &[C::V],
) -> Result<Vec<C::V>, ScoreError> {
    let g = rhat.len();
    if g < 2 {
        return Err(ScoreError::GroupTooSmall { got: g });
    }
    let total = ctx.sum(rhat);
    let inv = 1.0 / (g - 1) as f64;
    Ok(rhat
        .iter()
        .map(|&r| {
            let others = ctx.sub(total, r);
            let mean_others = ctx.scale(others, inv);
            ctx.sub(r, mean_others)
        })
        .collect())
}

/// Center (and optionally scale) a group of values. In mean-std mode the
/// denominator is `std + epsilon`; a zero denominator (all-equal group with
/// epsilon 0) degrades to plain centering, which is identically zero there.
pub fn group_normalize_in<C: Context>(
    ctx: &mut C,
    values: &[C::V],
    mode: NormalizeMode,
    epsilon: f64,
    std_kind: StdKind,
) -> Result<Vec<C::V>, ScoreError> {
    let g = values.len();
    if g == 0 {
        return Err(ScoreError::Empty);
    }
    let total = ctx.sum(values);
    let mean = ctx.scale(total, 1.0 / g as f64);
    let centered: Vec<C::V> = values.iter().map(|&v| ctx.sub(v, mean)).collect();
    match mode {
        NormalizeMode::MeanOnly => Ok(centered),
        NormalizeMode::MeanStd => {
            let squares: Vec<C::V> = centered.iter().map(|&c| ctx.mul(c, c)).collect();
            let ss = ctx.sum(&squares);
            let denom_n = match std_kind {
                StdKind::Population => g as f64,
                StdKind::Sample => (g - 1).max(1) as f64,
            };
            let var = ctx.scale(ss, 1.0 / denom_n);
            if ctx.value(var) == 0.0 && epsilon == 0.0 {
                return Ok(centered);
            }
            // sqrt and reciprocal composed from exp/ln tape primitives
            let half_log = if ctx.value(var) == 0.0 {
                ctx.constant(0.0)
            } else {
                let lv = ctx.ln(var);
                ctx.scale(lv, 0.5)
            };
            let std = if ctx.value(var) == 0.0 {
                ctx.constant(0.0)
            } else {
                ctx.exp(half_log)
            };
            let eps = ctx.constant(epsilon);
            let denom = ctx.add(std, eps);
            let neg_log_denom = {
                let ld = ctx.ln(denom);
                ctx.neg(ld)
            };
            let inv_denom = ctx.exp(neg_log_denom);
            Ok(centered
                .iter()
                .map(|&c| ctx.mul(c, inv_denom))
                .collect())
        }
    }
}

/// Symmetric clamp to `[-max, max]`; out-of-range scores become constants.
pub fn clamp_scores_in<C: Context>(ctx: &mut C, scores: &mut [C::V], max: f64) {
    for s in scores.iter_mut() {
        *s = ctx.clamp_const(*s, -max, max);
    }
}

/// Group scores under the selected estimator, plain-value route.
pub fn scores_for(
    estimator: Estimator,
    proxies: &[RewardProxy],
    epsilon: f64,
    std_kind: StdKind,
) -> Result<ScoreVector, ScoreError> {
    let rhat: Vec<f64> = proxies.iter().map(|p| p.value).collect();
    let mut ctx = Values::new(&[]);
    let scores = match estimator {
        Estimator::Rloo => rloo_scores_in(&mut ctx, &rhat)?,
        Estimator::Grpo => {
            group_normalize_in(&mut ctx, &rhat, NormalizeMode::MeanStd, epsilon, std_kind)?
        }
        Estimator::DrGrpo => {
            group_normalize_in(&mut ctx, &rhat, NormalizeMode::MeanOnly, epsilon, std_kind)?
        }
    };
    Ok(ScoreVector { scores, estimator })
}

/// Leave-one-out scores over a proxy group.
pub fn rloo_scores(proxies: &[RewardProxy]) -> Result<ScoreVector, ScoreError> {
    scores_for(Estimator::Rloo, proxies, 0.0, StdKind::Population)
}

/// Plain-value group normalization with the population-std default.
pub fn group_normalize(
    values: &[f64],
    mode: NormalizeMode,
    epsilon: f64,
) -> Result<Vec<f64>, ScoreError> {
    let mut ctx = Values::new(&[]);
    group_normalize_in(&mut ctx, values, mode, epsilon, StdKind::Population)
}

/// Generalized advantage estimation by the standard backward recursion:
/// `A_t = delta_t + gamma * lam * A_{t+1}`, `delta_t = r_t + gamma * V_{t+1} - V_t`.
/// `values` carries one bootstrap entry past the last reward.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lam: f64,
) -> Result<AdvantageVector, ScoreError> {
    if values.len() != rewards.len() + 1 {
        return Err(ScoreError::GaeShape {
            rewards: rewards.len(),
            values: values.len(),
        });
    }
    let mut out = vec![0.0; rewards.len()];
    let mut carry = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        carry = delta + gamma * lam * carry;
        out[t] = carry;
    }
    Ok(AdvantageVector {
        values: out,
        gamma,
        lam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::SequenceLogProb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lp(per_token: Vec<f64>) -> SequenceLogProb {
        let total = per_token.iter().sum();
        SequenceLogProb { per_token, total }
    }

    #[test]
    fn proxy_of_identical_policies_is_zero() {
        let a = lp(vec![-0.3, -1.2]);
        let p = reward_proxy(&a, &a, 1.0).unwrap();
        assert_eq!(p.value, 0.0);
    }

    #[test]
    fn proxy_sums_token_diffs() {
        let cur = lp(vec![-0.1, -0.4]);
        let refp = lp(vec![-0.3, -0.3]);
        let p = reward_proxy(&cur, &refp, 1.0).unwrap();
        assert!((p.value - 0.1).abs() < 1e-12);
        assert_eq!(p.per_token.len(), 2);
    }

    #[test]
    fn proxy_is_linear_in_beta() {
        let cur = lp(vec![-0.1, -0.4, -2.0]);
        let refp = lp(vec![-0.3, -0.3, -1.0]);
        let p1 = reward_proxy(&cur, &refp, 1.0).unwrap();
        let p2 = reward_proxy(&cur, &refp, 2.0).unwrap();
        assert_eq!(p2.value, 2.0 * p1.value);
    }

    #[test]
    fn proxy_is_antisymmetric() {
        let cur = lp(vec![-0.5, -0.9]);
        let refp = lp(vec![-0.2, -1.7]);
        let fwd = reward_proxy(&cur, &refp, 1.3).unwrap();
        let bwd = reward_proxy(&refp, &cur, 1.3).unwrap();
        assert!((fwd.value + bwd.value).abs() < 1e-12);
    }

    #[test]
    fn proxy_rejects_length_mismatch() {
        let cur = lp(vec![-0.5]);
        let refp = lp(vec![-0.2, -1.7]);
        assert!(matches!(
            reward_proxy(&cur, &refp, 1.0),
            Err(ScoreError::LengthMismatch { .. })
        ));
    }

    fn proxies(vals: &[f64]) -> Vec<RewardProxy> {
        vals.iter()
            .map(|&v| RewardProxy {
                value: v,
                per_token: vec![v],
                beta: 1.0,
            })
            .collect()
    }

    #[test]
    fn rloo_hand_example() {
        let s = rloo_scores(&proxies(&[1.0, 0.0, -1.0])).unwrap();
        assert_eq!(s.scores, vec![1.5, 0.0, -1.5]);
    }

    #[test]
    fn rloo_constant_group_is_zero() {
        let s = rloo_scores(&proxies(&[0.7; 5])).unwrap();
        assert!(s.scores.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rloo_is_shift_invariant() {
        let base = [0.3, -1.4, 2.2, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
        let a = rloo_scores(&proxies(&base)).unwrap();
        let b = rloo_scores(&proxies(&shifted)).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rloo_rejects_singleton() {
        let err = rloo_scores(&proxies(&[1.0])).unwrap_err();
        assert!(err.to_string().contains("singleton"));
    }

    #[test]
    fn rloo_zero_sum_and_scaled_centering_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let g = rng.gen_range(2..=16);
            let vals: Vec<f64> = (0..g).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = rloo_scores(&proxies(&vals)).unwrap();
            let total: f64 = s.scores.iter().sum();
            assert!(total.abs() < 1e-9, "sum {total} for group {vals:?}");

            let centered =
                group_normalize(&vals, NormalizeMode::MeanOnly, 0.0).unwrap();
            let factor = g as f64 / (g - 1) as f64;
            for (psi, c) in s.scores.iter().zip(&centered) {
                assert!((psi - factor * c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_mean_only_on_zero_mean_input_is_identity() {
        let out = group_normalize(&[1.0, 0.0, -1.0], NormalizeMode::MeanOnly, 0.0).unwrap();
        assert_eq!(out, vec![1.0, 0.0, -1.0]);
    }

    #[test]
    fn normalize_mean_std_hand_example() {
        let out = group_normalize(&[1.0, 0.0, -1.0], NormalizeMode::MeanStd, 0.0).unwrap();
        // population std of (1, 0, -1) is sqrt(2/3)
        assert!((out[0] - 1.224744871391589).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] + 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn normalize_all_equal_group_is_zero() {
        let out = group_normalize(&[2.0; 4], NormalizeMode::MeanStd, 1e-8).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // epsilon 0 degenerates to centering rather than NaN
        let out0 = group_normalize(&[2.0; 4], NormalizeMode::MeanStd, 0.0).unwrap();
        assert!(out0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_standardizes_random_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..200 {
            let g = rng.gen_range(2..=16);
            let vals: Vec<f64> = (0..g).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let out = group_normalize(&vals, NormalizeMode::MeanStd, 0.0).unwrap();
            let mean: f64 = out.iter().sum::<f64>() / g as f64;
            let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var.sqrt() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn sample_std_divides_by_g_minus_one() {
        let vals = [1.0, 0.0, -1.0];
        let mut ctx = Values::new(&[]);
        let out = group_normalize_in(
            &mut ctx,
            &vals,
            NormalizeMode::MeanStd,
            0.0,
            StdKind::Sample,
        )
        .unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12); // sample std of (1,0,-1) is exactly 1
    }

    #[test]
    fn gae_single_step() {
        let a = gae_advantages(&[2.0], &[0.5, 0.0], 0.9, 0.7).unwrap();
        assert!((a.values[0] - (2.0 + 0.9 * 0.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gae_terminal_reward_telescopes() {
        let values = [0.3, -0.2, 0.8, 0.0];
        let rewards = [0.0, 0.0, 1.0];
        let a = gae_advantages(&rewards, &values, 1.0, 1.0).unwrap();
        for (t, adv) in a.values.iter().enumerate() {
            assert!((adv - (1.0 - values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_zero_inputs_zero_advantages() {
        let a = gae_advantages(&[0.0; 4], &[0.0; 5], 0.99, 0.95).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [0.1, -0.4, 0.9];
        let values = [0.2, 0.5, -0.1, 0.3];
        let a = gae_advantages(&rewards, &values, 0.9, 0.0).unwrap();
        for t in 0..3 {
            let td = rewards[t] + 0.9 * values[t + 1] - values[t];
            assert_eq!(a.values[t], td);
        }
    }

    #[test]
    fn gae_shape_mismatch_is_rejected() {
        assert!(matches!(
            gae_advantages(&[1.0, 2.0], &[0.0, 0.0], 1.0, 1.0),
            Err(ScoreError::GaeShape { .. })
        ));
    }

    #[test]
    fn estimator_ids_round_trip() {
        for e in [Estimator::Rloo, Estimator::Grpo, Estimator::DrGrpo] {
            assert_eq!(Estimator::from_id(e.id()), Some(e));
        }
        assert_eq!(Estimator::from_id("dapo"), None);
    }
}
