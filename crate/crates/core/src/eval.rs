//! Unbiased pass@k estimation and the policy evaluation harness.
//!
//! `pass@k = 1 - C(n-c, k) / C(n, k)`: the probability that a size-k
//! subset of n samples, c of them correct, contains at least one correct
//! sample. The binomials are evaluated exactly in big integers and the
//! ratio rounded once, so results match subset enumeration to the last
//! bit and n = 512 is nowhere near any overflow.

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{sample_sequences, PolicyParameters};
use crate::rng::derive_rng;
use crate::tasks::Task;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k needs 1 <= k <= n and c <= n (got n={n}, c={c}, k={k})")]
    BadCounts { n: usize, c: usize, k: usize },
    #[error("sample budget n={n} is smaller than the largest k={k}")]
    BudgetTooSmall { n: usize, k: usize },
    #[error("k grid is empty")]
    EmptyGrid,
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut acc = BigUint::from(1u32);
    for i in 1..=k {
        acc = acc * BigUint::from(n - k + i) / BigUint::from(i);
    }
    acc
}

/// Correctly rounded f64 of `num / den` for `0 <= num <= den`, `den > 0`.
/// The quotient is computed with 57+ significant bits plus a sticky bit,
/// which is enough for the final conversion to round correctly.
fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    use num_bigint::ToBigUint;
    let zero = 0u32.to_biguint().unwrap();
    if *num == zero {
        return 0.0;
    }
    let shift = 57 + den.bits() as i64 - num.bits() as i64;
    debug_assert!(shift >= 0);
    let scaled = num << (shift as usize);
    let q = &scaled / den;
    let r = scaled % den;
    let mut q64 = u64::try_from(&q).expect("quotient exceeds 64 bits");
    if r != zero {
        q64 |= 1; // sticky bit
    }
    (q64 as f64) * 2f64.powi(-(shift as i32))
}

/// Unbiased pass@k from n samples with c correct.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, EvalError> {
    if n == 0 || k == 0 || k > n || c > n {
        return Err(EvalError::BadCounts { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let den = binomial(n, k);
    let miss = binomial(n - c, k);
    let num = &den - &miss;
    Ok(ratio_to_f64(&num, &den))
}

/// Aggregated pass@k table over a grid, one row per task problem described
/// by its (n, c) counts.
pub fn pass_at_k_table(counts: &[(usize, usize)], k_grid: &[usize]) -> Result<Vec<f64>, EvalError> {
    if k_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut table = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut acc = 0.0;
        for &(n, c) in counts {
            acc += pass_at_k(n, c, k)?;
        }
        table.push(acc / counts.len().max(1) as f64);
    }
    Ok(table)
}

/// Evaluation protocol knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSpec {
    pub problems: usize,
    pub n: usize,
    pub k_grid: Vec<usize>,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            problems: 20,
            n: 32,
            k_grid: vec![1, 2, 4, 8],
            temperature: 0.6,
            top_p: 0.96,
            seed: 17,
        }
    }
}

/// Per-task pass@k table for one policy checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub checkpoint_id: String,
    pub problems: usize,
    pub n: usize,
    pub seed: u64,
    pub k_grid: Vec<usize>,
    pub pass_at_k: Vec<f64>,
    /// Per-problem correct counts, for downstream re-aggregation.
    pub correct_counts: Vec<usize>,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "task {}  checkpoint {}  problems {}  n {}  seed {}\n",
            self.task, self.checkpoint_id, self.problems, self.n, self.seed
        ));
        let header: Vec<String> = self.k_grid.iter().map(|k| format!("pass@{k}")).collect();
        out.push_str(&header.join("  "));
        out.push('\n');
        let row: Vec<String> = self
            .pass_at_k
            .iter()
            .zip(&header)
            .map(|(v, h)| format!("{:>width$.4}", v, width = h.len()))
            .collect();
        out.push_str(&row.join("  "));
        out.push('\n');
        out
    }
}

/// Samples `n` outputs per problem, verifies each, and aggregates the
/// unbiased pass@k over the grid. Deterministic given the seed.
pub fn evaluate_policy(
    params: &PolicyParameters,
    task: &Task,
    spec: &EvalSpec,
    checkpoint_id: &str,
) -> Result<EvalReport, EvalError> {
    let max_k = *spec.k_grid.iter().max().ok_or(EvalError::EmptyGrid)?;
    if spec.n < max_k {
        return Err(EvalError::BudgetTooSmall {
            n: spec.n,
            k: max_k,
        });
    }
    let mut counts = Vec::with_capacity(spec.problems);
    for p in 0..spec.problems {
        let mut rng = derive_rng(spec.seed, &[0xEAA1, p as u64]);
        let query = task.sample_query(&mut rng);
        let samples = sample_sequences(
            params,
            &query,
            spec.n,
            spec.temperature,
            spec.top_p,
            &mut rng,
        );
        let c = samples
            .iter()
            .filter(|(o, _)| task.verify(&query, o).is_correct())
            .count();
        counts.push((spec.n, c));
    }
    let table = pass_at_k_table(&counts, &spec.k_grid)?;
    Ok(EvalReport {
        task: task.id().to_string(),
        checkpoint_id: checkpoint_id.to_string(),
        problems: spec.problems,
        n: spec.n,
        seed: spec.seed,
        k_grid: spec.k_grid.clone(),
        pass_at_k: table,
        correct_counts: counts.iter().map(|&(_, c)| c).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{TaskConfig, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_correct_samples_means_zero() {
        for k in 1..=10 {
            assert_eq!(pass_at_k(10, 0, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_budget_with_any_correct_is_one() {
        for c in 1..=7 {
            assert_eq!(pass_at_k(7, c, 7).unwrap(), 1.0);
        }
    }

    #[test]
    fn hand_example_four_choose_two() {
        // One of the C(4,2) = 6 subsets is all-incorrect.
        let v = pass_at_k(4, 2, 2).unwrap();
        assert_eq!(v, 1.0 - 1.0 / 6.0);
    }

    #[test]
    fn pass_at_one_is_exactly_the_accuracy() {
        for n in 1..=20 {
            for c in 0..=n {
                assert_eq!(pass_at_k(n, c, 1).unwrap(), c as f64 / n as f64);
            }
        }
    }

    #[test]
    fn monotone_in_c_and_k() {
        for n in 1..=20usize {
            for k in 1..=n {
                let mut prev = -1.0;
                for c in 0..=n {
                    let v = pass_at_k(n, c, k).unwrap();
                    assert!(v >= prev);
                    prev = v;
                }
            }
            for c in 0..=n {
                let mut prev = -1.0;
                for k in 1..=n {
                    let v = pass_at_k(n, c, k).unwrap();
                    assert!(v >= prev);
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn bad_counts_are_rejected() {
        assert!(pass_at_k(4, 5, 1).is_err());
        assert!(pass_at_k(4, 2, 5).is_err());
        assert!(pass_at_k(4, 2, 0).is_err());
    }

    #[test]
    fn matches_exhaustive_subset_enumeration_bitwise() {
        // Oracle: walk every k-subset of n indexed samples (first c correct)
        // and count subsets containing at least one correct sample.
        fn oracle(n: usize, c: usize, k: usize) -> f64 {
            let mut hit = 0u64;
            let mut total = 0u64;
            let mut subset: Vec<usize> = (0..k).collect();
            loop {
                total += 1;
                if subset.iter().any(|&i| i < c) {
                    hit += 1;
                }
                // next combination in lexicographic order
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
        for n in 1..=10 {
            for c in 0..=n {
                for k in 1..=n {
                    let lib = pass_at_k(n, c, k).unwrap();
                    let oracle_v = oracle(n, c, k);
                    assert_eq!(
                        lib.to_bits(),
                        oracle_v.to_bits(),
                        "n={n} c={c} k={k}: {lib} vs {oracle_v}"
                    );
                }
            }
        }
    }

    #[test]
    fn large_n_is_finite_and_sane() {
        let v = pass_at_k(512, 100, 256).unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        assert!(v > 0.999_999); // missing 256 draws with 100/512 correct is astronomically unlikely
    }

    #[test]
    fn aggregation_handles_all_correct() {
        let table = pass_at_k_table(&[(10, 10), (10, 10)], &[1, 2, 4]).unwrap();
        assert_eq!(table, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn report_is_deterministic_and_monotone() {
        let task = Task::from_id("modsum", &TaskConfig::default()).unwrap();
        let arch = task.arch(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PolicyParameters::init(arch, &mut rng).unwrap();
        let spec = EvalSpec {
            problems: 4,
            n: 16,
            k_grid: vec![1, 2, 4, 8, 16],
            temperature: 1.0,
            top_p: 1.0,
            seed: 5,
        };
        let a = evaluate_policy(&params, &task, &spec, "test").unwrap();
        let b = evaluate_policy(&params, &task, &spec, "test").unwrap();
        assert_eq!(a.pass_at_k, b.pass_at_k);
        for w in a.pass_at_k.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn budget_smaller_than_k_is_rejected() {
        let task = Task::new(TaskKind::Paren, 5, true).unwrap();
        let arch = task.arch(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = PolicyParameters::init(arch, &mut rng).unwrap();
        let spec = EvalSpec {
            problems: 2,
            n: 4,
            k_grid: vec![1, 8],
            ..EvalSpec::default()
        };
        assert!(matches!(
            evaluate_policy(&params, &task, &spec, "x"),
            Err(EvalError::BudgetTooSmall { .. })
        ));
    }
}
