//! Desk-scale laboratory for policy optimization from verifiable binary
//! rewards.
//!
//! The centerpiece recasts reward maximization as supervised prediction:
//! a policy-parameterized score is pushed through a sigmoid and trained
//! with cross-entropy against the verifier's verdict, which couples the
//! policy-gradient (actor) and reward-estimation (critic) updates inside
//! one parameter set. Clipped-ratio baselines (token-mean PPO and the
//! group-normalized variant) train on the same rollouts for comparison.
//!
//! Everything is small enough to verify exactly: scalar-graph reverse-mode
//! differentiation checked by finite differences, policies whose output
//! distributions enumerate exactly, and rule-based verifiers over
//! synthetic tasks.

pub mod autodiff;
pub mod eval;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod scores;
pub mod tasks;
pub mod trainer;
pub mod verify;
