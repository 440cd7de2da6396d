//! Run-directory execution: metrics log, checkpoints, failure marker.
//!
//! Layout under the run directory, all plain text:
//! - `config.txt`        resolved key = value configuration
//! - `metrics.jsonl`     one MetricsRecord per line, ordered by step
//! - `checkpoints/`      periodic full training states (JSON)
//! - `checkpoint_final.json`  final state (also written on failure)
//! - `eval_final.json` / `eval_final.txt`  optional end-of-run evaluation
//! - `FAILED`            marker with a reason, present only on failure

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::eval::{evaluate_policy, EvalReport, EvalSpec};
use crate::trainer::{Trainer, TrainerConfig, TrainError};

pub struct RunOutcome {
    pub completed_steps: usize,
    pub failed: bool,
    pub metrics: Vec<crate::trainer::MetricsRecord>,
    pub final_checkpoint: PathBuf,
    pub final_eval: Option<EvalReport>,
}

/// Consecutive numerically-failed steps tolerated before the run aborts.
const MAX_CONSECUTIVE_FAILURES: usize = 25;

pub fn run_training(
    config: &TrainerConfig,
    run_dir: &Path,
    resolved_config: &str,
    final_eval: Option<&EvalSpec>,
) -> Result<RunOutcome, TrainError> {
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join("config.txt"), resolved_config)?;
    if config.inner_epochs > 1 {
        eprintln!(
            "WARNING: inner-epochs = {} reuses rollouts off-policy with no importance correction",
            config.inner_epochs
        );
    }

    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics_file = fs::File::create(run_dir.join("metrics.jsonl"))?;
    let mut metrics = Vec::with_capacity(config.total_steps);

    let write_checkpoint = |trainer: &Trainer, path: &Path| -> Result<(), TrainError> {
        let text = serde_json::to_string(&trainer.state())?;
        fs::write(path, text)?;
        Ok(())
    };
    write_checkpoint(
        &trainer,
        &run_dir.join("checkpoints").join("step_00000.json"),
    )?;

    let cadence = config.checkpoint_cadence();
    let mut consecutive_failures = 0usize;
    let mut aborted: Option<String> = None;
    for step in 1..=config.total_steps {
        let record = trainer.step()?;
        serde_json::to_writer(&mut metrics_file, &record)?;
        metrics_file.write_all(b"\n")?;
        metrics_file.flush()?;
        if record.failed {
            consecutive_failures += 1;
        } else {
            consecutive_failures = 0;
        }
        metrics.push(record);
        if step % cadence == 0 {
            write_checkpoint(
                &trainer,
                &run_dir.join("checkpoints").join(format!("step_{step:05}.json")),
            )?;
        }
        if !trainer.params().theta().iter().all(|t| t.is_finite()) {
            aborted = Some(format!("parameters became non-finite at step {step}"));
            break;
        }
        if consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
            aborted = Some(format!(
                "{MAX_CONSECUTIVE_FAILURES} consecutive failed steps, last at step {step}"
            ));
            break;
        }
    }

    let final_checkpoint = if config.total_steps == 0 {
        run_dir.join("checkpoints").join("step_00000.json")
    } else {
        let path = run_dir.join("checkpoint_final.json");
        write_checkpoint(&trainer, &path)?;
        path
    };

    if let Some(reason) = &aborted {
        fs::write(run_dir.join("FAILED"), format!("{reason}\n"))?;
        return Ok(RunOutcome {
            completed_steps: trainer.completed_steps(),
            failed: true,
            metrics,
            final_checkpoint,
            final_eval: None,
        });
    }

    let final_eval = match final_eval {
        Some(spec) => {
            let report = evaluate_policy(
                trainer.params(),
                &config.task,
                spec,
                &final_checkpoint.display().to_string(),
            )?;
            fs::write(
                run_dir.join("eval_final.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            fs::write(run_dir.join("eval_final.txt"), report.render_table())?;
            Some(report)
        }
        None => None,
    };

    Ok(RunOutcome {
        completed_steps: trainer.completed_steps(),
        failed: false,
        metrics,
        final_checkpoint,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{Task, TaskConfig};
    use crate::trainer::{Algorithm, MetricsRecord};

    fn tiny_config() -> TrainerConfig {
        let task = Task::from_id(
            "modsum",
            &TaskConfig {
                modulus: 4,
                max_len: 2,
                ..TaskConfig::default()
            },
        )
        .unwrap();
        let mut cfg = TrainerConfig::new(Algorithm::Pacs, task);
        cfg.group_size = 3;
        cfg.groups_per_step = 1;
        cfg.context_window = 2;
        cfg.hidden = 6;
        cfg.total_steps = 5;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.total_steps = 0;
        let outcome = run_training(&cfg, dir.path(), "algo = pacs\n", None).unwrap();
        assert_eq!(outcome.completed_steps, 0);
        assert!(outcome.metrics.is_empty());
        assert!(dir.path().join("checkpoints/step_00000.json").exists());
        assert!(!dir.path().join("checkpoint_final.json").exists());
        let metrics = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert!(metrics.is_empty());
    }

    #[test]
    fn run_writes_ordered_metrics_and_final_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let outcome = run_training(&cfg, dir.path(), "algo = pacs\n", None).unwrap();
        assert!(!outcome.failed);
        assert_eq!(outcome.completed_steps, 5);
        assert!(dir.path().join("checkpoint_final.json").exists());
        assert!(!dir.path().join("FAILED").exists());
        let text = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let steps: Vec<usize> = text
            .lines()
            .map(|l| serde_json::from_str::<MetricsRecord>(l).unwrap().step)
            .collect();
        assert_eq!(steps, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn reset_events_are_countable_from_the_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.total_steps = 8;
        cfg.reset_period = Some(2);
        let outcome = run_training(&cfg, dir.path(), "", None).unwrap();
        let resets = outcome.metrics.iter().filter(|m| m.reference_reset).count();
        assert_eq!(resets, 4);
    }

    #[test]
    fn final_eval_files_are_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.total_steps = 2;
        let spec = EvalSpec {
            problems: 2,
            n: 4,
            k_grid: vec![1, 2, 4],
            temperature: 1.0,
            top_p: 1.0,
            seed: 3,
        };
        let outcome = run_training(&cfg, dir.path(), "", Some(&spec)).unwrap();
        let report = outcome.final_eval.unwrap();
        assert_eq!(report.k_grid, vec![1, 2, 4]);
        assert!(dir.path().join("eval_final.json").exists());
        assert!(dir.path().join("eval_final.txt").exists());
    }
}
