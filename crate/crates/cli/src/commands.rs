//! Command implementations. Usage problems exit 1, runtime failures 2.

use std::fs;
use std::path::{Path, PathBuf};

use pacs_core::eval::evaluate_policy;
use pacs_core::policy::{PolicyCheckpoint, PolicyParameters};
use pacs_core::tasks::Task;
use pacs_core::trainer::{run_training, TrainerConfig, TrainingCheckpoint};
use pacs_core::verify::{run_all, VerifyHooks};

use crate::settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage<E: ToString>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime<E: ToString>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Output root: `--out`/config override, else $PACS_LAB_OUT, else ./runs.
fn out_root(settings: &Settings) -> PathBuf {
    if let Some(dir) = settings.out_dir() {
        return PathBuf::from(dir);
    }
    std::env::var_os("PACS_LAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir_for(settings: &Settings, config: &TrainerConfig) -> PathBuf {
    out_root(settings).join(format!(
        "{}-{}-s{}",
        config.algorithm.id(),
        config.task.id(),
        config.seed
    ))
}

pub fn cmd_train(settings: &Settings) -> Result<PathBuf, CliError> {
    let config = settings.trainer_config().map_err(usage)?;
    let eval_spec = settings.eval_spec().map_err(usage)?;
    let run_dir = run_dir_for(settings, &config);
    let outcome = run_training(
        &config,
        &run_dir,
        &settings.resolved_text(),
        Some(&eval_spec),
    )
    .map_err(runtime)?;
    if outcome.failed {
        return Err(CliError::Runtime(format!(
            "run failed; partial log and FAILED marker in {}",
            run_dir.display()
        )));
    }
    let last_acc = outcome
        .metrics
        .last()
        .map(|m| m.group_accuracy)
        .unwrap_or(0.0);
    println!(
        "run complete: {} steps, final batch accuracy {:.3}",
        outcome.completed_steps, last_acc
    );
    if let Some(report) = &outcome.final_eval {
        print!("{}", report.render_table());
    }
    println!("run directory: {}", run_dir.display());
    Ok(run_dir)
}

/// Accept either a full training checkpoint or a bare policy checkpoint.
pub fn load_policy(path: &Path) -> Result<PolicyParameters, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if let Ok(full) = serde_json::from_str::<TrainingCheckpoint>(&text) {
        return PolicyParameters::from_checkpoint(full.policy).map_err(runtime);
    }
    let bare: PolicyCheckpoint = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{} is not a checkpoint: {e}", path.display())))?;
    PolicyParameters::from_checkpoint(bare).map_err(runtime)
}

fn check_task_matches(task: &Task, params: &PolicyParameters) -> Result<(), CliError> {
    let arch = params.arch();
    if task.vocab() != arch.vocab
        || task.terminal() != arch.terminal
        || task.max_len() != arch.max_len
    {
        return Err(CliError::Usage(format!(
            "task {:?} (vocab {}, max len {}) does not match the checkpoint architecture (vocab {}, max len {})",
            task.id(),
            task.vocab(),
            task.max_len(),
            arch.vocab,
            arch.max_len,
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    settings: &Settings,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let task = settings.task().map_err(usage)?;
    let spec = settings.eval_spec().map_err(usage)?;
    let max_k = spec.k_grid.iter().max().copied().unwrap_or(1);
    if spec.n < max_k {
        return Err(CliError::Usage(format!(
            "eval-n = {} is smaller than the largest k = {max_k}",
            spec.n
        )));
    }
    let params = load_policy(checkpoint)?;
    check_task_matches(&task, &params)?;
    let report = evaluate_policy(&params, &task, &spec, &checkpoint.display().to_string())
        .map_err(runtime)?;
    print!("{}", report.render_table());
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(runtime)?;
    fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    fs::write(out_dir.join("eval_report.txt"), report.render_table()).map_err(runtime)?;
    Ok(())
}

pub fn cmd_verify() -> Result<(), CliError> {
    let results = run_all(VerifyHooks::default());
    let mut ok = true;
    for r in &results {
        println!("{}", r.line());
        ok &= r.passed;
    }
    if ok {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        Err(CliError::Usage("verification failed".into()))
    }
}

struct SweepPoint {
    label: String,
    assignments: Vec<(&'static str, String)>,
}

fn cartesian(axes: &[(&'static str, Vec<String>)]) -> Vec<SweepPoint> {
    let mut points = vec![SweepPoint {
        label: String::new(),
        assignments: Vec::new(),
    }];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for v in values {
                let mut assignments = p.assignments.clone();
                assignments.push((key, v.clone()));
                let piece = format!("{key}={v}");
                let label = if p.label.is_empty() {
                    piece
                } else {
                    format!("{}_{piece}", p.label)
                };
                next.push(SweepPoint { label, assignments });
            }
        }
        points = next;
    }
    points
}

/// Default beta grid when no axis is configured, mirroring the standard
/// proxy-scale ablation.
const DEFAULT_BETA_AXIS: &str = "0.1,0.5,1,2,10";

pub fn cmd_sweep(settings: &Settings) -> Result<PathBuf, CliError> {
    let mut base = settings.clone();
    if base.sweep_axes().map_err(usage)?.is_empty() {
        base.set("sweep-beta", DEFAULT_BETA_AXIS, crate::settings::Source::Default)
            .expect("known key");
    }
    let axes = base.sweep_axes().map_err(usage)?;
    let points = cartesian(&axes);
    let sweep_dir = out_root(settings).join("sweep");
    fs::create_dir_all(&sweep_dir).map_err(runtime)?;

    let mut rows: Vec<serde_json::Value> = Vec::new();
    let mut any_failed = false;
    let eval_spec = base.eval_spec().map_err(usage)?;
    for point in &points {
        let mut point_settings = base.clone();
        for (key, value) in &point.assignments {
            point_settings
                .set(key, value, crate::settings::Source::Sweep)
                .map_err(usage)?;
        }
        let config = point_settings.trainer_config().map_err(usage)?;
        let run_dir = sweep_dir.join(&point.label);
        let status = match run_training(
            &config,
            &run_dir,
            &point_settings.resolved_text(),
            Some(&eval_spec),
        ) {
            Ok(outcome) if !outcome.failed => {
                let report = outcome.final_eval.as_ref();
                rows.push(serde_json::json!({
                    "point": point.label,
                    "assignments": point.assignments.iter()
                        .map(|(k, v)| (k.to_string(), v.clone()))
                        .collect::<std::collections::BTreeMap<_, _>>(),
                    "status": "ok",
                    "k_grid": report.map(|r| r.k_grid.clone()),
                    "pass_at_k": report.map(|r| r.pass_at_k.clone()),
                }));
                "ok"
            }
            Ok(_) => {
                any_failed = true;
                rows.push(serde_json::json!({
                    "point": point.label,
                    "status": "failed",
                }));
                "failed"
            }
            Err(e) => {
                any_failed = true;
                rows.push(serde_json::json!({
                    "point": point.label,
                    "status": "error",
                    "error": e.to_string(),
                }));
                "error"
            }
        };
        println!("sweep point {} -> {status}", point.label);
    }

    // plot-ready grid: one line per point, tab-separated
    let mut grid = String::from("point\tstatus");
    for k in &eval_spec.k_grid {
        grid.push_str(&format!("\tpass@{k}"));
    }
    grid.push('\n');
    for row in &rows {
        let point = row["point"].as_str().unwrap_or("?");
        let status = row["status"].as_str().unwrap_or("?");
        grid.push_str(&format!("{point}\t{status}"));
        match row["pass_at_k"].as_array() {
            Some(vals) => {
                for v in vals {
                    grid.push_str(&format!("\t{:.6}", v.as_f64().unwrap_or(f64::NAN)));
                }
            }
            None => {
                for _ in &eval_spec.k_grid {
                    grid.push_str("\t-");
                }
            }
        }
        grid.push('\n');
    }
    fs::write(sweep_dir.join("summary.tsv"), &grid).map_err(runtime)?;
    fs::write(
        sweep_dir.join("summary.json"),
        serde_json::to_string_pretty(&rows).map_err(runtime)?,
    )
    .map_err(runtime)?;
    println!("sweep summary: {}", sweep_dir.join("summary.tsv").display());

    if any_failed {
        Err(CliError::Runtime(format!(
            "some sweep points failed; summary still written to {}",
            sweep_dir.display()
        )))
    } else {
        Ok(sweep_dir)
    }
}
