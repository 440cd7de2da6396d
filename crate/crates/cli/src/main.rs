//! `pacs-lab`: train reward-prediction and clipped-ratio policies on
//! synthetic verifiable tasks, evaluate pass@k, sweep ablation grids, and
//! run the verification suites.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_eval, cmd_sweep, cmd_train, cmd_verify, CliError};
use settings::{Settings, Source};

#[derive(Parser)]
#[command(name = "pacs-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and a final evaluation into a run directory
    Train(RunArgs),
    /// Evaluate a checkpoint's pass@k on a task
    Eval(EvalArgs),
    /// Run one training job per grid point and aggregate a summary table
    Sweep(RunArgs),
    /// Execute the oracle/invariant suites and print one verdict per suite
    Verify,
}

/// Flag overrides mirror config-file keys one for one; precedence is
/// CLI > file > defaults.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Configuration file (flat key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory root (also settable via PACS_LAB_OUT)
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "group-size")]
    group_size: Option<String>,
    #[arg(long = "groups-per-step")]
    groups_per_step: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long = "gradient-mode")]
    gradient_mode: Option<String>,
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long = "weight-scope")]
    weight_scope: Option<String>,
    #[arg(long = "clip-eps")]
    clip_eps: Option<String>,
    #[arg(long = "kl-beta")]
    kl_beta: Option<String>,
    #[arg(long = "reset-period")]
    reset_period: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long = "top-p")]
    top_p: Option<String>,
    #[arg(long = "context-window")]
    context_window: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long = "std-mode")]
    std_mode: Option<String>,
    #[arg(long = "score-clamp")]
    score_clamp: Option<String>,
    #[arg(long = "inner-epochs")]
    inner_epochs: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    lam: Option<String>,
    #[arg(long = "value-hidden")]
    value_hidden: Option<String>,
    #[arg(long)]
    modulus: Option<String>,
    #[arg(long = "copy-symbols")]
    copy_symbols: Option<String>,
    #[arg(long = "copy-len")]
    copy_len: Option<String>,
    #[arg(long = "t-max")]
    t_max: Option<String>,
    #[arg(long = "use-terminal")]
    use_terminal: Option<String>,
    #[arg(long = "eval-problems")]
    eval_problems: Option<String>,
    #[arg(long = "eval-n")]
    eval_n: Option<String>,
    #[arg(long = "eval-k")]
    eval_k: Option<String>,
    #[arg(long = "eval-temperature")]
    eval_temperature: Option<String>,
    #[arg(long = "eval-top-p")]
    eval_top_p: Option<String>,
    #[arg(long = "eval-seed")]
    eval_seed: Option<String>,
    #[arg(long = "sweep-beta")]
    sweep_beta: Option<String>,
    #[arg(long = "sweep-estimator")]
    sweep_estimator: Option<String>,
    #[arg(long = "sweep-weighting")]
    sweep_weighting: Option<String>,
    #[arg(long = "sweep-gradient-mode")]
    sweep_gradient_mode: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Policy or training checkpoint (JSON)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the written report (default: current directory)
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Overrides {
    fn apply(&self, settings: &mut Settings) -> Result<(), CliError> {
        if let Some(path) = &self.config {
            settings
                .load_file(path)
                .map_err(CliError::Usage)?;
        }
        let pairs: [(&str, &Option<String>); 40] = [
            ("algo", &self.algo),
            ("task", &self.task),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("group-size", &self.group_size),
            ("groups-per-step", &self.groups_per_step),
            ("lr", &self.lr),
            ("beta", &self.beta),
            ("estimator", &self.estimator),
            ("gradient-mode", &self.gradient_mode),
            ("weighting", &self.weighting),
            ("weight-scope", &self.weight_scope),
            ("clip-eps", &self.clip_eps),
            ("kl-beta", &self.kl_beta),
            ("reset-period", &self.reset_period),
            ("temperature", &self.temperature),
            ("top-p", &self.top_p),
            ("context-window", &self.context_window),
            ("hidden", &self.hidden),
            ("std-mode", &self.std_mode),
            ("score-clamp", &self.score_clamp),
            ("inner-epochs", &self.inner_epochs),
            ("gamma", &self.gamma),
            ("lam", &self.lam),
            ("value-hidden", &self.value_hidden),
            ("modulus", &self.modulus),
            ("copy-symbols", &self.copy_symbols),
            ("copy-len", &self.copy_len),
            ("t-max", &self.t_max),
            ("use-terminal", &self.use_terminal),
            ("eval-problems", &self.eval_problems),
            ("eval-n", &self.eval_n),
            ("eval-k", &self.eval_k),
            ("eval-temperature", &self.eval_temperature),
            ("eval-top-p", &self.eval_top_p),
            ("eval-seed", &self.eval_seed),
            ("sweep-beta", &self.sweep_beta),
            ("sweep-estimator", &self.sweep_estimator),
            ("sweep-weighting", &self.sweep_weighting),
            ("sweep-gradient-mode", &self.sweep_gradient_mode),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                settings.set(key, v, Source::Cli).map_err(CliError::Usage)?;
            }
        }
        if let Some(out) = &self.out {
            settings
                .set("out", &out.display().to_string(), Source::Cli)
                .map_err(CliError::Usage)?;
        }
        Ok(())
    }

    fn settings(&self) -> Result<Settings, CliError> {
        let mut settings = Settings::defaults();
        self.apply(&mut settings)?;
        Ok(settings)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(&args.overrides.settings()?).map(|_| ()),
        Command::Eval(args) => {
            let settings = args.overrides.settings()?;
            cmd_eval(&settings, &args.checkpoint, args.out.as_deref())
        }
        Command::Sweep(args) => cmd_sweep(&args.overrides.settings()?).map(|_| ()),
        Command::Verify => cmd_verify(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap uses exit code 2 for usage; this tool reserves 2 for
            // runtime failures, so map parse problems to 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
