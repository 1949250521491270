//! `sapo`: every pipeline stage as a subcommand over plain JSONL and
//! checkpoint files, plus `run` for the full self-improvement loop.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors. Failures also print one JSON line on stderr.

mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sapo_core::baselines::LabelMethod;
use sapo_core::evalkit::FirstErrorRule;
use sapo_core::reasoner::RolloutCount;
use sapo_core::Error;

use crate::source::SourceArgs;

#[derive(Parser, Debug)]
#[command(name = "sapo", version, about = "Step-level process supervision and preference alignment")]
struct Cli {
    /// Worker threads for parallel labeling and sampling (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic environment utilities.
    Synthenv {
        #[command(subcommand)]
        command: SynthenvCommand,
    },
    /// Sample deduplicated trajectories for every question.
    Sample(SampleArgs),
    /// Label the steps of trajectories with one labeling method.
    Label(LabelArgs),
    /// Train (or warm-start) the step verifier on labeled steps.
    TrainVerifier(TrainVerifierArgs),
    /// Score a pool with the verifier and build preference pairs.
    BuildPrefs(BuildPrefsArgs),
    /// Align a synthetic policy on preference pairs.
    Align(AlignArgs),
    /// Run the self-improvement loop.
    Run(RunArgs),
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Compare the labeling cost of several methods on the same trajectories.
    BenchCost(BenchCostArgs),
    /// Export the pool, labels and preference pairs of a run as JSONL.
    Export(ExportArgs),
}

#[derive(Subcommand, Debug)]
enum SynthenvCommand {
    /// Generate an environment and write it as JSON.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    branching: usize,
    #[arg(long, default_value_t = 50)]
    questions: usize,
    #[arg(long, default_value_t = 12)]
    width: usize,
    #[arg(long, default_value_t = 0.2)]
    difficulty: f64,
    /// Also write the questions as JSONL (id, prompt, gold_answer).
    #[arg(long)]
    questions_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Trajectories per question.
    #[arg(short = 'k', long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 3)]
    retry_factor: usize,
    /// Existing pool whose trajectories count as duplicates.
    #[arg(long)]
    exclude: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    /// Rollouts per estimation point, or `all` to enumerate.
    #[arg(long, default_value = "8", value_parser = parse_rollouts)]
    rollouts: RolloutCount,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Score threshold separating correct from incorrect steps.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct VerifierArgs {
    /// Verifier checkpoint; an untrained verifier (every score 0.5) when omitted.
    #[arg(long)]
    verifier: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_parser = parse_method)]
    method: LabelMethod,
    /// Trajectories JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    /// Labeled step records JSONL.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, required = true)]
    seed: u64,
    #[command(flatten)]
    rollout: RolloutArgs,
    #[command(flatten)]
    verifier: VerifierArgs,
}

#[derive(Args, Debug)]
struct TrainVerifierArgs {
    /// Labeled step records; repeat to merge several files.
    #[arg(long, required = true)]
    labels: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Warm-start checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    #[arg(long, default_value_t = 2.0)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, required = true)]
    seed: u64,
    /// Per-epoch loss trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildPrefsArgs {
    /// Trajectories JSONL.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    verifier: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum reward gap between winner and loser.
    #[arg(long, default_value_t = 0.3)]
    eta: f64,
    #[arg(long, default_value_t = 4)]
    max_pairs: usize,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    env: PathBuf,
    /// Starting policy; uniform when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    prefs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for a new run.
    #[arg(long, conflicts_with = "resume")]
    out: Option<PathBuf>,
    /// Continue the run stored in this directory with its saved configuration.
    #[arg(long, conflicts_with_all = ["config", "set", "seed"])]
    resume: Option<PathBuf>,
    /// Iterations to reach (default: the configured count).
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. `--set rollout_count=all`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Rule {
    Threshold,
    DeltaArgmax,
}

impl From<Rule> for FirstErrorRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Threshold => FirstErrorRule::Threshold,
            Rule::DeltaArgmax => FirstErrorRule::DeltaArgmax,
        }
    }
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// First-error accuracy on a process benchmark.
    StepAcc {
        #[arg(long)]
        verifier: PathBuf,
        /// Benchmark JSONL (question_id, prompt, gold_answer, steps, first_error).
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Rule::Threshold)]
        rule: Rule,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-of-N accuracy of verifier reranking, with pass@1 for reference.
    Bon {
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Gold answers from an environment ...
        #[arg(long, conflicts_with = "questions", required_unless_present = "questions")]
        env: Option<PathBuf>,
        /// ... or from a questions JSONL.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disagreement between verifier and Monte Carlo labels on a probe set.
    Gap {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long)]
        verifier: PathBuf,
        /// Probe trajectories JSONL.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, required = true)]
        seed: u64,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Share of trajectories whose pre-assigned first error is wrong.
    Sve {
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Environment providing reference labels.
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct BenchCostArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Trajectories JSONL.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "saps,shepherd,omega", value_parser = parse_method)]
    methods: Vec<LabelMethod>,
    #[arg(long, required = true)]
    seed: u64,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-method summary CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Record wall-clock seconds (makes the report machine-dependent).
    #[arg(long)]
    wall_time: bool,
    #[command(flatten)]
    rollout: RolloutArgs,
    #[command(flatten)]
    verifier: VerifierArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Iteration to export (default: latest).
    #[arg(long)]
    iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_rollouts(s: &str) -> Result<RolloutCount, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<LabelMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Schema(_) | Error::NonMonotone { .. } => "schema",
        Error::InvalidPrefix(_) | Error::UnknownQuestion(_) => "input",
        Error::Empty(_) => "empty",
        Error::Sampling { .. } => "sampling",
        Error::Remote(_) => "remote",
        Error::Checkpoint { .. } => "checkpoint",
        Error::Io { .. } => "io",
        Error::Json(_) | Error::Csv(_) => "format",
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "status": "error", "kind": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
                    if !e.use_stderr() =>
                {
                    0
                }
                _ => 2,
            };
            let _ = e.print();
            if code != 0 {
                let rendered = e.render().to_string();
                let head: Vec<&str> = rendered.lines().take_while(|l| !l.trim().is_empty()).map(str::trim).collect();
                error_line("usage", head.join(" ").trim_start_matches("error: "));
            }
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    if let Some(n) = cli.jobs {
        if n == 0 {
            error_line("config", "--jobs must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error_line("config", &e.to_string());
            return ExitCode::from(2);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_line(error_kind(&e), &e.to_string());
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
