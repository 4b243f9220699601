use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use medvidqa::metrics::format_report;
use medvidqa::pipeline::{
    execute, Command, ExecutionSummary, Overrides, PipelineConfig, PipelineError,
};
use medvidqa::retrieval::Strategy;

#[derive(Debug, Parser)]
#[command(
    name = "medvidqa",
    version,
    about = "Medical video retrieval, answer localization and step captioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "medvidqa.toml")]
    config: PathBuf,

    /// Retrieval strategy: run1..run5 or its full name.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Videos kept per query.
    #[arg(short = 'k', global = true)]
    k: Option<usize>,

    /// IoU at or above which visual and textual spans agree.
    #[arg(long, global = true)]
    theta: Option<f64>,

    /// Use offline embedders and recorded chat replies.
    #[arg(long, global = true)]
    stub: bool,

    /// Worker threads for stage-internal parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Rank cutoff for nDCG; the whole run when omitted.
    #[arg(long = "ndcg-cutoff", global = true)]
    ndcg_cutoff: Option<usize>,

    /// Run file to evaluate instead of the one in the output directory.
    #[arg(long, global = true)]
    run: Option<PathBuf>,

    /// Step file to evaluate instead of the one in the output directory.
    #[arg(long, global = true)]
    steps: Option<PathBuf>,

    /// Overrides `output_dir` from the config.
    #[arg(long = "output-dir", global = true)]
    output_dir: Option<PathBuf>,

    /// Repeat for more log detail.
    #[arg(short = 'v', long = "verbose", action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Cmd {
    /// Load and validate the corpus, topics and judgments.
    Ingest,
    /// Rank videos for every topic.
    Retrieve,
    /// Predict answer spans in each topic's top video.
    Localize,
    /// Generate step captions.
    Stepcap,
    /// Score a run file against the qrels.
    EvalRetrieval,
    /// Score step captions against the gold steps.
    EvalSteps,
    /// Every stage in order.
    Pipeline,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Ingest => Command::Ingest,
            Cmd::Retrieve => Command::Retrieve,
            Cmd::Localize => Command::Localize,
            Cmd::Stepcap => Command::Stepcap,
            Cmd::EvalRetrieval => Command::EvalRetrieval,
            Cmd::EvalSteps => Command::EvalSteps,
            Cmd::Pipeline => Command::Pipeline,
        }
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(s) = &cli.strategy {
        cfg.retrieval.strategy = s
            .parse::<Strategy>()
            .map_err(|e| PipelineError::Usage(e.to_string()))?;
    }
    if let Some(k) = cli.k {
        cfg.retrieval.k = k;
    }
    if let Some(t) = cli.theta {
        cfg.theta = t;
    }
    if cli.stub {
        cfg.stub_mode = true;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if cli.ndcg_cutoff.is_some() {
        cfg.ndcg_cutoff = cli.ndcg_cutoff;
    }
    if let Some(o) = &cli.output_dir {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn print_summary(summary: &ExecutionSummary) {
    for s in &summary.stages {
        let status = serde_json::to_value(s.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        println!("{:<16}{status}", s.stage);
    }
    println!("service requests: {}", summary.service_requests);
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    if let Some(report) = &summary.report {
        print!("{}", format_report(report));
    }
}

fn fail(e: &PipelineError) -> ExitCode {
    let msg = serde_json::json!({ "error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() });
    eprintln!("{msg}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&PipelineError::Usage(e.to_string().trim_end().to_string())),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = build_config(&cli).and_then(|cfg| {
        let overrides = Overrides {
            run_path: cli.run.clone(),
            steps_path: cli.steps.clone(),
        };
        execute(cli.command.into(), &cfg, &overrides)
    });
    match result {
        Ok(summary) => {
            print_summary(&summary);
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
