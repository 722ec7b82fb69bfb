use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use seqfair::config::{DatasetSection, ExperimentConfig, GroupsSection};
use seqfair::data::{DatasetKind, Split};
use seqfair::eval::EvalOptions;
use seqfair::groups::{Scheme, SplitMode, SplitName};
use seqfair::pipeline::{
    annotate_stage, evaluate_stage, parse_stages, prepare_stage, report_stage, reproduce_table, run_pipeline,
    sweep_stage, Stage, StageReport, StageStatus, TableId,
};
use seqfair::synth::{generate_interactions, write_ratings, SynthConfig};
use seqfair::train::SweepGrid;
use seqfair::{Error, Result};

/// Sequential recommender training with robust and cost-sensitive objectives.
#[derive(Debug, Parser)]
#[command(name = "seqfair", version)]
struct Cli {
    /// Log level (error, warn, info, debug, trace); RUST_LOG also works.
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw log, core-filter it and write the dataset artifact.
    Prepare(PrepareArgs),
    /// Label users with popularity and/or sequence-length groups.
    Annotate(AnnotateArgs),
    /// Prepare, annotate and train the configured objectives.
    Train(ConfigArgs),
    /// Train every grid point for the configured objectives the grid applies to.
    Sweep(SweepArgs),
    /// Rank split targets against the full catalogue and write NDCG@K.
    Evaluate(EvaluateArgs),
    /// Percentage-increase table and figure relative to a baseline run.
    Report(ReportArgs),
    /// Run selected pipeline stages from a config file.
    Pipeline(PipelineArgs),
    /// Train, evaluate and report every method of one results table.
    ReproduceTable(TableArgs),
    /// Write a synthetic log with a planted minority group (ml1m format).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct PrepareArgs {
    /// Raw log format: ml1m or retailrocket.
    #[arg(long = "dataset", visible_alias = "kind")]
    kind: DatasetKind,
    /// Raw log file (ratings.dat or events.csv).
    #[arg(long)]
    input: PathBuf,
    /// Core-k filter threshold.
    #[arg(long = "core", visible_alias = "core-k", default_value_t = 5)]
    core_k: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Rerun even if outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// pop, seq or intersect.
    #[arg(long, default_value = "pop")]
    scheme: Scheme,
    /// Popularity split: 33, 2060 or 1080 (also the seq split unless --split-seq is given).
    #[arg(long = "split", visible_alias = "split-pop", default_value = "33")]
    split_pop: SplitName,
    /// Sequence-length split: 33, 2060 or 1080.
    #[arg(long)]
    split_seq: Option<SplitName>,
    /// Quantiles over training interactions (data) or users (user).
    #[arg(long, default_value = "data", value_parser = parse_mode)]
    mode: SplitMode,
    /// Share of items counted as popular.
    #[arg(long, default_value_t = 0.2)]
    popular_fraction: f64,
    /// Output directory (groups.json + manifest).
    #[arg(long)]
    out: PathBuf,
    /// Rerun even if outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to these methods (e.g. ERM, GDRO_pop); repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Output root (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rerun even if outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Grid file (TOML): param = "alpha" | "eta", values = [...].
    #[arg(long)]
    grid: PathBuf,
    /// Grid points trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Model checkpoint (best.ckpt).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    /// groups.json from `annotate`.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Ranking cutoff for NDCG.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Drop already-seen items from the candidates.
    #[arg(long)]
    exclude_seen: bool,
    /// Output directory (metrics.json + manifest).
    #[arg(long)]
    out: PathBuf,
    /// Rerun even if outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation directories; each directory name is the method name.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Method the percentage increases are relative to.
    #[arg(long, default_value = "ERM")]
    baseline: String,
    /// Output directory (table, percentage CSV and SVG).
    #[arg(long)]
    out: PathBuf,
    /// Rerun even if outputs are up to date.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated subset of prepare,annotate,train,evaluate,report.
    #[arg(long, default_value = "prepare,annotate,train,evaluate,report")]
    stages: String,
}

#[derive(Debug, Args)]
struct TableArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// poponly, seqonly or popseq.
    #[arg(long)]
    table: TableId,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output ratings file.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    minority_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_mode(s: &str) -> std::result::Result<SplitMode, String> {
    match s {
        "data" | "dsplit" => Ok(SplitMode::Data),
        "user" | "usplit" => Ok(SplitMode::User),
        other => Err(format!("unknown split mode `{other}` (data or user)")),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if !args.methods.is_empty() {
        for m in &args.methods {
            if !cfg.objectives.iter().any(|o| o.name() == *m) {
                return Err(Error::Config(format!("method `{m}` is not in the config")));
            }
        }
        cfg.objectives.retain(|o| args.methods.contains(&o.name()));
        if !cfg.objectives.iter().any(|o| o.name() == cfg.eval.baseline) {
            if let Some(first) = cfg.objectives.first() {
                cfg.eval.baseline = first.name();
            }
        }
    }
    Ok(cfg)
}

fn print_reports(reports: &[StageReport]) {
    for r in reports {
        let status = match r.status {
            StageStatus::Ran => "done",
            StageStatus::UpToDate => "up-to-date",
        };
        println!("{:<9} {:<16} {status}", r.stage.name(), r.target);
    }
    if !reports.is_empty() && reports.iter().all(|r| r.status == StageStatus::UpToDate) {
        println!("up-to-date");
    }
}

fn print_status(what: &str, dir: &Path, status: StageStatus) {
    match status {
        StageStatus::Ran => println!("{what}: wrote {}", dir.display()),
        StageStatus::UpToDate => println!("{what}: up-to-date ({})", dir.display()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let ds = DatasetSection { kind: a.kind, path: Some(a.input), synthetic: None, core_k: a.core_k };
            print_status("prepare", &a.out, prepare_stage(&ds, &a.out, a.force)?);
        }
        Command::Annotate(a) => {
            let groups = GroupsSection {
                scheme: a.scheme,
                split_pop: a.split_pop,
                split_seq: a.split_seq.unwrap_or(a.split_pop),
                mode: a.mode,
                popular_fraction: a.popular_fraction,
            };
            print_status("annotate", &a.out, annotate_stage(&a.data, &groups, &a.out, a.force)?);
        }
        Command::Train(a) => {
            let cfg = load_config(&a)?;
            print_reports(&run_pipeline(&cfg, &[Stage::Prepare, Stage::Annotate, Stage::Train], a.force)?);
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a.common)?;
            let text = std::fs::read_to_string(&a.grid).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
            let grid: SweepGrid = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.grid.display())))?;
            print_reports(&run_pipeline(&cfg, &[Stage::Prepare, Stage::Annotate], false)?);
            let jobs = a.jobs.unwrap_or(cfg.sweep.jobs);
            print_reports(&sweep_stage(&cfg, &grid, jobs, a.common.force)?);
        }
        Command::Evaluate(a) => {
            let opts = EvalOptions { k: a.k, split: a.split, exclude_seen: a.exclude_seen, ..EvalOptions::default() };
            let status = evaluate_stage(&a.checkpoint, &a.data, a.groups.as_deref(), &opts, &a.out, a.force)?;
            print_status("evaluate", &a.out, status);
        }
        Command::Report(a) => {
            let runs = a
                .runs
                .iter()
                .map(|p| {
                    let name = p
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .ok_or_else(|| Error::Config(format!("cannot name run {}", p.display())))?;
                    Ok((name, p.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            print_status("report", &a.out, report_stage(&runs, &a.baseline, &a.out, a.force)?);
        }
        Command::Pipeline(a) => {
            let cfg = load_config(&a.common)?;
            print_reports(&run_pipeline(&cfg, &parse_stages(&a.stages)?, a.common.force)?);
        }
        Command::ReproduceTable(a) => {
            let cfg = load_config(&a.common)?;
            print_reports(&reproduce_table(&cfg, a.table, a.common.force)?);
        }
        Command::Synth(a) => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(u) = a.users {
                cfg.users = u;
            }
            if let Some(f) = a.minority_fraction {
                cfg.minority_fraction = f;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let out = generate_interactions(&cfg)?;
            write_ratings(&a.out, &out.interactions)?;
            println!("synth: {} interactions, {} minority users -> {}", out.interactions.len(), out.minority.len(), a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).parse_default_env().format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
