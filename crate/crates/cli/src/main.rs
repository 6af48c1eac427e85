use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qaforge_core::corpus::SourceCategory;
use qaforge_core::eval_harness::TaskName;
use qaforge_core::gateway::GatewayConfig;
use qaforge_core::mixer::SourceKind;
use qaforge_core::pipeline::{self, files, EvalRequest, Run, RunConfig, StageName, StageSummary};
use qaforge_core::refinery::DedupScope;
use qaforge_core::{jsonl, report, Error, Result};

/// Turn unlabeled domain text into instruction data, evaluation items and
/// fine-tuning manifests.
#[derive(Debug, Parser)]
#[command(name = "qaforge", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured stage in order.
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Skip leading stages whose outputs are unchanged.
        #[arg(long)]
        resume: bool,
        /// Override gateway.max_in_flight.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Read the corpus into docs.jsonl.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Force one source category for every file.
        #[arg(long)]
        category: Option<String>,
    },
    /// Split documents into chunks.jsonl.
    Chunk {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        min: Option<u64>,
        #[arg(long)]
        max: Option<u64>,
        /// Keep each document whole (chunking ablation).
        #[arg(long)]
        no_chunking: bool,
    },
    /// Generate questions and answers for every chunk.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        k_seeds: Option<usize>,
        #[arg(long)]
        n_questions: Option<usize>,
    },
    /// Filter, deduplicate and merge pairs into instruct.jsonl.
    Filter {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Accept every pair unchanged (filtering ablation).
        #[arg(long)]
        no_filtering: bool,
        #[arg(long)]
        min_chars: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        /// per_document or global.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        strict_markers: bool,
    },
    /// Convert accepted pairs to single-choice items and merge a bank.
    Mcq {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        /// Apply a filled review sheet to items.jsonl instead of converting.
        #[arg(long)]
        import_review: Option<PathBuf>,
    },
    /// Evaluate a model on an item set.
    Eval(EvalArgs),
    /// Build a fine-tuning mixture and manifest.
    Mix {
        #[command(flatten)]
        cfg: ConfigArg,
        /// sm, mm1 or mm2.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        inject: Option<usize>,
        #[arg(long)]
        domain: Option<PathBuf>,
        #[arg(long)]
        domain_kind: Option<String>,
        #[arg(long)]
        generic: Option<PathBuf>,
        #[arg(long)]
        generic_kind: Option<String>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Write composition statistics.
    Report {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Draw an audit sample, or import its filled sheet.
    Audit {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(short, long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Apply a filled audit sheet to the stored audit sample.
        #[arg(long)]
        import: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run as the eval stage of this config's run.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// tet, tpt, dle or custom.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    items: Option<PathBuf>,
    /// http(s) URL or mock:<kind>.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    /// Admit items that were never reviewed.
    #[arg(long)]
    allow_unreviewed: bool,
    /// Standalone output directory [default: current directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(cfg: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load(&cfg.config)
}

fn stage(cfg: RunConfig, name: StageName) -> Result<()> {
    let mut run = Run::open(cfg)?;
    print_summary(&run.run_stage(name)?);
    Ok(())
}

fn print_summary(s: &StageSummary) {
    let note = if s.skipped { " (skipped)" } else { "" };
    println!("{}{note}: {}", s.stage, s.message);
}

fn parse_kind(raw: &Option<String>) -> Result<Option<SourceKind>> {
    raw.as_deref().map(str::parse).transpose()
}

/// With `--config` and no `--out`, evaluation runs as the pipeline's eval
/// stage (flags override the `[eval]` section). Otherwise it is standalone.
fn eval(args: EvalArgs) -> Result<()> {
    if let (Some(path), None) = (&args.config, &args.out) {
        let mut cfg = RunConfig::load(path)?;
        let mut section = cfg.eval.clone().unwrap_or_default();
        if let Some(t) = args.task {
            section.task = t;
        }
        if args.items.is_some() {
            section.items = args.items;
        }
        section.shuffle_seed = args.shuffle_seed.or(section.shuffle_seed);
        section.allow_unreviewed |= args.allow_unreviewed;
        cfg.eval = Some(section);
        if let Some(e) = args.endpoint {
            cfg.eval_gateway = Some(GatewayConfig::new(e));
        }
        if let Some(m) = args.model {
            let mut g = cfg.eval_gateway_config().clone();
            g.model_id = m;
            cfg.eval_gateway = Some(g);
        }
        return stage(cfg, StageName::Eval);
    }
    let task: TaskName = args
        .task
        .ok_or_else(|| Error::validation("--task is required"))?
        .parse()?;
    let items = args.items.ok_or_else(|| Error::validation("--items is required"))?;
    let mut gateway = match (&args.endpoint, &args.config) {
        (Some(e), _) => GatewayConfig::new(e.clone()),
        (None, Some(p)) => RunConfig::load(p)?.eval_gateway_config().clone(),
        (None, None) => return Err(Error::validation("--endpoint is required")),
    };
    if let Some(m) = args.model {
        gateway.model_id = m;
    }
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    let report = pipeline::run_eval(&EvalRequest {
        task,
        items,
        gateway,
        template: None,
        shuffle_seed: args.shuffle_seed,
        allow_unreviewed: args.allow_unreviewed,
        out_dir: out_dir.clone(),
    })?;
    println!(
        "{}: {} of {} correct, {} unextracted, accuracy {}%",
        report.task_name,
        report.n_correct,
        report.n_items,
        report.n_unextracted,
        report.accuracy_text()
    );
    println!("wrote {}", out_dir.join(files::REPORT).display());
    Ok(())
}

fn audit(cfg: RunConfig, n: usize, seed: Option<u64>, import: Option<PathBuf>) -> Result<()> {
    let dir = cfg.output_dir.clone();
    let batch_path = dir.join("audit.json");
    let sheet_path = dir.join("audit_sheet.csv");
    if let Some(sheet) = import {
        let batch: report::AuditBatch = jsonl::read_json(&batch_path)?;
        let text = std::fs::read_to_string(&sheet).map_err(|e| Error::io(&sheet, e))?;
        let judged = report::import_audit_sheet(&batch, &text)?;
        jsonl::write_json(&batch_path, &judged)?;
        for (verdict, count) in judged.verdict_counts() {
            println!("{verdict:<18} {count}");
        }
        return Ok(());
    }
    let batch = report::draw_audit(
        &dir.join(files::INSTRUCT),
        &dir.join(files::CHUNKS),
        n,
        seed.unwrap_or(cfg.rng_seed),
    )?;
    jsonl::write_json(&batch_path, &batch)?;
    jsonl::write_atomic(&sheet_path, report::export_audit_sheet(&batch)?.as_bytes())?;
    println!(
        "sampled {} records; fill the verdict column of {}",
        batch.entries.len(),
        sheet_path.display()
    );
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { cfg, resume, workers } => {
            let mut cfg = load(&cfg)?;
            if let Some(w) = workers {
                cfg.gateway.max_in_flight = w;
            }
            for s in pipeline::run_pipeline(cfg, resume)? {
                print_summary(&s);
            }
            Ok(())
        }
        Command::Ingest { cfg, input, category } => {
            let mut cfg = load(&cfg)?;
            if let Some(p) = input {
                cfg.corpus.path = p;
            }
            if let Some(c) = category {
                cfg.corpus.category = Some(c.parse::<SourceCategory>()?);
            }
            stage(cfg, StageName::Ingest)
        }
        Command::Chunk { cfg, min, max, no_chunking } => {
            let mut cfg = load(&cfg)?;
            cfg.corpus.min_tokens = min.unwrap_or(cfg.corpus.min_tokens);
            cfg.corpus.max_tokens = max.unwrap_or(cfg.corpus.max_tokens);
            cfg.ablation.chunking &= !no_chunking;
            stage(cfg, StageName::Chunk)
        }
        Command::Synth { cfg, endpoint, workers, k_seeds, n_questions } => {
            let mut cfg = load(&cfg)?;
            if let Some(e) = endpoint {
                cfg.gateway.base_url = e;
            }
            cfg.gateway.max_in_flight = workers.unwrap_or(cfg.gateway.max_in_flight);
            cfg.synth.k_seeds = k_seeds.unwrap_or(cfg.synth.k_seeds);
            cfg.synth.n_questions = n_questions.unwrap_or(cfg.synth.n_questions);
            stage(cfg, StageName::Synth)
        }
        Command::Filter { cfg, no_filtering, min_chars, threshold, scope, strict_markers } => {
            let mut cfg = load(&cfg)?;
            cfg.ablation.filtering &= !no_filtering;
            cfg.filter.min_answer_chars = min_chars.unwrap_or(cfg.filter.min_answer_chars);
            cfg.filter.jaccard_threshold = threshold.unwrap_or(cfg.filter.jaccard_threshold);
            cfg.filter.strict_markers |= strict_markers;
            if let Some(s) = scope {
                cfg.filter.dedup_scope = match s.as_str() {
                    "per_document" => DedupScope::PerDocument,
                    "global" => DedupScope::Global,
                    _ => return Err(Error::validation(format!("unknown dedup scope `{s}`"))),
                };
            }
            stage(cfg, StageName::Filter)
        }
        Command::Mcq { cfg, bank, endpoint, import_review } => {
            let mut cfg = load(&cfg)?;
            if bank.is_some() {
                cfg.mcq.bank = bank;
            }
            if let Some(e) = endpoint {
                cfg.gateway.base_url = e;
            }
            match import_review {
                Some(sheet) => {
                    let text = std::fs::read_to_string(&sheet).map_err(|e| Error::io(&sheet, e))?;
                    let mut run = Run::open(cfg)?;
                    let counts = run.apply_review(&text)?;
                    println!(
                        "mcq: {} approved, {} rejected, {} unreviewed",
                        counts.approved, counts.rejected, counts.unreviewed
                    );
                    Ok(())
                }
                None => stage(cfg, StageName::Mcq),
            }
        }
        Command::Eval(args) => eval(args),
        Command::Mix { cfg, stage: mix_stage, inject, domain, domain_kind, generic, generic_kind, tolerance } => {
            let mut cfg = load(&cfg)?;
            let m = &mut cfg.mix;
            if let Some(s) = mix_stage {
                m.stage = s;
            }
            m.generic_inject = inject.unwrap_or(m.generic_inject);
            m.tolerance = tolerance.unwrap_or(m.tolerance);
            if domain.is_some() {
                m.domain = domain;
            }
            if generic.is_some() {
                m.generic = generic;
            }
            m.domain_kind = parse_kind(&domain_kind)?.unwrap_or(m.domain_kind);
            m.generic_kind = parse_kind(&generic_kind)?.unwrap_or(m.generic_kind);
            stage(cfg, StageName::Mix)
        }
        Command::Report { cfg } => stage(load(&cfg)?, StageName::Report),
        Command::Audit { cfg, n, seed, import } => audit(load(&cfg)?, n, seed, import),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
