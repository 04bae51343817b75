use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use veracity::config::RunConfig;
use veracity::dataset::{load_dataset, read_jsonl, write_jsonl, Dataset};
use veracity::decode::VerificationResult;
use veracity::metrics::MetricReport;
use veracity::pipeline::{
    answer_requests, evaluate_records, lexical_prior_rows, load_checkpoint, prepare, resolve_claim, run_ablation,
    save_checkpoint, train_model, verify_records, AblationKind, AblationRow,
};
use veracity::synth::generate_synthetic;

#[derive(Parser)]
#[command(name = "veracity", version, about = "Phrase-level fact verification with logical aggregation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set lambda=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with culprit annotations.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resolve the phrases of every claim.
    Decompose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build local premises; optionally export answer requests and the derived prior.
    Premises {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "requests_out")]
        out: Option<PathBuf>,
        /// External answers keyed by question id (sets `answers_file`).
        #[arg(long)]
        answers_file: Option<PathBuf>,
        /// Write cloze requests for an external answerer and stop.
        #[arg(long)]
        requests_out: Option<PathBuf>,
        /// Also write the per-phrase prior derived from the premises.
        #[arg(long)]
        prior_out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Per-epoch training log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode records with a trained model.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a results file against its dataset.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of one key.
    Ablate {
        /// lambda, prior or mask.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Comma-separated values; the standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(common.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn dataset(path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    let c = ds.counts;
    log::info!(
        "{}: {} records (SUP {}, REF {}, NEI {})",
        path.display(),
        c.total(),
        c.sup,
        c.refute,
        c.nei
    );
    Ok(ds)
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn pct(x: f64) -> String {
    format!("{:6.2}", 100.0 * x)
}

fn report_line(label: &str, r: &MetricReport) -> String {
    format!(
        "{label:>10} | LA {} | FEV {} | LA_z h {} s {} | Agree h {} s {} | CulpA P {} R {} F1 {}",
        pct(r.la),
        pct(r.fev),
        pct(r.la_z_hard),
        pct(r.la_z_soft),
        pct(r.agree_hard),
        pct(r.agree_soft),
        pct(r.culpa.p),
        pct(r.culpa.r),
        pct(r.culpa.f1)
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n_per_class, seed, out } => {
            let records = generate_synthetic(n_per_class, seed)?;
            write_jsonl(&out, &records)?;
            log::info!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Decompose { data, out } => {
            let cfg = base_config(&cli.common, None)?;
            let ds = dataset(&data)?;
            let lexicon = veracity::pipeline::load_lexicon(&cfg)?;
            let claims = ds
                .records
                .iter()
                .map(|r| resolve_claim(r, cfg.max_phrases, lexicon.as_ref()).map(|(c, _)| c))
                .collect::<veracity::Result<Vec<_>>>()?;
            write_jsonl(&out, &claims)?;
        }
        Command::Premises {
            data,
            out,
            answers_file,
            requests_out,
            prior_out,
        } => {
            let mut cfg = base_config(&cli.common, None)?;
            if answers_file.is_some() {
                cfg.answers_file = answers_file;
            }
            let ds = dataset(&data)?;
            if let Some(path) = requests_out {
                let requests = answer_requests(&ds.records, &cfg)?;
                write_jsonl(&path, &requests)?;
                log::info!("wrote {} answer requests to {}", requests.len(), path.display());
                return Ok(());
            }
            let prepared = prepare(&ds.records, &cfg)?;
            let rows: Vec<_> = prepared.iter().flat_map(|p| p.premise_rows()).collect();
            write_jsonl(&out.context("--out is required")?, &rows)?;
            if let Some(path) = prior_out {
                write_jsonl(&path, &lexical_prior_rows(&prepared))?;
            }
        }
        Command::Train { data, model, log } => {
            let cfg = base_config(&cli.common, None)?;
            let ds = dataset(&data)?;
            let prepared = prepare(&ds.records, &cfg)?;
            let (params, train_log) = train_model(&prepared, &cfg)?;
            save_checkpoint(&model, &params, &cfg)?;
            if let Some(path) = log {
                write_json(Some(&path), &train_log)?;
            }
        }
        Command::Verify { model, data, out } => {
            let (params, trained_with) = load_checkpoint(&model)?;
            let mut cfg = base_config(&cli.common, Some(trained_with))?;
            // Phrase resolution must match the checkpoint.
            cfg.max_phrases = params.config.max_phrases;
            let ds = dataset(&data)?;
            let prepared = prepare(&ds.records, &cfg)?;
            let results = verify_records(&params, &prepared, &cfg)?;
            write_jsonl(&out, &results)?;
        }
        Command::Eval { results, data, out } => {
            let cfg = base_config(&cli.common, None)?;
            let ds = dataset(&data)?;
            let results: Vec<VerificationResult> = read_jsonl(&results)?;
            let report = evaluate_records(&results, &ds.records, &cfg)?;
            write_json(out.as_deref(), &report)?;
        }
        Command::Ablate {
            kind,
            train,
            eval,
            grid,
            out,
        } => {
            let cfg = base_config(&cli.common, None)?;
            let kind: AblationKind = kind.parse()?;
            let grid = if grid.is_empty() { kind.default_grid() } else { grid };
            let train = dataset(&train)?;
            let eval = dataset(&eval)?;
            let rows = run_ablation(kind, &grid, &cfg, &train.records, &eval.records)?;
            for row in &rows {
                println!("{}", report_line(&format!("{}={}", kind.key(), row.value), &row.report));
            }
            if let Some(path) = out {
                write_jsonl::<AblationRow>(&path, &rows)?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<veracity::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
