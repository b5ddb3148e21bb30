//! `sgr`: preprocessing, training, prediction and scoring for procedural
//! state tracking with scene graphs.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sgr_core::corpus::{
    load_instances, load_predictions, load_triples, preprocess, save_instances, save_predictions, ProcedureInstance,
    Split, Triple,
};
use sgr_core::evaluator::evaluate;
use sgr_core::model::{build_graph, SgrModel};
use sgr_core::predictor::InvocationCounter;
use sgr_core::state_reasoner::{gold_predictions, round_trip_mismatches};
use sgr_core::synthetic::{generate, toy_instance, SyntheticConfig};
use sgr_core::trainer::{format_log_csv, full_model_grad_check, predict_records, TrainConfig, Trainer};
use sgr_core::{Result, SgrError};

#[derive(Parser)]
#[command(name = "sgr", version, about = "Entity state tracking over per-step scene graphs")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adds location candidates and entity mentions to a JSONL corpus.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Trains a model and writes its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Paragraphs used for checkpoint selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// `key = value` training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        knowledge: Knowledge,
    },
    /// Writes the prediction TSV of a corpus.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Prints per-paragraph encoder invocation counts as JSON.
        #[arg(long)]
        count_invocations: bool,
        #[command(flatten)]
        knowledge: Knowledge,
    },
    /// Scores predictions against gold rows (TSV) or a gold corpus (JSONL).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Writes the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks that gold annotations survive scene construction and state
    /// inference unchanged.
    RoundtripCheck {
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every model parameter.
    Gradcheck {
        /// First paragraph of this corpus instead of the built-in toy one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Writes a synthetic procedural corpus with exact gold annotations.
    GenSynthetic {
        #[arg(long, default_value_t = 30)]
        paragraphs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Knowledge {
    /// Extra knowledge triples (TSV: head, relation, tail).
    #[arg(long)]
    knowledge: Option<PathBuf>,
}

impl Knowledge {
    fn load(&self) -> Result<Vec<Triple>> {
        let Some(path) = &self.knowledge else {
            return Ok(Vec::new());
        };
        let (triples, skipped) = load_triples(path)?;
        if skipped > 0 {
            log::warn!("{}: skipped {skipped} malformed triple lines", path.display());
        }
        Ok(triples)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| SgrError::io(path, e))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("json values serialise"))
        .map_err(|e| SgrError::io("<stdout>", e))
}

fn run_train(
    data: &Path,
    dev: Option<&Path>,
    config: Option<&Path>,
    checkpoint: &Path,
    log_path: Option<&Path>,
    overrides: (Option<u64>, Option<usize>),
    triples: &[Triple],
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = overrides.0 {
        cfg.seed = s;
    }
    if let Some(e) = overrides.1 {
        cfg.epochs = e;
    }
    let train = load_instances(data)?;
    let dev = match dev {
        Some(p) => load_instances(p)?,
        None => Vec::new(),
    };
    let trainer = Trainer::new(&train, &dev, cfg, triples)?;
    let outcome = trainer.fit(|e| match e.dev_doc_f1 {
        Some(f) => log::info!("epoch {} loss {:.6} dev F1 {f:.4}", e.epoch, e.train_loss),
        None => log::info!("epoch {} loss {:.6}", e.epoch, e.train_loss),
    })?;
    outcome.model.save(checkpoint)?;
    if let Some(p) = log_path {
        write_file(p, &format_log_csv(&outcome.log))?;
    }
    print_json(&json!({
        "checkpoint": checkpoint.display().to_string(),
        "epochs": outcome.log.len(),
        "best_epoch": outcome.best_epoch,
        "best_dev_f1": outcome.best_dev_f1,
        "final_train_loss": outcome.log.last().map(|e| e.train_loss),
    }))
}

fn run_predict(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    split: Split,
    count: bool,
    triples: &[Triple],
) -> Result<()> {
    let model = SgrModel::load(checkpoint)?;
    let instances = load_instances(data)?;
    let counter = InvocationCounter::new();
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for inst in &instances {
        let graph = build_graph(inst, split, triples)?;
        let prep = model.prepare_for_inference(inst, graph)?;
        counter.reset();
        rows.extend(predict_records(&model, &prep, Some(&counter))?);
        counts.push(json!({
            "para_id": inst.para_id,
            "steps": inst.num_steps(),
            "entities": inst.num_entities(),
            "structure_encoder": counter.structure(),
            "context_encoder": counter.context(),
            "concept_init": counter.concept_init(),
        }));
    }
    save_predictions(&rows, out)?;
    if count {
        print_json(&serde_json::Value::Array(counts))?;
    }
    Ok(())
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"))
}

fn run_evaluate(pred: &Path, gold: &Path, out: Option<&Path>) -> Result<()> {
    let pred_rows = load_predictions(pred)?;
    let gold_rows = if is_jsonl(gold) {
        let mut rows = Vec::new();
        for inst in load_instances(gold)? {
            rows.extend(gold_predictions(&inst)?);
        }
        rows
    } else {
        load_predictions(gold)?
    };
    let report = evaluate(&pred_rows, &gold_rows);
    eprint!("{report}");
    let value = serde_json::to_value(&report).expect("report serialises");
    match out {
        Some(p) => write_file(p, &serde_json::to_string_pretty(&value).expect("json values serialise")),
        None => print_json(&value),
    }
}

fn run_roundtrip(data: &Path) -> Result<()> {
    let instances = load_instances(data)?;
    let mut failed = Vec::new();
    for inst in &instances {
        let graph = build_graph(inst, Split::Train, &[])?;
        let mismatches = round_trip_mismatches(inst, &graph)?;
        if !mismatches.is_empty() {
            failed.push(json!({ "para_id": inst.para_id, "mismatches": mismatches }));
        }
    }
    print_json(&json!({
        "paragraphs": instances.len(),
        "passed": failed.is_empty(),
        "failures": failed,
    }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SgrError::contract(format!(
            "{} of {} paragraphs do not round-trip",
            failed.len(),
            instances.len()
        )))
    }
}

fn run_gradcheck(data: Option<&Path>, dim: usize, seed: u64, tolerance: f64) -> Result<()> {
    let instance: ProcedureInstance = match data {
        Some(p) => load_instances(p)?
            .into_iter()
            .next()
            .ok_or_else(|| SgrError::contract(format!("{}: empty corpus", p.display())))?,
        None => toy_instance(),
    };
    let report = full_model_grad_check(&instance, dim, seed, tolerance)?;
    let params: Vec<_> = report
        .params
        .iter()
        .map(|p| {
            json!({
                "name": p.name,
                "elements": p.elements,
                "max_relative_error": p.max_relative_error,
                "max_abs_error": p.max_abs_error,
            })
        })
        .collect();
    print_json(&json!({
        "para_id": instance.para_id,
        "loss": report.loss,
        "tolerance": report.tolerance,
        "max_relative_error": report.max_relative_error(),
        "passed": report.passed(),
        "params": params,
    }))?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|p| p.name.as_str()).collect();
        Err(SgrError::contract(format!("gradient check failed for {}", names.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { data, out, split } => {
            let processed: Vec<_> = load_instances(&data)?.iter().map(|i| preprocess(i, split)).collect();
            save_instances(&processed, &out)
        }
        Command::Train {
            data,
            dev,
            config,
            checkpoint,
            log,
            seed,
            epochs,
            knowledge,
        } => run_train(
            &data,
            dev.as_deref(),
            config.as_deref(),
            &checkpoint,
            log.as_deref(),
            (seed, epochs),
            &knowledge.load()?,
        ),
        Command::Predict {
            checkpoint,
            data,
            out,
            split,
            count_invocations,
            knowledge,
        } => run_predict(&checkpoint, &data, &out, split, count_invocations, &knowledge.load()?),
        Command::Evaluate { pred, gold, out } => run_evaluate(&pred, &gold, out.as_deref()),
        Command::RoundtripCheck { data } => run_roundtrip(&data),
        Command::Gradcheck {
            data,
            dim,
            seed,
            tolerance,
        } => run_gradcheck(data.as_deref(), dim, seed, tolerance),
        Command::GenSynthetic { paragraphs, seed, out } => {
            save_instances(&generate(&SyntheticConfig::new(paragraphs, seed)), &out)
        }
    }
}

fn error_kind(err: &SgrError) -> &'static str {
    match err {
        SgrError::Io { .. } => "io",
        SgrError::Parse { .. } | SgrError::MissingField { .. } => "parse",
        SgrError::Checkpoint(_) => "checkpoint",
        SgrError::Shape { .. } | SgrError::NonFinite { .. } | SgrError::ForeignVar | SgrError::NonScalarLoss(_) => {
            "numeric"
        }
        SgrError::NonDeterministic { .. } => "nondeterministic",
        SgrError::Contract(_) => "contract",
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim_end());
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(error_kind(&e), &e.to_string());
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
