use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use autoconv::backend::Client;
use autoconv::corpus::{self, read_dataset, write_dataset, Dialogue};
use autoconv::eval::{evaluate, read_predictions};
use autoconv::pipeline::{self, load_corpus, plan, refilter, training_schedule, Overrides, RunOptions};
use autoconv::quality::summarize;

#[derive(Parser)]
#[command(
    name = "autoconv",
    version,
    about = "Generate, filter and evaluate document-grounded synthetic conversations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a generation job described by a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        backend_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Resolve and validate the manifest without contacting the backend.
        #[arg(long)]
        dry_run: bool,
    },
    /// Re-run diversity filtering over existing datasets.
    Filter {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = pipeline::DEFAULT_KEEP_FRACTION)]
        keep_fraction: f64,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Score a predictions file against gold dialogues (QuAC, CoQA or autoconv/1).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Write the full report, including per-question scores, as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Gradient steps for two-stage training.
    Schedule {
        #[arg(long)]
        human: u64,
        #[arg(long)]
        synthetic: u64,
        #[arg(long)]
        json: bool,
    },
    /// Print dataset statistics.
    Inspect { dataset: PathBuf },
    /// Emit per-batch flag counts and the diversity histogram as JSON.
    QualityReport {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Dialogue>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_dataset(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(all)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            seed,
            backend_url,
            model,
            concurrency,
            keep_fraction,
            output_dir,
            resume,
            dry_run,
        } => {
            let overrides = Overrides {
                seed,
                backend_url,
                model,
                concurrency,
                keep_fraction,
                output_dir,
            };
            let manifest = plan(&config, &overrides)?;
            if dry_run {
                let docs = load_corpus(manifest.dataset, &manifest.corpus_path)?;
                if manifest.n_documents > docs.len() {
                    bail!(
                        "n_documents = {} but the corpus has only {} documents",
                        manifest.n_documents,
                        docs.len()
                    );
                }
                println!("{}", serde_json::to_string_pretty(&manifest)?);
                println!(
                    "dry run ok: {} documents x {} dialogues",
                    manifest.n_documents, manifest.dialogues_per_doc
                );
                return Ok(());
            }
            let client = Client::from_spec(&manifest.backend)?;
            let report = pipeline::run(
                &manifest,
                &client,
                &RunOptions {
                    resume,
                    stop_after: None,
                },
            )?;
            println!(
                "generated={} kept={} removed={} failed={} discarded={} resumed={}",
                report.generated, report.kept, report.removed, report.failed, report.discarded, report.resumed
            );
            println!("output: {}", manifest.output_dir.display());
        }
        Command::Filter {
            inputs,
            keep_fraction,
            output_dir,
        } => {
            let dialogues = read_all(&inputs)?;
            if dialogues.is_empty() {
                bail!("no dialogues in input");
            }
            let (kept, removed) = refilter(dialogues, keep_fraction)?;
            fs::create_dir_all(&output_dir)?;
            write_dataset(&kept, &output_dir.join(pipeline::KEPT_FILE))?;
            write_dataset(&removed, &output_dir.join(pipeline::REMOVED_FILE))?;
            println!("kept={} removed={}", kept.len(), removed.len());
        }
        Command::Eval { pred, gold, report } => {
            let predictions = read_predictions(&pred)?;
            let gold = corpus::load_gold(&gold)?;
            let result = evaluate(&predictions, &gold)?;
            if let Some(path) = report {
                fs::write(&path, serde_json::to_string_pretty(&result)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!(
                "f1={:.1} em={:.1} n_questions={}",
                result.f1, result.em, result.n_questions
            );
        }
        Command::Schedule { human, synthetic, json } => {
            let s = training_schedule(human, synthetic)?;
            if json {
                println!("{}", serde_json::to_string(&s)?);
            } else {
                let note = if s.is_extrapolated() { " (extrapolated)" } else { "" };
                println!("pretrain={} finetune={}{note}", s.pretrain_steps, s.finetune_steps);
            }
        }
        Command::Inspect { dataset } => {
            let dialogues = read_all(&[dataset])?;
            let s = summarize(&dialogues);
            println!("dialogues: {}", s.dialogues);
            println!("mean turns: {:.2}", s.mean_turns);
            println!("kept: {}  removed: {}  unscored: {}", s.kept, s.removed, s.unscored);
            match &s.diversity {
                Some(d) => {
                    println!("diversity: min {:.4}  mean {:.4}  max {:.4}", d.min, d.mean, d.max);
                    for (i, count) in d.histogram.iter().enumerate() {
                        println!(
                            "  [{:.1}, {:.1}{} {count}",
                            i as f64 / 10.0,
                            (i + 1) as f64 / 10.0,
                            if i == 9 { "]" } else { ")" }
                        );
                    }
                }
                None => println!("diversity: n/a"),
            }
            for (flag, count) in &s.flags {
                println!("flag {flag}: {count}");
            }
        }
        Command::QualityReport { datasets } => {
            let dialogues = read_all(&datasets)?;
            println!("{}", serde_json::to_string_pretty(&summarize(&dialogues))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
