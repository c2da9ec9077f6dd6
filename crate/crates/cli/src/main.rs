use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use esft_core::model::checkpoint;
use esft_core::train::evaluate_forgetting;
use esft_core::workbench::{
    export_all, export_comparison, export_figure, gen_tasks, ingest, run_experiment, ExperimentManifest, FigureKind, InputFormat,
    OutputLayout, Stages, TaskSpec, Tokenizer,
};
use esft_core::Corpus;

/// Expert-specialized fine-tuning workbench for toy mixture-of-experts models.
#[derive(Parser)]
#[command(name = "esft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic task corpora from a JSON list of task specs.
    Gen {
        /// JSON file holding an array of task specs, or a manifest.
        specs: PathBuf,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize a text or JSONL file into a corpus.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        #[arg(long, value_enum, default_value = "byte")]
        tokenizer: TokenizerKind,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long, default_value = "ingested")]
        label: String,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the word-to-id map of the whitespace tokenizer.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
    },
    /// Run every enabled stage of a manifest.
    Run(RunArgs),
    /// Pretrain the vanilla model on the general tasks.
    Pretrain(RunArgs),
    /// Collect routing statistics of the vanilla model.
    Probe(RunArgs),
    /// Score experts per target task and select them at the configured thresholds.
    Select(RunArgs),
    /// Fine-tune every configured method and seed.
    Train(RunArgs),
    /// Write plot-ready figure data from existing stage outputs.
    Export {
        #[command(flatten)]
        run: RunArgs,
        /// Export one figure kind only.
        #[arg(long, value_enum)]
        figure: Option<Figure>,
    },
    /// Selection (and optionally training) at a list of thresholds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        ps: Vec<f64>,
        /// Also fine-tune at every threshold.
        #[arg(long)]
        train: bool,
    },
    /// Held-out loss of a checkpoint, and forgetting against a reference.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus JSONL file to evaluate on.
        #[arg(long)]
        corpus: PathBuf,
        /// Model before fine-tuning; enables the KL report.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Evaluate at most this many windows.
        #[arg(long, default_value_t = 64)]
        max_windows: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    manifest: PathBuf,
    /// Override the manifest's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Plain,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Byte,
    Whitespace,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    GateDistribution,
    OverlapHeatmap,
    ExpertsPerLayer,
    TradeoffCurve,
    Comparison,
}

fn load_manifest(args: &RunArgs) -> Result<ExperimentManifest> {
    let mut m = ExperimentManifest::load(&args.manifest)?;
    if let Some(out) = &args.out {
        m.output_dir = out.clone();
    }
    Ok(m)
}

fn run_stage(args: &RunArgs, stage: Option<&str>) -> Result<()> {
    let mut m = load_manifest(args)?;
    if let Some(s) = stage {
        m.stages = Stages::only(s)?;
    }
    let out = run_experiment(&m)?;
    println!("{}", out.root.display());
    Ok(())
}

fn read_specs(path: &Path, vocab: Option<usize>) -> Result<(Vec<TaskSpec>, usize)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(specs) = serde_json::from_str::<Vec<TaskSpec>>(&text) {
        let Some(v) = vocab else { bail!("--vocab is required with a task spec list") };
        return Ok((specs, v));
    }
    let m = ExperimentManifest::from_json(&text).with_context(|| format!("{} is neither a task list nor a manifest", path.display()))?;
    let v = vocab.unwrap_or(m.model.resolve()?.vocab_size);
    Ok((m.general_tasks.into_iter().chain(m.target_tasks).collect(), v))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { specs, vocab, out } => {
            let (specs, vocab) = read_specs(&specs, vocab)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for c in gen_tasks(&specs, vocab)? {
                let path = out.join(format!("{}.jsonl", c.task_label));
                c.save(&path)?;
                println!("{}\t{} documents\t{} tokens", path.display(), c.documents().len(), c.token_count());
            }
        }
        Command::Ingest { input, format, tokenizer, vocab, label, out, vocab_out } => {
            let mut tok = match tokenizer {
                TokenizerKind::Byte => Tokenizer::Byte,
                TokenizerKind::Whitespace => Tokenizer::whitespace(),
            };
            let format = match format {
                Format::Jsonl => InputFormat::Jsonl,
                Format::Plain => InputFormat::PlainText,
            };
            let c = ingest(&input, format, &mut tok, &label, vocab)?;
            c.save(&out)?;
            if let Some(path) = vocab_out {
                std::fs::write(&path, serde_json::to_string_pretty(&tok)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{}\t{} documents\t{} tokens", out.display(), c.documents().len(), c.token_count());
        }
        Command::Run(args) => run_stage(&args, None)?,
        Command::Pretrain(args) => run_stage(&args, Some("pretrain"))?,
        Command::Probe(args) => run_stage(&args, Some("probe"))?,
        Command::Select(args) => run_stage(&args, Some("select"))?,
        Command::Train(args) => run_stage(&args, Some("train"))?,
        Command::Export { run, figure } => {
            let m = load_manifest(&run)?;
            let out = OutputLayout::new(&m.output_dir);
            let written = match figure {
                None => export_all(&m, &out)?,
                Some(Figure::Comparison) => vec![export_comparison(&out)?],
                Some(f) => {
                    let kind = match f {
                        Figure::GateDistribution => FigureKind::GateDistribution,
                        Figure::OverlapHeatmap => FigureKind::OverlapHeatmap,
                        Figure::ExpertsPerLayer => FigureKind::ExpertsPerLayer,
                        Figure::TradeoffCurve => FigureKind::TradeoffCurve,
                        Figure::Comparison => unreachable!(),
                    };
                    export_figure(kind, &m, &out)?
                }
            };
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Sweep { run, ps, train } => {
            let mut m = load_manifest(&run)?;
            m.sweep.ps = ps;
            m.sweep.train = train;
            m.stages = Stages {
                pretrain: false,
                probe: false,
                select: true,
                train,
                export: false,
            };
            if train {
                // Only the sweep runs, not the method comparison.
                m.methods.clear();
            }
            let out = run_experiment(&m)?;
            for p in export_figure(FigureKind::TradeoffCurve, &m, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint: ckpt, corpus, reference, max_windows } => {
            let model = checkpoint::load(&ckpt)?;
            let cfg = model.config();
            let label = corpus.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
            let c = Corpus::load(&corpus, &label, cfg.vocab_size)?;
            let windows: Vec<Vec<usize>> = c.windows(cfg.max_seq_len + 1).into_iter().take(max_windows).collect();
            if windows.is_empty() {
                bail!("{} holds no {}-token window", corpus.display(), cfg.max_seq_len + 1);
            }
            let mut report = serde_json::json!({
                "checkpoint": ckpt,
                "corpus": corpus,
                "windows": windows.len(),
                "loss": model.mean_loss(&windows)?,
            });
            if let Some(r) = reference {
                let before = checkpoint::load(&r)?;
                let f = evaluate_forgetting(&before, &model, &windows)?;
                report["reference"] = serde_json::json!(r);
                report["reference_loss"] = f.loss_before.into();
                report["mean_kl"] = f.mean_kl.into();
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
