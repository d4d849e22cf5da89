//! `tinylab` command line: train, fork-decay, sweep, fit, quantize,
//! tokenizer, report, ingest. Exit codes: 0 success, 1 usage, 2 run fault,
//! 3 fit failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tinylab_cli::config::{ExperimentSpec, SourceSpec, SweepGrid};
use tinylab_cli::corpus::{ingest_file, Tokenizer};
use tinylab_cli::quantize::{quantize_checkpoint, QuantMethod, QuantizeOptions};
use tinylab_cli::report::{write_report, ReportKind};
use tinylab_cli::run::{fork_decay, resume_experiment, run_experiment, ForkOptions};
use tinylab_cli::sweep::run_sweep;
use tinylab_cli::{exit_code_for, HarnessError};
use tinylab_core::bpe::train_bpe;

#[derive(Parser)]
#[command(name = "tinylab", about = "Desk-scale transformer training laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment from a TOML config.
    Train(TrainArgs),
    /// Fork a stable-stage checkpoint into an exponential-decay branch.
    ForkDecay(ForkArgs),
    /// Expand a grid over a base config and run every combination.
    Sweep(SweepArgs),
    /// Fit an empirical law over completed runs (batchsize|scaling|envelope).
    Fit(FitArgs),
    /// Export an int4 group-quantized checkpoint.
    Quantize(QuantizeArgs),
    /// Train a byte-level BPE tokenizer or measure compression rates.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Aggregate completed runs into a JSON report.
    Report(ReportArgs),
    /// Tokenize a raw corpus file to disk.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML). Not needed with --resume.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue a checkpoint to its spec's total_steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForkArgs {
    /// Donor checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Exponential decay half-life, in steps.
    #[arg(long)]
    half_life: u64,
    /// Final step of the forked run.
    #[arg(long)]
    end_step: u64,
    /// Optional TOML file with `sources = [{path|synth_markov, weight}]`
    /// overriding the decay mixture.
    #[arg(long)]
    mixture: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// TOML grid: `[grid]` table mapping dotted spec paths to value lists.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// batchsize | scaling | envelope
    kind: String,
    /// Completed run directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    group: usize,
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    /// rtn | gptq
    #[arg(long, default_value = "gptq")]
    method: String,
    /// Calibration corpus (defaults to the spec's eval corpus).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    calib_sequences: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TokenizerCmd {
    /// Train a BPE tokenizer on a corpus file.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        max_vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-file compression rates (Bytes/Tokens) as CSV.
    Rate {
        #[arg(long)]
        model: PathBuf,
        #[arg(num_args = 1.., required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// wsd-vs-cosine | lr-stability | batchsize | scaling | envelope
    kind: String,
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// "byte" or a tokenizer file path.
    #[arg(long, default_value = "byte")]
    tokenizer: String,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Train(a) => {
            let record = match (&a.config, &a.resume) {
                (_, Some(ckpt)) => resume_experiment(ckpt, &a.out)?,
                (Some(cfg), None) => {
                    let spec = ExperimentSpec::load(cfg)?;
                    run_experiment(&spec, &a.out)?
                }
                (None, None) => {
                    return Err(HarnessError::Config(
                        "train needs --config or --resume".into(),
                    ))
                }
            };
            println!(
                "run {} finished: {} steps, final train loss {:.6}{}",
                record.run_id,
                record.steps,
                record.final_train_loss,
                match record.final_eval_loss {
                    Some(e) => format!(", eval loss {e:.6}"),
                    None => String::new(),
                }
            );
            Ok(())
        }
        Cmd::ForkDecay(a) => {
            let mixture = match &a.mixture {
                Some(path) => {
                    #[derive(serde::Deserialize)]
                    struct MixFile {
                        sources: Vec<SourceSpec>,
                    }
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                    let mix: MixFile = toml::from_str(&text)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                    Some(mix.sources)
                }
                None => None,
            };
            let record = fork_decay(
                &a.checkpoint,
                ForkOptions {
                    half_life: a.half_life,
                    end_step: a.end_step,
                    mixture,
                },
                &a.out,
            )?;
            println!(
                "fork {} finished at step {}, final train loss {:.6}",
                record.run_id, record.steps, record.final_train_loss
            );
            Ok(())
        }
        Cmd::Sweep(a) => {
            let spec = ExperimentSpec::load(&a.config)?;
            let grid = SweepGrid::load(&a.grid)?;
            let summary = run_sweep(&spec, &grid, a.parallel, &a.out)?;
            println!(
                "sweep finished: {} runs, {} failures",
                summary.entries.len(),
                summary.failures
            );
            if summary.failures > 0 {
                for e in summary.entries.iter().filter(|e| e.status != "ok") {
                    eprintln!("  {}: {}", e.label, e.status);
                }
            }
            Ok(())
        }
        Cmd::Fit(a) => {
            let kind: ReportKind = a.kind.parse()?;
            if !matches!(
                kind,
                ReportKind::Batchsize | ReportKind::Scaling | ReportKind::Envelope
            ) {
                return Err(HarnessError::Config(format!(
                    "fit supports batchsize|scaling|envelope, not {}",
                    a.kind
                )));
            }
            write_report(kind, &a.runs, &a.out)?;
            println!("fit report written to {}", a.out.display());
            Ok(())
        }
        Cmd::Quantize(a) => {
            let method: QuantMethod = a.method.parse()?;
            let summary = quantize_checkpoint(
                &a.checkpoint,
                &QuantizeOptions {
                    group: a.group,
                    damping: a.damping,
                    method,
                    calib: a.calib.clone(),
                    calib_sequences: a.calib_sequences,
                },
                &a.out,
            )?;
            println!(
                "quantized {} matrices, {} packed bytes{}",
                summary.tensors,
                summary.packed_bytes,
                if summary.total_rtn_objective > 0.0 {
                    format!(
                        ", objective {:.4e} (rtn {:.4e})",
                        summary.total_gptq_objective, summary.total_rtn_objective
                    )
                } else {
                    String::new()
                }
            );
            Ok(())
        }
        Cmd::Tokenizer(TokenizerCmd::Train { corpus, max_vocab, out }) => {
            let data = std::fs::read(&corpus)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", corpus.display())))?;
            let model = train_bpe(&data, max_vocab)?;
            std::fs::write(&out, model.to_text())?;
            println!(
                "trained {} merges ({} vocab) -> {}",
                model.merges().len(),
                model.vocab_size(),
                out.display()
            );
            Ok(())
        }
        Cmd::Tokenizer(TokenizerCmd::Rate { model, files }) => {
            let tok = Tokenizer::load(model.to_str().unwrap_or_default())?;
            println!("file,bytes,tokens,bytes_per_token");
            for f in &files {
                let data = std::fs::read(f)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", f.display())))?;
                let (ids, _) = tok.encode_with_lengths(&data);
                let rate = if ids.is_empty() {
                    0.0
                } else {
                    data.len() as f64 / ids.len() as f64
                };
                println!("{},{},{},{rate}", f.display(), data.len(), ids.len());
            }
            Ok(())
        }
        Cmd::Report(a) => {
            let kind: ReportKind = a.kind.parse()?;
            write_report(kind, &a.runs, &a.out)?;
            println!("report written to {}", a.out.display());
            Ok(())
        }
        Cmd::Ingest(a) => {
            let tok = Tokenizer::load(&a.tokenizer)?;
            let corpus = ingest_file(&a.input, &tok, &a.tokenizer, &a.out)?;
            println!(
                "ingested {} bytes -> {} tokens, digest {}",
                corpus.source_bytes,
                corpus.tokens.len(),
                &corpus.digest[..16]
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are success; anything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
