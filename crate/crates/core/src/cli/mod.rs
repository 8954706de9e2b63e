//! Command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod data;

pub use commands::{
    cmd_bench_ablation, cmd_eval_beats, cmd_eval_fad, cmd_eval_kld, cmd_eval_secs, cmd_eval_wer, cmd_generate,
    cmd_pipeline, cmd_stats, cmd_tokenizer_fit, cmd_train_cfm, cmd_train_lm, mel_duration_s, split_checkpoint,
    GenerateInputs, GenerateReport, TokenizerReport, TrainReport,
};
pub use config::{GenerateSettings, RunConfig, Stage, StagePool, TrainSettings};
pub use data::{load_index, lyrics_tokens, reference_excerpt, TrainRecord};

use crate::bench::ToySpec;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BEAT_TOLERANCE_S;

#[derive(Debug, Parser)]
#[command(name = "rapgen", version, about = "Accompaniment-conditioned rap vocal generation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice the command makes; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset curation.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Fit the K-means semantic tokenizer on feature files.
    TokenizerFit(TokenizerFitArgs),
    /// Train the semantic LM or the mel decoder.
    Train(TrainArgs),
    /// Lyrics and accompaniment to a vocal WAV.
    Generate(GenerateArgs),
    /// Objective metrics.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Synthetic benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Summarize a segment table.
    Stats(StatsArgs),
}

#[derive(Debug, Subcommand)]
pub enum PipelineCmd {
    /// Segment, score and split the songs listed in a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Subset thresholds (TOML); overrides the config section.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Skip writing per-segment audio.
        #[arg(long)]
        no_audio: bool,
    },
}

#[derive(Debug, Args)]
pub struct TokenizerFitArgs {
    /// FMX1 feature files.
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainStage {
    Lm,
    Cfm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    pub stage: TrainStage,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Lyrics text (characters or ARPAbet, matching the LM front end).
    #[arg(long)]
    pub lyrics: PathBuf,
    /// Accompaniment features (FMX1).
    #[arg(long)]
    pub accomp: PathBuf,
    /// Reference vocal mel (MEL1); the first few seconds are used.
    #[arg(long)]
    pub reference: PathBuf,
    /// LM checkpoint as `dir/stem`.
    #[arg(long)]
    pub lm: PathBuf,
    /// Decoder checkpoint as `dir/stem`.
    #[arg(long)]
    pub cfm: PathBuf,
    #[arg(long, default_value = "output")]
    pub name: String,
    /// External vocoder command; overrides the config.
    #[arg(long)]
    pub vocoder: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Corpus word error rate of line-aligned transcripts.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Mean cosine similarity of paired speaker embeddings (FMX1 rows).
    Secs {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Frechet distance between two embedding sets (FMX1 rows).
    Fad {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Mean KL divergence between classifier posteriors (FMX1 rows).
    Kld {
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
    },
    /// Beat/onset alignment between accompaniment and vocal WAVs.
    Beats {
        #[arg(long)]
        accomp: PathBuf,
        #[arg(long)]
        vocal: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAT_TOLERANCE_S)]
        tolerance: f64,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Train tiny LMs with and without accompaniment look-ahead.
    Ablation {
        /// Planted benchmark spec (TOML); overrides the config.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of seeds, counted up from the command seed.
        #[arg(long)]
        seeds: Option<usize>,
        /// Training steps per model.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Segment table written by `pipeline run`.
    #[arg(long)]
    pub segments: PathBuf,
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.as_path();
    match cli.command {
        Command::Pipeline(PipelineCmd::Run {
            manifest,
            thresholds,
            no_audio,
        }) => {
            if let Some(t) = thresholds {
                cfg.thresholds = crate::rapbank::SubsetThresholds::load(&t)?;
            }
            let summary = cmd_pipeline(&manifest, out, &cfg, seed, !no_audio)?;
            print_json(&summary)?;
            if !summary.failed.is_empty() {
                return Err(Error::invalid(format!("{} song(s) failed", summary.failed.len())));
            }
        }
        Command::TokenizerFit(a) => {
            let r = cmd_tokenizer_fit(&a.features, a.k, a.max_iters, a.subsample, seed, out)?;
            println!(
                "k={} frames={} final_objective={}",
                r.k,
                r.frames,
                r.objective_history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train(a) => {
            let r = match a.stage {
                TrainStage::Lm => cmd_train_lm(&cfg, seed, out, a.resume)?,
                TrainStage::Cfm => cmd_train_cfm(&cfg, seed, out, a.resume)?,
            };
            println!(
                "{}: steps {}..{} first_loss={:?} last_loss={:?}",
                r.stem,
                r.start_step,
                r.steps,
                r.first_loss(),
                r.last_loss()
            );
        }
        Command::Generate(a) => {
            if a.vocoder.is_some() {
                cfg.generate.vocoder = a.vocoder.clone();
            }
            let inputs = GenerateInputs {
                lyrics: &a.lyrics,
                accomp: &a.accomp,
                reference: &a.reference,
                lm: &a.lm,
                cfm: &a.cfm,
            };
            print_json(&cmd_generate(&inputs, &cfg, seed, out, &a.name)?)?;
        }
        Command::Eval(e) => {
            let v = match e {
                EvalCmd::Wer { reference, hyp } => cmd_eval_wer(&reference, &hyp)?,
                EvalCmd::Secs { a, b } => cmd_eval_secs(&a, &b)?,
                EvalCmd::Fad { a, b } => cmd_eval_fad(&a, &b)?,
                EvalCmd::Kld { p, q } => cmd_eval_kld(&p, &q)?,
                EvalCmd::Beats {
                    accomp,
                    vocal,
                    tolerance,
                } => cmd_eval_beats(&accomp, &vocal, tolerance, out)?.aligned_fraction,
            };
            println!("{v}");
        }
        Command::Bench(BenchCmd::Ablation { spec, seeds, steps }) => {
            let mut ab = cfg.ablation.clone();
            if let Some(p) = spec {
                let text = crate::formats::read_text(&p)?;
                ab.spec = toml::from_str::<ToySpec>(&text).map_err(|e| Error::Format {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
                ab.shifts = vec![0, ab.spec.k_true];
            }
            if let Some(n) = seeds {
                ab.seeds = (seed..seed + n as u64).collect();
            } else if cli.seed.is_some() {
                let n = ab.seeds.len() as u64;
                ab.seeds = (seed..seed + n).collect();
            }
            if let Some(s) = steps {
                ab.steps = s;
            }
            print!("{}", cmd_bench_ablation(&ab, out)?.render());
        }
        Command::Stats(a) => print_json(&cmd_stats(&a.segments, out)?)?,
    }
    Ok(())
}

/// Parse `std::env::args`, run, and map errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
