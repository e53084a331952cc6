//! `chardiff`: train, decode, trace, and evaluate the character diffusion
//! engine on the synthetic conditioning task.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::DenoiserChoice;
use config::{resolve_out_dir, RunConfig};

#[derive(Parser)]
#[command(name = "chardiff", version, about = "Character diffusion transcription engine")]
struct Cli {
    /// Directory for output artifacts (the CHARDIFF_OUT_DIR environment
    /// variable takes precedence).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML run configuration; omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DenoiserArgs {
    /// Use the exact channel oracle instead of a trained model.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,

    /// Checkpoint file with a trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl DenoiserArgs {
    fn choice(&self) -> Result<DenoiserChoice, String> {
        match (&self.checkpoint, self.oracle) {
            (Some(path), false) => Ok(DenoiserChoice::Checkpoint(path.clone())),
            (None, true) => Ok(DenoiserChoice::Oracle),
            (None, false) => Err("pass either --oracle or --checkpoint FILE".into()),
            (Some(_), true) => unreachable!("clap conflict"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transcript corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Transcript count override.
        #[arg(long)]
        count: Option<usize>,
        /// Length range override.
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Corpus seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output transcript file (one per line).
        #[arg(long, default_value = "transcripts.txt")]
        out: PathBuf,
    },
    /// Train the mini denoiser on the even-index half of a corpus.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Transcript file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Training step count override.
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size override.
        #[arg(long)]
        batch: Option<usize>,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.tfdn")]
        checkpoint: PathBuf,
    },
    /// Decode a corpus split and write hypothesis transcripts.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        denoiser: DenoiserArgs,
        /// Strategy override: basic, guided, resample, resample_progressive.
        #[arg(long)]
        strategy: Option<String>,
        /// Guidance weight override.
        #[arg(long)]
        w: Option<f64>,
        /// Decode seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Split override: train, eval, all.
        #[arg(long)]
        split: Option<String>,
        /// Decode at most this many utterances.
        #[arg(long)]
        limit: Option<usize>,
        /// Hypothesis output file.
        #[arg(long, default_value = "hyp.txt")]
        out: PathBuf,
        /// Also write the matching reference transcripts here.
        #[arg(long)]
        refs_out: Option<PathBuf>,
    },
    /// Decode one utterance and write its full denoising trace as JSON lines.
    Trace {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        denoiser: DenoiserArgs,
        /// Utterance index within the corpus.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Strategy override.
        #[arg(long)]
        strategy: Option<String>,
        /// Trace output file (one JSON object per line).
        #[arg(long, default_value = "trace.jsonl")]
        out: PathBuf,
    },
    /// Score hypotheses against references (WER/CER per line and corpus).
    Eval {
        /// Reference transcripts, one per line.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Hypothesis transcripts, one per line.
        #[arg(long)]
        hyp: PathBuf,
        /// Optional TSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the cosine noise schedule as a TSV table.
    DumpSchedule {
        #[command(flatten)]
        config: ConfigArg,
        /// Diffusion step count.
        #[arg(long = "T")]
        steps: Option<usize>,
        /// Cosine offset.
        #[arg(long = "s")]
        s: Option<f64>,
    },
}

enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, CliError> {
    let cfg = match &arg.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> Result<RunConfig, CliError> {
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out_dir = resolve_out_dir(cli.out_dir.as_deref());
    match cli.command {
        Command::GenData {
            config,
            count,
            min_len,
            max_len,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = count {
                cfg.data.count = v;
            }
            if let Some(v) = min_len {
                cfg.data.min_len = v;
            }
            if let Some(v) = max_len {
                cfg.data.max_len = v;
            }
            if let Some(v) = seed {
                cfg.data.seed = v;
            }
            let cfg = validated(cfg)?;
            commands::gen_data(&cfg, &out_dir, &out).map_err(CliError::Runtime)
        }
        Command::Train {
            config,
            data,
            steps,
            batch,
            checkpoint,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = steps {
                cfg.train.steps = v;
            }
            if let Some(v) = batch {
                cfg.train.batch = v;
            }
            let cfg = validated(cfg)?;
            commands::train(&cfg, &out_dir, &data, &checkpoint).map_err(CliError::Runtime)
        }
        Command::Decode {
            config,
            data,
            denoiser,
            strategy,
            w,
            seed,
            split,
            limit,
            out,
            refs_out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = strategy {
                cfg.decode.strategy = v;
            }
            if let Some(v) = w {
                cfg.decode.w = v;
            }
            if let Some(v) = seed {
                cfg.decode.seed = v;
            }
            if let Some(v) = split {
                cfg.decode.split = v;
            }
            let cfg = validated(cfg)?;
            let choice = denoiser
                .choice()
                .map_err(|msg| CliError::Config(anyhow::anyhow!(msg)))?;
            commands::decode_corpus(
                &cfg,
                &out_dir,
                &data,
                &choice,
                &out,
                refs_out.as_deref(),
                limit,
            )
            .map_err(CliError::Runtime)
        }
        Command::Trace {
            config,
            data,
            denoiser,
            index,
            strategy,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = strategy {
                cfg.decode.strategy = v;
            }
            let cfg = validated(cfg)?;
            let choice = denoiser
                .choice()
                .map_err(|msg| CliError::Config(anyhow::anyhow!(msg)))?;
            commands::trace(&cfg, &out_dir, &data, &choice, index, &out)
                .map_err(CliError::Runtime)
        }
        Command::Eval {
            reference,
            hyp,
            out,
        } => commands::eval(&reference, &hyp, &out_dir, out.as_deref())
            .map_err(CliError::Runtime),
        Command::DumpSchedule { config, steps, s } => {
            let cfg = load_config(&config)?;
            let steps = steps.unwrap_or(cfg.schedule.steps);
            let s = s.unwrap_or(cfg.schedule.s);
            // Parameter validation failures here are configuration errors.
            chardiff_core::NoiseSchedule::cosine(steps, s)
                .map_err(|e| CliError::Config(e.into()))?;
            commands::dump_schedule(steps, s).map_err(CliError::Runtime)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
