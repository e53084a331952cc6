//! Implementations of the CLI subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;

use chardiff_core::denoiser::mini::{train_step, AdamParams, TrainState};
use chardiff_core::{
    cer, decode, load_checkpoint, make_channel, save_checkpoint, tokens_to_text, wer, Alphabet,
    Checkpoint, CorpusAccumulator, Denoiser, Direction, MiniDenoiser,
    NoiseSchedule, OracleDenoiser, ToyDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::config::RunConfig;

pub fn in_out_dir(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

fn write_resolved_config(cfg: &RunConfig, next_to: &Path) -> Result<()> {
    let mut name = next_to.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    let path = next_to.with_file_name(name);
    cfg.save(&path)
}

fn load_dataset(cfg: &RunConfig, data_path: &Path) -> Result<ToyDataset> {
    let alphabet = Alphabet::default();
    let text = std::fs::read_to_string(data_path)
        .with_context(|| format!("reading transcripts {}", data_path.display()))?;
    let transcripts: Vec<String> = text.lines().map(str::to_owned).collect();
    if transcripts.is_empty() {
        bail!("no transcripts in {}", data_path.display());
    }
    let channel = make_channel(
        &alphabet,
        cfg.channel.dim,
        cfg.channel.sigma_c,
        cfg.channel.stretch,
        cfg.channel.seed,
    )?;
    Ok(ToyDataset::new(transcripts, channel, cfg.data.seed))
}

fn split_indices(dataset: &ToyDataset, split: &str) -> Result<Vec<usize>> {
    Ok(match split {
        "train" => dataset.train_indices(),
        "eval" => dataset.eval_indices(),
        "all" => (0..dataset.len()).collect(),
        other => bail!("unknown split {other:?} (expected train, eval, or all)"),
    })
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path, out: &Path) -> Result<()> {
    let alphabet = Alphabet::default();
    let words = chardiff_core::channel::default_words();
    let channel = make_channel(
        &alphabet,
        cfg.channel.dim,
        cfg.channel.sigma_c,
        cfg.channel.stretch,
        cfg.channel.seed,
    )?;
    let dataset = chardiff_core::generate_dataset(
        &words,
        cfg.data.count,
        cfg.data.min_len,
        cfg.data.max_len,
        channel,
        cfg.data.seed,
    )?;
    let path = in_out_dir(out_dir, out);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut body = dataset.transcripts().join("\n");
    body.push('\n');
    std::fs::write(&path, body)?;
    write_resolved_config(cfg, &path)?;
    println!("wrote {} transcripts to {}", dataset.len(), path.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out_dir: &Path, data: &Path, checkpoint: &Path) -> Result<()> {
    let alphabet = Alphabet::default();
    let dataset = load_dataset(cfg, data)?;
    let sched = NoiseSchedule::cosine(cfg.schedule.steps, cfg.schedule.s)?;
    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        bail!("training split is empty");
    }
    let pad_len = dataset
        .transcripts()
        .iter()
        .map(|t| t.chars().count())
        .max()
        .unwrap();
    let mut model = MiniDenoiser::new(cfg.model_config(), cfg.model.init_seed)?;
    let mut state = TrainState::new(&model);
    let opt = AdamParams {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: 1e-8,
        warmup: cfg.train.warmup,
        clip: cfg.train.clip,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.train.seed);
    use rand::Rng;
    println!(
        "training {} params on {} transcripts (pad length {pad_len})",
        model.params().param_count(),
        train_idx.len()
    );
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch);
        for _ in 0..cfg.train.batch {
            let idx = train_idx[rng.gen_range(0..train_idx.len())];
            let x0 = alphabet.to_tokens(dataset.transcript(idx), pad_len)?;
            let cond = dataset.features(idx, &alphabet)?;
            batch.push((x0, cond));
        }
        let loss = train_step(&mut model, &mut state, &opt, &batch, &sched, &mut rng)?;
        if cfg.train.log_every > 0 && (step + 1) % cfg.train.log_every == 0 {
            println!(
                "step {:>6}  loss {:>9.4}  kl {:>9.4}  ce {:>9.4}",
                step + 1,
                loss.total,
                loss.kl_term,
                loss.ce_term
            );
        }
    }
    let path = in_out_dir(out_dir, checkpoint);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&path, &Checkpoint::from_training(&model, &state))?;
    write_resolved_config(cfg, &path)?;
    println!("saved checkpoint to {}", path.display());
    Ok(())
}

pub enum DenoiserChoice {
    Oracle,
    Checkpoint(PathBuf),
}

fn build_denoiser(
    choice: &DenoiserChoice,
    dataset: &ToyDataset,
) -> Result<Box<dyn Denoiser + Sync>> {
    Ok(match choice {
        DenoiserChoice::Oracle => Box::new(OracleDenoiser::new(dataset.channel().clone())),
        DenoiserChoice::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            let (model, _) = ckpt.into_training()?;
            Box::new(model)
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub fn decode_corpus(
    cfg: &RunConfig,
    out_dir: &Path,
    data: &Path,
    choice: &DenoiserChoice,
    out: &Path,
    refs_out: Option<&Path>,
    limit: Option<usize>,
) -> Result<()> {
    let alphabet = Alphabet::default();
    let dataset = load_dataset(cfg, data)?;
    let sched = NoiseSchedule::cosine(cfg.schedule.steps, cfg.schedule.s)?;
    let denoiser = build_denoiser(choice, &dataset)?;
    let mut indices = split_indices(&dataset, &cfg.decode.split)?;
    if let Some(limit) = limit {
        indices.truncate(limit);
    }
    if indices.is_empty() {
        bail!("nothing to decode for split {:?}", cfg.decode.split);
    }
    // One independent stream per utterance: seed xor index.
    let hyps: Result<Vec<String>> = indices
        .par_iter()
        .map(|&idx| {
            let cond = dataset.features(idx, &alphabet)?;
            let mut dcfg = cfg.decode_config(cond.len())?;
            dcfg.seed = cfg.decode.seed ^ idx as u64;
            let (tokens, _) = decode(denoiser.as_ref(), &cond, &dcfg, &sched)?;
            Ok(tokens_to_text(&tokens, &alphabet))
        })
        .collect();
    let hyps = hyps?;
    let path = in_out_dir(out_dir, out);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut body = hyps.join("\n");
    body.push('\n');
    std::fs::write(&path, body)?;
    write_resolved_config(cfg, &path)?;
    if let Some(refs_path) = refs_out {
        let rp = in_out_dir(out_dir, refs_path);
        let mut body = indices
            .iter()
            .map(|&i| dataset.transcript(i))
            .collect::<Vec<_>>()
            .join("\n");
        body.push('\n');
        std::fs::write(&rp, body)?;
    }
    println!("decoded {} utterances to {}", hyps.len(), path.display());
    Ok(())
}

pub fn trace(
    cfg: &RunConfig,
    out_dir: &Path,
    data: &Path,
    choice: &DenoiserChoice,
    index: usize,
    out: &Path,
) -> Result<()> {
    let alphabet = Alphabet::default();
    let dataset = load_dataset(cfg, data)?;
    if index >= dataset.len() {
        bail!("index {index} out of range (dataset has {})", dataset.len());
    }
    let sched = NoiseSchedule::cosine(cfg.schedule.steps, cfg.schedule.s)?;
    let denoiser = build_denoiser(choice, &dataset)?;
    let cond = dataset.features(index, &alphabet)?;
    let mut dcfg = cfg.decode_config(cond.len())?;
    dcfg.seed = cfg.decode.seed ^ index as u64;
    let (_, trace) = decode(denoiser.as_ref(), &cond, &dcfg, &sched)?;
    let path = in_out_dir(out_dir, out);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(&path)?;
    for step in &trace.steps {
        let line = json!({
            "t": step.t,
            "direction": match step.direction {
                Direction::Reverse => "reverse",
                Direction::Forward => "forward",
            },
            "text": tokens_to_text(&step.tokens, &alphabet),
        });
        writeln!(file, "{line}")?;
    }
    write_resolved_config(cfg, &path)?;
    println!(
        "wrote {} trace records to {}",
        trace.steps.len(),
        path.display()
    );
    Ok(())
}

fn normalize(text: &str) -> String {
    text.trim()
        .to_uppercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn eval(ref_path: &Path, hyp_path: &Path, out_dir: &Path, out: Option<&Path>) -> Result<()> {
    let refs = std::fs::read_to_string(ref_path)
        .with_context(|| format!("reading references {}", ref_path.display()))?;
    let hyps = std::fs::read_to_string(hyp_path)
        .with_context(|| format!("reading hypotheses {}", hyp_path.display()))?;
    let refs: Vec<String> = refs.lines().map(normalize).collect();
    let hyps: Vec<String> = hyps.lines().map(normalize).collect();
    if refs.len() != hyps.len() {
        bail!(
            "line count mismatch: {} references vs {} hypotheses",
            refs.len(),
            hyps.len()
        );
    }
    if refs.is_empty() {
        bail!("empty evaluation inputs");
    }
    let mut lines = vec!["index\twer\tcer\tref_words\tref_chars".to_string()];
    let mut word_acc = CorpusAccumulator::default();
    let mut char_acc = CorpusAccumulator::default();
    for (i, (r, h)) in refs.iter().zip(hyps.iter()).enumerate() {
        let w = wer(r, h).map_err(|e| anyhow!("line {i}: {e}"))?;
        let c = cer(r, h).map_err(|e| anyhow!("line {i}: {e}"))?;
        word_acc.add(&w);
        char_acc.add(&c);
        lines.push(format!(
            "{i}\t{:.6}\t{:.6}\t{}\t{}",
            w.rate(),
            c.rate(),
            w.ref_len,
            c.ref_len
        ));
    }
    lines.push(format!(
        "corpus\t{:.6}\t{:.6}\t{}\t{}",
        word_acc.rate(),
        char_acc.rate(),
        word_acc.ref_len,
        char_acc.ref_len
    ));
    let report = lines.join("\n") + "\n";
    if let Some(out) = out {
        let path = in_out_dir(out_dir, out);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, &report)?;
    }
    println!(
        "corpus WER {:.3}%  CER {:.3}%  ({} utterances)",
        100.0 * word_acc.rate(),
        100.0 * char_acc.rate(),
        refs.len()
    );
    Ok(())
}

pub fn dump_schedule(steps: usize, s: f64) -> Result<()> {
    let sched = NoiseSchedule::cosine(steps, s)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    writeln!(lock, "t\tbeta\talpha\talpha_bar")?;
    for t in 1..=steps {
        writeln!(
            lock,
            "{t}\t{:.12}\t{:.12}\t{:.12}",
            sched.beta(t)?,
            sched.alpha(t)?,
            sched.alpha_bar(t)?
        )?;
    }
    Ok(())
}
