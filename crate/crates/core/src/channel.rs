//! Synthetic conditioning channel: a seeded noisy map from transcripts to
//! feature frames, standing in for a speech feature extractor. Each
//! character owns a codebook vector; frames are codebook rows plus Gaussian
//! noise, optionally stretched to several frames per character.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::alphabet::Alphabet;
use crate::denoiser::ConditioningSeq;
use crate::error::{CoreError, Result};

/// Minimum pairwise distance enforced between codebook rows.
pub const MIN_CODEBOOK_DIST: f64 = 1.0;

/// Parameters of the synthetic channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    /// Feature dimension d.
    pub dim: usize,
    /// Per-frame Gaussian noise standard deviation.
    pub sigma_c: f64,
    /// K x d per-character base vectors.
    pub codebook: Array2<f64>,
    /// Maximum frames per character (1 = aligned).
    pub stretch: usize,
    /// Seed the codebook was drawn from.
    pub seed: u64,
}

/// Draw a codebook of one row per alphabet symbol from a seeded standard
/// normal, then rescale until the minimum pairwise row distance reaches
/// [`MIN_CODEBOOK_DIST`]. Deterministic given the seed.
pub fn make_channel(
    alphabet: &Alphabet,
    dim: usize,
    sigma_c: f64,
    stretch: usize,
    seed: u64,
) -> Result<ChannelSpec> {
    if dim == 0 {
        return Err(CoreError::InvalidParameter("feature dim must be >= 1".into()));
    }
    if !(sigma_c >= 0.0) {
        return Err(CoreError::InvalidParameter(
            "channel noise std must be >= 0".into(),
        ));
    }
    if stretch == 0 {
        return Err(CoreError::InvalidParameter("stretch must be >= 1".into()));
    }
    let k = alphabet.size();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut codebook = Array2::zeros((k, dim));
    for v in codebook.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    loop {
        let min = min_pairwise_distance(&codebook);
        if min >= MIN_CODEBOOK_DIST {
            break;
        }
        let scale = MIN_CODEBOOK_DIST / min * (1.0 + 1e-9);
        codebook.mapv_inplace(|v| v * scale);
    }
    Ok(ChannelSpec {
        dim,
        sigma_c,
        codebook,
        stretch,
        seed,
    })
}

fn min_pairwise_distance(codebook: &Array2<f64>) -> f64 {
    let k = codebook.nrows();
    let mut min = f64::INFINITY;
    for a in 0..k {
        for b in (a + 1)..k {
            let d2: f64 = codebook
                .row(a)
                .iter()
                .zip(codebook.row(b).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            min = min.min(d2.sqrt());
        }
    }
    min
}

/// Emit feature frames for a transcript: each character produces `r` frames
/// (`r` uniform in `1..=stretch`), each frame its codebook row plus
/// `N(0, sigma_c^2 I)` noise. With `stretch = 1` the channel is aligned and
/// `M` equals the transcript length.
pub fn encode_transcript<R: Rng>(
    text: &str,
    channel: &ChannelSpec,
    alphabet: &Alphabet,
    rng: &mut R,
) -> Result<ConditioningSeq> {
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    for c in text.chars() {
        let idx = alphabet
            .index_of(c)
            .ok_or_else(|| CoreError::Encoding(format!("character {c:?} not in alphabet")))?;
        let reps = if channel.stretch == 1 {
            1
        } else {
            rng.gen_range(1..=channel.stretch)
        };
        for _ in 0..reps {
            for d in 0..channel.dim {
                let noise: f64 = rng.sample(StandardNormal);
                rows.push(channel.codebook[(idx, d)] + channel.sigma_c * noise);
            }
            frames += 1;
        }
    }
    let matrix = Array2::from_shape_vec((frames, channel.dim), rows)
        .expect("row-major frame buffer matches shape");
    ConditioningSeq::present(matrix)
}

/// A generated corpus: transcripts stored as text, features regenerated
/// on demand from `(seed, index)` so nothing heavyweight is persisted.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    transcripts: Vec<String>,
    channel: ChannelSpec,
    seed: u64,
}

impl ToyDataset {
    pub fn new(transcripts: Vec<String>, channel: ChannelSpec, seed: u64) -> Self {
        Self {
            transcripts,
            channel,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    pub fn transcript(&self, index: usize) -> &str {
        &self.transcripts[index]
    }

    pub fn transcripts(&self) -> &[String] {
        &self.transcripts
    }

    pub fn channel(&self) -> &ChannelSpec {
        &self.channel
    }

    /// Regenerate the conditioning features for one item. Bit-identical
    /// across calls and across runs for the same `(seed, index)`.
    pub fn features(&self, index: usize, alphabet: &Alphabet) -> Result<ConditioningSeq> {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(self.seed, index as u64));
        encode_transcript(self.transcript(index), &self.channel, alphabet, &mut rng)
    }

    /// Even indices: training half.
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 == 0).collect()
    }

    /// Odd indices: held-out half.
    pub fn eval_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 2 == 1).collect()
    }
}

/// SplitMix64 finalizer over seed and index.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// The bundled public-domain word list used by [`generate_dataset`].
pub fn default_words() -> Vec<&'static str> {
    include_str!("words.txt").lines().collect()
}

/// Compose `count` space-separated transcripts with lengths inside
/// `min_len..=max_len` characters. Transcript `i` is a pure function of
/// `(seed, i)`.
pub fn generate_dataset(
    words: &[&str],
    count: usize,
    min_len: usize,
    max_len: usize,
    channel: ChannelSpec,
    seed: u64,
) -> Result<ToyDataset> {
    if words.is_empty() {
        return Err(CoreError::InvalidParameter("empty word list".into()));
    }
    let shortest = words.iter().map(|w| w.chars().count()).min().unwrap();
    if min_len > max_len || shortest > max_len {
        return Err(CoreError::InvalidParameter(format!(
            "length range {min_len}..={max_len} cannot be satisfied"
        )));
    }
    let mut transcripts = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed ^ 0x7463, index as u64));
        // Per-item target keeps lengths spread across the whole range.
        let target = rng.gen_range(min_len..=max_len);
        let mut text = String::new();
        let mut attempts = 0usize;
        loop {
            let w = words[rng.gen_range(0..words.len())];
            let extra = if text.is_empty() {
                w.chars().count()
            } else {
                w.chars().count() + 1
            };
            if text.chars().count() + extra <= target {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(w);
            }
            if text.chars().count() >= min_len
                && (text.chars().count() + 2 > target || attempts > 200)
            {
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(CoreError::InvalidParameter(format!(
                    "could not fill length range {min_len}..={max_len} from the word list"
                )));
            }
        }
        transcripts.push(text);
    }
    Ok(ToyDataset::new(transcripts, channel, seed))
}
