//! A trainable character denoiser at desk scale: transformer blocks whose
//! queries carry timestep and utterance-summary information while keys and
//! values concatenate projected conditioning frames on a block period, with
//! a softmax head over the alphabet. Gradients are hand-derived; see
//! [`backward`] and the gradient checker in [`train`].

mod backward;
mod forward;
mod params;
mod train;

pub use backward::backward;
pub use forward::{sinusoid_embedding, ForwardTrace};
pub use params::{BlockParams, MiniParams};
pub use train::{
    batch_loss, batch_loss_and_grads, grad_check, prepare_batch, train_step, AdamParams,
    PreparedExample, TrainState,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningSeq, Denoiser, DenoiserOutput};
use crate::diffusion::TokenSeq;
use crate::error::{CoreError, Result};

/// Architecture knobs for the mini denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiniDenoiserConfig {
    /// Alphabet size K.
    pub vocab: usize,
    /// Conditioning feature dimension d.
    pub cond_dim: usize,
    /// Transformer block count.
    pub blocks: usize,
    /// Embedding width W (even, divisible by `heads`).
    pub width: usize,
    /// Attention head count.
    pub heads: usize,
    /// Feed-forward hidden dimension.
    pub ff_width: usize,
    /// Concatenate conditioning frames into keys/values on every k-th block.
    pub concat_period: usize,
    /// Probability of replacing a training pass with an unconditional one.
    pub cond_dropout: f64,
}

impl Default for MiniDenoiserConfig {
    fn default() -> Self {
        Self {
            vocab: 29,
            cond_dim: 16,
            blocks: 2,
            width: 64,
            heads: 4,
            ff_width: 256,
            concat_period: 2,
            cond_dropout: 0.1,
        }
    }
}

impl MiniDenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.cond_dim == 0 || self.blocks == 0 || self.ff_width == 0 {
            return Err(CoreError::InvalidParameter(
                "vocab, cond_dim, blocks, ff_width must all be >= 1".into(),
            ));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return Err(CoreError::InvalidParameter(
                "width must be a positive even number".into(),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(CoreError::InvalidParameter(
                "heads must divide width".into(),
            ));
        }
        if self.concat_period == 0 {
            return Err(CoreError::InvalidParameter(
                "concat period must be >= 1".into(),
            ));
        }
        // 1.0 is allowed: it turns every training pass unconditional, which
        // the tests use to pin the dropout path.
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(CoreError::InvalidParameter(
                "conditioning dropout must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// The trainable denoiser: a config plus its parameter tensors.
#[derive(Debug, Clone)]
pub struct MiniDenoiser {
    config: MiniDenoiserConfig,
    params: MiniParams,
}

impl MiniDenoiser {
    /// Fresh model with seeded initialization.
    pub fn new(config: MiniDenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = MiniParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    /// Reassemble from existing tensors (checkpoint load).
    pub fn from_parts(config: MiniDenoiserConfig, params: MiniParams) -> Result<Self> {
        config.validate()?;
        let expected = MiniParams::zeros(&config);
        let got = params.tensors();
        let want = expected.tensors();
        if got.len() != want.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter count mismatch: {} tensors vs {}",
                got.len(),
                want.len()
            )));
        }
        for ((gname, gshape, _), (wname, wshape, _)) in got.iter().zip(want.iter()) {
            if gname != wname || gshape != wshape {
                return Err(CoreError::ShapeMismatch(format!(
                    "tensor {gname} has shape {gshape:?}, config implies {wname} {wshape:?}"
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MiniDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &MiniParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MiniParams {
        &mut self.params
    }

    /// Deterministic forward pass keeping every intermediate needed by the
    /// backward pass. `cond` is used as given; dropout is the caller's job.
    pub fn forward_traced(
        &self,
        x_t: &TokenSeq,
        t: usize,
        cond: &ConditioningSeq,
    ) -> Result<ForwardTrace> {
        forward::run(self, x_t, t, cond)
    }

    /// Training-time forward: with `train_mode` set, the conditioning is
    /// dropped (replaced by the unconditional pass) with probability
    /// `cond_dropout` drawn from `rng`.
    pub fn forward_train<R: Rng>(
        &self,
        x_t: &TokenSeq,
        t: usize,
        c: &ConditioningSeq,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<DenoiserOutput> {
        let drop = train_mode && c.is_present() && rng.gen::<f64>() < self.config.cond_dropout;
        let trace = if drop {
            self.forward_traced(x_t, t, &ConditioningSeq::absent(self.config.cond_dim))?
        } else {
            self.forward_traced(x_t, t, c)?
        };
        DenoiserOutput::new(trace.logits)
    }
}

impl Denoiser for MiniDenoiser {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn predict_x0(&self, x_t: &TokenSeq, t: usize, c: &ConditioningSeq) -> Result<DenoiserOutput> {
        let trace = self.forward_traced(x_t, t, c)?;
        DenoiserOutput::new(trace.logits)
    }
}
