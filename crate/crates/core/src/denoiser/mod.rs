//! The pluggable x0 predictor interface and its implementations: an exact
//! Bayes oracle for the aligned toy channel ([`oracle`]) and a trainable
//! mini transformer with hand-derived gradients ([`mini`]).

pub mod mini;
pub mod oracle;

use ndarray::Array2;

use crate::diffusion::{softmax_rows, CategoricalSeq, TokenSeq};
use crate::error::{CoreError, Result};

/// Conditioning feature frames `c`: an M x d matrix plus a presence flag.
/// `present = false` marks the unconditional pass of classifier-free
/// guidance; implementations must not read the frames in that case.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSeq {
    frames: Array2<f64>,
    present: bool,
}

impl ConditioningSeq {
    /// Conditioning with at least one frame.
    pub fn present(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(CoreError::InvalidParameter(
                "conditioning needs at least one frame".into(),
            ));
        }
        Ok(Self {
            frames,
            present: true,
        })
    }

    /// The unconditional marker. `dim` keeps the feature width known for
    /// shape checks.
    pub fn absent(dim: usize) -> Self {
        Self {
            frames: Array2::zeros((0, dim)),
            present: false,
        }
    }

    pub fn is_present(&self) -> bool {
        self.present
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    /// Frame count M (0 when absent).
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Feature dimension d.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// N x K pre-softmax scores parameterizing the predicted x0 distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    logits: Array2<f64>,
}

impl DenoiserOutput {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvariantViolation(
                "non-finite denoiser logits".into(),
            ));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn seq_len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.logits.ncols()
    }

    /// Row-wise softmax into a normalized categorical sequence.
    pub fn probs(&self) -> CategoricalSeq {
        softmax_rows(&self.logits)
    }
}

/// A conditional x0 predictor: given the noisy transcript `x_t`, the
/// timestep, and conditioning `c`, produce logits over the clean transcript.
pub trait Denoiser {
    /// Alphabet size K the predictor emits.
    fn vocab(&self) -> usize;

    /// Predict x0 logits. Must be deterministic given inputs and parameters.
    fn predict_x0(&self, x_t: &TokenSeq, t: usize, c: &ConditioningSeq) -> Result<DenoiserOutput>;
}
