//! Exact Bayes predictor for the aligned toy channel. Stands in for a
//! trained model when exercising the decoder: it ignores `x_t` and `t` and
//! scores each position directly from its conditioning frame.

use ndarray::Array2;

use crate::channel::ChannelSpec;
use crate::denoiser::{ConditioningSeq, Denoiser, DenoiserOutput};
use crate::diffusion::TokenSeq;
use crate::error::{CoreError, Result};

/// Floor for the channel noise std so a noiseless channel still yields
/// finite logits (the posterior then concentrates on the nearest row).
const SIGMA_FLOOR: f64 = 1e-6;

/// Bayes-posterior x0 predictor for a one-frame-per-character channel with
/// a uniform character prior: logit row i is `-||c_i - e_k||^2 / (2 sigma^2)`.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    channel: ChannelSpec,
}

impl OracleDenoiser {
    pub fn new(channel: ChannelSpec) -> Self {
        Self { channel }
    }

    pub fn channel(&self) -> &ChannelSpec {
        &self.channel
    }

    /// Log-posterior rows for the given frames, independent of `x_t`.
    pub fn posterior_logits(&self, c: &ConditioningSeq) -> Result<Array2<f64>> {
        if c.dim() != self.channel.dim {
            return Err(CoreError::ShapeMismatch(format!(
                "frames have dim {}, channel expects {}",
                c.dim(),
                self.channel.dim
            )));
        }
        let k = self.channel.codebook.nrows();
        let sigma = self.channel.sigma_c.max(SIGMA_FLOOR);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut logits = Array2::zeros((c.len(), k));
        for (i, frame) in c.frames().rows().into_iter().enumerate() {
            for kk in 0..k {
                let d2: f64 = frame
                    .iter()
                    .zip(self.channel.codebook.row(kk).iter())
                    .map(|(f, e)| (f - e) * (f - e))
                    .sum();
                logits[(i, kk)] = -d2 * inv;
            }
        }
        Ok(logits)
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab(&self) -> usize {
        self.channel.codebook.nrows()
    }

    fn predict_x0(&self, x_t: &TokenSeq, _t: usize, c: &ConditioningSeq) -> Result<DenoiserOutput> {
        if !c.is_present() {
            // Unconditional pass: no information, uniform prediction.
            return DenoiserOutput::new(Array2::zeros((x_t.len(), self.vocab())));
        }
        if c.len() != x_t.len() {
            return Err(CoreError::Alignment(format!(
                "oracle needs one frame per character: M = {}, N = {}",
                c.len(),
                x_t.len()
            )));
        }
        DenoiserOutput::new(self.posterior_logits(c)?)
    }
}
