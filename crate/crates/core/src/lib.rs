//! Discrete-diffusion sequence transcription at desk scale.
//!
//! The crate implements multinomial diffusion over a 29-character alphabet:
//! noise schedules ([`schedule`]), the exact forward/posterior/reverse
//! distribution math and training loss ([`diffusion`]), pluggable x0
//! predictors ([`denoiser`]) including an exact channel oracle and a
//! trainable mini transformer with hand-derived gradients, the full
//! decoding ladder ([`decoder`]) with classifier-free guidance, resampling,
//! and sequentially progressive noise scaling, a synthetic conditioning
//! channel ([`channel`]), WER/CER evaluation ([`eval`]), and a pinned
//! checkpoint file format ([`checkpoint`]).

pub mod alphabet;
pub mod channel;
pub mod checkpoint;
pub mod decoder;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod schedule;

pub use alphabet::{Alphabet, ALPHABET_SIZE};
pub use channel::{encode_transcript, generate_dataset, make_channel, ChannelSpec, ToyDataset};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::{
    decode, guide_logits, resample_walk, tokens_to_text, DecodeConfig, DecodeTrace, Direction,
    JumpIndexing, Strategy, TraceStep, WalkStep,
};
pub use denoiser::{
    mini::{MiniDenoiser, MiniDenoiserConfig},
    oracle::OracleDenoiser,
    ConditioningSeq, Denoiser, DenoiserOutput,
};
pub use diffusion::{
    diffusion_loss, forward_marginal_dist, forward_step_dist, kl_categorical, posterior_dist,
    reverse_dist, sample_seq, softmax_rows, uniform_seq, CategoricalSeq, LossBreakdown, TokenSeq,
};
pub use error::{CoreError, Result};
pub use eval::{cer, edit_distance, wer, CorpusAccumulator, ErrorReport};
pub use schedule::{
    cosine_schedule, progressive_factor, scaled_beta, NoiseSchedule, ProgressiveConfig,
};
