//! Inference: ancestral decoding, classifier-free guidance, resampling
//! excursions, sequentially progressive noise scaling, and trace capture.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::alphabet::Alphabet;
use crate::denoiser::{ConditioningSeq, Denoiser, DenoiserOutput};
use crate::diffusion::{
    forward_step_dist, reverse_dist, sample_seq, uniform_seq, CategoricalSeq, TokenSeq,
};
use crate::error::{CoreError, Result};
use crate::schedule::{progressive_factor, NoiseSchedule, ProgressiveConfig};

/// Decoding strategies, cumulative from top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Plain ancestral reverse walk, conditional only.
    Basic,
    /// Classifier-free guidance on every reverse step.
    Guided,
    /// Guidance plus re-noising excursions on a jump schedule.
    Resample,
    /// Resampling with position-scaled re-noising.
    ResampleProgressive,
}

impl Strategy {
    pub fn uses_guidance(self) -> bool {
        !matches!(self, Strategy::Basic)
    }

    pub fn uses_resampling(self) -> bool {
        matches!(self, Strategy::Resample | Strategy::ResampleProgressive)
    }
}

/// How the jump index `j` fed to the progressive scaling advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpIndexing {
    /// `j` counts excursions within each anchor, restarting at 0.
    PerAnchor,
    /// `j` counts excursions over the whole walk, saturating at `J - 1`.
    Global,
}

/// Everything a decode run needs besides the model and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Transcript buffer length `N`.
    pub seq_len: usize,
    /// Guidance weight `w`; 1 means no guidance.
    pub guidance_w: f64,
    pub strategy: Strategy,
    /// Jump length `L`.
    pub jump_len: usize,
    /// Number of jumps `J`.
    pub jumps: usize,
    pub seed: u64,
    pub jump_indexing: JumpIndexing,
    /// Sigmoid divisor of the progressive scaling function.
    pub progressive_slope: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seq_len: 400,
            guidance_w: 1.5,
            strategy: Strategy::Basic,
            jump_len: 10,
            jumps: 10,
            seed: 0,
            jump_indexing: JumpIndexing::PerAnchor,
            progressive_slope: 8.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.seq_len == 0 {
            return Err(CoreError::InvalidParameter(
                "decode needs T >= 1 and N >= 1".into(),
            ));
        }
        if !(self.guidance_w >= 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "guidance weight must be >= 0, got {}",
                self.guidance_w
            )));
        }
        if self.strategy.uses_resampling() {
            if self.jump_len == 0 || self.jumps == 0 {
                return Err(CoreError::InvalidParameter(
                    "resampling needs L >= 1 and J >= 1".into(),
                ));
            }
            if self.steps % self.jump_len != 0 {
                return Err(CoreError::InvalidParameter(format!(
                    "jump length {} must divide T = {}",
                    self.jump_len, self.steps
                )));
            }
        }
        Ok(())
    }
}

/// Direction of one walk transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Reverse,
    Forward,
}

/// One transition of the resampling time walk: where it lands and, for
/// forward segments, which jump index scales the noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkStep {
    pub direction: Direction,
    /// Timestep after taking the step.
    pub t_to: usize,
    /// Jump index for progressive scaling; meaningful on forward steps.
    pub jump: usize,
}

/// Snapshot of the transcript state after one walk transition. The first
/// entry holds the initial `x_T` and is labelled `Reverse` by convention.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub t: usize,
    pub direction: Direction,
    pub tokens: TokenSeq,
}

/// Ordered snapshots from `t = T` down to `t = 0`.
#[derive(Debug, Clone, Default)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

/// Classifier-free guidance combination on logits:
/// `w * cond + (1 - w) * uncond`, applied before the softmax.
pub fn guide_logits(
    cond: &DenoiserOutput,
    uncond: &DenoiserOutput,
    w: f64,
) -> Result<DenoiserOutput> {
    if cond.logits().dim() != uncond.logits().dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "conditional logits {:?} vs unconditional {:?}",
            cond.logits().dim(),
            uncond.logits().dim()
        )));
    }
    DenoiserOutput::new(cond.logits() * w + uncond.logits() * (1.0 - w))
}

/// Build the resampling time walk: a linear reverse pass from `t = T` to 0
/// with, at each of the `T/L - 1` interior anchors, `J - 1` extra
/// excursions of `L` forward then `L` reverse steps. Net reverse progress
/// is exactly `T`.
pub fn resample_walk(
    steps: usize,
    jump_len: usize,
    jumps: usize,
    indexing: JumpIndexing,
) -> Result<Vec<WalkStep>> {
    if steps == 0 || jump_len == 0 || jumps == 0 {
        return Err(CoreError::InvalidParameter(
            "walk needs T, L, J >= 1".into(),
        ));
    }
    if steps % jump_len != 0 {
        return Err(CoreError::InvalidParameter(format!(
            "jump length {jump_len} must divide T = {steps}"
        )));
    }
    let mut walk = Vec::new();
    let mut t = steps;
    let mut global_excursion = 0usize;
    let push_reverse = |walk: &mut Vec<WalkStep>, t: &mut usize| {
        *t -= 1;
        walk.push(WalkStep {
            direction: Direction::Reverse,
            t_to: *t,
            jump: 0,
        });
    };
    let anchor_count = steps / jump_len - 1;
    for a in 0..anchor_count {
        let anchor = steps - (a + 1) * jump_len;
        while t > anchor {
            push_reverse(&mut walk, &mut t);
        }
        for excursion in 0..jumps - 1 {
            let j = match indexing {
                JumpIndexing::PerAnchor => excursion,
                JumpIndexing::Global => global_excursion.min(jumps - 1),
            };
            for _ in 0..jump_len {
                t += 1;
                walk.push(WalkStep {
                    direction: Direction::Forward,
                    t_to: t,
                    jump: j,
                });
            }
            for _ in 0..jump_len {
                push_reverse(&mut walk, &mut t);
            }
            global_excursion += 1;
        }
    }
    while t > 0 {
        push_reverse(&mut walk, &mut t);
    }
    Ok(walk)
}

/// Plain linear reverse walk of `T` steps.
fn linear_walk(steps: usize) -> Vec<WalkStep> {
    (0..steps)
        .map(|i| WalkStep {
            direction: Direction::Reverse,
            t_to: steps - 1 - i,
            jump: 0,
        })
        .collect()
}

/// Run the full inference loop. Draws `x_T` uniformly, then follows the
/// walk dictated by the strategy: each reverse step predicts x0 (guided
/// when the strategy asks for it), samples the reverse distribution, and at
/// `t = 1` samples the prediction directly; each forward step re-noises
/// through the step kernel, position-scaled under the progressive strategy.
pub fn decode<D: Denoiser + ?Sized>(
    denoiser: &D,
    c: &ConditioningSeq,
    cfg: &DecodeConfig,
    sched: &NoiseSchedule,
) -> Result<(TokenSeq, DecodeTrace)> {
    cfg.validate()?;
    if sched.steps() != cfg.steps {
        return Err(CoreError::ShapeMismatch(format!(
            "schedule has {} steps, decode config wants {}",
            sched.steps(),
            cfg.steps
        )));
    }
    let vocab = denoiser.vocab();
    let walk = if cfg.strategy.uses_resampling() {
        resample_walk(cfg.steps, cfg.jump_len, cfg.jumps, cfg.jump_indexing)?
    } else {
        linear_walk(cfg.steps)
    };
    let progressive = if cfg.strategy == Strategy::ResampleProgressive {
        Some(ProgressiveConfig::with_slope(
            cfg.seq_len,
            cfg.jumps,
            cfg.progressive_slope,
        )?)
    } else {
        None
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut x = sample_seq(&uniform_seq(cfg.seq_len, vocab), &mut rng)?;
    let mut t = cfg.steps;
    let mut trace = DecodeTrace::default();
    trace.steps.push(TraceStep {
        t,
        direction: Direction::Reverse,
        tokens: x.clone(),
    });

    let unconditional = ConditioningSeq::absent(c.dim());
    for step in &walk {
        match step.direction {
            Direction::Reverse => {
                let cond_out = denoiser.predict_x0(&x, t, c)?;
                let x0_hat = if cfg.strategy.uses_guidance() && cfg.guidance_w != 1.0 {
                    let uncond_out = denoiser.predict_x0(&x, t, &unconditional)?;
                    guide_logits(&cond_out, &uncond_out, cfg.guidance_w)?.probs()
                } else {
                    cond_out.probs()
                };
                x = if t == 1 {
                    sample_seq(&x0_hat, &mut rng)?
                } else {
                    sample_seq(&reverse_dist(&x, &x0_hat, t, sched)?, &mut rng)?
                };
                t -= 1;
            }
            Direction::Forward => {
                t += 1;
                let dist = match &progressive {
                    Some(pcfg) => scaled_forward_dist(&x, t, step.jump, sched, pcfg)?,
                    None => forward_step_dist(&x, t, sched)?,
                };
                x = sample_seq(&dist, &mut rng)?;
            }
        }
        debug_assert_eq!(t, step.t_to);
        trace.steps.push(TraceStep {
            t,
            direction: step.direction,
            tokens: x.clone(),
        });
    }
    debug_assert_eq!(t, 0);
    Ok((x, trace))
}

/// Forward kernel with the position-scaled betas
/// `beta'_{t,i} = beta_t * f(i, j)`.
fn scaled_forward_dist(
    x: &TokenSeq,
    t: usize,
    jump: usize,
    sched: &NoiseSchedule,
    pcfg: &ProgressiveConfig,
) -> Result<CategoricalSeq> {
    let beta = sched.beta(t)?;
    let k = x.vocab();
    let mut probs = Array2::zeros((x.len(), k));
    for (i, &tok) in x.tokens().iter().enumerate() {
        let scaled = beta * progressive_factor(i, jump, pcfg)?;
        let off = scaled / k as f64;
        for kk in 0..k {
            probs[(i, kk)] = if kk == tok { 1.0 - scaled + off } else { off };
        }
    }
    CategoricalSeq::new(probs)
}

/// Render decoded tokens as transcript text (trailing padding stripped).
pub fn tokens_to_text(x: &TokenSeq, alphabet: &Alphabet) -> String {
    alphabet.to_text(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{encode_transcript, make_channel};
    use crate::denoiser::oracle::OracleDenoiser;
    use approx::assert_abs_diff_eq;

    #[test]
    fn guide_logits_reference_points() {
        let cond = DenoiserOutput::new(ndarray::array![[2.0, 0.0]]).unwrap();
        let uncond = DenoiserOutput::new(ndarray::array![[1.0, 0.0]]).unwrap();
        let w15 = guide_logits(&cond, &uncond, 1.5).unwrap();
        assert_abs_diff_eq!(w15.logits()[(0, 0)], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w15.logits()[(0, 1)], 0.0, epsilon = 1e-12);
        let w1 = guide_logits(&cond, &uncond, 1.0).unwrap();
        assert_eq!(w1.logits(), cond.logits());
        let w0 = guide_logits(&cond, &uncond, 0.0).unwrap();
        assert_eq!(w0.logits(), uncond.logits());
        let bad = DenoiserOutput::new(ndarray::array![[1.0, 0.0, 0.0]]).unwrap();
        assert!(guide_logits(&cond, &bad, 1.5).is_err());
    }

    #[test]
    fn walk_with_one_jump_is_linear() {
        let walk = resample_walk(12, 3, 1, JumpIndexing::PerAnchor).unwrap();
        assert_eq!(walk.len(), 12);
        assert!(walk.iter().all(|s| s.direction == Direction::Reverse));
        assert_eq!(walk.last().unwrap().t_to, 0);
    }

    #[test]
    fn walk_t4_l2_j2_reference_shape() {
        let walk = resample_walk(4, 2, 2, JumpIndexing::PerAnchor).unwrap();
        let reverse = walk
            .iter()
            .filter(|s| s.direction == Direction::Reverse)
            .count();
        let forward = walk.len() - reverse;
        assert_eq!(reverse, 6);
        assert_eq!(forward, 2);
        // One excursion at the single interior anchor t = 2.
        let ts: Vec<usize> = walk.iter().map(|s| s.t_to).collect();
        assert_eq!(ts, vec![3, 2, 3, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn walk_is_continuous_and_terminates_at_zero() {
        for (steps, jump_len, jumps) in [(20, 5, 3), (200, 10, 10), (12, 4, 2), (10, 10, 4)] {
            let walk = resample_walk(steps, jump_len, jumps, JumpIndexing::PerAnchor).unwrap();
            let mut t = steps as i64;
            for s in &walk {
                let delta = s.t_to as i64 - t;
                assert_eq!(delta.abs(), 1);
                match s.direction {
                    Direction::Reverse => assert_eq!(delta, -1),
                    Direction::Forward => assert_eq!(delta, 1),
                }
                t = s.t_to as i64;
            }
            assert_eq!(t, 0);
            let reverse = walk
                .iter()
                .filter(|s| s.direction == Direction::Reverse)
                .count();
            let anchors = steps / jump_len - 1;
            assert_eq!(reverse, steps + anchors * (jumps - 1) * jump_len);
        }
    }

    #[test]
    fn walk_jump_indices_per_anchor_restart() {
        let walk = resample_walk(20, 5, 3, JumpIndexing::PerAnchor).unwrap();
        let jumps_seen: Vec<usize> = walk
            .iter()
            .filter(|s| s.direction == Direction::Forward)
            .map(|s| s.jump)
            .collect();
        // 3 anchors, J-1 = 2 excursions each, L = 5 forward steps per excursion.
        let expected: Vec<usize> = [0, 1, 0, 1, 0, 1]
            .iter()
            .flat_map(|&j| std::iter::repeat(j).take(5))
            .collect();
        assert_eq!(jumps_seen, expected);
    }

    #[test]
    fn walk_jump_indices_global_saturate() {
        let walk = resample_walk(20, 5, 3, JumpIndexing::Global).unwrap();
        let jumps_seen: Vec<usize> = walk
            .iter()
            .filter(|s| s.direction == Direction::Forward)
            .map(|s| s.jump)
            .collect();
        // Global counter 0,1,2,3,4,5 saturates at J-1 = 2.
        let expected: Vec<usize> = [0, 1, 2, 2, 2, 2]
            .iter()
            .flat_map(|&j| std::iter::repeat(j).take(5))
            .collect();
        assert_eq!(jumps_seen, expected);
    }

    #[test]
    fn walk_rejects_bad_divisibility() {
        assert!(resample_walk(10, 3, 2, JumpIndexing::PerAnchor).is_err());
    }

    fn oracle_setup(
        sigma: f64,
        text: &str,
        seed: u64,
    ) -> (OracleDenoiser, ConditioningSeq, Alphabet) {
        let alphabet = Alphabet::default();
        let channel = make_channel(&alphabet, 16, sigma, 1, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = encode_transcript(text, &channel, &alphabet, &mut rng).unwrap();
        (OracleDenoiser::new(channel), c, alphabet)
    }

    #[test]
    fn oracle_basic_decode_recovers_noiseless_transcripts() {
        let sched = NoiseSchedule::cosine(50, 0.008).unwrap();
        let mut total = 0usize;
        let mut correct = 0usize;
        for run in 0..50u64 {
            let text = "MISTER QUILTER IS THE APOSTLE";
            let (oracle, c, alphabet) = oracle_setup(0.0, text, run);
            let cfg = DecodeConfig {
                steps: 50,
                seq_len: c.len(),
                strategy: Strategy::Basic,
                seed: run,
                ..DecodeConfig::default()
            };
            let (x, _) = decode(&oracle, &c, &cfg, &sched).unwrap();
            let decoded = tokens_to_text(&x, &alphabet);
            total += text.len();
            correct += decoded
                .chars()
                .zip(text.chars())
                .filter(|(a, b)| a == b)
                .count();
        }
        assert!(
            correct as f64 >= 0.99 * total as f64,
            "{correct}/{total} positions correct"
        );
    }

    #[test]
    fn decode_is_deterministic_given_seed() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let (oracle, c, _) = oracle_setup(0.3, "HELLO THERE WORLD", 5);
        let cfg = DecodeConfig {
            steps: 20,
            seq_len: c.len(),
            strategy: Strategy::Resample,
            jump_len: 5,
            jumps: 2,
            seed: 1234,
            ..DecodeConfig::default()
        };
        let (xa, ta) = decode(&oracle, &c, &cfg, &sched).unwrap();
        let (xb, tb) = decode(&oracle, &c, &cfg, &sched).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ta.steps.len(), tb.steps.len());
        for (a, b) in ta.steps.iter().zip(tb.steps.iter()) {
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn basic_equals_guided_with_unit_weight() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let (oracle, c, _) = oracle_setup(0.2, "SAME SEED SAME OUTPUT", 9);
        let base = DecodeConfig {
            steps: 20,
            seq_len: c.len(),
            strategy: Strategy::Basic,
            guidance_w: 123.0, // ignored by basic
            seed: 7,
            ..DecodeConfig::default()
        };
        let guided = DecodeConfig {
            strategy: Strategy::Guided,
            guidance_w: 1.0,
            ..base.clone()
        };
        let (xa, _) = decode(&oracle, &c, &base, &sched).unwrap();
        let (xb, _) = decode(&oracle, &c, &guided, &sched).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn zero_weight_equals_unconditional_decode() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let (oracle, c, _) = oracle_setup(0.2, "GUIDANCE OFF", 11);
        let guided_off = DecodeConfig {
            steps: 20,
            seq_len: c.len(),
            strategy: Strategy::Guided,
            guidance_w: 0.0,
            seed: 21,
            ..DecodeConfig::default()
        };
        let basic = DecodeConfig {
            strategy: Strategy::Basic,
            guidance_w: 1.0,
            ..guided_off.clone()
        };
        let (xa, _) = decode(&oracle, &c, &guided_off, &sched).unwrap();
        let (xb, _) =
            decode(&oracle, &ConditioningSeq::absent(c.dim()), &basic, &sched).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn trace_lengths_match_walk_shape() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let (oracle, c, _) = oracle_setup(0.2, "TRACE LENGTH", 3);
        let basic = DecodeConfig {
            steps: 20,
            seq_len: c.len(),
            strategy: Strategy::Basic,
            seed: 1,
            ..DecodeConfig::default()
        };
        let (_, trace) = decode(&oracle, &c, &basic, &sched).unwrap();
        assert_eq!(trace.steps.len(), 21);
        assert_eq!(trace.steps[0].t, 20);
        assert_eq!(trace.steps.last().unwrap().t, 0);

        let resample = DecodeConfig {
            strategy: Strategy::Resample,
            jump_len: 5,
            jumps: 3,
            ..basic
        };
        let walk = resample_walk(20, 5, 3, JumpIndexing::PerAnchor).unwrap();
        let (_, trace) = decode(&oracle, &c, &resample, &sched).unwrap();
        assert_eq!(trace.steps.len(), walk.len() + 1);
        assert_eq!(trace.steps.last().unwrap().t, 0);
        // Directions consistent with the t deltas.
        for pair in trace.steps.windows(2) {
            let delta = pair[1].t as i64 - pair[0].t as i64;
            match pair[1].direction {
                Direction::Reverse => assert_eq!(delta, -1),
                Direction::Forward => assert_eq!(delta, 1),
            }
        }
    }

    #[test]
    fn progressive_retention_holds_at_last_jump() {
        // Positions with f(i, J-1) < 1e-6 should essentially never flip
        // during scaled forward steps: budget 1 flip per 1e5 position-steps.
        let steps = 200;
        let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
        let n = 400;
        let jumps = 10;
        let pcfg = ProgressiveConfig::new(n, jumps).unwrap();
        let j = jumps - 1;
        let retained: Vec<usize> = (0..n)
            .filter(|&i| progressive_factor(i, j, &pcfg).unwrap() < 1e-6)
            .collect();
        assert!(retained.len() > 100, "expected a long retained prefix");
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut x = sample_seq(&uniform_seq(n, 29), &mut rng).unwrap();
        let mut flips = 0usize;
        let mut position_steps = 0usize;
        for rep in 0..500 {
            let t = 1 + (rep % steps);
            let before: Vec<usize> = retained.iter().map(|&i| x.tokens()[i]).collect();
            x = sample_seq(&scaled_forward_dist(&x, t, j, &sched, &pcfg).unwrap(), &mut rng)
                .unwrap();
            flips += retained
                .iter()
                .zip(before.iter())
                .filter(|(&i, &b)| x.tokens()[i] != b)
                .count();
            position_steps += retained.len();
        }
        assert!(position_steps > 100_000);
        let budget = position_steps as f64 / 1e5;
        assert!(
            (flips as f64) <= budget.max(1.0),
            "{flips} flips in {position_steps} position-steps"
        );
    }

    #[test]
    fn oracle_trace_accuracy_is_nondecreasing() {
        // Fraction of correct characters in basic-decode snapshots, averaged
        // over runs, should rise monotonically (1% slack).
        let steps = 50;
        let sched = NoiseSchedule::cosine(steps, 0.008).unwrap();
        let text = "THE CAT SAT ON THE MAT";
        let runs = 50u64;
        let mut acc = vec![0.0f64; steps + 1];
        for run in 0..runs {
            let (oracle, c, alphabet) = oracle_setup(0.1, text, run);
            let cfg = DecodeConfig {
                steps,
                seq_len: c.len(),
                strategy: Strategy::Basic,
                seed: run ^ 0xabcdef,
                ..DecodeConfig::default()
            };
            let truth = alphabet.to_tokens(text, c.len()).unwrap();
            let (_, trace) = decode(&oracle, &c, &cfg, &sched).unwrap();
            for (idx, snap) in trace.steps.iter().enumerate() {
                let correct = snap
                    .tokens
                    .tokens()
                    .iter()
                    .zip(truth.tokens())
                    .filter(|(a, b)| a == b)
                    .count();
                acc[idx] += correct as f64 / truth.len() as f64;
            }
        }
        for v in acc.iter_mut() {
            *v /= runs as f64;
        }
        for w in acc.windows(2) {
            assert!(
                w[1] >= w[0] - 0.01,
                "mean accuracy dropped: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn config_validation_rejects_bad_setups() {
        let mut cfg = DecodeConfig::default();
        cfg.guidance_w = -0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = DecodeConfig {
            strategy: Strategy::Resample,
            steps: 25,
            jump_len: 10,
            ..DecodeConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.steps = 30;
        assert!(cfg.validate().is_ok());
    }
}
