//! Diffusion noise schedules.
//!
//! A [`NoiseSchedule`] holds the per-timestep beta/alpha/alpha-bar tables that
//! define the forward corruption process. The position-scaled variant used by
//! sequentially progressive decoding lives here too: a logistic factor
//! `f(i, j)` that shrinks beta towards zero for early sequence positions on
//! late resample jumps.

use crate::error::{CoreError, Result};

/// Per-timestep noise tables. States are `x_0..x_T`; `beta`/`alpha` are
/// indexed `t in 1..=T` and `alpha_bar` additionally defines `alpha_bar(0) = 1`
/// so the posterior formula is usable at `t = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,      // beta[t-1] is beta_t
    alpha_bar: Vec<f64>, // alpha_bar[t] is alpha-bar_t, index 0 included
}

/// Ceiling applied to raw cosine betas near `t = T`.
pub const BETA_CLIP: f64 = 0.999;

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = g(t)/g(0)` with
    /// `g(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, betas derived from
    /// consecutive alpha-bar ratios and clipped to [`BETA_CLIP`], then
    /// alpha-bar recomputed from the clipped betas so the product identity
    /// holds exactly.
    pub fn cosine(steps: usize, s: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        if !(s > 0.0 && s < 1.0) || !s.is_finite() {
            return Err(CoreError::InvalidParameter(format!(
                "cosine offset s must lie in (0, 1), got {s}"
            )));
        }
        let g = |t: f64| {
            let arg = (t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let g0 = g(0.0);
        let mut beta = Vec::with_capacity(steps);
        let mut prev_bar = 1.0f64;
        for t in 1..=steps {
            let bar = g(t as f64) / g0;
            let raw = 1.0 - bar / prev_bar;
            beta.push(raw.min(BETA_CLIP));
            prev_bar = bar;
        }
        // Recompute alpha-bar from the clipped betas for self-consistency.
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            steps,
            beta,
            alpha_bar,
        })
    }

    /// Build directly from beta values (used by tests and small experiments).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(CoreError::InvalidParameter("empty beta table".into()));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b <= BETA_CLIP)) {
            return Err(CoreError::InvalidParameter(format!(
                "betas must lie in (0, {BETA_CLIP}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self {
            steps: beta.len(),
            beta,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(CoreError::StepOutOfRange {
                t,
                min: 1,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// `beta_t` for `t in 1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    /// `alpha_t = 1 - beta_t` for `t in 1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(1.0 - self.beta[t - 1])
    }

    /// `alpha-bar_t` for `t in 0..=T`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps {
            return Err(CoreError::StepOutOfRange {
                t,
                min: 0,
                max: self.steps,
            });
        }
        Ok(self.alpha_bar[t])
    }
}

/// Free-function form of [`NoiseSchedule::cosine`].
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps, s)
}

/// Parameters of the position-dependent scaling function
/// `f(i, j) = sigmoid((i - j*N/J + 2J) / slope_divisor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressiveConfig {
    /// Sequence length `N` (characters).
    pub seq_len: usize,
    /// Number of jumps `J`.
    pub jumps: usize,
    /// Denominator of the sigmoid argument; 8 in the reference setting.
    pub slope_divisor: f64,
}

impl ProgressiveConfig {
    pub fn new(seq_len: usize, jumps: usize) -> Result<Self> {
        Self::with_slope(seq_len, jumps, 8.0)
    }

    pub fn with_slope(seq_len: usize, jumps: usize, slope_divisor: f64) -> Result<Self> {
        if seq_len == 0 || jumps == 0 {
            return Err(CoreError::InvalidParameter(
                "progressive config needs N >= 1 and J >= 1".into(),
            ));
        }
        if !(slope_divisor > 0.0) {
            return Err(CoreError::InvalidParameter(
                "slope divisor must be positive".into(),
            ));
        }
        Ok(Self {
            seq_len,
            jumps,
            slope_divisor,
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Position/jump noise scale `f(i, j)` in (0, 1). Approaches 1 deep into the
/// sequence on the first jump and 0 at the transcript start on the last jump,
/// so re-noising slides towards the tail as `j` grows.
pub fn progressive_factor(i: usize, j: usize, cfg: &ProgressiveConfig) -> Result<f64> {
    if i >= cfg.seq_len {
        return Err(CoreError::InvalidParameter(format!(
            "position {i} out of range 0..{}",
            cfg.seq_len
        )));
    }
    if j >= cfg.jumps {
        return Err(CoreError::InvalidParameter(format!(
            "jump {j} out of range 0..{}",
            cfg.jumps
        )));
    }
    let offset = 2.0 * cfg.jumps as f64;
    let arg = (i as f64 - (j * cfg.seq_len) as f64 / cfg.jumps as f64 + offset) / cfg.slope_divisor;
    Ok(sigmoid(arg))
}

/// Position-scaled beta `beta'_{t,i} = beta_t * f(i, j)`.
pub fn scaled_beta(
    sched: &NoiseSchedule,
    t: usize,
    i: usize,
    j: usize,
    cfg: &ProgressiveConfig,
) -> Result<f64> {
    Ok(sched.beta(t)? * progressive_factor(i, j, cfg)?)
}
