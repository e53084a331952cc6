//! Exact multinomial diffusion distributions, sampling, and the training loss.
//!
//! Every operation here is a pure function of its inputs. Sampling takes an
//! explicit seeded stream so callers own reproducibility. All math is in f64.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::schedule::NoiseSchedule;

/// Floor applied inside logs so exact zeros cannot produce infinities.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance for the per-row normalization invariant of [`CategoricalSeq`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// A realized transcript state: length-N sequence of indices in `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<usize>,
    vocab: usize,
}

impl TokenSeq {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(CoreError::InvalidParameter("vocab size 0".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= vocab) {
            return Err(CoreError::InvariantViolation(format!(
                "token {bad} outside vocab 0..{vocab}"
            )));
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A length-N sequence of K-way probability vectors (one row per position).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSeq {
    probs: Array2<f64>,
}

impl CategoricalSeq {
    /// Wrap an N x K matrix, enforcing nonnegativity and row sums of 1
    /// within [`ROW_SUM_TOL`].
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(p >= 0.0) {
                    return Err(CoreError::InvariantViolation(format!(
                        "negative or NaN probability at row {i}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(CoreError::InvariantViolation(format!(
                    "row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn vocab(&self) -> usize {
        self.probs.ncols()
    }

    /// Row-wise argmax, breaking ties towards the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_p = f64::NEG_INFINITY;
                for (k, &p) in row.iter().enumerate() {
                    if p > best_p {
                        best_p = p;
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// KL/cross-entropy decomposition of the per-step training loss, in nats,
/// summed over positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub kl_term: f64,
    pub ce_term: f64,
    pub total: f64,
}

/// One forward step `q(x_t | x_{t-1})`: each row is
/// `(1 - beta_t) * onehot(x_prev[i]) + beta_t / K`.
pub fn forward_step_dist(
    x_prev: &TokenSeq,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalSeq> {
    let beta = sched.beta(t)?;
    Ok(kernel_rows(x_prev, 1.0 - beta))
}

/// Closed-form forward marginal `q(x_t | x_0)`: each row is
/// `alpha_bar_t * onehot(x0[i]) + (1 - alpha_bar_t) / K`. Accepts `t = 0`
/// as the identity extension (`alpha_bar_0 = 1`).
pub fn forward_marginal_dist(
    x0: &TokenSeq,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalSeq> {
    let bar = sched.alpha_bar(t)?;
    Ok(kernel_rows(x0, bar))
}

/// Rows `keep * onehot(tok) + (1 - keep) / K`, shared by both kernels.
fn kernel_rows(x: &TokenSeq, keep: f64) -> CategoricalSeq {
    let k = x.vocab();
    let off = (1.0 - keep) / k as f64;
    let mut probs = Array2::from_elem((x.len(), k), off);
    for (i, &tok) in x.tokens().iter().enumerate() {
        probs[(i, tok)] += keep;
    }
    CategoricalSeq { probs }
}

/// Independent per-position categorical draws. Deterministic given the
/// stream state; rows are validated against the normalization invariant.
pub fn sample_seq<R: Rng>(dist: &CategoricalSeq, rng: &mut R) -> Result<TokenSeq> {
    let k = dist.vocab();
    let mut tokens = Vec::with_capacity(dist.len());
    for (i, row) in dist.probs.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(CoreError::InvariantViolation(format!(
                "row {i} sums to {sum}, expected 1"
            )));
        }
        let u: f64 = rng.gen::<f64>() * sum;
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (idx, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = idx;
                break;
            }
        }
        tokens.push(chosen);
    }
    Ok(TokenSeq {
        tokens,
        vocab: k,
    })
}

/// Exact one-step denoising posterior `q(x_{t-1} | x_t, x_0)` for `t >= 2`:
/// row i proportional to
/// `[alpha_t * onehot(x_t[i]) + (1-alpha_t)/K] . [alpha_bar_{t-1} * onehot(x0[i]) + (1-alpha_bar_{t-1})/K]`.
pub fn posterior_dist(
    x_t: &TokenSeq,
    x0: &TokenSeq,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalSeq> {
    check_same_len(x_t, x0)?;
    check_reverse_step(t, sched)?;
    let onehot = onehot_rows(x0);
    reverse_from_x0_rows(x_t, &onehot, t, sched)
}

/// Learned reverse distribution `p(x_{t-1} | x_t)`: the posterior formula
/// with predicted probabilities `x0_hat` in place of the one-hot ground truth.
pub fn reverse_dist(
    x_t: &TokenSeq,
    x0_hat: &CategoricalSeq,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalSeq> {
    if x_t.len() != x0_hat.len() || x_t.vocab() != x0_hat.vocab() {
        return Err(CoreError::ShapeMismatch(format!(
            "x_t is {}x{}, x0_hat is {}x{}",
            x_t.len(),
            x_t.vocab(),
            x0_hat.len(),
            x0_hat.vocab()
        )));
    }
    check_reverse_step(t, sched)?;
    reverse_from_x0_rows(x_t, x0_hat.probs(), t, sched)
}

fn check_same_len(a: &TokenSeq, b: &TokenSeq) -> Result<()> {
    if a.len() != b.len() || a.vocab() != b.vocab() {
        return Err(CoreError::ShapeMismatch(format!(
            "sequences disagree: {}x{} vs {}x{}",
            a.len(),
            a.vocab(),
            b.len(),
            b.vocab()
        )));
    }
    Ok(())
}

fn check_reverse_step(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t < 2 || t > sched.steps() {
        return Err(CoreError::StepOutOfRange {
            t,
            min: 2,
            max: sched.steps(),
        });
    }
    Ok(())
}

fn onehot_rows(x: &TokenSeq) -> Array2<f64> {
    let mut rows = Array2::zeros((x.len(), x.vocab()));
    for (i, &tok) in x.tokens().iter().enumerate() {
        rows[(i, tok)] = 1.0;
    }
    rows
}

fn reverse_from_x0_rows(
    x_t: &TokenSeq,
    x0_rows: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<CategoricalSeq> {
    let k = x_t.vocab();
    let alpha = sched.alpha(t)?;
    let bar_prev = sched.alpha_bar(t - 1)?;
    let step_off = (1.0 - alpha) / k as f64;
    let marg_off = (1.0 - bar_prev) / k as f64;
    let mut probs = Array2::zeros((x_t.len(), k));
    for (i, &tok) in x_t.tokens().iter().enumerate() {
        let mut sum = 0.0;
        for kk in 0..k {
            let step = if kk == tok { alpha + step_off } else { step_off };
            let marg = bar_prev * x0_rows[(i, kk)] + marg_off;
            let v = step * marg;
            probs[(i, kk)] = v;
            sum += v;
        }
        for kk in 0..k {
            probs[(i, kk)] /= sum;
        }
    }
    Ok(CategoricalSeq { probs })
}

/// `sum_i sum_k q_ik (ln q_ik - ln max(p_ik, eps))`, with zero q entries
/// contributing nothing.
pub fn kl_categorical(q: &CategoricalSeq, p: &CategoricalSeq) -> Result<f64> {
    if q.probs.dim() != p.probs.dim() {
        return Err(CoreError::ShapeMismatch(format!(
            "q is {:?}, p is {:?}",
            q.probs.dim(),
            p.probs.dim()
        )));
    }
    let mut total = 0.0;
    for (&qv, &pv) in q.probs.iter().zip(p.probs.iter()) {
        if qv > 0.0 {
            total += qv * (qv.ln() - pv.max(LOG_EPS).ln());
        }
    }
    Ok(total)
}

/// Per-step training loss: KL between posterior and reverse for `t >= 2`,
/// pure cross-entropy against `x0_hat` at the final step `t = 1` where the
/// reverse distribution is taken to be the prediction itself.
pub fn diffusion_loss(
    x0: &TokenSeq,
    x_t: &TokenSeq,
    t: usize,
    x0_hat: &CategoricalSeq,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    check_same_len(x0, x_t)?;
    if x0.len() != x0_hat.len() || x0.vocab() != x0_hat.vocab() {
        return Err(CoreError::ShapeMismatch(format!(
            "x0 is {}x{}, x0_hat is {}x{}",
            x0.len(),
            x0.vocab(),
            x0_hat.len(),
            x0_hat.vocab()
        )));
    }
    if t == 0 || t > sched.steps() {
        return Err(CoreError::StepOutOfRange {
            t,
            min: 1,
            max: sched.steps(),
        });
    }
    if t == 1 {
        let mut ce = 0.0;
        for (i, &tok) in x0.tokens().iter().enumerate() {
            ce -= x0_hat.probs()[(i, tok)].max(LOG_EPS).ln();
        }
        Ok(LossBreakdown {
            kl_term: 0.0,
            ce_term: ce,
            total: ce,
        })
    } else {
        let q = posterior_dist(x_t, x0, t, sched)?;
        let p = reverse_dist(x_t, x0_hat, t, sched)?;
        let kl = kl_categorical(&q, &p)?;
        Ok(LossBreakdown {
            kl_term: kl,
            ce_term: 0.0,
            total: kl,
        })
    }
}

/// Softmax each row of a logits matrix into a [`CategoricalSeq`].
pub fn softmax_rows(logits: &Array2<f64>) -> CategoricalSeq {
    let mut probs = logits.clone();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    CategoricalSeq { probs }
}

/// Uniform distribution over K symbols at every position.
pub fn uniform_seq(len: usize, vocab: usize) -> CategoricalSeq {
    CategoricalSeq {
        probs: Array2::from_elem((len, vocab), 1.0 / vocab as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn seq(tokens: &[usize], vocab: usize) -> TokenSeq {
        TokenSeq::new(tokens.to_vec(), vocab).unwrap()
    }

    /// Brute-force Bayes oracle: enumerate x_{t-1} over all K outcomes and
    /// normalize q(x_t | x_{t-1}) q(x_{t-1} | x_0) directly from the kernel
    /// definitions, per position.
    fn bayes_posterior_oracle(
        x_t: &TokenSeq,
        x0: &TokenSeq,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Array2<f64> {
        let k = x_t.vocab();
        let beta = sched.beta(t).unwrap();
        let bar_prev = sched.alpha_bar(t - 1).unwrap();
        let mut out = Array2::zeros((x_t.len(), k));
        for i in 0..x_t.len() {
            let mut weights = vec![0.0; k];
            for prev in 0..k {
                // q(x_t[i] | x_{t-1} = prev)
                let step = (1.0 - beta) * f64::from(u8::from(x_t.tokens()[i] == prev))
                    + beta / k as f64;
                // q(x_{t-1} = prev | x_0[i])
                let marg = bar_prev * f64::from(u8::from(x0.tokens()[i] == prev))
                    + (1.0 - bar_prev) / k as f64;
                weights[prev] = step * marg;
            }
            let sum: f64 = weights.iter().sum();
            for prev in 0..k {
                out[(i, prev)] = weights[prev] / sum;
            }
        }
        out
    }

    #[test]
    fn forward_step_identity_and_uniform_limits() {
        // beta -> 0 gives (almost) one-hot rows; beta -> max gives near-uniform.
        let sched = NoiseSchedule::from_betas(vec![1e-15, 0.999]).unwrap();
        let x = seq(&[2, 0], 4);
        let d0 = forward_step_dist(&x, 1, &sched).unwrap();
        assert_abs_diff_eq!(d0.probs()[(0, 2)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d0.probs()[(1, 0)], 1.0, epsilon = 1e-12);
        let d1 = forward_step_dist(&x, 2, &sched).unwrap();
        for &p in d1.probs().iter() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-3);
        }
    }

    #[test]
    fn forward_step_plug_in_case() {
        // K=4, beta=0.5, token 2 -> [0.125, 0.125, 0.625, 0.125]
        let sched = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let d = forward_step_dist(&seq(&[2], 4), 1, &sched).unwrap();
        let row: Vec<f64> = d.probs().row(0).to_vec();
        for (got, want) in row.iter().zip([0.125, 0.125, 0.625, 0.125]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_marginal_t0_is_identity() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let x = seq(&[3, 1, 4], 5);
        let d = forward_marginal_dist(&x, 0, &sched).unwrap();
        for (i, &tok) in x.tokens().iter().enumerate() {
            assert_eq!(d.probs()[(i, tok)], 1.0);
        }
    }

    #[test]
    fn forward_marginal_half_mixed() {
        // alpha_bar = 0.5 exactly via a single beta = 0.5 step.
        let sched = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let d = forward_marginal_dist(&seq(&[7], 29), 1, &sched).unwrap();
        assert_abs_diff_eq!(d.probs()[(0, 7)], 0.5 + 0.5 / 29.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[(0, 0)], 0.5 / 29.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probs()[(0, 7)], 0.5172, epsilon = 1e-4);
        assert_abs_diff_eq!(d.probs()[(0, 0)], 0.01724, epsilon = 1e-5);
    }

    #[test]
    fn forward_marginal_near_uniform_at_final_step() {
        let sched = NoiseSchedule::cosine(200, 0.008).unwrap();
        let x = seq(&[0, 11, 28], 29);
        let d = forward_marginal_dist(&x, 200, &sched).unwrap();
        for row in d.probs().rows() {
            let tv: f64 = row.iter().map(|p| (p - 1.0 / 29.0).abs()).sum::<f64>() / 2.0;
            assert!(tv < 2e-3, "total variation {tv}");
        }
    }

    #[test]
    fn sample_seq_recovers_onehot_rows() {
        let mut probs = Array2::zeros((3, 5));
        probs[(0, 4)] = 1.0;
        probs[(1, 0)] = 1.0;
        probs[(2, 2)] = 1.0;
        let dist = CategoricalSeq::new(probs).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = sample_seq(&dist, &mut rng).unwrap();
            assert_eq!(x.tokens(), &[4, 0, 2]);
        }
    }

    #[test]
    fn sample_seq_deterministic_given_seed() {
        let dist = uniform_seq(64, 29);
        let mut a = ChaCha12Rng::seed_from_u64(99);
        let mut b = ChaCha12Rng::seed_from_u64(99);
        assert_eq!(
            sample_seq(&dist, &mut a).unwrap(),
            sample_seq(&dist, &mut b).unwrap()
        );
    }

    #[test]
    fn sample_seq_uniform_frequencies_within_binomial_bounds() {
        let n = 100_000;
        let k = 29;
        let dist = uniform_seq(n, k);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let x = sample_seq(&dist, &mut rng).unwrap();
        let mut counts = vec![0usize; k];
        for &tok in x.tokens() {
            counts[tok] += 1;
        }
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (sym, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "symbol {sym}: count {c} deviates {dev}");
        }
    }

    #[test]
    fn sample_seq_rejects_unnormalized_rows() {
        let probs = Array2::from_elem((2, 4), 0.3);
        let dist = CategoricalSeq { probs };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            sample_seq(&dist, &mut rng),
            Err(CoreError::InvariantViolation(_))
        ));
    }

    #[test]
    fn posterior_worked_k2_case() {
        // alpha_t = 0.8, alpha_bar_{t-1} = 0.5, x_t = 0, x0 = 1 -> [0.75, 0.25]
        let sched = NoiseSchedule::from_betas(vec![0.5, 0.2]).unwrap();
        assert_abs_diff_eq!(sched.alpha(2).unwrap(), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(sched.alpha_bar(1).unwrap(), 0.5, epsilon = 1e-15);
        let post = posterior_dist(&seq(&[0], 2), &seq(&[1], 2), 2, &sched).unwrap();
        assert_abs_diff_eq!(post.probs()[(0, 0)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(post.probs()[(0, 1)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn posterior_collapses_when_no_noise_added() {
        // alpha_t -> 1 (beta tiny): posterior ~ one-hot at x_t.
        let sched = NoiseSchedule::from_betas(vec![0.3, 1e-14]).unwrap();
        let post = posterior_dist(&seq(&[2], 5), &seq(&[4], 5), 2, &sched).unwrap();
        assert_abs_diff_eq!(post.probs()[(0, 2)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn posterior_matches_enumeration_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..200 {
            let k = rng.gen_range(2..=5);
            let steps = rng.gen_range(2..=6);
            let betas: Vec<f64> = (0..steps).map(|_| rng.gen_range(0.01..0.95)).collect();
            let sched = NoiseSchedule::from_betas(betas).unwrap();
            let t = rng.gen_range(2..=steps);
            let n = rng.gen_range(1..=4);
            let x_t = seq(
                &(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(),
                k,
            );
            let x0 = seq(
                &(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(),
                k,
            );
            let got = posterior_dist(&x_t, &x0, t, &sched).unwrap();
            let want = bayes_posterior_oracle(&x_t, &x0, t, &sched);
            for (g, w) in got.probs().iter().zip(want.iter()) {
                assert_abs_diff_eq!(*g, *w, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn posterior_rejects_t1_and_out_of_range() {
        let sched = NoiseSchedule::cosine(5, 0.008).unwrap();
        let x = seq(&[0], 2);
        assert!(posterior_dist(&x, &x, 1, &sched).is_err());
        assert!(posterior_dist(&x, &x, 6, &sched).is_err());
    }

    #[test]
    fn reverse_equals_posterior_for_onehot_prediction() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        for _ in 0..100 {
            let k = rng.gen_range(2..=8);
            let n = rng.gen_range(1..=5);
            let t = rng.gen_range(2..=20);
            let x_t = seq(
                &(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(),
                k,
            );
            let x0 = seq(
                &(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>(),
                k,
            );
            let mut onehot = Array2::zeros((n, k));
            for (i, &tok) in x0.tokens().iter().enumerate() {
                onehot[(i, tok)] = 1.0;
            }
            let x0_hat = CategoricalSeq::new(onehot).unwrap();
            let post = posterior_dist(&x_t, &x0, t, &sched).unwrap();
            let rev = reverse_dist(&x_t, &x0_hat, t, &sched).unwrap();
            for (p, r) in post.probs().iter().zip(rev.probs().iter()) {
                assert!((p - r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reverse_with_uniform_prediction_equals_forward_kernel_row() {
        // Uniform x0_hat makes the second factor constant, so the reverse
        // distribution reduces to the (normalized) step kernel around x_t.
        let sched = NoiseSchedule::from_betas(vec![0.3, 0.25]).unwrap();
        let x_t = seq(&[1], 4);
        let x0_hat = uniform_seq(1, 4);
        let rev = reverse_dist(&x_t, &x0_hat, 2, &sched).unwrap();
        let kernel = forward_step_dist(&x_t, 2, &sched).unwrap();
        for (r, k) in rev.probs().iter().zip(kernel.probs().iter()) {
            assert_abs_diff_eq!(*r, *k, epsilon = 1e-12);
        }
    }

    #[test]
    fn reverse_worked_k2_case() {
        let sched = NoiseSchedule::from_betas(vec![0.5, 0.2]).unwrap();
        let x0_hat =
            CategoricalSeq::new(ndarray::array![[0.0, 1.0]]).unwrap();
        let rev = reverse_dist(&seq(&[0], 2), &x0_hat, 2, &sched).unwrap();
        assert_abs_diff_eq!(rev.probs()[(0, 0)], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(rev.probs()[(0, 1)], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn kl_zero_on_identical_distributions() {
        let d = uniform_seq(4, 7);
        assert_eq!(kl_categorical(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn kl_direct_summation_case() {
        let q = CategoricalSeq::new(ndarray::array![[0.5, 0.5]]).unwrap();
        let p = CategoricalSeq::new(ndarray::array![[0.25, 0.75]]).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert_abs_diff_eq!(kl_categorical(&q, &p).unwrap(), want, epsilon = 1e-12);
        assert_abs_diff_eq!(kl_categorical(&q, &p).unwrap(), 0.1438, epsilon = 1e-4);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=6);
            let mk = |rng: &mut ChaCha12Rng| {
                let mut row: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= sum);
                CategoricalSeq::new(Array2::from_shape_vec((1, k), row).unwrap()).unwrap()
            };
            let q = mk(&mut rng);
            let p = mk(&mut rng);
            assert!(kl_categorical(&q, &p).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_shape_mismatch_rejected() {
        let q = uniform_seq(2, 3);
        let p = uniform_seq(2, 4);
        assert!(kl_categorical(&q, &p).is_err());
    }

    #[test]
    fn loss_zero_for_perfect_prediction() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let x0 = seq(&[1, 2, 0], 3);
        let x_t = seq(&[2, 2, 1], 3);
        let mut onehot = Array2::zeros((3, 3));
        for (i, &tok) in x0.tokens().iter().enumerate() {
            onehot[(i, tok)] = 1.0;
        }
        let x0_hat = CategoricalSeq::new(onehot).unwrap();
        let loss = diffusion_loss(&x0, &x_t, 5, &x0_hat, &sched).unwrap();
        assert!(loss.total.abs() < 1e-12);
        assert_eq!(loss.ce_term, 0.0);
    }

    #[test]
    fn loss_final_step_is_log_k_for_uniform_prediction() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let x0 = seq(&[5; 10], 29);
        let x_t = seq(&[3; 10], 29);
        let x0_hat = uniform_seq(10, 29);
        let loss = diffusion_loss(&x0, &x_t, 1, &x0_hat, &sched).unwrap();
        assert_eq!(loss.kl_term, 0.0);
        assert_abs_diff_eq!(loss.ce_term, 10.0 * 29.0f64.ln(), epsilon = 1e-10);
        assert_abs_diff_eq!(loss.total, 33.67, epsilon = 5e-3);
    }

    #[test]
    fn loss_decreases_towards_ground_truth() {
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let k = 5;
        let x0 = seq(&[1, 3, 0, 2], k);
        let x_t = seq(&[4, 3, 1, 1], k);
        let mut onehot = Array2::zeros((4, k));
        for (i, &tok) in x0.tokens().iter().enumerate() {
            onehot[(i, tok)] = 1.0;
        }
        for t in [1, 4, 9] {
            let mut prev = f64::INFINITY;
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let probs = &onehot * lambda
                    + Array2::from_elem((4, k), (1.0 - lambda) / k as f64);
                let x0_hat = CategoricalSeq::new(probs).unwrap();
                let loss = diffusion_loss(&x0, &x_t, t, &x0_hat, &sched).unwrap();
                assert!(
                    loss.total < prev + 1e-12,
                    "t={t}, lambda={lambda}: {} !< {prev}",
                    loss.total
                );
                assert!(loss.total >= -1e-12);
                prev = loss.total;
            }
        }
    }

    #[test]
    fn chain_marginal_identity_small() {
        // Propagate the distribution through the step kernels and compare
        // against the closed-form marginal. Exact distribution propagation,
        // no sampling.
        let sched = NoiseSchedule::cosine(50, 0.008).unwrap();
        let k = 7;
        let mut v = vec![0.0f64; k];
        v[3] = 1.0;
        for t in 1..=50 {
            let beta = sched.beta(t).unwrap();
            for item in v.iter_mut() {
                *item = (1.0 - beta) * *item + beta / k as f64;
            }
            let bar = sched.alpha_bar(t).unwrap();
            for (kk, &item) in v.iter().enumerate() {
                let want = bar * f64::from(u8::from(kk == 3)) + (1.0 - bar) / k as f64;
                assert_abs_diff_eq!(item, want, epsilon = 1e-10);
            }
        }
    }
}
