//! Training loop pieces: batch preparation (timestep draw, forward-marginal
//! noising, conditioning dropout), loss gradients through the reverse
//! distribution, clipped Adam, and the finite-difference gradient checker.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::ConditioningSeq;
use crate::diffusion::{
    diffusion_loss, forward_marginal_dist, sample_seq, softmax_rows, LossBreakdown, TokenSeq,
};
use crate::error::{CoreError, Result};
use crate::schedule::NoiseSchedule;

use super::backward::backward;
use super::params::MiniParams;
use super::MiniDenoiser;

/// One training example after noising and dropout resolution: the loss is a
/// deterministic function of the model parameters given this struct.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub x0: TokenSeq,
    pub x_t: TokenSeq,
    pub t: usize,
    pub cond: ConditioningSeq,
}

/// Optimizer settings: Adam with linear warmup and a global gradient-norm
/// clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    pub clip: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 500,
            clip: 10.0,
        }
    }
}

/// Step counter plus first/second moment accumulators.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub m: MiniParams,
    pub v: MiniParams,
}

impl TrainState {
    pub fn new(model: &MiniDenoiser) -> Self {
        Self {
            step: 0,
            m: MiniParams::zeros(model.config()),
            v: MiniParams::zeros(model.config()),
        }
    }
}

/// Draw a timestep per example, noise the transcript through the forward
/// marginal, and resolve conditioning dropout. All randomness comes from
/// `rng`, sequentially, so the result is independent of thread count.
pub fn prepare_batch<R: Rng>(
    model: &MiniDenoiser,
    batch: &[(TokenSeq, ConditioningSeq)],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<PreparedExample>> {
    let mut out = Vec::with_capacity(batch.len());
    for (x0, c) in batch {
        let t = rng.gen_range(1..=sched.steps());
        let x_t = sample_seq(&forward_marginal_dist(x0, t, sched)?, rng)?;
        let dropped = c.is_present() && rng.gen::<f64>() < model.config().cond_dropout;
        let cond = if dropped {
            ConditioningSeq::absent(model.config().cond_dim)
        } else {
            c.clone()
        };
        out.push(PreparedExample {
            x0: x0.clone(),
            x_t,
            t,
            cond,
        });
    }
    Ok(out)
}

/// d(loss_row)/d(logits) for one example, before batch averaging.
///
/// For `t = 1` the loss is cross-entropy through the softmax:
/// `probs - onehot(x0)`. For `t >= 2` the loss is
/// `KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t))` where the reverse distribution
/// renormalizes `a . (abar' p + (1-abar')/K)`; differentiating the
/// normalizer gives `dL/dp_k = abar' a_k (1/S - q_k / r_k)`, mapped through
/// the softmax Jacobian. The epsilon clamp inside the KL log is ignored
/// here; it only engages for probabilities below 1e-12.
fn loss_grad_logits(
    x0: &TokenSeq,
    x_t: &TokenSeq,
    t: usize,
    probs: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let n = x0.len();
    let k = x0.vocab();
    let mut dlogits = Array2::zeros((n, k));
    if t == 1 {
        for i in 0..n {
            for kk in 0..k {
                dlogits[(i, kk)] = probs[(i, kk)];
            }
            dlogits[(i, x0.tokens()[i])] -= 1.0;
        }
        return Ok(dlogits);
    }
    let alpha = sched.alpha(t)?;
    let bar_prev = sched.alpha_bar(t - 1)?;
    let step_off = (1.0 - alpha) / k as f64;
    let marg_off = (1.0 - bar_prev) / k as f64;
    for i in 0..n {
        let tok_t = x_t.tokens()[i];
        let tok_0 = x0.tokens()[i];
        // Unnormalized posterior and reverse weights for this row.
        let mut q = vec![0.0f64; k];
        let mut r = vec![0.0f64; k];
        let mut q_sum = 0.0;
        let mut r_sum = 0.0;
        let mut a_row = vec![0.0f64; k];
        for kk in 0..k {
            let a = if kk == tok_t { alpha + step_off } else { step_off };
            a_row[kk] = a;
            let b_true = bar_prev * f64::from(u8::from(kk == tok_0)) + marg_off;
            q[kk] = a * b_true;
            q_sum += q[kk];
            r[kk] = a * (bar_prev * probs[(i, kk)] + marg_off);
            r_sum += r[kk];
        }
        // dL/d(predicted prob).
        let mut dldp = vec![0.0f64; k];
        let mut dot = 0.0;
        for kk in 0..k {
            dldp[kk] = bar_prev * a_row[kk] * (1.0 / r_sum - (q[kk] / q_sum) / r[kk]);
            dot += dldp[kk] * probs[(i, kk)];
        }
        // Softmax Jacobian.
        for kk in 0..k {
            dlogits[(i, kk)] = probs[(i, kk)] * (dldp[kk] - dot);
        }
    }
    Ok(dlogits)
}

/// Batch loss (sum over positions, mean over examples), no gradients.
pub fn batch_loss(
    model: &MiniDenoiser,
    batch: &[PreparedExample],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidParameter("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let trace = model.forward_traced(&ex.x_t, ex.t, &ex.cond)?;
        let probs = softmax_rows(&trace.logits);
        total += diffusion_loss(&ex.x0, &ex.x_t, ex.t, &probs, sched)?.total;
    }
    Ok(total / batch.len() as f64)
}

/// Batch loss and parameter gradients. Per-example work runs in parallel;
/// the reduction is sequential in batch order, so results do not depend on
/// thread count.
pub fn batch_loss_and_grads(
    model: &MiniDenoiser,
    batch: &[PreparedExample],
    sched: &NoiseSchedule,
) -> Result<(LossBreakdown, MiniParams)> {
    if batch.is_empty() {
        return Err(CoreError::InvalidParameter("empty batch".into()));
    }
    let per_example: Result<Vec<(LossBreakdown, MiniParams)>> = batch
        .par_iter()
        .map(|ex| {
            let trace = model.forward_traced(&ex.x_t, ex.t, &ex.cond)?;
            let probs = softmax_rows(&trace.logits);
            let loss = diffusion_loss(&ex.x0, &ex.x_t, ex.t, &probs, sched)?;
            let dlogits = loss_grad_logits(&ex.x0, &ex.x_t, ex.t, probs.probs(), sched)?;
            let mut grads = MiniParams::zeros(model.config());
            backward(model, &trace, &dlogits, &mut grads);
            Ok((loss, grads))
        })
        .collect();
    let per_example = per_example?;
    let scale = 1.0 / batch.len() as f64;
    let mut kl = 0.0;
    let mut ce = 0.0;
    let mut grads = MiniParams::zeros(model.config());
    for (loss, g) in &per_example {
        kl += loss.kl_term;
        ce += loss.ce_term;
        grads.add_assign(g);
    }
    grads.scale(scale);
    Ok((
        LossBreakdown {
            kl_term: kl * scale,
            ce_term: ce * scale,
            total: (kl + ce) * scale,
        },
        grads,
    ))
}

/// One optimizer step: prepare, differentiate, clip the global gradient
/// norm, and apply a bias-corrected Adam update with linear warmup.
pub fn train_step<R: Rng>(
    model: &mut MiniDenoiser,
    state: &mut TrainState,
    opt: &AdamParams,
    batch: &[(TokenSeq, ConditioningSeq)],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let prepared = prepare_batch(model, batch, sched, rng)?;
    let (loss, mut grads) = batch_loss_and_grads(model, &prepared, sched)?;
    if !loss.total.is_finite() {
        return Err(CoreError::Training(format!(
            "non-finite loss at step {}: kl={} ce={}",
            state.step + 1,
            loss.kl_term,
            loss.ce_term
        )));
    }
    if !grads.all_finite() {
        return Err(CoreError::Training(format!(
            "non-finite gradient at step {}",
            state.step + 1
        )));
    }
    let norm = grads.global_norm();
    if norm > opt.clip {
        grads.scale(opt.clip / norm);
    }
    state.step += 1;
    let warm = if opt.warmup > 0 {
        (state.step as f64 / opt.warmup as f64).min(1.0)
    } else {
        1.0
    };
    let lr = opt.lr * warm;
    let bc1 = 1.0 - opt.beta1.powi(state.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.step as i32);
    let g_tensors = grads.tensors();
    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    for (idx, (_, w)) in model.params_mut().tensors_mut().into_iter().enumerate() {
        let g = g_tensors[idx].2;
        let m = &mut m_tensors[idx].1;
        let v = &mut v_tensors[idx].1;
        for e in 0..w.len() {
            m[e] = opt.beta1 * m[e] + (1.0 - opt.beta1) * g[e];
            v[e] = opt.beta2 * v[e] + (1.0 - opt.beta2) * g[e] * g[e];
            let m_hat = m[e] / bc1;
            let v_hat = v[e] / bc2;
            w[e] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(loss)
}

/// Threshold below which analytic and finite-difference gradients are both
/// treated as zero: differences there sit at the finite-difference noise
/// floor and carry no signal.
const GRAD_CHECK_ZERO: f64 = 1e-7;

/// Compare every analytic gradient entry against a central finite
/// difference of the batch loss. Returns the maximum of
/// `|analytic - fd| / (|fd| + 1e-8)`; entries where both sides are below
/// [`GRAD_CHECK_ZERO`] are skipped.
pub fn grad_check(
    model: &MiniDenoiser,
    batch: &[PreparedExample],
    sched: &NoiseSchedule,
    h: f64,
) -> Result<f64> {
    let (_, analytic) = batch_loss_and_grads(model, batch, sched)?;
    let analytic = analytic.tensors();
    let mut work = model.clone();
    let mut max_rel = 0.0f64;
    let tensor_count = analytic.len();
    for ti in 0..tensor_count {
        let len = analytic[ti].2.len();
        for ei in 0..len {
            {
                let mut ts = work.params_mut().tensors_mut();
                ts[ti].1[ei] += h;
            }
            let loss_p = batch_loss(&work, batch, sched)?;
            {
                let mut ts = work.params_mut().tensors_mut();
                ts[ti].1[ei] -= 2.0 * h;
            }
            let loss_m = batch_loss(&work, batch, sched)?;
            {
                let mut ts = work.params_mut().tensors_mut();
                ts[ti].1[ei] += h;
            }
            let fd = (loss_p - loss_m) / (2.0 * h);
            let a = analytic[ti].2[ei];
            if a.abs() < GRAD_CHECK_ZERO && fd.abs() < GRAD_CHECK_ZERO {
                continue;
            }
            let rel = (a - fd).abs() / (fd.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
