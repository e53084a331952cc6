//! Forward pass of the mini denoiser, retaining every intermediate the
//! backward pass needs.

use ndarray::{Array1, Array2, Axis};

use crate::denoiser::ConditioningSeq;
use crate::diffusion::TokenSeq;
use crate::error::{CoreError, Result};

use super::{MiniDenoiser, MiniDenoiserConfig};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Fixed sinusoidal embedding: first half sines, second half cosines with
/// geometrically spaced frequencies. Used for both sequence positions and
/// the diffusion timestep.
pub fn sinusoid_embedding(pos: f64, width: usize) -> Array1<f64> {
    debug_assert!(width % 2 == 0);
    let half = width / 2;
    let mut out = Array1::zeros(width);
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

pub(crate) fn positional_encoding(len: usize, width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((len, width));
    for i in 0..len {
        out.row_mut(i).assign(&sinusoid_embedding(i as f64, width));
    }
    out
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise layer norm cache: input, normalized rows, and 1/std per row.
#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array2<f64>, LnCache) {
    let rows = x.nrows();
    let cols = x.ncols();
    let mut xhat = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = inv;
        for c in 0..cols {
            let h = (x[(r, c)] - mean) * inv;
            xhat[(r, c)] = h;
            out[(r, c)] = gain[c] * h + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// `y = x W^T + b` over rows of x.
pub(crate) fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Vector form `y = W x + b`.
pub(crate) fn linear_vec(x: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    w.dot(x) + b
}

/// Conditioning-path intermediates (present passes only).
#[derive(Debug, Clone)]
pub(crate) struct CondCache {
    pub frames: Array2<f64>,
    pub cmean: Array1<f64>,
    pub s_pre: Array1<f64>,
    pub s_act: Array1<f64>,
    pub csum: Array1<f64>,
    pub f_pre: Array2<f64>,
    pub f_act: Array2<f64>,
    /// Projected frames plus their positional encodings, M x W.
    pub g: Array2<f64>,
}

/// Attention and feed-forward intermediates of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub q_src: Array2<f64>,
    pub kv_src: Array2<f64>,
    pub concat: bool,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head softmax attention weights, each N x Nk.
    pub att: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
    pub ln2: LnCache,
    pub a2: Array2<f64>,
    pub ff_pre: Array2<f64>,
    pub ff_act: Array2<f64>,
}

/// Everything the backward pass needs, plus the output logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) tokens: Vec<usize>,
    pub(crate) t_emb: Array1<f64>,
    pub(crate) t_pre: Array1<f64>,
    pub(crate) t_act: Array1<f64>,
    pub(crate) cond: Option<CondCache>,
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) ln_f: LnCache,
    pub(crate) h_final: Array2<f64>,
    /// N x K output logits.
    pub logits: Array2<f64>,
}

fn check_inputs(cfg: &MiniDenoiserConfig, x_t: &TokenSeq, c: &ConditioningSeq) -> Result<()> {
    if x_t.vocab() != cfg.vocab {
        return Err(CoreError::ShapeMismatch(format!(
            "token vocab {} differs from model vocab {}",
            x_t.vocab(),
            cfg.vocab
        )));
    }
    if x_t.is_empty() {
        return Err(CoreError::InvalidParameter("empty input sequence".into()));
    }
    if c.is_present() && c.dim() != cfg.cond_dim {
        return Err(CoreError::ShapeMismatch(format!(
            "conditioning dim {} differs from model cond_dim {}",
            c.dim(),
            cfg.cond_dim
        )));
    }
    Ok(())
}

pub(crate) fn run(
    model: &MiniDenoiser,
    x_t: &TokenSeq,
    t: usize,
    c: &ConditioningSeq,
) -> Result<ForwardTrace> {
    let cfg = model.config();
    let p = model.params();
    check_inputs(cfg, x_t, c)?;
    let n = x_t.len();
    let w = cfg.width;

    // Timestep tower: sinusoid -> affine -> SiLU -> affine.
    let t_emb = sinusoid_embedding(t as f64, w);
    let t_pre = linear_vec(&t_emb, &p.t_w1, &p.t_b1);
    let t_act = t_pre.mapv(silu);
    let t_vec = linear_vec(&t_act, &p.t_w2, &p.t_b2);

    // Conditioning towers (summary + per-frame projections).
    let cond = if c.is_present() {
        let frames = c.frames().clone();
        let cmean = frames.mean_axis(Axis(0)).unwrap();
        let s_pre = linear_vec(&cmean, &p.sum_w1, &p.sum_b1);
        let s_act = s_pre.mapv(silu);
        let csum = linear_vec(&s_act, &p.sum_w2, &p.sum_b2);
        let f_pre = linear(&frames, &p.frame_w1, &p.frame_b1);
        let f_act = f_pre.mapv(silu);
        let mut g = linear(&f_act, &p.frame_w2, &p.frame_b2);
        g += &positional_encoding(frames.nrows(), w);
        Some(CondCache {
            frames,
            cmean,
            s_pre,
            s_act,
            csum,
            f_pre,
            f_act,
            g,
        })
    } else {
        None
    };

    // Character embeddings plus positions.
    let mut h = positional_encoding(n, w);
    for (i, &tok) in x_t.tokens().iter().enumerate() {
        let emb = p.char_emb.row(tok);
        let mut row = h.row_mut(i);
        row += &emb;
    }
    let head_dim = w / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for (b, blk) in p.blocks.iter().enumerate() {
        let (a1, ln1) = layer_norm(&h, &blk.ln1_g, &blk.ln1_b);
        // Queries: normalized stream with timestep and summary added.
        let mut q_src = a1.clone();
        q_src += &t_vec;
        if let Some(cc) = &cond {
            q_src += &cc.csum;
        }
        // Keys/values: normalized stream, frames appended on concat blocks.
        let concat = b % cfg.concat_period == 0 && cond.is_some();
        let kv_src = if concat {
            let cc = cond.as_ref().unwrap();
            let mut kv = Array2::zeros((n + cc.g.nrows(), w));
            kv.slice_mut(ndarray::s![..n, ..]).assign(&a1);
            kv.slice_mut(ndarray::s![n.., ..]).assign(&cc.g);
            kv
        } else {
            a1.clone()
        };
        let q = linear(&q_src, &blk.wq, &blk.bq);
        let k = linear(&kv_src, &blk.wk, &blk.bk);
        let v = linear(&kv_src, &blk.wv, &blk.bv);

        let nk = kv_src.nrows();
        let mut att = Vec::with_capacity(cfg.heads);
        let mut ctx = Array2::zeros((n, w));
        for head in 0..cfg.heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Row softmax.
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for val in row.iter_mut() {
                    *val = (*val - max).exp();
                    sum += *val;
                }
                for val in row.iter_mut() {
                    *val /= sum;
                }
            }
            debug_assert_eq!(scores.dim(), (n, nk));
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
            att.push(scores);
        }
        let attn_out = linear(&ctx, &blk.wo, &blk.bo);
        let h_mid = &h + &attn_out;

        let (a2, ln2) = layer_norm(&h_mid, &blk.ln2_g, &blk.ln2_b);
        let ff_pre = linear(&a2, &blk.ff_w1, &blk.ff_b1);
        let ff_act = ff_pre.mapv(silu);
        let ff_out = linear(&ff_act, &blk.ff_w2, &blk.ff_b2);
        let h_next = &h_mid + &ff_out;

        blocks.push(BlockCache {
            ln1,
            q_src,
            kv_src,
            concat,
            q,
            k,
            v,
            att,
            ctx,
            ln2,
            a2,
            ff_pre,
            ff_act,
        });
        h = h_next;
    }

    let (h_final, ln_f) = layer_norm(&h, &p.final_ln_g, &p.final_ln_b);
    let logits = linear(&h_final, &p.head_w, &p.head_b);

    Ok(ForwardTrace {
        tokens: x_t.tokens().to_vec(),
        t_emb,
        t_pre,
        t_act,
        cond,
        blocks,
        ln_f,
        h_final,
        logits,
    })
}
