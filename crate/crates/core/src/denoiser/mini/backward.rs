//! Hand-derived backward pass. Mirrors [`super::forward::run`] step by
//! step in reverse, accumulating parameter gradients into a [`MiniParams`]
//! of the same shape. Verified against central finite differences by the
//! gradient checker in [`super::train`].

use ndarray::{Array1, Array2, Axis};

use super::forward::{silu_prime, ForwardTrace, LnCache};
use super::{MiniDenoiser, MiniParams};

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let rows = dy.nrows();
    let cols = dy.ncols();
    let mut dgain = Array1::zeros(cols);
    let mut dbias = Array1::zeros(cols);
    let mut dx = Array2::zeros((rows, cols));
    for r in 0..rows {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for c in 0..cols {
            let dval = dy[(r, c)];
            let dxh = dval * gain[c];
            m1 += dxh;
            m2 += dxh * cache.xhat[(r, c)];
            dgain[c] += dval * cache.xhat[(r, c)];
            dbias[c] += dval;
        }
        m1 /= cols as f64;
        m2 /= cols as f64;
        let rs = cache.rstd[r];
        for c in 0..cols {
            let dxh = dy[(r, c)] * gain[c];
            dx[(r, c)] = rs * (dxh - m1 - cache.xhat[(r, c)] * m2);
        }
    }
    (dx, dgain, dbias)
}

fn add_outer(dst: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for i in 0..a.len() {
        let ai = a[i];
        for j in 0..b.len() {
            dst[(i, j)] += ai * b[j];
        }
    }
}

/// Accumulate d(loss)/d(params) into `grads` given d(loss)/d(logits).
pub fn backward(
    model: &MiniDenoiser,
    trace: &ForwardTrace,
    dlogits: &Array2<f64>,
    grads: &mut MiniParams,
) {
    let cfg = model.config();
    let p = model.params();
    let n = trace.tokens.len();
    let w = cfg.width;
    let heads = cfg.heads;
    let head_dim = w / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    // Output head.
    grads.head_w += &dlogits.t().dot(&trace.h_final);
    grads.head_b += &dlogits.sum_axis(Axis(0));
    let dhf = dlogits.dot(&p.head_w);

    // Final layer norm.
    let (mut dh, dg_f, db_f) = ln_backward(&dhf, &trace.ln_f, &p.final_ln_g);
    grads.final_ln_g += &dg_f;
    grads.final_ln_b += &db_f;

    let mut dtvec = Array1::zeros(w);
    let mut dcsum = Array1::zeros(w);
    let mut dg_frames = trace
        .cond
        .as_ref()
        .map(|cc| Array2::zeros((cc.g.nrows(), w)));

    for b in (0..cfg.blocks).rev() {
        let blk = &p.blocks[b];
        let cache = &trace.blocks[b];
        let gblk = &mut grads.blocks[b];

        // Feed-forward sublayer (residual: h_next = h_mid + ff_out).
        let dff_out = &dh;
        gblk.ff_w2 += &dff_out.t().dot(&cache.ff_act);
        gblk.ff_b2 += &dff_out.sum_axis(Axis(0));
        let dff_act = dff_out.dot(&blk.ff_w2);
        let dff_pre = &dff_act * &cache.ff_pre.mapv(silu_prime);
        gblk.ff_w1 += &dff_pre.t().dot(&cache.a2);
        gblk.ff_b1 += &dff_pre.sum_axis(Axis(0));
        let da2 = dff_pre.dot(&blk.ff_w1);
        let (dh_mid_ln, dg2, db2) = ln_backward(&da2, &cache.ln2, &blk.ln2_g);
        gblk.ln2_g += &dg2;
        gblk.ln2_b += &db2;
        let dh_mid = &dh + &dh_mid_ln;

        // Attention sublayer (residual: h_mid = h_in + attn_out).
        let dattn = &dh_mid;
        gblk.wo += &dattn.t().dot(&cache.ctx);
        gblk.bo += &dattn.sum_axis(Axis(0));
        let dctx = dattn.dot(&blk.wo);
        let nk = cache.kv_src.nrows();
        let mut dq = Array2::zeros((n, w));
        let mut dk = Array2::zeros((nk, w));
        let mut dv = Array2::zeros((nk, w));
        for head in 0..heads {
            let cols = head * head_dim..(head + 1) * head_dim;
            let p_att = &cache.att[head];
            let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);
            let vh = cache.v.slice(ndarray::s![.., cols.clone()]);
            let dp_att = dctx_h.dot(&vh.t());
            let dvh = p_att.t().dot(&dctx_h);
            // Softmax backward, folding in the score scale.
            let mut ds = Array2::zeros((n, nk));
            for r in 0..n {
                let mut rowdot = 0.0;
                for c in 0..nk {
                    rowdot += dp_att[(r, c)] * p_att[(r, c)];
                }
                for c in 0..nk {
                    ds[(r, c)] = p_att[(r, c)] * (dp_att[(r, c)] - rowdot) * scale;
                }
            }
            let qh = cache.q.slice(ndarray::s![.., cols.clone()]);
            let kh = cache.k.slice(ndarray::s![.., cols.clone()]);
            let dqh = ds.dot(&kh);
            let dkh = ds.t().dot(&qh);
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols.clone()]).assign(&dkh);
            dv.slice_mut(ndarray::s![.., cols]).assign(&dvh);
        }
        gblk.wq += &dq.t().dot(&cache.q_src);
        gblk.bq += &dq.sum_axis(Axis(0));
        gblk.wk += &dk.t().dot(&cache.kv_src);
        gblk.bk += &dk.sum_axis(Axis(0));
        gblk.wv += &dv.t().dot(&cache.kv_src);
        gblk.bv += &dv.sum_axis(Axis(0));
        let dq_src = dq.dot(&blk.wq);
        let dkv_src = dk.dot(&blk.wk) + dv.dot(&blk.wv);

        // Timestep and summary vectors are broadcast over query rows.
        dtvec += &dq_src.sum_axis(Axis(0));
        if trace.cond.is_some() {
            dcsum += &dq_src.sum_axis(Axis(0));
        }
        let mut da1 = dq_src;
        da1 += &dkv_src.slice(ndarray::s![..n, ..]);
        if cache.concat {
            let dg = dg_frames.as_mut().unwrap();
            *dg += &dkv_src.slice(ndarray::s![n.., ..]);
        }
        let (dh_ln1, dg1, db1) = ln_backward(&da1, &cache.ln1, &blk.ln1_g);
        gblk.ln1_g += &dg1;
        gblk.ln1_b += &db1;
        dh = dh_mid + dh_ln1;
    }

    // Character embeddings (positions are fixed).
    for (i, &tok) in trace.tokens.iter().enumerate() {
        let mut row = grads.char_emb.row_mut(tok);
        row += &dh.row(i);
    }

    // Conditioning towers.
    if let Some(cc) = &trace.cond {
        let dg = dg_frames.unwrap();
        grads.frame_w2 += &dg.t().dot(&cc.f_act);
        grads.frame_b2 += &dg.sum_axis(Axis(0));
        let df_act = dg.dot(&p.frame_w2);
        let df_pre = &df_act * &cc.f_pre.mapv(silu_prime);
        grads.frame_w1 += &df_pre.t().dot(&cc.frames);
        grads.frame_b1 += &df_pre.sum_axis(Axis(0));

        add_outer(&mut grads.sum_w2, &dcsum, &cc.s_act);
        grads.sum_b2 += &dcsum;
        let ds_act = p.sum_w2.t().dot(&dcsum);
        let ds_pre = &ds_act * &cc.s_pre.mapv(silu_prime);
        add_outer(&mut grads.sum_w1, &ds_pre, &cc.cmean);
        grads.sum_b1 += &ds_pre;
    }

    // Timestep tower.
    add_outer(&mut grads.t_w2, &dtvec, &trace.t_act);
    grads.t_b2 += &dtvec;
    let dt_act = p.t_w2.t().dot(&dtvec);
    let dt_pre = &dt_act * &trace.t_pre.mapv(silu_prime);
    add_outer(&mut grads.t_w1, &dt_pre, &trace.t_emb);
    grads.t_b1 += &dt_pre;
}
