//! Parameter storage for the mini denoiser: explicit tensors per component
//! plus a flat named-tensor view used by the optimizer, the gradient
//! checker, and checkpointing.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::MiniDenoiserConfig;

/// Per-block weights: pre-norm attention and feed-forward sublayers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

/// All weights of the mini denoiser. Weight matrices are stored `out x in`;
/// a linear layer computes `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniParams {
    /// Character embedding table, K x W.
    pub char_emb: Array2<f64>,
    /// Timestep tower: sinusoid -> affine -> SiLU -> affine.
    pub t_w1: Array2<f64>,
    pub t_b1: Array1<f64>,
    pub t_w2: Array2<f64>,
    pub t_b2: Array1<f64>,
    /// Conditioning summary tower over the mean-pooled frame, d -> W -> W.
    pub sum_w1: Array2<f64>,
    pub sum_b1: Array1<f64>,
    pub sum_w2: Array2<f64>,
    pub sum_b2: Array1<f64>,
    /// Per-frame projection tower for the attention concat path, d -> W -> W.
    pub frame_w1: Array2<f64>,
    pub frame_b1: Array1<f64>,
    pub frame_w2: Array2<f64>,
    pub frame_b2: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_g: Array1<f64>,
    pub final_ln_b: Array1<f64>,
    /// Output head, K x W, zero-initialized so the initial prediction is
    /// exactly uniform.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

fn uniform_fan_in<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    let mut w = Array2::zeros((rows, cols));
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    w
}

impl BlockParams {
    fn init<R: Rng>(cfg: &MiniDenoiserConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        let f = cfg.ff_width;
        Self {
            ln1_g: Array1::ones(w),
            ln1_b: Array1::zeros(w),
            wq: uniform_fan_in(w, w, rng),
            bq: Array1::zeros(w),
            wk: uniform_fan_in(w, w, rng),
            bk: Array1::zeros(w),
            wv: uniform_fan_in(w, w, rng),
            bv: Array1::zeros(w),
            wo: uniform_fan_in(w, w, rng),
            bo: Array1::zeros(w),
            ln2_g: Array1::ones(w),
            ln2_b: Array1::zeros(w),
            ff_w1: uniform_fan_in(f, w, rng),
            ff_b1: Array1::zeros(f),
            ff_w2: uniform_fan_in(w, f, rng),
            ff_b2: Array1::zeros(w),
        }
    }

    fn zeros(cfg: &MiniDenoiserConfig) -> Self {
        let w = cfg.width;
        let f = cfg.ff_width;
        Self {
            ln1_g: Array1::zeros(w),
            ln1_b: Array1::zeros(w),
            wq: Array2::zeros((w, w)),
            bq: Array1::zeros(w),
            wk: Array2::zeros((w, w)),
            bk: Array1::zeros(w),
            wv: Array2::zeros((w, w)),
            bv: Array1::zeros(w),
            wo: Array2::zeros((w, w)),
            bo: Array1::zeros(w),
            ln2_g: Array1::zeros(w),
            ln2_b: Array1::zeros(w),
            ff_w1: Array2::zeros((f, w)),
            ff_b1: Array1::zeros(f),
            ff_w2: Array2::zeros((w, f)),
            ff_b2: Array1::zeros(w),
        }
    }
}

impl MiniParams {
    /// Fan-in scaled uniform init for affine maps and embeddings, ones/zeros
    /// for layer norms, zeros for the output head.
    pub fn init<R: Rng>(cfg: &MiniDenoiserConfig, rng: &mut R) -> Self {
        let w = cfg.width;
        let d = cfg.cond_dim;
        Self {
            char_emb: uniform_fan_in(cfg.vocab, w, rng),
            t_w1: uniform_fan_in(w, w, rng),
            t_b1: Array1::zeros(w),
            t_w2: uniform_fan_in(w, w, rng),
            t_b2: Array1::zeros(w),
            sum_w1: uniform_fan_in(w, d, rng),
            sum_b1: Array1::zeros(w),
            sum_w2: uniform_fan_in(w, w, rng),
            sum_b2: Array1::zeros(w),
            frame_w1: uniform_fan_in(w, d, rng),
            frame_b1: Array1::zeros(w),
            frame_w2: uniform_fan_in(w, w, rng),
            frame_b2: Array1::zeros(w),
            blocks: (0..cfg.blocks).map(|_| BlockParams::init(cfg, rng)).collect(),
            final_ln_g: Array1::ones(w),
            final_ln_b: Array1::zeros(w),
            head_w: Array2::zeros((cfg.vocab, w)),
            head_b: Array1::zeros(cfg.vocab),
        }
    }

    /// Same structure, all zeros; used for gradients and optimizer moments.
    pub fn zeros(cfg: &MiniDenoiserConfig) -> Self {
        let w = cfg.width;
        let d = cfg.cond_dim;
        Self {
            char_emb: Array2::zeros((cfg.vocab, w)),
            t_w1: Array2::zeros((w, w)),
            t_b1: Array1::zeros(w),
            t_w2: Array2::zeros((w, w)),
            t_b2: Array1::zeros(w),
            sum_w1: Array2::zeros((w, d)),
            sum_b1: Array1::zeros(w),
            sum_w2: Array2::zeros((w, w)),
            sum_b2: Array1::zeros(w),
            frame_w1: Array2::zeros((w, d)),
            frame_b1: Array1::zeros(w),
            frame_w2: Array2::zeros((w, w)),
            frame_b2: Array1::zeros(w),
            blocks: (0..cfg.blocks).map(|_| BlockParams::zeros(cfg)).collect(),
            final_ln_g: Array1::zeros(w),
            final_ln_b: Array1::zeros(w),
            head_w: Array2::zeros((cfg.vocab, w)),
            head_b: Array1::zeros(cfg.vocab),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, data)| data.len()).sum()
    }

    /// Named read-only views over every tensor, in a fixed order shared
    /// with [`Self::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn v2(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, vec![a.nrows(), a.ncols()], a.as_slice().unwrap())
        }
        fn v1(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, vec![a.len()], a.as_slice().unwrap())
        }
        let mut out = vec![
            v2("char_emb".into(), &self.char_emb),
            v2("t_w1".into(), &self.t_w1),
            v1("t_b1".into(), &self.t_b1),
            v2("t_w2".into(), &self.t_w2),
            v1("t_b2".into(), &self.t_b2),
            v2("sum_w1".into(), &self.sum_w1),
            v1("sum_b1".into(), &self.sum_b1),
            v2("sum_w2".into(), &self.sum_w2),
            v1("sum_b2".into(), &self.sum_b2),
            v2("frame_w1".into(), &self.frame_w1),
            v1("frame_b1".into(), &self.frame_b1),
            v2("frame_w2".into(), &self.frame_w2),
            v1("frame_b2".into(), &self.frame_b2),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push(v1(format!("block{b}.ln1_g"), &blk.ln1_g));
            out.push(v1(format!("block{b}.ln1_b"), &blk.ln1_b));
            out.push(v2(format!("block{b}.wq"), &blk.wq));
            out.push(v1(format!("block{b}.bq"), &blk.bq));
            out.push(v2(format!("block{b}.wk"), &blk.wk));
            out.push(v1(format!("block{b}.bk"), &blk.bk));
            out.push(v2(format!("block{b}.wv"), &blk.wv));
            out.push(v1(format!("block{b}.bv"), &blk.bv));
            out.push(v2(format!("block{b}.wo"), &blk.wo));
            out.push(v1(format!("block{b}.bo"), &blk.bo));
            out.push(v1(format!("block{b}.ln2_g"), &blk.ln2_g));
            out.push(v1(format!("block{b}.ln2_b"), &blk.ln2_b));
            out.push(v2(format!("block{b}.ff_w1"), &blk.ff_w1));
            out.push(v1(format!("block{b}.ff_b1"), &blk.ff_b1));
            out.push(v2(format!("block{b}.ff_w2"), &blk.ff_w2));
            out.push(v1(format!("block{b}.ff_b2"), &blk.ff_b2));
        }
        out.push(v1("final_ln_g".into(), &self.final_ln_g));
        out.push(v1("final_ln_b".into(), &self.final_ln_b));
        out.push(v2("head_w".into(), &self.head_w));
        out.push(v1("head_b".into(), &self.head_b));
        out
    }

    /// Named mutable views, same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("char_emb".into(), self.char_emb.as_slice_mut().unwrap()));
        out.push(("t_w1".into(), self.t_w1.as_slice_mut().unwrap()));
        out.push(("t_b1".into(), self.t_b1.as_slice_mut().unwrap()));
        out.push(("t_w2".into(), self.t_w2.as_slice_mut().unwrap()));
        out.push(("t_b2".into(), self.t_b2.as_slice_mut().unwrap()));
        out.push(("sum_w1".into(), self.sum_w1.as_slice_mut().unwrap()));
        out.push(("sum_b1".into(), self.sum_b1.as_slice_mut().unwrap()));
        out.push(("sum_w2".into(), self.sum_w2.as_slice_mut().unwrap()));
        out.push(("sum_b2".into(), self.sum_b2.as_slice_mut().unwrap()));
        out.push(("frame_w1".into(), self.frame_w1.as_slice_mut().unwrap()));
        out.push(("frame_b1".into(), self.frame_b1.as_slice_mut().unwrap()));
        out.push(("frame_w2".into(), self.frame_w2.as_slice_mut().unwrap()));
        out.push(("frame_b2".into(), self.frame_b2.as_slice_mut().unwrap()));
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{b}.ln1_g"), blk.ln1_g.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ln1_b"), blk.ln1_b.as_slice_mut().unwrap()));
            out.push((format!("block{b}.wq"), blk.wq.as_slice_mut().unwrap()));
            out.push((format!("block{b}.bq"), blk.bq.as_slice_mut().unwrap()));
            out.push((format!("block{b}.wk"), blk.wk.as_slice_mut().unwrap()));
            out.push((format!("block{b}.bk"), blk.bk.as_slice_mut().unwrap()));
            out.push((format!("block{b}.wv"), blk.wv.as_slice_mut().unwrap()));
            out.push((format!("block{b}.bv"), blk.bv.as_slice_mut().unwrap()));
            out.push((format!("block{b}.wo"), blk.wo.as_slice_mut().unwrap()));
            out.push((format!("block{b}.bo"), blk.bo.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ln2_g"), blk.ln2_g.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ln2_b"), blk.ln2_b.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ff_w1"), blk.ff_w1.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ff_b1"), blk.ff_b1.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ff_w2"), blk.ff_w2.as_slice_mut().unwrap()));
            out.push((format!("block{b}.ff_b2"), blk.ff_b2.as_slice_mut().unwrap()));
        }
        out.push(("final_ln_g".into(), self.final_ln_g.as_slice_mut().unwrap()));
        out.push(("final_ln_b".into(), self.final_ln_b.as_slice_mut().unwrap()));
        out.push(("head_w".into(), self.head_w.as_slice_mut().unwrap()));
        out.push(("head_b".into(), self.head_b.as_slice_mut().unwrap()));
        out
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Self) {
        let theirs = other.tensors();
        for ((_, mine), (_, _, their)) in self.tensors_mut().into_iter().zip(theirs) {
            for (m, t) in mine.iter_mut().zip(their.iter()) {
                *m += t;
            }
        }
    }

    /// Elementwise scale.
    pub fn scale(&mut self, factor: f64) {
        for (_, data) in self.tensors_mut() {
            for v in data.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Euclidean norm over all entries.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, _, data)| data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, data)| data.iter().all(|v| v.is_finite()))
    }
}
