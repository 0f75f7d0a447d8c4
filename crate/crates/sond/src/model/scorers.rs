//! Context-independent (cosine) and context-dependent (self-attention)
//! speaker scorers.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::numerics::{affine, relu, sigmoid, softmax_inplace, Mat};

/// N x T score matrix. CI entries live in [-1, 1], CD entries in (0, 1).
#[derive(Debug, Clone)]
pub struct ScoreTensor {
    pub data: Mat,
    pub kind: ScoreKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    ContextIndependent,
    ContextDependent,
}

// ---------------------------------------------------------------------------
// CI scorer
// ---------------------------------------------------------------------------

pub struct CiCache {
    pub h_norms: Vec<f64>,
    pub v_norms: Vec<f64>,
}

/// Cosine similarity between every frame encoding and every projected
/// profile. Masked (invalid) slots are forced to -1.
pub fn ci_forward(h: &Mat, vbar: &Mat, mask: &[bool]) -> (ScoreTensor, CiCache) {
    let (t_len, _e) = h.shape();
    let n = vbar.rows;
    let h_norms: Vec<f64> = (0..t_len)
        .map(|t| h.row(t).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let v_norms: Vec<f64> = (0..n)
        .map(|i| vbar.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut s = Mat::zeros(n, t_len);
    for i in 0..n {
        for t in 0..t_len {
            let val = if !mask[i] {
                -1.0
            } else if v_norms[i] < 1e-12 || h_norms[t] < 1e-12 {
                0.0
            } else {
                let dot: f64 = vbar.row(i).iter().zip(h.row(t)).map(|(a, b)| a * b).sum();
                (dot / (v_norms[i] * h_norms[t])).clamp(-1.0, 1.0)
            };
            s.set(i, t, val);
        }
    }
    (
        ScoreTensor { data: s, kind: ScoreKind::ContextIndependent },
        CiCache { h_norms, v_norms },
    )
}

pub fn ci_backward(
    ds: &Mat,
    s: &ScoreTensor,
    cache: &CiCache,
    h: &Mat,
    vbar: &Mat,
    mask: &[bool],
    dh: &mut Mat,
    dvbar: &mut Mat,
) {
    let (n, t_len) = ds.shape();
    let e = h.cols;
    for i in 0..n {
        if !mask[i] || cache.v_norms[i] < 1e-12 {
            continue;
        }
        let nv = cache.v_norms[i];
        for t in 0..t_len {
            let nh = cache.h_norms[t];
            if nh < 1e-12 {
                continue;
            }
            let g = ds.get(i, t);
            if g == 0.0 {
                continue;
            }
            let cos = s.data.get(i, t);
            let inv = 1.0 / (nv * nh);
            for j in 0..e {
                let u = vbar.get(i, j);
                let w = h.get(t, j);
                *dvbar.row_mut(i).get_mut(j).unwrap() += g * (w * inv - cos * u / (nv * nv));
                *dh.row_mut(t).get_mut(j).unwrap() += g * (u * inv - cos * w / (nh * nh));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CD scorer
// ---------------------------------------------------------------------------

pub struct AttnLayerCache {
    pub x_in: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Softmaxed attention weights, one T x T matrix per head.
    pub probs: Vec<Mat>,
    /// Concatenated per-head context, before the output projection.
    pub ctx: Mat,
    /// x_in + attention output (input to the FF sub-block).
    pub post_attn: Mat,
    /// FF hidden pre-activation.
    pub ff_pre: Mat,
    /// Block output: post_attn + FF branch.
    pub z_out: Mat,
}

pub struct SpeakerCdCache {
    pub z0: Mat,
    pub x0: Mat,
    pub layers: Vec<AttnLayerCache>,
    pub logits: Vec<f64>,
}

pub struct CdCache {
    pub speakers: Vec<SpeakerCdCache>,
}

fn col_block(m: &Mat, start: usize, width: usize) -> Mat {
    let mut out = Mat::zeros(m.rows, width);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn add_col_block(dst: &mut Mat, src: &Mat, start: usize) {
    for i in 0..dst.rows {
        for (d, &s) in dst.row_mut(i)[start..start + src.cols].iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

fn mhsa_block(
    x: &Mat,
    p: &ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<AttnLayerCache> {
    let heads = cfg.attn_heads;
    let dh = cfg.attn_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = affine(x, p.get(&format!("{prefix}.attn.wq")), p.get(&format!("{prefix}.attn.bq")).row(0))?;
    let k = affine(x, p.get(&format!("{prefix}.attn.wk")), p.get(&format!("{prefix}.attn.bk")).row(0))?;
    let v = affine(x, p.get(&format!("{prefix}.attn.wv")), p.get(&format!("{prefix}.attn.bv")).row(0))?;

    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Mat::zeros(x.rows, cfg.attn_dim);
    for h in 0..heads {
        let qh = col_block(&q, h * dh, dh);
        let kh = col_block(&k, h * dh, dh);
        let vh = col_block(&v, h * dh, dh);
        let mut scores = qh.matmul(&kh.transpose());
        scores.scale(scale);
        for i in 0..scores.rows {
            softmax_inplace(scores.row_mut(i));
        }
        let ctx_h = scores.matmul(&vh);
        add_col_block(&mut ctx, &ctx_h, h * dh);
        probs.push(scores);
    }
    let attn_out = affine(
        &ctx,
        p.get(&format!("{prefix}.attn.wo")),
        p.get(&format!("{prefix}.attn.bo")).row(0),
    )?;
    let mut post_attn = x.clone();
    post_attn.add_assign(&attn_out);

    let ff_pre = affine(
        &post_attn,
        p.get(&format!("{prefix}.ff.w1")),
        p.get(&format!("{prefix}.ff.b1")).row(0),
    )?;
    let ff_out = affine(
        &ff_pre.map(relu),
        p.get(&format!("{prefix}.ff.w2")),
        p.get(&format!("{prefix}.ff.b2")).row(0),
    )?;
    let mut z_out = post_attn.clone();
    z_out.add_assign(&ff_out);

    Ok(AttnLayerCache { x_in: x.clone(), q, k, v, probs, ctx, post_attn, ff_pre, z_out })
}

fn mhsa_block_backward(
    dz: &Mat,
    cache: &AttnLayerCache,
    p: &ParamSet,
    prefix: &str,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
) -> Mat {
    let heads = cfg.attn_heads;
    let dh_w = cfg.attn_dim / heads;
    let scale = 1.0 / (dh_w as f64).sqrt();

    // FF residual: z_out = post_attn + relu(post_attn W1 + b1) W2 + b2.
    let mut d_post = dz.clone();
    let hidden = cache.ff_pre.map(relu);
    let d_ff_out = dz;
    grads
        .get_mut(&format!("{prefix}.ff.w2"))
        .add_assign(&hidden.transpose().matmul(d_ff_out));
    add_bias_grad(grads.get_mut(&format!("{prefix}.ff.b2")), d_ff_out);
    let mut d_hidden = d_ff_out.matmul(&p.get(&format!("{prefix}.ff.w2")).transpose());
    for (g, &z) in d_hidden.data.iter_mut().zip(&cache.ff_pre.data) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    grads
        .get_mut(&format!("{prefix}.ff.w1"))
        .add_assign(&cache.post_attn.transpose().matmul(&d_hidden));
    add_bias_grad(grads.get_mut(&format!("{prefix}.ff.b1")), &d_hidden);
    d_post.add_assign(&d_hidden.matmul(&p.get(&format!("{prefix}.ff.w1")).transpose()));

    // Attention residual: post_attn = x + (ctx Wo + bo).
    let mut dx = d_post.clone();
    let d_attn_out = &d_post;
    grads
        .get_mut(&format!("{prefix}.attn.wo"))
        .add_assign(&cache.ctx.transpose().matmul(d_attn_out));
    add_bias_grad(grads.get_mut(&format!("{prefix}.attn.bo")), d_attn_out);
    let d_ctx = d_attn_out.matmul(&p.get(&format!("{prefix}.attn.wo")).transpose());

    let mut dq = Mat::zeros(dz.rows, cfg.attn_dim);
    let mut dk = Mat::zeros(dz.rows, cfg.attn_dim);
    let mut dv = Mat::zeros(dz.rows, cfg.attn_dim);
    for h in 0..heads {
        let start = h * dh_w;
        let d_ctx_h = col_block(&d_ctx, start, dh_w);
        let vh = col_block(&cache.v, start, dh_w);
        let qh = col_block(&cache.q, start, dh_w);
        let kh = col_block(&cache.k, start, dh_w);
        let probs = &cache.probs[h];

        let mut d_probs = d_ctx_h.matmul(&vh.transpose());
        let dvh = probs.transpose().matmul(&d_ctx_h);
        // Softmax backward, row-wise.
        for i in 0..d_probs.rows {
            let prow = probs.row(i);
            let dot: f64 = d_probs.row(i).iter().zip(prow).map(|(a, b)| a * b).sum();
            for (g, &pv) in d_probs.row_mut(i).iter_mut().zip(prow) {
                *g = pv * (*g - dot);
            }
        }
        d_probs.scale(scale);
        let dqh = d_probs.matmul(&kh);
        let dkh = d_probs.transpose().matmul(&qh);
        add_col_block(&mut dq, &dqh, start);
        add_col_block(&mut dk, &dkh, start);
        add_col_block(&mut dv, &dvh, start);
    }

    for (name, d) in [("wq", &dq), ("wk", &dk), ("wv", &dv)] {
        grads
            .get_mut(&format!("{prefix}.attn.{name}"))
            .add_assign(&cache.x_in.transpose().matmul(d));
        dx.add_assign(&d.matmul(&p.get(&format!("{prefix}.attn.{name}")).transpose()));
    }
    add_bias_grad(grads.get_mut(&format!("{prefix}.attn.bq")), &dq);
    add_bias_grad(grads.get_mut(&format!("{prefix}.attn.bk")), &dk);
    add_bias_grad(grads.get_mut(&format!("{prefix}.attn.bv")), &dv);

    dx
}

pub(crate) fn add_bias_grad(db: &mut Mat, d: &Mat) {
    for i in 0..d.rows {
        for (b, &v) in db.row_mut(0).iter_mut().zip(d.row(i)) {
            *b += v;
        }
    }
}

/// Per speaker: concat (h_t, vbar_n), project to attention width, run the
/// residual MHSA/FF stack, sigmoid a scalar per frame.
pub fn cd_forward(
    h: &Mat,
    vbar: &Mat,
    p: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(ScoreTensor, CdCache)> {
    let (t_len, e) = h.shape();
    let n = vbar.rows;
    let mut s = Mat::zeros(n, t_len);
    let mut speakers = Vec::with_capacity(n);
    for i in 0..n {
        let mut z0 = Mat::zeros(t_len, 2 * e);
        for t in 0..t_len {
            z0.row_mut(t)[..e].copy_from_slice(h.row(t));
            z0.row_mut(t)[e..].copy_from_slice(vbar.row(i));
        }
        let x0 = affine(&z0, p.get("cd.in.w"), p.get("cd.in.b").row(0))?;
        let mut layers = Vec::with_capacity(cfg.cd_layers);
        let mut cur = x0.clone();
        for l in 0..cfg.cd_layers {
            let cache = mhsa_block(&cur, p, &format!("cd.l{l}"), cfg)?;
            cur = cache.z_out.clone();
            layers.push(cache);
        }
        let logits_mat = affine(&cur, p.get("cd.out.w"), p.get("cd.out.b").row(0))?;
        let logits: Vec<f64> = (0..t_len).map(|t| logits_mat.get(t, 0)).collect();
        for (t, &lg) in logits.iter().enumerate() {
            s.set(i, t, sigmoid(lg));
        }
        speakers.push(SpeakerCdCache { z0, x0, layers, logits });
    }
    Ok((
        ScoreTensor { data: s, kind: ScoreKind::ContextDependent },
        CdCache { speakers },
    ))
}

pub fn cd_backward(
    ds: &Mat,
    s: &ScoreTensor,
    cache: &CdCache,
    p: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
    dh: &mut Mat,
    dvbar: &mut Mat,
) {
    let (n, t_len) = ds.shape();
    let e = dh.cols;
    for i in 0..n {
        let sp = &cache.speakers[i];
        let mut d_logits = Mat::zeros(t_len, 1);
        for t in 0..t_len {
            let sv = s.data.get(i, t);
            d_logits.set(t, 0, ds.get(i, t) * sv * (1.0 - sv));
        }
        // Output affine.
        let z_last = sp.layers.last().map(|l| &l.z_out).unwrap_or(&sp.x0);
        grads
            .get_mut("cd.out.w")
            .add_assign(&z_last.transpose().matmul(&d_logits));
        add_bias_grad(grads.get_mut("cd.out.b"), &d_logits);
        let mut d_cur = d_logits.matmul(&p.get("cd.out.w").transpose());

        for l in (0..cfg.cd_layers).rev() {
            d_cur = mhsa_block_backward(&d_cur, &sp.layers[l], p, &format!("cd.l{l}"), cfg, grads);
        }

        // Input projection.
        grads
            .get_mut("cd.in.w")
            .add_assign(&sp.z0.transpose().matmul(&d_cur));
        add_bias_grad(grads.get_mut("cd.in.b"), &d_cur);
        let d_z0 = d_cur.matmul(&p.get("cd.in.w").transpose());
        for t in 0..t_len {
            for j in 0..e {
                *dh.row_mut(t).get_mut(j).unwrap() += d_z0.get(t, j);
                *dvbar.row_mut(i).get_mut(j).unwrap() += d_z0.get(t, e + j);
            }
        }
    }
}
