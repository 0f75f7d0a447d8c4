//! Speech encoder: stride-1 convolution stack, windowed statistic pooling,
//! affine embedding. One encoding per input frame.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::numerics::{affine, relu, windowed_stat_pool, Mat, STAT_EPS};

pub struct SpeechCache {
    /// im2col matrix per conv layer (T x kernel*in_ch).
    pub im2cols: Vec<Mat>,
    /// Pre-activation output per conv layer.
    pub preacts: Vec<Mat>,
    /// Post-ReLU output of the conv stack (input itself when no conv layers).
    pub conv_out: Mat,
    /// Pooled statistics, T x 2F: [mean | std].
    pub pooled: Mat,
}

fn im2col(x: &Mat, kernel: usize) -> Mat {
    let half = kernel / 2;
    let (t_len, ch) = x.shape();
    let mut out = Mat::zeros(t_len, kernel * ch);
    for t in 0..t_len {
        for dt in 0..kernel {
            let src = t as isize + dt as isize - half as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src_row = x.row(src as usize);
            out.row_mut(t)[dt * ch..(dt + 1) * ch].copy_from_slice(src_row);
        }
    }
    out
}

fn col2im(d_cols: &Mat, kernel: usize, t_len: usize, ch: usize) -> Mat {
    let half = kernel / 2;
    let mut dx = Mat::zeros(t_len, ch);
    for t in 0..t_len {
        for dt in 0..kernel {
            let src = t as isize + dt as isize - half as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let seg = &d_cols.row(t)[dt * ch..(dt + 1) * ch];
            for (o, &v) in dx.row_mut(src as usize).iter_mut().zip(seg) {
                *o += v;
            }
        }
    }
    dx
}

pub fn speech_forward(
    x: &Mat,
    p: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Mat, SpeechCache)> {
    let mut cur = x.clone();
    let mut im2cols = Vec::new();
    let mut preacts = Vec::new();
    for i in 0..cfg.conv_channels.len() {
        let cols = im2col(&cur, cfg.conv_kernel);
        let pre = affine(
            &cols,
            p.get(&format!("speech.conv{i}.w")),
            p.get(&format!("speech.conv{i}.b")).row(0),
        )?;
        cur = pre.map(relu);
        im2cols.push(cols);
        preacts.push(pre);
    }
    let pooled = windowed_stat_pool(&cur, cfg.pool_window);
    let h = affine(&pooled, p.get("speech.emb.w"), p.get("speech.emb.b").row(0))?;
    Ok((h, SpeechCache { im2cols, preacts, conv_out: cur, pooled }))
}

pub fn speech_backward(
    dh: &Mat,
    cache: &SpeechCache,
    p: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
) {
    // Embedding affine.
    grads
        .get_mut("speech.emb.w")
        .add_assign(&cache.pooled.transpose().matmul(dh));
    {
        let db = grads.get_mut("speech.emb.b");
        for i in 0..dh.rows {
            for (b, &v) in db.row_mut(0).iter_mut().zip(dh.row(i)) {
                *b += v;
            }
        }
    }
    let d_pooled = dh.matmul(&p.get("speech.emb.w").transpose());

    // Statistic pooling: out[t] = [mean_w(t) | sqrt(var_w(t) + eps)].
    let conv = &cache.conv_out;
    let (t_len, f) = conv.shape();
    let half = cfg.pool_window / 2;
    let mut d_conv = Mat::zeros(t_len, f);
    for t in 0..t_len {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(t_len);
        let count = (hi - lo) as f64;
        for j in 0..f {
            let mean = cache.pooled.get(t, j);
            let std = cache.pooled.get(t, f + j);
            let dmean = d_pooled.get(t, j);
            let dstd = d_pooled.get(t, f + j);
            debug_assert!(std * std >= STAT_EPS * 0.5);
            for i in lo..hi {
                let dev = conv.get(i, j) - mean;
                let g = dmean / count + dstd * dev / (count * std);
                *d_conv.row_mut(i).get_mut(j).unwrap() += g;
            }
        }
    }

    // Conv stack, last layer first.
    let mut d_cur = d_conv;
    for i in (0..cfg.conv_channels.len()).rev() {
        let pre = &cache.preacts[i];
        let mut d_pre = d_cur;
        for (g, &z) in d_pre.data.iter_mut().zip(&pre.data) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let cols = &cache.im2cols[i];
        grads
            .get_mut(&format!("speech.conv{i}.w"))
            .add_assign(&cols.transpose().matmul(&d_pre));
        {
            let db = grads.get_mut(&format!("speech.conv{i}.b"));
            for r in 0..d_pre.rows {
                for (b, &v) in db.row_mut(0).iter_mut().zip(d_pre.row(r)) {
                    *b += v;
                }
            }
        }
        let d_cols = d_pre.matmul(&p.get(&format!("speech.conv{i}.w")).transpose());
        let in_ch = if i == 0 { cfg.feat_dim } else { cfg.conv_channels[i - 1] };
        d_cur = col2im(&d_cols, cfg.conv_kernel, cache.im2cols[i].rows, in_ch);
    }
    // d_cur is now the gradient w.r.t. the input features; unused.
}
