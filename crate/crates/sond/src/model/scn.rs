//! Speaker-combining network: stacked feed-forward layers with sequential
//! memory blocks, mapping concatenated CI/CD scores to per-frame channel
//! activations that the output head turns into posteriors.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::model::scorers::{add_bias_grad, ScoreTensor};
use crate::numerics::{affine, relu, Mat};

pub const LN_EPS: f64 = 1e-8;

/// z[t] = sum_i a_i (.) zbar[t-i] + sum_j c_j (.) zbar[t+j], zero padded.
/// Taps are per-channel scalars: `a` is d x (L1+1), `c` is d x L2.
pub fn memory_block(zbar: &Mat, a: &Mat, c: &Mat) -> Mat {
    let (t_len, d) = zbar.shape();
    assert_eq!(a.rows, d);
    assert_eq!(c.rows, d);
    let l1 = a.cols - 1;
    let l2 = c.cols;
    let mut out = Mat::zeros(t_len, d);
    for t in 0..t_len {
        for n in 0..d {
            let mut acc = 0.0;
            for i in 0..=l1 {
                if t >= i {
                    acc += a.get(n, i) * zbar.get(t - i, n);
                }
            }
            for j in 1..=l2 {
                if t + j < t_len {
                    acc += c.get(n, j - 1) * zbar.get(t + j, n);
                }
            }
            out.set(t, n, acc);
        }
    }
    out
}

pub fn memory_backward(
    dz: &Mat,
    zbar: &Mat,
    a: &Mat,
    c: &Mat,
    da: &mut Mat,
    dc: &mut Mat,
) -> Mat {
    let (t_len, d) = zbar.shape();
    let l1 = a.cols - 1;
    let l2 = c.cols;
    let mut dbar = Mat::zeros(t_len, d);
    for t in 0..t_len {
        for n in 0..d {
            let g = dz.get(t, n);
            if g == 0.0 {
                continue;
            }
            for i in 0..=l1 {
                if t >= i {
                    *da.row_mut(n).get_mut(i).unwrap() += g * zbar.get(t - i, n);
                    *dbar.row_mut(t - i).get_mut(n).unwrap() += g * a.get(n, i);
                }
            }
            for j in 1..=l2 {
                if t + j < t_len {
                    *dc.row_mut(n).get_mut(j - 1).unwrap() += g * zbar.get(t + j, n);
                    *dbar.row_mut(t + j).get_mut(n).unwrap() += g * c.get(n, j - 1);
                }
            }
        }
    }
    dbar
}

pub struct ScnLayerCache {
    pub input: Mat,
    pub pre: Mat,
    pub relu_out: Mat,
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
    pub bar: Mat,
}

pub struct ScnCache {
    pub z0: Mat,
    pub layers: Vec<ScnLayerCache>,
}

fn ln_forward(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, Mat, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut xhat = Mat::zeros(rows, cols);
    let mut out = Mat::zeros(rows, cols);
    let mut invs = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invs.push(inv);
        for j in 0..cols {
            let xh = (row[j] - mean) * inv;
            xhat.set(i, j, xh);
            out.set(i, j, xh * gain[j] + bias[j]);
        }
    }
    (out, xhat, invs)
}

fn ln_backward(
    d_out: &Mat,
    xhat: &Mat,
    inv_std: &[f64],
    gain: &[f64],
    dg: &mut Mat,
    db: &mut Mat,
) -> Mat {
    let (rows, cols) = d_out.shape();
    let mut dx = Mat::zeros(rows, cols);
    for i in 0..rows {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..cols {
            let dxh = d_out.get(i, j) * gain[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat.get(i, j);
            *dg.row_mut(0).get_mut(j).unwrap() += d_out.get(i, j) * xhat.get(i, j);
            *db.row_mut(0).get_mut(j).unwrap() += d_out.get(i, j);
        }
        mean_dxh /= cols as f64;
        mean_dxh_xh /= cols as f64;
        for j in 0..cols {
            let dxh = d_out.get(i, j) * gain[j];
            dx.set(i, j, inv_std[i] * (dxh - mean_dxh - xhat.get(i, j) * mean_dxh_xh));
        }
    }
    dx
}

/// Concatenate CI and CD scores per frame into the 2N-dim SCN input.
pub fn concat_scores(s_ci: &ScoreTensor, s_cd: &ScoreTensor) -> Mat {
    let (n, t_len) = s_ci.data.shape();
    assert_eq!(s_cd.data.shape(), (n, t_len));
    let mut z0 = Mat::zeros(t_len, 2 * n);
    for t in 0..t_len {
        for i in 0..n {
            z0.set(t, i, s_ci.data.get(i, t));
            z0.set(t, n + i, s_cd.data.get(i, t));
        }
    }
    z0
}

/// Run the SCN stack; returns the final T x N channel activations.
pub fn scn_forward(
    s_ci: &ScoreTensor,
    s_cd: &ScoreTensor,
    p: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Mat, ScnCache)> {
    let z0 = concat_scores(s_ci, s_cd);
    let mut cur = z0.clone();
    let mut layers = Vec::with_capacity(cfg.scn_layers);
    for l in 0..cfg.scn_layers {
        let pre = affine(
            &cur,
            p.get(&format!("scn.l{l}.w1")),
            p.get(&format!("scn.l{l}.b1")).row(0),
        )?;
        let relu_out = pre.map(relu);
        let (ln_out, xhat, inv_std) = ln_forward(
            &relu_out,
            p.get(&format!("scn.l{l}.ln.g")).row(0),
            p.get(&format!("scn.l{l}.ln.b")).row(0),
        );
        let bar = affine(
            &ln_out,
            p.get(&format!("scn.l{l}.w2")),
            p.get(&format!("scn.l{l}.b2")).row(0),
        )?;
        let z = memory_block(
            &bar,
            p.get(&format!("scn.l{l}.mem.a")),
            p.get(&format!("scn.l{l}.mem.c")),
        );
        layers.push(ScnLayerCache { input: cur, pre, relu_out, xhat, inv_std, bar });
        cur = z;
    }
    Ok((cur, ScnCache { z0, layers }))
}

/// Backward through the SCN; returns gradients for the CI and CD score
/// tensors (each N x T).
pub fn scn_backward(
    dz: &Mat,
    cache: &ScnCache,
    p: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
) -> (Mat, Mat) {
    let mut d_cur = dz.clone();
    for l in (0..cfg.scn_layers).rev() {
        let lc = &cache.layers[l];
        let (da, dc_taps) = {
            let mut da = Mat::zeros(
                p.get(&format!("scn.l{l}.mem.a")).rows,
                p.get(&format!("scn.l{l}.mem.a")).cols,
            );
            let mut dc = Mat::zeros(
                p.get(&format!("scn.l{l}.mem.c")).rows,
                p.get(&format!("scn.l{l}.mem.c")).cols,
            );
            let dbar = memory_backward(
                &d_cur,
                &lc.bar,
                p.get(&format!("scn.l{l}.mem.a")),
                p.get(&format!("scn.l{l}.mem.c")),
                &mut da,
                &mut dc,
            );
            d_cur = dbar;
            (da, dc)
        };
        grads.get_mut(&format!("scn.l{l}.mem.a")).add_assign(&da);
        grads.get_mut(&format!("scn.l{l}.mem.c")).add_assign(&dc_taps);

        // bar = ln_out W2 + b2.
        let ln_out = {
            // Recompute ln_out from xhat and the LN parameters.
            let g = p.get(&format!("scn.l{l}.ln.g")).row(0).to_vec();
            let b = p.get(&format!("scn.l{l}.ln.b")).row(0).to_vec();
            let mut out = lc.xhat.clone();
            for i in 0..out.rows {
                for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                    *v = *v * g[j] + b[j];
                }
            }
            out
        };
        grads
            .get_mut(&format!("scn.l{l}.w2"))
            .add_assign(&ln_out.transpose().matmul(&d_cur));
        add_bias_grad(grads.get_mut(&format!("scn.l{l}.b2")), &d_cur);
        let d_ln_out = d_cur.matmul(&p.get(&format!("scn.l{l}.w2")).transpose());

        let gain = p.get(&format!("scn.l{l}.ln.g")).row(0).to_vec();
        let mut dg = Mat::zeros(1, gain.len());
        let mut db = Mat::zeros(1, gain.len());
        let mut d_relu = ln_backward(&d_ln_out, &lc.xhat, &lc.inv_std, &gain, &mut dg, &mut db);
        grads.get_mut(&format!("scn.l{l}.ln.g")).add_assign(&dg);
        grads.get_mut(&format!("scn.l{l}.ln.b")).add_assign(&db);

        for (g, &z) in d_relu.data.iter_mut().zip(&lc.pre.data) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        grads
            .get_mut(&format!("scn.l{l}.w1"))
            .add_assign(&lc.input.transpose().matmul(&d_relu));
        add_bias_grad(grads.get_mut(&format!("scn.l{l}.b1")), &d_relu);
        d_cur = d_relu.matmul(&p.get(&format!("scn.l{l}.w1")).transpose());
    }

    // Split dz0 back into score-tensor gradients.
    let n = d_cur.cols / 2;
    let t_len = d_cur.rows;
    let mut d_ci = Mat::zeros(n, t_len);
    let mut d_cd = Mat::zeros(n, t_len);
    for t in 0..t_len {
        for i in 0..n {
            d_ci.set(i, t, d_cur.get(t, i));
            d_cd.set(i, t, d_cur.get(t, n + i));
        }
    }
    (d_ci, d_cd)
}
