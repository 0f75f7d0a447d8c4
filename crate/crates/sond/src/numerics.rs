//! Dense f64 kernels shared by the model, trainer and scorer, plus a
//! finite-difference gradient checker.

use crate::error::{Result, SondError};

pub const STAT_EPS: f64 = 1e-8;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self { data, rows: rows.len(), cols }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// self * other, ikj loop order.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// x*W + b, bias broadcast over rows.
pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    if x.cols != w.rows || w.cols != b.len() {
        return Err(SondError::Shape(format!(
            "affine: x {}x{}, W {}x{}, b {}",
            x.rows, x.cols, w.rows, w.cols, b.len()
        )));
    }
    let mut out = x.matmul(w);
    for i in 0..out.rows {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Numerically stable softmax in place over a slice.
pub fn softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Per-row layer normalization with learnable gain and bias.
pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Result<Mat> {
    if gain.len() != x.cols || bias.len() != x.cols {
        return Err(SondError::Shape(format!(
            "layer_norm: {} cols, gain {}, bias {}",
            x.cols,
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..x.cols {
            out.set(i, j, (row[j] - mean) * inv * gain[j] + bias[j]);
        }
    }
    Ok(out)
}

/// Cosine similarity; returns (value, degenerate) where degenerate marks a
/// near-zero norm on either side (value forced to 0).
pub fn cosine(u: &[f64], v: &[f64]) -> (f64, bool) {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return (0.0, true);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    ((dot / (nu * nv)).clamp(-1.0, 1.0), false)
}

/// Per-frame mean/std statistics over a centered window of `l` frames,
/// clipped at the sequence boundary. Output is T x 2F: [mean | std].
pub fn windowed_stat_pool(x: &Mat, l: usize) -> Mat {
    assert!(l >= 1);
    let half = l / 2;
    let t_len = x.rows;
    let f = x.cols;
    let mut out = Mat::zeros(t_len, 2 * f);
    for t in 0..t_len {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(t_len);
        let count = (hi - lo) as f64;
        for j in 0..f {
            let mut mean = 0.0;
            for i in lo..hi {
                mean += x.get(i, j);
            }
            mean /= count;
            let mut var = 0.0;
            for i in lo..hi {
                let d = x.get(i, j) - mean;
                var += d * d;
            }
            var /= count;
            out.set(t, j, mean);
            out.set(t, f + j, (var + STAT_EPS).sqrt());
        }
    }
    out
}

/// Median filter with an odd window, boundary windows clipped.
pub fn median_filter(seq: &[f64], window: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window == 0 {
        return Err(SondError::InvalidConfig(format!(
            "median filter window must be odd, got {window}"
        )));
    }
    let half = window / 2;
    let mut out = Vec::with_capacity(seq.len());
    let mut buf = Vec::with_capacity(window);
    for t in 0..seq.len() {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(seq.len());
        buf.clear();
        buf.extend_from_slice(&seq[lo..hi]);
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Lower median so clipped even-length boundary windows stay
        // spike-suppressing.
        out.push(buf[(buf.len() - 1) / 2]);
    }
    Ok(out)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Worst finite-difference offenders for a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param_count: usize,
    /// (parameter index, analytic, numeric, relative error), worst first.
    pub worst: Vec<(usize, f64, f64, f64)>,
    pub passed: bool,
}

/// Central-difference check of `analytic` against `loss_fn` around `params`.
pub fn grad_check(
    loss_fn: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    assert_eq!(params.len(), analytic.len());
    let mut theta = params.to_vec();
    let mut entries: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = loss_fn(&theta);
        theta[i] = orig - h;
        let fm = loss_fn(&theta);
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SondError::Numeric(format!(
                "non-finite loss while probing parameter {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
        entries.push((i, analytic[i], numeric, rel));
    }
    entries.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
    entries.truncate(5);
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        param_count: params.len(),
        worst: entries,
        passed: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn affine_identity_and_small() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let eye = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(affine(&x, &eye, &[0.0, 0.0]).unwrap(), x);

        let w = Mat::from_rows(&[vec![1.0], vec![1.0]]);
        let y = affine(&Mat::from_rows(&[vec![1.0, 2.0]]), &w, &[0.0]).unwrap();
        assert_eq!(y.data, vec![3.0]);

        assert!(affine(&x, &w.transpose(), &[0.0]).is_err());
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Mat::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = Mat::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = affine(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b[j];
                for k in 0..4 {
                    acc += x.get(i, k) * w.get(k, j);
                }
                assert!((y.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_contracts() {
        let u = softmax(&[0.0, 0.0, 0.0]);
        for v in &u {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let big = softmax(&[1000.0, 0.0]);
        assert!(big[0] > 1.0 - 1e-12 && big[1] < 1e-12);
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let x = Mat::from_rows(&[vec![5.0, 5.0, 5.0]]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-8).unwrap();
        for v in &y.data {
            assert!(v.abs() < 1e-3);
        }
        let x2 = Mat::from_rows(&[vec![1.0, -1.0]]);
        let y2 = layer_norm(&x2, &[1.0; 2], &[0.0; 2], 1e-8).unwrap();
        assert!((y2.get(0, 0) - 1.0).abs() < 1e-4);
        assert!((y2.get(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn cosine_examples() {
        let u = vec![1.0, 2.0, 3.0];
        assert!((cosine(&u, &u).0 - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 1.0]).0).abs() < 1e-12);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine(&u, &neg).0 + 1.0).abs() < 1e-12);
        let (v, degenerate) = cosine(&[0.0, 0.0], &u[..2]);
        assert_eq!(v, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn stat_pool_examples() {
        // Constant input: mean is the constant, std is the eps floor.
        let x = Mat::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]);
        let y = windowed_stat_pool(&x, 3);
        for t in 0..3 {
            assert!((y.get(t, 0) - 2.0).abs() < 1e-12);
            assert!((y.get(t, 1) - STAT_EPS.sqrt()).abs() < 1e-12);
        }

        let single = windowed_stat_pool(&Mat::from_rows(&[vec![4.0]]), 5);
        assert!((single.get(0, 0) - 4.0).abs() < 1e-12);

        // l=3 on [1,2,3,4] at t=1: window {1,2,3}, mean 2, std sqrt(2/3).
        let x4 = Mat::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let y4 = windowed_stat_pool(&x4, 3);
        assert!((y4.get(1, 0) - 2.0).abs() < 1e-12);
        assert!((y4.get(1, 1) - (2.0f64 / 3.0 + STAT_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stat_pool_wide_window_is_global() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let t = 7;
        let x = Mat::from_vec(t, 2, (0..t * 2).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let wide = windowed_stat_pool(&x, 2 * t - 1);
        let global = windowed_stat_pool(&x, 10 * t);
        for i in 0..t {
            for j in 0..4 {
                assert!((wide.get(i, j) - wide.get(0, j)).abs() < 1e-12);
                assert!((wide.get(i, j) - global.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_filter_examples() {
        let s = vec![0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(median_filter(&s, 1).unwrap(), s);
        assert_eq!(median_filter(&s, 3).unwrap(), vec![0.0; 5]);
        assert!(median_filter(&s, 2).is_err());
    }

    #[test]
    fn median_filter_matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<f64> = (0..200).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let window = 5;
        let got = median_filter(&seq, window).unwrap();
        for t in 0..seq.len() {
            let lo = t.saturating_sub(window / 2);
            let hi = (t + window / 2 + 1).min(seq.len());
            let mut w: Vec<f64> = seq[lo..hi].to_vec();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got[t], w[w.len() / 2]);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let theta = vec![0.5, -1.5, 2.0];
        let analytic = theta.clone();
        let report = grad_check(
            &mut |p| 0.5 * p.iter().map(|x| x * x).sum::<f64>(),
            &theta,
            &analytic,
            1e-4,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_ignored_param() {
        let theta = vec![1.0, 2.0];
        let analytic = vec![2.0, 0.0];
        let report = grad_check(&mut |p| p[0] * p[0], &theta, &analytic, 1e-4, 1e-6).unwrap();
        assert!(report.passed);
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let s = softmax(&v);
            prop_assert!(s.iter().all(|&x| x > 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            // Shift invariance.
            let shifted: Vec<f64> = v.iter().map(|x| x + 13.0).collect();
            let s2 = softmax(&shifted);
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_affine_invariance(
            row in prop::collection::vec(-5.0f64..5.0, 4..10),
            a in 0.1f64..10.0,
            c in -5.0f64..5.0,
        ) {
            let n = row.len();
            let x = Mat::from_rows(&[row.clone()]);
            let scaled = Mat::from_rows(&[row.iter().map(|v| a * v + c).collect::<Vec<_>>()]);
            let y1 = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 1e-8).unwrap();
            let y2 = layer_norm(&scaled, &vec![1.0; n], &vec![0.0; n], 1e-8).unwrap();
            // Skip near-constant rows where eps dominates.
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            prop_assume!(var > 1e-3);
            for (u, v) in y1.data.iter().zip(&y2.data) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
