//! Speaker-profile extraction: affinity over chunk embeddings, spectral
//! clustering with eigengap speaker counting, centroids zero-padded into a
//! fixed-slot ProfileSet.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SondError};
use crate::model::ProfileSet;
use crate::numerics::{cosine, Mat};

/// Symmetric m x m chunk similarity, unit diagonal, entries in [0,1].
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub data: Mat,
}

impl AffinityMatrix {
    pub fn size(&self) -> usize {
        self.data.rows
    }
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub k: usize,
    /// k x P, computed in the original embedding space.
    pub centroids: Mat,
}

/// Pairwise similarity over embedding rows. The scored value must land in
/// [0,1]; build_affinity symmetrizes and pins the diagonal.
pub trait AffinityFn: Send + Sync {
    fn name(&self) -> &'static str;
    fn score(&self, a: &[f64], b: &[f64], i: usize, j: usize) -> Result<f64>;
}

/// (cos + 1) / 2 on raw embeddings.
pub struct CosineAffinity;

impl AffinityFn for CosineAffinity {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn score(&self, a: &[f64], b: &[f64], i: usize, j: usize) -> Result<f64> {
        let (c, degenerate) = cosine(a, b);
        if degenerate {
            let chunk = if a.iter().all(|&v| v.abs() < 1e-12) { i } else { j };
            return Err(SondError::DegenerateEmbedding(chunk));
        }
        Ok((c + 1.0) / 2.0)
    }
}

type AffinityCtor = fn() -> Box<dyn AffinityFn>;

fn affinity_registry() -> &'static BTreeMap<&'static str, AffinityCtor> {
    static REG: OnceLock<BTreeMap<&'static str, AffinityCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: BTreeMap<&'static str, AffinityCtor> = BTreeMap::new();
        m.insert("cosine", || Box::new(CosineAffinity));
        m
    })
}

pub fn resolve_affinity(name: &str) -> Result<Box<dyn AffinityFn>> {
    affinity_registry().get(name).map(|ctor| ctor()).ok_or_else(|| {
        SondError::UnknownStrategy {
            kind: "affinity".into(),
            name: name.into(),
            known: known_affinities().join(", "),
        }
    })
}

pub fn known_affinities() -> Vec<&'static str> {
    affinity_registry().keys().copied().collect()
}

pub fn build_affinity_with(e: &Mat, f: &dyn AffinityFn) -> Result<AffinityMatrix> {
    let m = e.rows;
    if m < 2 {
        return Err(SondError::InvalidConfig(format!(
            "affinity needs at least 2 chunks, got {m}"
        )));
    }
    let mut a = Mat::zeros(m, m);
    for i in 0..m {
        a.set(i, i, 1.0);
        for j in (i + 1)..m {
            let v = f.score(e.row(i), e.row(j), i, j)?.clamp(0.0, 1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    Ok(AffinityMatrix { data: a })
}

pub fn build_affinity(e: &Mat) -> Result<AffinityMatrix> {
    build_affinity_with(e, &CosineAffinity)
}

/// Ascending eigenvalues of L = I - D^{-1/2} A D^{-1/2}.
fn laplacian_eigen(a: &AffinityMatrix) -> Result<(Vec<f64>, Mat)> {
    let m = a.size();
    let mut d_inv_sqrt = vec![0.0; m];
    for i in 0..m {
        let deg: f64 = a.data.row(i).iter().sum();
        if deg <= 0.0 {
            return Err(SondError::Numeric(format!("zero degree at chunk {i}")));
        }
        d_inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let mut l = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let norm = d_inv_sqrt[i] * a.data.get(i, j) * d_inv_sqrt[j];
            let ident = if i == j { 1.0 } else { 0.0 };
            l[(i, j)] = ident - norm;
        }
    }
    // Force exact symmetry against rounding before the symmetric solver.
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (l[(i, j)] + l[(j, i)]);
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::try_new(l, 1e-13, 10_000)
        .ok_or_else(|| SondError::Numeric("laplacian eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].partial_cmp(&eig.eigenvalues[y]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(m, m);
    for (col, &src) in order.iter().enumerate() {
        for row in 0..m {
            vectors.set(row, col, eig.eigenvectors[(row, src)]);
        }
    }
    Ok((values, vectors))
}

/// Keep each row's strongest off-diagonal fifth, zero the rest, symmetrize
/// with max. The shifted cosine affinity never drops below ~0.5 between
/// unrelated chunks, which keeps the graph dense enough that the raw
/// eigengap collapses to k=1; pruning restores the block structure.
fn prune_affinity(a: &AffinityMatrix) -> AffinityMatrix {
    let m = a.size();
    let keep = ((m - 1) as f64 * 0.2).ceil().max(1.0) as usize;
    let mut out = Mat::zeros(m, m);
    for i in 0..m {
        let mut off: Vec<f64> =
            (0..m).filter(|&j| j != i).map(|j| a.data.get(i, j)).collect();
        off.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let thresh = off[keep - 1];
        out.set(i, i, 1.0);
        for j in 0..m {
            if j != i && a.data.get(i, j) >= thresh {
                out.set(i, j, a.data.get(i, j));
            }
        }
    }
    for i in 0..m {
        for j in (i + 1)..m {
            let v = out.get(i, j).max(out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    AffinityMatrix { data: out }
}

/// Eigengap heuristic: the k in 1..=k_max maximizing lambda_{k+1} - lambda_k
/// over the ascending Laplacian spectrum of the pruned affinity, ties to
/// the smaller k.
pub fn estimate_k(a: &AffinityMatrix, k_max: usize) -> Result<usize> {
    let m = a.size();
    if k_max == 0 || k_max > m {
        return Err(SondError::InvalidConfig(format!(
            "k_max {k_max} out of range for {m} chunks"
        )));
    }
    let (values, _) = laplacian_eigen(&prune_affinity(a))?;
    let top = k_max.min(m - 1);
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 1..=top {
        let gap = values[k] - values[k - 1];
        if gap > best_gap {
            best_gap = gap;
            best_k = k;
        }
    }
    Ok(best_k)
}

fn kmeans_once(
    rows: &Mat,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<usize>, Mat)> {
    let m = rows.rows;
    let d = rows.cols;
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers = Mat::zeros(k, d);
    let first = rng.gen_range(0..m);
    centers.row_mut(0).copy_from_slice(rows.row(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(rows.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..m)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        };
        centers.row_mut(c).copy_from_slice(rows.row(pick));
        for i in 0..m {
            let nd = sq_dist(rows.row(i), centers.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; m];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..m {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(rows.row(i), centers.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..m {
            counts[assign[i]] += 1;
            for (s, &v) in sums.row_mut(assign[i]).iter_mut().zip(rows.row(i)) {
                *s += v;
            }
        }
        if counts.iter().any(|&c| c == 0) {
            return None;
        }
        for c in 0..k {
            for s in sums.row_mut(c) {
                *s /= counts[c] as f64;
            }
        }
        centers = sums;
        if !changed {
            break;
        }
    }
    if assign.iter().copied().collect::<std::collections::BTreeSet<_>>().len() < k {
        return None;
    }
    Some((assign, centers))
}

/// Cluster the row-normalized k smallest Laplacian eigenvectors with seeded
/// k-means. Centroids come from `e`, the original embeddings.
pub fn spectral_cluster(
    a: &AffinityMatrix,
    e: &Mat,
    k: usize,
    seed: u64,
) -> Result<ClusterResult> {
    let m = a.size();
    if e.rows != m {
        return Err(SondError::Shape(format!(
            "affinity over {m} chunks but {} embeddings", e.rows
        )));
    }
    if k == 0 || k > m {
        return Err(SondError::InvalidConfig(format!(
            "cluster count {k} out of range for {m} chunks"
        )));
    }
    let (_, vectors) = laplacian_eigen(a)?;
    let mut spectral = Mat::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            spectral.set(i, j, vectors.get(i, j));
        }
    }
    for i in 0..m {
        let norm: f64 = spectral.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in spectral.row_mut(i) {
                *v /= norm;
            }
        }
    }

    let mut result = None;
    for attempt in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        if let Some(r) = kmeans_once(&spectral, k, &mut rng) {
            result = Some(r);
            break;
        }
    }
    let (assignments, _) = result.ok_or_else(|| {
        SondError::Numeric(format!(
            "k-means produced an empty cluster in 5 seeded attempts (k={k}, m={m})"
        ))
    })?;

    let mut centroids = Mat::zeros(k, e.cols);
    let mut counts = vec![0usize; k];
    for i in 0..m {
        counts[assignments[i]] += 1;
        for (s, &v) in centroids.row_mut(assignments[i]).iter_mut().zip(e.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        for s in centroids.row_mut(c) {
            *s /= counts[c] as f64;
        }
    }
    Ok(ClusterResult { assignments, k, centroids })
}

/// Centroids into N fixed slots, largest cluster first (ties broken by the
/// earliest member chunk), the rest zero-padded and marked invalid.
pub fn extract_profiles(result: &ClusterResult, slots: usize) -> Result<ProfileSet> {
    if result.k > slots {
        return Err(SondError::TooManySpeakers { found: result.k, slots });
    }
    let mut sizes = vec![0usize; result.k];
    let mut first_seen = vec![usize::MAX; result.k];
    for (i, &c) in result.assignments.iter().enumerate() {
        sizes[c] += 1;
        if first_seen[c] == usize::MAX {
            first_seen[c] = i;
        }
    }
    let mut order: Vec<usize> = (0..result.k).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(sizes[c]), first_seen[c]));

    let mut profiles = ProfileSet::empty(slots, result.centroids.cols);
    for (slot, &c) in order.iter().enumerate() {
        profiles.vectors.row_mut(slot).copy_from_slice(result.centroids.row(c));
        profiles.valid[slot] = true;
    }
    Ok(profiles)
}

/// Adjusted Rand index between two labelings of the same chunks.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for i in 0..n {
        *table.entry((a[i], b[i])).or_insert(0) += 1;
        *rows.entry(a[i]).or_insert(0) += 1;
        *cols.entry(b[i]).or_insert(0) += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let sum_cells: f64 = table.values().map(|&v| choose2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| choose2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| choose2(v)).sum();
    let total = choose2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_cells - expected) / (max_index - expected)
}
