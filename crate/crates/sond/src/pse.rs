//! Power-set encoding of overlapped speaker activity.
//!
//! A frame's set of active speakers is packed into a single integer code
//! (speaker n contributes 2^(n-1)) and then mapped onto a dense class index
//! in [0, C) where C counts all subsets of size <= K. Class order is
//! canonical: ascending by (popcount, raw code), so class 0 is silence and
//! classes 1..=N are the solo speakers.

use crate::error::{Result, SondError};

/// Maximum-speaker / maximum-overlap configuration for the codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseConfig {
    pub n: usize,
    pub k: usize,
    pub c: usize,
}

impl PseConfig {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        let c = num_classes(n, k)?;
        if c < 2 {
            return Err(SondError::InvalidConfig(format!(
                "C = {c} < 2 for N={n}, K={k}"
            )));
        }
        Ok(Self { n, k, c })
    }
}

/// Binary T x N activity matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMatrix {
    pub data: Vec<u8>,
    pub frames: usize,
    pub speakers: usize,
}

impl ActivityMatrix {
    pub fn zeros(frames: usize, speakers: usize) -> Self {
        Self { data: vec![0; frames * speakers], frames, speakers }
    }

    pub fn from_rows(rows: &[Vec<u8>], speakers: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * speakers);
        for r in rows {
            assert_eq!(r.len(), speakers);
            data.extend_from_slice(r);
        }
        Self { data, frames: rows.len(), speakers }
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.speakers..(t + 1) * self.speakers]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [u8] {
        &mut self.data[t * self.speakers..(t + 1) * self.speakers]
    }

    pub fn get(&self, t: usize, n: usize) -> u8 {
        self.data[t * self.speakers + n]
    }

    pub fn set(&mut self, t: usize, n: usize, v: u8) {
        self.data[t * self.speakers + n] = v;
    }
}

/// Dense PSE class indices, one per frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseLabelSeq {
    pub labels: Vec<usize>,
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as u64
}

/// Number of speaker combinations of size <= K out of N, computed exactly.
pub fn num_classes(n: usize, k: usize) -> Result<usize> {
    if k < 1 || k > n {
        return Err(SondError::InvalidConfig(format!(
            "K must satisfy 1 <= K <= N, got K={k}, N={n}"
        )));
    }
    let mut total: u64 = 0;
    for j in 0..=k {
        total = total
            .checked_add(binomial(n, j))
            .ok_or_else(|| SondError::InvalidConfig("class count overflow".into()))?;
    }
    Ok(total as usize)
}

/// Pack a binary activity row into its raw power-set integer.
pub fn encode_pse(row: &[u8]) -> u64 {
    let mut code = 0u64;
    for (n, &y) in row.iter().enumerate() {
        if y != 0 {
            code |= 1u64 << n;
        }
    }
    code
}

/// Unpack a raw power-set integer into a binary row of length `n`.
pub fn decode_pse(code: u64, n: usize) -> Result<Vec<u8>> {
    if n < 64 && code >= (1u64 << n) {
        return Err(SondError::OutOfRange(format!(
            "PSE code {code} >= 2^{n}"
        )));
    }
    Ok((0..n).map(|i| ((code >> i) & 1) as u8).collect())
}

/// Rank of `code` among all codes with the same popcount, ordered by value.
///
/// Subsets with bit positions c_1 < c_2 < ... < c_p ordered by integer value
/// coincide with colex order, whose rank is sum of binomial(c_i, i).
fn subset_rank(code: u64) -> u64 {
    let mut rank = 0u64;
    let mut i = 0usize;
    let mut rest = code;
    while rest != 0 {
        let pos = rest.trailing_zeros() as usize;
        i += 1;
        rank += binomial(pos, i);
        rest &= rest - 1;
    }
    rank
}

/// Inverse of `subset_rank` for popcount `p` over `n` slots.
fn subset_unrank(mut rank: u64, p: usize, n: usize) -> u64 {
    let mut code = 0u64;
    for i in (1..=p).rev() {
        // Largest position c with binomial(c, i) <= rank.
        let mut c = i - 1;
        while c + 1 < n && binomial(c + 1, i) <= rank {
            c += 1;
        }
        rank -= binomial(c, i);
        code |= 1u64 << c;
    }
    code
}

/// Dense class index of a raw code under the canonical (popcount, code) order.
pub fn pse_to_class(code: u64, cfg: &PseConfig) -> Result<usize> {
    let p = code.count_ones() as usize;
    if p > cfg.k {
        return Err(SondError::OverlapExceeded { frame: 0, active: p, k: cfg.k });
    }
    let mut base = 0u64;
    for j in 0..p {
        base += binomial(cfg.n, j);
    }
    Ok((base + subset_rank(code)) as usize)
}

/// Raw code of a dense class index; inverse of `pse_to_class`.
pub fn class_to_pse(class: usize, cfg: &PseConfig) -> Result<u64> {
    if class >= cfg.c {
        return Err(SondError::OutOfRange(format!(
            "class {class} >= C = {}",
            cfg.c
        )));
    }
    let mut rest = class as u64;
    let mut p = 0usize;
    loop {
        let count = binomial(cfg.n, p);
        if rest < count {
            break;
        }
        rest -= count;
        p += 1;
    }
    Ok(subset_unrank(rest, p, cfg.n))
}

/// Encode a full activity matrix into per-frame class indices.
pub fn encode_sequence(acts: &ActivityMatrix, cfg: &PseConfig) -> Result<PseLabelSeq> {
    if acts.speakers != cfg.n {
        return Err(SondError::Shape(format!(
            "activity has {} speaker slots, config expects {}",
            acts.speakers, cfg.n
        )));
    }
    let mut labels = Vec::with_capacity(acts.frames);
    for t in 0..acts.frames {
        let code = encode_pse(acts.row(t));
        match pse_to_class(code, cfg) {
            Ok(class) => labels.push(class),
            Err(SondError::OverlapExceeded { active, k, .. }) => {
                return Err(SondError::OverlapExceeded { frame: t, active, k })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PseLabelSeq { labels })
}

/// Decode per-frame class indices back to an activity matrix.
pub fn decode_sequence(seq: &PseLabelSeq, cfg: &PseConfig) -> Result<ActivityMatrix> {
    let mut acts = ActivityMatrix::zeros(seq.labels.len(), cfg.n);
    for (t, &label) in seq.labels.iter().enumerate() {
        let code = class_to_pse(label, cfg)?;
        let row = decode_pse(code, cfg.n)?;
        acts.row_mut(t).copy_from_slice(&row);
    }
    Ok(acts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute-force canonical enumeration: all codes with popcount <= k,
    /// sorted by (popcount, code).
    fn enumerate_classes(n: usize, k: usize) -> Vec<u64> {
        let mut codes: Vec<u64> = (0..(1u64 << n))
            .filter(|c| (c.count_ones() as usize) <= k)
            .collect();
        codes.sort_by_key(|c| (c.count_ones(), *c));
        codes
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_pse(&[0, 0, 0]), 0);
        assert_eq!(encode_pse(&[1, 0, 1]), 5);
        let mut row = vec![0u8; 16];
        row[0] = 1;
        row[1] = 1;
        assert_eq!(encode_pse(&row), 3);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_pse(0, 4).unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(decode_pse(5, 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(decode_pse((1u64 << 16) - 1, 16).unwrap(), vec![1u8; 16]);
        assert!(decode_pse(8, 3).is_err());
    }

    #[test]
    fn class_count_table() {
        assert_eq!(num_classes(16, 1).unwrap(), 17);
        assert_eq!(num_classes(16, 2).unwrap(), 137);
        assert_eq!(num_classes(16, 3).unwrap(), 697);
        assert_eq!(num_classes(16, 4).unwrap(), 2517);
        assert_eq!(num_classes(3, 3).unwrap(), 8);
        assert!(num_classes(4, 5).is_err());
        assert!(num_classes(4, 0).is_err());
    }

    #[test]
    fn num_classes_monotone_in_k() {
        for n in 2..=12 {
            let mut prev = 0;
            for k in 1..=n {
                let c = num_classes(n, k).unwrap();
                assert!(c > prev, "not increasing at n={n} k={k}");
                prev = c;
            }
            assert_eq!(prev, 1usize << n);
        }
    }

    #[test]
    fn class_index_matches_enumeration_oracle() {
        for (n, k) in [(3, 2), (5, 3), (8, 4), (16, 4)] {
            let cfg = PseConfig::new(n, k).unwrap();
            let oracle = enumerate_classes(n, k);
            assert_eq!(oracle.len(), cfg.c);
            for (class, &code) in oracle.iter().enumerate() {
                assert_eq!(pse_to_class(code, &cfg).unwrap(), class, "code {code}");
                assert_eq!(class_to_pse(class, &cfg).unwrap(), code, "class {class}");
            }
        }
    }

    #[test]
    fn spec_class_examples() {
        let cfg = PseConfig::new(16, 4).unwrap();
        assert_eq!(pse_to_class(0, &cfg).unwrap(), 0);
        // Speaker 3 solo (code 4) is the third solo class.
        assert_eq!(pse_to_class(4, &cfg).unwrap(), 3);
        // Speakers 1+2: first pair class, after silence + 16 solos.
        assert_eq!(pse_to_class(3, &cfg).unwrap(), 17);
        assert_eq!(class_to_pse(0, &cfg).unwrap(), 0);
        assert_eq!(class_to_pse(1, &cfg).unwrap(), 1);
        // Last class is the numerically largest 4-subset: top four bits.
        let top = (1u64 << 15) | (1 << 14) | (1 << 13) | (1 << 12);
        assert_eq!(class_to_pse(cfg.c - 1, &cfg).unwrap(), top);
    }

    #[test]
    fn roundtrip_exhaustive_small_n() {
        for n in 1..=10 {
            let cfg = PseConfig::new(n, n).unwrap();
            for code in 0..(1u64 << n) {
                let class = pse_to_class(code, &cfg).unwrap();
                assert_eq!(class_to_pse(class, &cfg).unwrap(), code);
            }
        }
    }

    #[test]
    fn overlap_exceeded_reports_frame() {
        let cfg = PseConfig::new(6, 2).unwrap();
        let mut acts = ActivityMatrix::zeros(4, 6);
        for n in 0..3 {
            acts.set(2, n, 1);
        }
        match encode_sequence(&acts, &cfg) {
            Err(SondError::OverlapExceeded { frame, active, k }) => {
                assert_eq!((frame, active, k), (2, 3, 2));
            }
            other => panic!("expected overlap error, got {other:?}"),
        }
    }

    #[test]
    fn sequence_examples() {
        let cfg = PseConfig::new(16, 4).unwrap();
        let acts = ActivityMatrix::zeros(10, 16);
        let seq = encode_sequence(&acts, &cfg).unwrap();
        assert_eq!(seq.labels, vec![0; 10]);

        let cfg3 = PseConfig::new(3, 3).unwrap();
        let acts3 = ActivityMatrix::from_rows(&[vec![1, 0, 1]], 3);
        let seq3 = encode_sequence(&acts3, &cfg3).unwrap();
        assert_eq!(seq3.labels[0], pse_to_class(5, &cfg3).unwrap());

        // Slot 16 solo decodes back from its class.
        let cfg16 = PseConfig::new(16, 4).unwrap();
        let class = pse_to_class(1u64 << 15, &cfg16).unwrap();
        let acts16 = decode_sequence(&PseLabelSeq { labels: vec![class] }, &cfg16).unwrap();
        let mut want = vec![0u8; 16];
        want[15] = 1;
        assert_eq!(acts16.row(0), &want[..]);
    }

    fn valid_matrix(n: usize, k: usize, t: usize) -> impl Strategy<Value = ActivityMatrix> {
        prop::collection::vec(prop::collection::vec(0u8..2, n), t).prop_map(move |mut rows| {
            for row in &mut rows {
                // Clamp each row to at most k active slots.
                let mut active = 0;
                for v in row.iter_mut() {
                    if *v != 0 {
                        active += 1;
                        if active > k {
                            *v = 0;
                        }
                    }
                }
            }
            ActivityMatrix::from_rows(&rows, n)
        })
    }

    proptest! {
        #[test]
        fn sequence_roundtrip(acts in valid_matrix(8, 3, 100)) {
            let cfg = PseConfig::new(8, 3).unwrap();
            let seq = encode_sequence(&acts, &cfg).unwrap();
            let back = decode_sequence(&seq, &cfg).unwrap();
            prop_assert_eq!(back, acts);
        }

        #[test]
        fn slot_permutation_equivariance(
            acts in valid_matrix(6, 2, 20),
            perm_seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cfg = PseConfig::new(6, 2).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed);
            perm.shuffle(&mut rng);

            let mut permuted = ActivityMatrix::zeros(acts.frames, 6);
            for t in 0..acts.frames {
                for n in 0..6 {
                    permuted.set(t, perm[n], acts.get(t, n));
                }
            }
            let seq = encode_sequence(&permuted, &cfg).unwrap();
            let back = decode_sequence(&seq, &cfg).unwrap();
            let mut unpermuted = ActivityMatrix::zeros(acts.frames, 6);
            for t in 0..acts.frames {
                for n in 0..6 {
                    unpermuted.set(t, n, back.get(t, perm[n]));
                }
            }
            prop_assert_eq!(unpermuted, acts);
        }
    }
}
