//! Diarization scoring: collar-aware DER with an optimal speaker mapping,
//! plus RTTM parsing and emission.

use std::collections::BTreeMap;

use crate::error::{Result, SondError};

/// One speaker turn in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub turns: Vec<Turn>,
}

impl Timeline {
    pub fn new() -> Self {
        Self { turns: Vec::new() }
    }

    pub fn push(&mut self, speaker: &str, start_s: f64, end_s: f64) {
        self.turns.push(Turn { speaker: speaker.to_string(), start_s, end_s });
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for t in &self.turns {
            if !seen.contains(&t.speaker) {
                seen.push(t.speaker.clone());
            }
        }
        seen
    }

    /// Per-speaker sort and merge of overlapping or touching turns.
    pub fn normalized(&self) -> Timeline {
        let mut by_spk: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for t in &self.turns {
            by_spk.entry(&t.speaker).or_default().push((t.start_s, t.end_s));
        }
        let mut out = Timeline::new();
        for (spk, mut ivs) in by_spk {
            ivs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut merged: Vec<(f64, f64)> = Vec::new();
            for (s, e) in ivs {
                match merged.last_mut() {
                    Some(last) if s <= last.1 => last.1 = last.1.max(e),
                    _ => merged.push((s, e)),
                }
            }
            for (s, e) in merged {
                out.push(spk, s, e);
            }
        }
        out
    }

    pub fn end_time(&self) -> f64 {
        self.turns.iter().map(|t| t.end_s).fold(0.0, f64::max)
    }
}

/// What divides the error time: per-speaker scored reference speech (the
/// scoring-toolkit convention) or scored wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    RefSpeech,
    ScoredTime,
}

#[derive(Debug, Clone)]
pub struct DerResult {
    pub der: f64,
    pub md: f64,
    pub fa: f64,
    pub sc: f64,
    pub t_total: f64,
    pub t_md: f64,
    pub t_fa: f64,
    pub t_sc: f64,
}

fn merge_intervals(mut ivs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    ivs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (s, e) in ivs {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Pairwise scored overlap between every (ref speaker, hyp speaker), walked
/// over elementary segments where all activity is constant.
struct Sweep {
    /// Elementary segments: (duration, ref-active mask, hyp-active mask).
    segments: Vec<(f64, u64, u64)>,
    ref_names: Vec<String>,
    hyp_names: Vec<String>,
    scored_wall: f64,
}

fn sweep(r: &Timeline, h: &Timeline, collar_s: f64) -> Sweep {
    let ref_names = r.speakers();
    let hyp_names = h.speakers();
    let collars: Vec<(f64, f64)> = merge_intervals(
        r.turns
            .iter()
            .flat_map(|t| [t.start_s, t.end_s])
            .map(|b| ((b - collar_s).max(0.0), b + collar_s))
            .collect(),
    );
    let mut points: Vec<f64> = Vec::new();
    for t in r.turns.iter().chain(&h.turns) {
        points.push(t.start_s);
        points.push(t.end_s);
    }
    for &(s, e) in &collars {
        points.push(s);
        points.push(e);
    }
    points.push(0.0);
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();

    let spk_idx = |names: &[String], s: &str| names.iter().position(|n| n == s).unwrap();
    let mut segments = Vec::new();
    let mut scored_wall = 0.0;
    for w in points.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 - t0 < 1e-12 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if collars.iter().any(|&(s, e)| s < mid && mid < e) {
            continue;
        }
        let mut rmask = 0u64;
        for t in &r.turns {
            if t.start_s < mid && mid < t.end_s {
                rmask |= 1 << spk_idx(&ref_names, &t.speaker);
            }
        }
        let mut hmask = 0u64;
        for t in &h.turns {
            if t.start_s < mid && mid < t.end_s {
                hmask |= 1 << spk_idx(&hyp_names, &t.speaker);
            }
        }
        scored_wall += t1 - t0;
        if rmask != 0 || hmask != 0 {
            segments.push((t1 - t0, rmask, hmask));
        }
    }
    Sweep { segments, ref_names, hyp_names, scored_wall }
}

/// Injective ref-to-hyp speaker mapping maximizing total matched overlap,
/// by subset DP over the smaller side. Returns hyp index per ref speaker.
fn best_mapping(overlap: &[Vec<f64>]) -> Vec<Option<usize>> {
    let nr = overlap.len();
    let nh = if nr == 0 { 0 } else { overlap[0].len() };
    if nr == 0 || nh == 0 {
        return vec![None; nr];
    }
    assert!(nh <= 24, "too many hypothesis speakers for exact mapping");
    let full = 1usize << nh;
    // dp[used] = best total over the first popcount-compatible ref prefix.
    // Iterate ref speakers outermost so each is used at most once.
    let neg = f64::NEG_INFINITY;
    let mut dp = vec![neg; full];
    let mut choice = vec![vec![usize::MAX; full]; nr];
    dp[0] = 0.0;
    for i in 0..nr {
        let mut next = dp.clone();
        let mut next_choice = vec![usize::MAX; full];
        for used in 0..full {
            if dp[used] == neg {
                continue;
            }
            for j in 0..nh {
                if used & (1 << j) != 0 {
                    continue;
                }
                let cand = dp[used] + overlap[i][j];
                let nu = used | (1 << j);
                if cand > next[nu] {
                    next[nu] = cand;
                    next_choice[nu] = j;
                }
            }
        }
        dp = next;
        choice[i] = next_choice;
    }
    // The DP above lets a ref speaker stay unmapped (carrying dp forward);
    // since all overlaps are >= 0, an unmatched speaker never beats a
    // matched one, but unmatched states are needed when nr > nh. Recover
    // the argmax state then walk back.
    let mut best_state = 0;
    for s in 0..full {
        if dp[s] > dp[best_state] {
            best_state = s;
        }
    }
    let mut map = vec![None; nr];
    let mut state = best_state;
    for i in (0..nr).rev() {
        let j = choice[i][state];
        if j != usize::MAX && state & (1 << j) != 0 {
            map[i] = Some(j);
            state &= !(1 << j);
        }
    }
    map
}

pub fn der_with(
    reference: &Timeline,
    hypothesis: &Timeline,
    collar_s: f64,
    denominator: Denominator,
) -> Result<DerResult> {
    if reference.is_empty() {
        return Err(SondError::EmptyReference);
    }
    for t in reference.turns.iter().chain(&hypothesis.turns) {
        if !(t.start_s < t.end_s) || t.start_s < 0.0 {
            return Err(SondError::InvalidConfig(format!(
                "bad turn for '{}': {} .. {}",
                t.speaker, t.start_s, t.end_s
            )));
        }
    }
    let r = reference.normalized();
    let h = hypothesis.normalized();
    let sw = sweep(&r, &h, collar_s);
    let nr = sw.ref_names.len();
    let nh = sw.hyp_names.len();

    let mut overlap = vec![vec![0.0; nh]; nr];
    for &(dur, rmask, hmask) in &sw.segments {
        for i in 0..nr {
            if rmask & (1 << i) == 0 {
                continue;
            }
            for j in 0..nh {
                if hmask & (1 << j) != 0 {
                    overlap[i][j] += dur;
                }
            }
        }
    }
    let mapping = best_mapping(&overlap);

    let mut t_md = 0.0;
    let mut t_fa = 0.0;
    let mut t_sc = 0.0;
    let mut t_ref = 0.0;
    for &(dur, rmask, hmask) in &sw.segments {
        let n_ref = rmask.count_ones() as f64;
        let n_hyp = hmask.count_ones() as f64;
        let mut n_correct = 0.0;
        for (i, m) in mapping.iter().enumerate() {
            if let Some(j) = m {
                if rmask & (1 << i) != 0 && hmask & (1 << j) != 0 {
                    n_correct += 1.0;
                }
            }
        }
        t_ref += dur * n_ref;
        t_md += dur * (n_ref - n_hyp).max(0.0);
        t_fa += dur * (n_hyp - n_ref).max(0.0);
        t_sc += dur * (n_ref.min(n_hyp) - n_correct);
    }
    let t_total = match denominator {
        Denominator::RefSpeech => t_ref,
        Denominator::ScoredTime => sw.scored_wall,
    };
    if t_total <= 0.0 {
        return Err(SondError::Numeric(
            "no scored reference time; DER undefined".into(),
        ));
    }
    let pct = |t: f64| t / t_total * 100.0;
    Ok(DerResult {
        der: pct(t_md + t_fa + t_sc),
        md: pct(t_md),
        fa: pct(t_fa),
        sc: pct(t_sc),
        t_total,
        t_md,
        t_fa,
        t_sc,
    })
}

pub fn der(reference: &Timeline, hypothesis: &Timeline, collar_s: f64) -> Result<DerResult> {
    der_with(reference, hypothesis, collar_s, Denominator::RefSpeech)
}

pub fn parse_rttm(text: &str) -> Result<Timeline> {
    let mut tl = Timeline::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| SondError::Parse { line: idx + 1, msg };
        if fields[0] != "SPEAKER" {
            return Err(err(format!("expected SPEAKER record, got '{}'", fields[0])));
        }
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", fields.len())));
        }
        let tbeg: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad onset '{}'", fields[3])))?;
        let tdur: f64 = fields[4]
            .parse()
            .map_err(|_| err(format!("bad duration '{}'", fields[4])))?;
        if tbeg < 0.0 || tdur <= 0.0 {
            return Err(err(format!("non-positive extent {tbeg} + {tdur}")));
        }
        tl.push(fields[7], tbeg, tbeg + tdur);
    }
    Ok(tl)
}

pub fn emit_rttm(tl: &Timeline, file_id: &str) -> String {
    let mut turns = tl.turns.clone();
    turns.sort_by(|a, b| {
        a.start_s
            .partial_cmp(&b.start_s)
            .unwrap()
            .then_with(|| a.speaker.cmp(&b.speaker))
    });
    let mut out = String::new();
    for t in &turns {
        out.push_str(&format!(
            "SPEAKER {file_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>\n",
            t.start_s,
            t.end_s - t.start_s,
            t.speaker
        ));
    }
    out
}
