//! Long-recording inference: segmentation, chunk embedding, clustering into
//! profiles, per-segment model inference, posterior stitching, smoothing
//! and iterative profile refinement.

use crate::cluster::{build_affinity, estimate_k, extract_profiles, spectral_cluster};
use crate::error::{Result, SondError};
use crate::eval::Timeline;
use crate::model::{ModelConfig, ParamSet, ProfileSet, SondModel};
use crate::numerics::{median_filter, Mat, STAT_EPS};
use crate::pse::{class_to_pse, ActivityMatrix, PseLabelSeq};
use crate::sim::FRAMES_PER_S;

pub const CHUNK_S: f64 = 1.28;
pub const CHUNK_SHIFT_S: f64 = 0.64;
pub const SEGMENT_S: f64 = 16.0;
pub const SEGMENT_SHIFT_S: f64 = 4.0;
/// Turns shorter than this many frames are dropped when emitting.
pub const MIN_TURN_FRAMES: usize = 2;

#[derive(Debug, Clone, Default)]
pub struct SegmentPlan {
    pub segments: Vec<(f64, f64)>,
    pub chunks: Vec<(f64, f64)>,
}

fn frame_of(t_s: f64) -> usize {
    (t_s * FRAMES_PER_S as f64).round() as usize
}

/// Sliding windows over one interval; the window reaching the interval end
/// is the last one, and a short interval yields one tail window if it
/// spans at least one frame.
fn windows(start_s: f64, end_s: f64, win_s: f64, shift_s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if frame_of(end_s) <= frame_of(start_s) {
        return out;
    }
    let mut s = start_s;
    loop {
        let e = (s + win_s).min(end_s);
        if frame_of(e) > frame_of(s) {
            out.push((s, e));
        }
        if e >= end_s {
            break;
        }
        s += shift_s;
    }
    out
}

pub fn plan_segments(vad: &[(f64, f64)], win_s: f64, shift_s: f64) -> SegmentPlan {
    let mut plan = SegmentPlan::default();
    for &(s, e) in vad {
        plan.segments.extend(windows(s, e, win_s, shift_s));
        plan.chunks.extend(windows(s, e, CHUNK_S, CHUNK_SHIFT_S));
    }
    plan
}

/// Mean and population std per column, the profile-space summary.
fn global_stats(x: &Mat) -> Vec<f64> {
    let t = x.rows.max(1) as f64;
    let mut out = vec![0.0; 2 * x.cols];
    for j in 0..x.cols {
        let mut sum = 0.0;
        for i in 0..x.rows {
            sum += x.get(i, j);
        }
        let mean = sum / t;
        let mut var = 0.0;
        for i in 0..x.rows {
            let d = x.get(i, j) - mean;
            var += d * d;
        }
        out[j] = mean;
        out[x.cols + j] = (var / t + STAT_EPS).sqrt();
    }
    out
}

/// Conv-stack output for a frame range; identity when no conv layers are
/// configured, so the embedding is a raw-feature statistic.
fn conv_features(x: &Mat, p: &ParamSet, cfg: &ModelConfig) -> Result<Mat> {
    if cfg.conv_channels.is_empty() {
        return Ok(x.clone());
    }
    let (_, cache) = crate::model::speech::speech_forward(x, p, cfg)?;
    Ok(cache.conv_out)
}

/// One embedding per plan chunk; chunks without a single whole frame are
/// skipped with a warning. Returns embeddings and the kept chunk windows.
pub fn embed_chunks(
    features: &Mat,
    plan: &SegmentPlan,
    p: &ParamSet,
    cfg: &ModelConfig,
) -> Result<(Mat, Vec<(f64, f64)>)> {
    let dim = 2 * cfg.conv_out();
    let mut rows: Vec<f64> = Vec::new();
    let mut kept = Vec::new();
    for &(s, e) in &plan.chunks {
        let f0 = frame_of(s);
        let f1 = frame_of(e).min(features.rows);
        if f1 <= f0 {
            eprintln!("warning: skipping empty chunk {s:.2}..{e:.2}");
            continue;
        }
        let slice = Mat::from_vec(
            f1 - f0,
            features.cols,
            features.data[f0 * features.cols..f1 * features.cols].to_vec(),
        );
        let conv = conv_features(&slice, p, cfg)?;
        rows.extend(global_stats(&conv));
        kept.push((s, e));
    }
    Ok((Mat::from_vec(kept.len(), dim, rows), kept))
}

pub fn infer_segment(
    model: &SondModel,
    x: &Mat,
    profiles: &ProfileSet,
    p: &ParamSet,
) -> Result<(PseLabelSeq, Mat)> {
    let probs = model.forward(x, profiles, p)?;
    let acts = model.head.decode(&probs, &model.cfg)?;
    let labels = crate::pse::encode_sequence(&acts, &model.cfg.pse())?;
    Ok((labels, probs))
}

/// Per-speaker activity probability from head posteriors: PSE classes are
/// marginalized over the classes containing each speaker; a multilabel
/// head's posteriors already are the marginals.
pub fn speaker_marginals(probs: &Mat, cfg: &ModelConfig) -> Result<Mat> {
    let n = cfg.max_speakers;
    if probs.cols == n {
        return Ok(probs.clone());
    }
    if probs.cols != cfg.num_classes {
        return Err(SondError::Shape(format!(
            "posteriors are {}-wide, expected {} classes or {} speakers",
            probs.cols, cfg.num_classes, n
        )));
    }
    let pse = cfg.pse();
    let masks: Vec<u64> = (0..cfg.num_classes)
        .map(|c| class_to_pse(c, &pse))
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(probs.rows, n);
    for t in 0..probs.rows {
        for (c, &mask) in masks.iter().enumerate() {
            let pv = probs.get(t, c);
            let mut m = mask;
            while m != 0 {
                let s = m.trailing_zeros() as usize;
                *out.row_mut(t).get_mut(s).unwrap() += pv;
                m &= m - 1;
            }
        }
    }
    Ok(out)
}

/// Median filtering on each speaker's binary stream; frames exceeding the
/// overlap cap afterwards keep the K speakers with the highest marginal.
pub fn smooth(
    activity: &ActivityMatrix,
    marginals: &Mat,
    cfg: &ModelConfig,
    window_s: f64,
) -> Result<ActivityMatrix> {
    let mut w = (window_s * FRAMES_PER_S as f64).round() as usize;
    if w % 2 == 0 {
        w += 1;
    }
    let t_len = activity.frames;
    let n = activity.speakers;
    let mut out = ActivityMatrix::zeros(t_len, n);
    for s in 0..n {
        let stream: Vec<f64> = (0..t_len).map(|t| activity.get(t, s) as f64).collect();
        let filtered = median_filter(&stream, w)?;
        for t in 0..t_len {
            out.set(t, s, if filtered[t] > 0.5 { 1 } else { 0 });
        }
    }
    for t in 0..t_len {
        let active: Vec<usize> = (0..n).filter(|&s| out.get(t, s) == 1).collect();
        if active.len() > cfg.max_overlap {
            let mut ranked = active.clone();
            ranked.sort_by(|&a, &b| {
                marginals.get(t, b).partial_cmp(&marginals.get(t, a)).unwrap()
            });
            for &s in &ranked[cfg.max_overlap..] {
                out.set(t, s, 0);
            }
        }
    }
    Ok(out)
}

/// Frame-aligned per-segment posteriors averaged over segment overlaps,
/// decoded once per voiced frame.
pub fn stitch(
    results: &[(usize, Mat)],
    total_frames: usize,
    model: &SondModel,
) -> Result<(ActivityMatrix, Mat)> {
    let width = results.first().map_or(model.head.out_dim(&model.cfg), |r| r.1.cols);
    let mut sums = Mat::zeros(total_frames, width);
    let mut counts = vec![0usize; total_frames];
    for (start, probs) in results {
        for i in 0..probs.rows {
            let g = start + i;
            if g >= total_frames {
                break;
            }
            counts[g] += 1;
            for (acc, &v) in sums.row_mut(g).iter_mut().zip(probs.row(i)) {
                *acc += v;
            }
        }
    }
    for g in 0..total_frames {
        if counts[g] > 1 {
            let inv = 1.0 / counts[g] as f64;
            for v in sums.row_mut(g) {
                *v *= inv;
            }
        } else if counts[g] == 0 {
            // Unvoiced or uncovered frame: fully silent posterior.
            sums.set(g, 0, 1.0);
        }
    }
    let acts = model.head.decode(&sums, &model.cfg)?;
    let marginals = speaker_marginals(&sums, &model.cfg)?;
    Ok((acts, marginals))
}

/// Consecutive active frames become turns named after the profile slot;
/// turns shorter than MIN_TURN_FRAMES are dropped.
pub fn activity_to_timeline(acts: &ActivityMatrix) -> Timeline {
    let mut tl = Timeline::new();
    let fps = FRAMES_PER_S as f64;
    for s in 0..acts.speakers {
        let mut run_start: Option<usize> = None;
        for t in 0..=acts.frames {
            let on = t < acts.frames && acts.get(t, s) == 1;
            match (run_start, on) {
                (None, true) => run_start = Some(t),
                (Some(r0), false) => {
                    if t - r0 >= MIN_TURN_FRAMES {
                        tl.push(&format!("spk{s}"), r0 as f64 / fps, t as f64 / fps);
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    tl
}

pub fn infer_pass(
    features: &Mat,
    plan: &SegmentPlan,
    model: &SondModel,
    p: &ParamSet,
    profiles: &ProfileSet,
) -> Result<(ActivityMatrix, Mat)> {
    let mut results = Vec::new();
    for &(s, e) in &plan.segments {
        let f0 = frame_of(s);
        let f1 = frame_of(e).min(features.rows);
        if f1 <= f0 {
            continue;
        }
        let slice = Mat::from_vec(
            f1 - f0,
            features.cols,
            features.data[f0 * features.cols..f1 * features.cols].to_vec(),
        );
        let probs = model.forward(&slice, profiles, p)?;
        results.push((f0, probs));
    }
    let (acts, marginals) = stitch(&results, features.rows, model)?;
    let smoothed = smooth(&acts, &marginals, &model.cfg, CHUNK_S)?;
    Ok((smoothed, marginals))
}

/// Refreshed profiles from frames where the hypothesis has exactly one
/// speaker active; slots without such frames keep their previous profile.
fn refine_profiles(
    features: &Mat,
    acts: &ActivityMatrix,
    previous: &ProfileSet,
    p: &ParamSet,
    cfg: &ModelConfig,
) -> Result<ProfileSet> {
    let conv = conv_features(features, p, cfg)?;
    let mut next = previous.clone();
    let mut updated = 0;
    for s in 0..cfg.max_speakers {
        let frames: Vec<usize> = (0..acts.frames)
            .filter(|&t| {
                acts.get(t, s) == 1
                    && acts.row(t).iter().map(|&v| v as usize).sum::<usize>() == 1
            })
            .collect();
        if frames.len() < MIN_TURN_FRAMES {
            continue;
        }
        let mut pooled = Mat::zeros(frames.len(), conv.cols);
        for (i, &t) in frames.iter().enumerate() {
            pooled.row_mut(i).copy_from_slice(conv.row(t));
        }
        next.vectors.row_mut(s).copy_from_slice(&global_stats(&pooled));
        next.valid[s] = true;
        updated += 1;
    }
    if updated == 0 {
        eprintln!("warning: no single-speaker frames found; keeping previous profiles");
    }
    Ok(next)
}

pub fn run_pipeline(
    features: &Mat,
    vad: &[(f64, f64)],
    model: &SondModel,
    p: &ParamSet,
    iterations: usize,
    seed: u64,
) -> Result<Timeline> {
    if iterations == 0 {
        return Err(SondError::InvalidConfig("need at least 1 iteration".into()));
    }
    let plan = plan_segments(vad, SEGMENT_S, SEGMENT_SHIFT_S);
    if plan.segments.is_empty() {
        return Ok(Timeline::new());
    }
    if let Some(&(_, end)) = vad.last() {
        if frame_of(end) > features.rows {
            return Err(SondError::Shape(format!(
                "VAD runs to {end:.2} s but features cover only {} frames",
                features.rows
            )));
        }
    }

    let (emb, _) = embed_chunks(features, &plan, p, &model.cfg)?;
    let mut profiles = if emb.rows < 2 {
        // Too little speech to cluster: one profile from everything voiced.
        let mut pr = ProfileSet::empty(model.cfg.max_speakers, model.cfg.profile_dim);
        let conv = conv_features(features, p, &model.cfg)?;
        pr.vectors.row_mut(0).copy_from_slice(&global_stats(&conv));
        pr.valid[0] = true;
        pr
    } else {
        let aff = build_affinity(&emb)?;
        let k = estimate_k(&aff, model.cfg.max_speakers.min(emb.rows))?;
        let clusters = spectral_cluster(&aff, &emb, k, seed)?;
        extract_profiles(&clusters, model.cfg.max_speakers)?
    };

    let mut acts = ActivityMatrix::zeros(features.rows, model.cfg.max_speakers);
    for iter in 0..iterations {
        let (a, _) = infer_pass(features, &plan, model, p, &profiles)?;
        acts = a;
        if iter + 1 < iterations {
            profiles = refine_profiles(features, &acts, &profiles, p, &model.cfg)?;
        }
    }

    // Silence everything outside the VAD before emitting turns.
    let mut voiced = vec![false; features.rows];
    for &(s, e) in vad {
        for f in frame_of(s)..frame_of(e).min(features.rows) {
            voiced[f] = true;
        }
    }
    for t in 0..acts.frames {
        if !voiced[t] {
            for s in 0..acts.speakers {
                acts.set(t, s, 0);
            }
        }
    }
    Ok(activity_to_timeline(&acts))
}
