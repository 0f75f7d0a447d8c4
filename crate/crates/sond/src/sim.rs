//! Conversation simulator: per-speaker talk/silence runs with log-normal
//! lengths, superimposed activity capped at K, and Gaussian speaker models
//! filling the active regions with synthetic features.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SondError};
use crate::model::ProfileSet;
use crate::numerics::Mat;
use crate::pse::{encode_sequence, ActivityMatrix, PseConfig};

pub const FRAMES_PER_S: usize = 100;

/// Log-space parameters (seconds) of the talk and silence run lengths.
#[derive(Debug, Clone)]
pub struct TurnStats {
    pub talk_ln_mean: f64,
    pub talk_ln_sigma: f64,
    pub silence_ln_mean: f64,
    pub silence_ln_sigma: f64,
}

impl Default for TurnStats {
    /// Median talk 1.4 s against median silence 3.6 s puts a 4-speaker mix
    /// near the 42% overlap regime.
    fn default() -> Self {
        Self {
            talk_ln_mean: 1.4f64.ln(),
            talk_ln_sigma: 0.5,
            silence_ln_mean: 3.6f64.ln(),
            silence_ln_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabelSim {
    pub activity: ActivityMatrix,
    /// Frames with 2+ active speakers over frames with 1+, in percent.
    pub overlap_ratio: f64,
}

fn lognormal_frames(rng: &mut ChaCha8Rng, ln_mean: f64, ln_sigma: f64) -> usize {
    let z: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
    let secs = (ln_mean + ln_sigma * z).exp();
    ((secs * FRAMES_PER_S as f64).round() as usize).max(1)
}

pub fn simulate_labels(
    stats: &TurnStats,
    n_speakers: usize,
    duration_s: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabelSim> {
    if n_speakers == 0 || k == 0 {
        return Err(SondError::Simulation(format!(
            "need speakers and k > 0, got {n_speakers} and {k}"
        )));
    }
    let frames = (duration_s * FRAMES_PER_S as f64).round() as usize;
    if frames == 0 {
        return Err(SondError::Simulation("zero-length recording".into()));
    }
    let mut acts = ActivityMatrix::zeros(frames, n_speakers);
    let talk_frac = {
        let t = stats.talk_ln_mean.exp();
        let s = stats.silence_ln_mean.exp();
        t / (t + s)
    };
    for n in 0..n_speakers {
        let mut talking = rng.gen_bool(talk_frac.clamp(0.01, 0.99));
        let mut t = 0;
        // Random phase into the first run so speakers do not start aligned.
        let mut first = true;
        while t < frames {
            let (lm, ls) = if talking {
                (stats.talk_ln_mean, stats.talk_ln_sigma)
            } else {
                (stats.silence_ln_mean, stats.silence_ln_sigma)
            };
            let mut run = lognormal_frames(rng, lm, ls);
            if first {
                run = rng.gen_range(1..=run);
                first = false;
            }
            let end = (t + run).min(frames);
            if talking {
                for f in t..end {
                    acts.set(f, n, 1);
                }
            }
            t = end;
            talking = !talking;
        }
    }

    // Frames exceeding K lose randomly chosen active speakers until legal;
    // one speaker per pass so the cap errs toward keeping variety.
    let mut passes = 0;
    loop {
        let mut dirty = false;
        for t in 0..frames {
            let active: Vec<usize> =
                (0..n_speakers).filter(|&n| acts.get(t, n) == 1).collect();
            if active.len() > k {
                let drop = active[rng.gen_range(0..active.len())];
                acts.set(t, drop, 0);
                dirty = true;
            }
        }
        if !dirty {
            break;
        }
        passes += 1;
        if passes > 100 {
            return Err(SondError::Simulation(
                "overlap cap not satisfiable after 100 repair passes".into(),
            ));
        }
    }

    let mut speech = 0usize;
    let mut overlapped = 0usize;
    for t in 0..frames {
        let c: usize = acts.row(t).iter().map(|&v| v as usize).sum();
        if c >= 1 {
            speech += 1;
        }
        if c >= 2 {
            overlapped += 1;
        }
    }
    let overlap_ratio = if speech == 0 {
        0.0
    } else {
        overlapped as f64 / speech as f64 * 100.0
    };
    Ok(LabelSim { activity: acts, overlap_ratio })
}

/// Isotropic Gaussian voice: frames drawn from N(mean, sigma^2 I).
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub mean: Vec<f64>,
    pub sigma: f64,
}

fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn check_separation(models: &[SpeakerModel], min_sigmas: f64) -> Result<()> {
    for i in 0..models.len() {
        for j in (i + 1)..models.len() {
            let need = min_sigmas * models[i].sigma.max(models[j].sigma);
            let dist = pair_distance(&models[i].mean, &models[j].mean);
            if dist < need {
                return Err(SondError::Simulation(format!(
                    "speakers {i} and {j} only {dist:.3} apart, need {need:.3}"
                )));
            }
        }
    }
    Ok(())
}

/// Random speaker pool with pairwise mean separation of at least
/// `min_sigmas * sigma`, by rejection.
pub fn random_speaker_pool(
    count: usize,
    feat_dim: usize,
    sigma: f64,
    min_sigmas: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpeakerModel>> {
    let spread = min_sigmas * sigma * 1.5;
    let normal = Normal::new(0.0, spread).unwrap();
    let mut models: Vec<SpeakerModel> = Vec::new();
    let mut attempts = 0;
    while models.len() < count {
        attempts += 1;
        if attempts > 1000 {
            return Err(SondError::Simulation(format!(
                "could not place {count} speakers {min_sigmas} sigmas apart in {feat_dim} dims"
            )));
        }
        let mean: Vec<f64> = (0..feat_dim).map(|_| normal.sample(rng)).collect();
        let ok = models
            .iter()
            .all(|m| pair_distance(&m.mean, &mean) >= min_sigmas * sigma);
        if ok {
            models.push(SpeakerModel { mean, sigma });
        }
    }
    Ok(models)
}

pub fn synth_features(
    labels: &ActivityMatrix,
    models: &[SpeakerModel],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Mat> {
    if models.len() < labels.speakers {
        return Err(SondError::Simulation(format!(
            "{} speaker models for {} activity streams",
            models.len(),
            labels.speakers
        )));
    }
    check_separation(&models[..labels.speakers], 4.0)?;
    let dim = models[0].mean.len();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut x = Mat::zeros(labels.frames, dim);
    for t in 0..labels.frames {
        let active: Vec<usize> =
            (0..labels.speakers).filter(|&n| labels.get(t, n) == 1).collect();
        let row = x.row_mut(t);
        if active.is_empty() {
            for v in row.iter_mut() {
                *v = noise_sigma * unit.sample(rng);
            }
        } else {
            for &n in &active {
                let m = &models[n];
                for (v, &mu) in row.iter_mut().zip(&m.mean) {
                    *v += mu + m.sigma * unit.sample(rng);
                }
            }
        }
    }
    Ok(x)
}

/// [mean | std] over all frames: the profile space the pipeline's chunk
/// embedder produces with the identity (empty) conv stack.
pub fn stat_profile(x: &Mat) -> Vec<f64> {
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
        out[x.cols + j] = (var / t + 1e-8).sqrt();
    }
    out
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Speakers active in each sample.
    pub num_speakers: usize,
    /// Pool to draw actives and distractors from.
    pub pool_size: usize,
    /// Distractor profiles per sample (valid slots with no activity).
    pub num_distractors: usize,
    /// Profile slots N.
    pub slots: usize,
    /// Overlap cap K.
    pub max_overlap: usize,
    pub duration_s: f64,
    pub feat_dim: usize,
    pub sigma: f64,
    pub noise_sigma: f64,
    pub separation_sigmas: f64,
    pub turns: TurnStats,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_speakers: 4,
            pool_size: 8,
            num_distractors: 2,
            slots: 16,
            max_overlap: 2,
            duration_s: 16.0,
            feat_dim: 8,
            sigma: 1.0,
            noise_sigma: 0.1,
            separation_sigmas: 5.0,
            turns: TurnStats::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimSample {
    pub features: Mat,
    /// Slot-aligned activity, `slots` wide.
    pub activity: ActivityMatrix,
    pub profiles: ProfileSet,
    /// Pool speaker id per slot, None for padding.
    pub speaker_ids: Vec<Option<usize>>,
    pub overlap_ratio: f64,
}

pub struct SimDataset {
    pub samples: Vec<SimSample>,
    pub pool: Vec<SpeakerModel>,
}

/// Profile for one pool speaker: stat pooling over a short pure segment of
/// that speaker, i.e. what the chunk embedder would see.
fn speaker_profile(model: &SpeakerModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let frames = 128;
    let mut labels = ActivityMatrix::zeros(frames, 1);
    for t in 0..frames {
        labels.set(t, 0, 1);
    }
    let x = synth_features(&labels, std::slice::from_ref(model), 0.0, rng)
        .expect("single-speaker synthesis cannot collide");
    stat_profile(&x)
}

pub fn simulate_dataset(count: usize, cfg: &SimConfig, seed: u64) -> Result<SimDataset> {
    if cfg.num_speakers + cfg.num_distractors > cfg.slots {
        return Err(SondError::Simulation(format!(
            "{} actives + {} distractors exceed {} slots",
            cfg.num_speakers, cfg.num_distractors, cfg.slots
        )));
    }
    if cfg.num_speakers + cfg.num_distractors > cfg.pool_size {
        return Err(SondError::Simulation(format!(
            "pool of {} cannot supply {} actives + {} distractors",
            cfg.pool_size, cfg.num_speakers, cfg.num_distractors
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = random_speaker_pool(
        cfg.pool_size,
        cfg.feat_dim,
        cfg.sigma,
        cfg.separation_sigmas,
        &mut rng,
    )?;
    let pse = PseConfig::new(cfg.slots, cfg.max_overlap)?;

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        // Sample without replacement: actives first, then distractors.
        let mut ids: Vec<usize> = (0..cfg.pool_size).collect();
        for i in 0..ids.len() {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        let actives = &ids[..cfg.num_speakers];
        let distractors = &ids[cfg.num_speakers..cfg.num_speakers + cfg.num_distractors];

        let sim = simulate_labels(
            &cfg.turns,
            cfg.num_speakers,
            cfg.duration_s,
            cfg.max_overlap,
            &mut rng,
        )?;
        let models: Vec<SpeakerModel> =
            actives.iter().map(|&id| pool[id].clone()).collect();
        let features = synth_features(&sim.activity, &models, cfg.noise_sigma, &mut rng)?;

        let mut activity = ActivityMatrix::zeros(sim.activity.frames, cfg.slots);
        for t in 0..sim.activity.frames {
            for (slot, _) in actives.iter().enumerate() {
                activity.set(t, slot, sim.activity.get(t, slot));
            }
        }
        encode_sequence(&activity, &pse)?;

        let mut profiles = ProfileSet::empty(cfg.slots, 2 * cfg.feat_dim);
        let mut speaker_ids = vec![None; cfg.slots];
        for (slot, &id) in actives.iter().chain(distractors).enumerate() {
            let prof = speaker_profile(&pool[id], &mut rng);
            profiles.vectors.row_mut(slot).copy_from_slice(&prof);
            profiles.valid[slot] = true;
            speaker_ids[slot] = Some(id);
        }
        samples.push(SimSample {
            features,
            activity,
            profiles,
            speaker_ids,
            overlap_ratio: sim.overlap_ratio,
        });
    }
    Ok(SimDataset { samples, pool })
}
