//! Multi-task objective (cross entropy over power-set labels plus a
//! profile-similarity margin loss), the explicit backward pass, and the
//! staged Adam trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SondError};
use crate::model::{ForwardCache, ParamSet, ProfileSet, SondModel};
use crate::numerics::Mat;
use crate::pse::{ActivityMatrix, PseLabelSeq};

/// How the Eq.-style double sum over profile pairs is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimPairMode {
    /// Each unordered pair of distinct valid slots once (default).
    UnorderedDistinct,
    /// Literal double sum: ordered pairs including i = j.
    OrderedWithSelf,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sim: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, sim: f64, lambda: f64) -> Self {
        Self { ce, sim, lambda, total: ce + lambda * sim }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub steps: usize,
    pub lr: f64,
    pub freeze_speech: bool,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub delta: f64,
    pub sim_pairs: SimPairMode,
    pub batch_size: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            delta: 1.0,
            sim_pairs: SimPairMode::UnorderedDistinct,
            batch_size: 4,
            stages: vec![
                Stage { steps: 400, lr: 1e-3, freeze_speech: true },
                Stage { steps: 400, lr: 1e-4, freeze_speech: false },
                Stage { steps: 200, lr: 1e-5, freeze_speech: false },
            ],
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Mat,
    pub activity: ActivityMatrix,
    pub profiles: ProfileSet,
}

#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub ce: f64,
    pub sim: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub log: Vec<StepLog>,
    /// Set when training aborted; `params` then holds the last good state.
    pub diverged_at: Option<usize>,
}

/// Mean negative log-probability of the reference class per frame.
pub fn ce_loss(posteriors: &Mat, labels: &PseLabelSeq) -> Result<f64> {
    if posteriors.rows != labels.labels.len() {
        return Err(SondError::Shape(format!(
            "{} posterior rows vs {} labels",
            posteriors.rows,
            labels.labels.len()
        )));
    }
    let mut total = 0.0;
    for (t, &y) in labels.labels.iter().enumerate() {
        if y >= posteriors.cols {
            return Err(SondError::OutOfRange(format!(
                "frame {t}: label {y} >= {} classes",
                posteriors.cols
            )));
        }
        total -= posteriors.get(t, y).max(1e-12).ln();
    }
    Ok(total / posteriors.rows as f64)
}

fn pair_cosines(vbar: &Mat, mask: &[bool]) -> Vec<(usize, usize, f64, f64, f64)> {
    // (i, j, cos, |vi|, |vj|) over valid ordered pairs i < j with nonzero norms.
    let mut out = Vec::new();
    let norms: Vec<f64> = (0..vbar.rows)
        .map(|i| vbar.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    for i in 0..vbar.rows {
        if !mask[i] || norms[i] < 1e-12 {
            continue;
        }
        for j in (i + 1)..vbar.rows {
            if !mask[j] || norms[j] < 1e-12 {
                continue;
            }
            let dot: f64 = vbar.row(i).iter().zip(vbar.row(j)).map(|(a, b)| a * b).sum();
            out.push((i, j, dot / (norms[i] * norms[j]), norms[i], norms[j]));
        }
    }
    out
}

/// Hinge on pairwise cosine of projected profiles: max(0, cos + delta - 1)
/// summed over pairs of valid slots.
pub fn similarity_loss(vbar: &Mat, mask: &[bool], delta: f64, mode: SimPairMode) -> f64 {
    let mut loss = 0.0;
    for (_, _, cos, _, _) in pair_cosines(vbar, mask) {
        let hinge = (cos + delta - 1.0).max(0.0);
        loss += match mode {
            SimPairMode::UnorderedDistinct => hinge,
            SimPairMode::OrderedWithSelf => 2.0 * hinge,
        };
    }
    if mode == SimPairMode::OrderedWithSelf {
        // Self pairs contribute the constant hinge at cos = 1.
        let valid = mask.iter().filter(|&&v| v).count();
        loss += valid as f64 * delta.max(0.0);
    }
    loss
}

/// Gradient of `similarity_loss` with respect to vbar rows.
pub fn similarity_grad(vbar: &Mat, mask: &[bool], delta: f64, mode: SimPairMode) -> Mat {
    let mut d = Mat::zeros(vbar.rows, vbar.cols);
    let weight = match mode {
        SimPairMode::UnorderedDistinct => 1.0,
        SimPairMode::OrderedWithSelf => 2.0,
    };
    for (i, j, cos, ni, nj) in pair_cosines(vbar, mask) {
        if cos + delta - 1.0 <= 0.0 {
            continue;
        }
        let inv = 1.0 / (ni * nj);
        for k in 0..vbar.cols {
            let vi = vbar.get(i, k);
            let vj = vbar.get(j, k);
            *d.row_mut(i).get_mut(k).unwrap() += weight * (vj * inv - cos * vi / (ni * ni));
            *d.row_mut(j).get_mut(k).unwrap() += weight * (vi * inv - cos * vj / (nj * nj));
        }
    }
    d
}

/// Loss breakdown for one evaluated sample.
pub fn total_loss(
    model: &SondModel,
    cache: &ForwardCache,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (ce, _) = model.head.loss_grad(&cache.logits, &sample.activity, &model.cfg)?;
    let sim = similarity_loss(&cache.vbar, &cache.mask, cfg.delta, cfg.sim_pairs);
    Ok(LossBreakdown::new(ce, sim, cfg.lambda))
}

/// Forward + explicit backward for one sample.
pub fn loss_and_grads(
    model: &SondModel,
    params: &ParamSet,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamSet)> {
    let (_, cache) = model.forward_cached(&sample.features, &sample.profiles, params)?;
    let (ce, d_logits) = model.head.loss_grad(&cache.logits, &sample.activity, &model.cfg)?;
    let sim = similarity_loss(&cache.vbar, &cache.mask, cfg.delta, cfg.sim_pairs);
    let mut d_vbar = similarity_grad(&cache.vbar, &cache.mask, cfg.delta, cfg.sim_pairs);
    d_vbar.scale(cfg.lambda);
    let grads = model.backward(params, &cache, &d_logits, Some(&d_vbar))?;
    Ok((LossBreakdown::new(ce, sim, cfg.lambda), grads))
}

fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .map(|(_, g)| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale(scale);
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Staged Adam training. Deterministic given the seed; emits one log entry
/// per step.
pub fn train(
    model: &SondModel,
    init: &ParamSet,
    dataset: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(SondError::InvalidConfig("empty training dataset".into()));
    }
    let mut params = init.clone();
    let mut m = init.zeros_like();
    let mut v = init.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut last_good = params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len(); // force reshuffle on first step
    let mut step = 0usize;

    for stage in &cfg.stages {
        for _ in 0..stage.steps {
            step += 1;
            let mut batch_grads = init.zeros_like();
            let mut ce_sum = 0.0;
            let mut sim_sum = 0.0;
            let bsz = cfg.batch_size.min(dataset.len());
            for _ in 0..bsz {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let sample = &dataset[order[cursor]];
                cursor += 1;
                let (loss, grads) = loss_and_grads(model, &params, sample, cfg)?;
                ce_sum += loss.ce;
                sim_sum += loss.sim;
                for ((_, bg), (_, g)) in batch_grads.iter_mut().zip(grads.iter()) {
                    bg.add_assign(g);
                }
            }
            let inv = 1.0 / bsz as f64;
            for (_, g) in batch_grads.iter_mut() {
                g.scale(inv);
            }
            if stage.freeze_speech {
                batch_grads.zero_prefix("speech.");
            }
            clip_global_norm(&mut batch_grads, cfg.clip_norm);

            let loss = LossBreakdown::new(ce_sum * inv, sim_sum * inv, cfg.lambda);
            if !loss.total.is_finite() || loss.total > 1e6 {
                return Ok(TrainOutcome {
                    params: last_good,
                    log,
                    diverged_at: Some(step),
                });
            }

            // Adam update with bias correction.
            let t = step as f64;
            let corr1 = 1.0 - ADAM_B1.powf(t);
            let corr2 = 1.0 - ADAM_B2.powf(t);
            for (((name, p_t), (_, m_t)), (_, v_t)) in
                params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut())
            {
                if stage.freeze_speech && name.starts_with("speech.") {
                    continue;
                }
                let g = batch_grads.get(name);
                for i in 0..p_t.data.len() {
                    let gi = g.data[i];
                    m_t.data[i] = ADAM_B1 * m_t.data[i] + (1.0 - ADAM_B1) * gi;
                    v_t.data[i] = ADAM_B2 * v_t.data[i] + (1.0 - ADAM_B2) * gi * gi;
                    let mhat = m_t.data[i] / corr1;
                    let vhat = v_t.data[i] / corr2;
                    p_t.data[i] -= stage.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
            }

            log.push(StepLog {
                step,
                ce: loss.ce,
                sim: loss.sim,
                total: loss.total,
                lr: stage.lr,
            });
            if step % 25 == 0 {
                last_good = params.clone();
            }
        }
    }
    Ok(TrainOutcome { params, log, diverged_at: None })
}

/// Fraction of frames whose decoded activity matches the reference exactly.
pub fn frame_accuracy(model: &SondModel, params: &ParamSet, dataset: &[TrainSample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for sample in dataset {
        let probs = model.forward(&sample.features, &sample.profiles, params)?;
        let decoded = model.head.decode(&probs, &model.cfg)?;
        for t in 0..decoded.frames {
            if decoded.row(t) == sample.activity.row(t) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}
