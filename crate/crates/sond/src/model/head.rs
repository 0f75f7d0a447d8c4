//! Output heads mapping SCN channel activations to posteriors. Two
//! interchangeable strategies: the power-set softmax head and the
//! per-speaker sigmoid (multi-label) head used by the ablation.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Result, SondError};
use crate::model::config::ModelConfig;
use crate::numerics::{sigmoid, softmax_inplace, Mat};
use crate::pse::{class_to_pse, decode_pse, encode_sequence, ActivityMatrix};

pub trait OutputHead: Send + Sync {
    fn name(&self) -> &'static str;
    fn out_dim(&self, cfg: &ModelConfig) -> usize;
    /// Logits to per-frame posteriors.
    fn activate(&self, logits: &Mat) -> Mat;
    /// Mean per-frame loss against ground-truth activity, and its gradient
    /// with respect to the logits.
    fn loss_grad(&self, logits: &Mat, target: &ActivityMatrix, cfg: &ModelConfig)
        -> Result<(f64, Mat)>;
    /// Posteriors back to a binary activity matrix.
    fn decode(&self, probs: &Mat, cfg: &ModelConfig) -> Result<ActivityMatrix>;
}

/// Softmax over all speaker combinations of size <= K.
pub struct PseHead;

impl OutputHead for PseHead {
    fn name(&self) -> &'static str {
        "pse"
    }

    fn out_dim(&self, cfg: &ModelConfig) -> usize {
        cfg.num_classes
    }

    fn activate(&self, logits: &Mat) -> Mat {
        let mut probs = logits.clone();
        for t in 0..probs.rows {
            softmax_inplace(probs.row_mut(t));
        }
        probs
    }

    fn loss_grad(
        &self,
        logits: &Mat,
        target: &ActivityMatrix,
        cfg: &ModelConfig,
    ) -> Result<(f64, Mat)> {
        let labels = encode_sequence(target, &cfg.pse())?;
        let t_len = logits.rows;
        let probs = self.activate(logits);
        let mut loss = 0.0;
        let mut d = probs.clone();
        for t in 0..t_len {
            let y = labels.labels[t];
            loss -= probs.get(t, y).max(1e-12).ln();
            let v = d.get(t, y);
            d.set(t, y, v - 1.0);
        }
        d.scale(1.0 / t_len as f64);
        Ok((loss / t_len as f64, d))
    }

    fn decode(&self, probs: &Mat, cfg: &ModelConfig) -> Result<ActivityMatrix> {
        let pse = cfg.pse();
        let mut acts = ActivityMatrix::zeros(probs.rows, cfg.max_speakers);
        for t in 0..probs.rows {
            let row = probs.row(t);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let code = class_to_pse(best, &pse)?;
            acts.row_mut(t).copy_from_slice(&decode_pse(code, cfg.max_speakers)?);
        }
        Ok(acts)
    }
}

/// Per-speaker sigmoid heads with binary cross entropy; the "- PSE"
/// ablation configuration. Decoding thresholds at 0.5 and keeps the K
/// strongest speakers when a frame exceeds the overlap budget.
pub struct MultiLabelHead;

impl OutputHead for MultiLabelHead {
    fn name(&self) -> &'static str {
        "multilabel"
    }

    fn out_dim(&self, cfg: &ModelConfig) -> usize {
        cfg.max_speakers
    }

    fn activate(&self, logits: &Mat) -> Mat {
        logits.map(sigmoid)
    }

    fn loss_grad(
        &self,
        logits: &Mat,
        target: &ActivityMatrix,
        cfg: &ModelConfig,
    ) -> Result<(f64, Mat)> {
        if target.speakers != cfg.max_speakers || target.frames != logits.rows {
            return Err(SondError::Shape(format!(
                "multilabel target {}x{}, logits {}x{}",
                target.frames, target.speakers, logits.rows, logits.cols
            )));
        }
        let t_len = logits.rows;
        let probs = self.activate(logits);
        let mut loss = 0.0;
        let mut d = Mat::zeros(logits.rows, logits.cols);
        for t in 0..t_len {
            for n in 0..cfg.max_speakers {
                let p = probs.get(t, n).clamp(1e-12, 1.0 - 1e-12);
                let y = target.get(t, n) as f64;
                loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                d.set(t, n, (probs.get(t, n) - y) / t_len as f64);
            }
        }
        Ok((loss / t_len as f64, d))
    }

    fn decode(&self, probs: &Mat, cfg: &ModelConfig) -> Result<ActivityMatrix> {
        let mut acts = ActivityMatrix::zeros(probs.rows, cfg.max_speakers);
        for t in 0..probs.rows {
            let row = probs.row(t);
            let mut active: Vec<usize> =
                (0..cfg.max_speakers).filter(|&n| row[n] > 0.5).collect();
            if active.len() > cfg.max_overlap {
                active.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
                active.truncate(cfg.max_overlap);
            }
            for n in active {
                acts.set(t, n, 1);
            }
        }
        Ok(acts)
    }
}

type HeadCtor = fn() -> Box<dyn OutputHead>;

fn registry() -> &'static BTreeMap<&'static str, HeadCtor> {
    static REG: OnceLock<BTreeMap<&'static str, HeadCtor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut m: BTreeMap<&'static str, HeadCtor> = BTreeMap::new();
        m.insert("pse", || Box::new(PseHead));
        m.insert("multilabel", || Box::new(MultiLabelHead));
        m
    })
}

pub fn resolve_head(name: &str) -> Result<Box<dyn OutputHead>> {
    registry()
        .get(name)
        .map(|ctor| ctor())
        .ok_or_else(|| SondError::UnknownStrategy {
            kind: "output head",
            name: name.to_string(),
            known: known_heads().join(", "),
        })
}

pub fn known_heads() -> Vec<&'static str> {
    registry().keys().copied().collect()
}
