//! The overlap-aware neural diarization model: speech/speaker encoders,
//! CI/CD scorers, speaker-combining network and output head.

pub mod config;
pub mod head;
pub mod params;
pub mod scn;
pub mod scorers;
pub mod speaker;
pub mod speech;

pub use config::ModelConfig;
pub use head::{known_heads, resolve_head, OutputHead};
pub use params::{average_checkpoints, init_params, ParamSet};
pub use scorers::{ScoreKind, ScoreTensor};

use crate::error::{Result, SondError};
use crate::numerics::{affine, Mat};

/// N fixed profile slots with a validity mask; invalid slots are exactly
/// the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub vectors: Mat,
    pub valid: Vec<bool>,
}

impl ProfileSet {
    pub fn empty(slots: usize, dim: usize) -> Self {
        Self { vectors: Mat::zeros(slots, dim), valid: vec![false; slots] }
    }

    pub fn slots(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    pub speech: speech::SpeechCache,
    pub speaker: speaker::SpeakerCache,
    pub h: Mat,
    pub vbar: Mat,
    pub s_ci: ScoreTensor,
    pub ci: scorers::CiCache,
    pub s_cd: ScoreTensor,
    pub cd: scorers::CdCache,
    pub scn: scn::ScnCache,
    pub z_final: Mat,
    pub logits: Mat,
    pub mask: Vec<bool>,
}

pub struct SondModel {
    pub cfg: ModelConfig,
    pub head: Box<dyn OutputHead>,
}

impl SondModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let head = resolve_head(&cfg.head)?;
        Ok(Self { cfg, head })
    }

    /// Full forward pass retaining intermediates for backward.
    pub fn forward_cached(
        &self,
        x: &Mat,
        profiles: &ProfileSet,
        p: &ParamSet,
    ) -> Result<(Mat, ForwardCache)> {
        if x.cols != self.cfg.feat_dim {
            return Err(SondError::Shape(format!(
                "features are {}-dim, config expects {}",
                x.cols, self.cfg.feat_dim
            )));
        }
        if profiles.slots() != self.cfg.max_speakers || profiles.dim() != self.cfg.profile_dim {
            return Err(SondError::Shape(format!(
                "profiles {}x{}, config expects {}x{}",
                profiles.slots(),
                profiles.dim(),
                self.cfg.max_speakers,
                self.cfg.profile_dim
            )));
        }
        let (h, speech_cache) = speech::speech_forward(x, p, &self.cfg)?;
        if !h.all_finite() {
            return Err(SondError::Numeric("non-finite speech encodings".into()));
        }
        let (vbar, speaker_cache) = speaker::speaker_forward(profiles, p, &self.cfg)?;
        let (s_ci, ci_cache) = scorers::ci_forward(&h, &vbar, &profiles.valid);
        let (s_cd, cd_cache) = scorers::cd_forward(&h, &vbar, p, &self.cfg)?;
        let (z_final, scn_cache) = scn::scn_forward(&s_ci, &s_cd, p, &self.cfg)?;
        let logits = affine(&z_final, p.get("head.w"), p.get("head.b").row(0))?;
        let probs = self.head.activate(&logits);
        Ok((
            probs,
            ForwardCache {
                speech: speech_cache,
                speaker: speaker_cache,
                h,
                vbar,
                s_ci,
                ci: ci_cache,
                s_cd,
                cd: cd_cache,
                scn: scn_cache,
                z_final,
                logits,
                mask: profiles.valid.clone(),
            },
        ))
    }

    /// Per-frame posteriors only.
    pub fn forward(&self, x: &Mat, profiles: &ProfileSet, p: &ParamSet) -> Result<Mat> {
        Ok(self.forward_cached(x, profiles, p)?.0)
    }

    /// Backward from head-logit gradients (and any extra gradient flowing
    /// directly into the projected profiles, e.g. from the similarity
    /// loss). Returns gradients for every parameter tensor.
    pub fn backward(
        &self,
        p: &ParamSet,
        cache: &ForwardCache,
        d_logits: &Mat,
        d_vbar_extra: Option<&Mat>,
    ) -> Result<ParamSet> {
        let mut grads = p.zeros_like();

        // Head affine.
        grads
            .get_mut("head.w")
            .add_assign(&cache.z_final.transpose().matmul(d_logits));
        scorers::add_bias_grad(grads.get_mut("head.b"), d_logits);
        let dz = d_logits.matmul(&p.get("head.w").transpose());

        let (d_ci, d_cd) = scn::scn_backward(&dz, &cache.scn, p, &self.cfg, &mut grads);

        let mut dh = Mat::zeros(cache.h.rows, cache.h.cols);
        let mut dvbar = Mat::zeros(cache.vbar.rows, cache.vbar.cols);
        scorers::cd_backward(
            &d_cd,
            &cache.s_cd,
            &cache.cd,
            p,
            &self.cfg,
            &mut grads,
            &mut dh,
            &mut dvbar,
        );
        scorers::ci_backward(
            &d_ci,
            &cache.s_ci,
            &cache.ci,
            &cache.h,
            &cache.vbar,
            &cache.mask,
            &mut dh,
            &mut dvbar,
        );
        if let Some(extra) = d_vbar_extra {
            dvbar.add_assign(extra);
        }

        speaker::speaker_backward(&dvbar, &cache.speaker, p, &mut grads);
        speech::speech_backward(&dh, &cache.speech, p, &self.cfg, &mut grads);

        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(SondError::Numeric(format!(
                    "non-finite gradient in tensor '{name}'"
                )));
            }
        }
        Ok(grads)
    }
}
