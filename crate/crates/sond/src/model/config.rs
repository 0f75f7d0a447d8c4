use crate::error::{Result, SondError};
use crate::pse::{num_classes, PseConfig};

/// Dimensions and layer counts for the full diarization model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Acoustic feature dimension per frame (D).
    pub feat_dim: usize,
    /// Shared encoding dimension (E) for speech frames and projected profiles.
    pub emb_dim: usize,
    /// Raw speaker-profile dimension (P) entering the speaker encoder.
    pub profile_dim: usize,
    /// Maximum profile slots (N).
    pub max_speakers: usize,
    /// Maximum simultaneous speakers (K).
    pub max_overlap: usize,
    /// Number of power-set classes (C), derived from (N, K).
    pub num_classes: usize,
    /// Statistic-pooling window in frames (l).
    pub pool_window: usize,
    /// Speech-encoder convolution widths; empty means identity (features
    /// flow straight into pooling).
    pub conv_channels: Vec<usize>,
    /// Convolution kernel size in frames, odd.
    pub conv_kernel: usize,
    /// Context-dependent scorer depth.
    pub cd_layers: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub cd_ff_dim: usize,
    /// Speaker-combining network depth.
    pub scn_layers: usize,
    pub scn_ff_dim: usize,
    /// Memory-block look-back taps (L1) and look-ahead taps (L2).
    pub look_back: usize,
    pub look_ahead: usize,
    /// Output head strategy name ("pse" or "multilabel").
    pub head: String,
}

impl ModelConfig {
    /// Production-scale defaults (N=16, K=4, 80-dim features).
    pub fn full_scale() -> Self {
        Self {
            feat_dim: 80,
            emb_dim: 256,
            profile_dim: 160,
            max_speakers: 16,
            max_overlap: 4,
            num_classes: 2517,
            pool_window: 20,
            conv_channels: vec![80, 80],
            conv_kernel: 3,
            cd_layers: 4,
            attn_dim: 512,
            attn_heads: 4,
            cd_ff_dim: 1024,
            scn_layers: 6,
            scn_ff_dim: 512,
            look_back: 15,
            look_ahead: 15,
            head: "pse".into(),
        }
    }

    /// CPU-trainable configuration used by the end-to-end tests.
    pub fn desk_scale(n: usize, k: usize, feat_dim: usize) -> Result<Self> {
        let c = num_classes(n, k)?;
        Ok(Self {
            feat_dim,
            emb_dim: 32,
            profile_dim: 2 * feat_dim,
            max_speakers: n,
            max_overlap: k,
            num_classes: c,
            pool_window: 11,
            conv_channels: vec![],
            conv_kernel: 3,
            cd_layers: 1,
            attn_dim: 64,
            attn_heads: 4,
            cd_ff_dim: 64,
            scn_layers: 2,
            scn_ff_dim: 64,
            look_back: 2,
            look_ahead: 2,
            head: "pse".into(),
        })
    }

    /// Smallest config that still exercises every layer type; used by the
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            feat_dim: 5,
            emb_dim: 8,
            profile_dim: 10,
            max_speakers: 3,
            max_overlap: 2,
            num_classes: num_classes(3, 2).unwrap(),
            pool_window: 3,
            conv_channels: vec![6],
            conv_kernel: 3,
            cd_layers: 1,
            attn_dim: 8,
            attn_heads: 2,
            cd_ff_dim: 8,
            scn_layers: 2,
            scn_ff_dim: 8,
            look_back: 2,
            look_ahead: 2,
            head: "pse".into(),
        }
    }

    pub fn pse(&self) -> PseConfig {
        PseConfig { n: self.max_speakers, k: self.max_overlap, c: self.num_classes }
    }

    /// Channel count leaving the convolution stack.
    pub fn conv_out(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&self.feat_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attn_dim % self.attn_heads != 0 {
            return Err(SondError::InvalidConfig(format!(
                "attn_dim {} not divisible by {} heads",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(SondError::InvalidConfig("conv kernel must be odd".into()));
        }
        let c = num_classes(self.max_speakers, self.max_overlap)?;
        if c != self.num_classes {
            return Err(SondError::InvalidConfig(format!(
                "num_classes {} does not match derived C = {c}",
                self.num_classes
            )));
        }
        for &d in [
            self.feat_dim,
            self.emb_dim,
            self.profile_dim,
            self.pool_window,
            self.attn_dim,
            self.cd_ff_dim,
            self.scn_ff_dim,
        ]
        .iter()
        {
            if d == 0 {
                return Err(SondError::InvalidConfig("zero dimension".into()));
            }
        }
        Ok(())
    }
}
