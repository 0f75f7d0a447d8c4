//! Speaker encoder: three affine+ReLU layers projecting raw profiles into
//! the speech-encoding space.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::model::ProfileSet;
use crate::numerics::{affine, relu, Mat};

pub struct SpeakerCache {
    /// Layer inputs: [profiles, relu(l0), relu(l1)].
    pub inputs: Vec<Mat>,
    /// Pre-activations per layer.
    pub preacts: Vec<Mat>,
}

pub fn speaker_forward(
    profiles: &ProfileSet,
    p: &ParamSet,
    _cfg: &ModelConfig,
) -> Result<(Mat, SpeakerCache)> {
    let mut cur = profiles.vectors.clone();
    let mut inputs = Vec::new();
    let mut preacts = Vec::new();
    for i in 0..3 {
        let pre = affine(
            &cur,
            p.get(&format!("spk.fc{i}.w")),
            p.get(&format!("spk.fc{i}.b")).row(0),
        )?;
        inputs.push(cur);
        cur = pre.map(relu);
        preacts.push(pre);
    }
    Ok((cur, SpeakerCache { inputs, preacts }))
}

pub fn speaker_backward(
    d_vbar: &Mat,
    cache: &SpeakerCache,
    p: &ParamSet,
    grads: &mut ParamSet,
) {
    let mut d_cur = d_vbar.clone();
    for i in (0..3).rev() {
        let pre = &cache.preacts[i];
        for (g, &z) in d_cur.data.iter_mut().zip(&pre.data) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        grads
            .get_mut(&format!("spk.fc{i}.w"))
            .add_assign(&cache.inputs[i].transpose().matmul(&d_cur));
        {
            let db = grads.get_mut(&format!("spk.fc{i}.b"));
            for r in 0..d_cur.rows {
                for (b, &v) in db.row_mut(0).iter_mut().zip(d_cur.row(r)) {
                    *b += v;
                }
            }
        }
        d_cur = d_cur.matmul(&p.get(&format!("spk.fc{i}.w")).transpose());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn shapes_and_determinism() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 5).unwrap();
        let mut profiles = ProfileSet::empty(cfg.max_speakers, cfg.profile_dim);
        for j in 0..cfg.profile_dim {
            profiles.vectors.set(0, j, 0.3 * j as f64);
            profiles.vectors.set(1, j, 0.3 * j as f64);
        }
        profiles.valid[0] = true;
        profiles.valid[1] = true;
        let (vbar, _) = speaker_forward(&profiles, &p, &cfg).unwrap();
        assert_eq!(vbar.shape(), (cfg.max_speakers, cfg.emb_dim));
        // Identical profiles project identically.
        assert_eq!(vbar.row(0), vbar.row(1));
    }

    #[test]
    fn zero_profile_follows_bias_path() {
        let cfg = ModelConfig::tiny();
        let p = init_params(&cfg, 6).unwrap();
        let profiles = ProfileSet::empty(cfg.max_speakers, cfg.profile_dim);
        let (vbar, _) = speaker_forward(&profiles, &p, &cfg).unwrap();
        // A zero profile only sees the bias chain: relu(b2 + relu(b1 + relu(b0)) W..).
        let mut cur = Mat::zeros(1, cfg.profile_dim);
        for i in 0..3 {
            cur = affine(
                &cur,
                p.get(&format!("spk.fc{i}.w")),
                p.get(&format!("spk.fc{i}.b")).row(0),
            )
            .unwrap()
            .map(relu);
        }
        for n in 0..cfg.max_speakers {
            assert_eq!(vbar.row(n), cur.row(0));
        }
    }
}
