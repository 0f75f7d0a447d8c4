use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SondError};
use crate::model::config::ModelConfig;
use crate::numerics::Mat;

const CKPT_MAGIC: &str = "sond-ckpt-v1";

/// Named parameter tensors, iterated in sorted-name order everywhere so
/// flattening, checkpoints and averaging stay deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, m: Mat) {
        self.map.insert(name.to_string(), m);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|m| m.data.len()).sum()
    }

    /// Same names and shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> ParamSet {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), Mat::zeros(v.rows, v.cols)))
            .collect();
        ParamSet { map }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for m in self.map.values() {
            out.extend_from_slice(&m.data);
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> ParamSet {
        let mut out = self.clone();
        let mut off = 0;
        for m in out.map.values_mut() {
            let len = m.data.len();
            m.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        assert_eq!(off, flat.len());
        out
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, m) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                m.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC.as_bytes())?;
        let header = config_to_kv(cfg);
        f.write_u32::<LittleEndian>(header.len() as u32)?;
        f.write_all(header.as_bytes())?;
        f.write_u32::<LittleEndian>(self.map.len() as u32)?;
        for (name, m) in &self.map {
            f.write_u32::<LittleEndian>(name.len() as u32)?;
            f.write_all(name.as_bytes())?;
            f.write_u64::<LittleEndian>(m.rows as u64)?;
            f.write_u64::<LittleEndian>(m.cols as u64)?;
            for &v in &m.data {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamSet, ModelConfig)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 12];
        f.read_exact(&mut magic)?;
        if magic != CKPT_MAGIC.as_bytes() {
            return Err(SondError::Checkpoint("bad magic".into()));
        }
        let hlen = f.read_u32::<LittleEndian>()? as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header = String::from_utf8(hbuf)
            .map_err(|_| SondError::Checkpoint("non-utf8 header".into()))?;
        let cfg = config_from_kv(&header)?;
        let count = f.read_u32::<LittleEndian>()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let nlen = f.read_u32::<LittleEndian>()? as usize;
            let mut nbuf = vec![0u8; nlen];
            f.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf)
                .map_err(|_| SondError::Checkpoint("non-utf8 tensor name".into()))?;
            let rows = f.read_u64::<LittleEndian>()? as usize;
            let cols = f.read_u64::<LittleEndian>()? as usize;
            let mut data = vec![0.0; rows * cols];
            for v in data.iter_mut() {
                *v = f.read_f64::<LittleEndian>()?;
            }
            map.insert(name, Mat::from_vec(rows, cols, data));
        }
        Ok((ParamSet { map }, cfg))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

fn config_to_kv(cfg: &ModelConfig) -> String {
    let conv = cfg
        .conv_channels
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    format!(
        "feat_dim={}\nemb_dim={}\nprofile_dim={}\nmax_speakers={}\nmax_overlap={}\n\
         num_classes={}\npool_window={}\nconv_channels={}\nconv_kernel={}\ncd_layers={}\n\
         attn_dim={}\nattn_heads={}\ncd_ff_dim={}\nscn_layers={}\nscn_ff_dim={}\n\
         look_back={}\nlook_ahead={}\nhead={}\n",
        cfg.feat_dim,
        cfg.emb_dim,
        cfg.profile_dim,
        cfg.max_speakers,
        cfg.max_overlap,
        cfg.num_classes,
        cfg.pool_window,
        conv,
        cfg.conv_kernel,
        cfg.cd_layers,
        cfg.attn_dim,
        cfg.attn_heads,
        cfg.cd_ff_dim,
        cfg.scn_layers,
        cfg.scn_ff_dim,
        cfg.look_back,
        cfg.look_ahead,
        cfg.head,
    )
}

fn config_from_kv(text: &str) -> Result<ModelConfig> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| SondError::Checkpoint(format!("missing config key '{k}'")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| SondError::Checkpoint(format!("bad value for '{k}'")))
    };
    let conv_raw = get("conv_channels")?;
    let conv_channels = if conv_raw.is_empty() {
        vec![]
    } else {
        conv_raw
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| SondError::Checkpoint("bad conv_channels".into()))?
    };
    let cfg = ModelConfig {
        feat_dim: num("feat_dim")?,
        emb_dim: num("emb_dim")?,
        profile_dim: num("profile_dim")?,
        max_speakers: num("max_speakers")?,
        max_overlap: num("max_overlap")?,
        num_classes: num("num_classes")?,
        pool_window: num("pool_window")?,
        conv_channels,
        conv_kernel: num("conv_kernel")?,
        cd_layers: num("cd_layers")?,
        attn_dim: num("attn_dim")?,
        attn_heads: num("attn_heads")?,
        cd_ff_dim: num("cd_ff_dim")?,
        scn_layers: num("scn_layers")?,
        scn_ff_dim: num("scn_ff_dim")?,
        look_back: num("look_back")?,
        look_ahead: num("look_ahead")?,
        head: get("head")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

/// Fan-in scaled uniform init for affine weights; memory taps start as the
/// identity (center tap 1, others 0) so early training sees pass-through
/// memory blocks.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();

    // Speech encoder: conv stack + pooled-stat embedding.
    let mut in_ch = cfg.feat_dim;
    for (i, &out_ch) in cfg.conv_channels.iter().enumerate() {
        let fan = in_ch * cfg.conv_kernel;
        p.insert(&format!("speech.conv{i}.w"), uniform_mat(&mut rng, fan, out_ch, fan));
        p.insert(&format!("speech.conv{i}.b"), uniform_mat(&mut rng, 1, out_ch, fan));
        in_ch = out_ch;
    }
    let pooled = 2 * cfg.conv_out();
    p.insert("speech.emb.w", uniform_mat(&mut rng, pooled, cfg.emb_dim, pooled));
    p.insert("speech.emb.b", uniform_mat(&mut rng, 1, cfg.emb_dim, pooled));

    // Speaker encoder: three affine+ReLU layers into the shared space.
    let dims = [cfg.profile_dim, cfg.emb_dim, cfg.emb_dim, cfg.emb_dim];
    for i in 0..3 {
        p.insert(
            &format!("spk.fc{i}.w"),
            uniform_mat(&mut rng, dims[i], dims[i + 1], dims[i]),
        );
        p.insert(&format!("spk.fc{i}.b"), uniform_mat(&mut rng, 1, dims[i + 1], dims[i]));
    }

    // CD scorer: input projection, attention blocks, scalar output.
    let a = cfg.attn_dim;
    p.insert("cd.in.w", uniform_mat(&mut rng, 2 * cfg.emb_dim, a, 2 * cfg.emb_dim));
    p.insert("cd.in.b", uniform_mat(&mut rng, 1, a, 2 * cfg.emb_dim));
    for l in 0..cfg.cd_layers {
        for part in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("cd.l{l}.attn.{part}"), uniform_mat(&mut rng, a, a, a));
        }
        for part in ["bq", "bk", "bv", "bo"] {
            p.insert(&format!("cd.l{l}.attn.{part}"), uniform_mat(&mut rng, 1, a, a));
        }
        p.insert(&format!("cd.l{l}.ff.w1"), uniform_mat(&mut rng, a, cfg.cd_ff_dim, a));
        p.insert(&format!("cd.l{l}.ff.b1"), uniform_mat(&mut rng, 1, cfg.cd_ff_dim, a));
        p.insert(
            &format!("cd.l{l}.ff.w2"),
            uniform_mat(&mut rng, cfg.cd_ff_dim, a, cfg.cd_ff_dim),
        );
        p.insert(&format!("cd.l{l}.ff.b2"), uniform_mat(&mut rng, 1, a, cfg.cd_ff_dim));
    }
    p.insert("cd.out.w", uniform_mat(&mut rng, a, 1, a));
    p.insert("cd.out.b", uniform_mat(&mut rng, 1, 1, a));

    // SCN: first layer consumes the 2N concatenated scores.
    let n = cfg.max_speakers;
    for l in 0..cfg.scn_layers {
        let in_dim = if l == 0 { 2 * n } else { n };
        p.insert(
            &format!("scn.l{l}.w1"),
            uniform_mat(&mut rng, in_dim, cfg.scn_ff_dim, in_dim),
        );
        p.insert(&format!("scn.l{l}.b1"), uniform_mat(&mut rng, 1, cfg.scn_ff_dim, in_dim));
        p.insert(&format!("scn.l{l}.ln.g"), Mat::from_vec(1, cfg.scn_ff_dim, vec![1.0; cfg.scn_ff_dim]));
        p.insert(&format!("scn.l{l}.ln.b"), Mat::zeros(1, cfg.scn_ff_dim));
        p.insert(
            &format!("scn.l{l}.w2"),
            uniform_mat(&mut rng, cfg.scn_ff_dim, n, cfg.scn_ff_dim),
        );
        p.insert(&format!("scn.l{l}.b2"), uniform_mat(&mut rng, 1, n, cfg.scn_ff_dim));
        let mut taps_a = Mat::zeros(n, cfg.look_back + 1);
        for i in 0..n {
            taps_a.set(i, 0, 1.0);
        }
        p.insert(&format!("scn.l{l}.mem.a"), taps_a);
        p.insert(&format!("scn.l{l}.mem.c"), Mat::zeros(n, cfg.look_ahead));
    }

    // Output head.
    let out_dim = match cfg.head.as_str() {
        "pse" => cfg.num_classes,
        "multilabel" => n,
        other => {
            return Err(SondError::UnknownStrategy {
                kind: "output head",
                name: other.into(),
                known: "pse, multilabel".into(),
            })
        }
    };
    p.insert("head.w", uniform_mat(&mut rng, n, out_dim, n));
    p.insert("head.b", Mat::zeros(1, out_dim));

    Ok(p)
}

/// Arithmetic mean of checkpoints with identical configs.
pub fn average_checkpoints(sets: &[ParamSet]) -> Result<ParamSet> {
    let first = sets
        .first()
        .ok_or_else(|| SondError::Checkpoint("no checkpoints to average".into()))?;
    let mut avg = first.clone();
    for other in &sets[1..] {
        for (name, m) in avg.iter_mut() {
            let o = other
                .map
                .get(name)
                .ok_or_else(|| SondError::Checkpoint(format!("tensor '{name}' missing")))?;
            if o.shape() != m.shape() {
                return Err(SondError::Checkpoint(format!("tensor '{name}' shape mismatch")));
            }
            m.add_assign(o);
        }
    }
    let inv = 1.0 / sets.len() as f64;
    for (_, m) in avg.iter_mut() {
        m.scale(inv);
    }
    Ok(avg)
}
