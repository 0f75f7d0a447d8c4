use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use sond::cluster;
use sond::eval::{self, Denominator};
use sond::io::{self, ChunkEmbedding, FeatureFormat};
use sond::model::{init_params, ModelConfig, ParamSet, ProfileSet, SondModel};
use sond::numerics::Mat;
use sond::pipeline;
use sond::pse::{decode_sequence, encode_sequence, PseConfig};
use sond::sim::{simulate_dataset, SimConfig, TurnStats};
use sond::train::{self, SimPairMode, Stage, TrainConfig, TrainSample};

#[derive(Parser)]
#[command(name = "sond", about = "Overlap-aware speaker diarization toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic conversation corpus.
    Simulate {
        /// Flat key=value simulator config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Output directory; also receives manifest.tsv.
        #[arg(long)]
        output: PathBuf,
        /// Write features as binary instead of ASCII.
        #[arg(long)]
        binary: bool,
    },
    /// Train a model on a simulated corpus manifest.
    Train {
        /// Flat key=value model/training config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// manifest.tsv from `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path to write.
        #[arg(long)]
        output: PathBuf,
        /// Training log path (tab-separated).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Diarize one recording: features + VAD + checkpoint to RTTM.
    Infer {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vad: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File id used in the RTTM records.
        #[arg(long, default_value = "rec")]
        file_id: String,
        /// Output RTTM path (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score hypothesis RTTM against reference RTTM.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        collar: f64,
        /// DER denominator: ref_speech or scored_time.
        #[arg(long, default_value = "ref_speech")]
        denominator: String,
        /// Output report path (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Cluster chunk embeddings into speaker profiles.
    Cluster {
        /// #emb embedding file.
        #[arg(long)]
        embeddings: PathBuf,
        /// Profile slot count.
        #[arg(long, default_value_t = 16)]
        slots: usize,
        /// Fixed speaker count; estimated from the eigengap if omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output profile file (stdout if omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn read_config(path: &Option<PathBuf>) -> anyhow::Result<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(io::read_kv(&text)?)
        }
    }
}

fn kv_num<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> anyhow::Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| anyhow::anyhow!("bad value for '{key}': {v}")),
    }
}

fn sim_config(kv: &BTreeMap<String, String>) -> anyhow::Result<SimConfig> {
    let d = SimConfig::default();
    let turns = TurnStats::default();
    Ok(SimConfig {
        num_speakers: kv_num(kv, "num_speakers", d.num_speakers)?,
        pool_size: kv_num(kv, "pool_size", d.pool_size)?,
        num_distractors: kv_num(kv, "num_distractors", d.num_distractors)?,
        slots: kv_num(kv, "slots", d.slots)?,
        max_overlap: kv_num(kv, "max_overlap", d.max_overlap)?,
        duration_s: kv_num(kv, "duration_s", d.duration_s)?,
        feat_dim: kv_num(kv, "feat_dim", d.feat_dim)?,
        sigma: kv_num(kv, "sigma", d.sigma)?,
        noise_sigma: kv_num(kv, "noise_sigma", d.noise_sigma)?,
        separation_sigmas: kv_num(kv, "separation_sigmas", d.separation_sigmas)?,
        turns: TurnStats {
            talk_ln_mean: kv_num(kv, "talk_ln_mean", turns.talk_ln_mean)?,
            talk_ln_sigma: kv_num(kv, "talk_ln_sigma", turns.talk_ln_sigma)?,
            silence_ln_mean: kv_num(kv, "silence_ln_mean", turns.silence_ln_mean)?,
            silence_ln_sigma: kv_num(kv, "silence_ln_sigma", turns.silence_ln_sigma)?,
        },
    })
}

fn parse_stages(text: &str) -> anyhow::Result<Vec<Stage>> {
    // steps:lr[:freeze] groups separated by commas.
    let mut out = Vec::new();
    for part in text.split(',') {
        let fields: Vec<&str> = part.split(':').collect();
        if fields.len() < 2 || fields.len() > 3 {
            bail!("bad stage '{part}', expected steps:lr[:freeze]");
        }
        out.push(Stage {
            steps: fields[0].parse().with_context(|| format!("bad steps in '{part}'"))?,
            lr: fields[1].parse().with_context(|| format!("bad lr in '{part}'"))?,
            freeze_speech: fields.get(2).is_some_and(|f| *f == "freeze"),
        });
    }
    Ok(out)
}

fn write_or_print(path: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn profiles_to_embeddings(profiles: &ProfileSet) -> Vec<ChunkEmbedding> {
    (0..profiles.slots())
        .filter(|&s| profiles.valid[s])
        .map(|s| ChunkEmbedding {
            chunk_id: format!("slot{s}"),
            start_s: 0.0,
            end_s: 0.0,
            vector: profiles.vectors.row(s).to_vec(),
        })
        .collect()
}

fn profiles_from_embeddings(chunks: &[ChunkEmbedding], slots: usize) -> anyhow::Result<ProfileSet> {
    if chunks.is_empty() {
        bail!("profile file has no entries");
    }
    if chunks.len() > slots {
        bail!("{} profiles for {} slots", chunks.len(), slots);
    }
    let dim = chunks[0].vector.len();
    let mut p = ProfileSet::empty(slots, dim);
    for (i, c) in chunks.iter().enumerate() {
        if c.vector.len() != dim {
            bail!("profile {} has dim {}, expected {dim}", c.chunk_id, c.vector.len());
        }
        p.vectors.row_mut(i).copy_from_slice(&c.vector);
        p.valid[i] = true;
    }
    Ok(p)
}

fn cmd_simulate(
    config: &Option<PathBuf>,
    seed: u64,
    count: usize,
    output: &Path,
    binary: bool,
) -> anyhow::Result<()> {
    let kv = read_config(config)?;
    let cfg = sim_config(&kv)?;
    let ds = simulate_dataset(count, &cfg, seed)?;
    std::fs::create_dir_all(output)?;
    let pse = PseConfig::new(cfg.slots, cfg.max_overlap)?;
    let format = if binary { FeatureFormat::Binary } else { FeatureFormat::Ascii };
    let mut manifest = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let stem = format!("sample_{i:04}");
        let feat = output.join(format!("{stem}.feat"));
        let lab = output.join(format!("{stem}.lab"));
        let prof = output.join(format!("{stem}.prof"));
        let vad = output.join(format!("{stem}.vad"));
        let rttm = output.join(format!("{stem}.rttm"));

        io::write_features(&feat, &s.features, format)?;
        let labels = encode_sequence(&s.activity, &pse)?;
        std::fs::write(&lab, io::write_labels(&labels, &pse))?;
        std::fs::write(&prof, io::write_embeddings(&profiles_to_embeddings(&s.profiles)))?;
        let tl = pipeline::activity_to_timeline(&s.activity);
        let mut voiced: Vec<(f64, f64)> = Vec::new();
        for t in 0..s.activity.frames {
            let on = s.activity.row(t).iter().any(|&v| v == 1);
            let ts = t as f64 / 100.0;
            let te = (t + 1) as f64 / 100.0;
            match voiced.last_mut() {
                Some(last) if on && (ts - last.1).abs() < 1e-9 => last.1 = te,
                _ if on => voiced.push((ts, te)),
                _ => {}
            }
        }
        std::fs::write(&vad, io::write_vad(&voiced))?;
        std::fs::write(&rttm, eval::emit_rttm(&tl, &stem))?;
        manifest.push_str(&format!(
            "{}\t{}\t{}\n",
            feat.display(),
            lab.display(),
            prof.display()
        ));
    }
    std::fs::write(output.join("manifest.tsv"), manifest)?;
    println!("wrote {count} samples to {}", output.display());
    Ok(())
}

fn load_manifest(path: &Path) -> anyhow::Result<Vec<TrainSample>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading manifest {}", path.display()))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            bail!("manifest line {}: expected 3 tab-separated paths", i + 1);
        }
        let features = io::read_features(Path::new(parts[0]))?;
        let (labels, pse) = io::read_labels(&std::fs::read_to_string(parts[1])?)?;
        let activity = decode_sequence(&labels, &pse)?;
        let chunks = io::read_embeddings(&std::fs::read_to_string(parts[2])?)?;
        let profiles = profiles_from_embeddings(&chunks, pse.n)?;
        samples.push(TrainSample { features, activity, profiles });
    }
    if samples.is_empty() {
        bail!("manifest {} lists no samples", path.display());
    }
    Ok(samples)
}

fn cmd_train(
    config: &Option<PathBuf>,
    data: &Path,
    seed: u64,
    output: &Path,
    log_path: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let kv = read_config(config)?;
    let samples = load_manifest(data)?;
    let feat_dim = samples[0].features.cols;
    let slots = samples[0].profiles.slots();

    let n = kv_num(&kv, "slots", slots)?;
    let k = kv_num(&kv, "max_overlap", 2usize)?;
    let mut mcfg = ModelConfig::desk_scale(n, k, kv_num(&kv, "feat_dim", feat_dim)?)?;
    if let Some(head) = kv.get("head") {
        mcfg.head = head.clone();
        mcfg.validate()?;
    }
    if mcfg.profile_dim != samples[0].profiles.dim() {
        bail!(
            "profiles are {}-dim but the model expects {}",
            samples[0].profiles.dim(),
            mcfg.profile_dim
        );
    }

    let mut tcfg = TrainConfig {
        lambda: kv_num(&kv, "lambda", 1.0)?,
        delta: kv_num(&kv, "delta", 1.0)?,
        batch_size: kv_num(&kv, "batch_size", 4)?,
        seed,
        clip_norm: kv_num(&kv, "clip_norm", 5.0)?,
        ..TrainConfig::default()
    };
    if let Some(s) = kv.get("stages") {
        tcfg.stages = parse_stages(s)?;
    }
    if let Some(mode) = kv.get("sim_pairs") {
        tcfg.sim_pairs = match mode.as_str() {
            "unordered" => SimPairMode::UnorderedDistinct,
            "ordered_with_self" => SimPairMode::OrderedWithSelf,
            other => bail!("unknown sim_pairs mode '{other}'"),
        };
    }

    let model = SondModel::new(mcfg.clone())?;
    let init = init_params(&mcfg, seed)?;
    let outcome = train::train(&model, &init, &samples, &tcfg)?;
    if let Some(step) = outcome.diverged_at {
        eprintln!("warning: training diverged at step {step}; saving last good params");
    }
    outcome.params.save(output, &mcfg)?;
    let acc = train::frame_accuracy(&model, &outcome.params, &samples)?;
    println!(
        "trained {} steps, frame accuracy {:.2}%, checkpoint {}",
        outcome.log.len(),
        acc * 100.0,
        output.display()
    );
    if let Some(p) = log_path {
        let rows: Vec<(usize, f64, f64, f64, f64)> = outcome
            .log
            .iter()
            .map(|l| (l.step, l.ce, l.sim, l.total, l.lr))
            .collect();
        std::fs::write(p, io::format_train_log(&rows))?;
    }
    Ok(())
}

fn cmd_infer(
    features: &Path,
    vad: &Path,
    checkpoint: &Path,
    iterations: usize,
    seed: u64,
    file_id: &str,
    output: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let x = io::read_features(features)?;
    let intervals = io::read_vad(&std::fs::read_to_string(vad)?)?;
    let (params, cfg) = ParamSet::load(checkpoint)?;
    let model = SondModel::new(cfg)?;
    let tl = pipeline::run_pipeline(&x, &intervals, &model, &params, iterations, seed)?;
    write_or_print(output, &eval::emit_rttm(&tl, file_id))
}

fn cmd_score(
    reference: &Path,
    hyp: &Path,
    collar: f64,
    denominator: &str,
    output: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let denom = match denominator {
        "ref_speech" => Denominator::RefSpeech,
        "scored_time" => Denominator::ScoredTime,
        other => bail!("unknown denominator '{other}', expected ref_speech or scored_time"),
    };
    let r = eval::parse_rttm(&std::fs::read_to_string(reference)?)?;
    let h = eval::parse_rttm(&std::fs::read_to_string(hyp)?)?;
    let result = eval::der_with(&r, &h, collar, denom)?;
    let name = hyp
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "hyp".into());
    write_or_print(output, &io::format_score_report(&[(name, result)]))
}

fn cmd_cluster(
    embeddings: &Path,
    slots: usize,
    k: Option<usize>,
    seed: u64,
    output: &Option<PathBuf>,
) -> anyhow::Result<()> {
    let chunks = io::read_embeddings(&std::fs::read_to_string(embeddings)?)?;
    if chunks.is_empty() {
        bail!("no embeddings to cluster");
    }
    let dim = chunks[0].vector.len();
    let mut e = Mat::zeros(chunks.len(), dim);
    for (i, c) in chunks.iter().enumerate() {
        e.row_mut(i).copy_from_slice(&c.vector);
    }
    let aff = cluster::build_affinity(&e)?;
    let k = match k {
        Some(k) => k,
        None => cluster::estimate_k(&aff, slots.min(e.rows))?,
    };
    let result = cluster::spectral_cluster(&aff, &e, k, seed)?;
    let profiles = cluster::extract_profiles(&result, slots)?;
    eprintln!("estimated {k} speakers over {} chunks", e.rows);
    write_or_print(output, &io::write_embeddings(&profiles_to_embeddings(&profiles)))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate { config, seed, count, output, binary } => {
            cmd_simulate(config, *seed, *count, output, *binary)
        }
        Command::Train { config, data, seed, output, log } => {
            cmd_train(config, data, *seed, output, log)
        }
        Command::Infer { features, vad, checkpoint, iterations, seed, file_id, output } => {
            cmd_infer(features, vad, checkpoint, *iterations, *seed, file_id, output)
        }
        Command::Score { reference, hyp, collar, denominator, output } => {
            cmd_score(reference, hyp, *collar, denominator, output)
        }
        Command::Cluster { embeddings, slots, k, seed, output } => {
            cmd_cluster(embeddings, *slots, *k, *seed, output)
        }
    }
}
