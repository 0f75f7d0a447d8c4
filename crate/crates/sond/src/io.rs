//! Text and binary file formats: features, VAD intervals, PSE label files,
//! chunk embeddings, flat key=value configs, training logs and score
//! reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Result, SondError};
use crate::eval::DerResult;
use crate::numerics::Mat;
use crate::pse::{PseConfig, PseLabelSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Ascii,
    Binary,
}

pub fn write_features(path: &Path, x: &Mat, format: FeatureFormat) -> Result<()> {
    let header = format!("#feat T={} D={}\n", x.rows, x.cols);
    match format {
        FeatureFormat::Ascii => {
            let mut out = header;
            for t in 0..x.rows {
                let row: Vec<String> = x.row(t).iter().map(|v| format!("{v}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            std::fs::write(path, out)?;
        }
        FeatureFormat::Binary => {
            let mut bytes = header.into_bytes();
            let mut payload = vec![0u8; 8 * x.data.len()];
            LittleEndian::write_f64_into(&x.data, &mut payload);
            bytes.extend_from_slice(&payload);
            std::fs::write(path, bytes)?;
        }
    }
    Ok(())
}

fn parse_feat_header(line: &str) -> Result<(usize, usize)> {
    let err = |msg: String| SondError::Parse { line: 1, msg };
    let rest = line
        .strip_prefix("#feat ")
        .ok_or_else(|| err(format!("expected '#feat' header, got '{line}'")))?;
    let mut t = None;
    let mut d = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("T=") {
            t = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("D=") {
            d = v.parse().ok();
        }
    }
    match (t, d) {
        (Some(t), Some(d)) => Ok((t, d)),
        _ => Err(err(format!("malformed feature header '{line}'"))),
    }
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SondError::Parse { line: 1, msg: "missing header line".into() })?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| SondError::Parse { line: 1, msg: "non-utf8 header".into() })?;
    let (t, d) = parse_feat_header(header)?;
    let body = &bytes[nl + 1..];
    if body.len() == 8 * t * d {
        let mut data = vec![0.0; t * d];
        LittleEndian::read_f64_into(body, &mut data);
        return Ok(Mat::from_vec(t, d, data));
    }
    let text = std::str::from_utf8(body)
        .map_err(|_| SondError::Parse { line: 2, msg: "body is neither binary nor utf8".into() })?;
    let mut data = Vec::with_capacity(t * d);
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| SondError::Parse {
                line: i + 2,
                msg: format!("bad feature value in '{line}'"),
            })?;
        if vals.len() != d {
            return Err(SondError::Parse {
                line: i + 2,
                msg: format!("expected {d} values, got {}", vals.len()),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != t {
        return Err(SondError::Parse {
            line: rows + 1,
            msg: format!("header promised {t} frames, found {rows}"),
        });
    }
    Ok(Mat::from_vec(t, d, data))
}

/// Voiced intervals, one `start_s end_s` pair per line.
pub fn read_vad(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| SondError::Parse { line: i + 1, msg };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(err(format!("expected 'start end', got '{line}'")));
        }
        let s: f64 = parts[0].parse().map_err(|_| err(format!("bad start '{}'", parts[0])))?;
        let e: f64 = parts[1].parse().map_err(|_| err(format!("bad end '{}'", parts[1])))?;
        if !(s < e) || s < 0.0 {
            return Err(err(format!("bad interval {s} .. {e}")));
        }
        if let Some(&(_, prev_end)) = out.last() {
            if s < prev_end {
                return Err(err(format!(
                    "interval {s} .. {e} overlaps or precedes previous end {prev_end}"
                )));
            }
        }
        out.push((s, e));
    }
    Ok(out)
}

pub fn write_vad(intervals: &[(f64, f64)]) -> String {
    let mut out = String::new();
    for &(s, e) in intervals {
        let _ = writeln!(out, "{s} {e}");
    }
    out
}

pub fn write_labels(seq: &PseLabelSeq, cfg: &PseConfig) -> String {
    let mut out = format!("#pse N={} K={} C={}\n", cfg.n, cfg.k, cfg.c);
    for &l in &seq.labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

pub fn read_labels(text: &str) -> Result<(PseLabelSeq, PseConfig)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| SondError::Parse { line: 1, msg: "empty label file".into() })?;
    let err1 = |msg: String| SondError::Parse { line: 1, msg };
    let rest = header
        .strip_prefix("#pse ")
        .ok_or_else(|| err1(format!("expected '#pse' header, got '{header}'")))?;
    let mut n = None;
    let mut k = None;
    let mut c = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("N=") {
            n = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("K=") {
            k = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("C=") {
            c = v.parse().ok();
        }
    }
    let (n, k, c) = match (n, k, c) {
        (Some(n), Some(k), Some(c)) => (n, k, c),
        _ => return Err(err1(format!("malformed label header '{header}'"))),
    };
    let cfg = PseConfig::new(n, k)?;
    if cfg.c != c {
        return Err(err1(format!("header C={c} but N={n}, K={k} gives {}", cfg.c)));
    }
    let mut labels = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let l: usize = line.parse().map_err(|_| SondError::Parse {
            line: i + 1,
            msg: format!("bad class index '{line}'"),
        })?;
        if l >= cfg.c {
            return Err(SondError::Parse {
                line: i + 1,
                msg: format!("class {l} out of range for C={}", cfg.c),
            });
        }
        labels.push(l);
    }
    Ok((PseLabelSeq { labels }, cfg))
}

#[derive(Debug, Clone)]
pub struct ChunkEmbedding {
    pub chunk_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub vector: Vec<f64>,
}

pub fn write_embeddings(chunks: &[ChunkEmbedding]) -> String {
    let dim = chunks.first().map_or(0, |c| c.vector.len());
    let mut out = format!("#emb m={} dim={}\n", chunks.len(), dim);
    for c in chunks {
        let vals: Vec<String> = c.vector.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{} {} {} {}", c.chunk_id, c.start_s, c.end_s, vals.join(" "));
    }
    out
}

pub fn read_embeddings(text: &str) -> Result<Vec<ChunkEmbedding>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| SondError::Parse { line: 1, msg: "empty embedding file".into() })?;
    let err1 = |msg: String| SondError::Parse { line: 1, msg };
    let rest = header
        .strip_prefix("#emb ")
        .ok_or_else(|| err1(format!("expected '#emb' header, got '{header}'")))?;
    let mut m = None;
    let mut dim = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("m=") {
            m = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("dim=") {
            dim = v.parse().ok();
        }
    }
    let (m, dim): (usize, usize) = match (m, dim) {
        (Some(m), Some(dim)) => (m, dim),
        _ => return Err(err1(format!("malformed embedding header '{header}'"))),
    };
    let mut out = Vec::with_capacity(m);
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| SondError::Parse { line: i + 1, msg };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 + dim {
            return Err(err(format!("expected {} fields, got {}", 3 + dim, parts.len())));
        }
        let start_s: f64 =
            parts[1].parse().map_err(|_| err(format!("bad start '{}'", parts[1])))?;
        let end_s: f64 =
            parts[2].parse().map_err(|_| err(format!("bad end '{}'", parts[2])))?;
        let vector: Vec<f64> = parts[3..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err("bad embedding value".into()))?;
        out.push(ChunkEmbedding { chunk_id: parts[0].to_string(), start_s, end_s, vector });
    }
    if out.len() != m {
        return Err(SondError::Parse {
            line: out.len() + 1,
            msg: format!("header promised {m} chunks, found {}", out.len()),
        });
    }
    Ok(out)
}

/// Flat `key=value` config text; '#' lines and blanks skipped.
pub fn read_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| SondError::Parse {
            line: i + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn write_kv(map: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in map {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

/// One training-log line per step.
pub fn format_train_log(rows: &[(usize, f64, f64, f64, f64)]) -> String {
    let mut out = String::from("step\tce\tsim\ttotal\tlr\n");
    for &(step, ce, sim, total, lr) in rows {
        let _ = writeln!(out, "{step}\t{ce:.6}\t{sim:.6}\t{total:.6}\t{lr:e}");
    }
    out
}

pub fn format_score_report(rows: &[(String, DerResult)]) -> String {
    let mut out = String::from("file\tDER\tMD\tFA\tSC\ttotal_s\n");
    for (file, r) in rows {
        let _ = writeln!(
            out,
            "{file}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.3}",
            r.der, r.md, r.fa, r.sc, r.t_total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(seed: u64, t: usize, d: usize) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(t, d, (0..t * d).map(|_| rng.gen_range(-5.0..5.0)).collect())
    }

    #[test]
    fn feature_ascii_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.feat");
        let x = random_mat(1, 17, 5);
        write_features(&path, &x, FeatureFormat::Ascii).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.featb");
        let x = random_mat(2, 33, 7);
        write_features(&path, &x, FeatureFormat::Binary).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn feature_frame_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.feat");
        std::fs::write(&path, "#feat T=3 D=2\n1 2\n3 4\n").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn vad_parses_and_validates() {
        let v = read_vad("0.0 1.5\n2.0 4.0\n").unwrap();
        assert_eq!(v, vec![(0.0, 1.5), (2.0, 4.0)]);
        assert!(read_vad("1.0 0.5\n").is_err());
        match read_vad("0.0 2.0\n1.0 3.0\n") {
            Err(SondError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected overlap error, got {other:?}"),
        }
        let text = write_vad(&[(0.0, 1.5), (2.0, 4.0)]);
        assert_eq!(read_vad(&text).unwrap().len(), 2);
    }

    #[test]
    fn label_round_trip() {
        let cfg = PseConfig::new(4, 2).unwrap();
        let seq = PseLabelSeq { labels: vec![0, 3, 7, 1, 0] };
        let text = write_labels(&seq, &cfg);
        let (back, back_cfg) = read_labels(&text).unwrap();
        assert_eq!(back.labels, seq.labels);
        assert_eq!((back_cfg.n, back_cfg.k, back_cfg.c), (4, 2, cfg.c));
    }

    #[test]
    fn label_class_out_of_range_rejected() {
        let text = "#pse N=3 K=1 C=4\n0\n9\n";
        match read_labels(text) {
            Err(SondError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn embedding_round_trip() {
        let chunks = vec![
            ChunkEmbedding {
                chunk_id: "c0".into(),
                start_s: 0.0,
                end_s: 1.28,
                vector: vec![0.25, -1.5, 3.0],
            },
            ChunkEmbedding {
                chunk_id: "c1".into(),
                start_s: 0.64,
                end_s: 1.92,
                vector: vec![1.0, 2.0, -0.125],
            },
        ];
        let text = write_embeddings(&chunks);
        let back = read_embeddings(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].chunk_id, "c0");
        assert_eq!(back[1].vector, chunks[1].vector);
    }

    #[test]
    fn kv_round_trip_and_comments() {
        let text = "# a comment\nfeat_dim=8\nseed=42\n\nhead=pse\n";
        let map = read_kv(text).unwrap();
        assert_eq!(map.get("feat_dim").unwrap(), "8");
        assert_eq!(map.get("head").unwrap(), "pse");
        let out = write_kv(&map);
        assert_eq!(read_kv(&out).unwrap(), map);
    }

    #[test]
    fn train_log_has_header_and_rows() {
        let text = format_train_log(&[(1, 3.5, 0.2, 3.7, 1e-3), (2, 3.1, 0.1, 3.2, 1e-3)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step\tce\tsim\ttotal\tlr");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t"));
    }
}
