//! On-disk formats: binary feature files, JSON-lines annotations / detections /
//! metrics, class lists, and atomic file replacement.
//!
//! Text artifacts written by this crate start with a header line
//! `{"header": {"seed": …, "config": "<resolved TOML>"}}`; parsers skip it, so
//! files without a header (hand-made annotations, say) read the same way.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Annotation, Dataset, Window};
use crate::error::{Error, Result};
use crate::infer::Detection;
use crate::params::{put_str, Reader};
use crate::tensor::Tensor;
use crate::train::StepRecord;

pub const FEATURE_MAGIC: &[u8; 4] = b"TADF";
pub const FEATURE_VERSION: u32 = 1;

pub const FEATURES_FILE: &str = "features.tadf";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const CLASSES_FILE: &str = "classes.txt";

/// Provenance carried by every text artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub seed: u64,
    pub config: String,
}

impl ArtifactHeader {
    pub fn line(&self) -> String {
        serde_json::json!({ "header": self }).to_string()
    }
}

/// Replaces `path` with `bytes` through a uniquely named temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- features

pub fn encode_features(windows: &[Window], input_dim: usize, window_length: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + windows.len() * (input_dim * window_length * 4 + 32));
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, windows.len() as u32, input_dim as u32, window_length as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for w in windows {
        if w.features.shape() != (input_dim, window_length) {
            return Err(Error::Format(format!(
                "window `{}` has shape {:?}, file declares ({input_dim}, {window_length})",
                w.video_id,
                w.features.shape()
            )));
        }
        put_str(&mut out, &w.video_id);
        out.extend_from_slice(&w.start.to_le_bytes());
        out.extend_from_slice(&w.stride.to_le_bytes());
        for &x in w.features.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Windows plus the declared `(D, T)`.
pub fn decode_features(bytes: &[u8]) -> Result<(Vec<Window>, usize, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("not a feature file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let t = r.u32()? as usize;
    let mut windows = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let video_id = r.string()?;
        let start = r.f64()?;
        let stride = r.f64()?;
        let raw = r.take(4 * d * t)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        windows.push(Window {
            video_id,
            start,
            stride,
            features: Tensor::from_vec(d, t, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} declared windows",
            bytes.len() - r.pos
        )));
    }
    Ok((windows, d, t))
}

// ---------------------------------------------------------------- classes

pub fn encode_classes(classes: &[String]) -> String {
    classes.iter().map(|c| format!("{c}\n")).collect()
}

/// One class name per non-empty line; line k (1-based, blank lines excluded) is id k.
pub fn parse_classes(text: &str, source: &Path) -> Result<Vec<String>> {
    let mut classes: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if classes.iter().any(|c| c == name) {
            return Err(parse_error(source, i + 1, format!("duplicate class `{name}`")));
        }
        classes.push(name.to_string());
    }
    Ok(classes)
}

// ---------------------------------------------------------------- json lines

fn parse_error(source: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-blank, non-header lines as `(line number, object)`.
fn json_records<'a>(text: &'a str, source: &'a Path) -> impl Iterator<Item = Result<(usize, Value)>> + 'a {
    text.lines().enumerate().filter_map(move |(i, line)| {
        if line.trim().is_empty() {
            return None;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(v) if v.get("header").is_some() => None,
            Ok(v) if v.is_object() => Some(Ok((i + 1, v))),
            Ok(_) => Some(Err(parse_error(source, i + 1, "expected a JSON object"))),
            Err(e) => Some(Err(parse_error(source, i + 1, e.to_string()))),
        }
    })
}

fn field_str<'v>(v: &'v Value, key: &str, line: usize, source: &Path) -> Result<&'v str> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| parse_error(source, line, format!("missing string field `{key}`")))
}

fn field_f64(v: &Value, key: &str, line: usize, source: &Path) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .filter(|x| x.is_finite())
        .ok_or_else(|| parse_error(source, line, format!("missing numeric field `{key}`")))
}

fn class_of(classes: &[String], name: &str, line: usize, source: &Path) -> Result<usize> {
    classes
        .iter()
        .position(|c| c == name)
        .map(|i| i + 1)
        .ok_or_else(|| parse_error(source, line, format!("unknown class `{name}`")))
}

fn json_string(s: &str) -> String {
    Value::from(s).to_string()
}

fn with_header(header: Option<&ArtifactHeader>, body: impl Iterator<Item = String>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.line());
        out.push('\n');
    }
    for line in body {
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Times are written with nine decimals.
pub fn encode_annotations(
    annotations: &[Annotation],
    classes: &[String],
    header: Option<&ArtifactHeader>,
) -> String {
    with_header(
        header,
        annotations.iter().map(|a| {
            format!(
                "{{\"video_id\":{},\"t_start\":{:.9},\"t_end\":{:.9},\"class\":{}}}",
                json_string(&a.video_id),
                a.t_start,
                a.t_end,
                json_string(&classes[a.class - 1])
            )
        }),
    )
}

pub fn parse_annotations(text: &str, classes: &[String], source: &Path) -> Result<Vec<Annotation>> {
    json_records(text, source)
        .map(|rec| {
            let (line, v) = rec?;
            let a = Annotation {
                video_id: field_str(&v, "video_id", line, source)?.to_string(),
                t_start: field_f64(&v, "t_start", line, source)?,
                t_end: field_f64(&v, "t_end", line, source)?,
                class: class_of(classes, field_str(&v, "class", line, source)?, line, source)?,
            };
            if a.t_start >= a.t_end {
                return Err(parse_error(source, line, "t_start must be less than t_end"));
            }
            Ok(a)
        })
        .collect()
}

pub fn encode_detections(
    detections: &[Detection],
    classes: &[String],
    header: Option<&ArtifactHeader>,
) -> String {
    with_header(
        header,
        detections.iter().map(|d| {
            format!(
                "{{\"video_id\":{},\"t_start\":{:.9},\"t_end\":{:.9},\"class\":{},\"score\":{:.9}}}",
                json_string(&d.video_id),
                d.t_start,
                d.t_end,
                json_string(&classes[d.class - 1]),
                d.score
            )
        }),
    )
}

pub fn parse_detections(text: &str, classes: &[String], source: &Path) -> Result<Vec<Detection>> {
    json_records(text, source)
        .map(|rec| {
            let (line, v) = rec?;
            let d = Detection {
                video_id: field_str(&v, "video_id", line, source)?.to_string(),
                t_start: field_f64(&v, "t_start", line, source)?,
                t_end: field_f64(&v, "t_end", line, source)?,
                class: class_of(classes, field_str(&v, "class", line, source)?, line, source)?,
                score: field_f64(&v, "score", line, source)?,
            };
            if d.t_start >= d.t_end {
                return Err(parse_error(source, line, "t_start must be less than t_end"));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(parse_error(source, line, "score must lie in [0, 1]"));
            }
            Ok(d)
        })
        .collect()
}

pub fn encode_metrics(records: &[StepRecord], header: Option<&ArtifactHeader>) -> String {
    with_header(
        header,
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records always serialize")),
    )
}

pub fn parse_metrics(text: &str, source: &Path) -> Result<Vec<StepRecord>> {
    json_records(text, source)
        .map(|rec| {
            let (line, v) = rec?;
            serde_json::from_value(v).map_err(|e| parse_error(source, line, e.to_string()))
        })
        .collect()
}

/// Header of a text artifact, if it has one.
pub fn read_header(text: &str) -> Option<ArtifactHeader> {
    let first = text.lines().find(|l| !l.trim().is_empty())?;
    let v: Value = serde_json::from_str(first).ok()?;
    serde_json::from_value(v.get("header")?.clone()).ok()
}

// ---------------------------------------------------------------- dataset directories

/// Writes `features.tadf`, `annotations.jsonl` and `classes.txt` into `dir`.
pub fn save_dataset(
    dir: &Path,
    ds: &Dataset,
    input_dim: usize,
    window_length: usize,
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    atomic_write(&dir.join(FEATURES_FILE), &encode_features(&ds.windows, input_dim, window_length)?)?;
    atomic_write(&dir.join(CLASSES_FILE), encode_classes(&ds.classes).as_bytes())?;
    atomic_write(
        &dir.join(ANNOTATIONS_FILE),
        encode_annotations(&ds.annotations, &ds.classes, header).as_bytes(),
    )
}

pub fn load_classes(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(CLASSES_FILE);
    parse_classes(&read_text(&path)?, &path)
}

pub fn load_annotations(path: &Path, classes: &[String]) -> Result<Vec<Annotation>> {
    parse_annotations(&read_text(path)?, classes, path)
}

pub fn load_features(path: &Path) -> Result<(Vec<Window>, usize, usize)> {
    decode_features(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a directory written by [`save_dataset`]. A missing annotation file means no annotations.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let classes = load_classes(dir)?;
    let (windows, _, _) = load_features(&dir.join(FEATURES_FILE))?;
    let ann = dir.join(ANNOTATIONS_FILE);
    let annotations = if ann.exists() {
        load_annotations(&ann, &classes)?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        classes,
        windows,
        annotations,
    })
}
