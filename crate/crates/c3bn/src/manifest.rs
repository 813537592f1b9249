//! JSON-lines dataset manifests.
//!
//! One file per split (`train.jsonl`, `test.jsonl`). The first line is a
//! header record, every following line describes one video and points at
//! its feature file relative to the manifest directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use c3bn_core::synth::{FeatureSequence, GeneratorConfig, GroundTruthSegment, SyntheticDataset, SyntheticVideo};

use crate::error::{CliError, Result};
use crate::formats::{decode_features, encode_features, write_atomic};

pub const MANIFEST_FORMAT: &str = "c3bn-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    pub classes: usize,
    pub feature_dim: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub actions_min: usize,
    pub actions_max: usize,
    pub classes_per_video_max: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub gap_min: usize,
    pub crossfade: usize,
    pub noise: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub snippet_duration: f64,
}

impl From<&GeneratorConfig> for GeneratorEcho {
    fn from(c: &GeneratorConfig) -> Self {
        Self {
            classes: c.classes,
            feature_dim: c.feature_dim,
            t_min: c.t_min,
            t_max: c.t_max,
            actions_min: c.actions_min,
            actions_max: c.actions_max,
            classes_per_video_max: c.classes_per_video_max,
            segment_min: c.segment_min,
            segment_max: c.segment_max,
            gap_min: c.gap_min,
            crossfade: c.crossfade,
            noise: c.noise,
            train_videos: c.train_videos,
            test_videos: c.test_videos,
            snippet_duration: c.snippet_duration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub format: String,
    pub version: u32,
    pub split: String,
    pub classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub videos: usize,
    pub generator: GeneratorEcho,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub class_id: usize,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub kind: String,
    pub id: String,
    pub t: usize,
    pub d: usize,
    /// Multi-hot over the action classes.
    pub label: Vec<u8>,
    pub snippet_duration: f64,
    pub path: String,
    pub sha256: String,
    pub segments: Vec<SegmentRecord>,
}

const HEADER_KEYS: &[&str] = &[
    "kind", "format", "version", "split", "classes", "feature_dim", "seed", "videos", "generator",
];
const VIDEO_KEYS: &[&str] = &[
    "kind", "id", "t", "d", "label", "snippet_duration", "path", "sha256", "segments",
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

fn write_split(dir: &Path, split: &str, ds: &SyntheticDataset, videos: &[SyntheticVideo]) -> Result<PathBuf> {
    let header = Header {
        kind: "header".into(),
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        split: split.into(),
        classes: ds.config.classes,
        feature_dim: ds.config.feature_dim,
        seed: ds.seed,
        videos: videos.len(),
        generator: (&ds.config).into(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for v in videos {
        let seq = &v.sequence;
        let rel = format!("features/{}.bin", seq.video_id);
        let bytes = encode_features(&seq.features);
        write_atomic(&dir.join(&rel), &bytes)?;
        let rec = VideoRecord {
            kind: "video".into(),
            id: seq.video_id.clone(),
            t: seq.len(),
            d: seq.features.cols(),
            label: seq.label.iter().map(|&b| b as u8).collect(),
            snippet_duration: seq.snippet_duration,
            path: rel,
            sha256: sha256_hex(&bytes),
            segments: v
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    class_id: s.class_id,
                    t_start: s.t_start,
                    t_end: s.t_end,
                })
                .collect(),
        };
        text.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        text.push('\n');
    }
    let path = manifest_path(dir, split);
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Writes feature files and both split manifests under `dir`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<(PathBuf, PathBuf)> {
    Ok((
        write_split(dir, "train", ds, &ds.train)?,
        write_split(dir, "test", ds, &ds.test)?,
    ))
}

/// One loaded split: training inputs plus evaluation-only ground truth.
#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub header: Header,
    pub videos: Vec<FeatureSequence>,
    pub segments: Vec<GroundTruthSegment>,
}

impl LoadedSplit {
    pub fn find(&self, id: &str) -> Option<&FeatureSequence> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn segments_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a GroundTruthSegment> + 'a {
        self.segments.iter().filter(move |s| s.video_id == id)
    }
}

fn warn_unknown(value: &serde_json::Value, known: &[&str], line: usize, path: &Path) {
    if let Some(obj) = value.as_object() {
        for k in obj.keys().filter(|k| !known.contains(&k.as_str())) {
            log::warn!("{}:{line}: ignoring unknown field {k:?}", path.display());
        }
    }
}

fn check_video(rec: &VideoRecord, header: &Header, base: &Path) -> std::result::Result<(FeatureSequence, Vec<GroundTruthSegment>), String> {
    if rec.label.len() != header.classes {
        return Err(format!("label has {} entries, expected {}", rec.label.len(), header.classes));
    }
    if rec.label.iter().any(|&b| b > 1) {
        return Err("label entries must be 0 or 1".into());
    }
    let path = base.join(&rec.path);
    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let digest = sha256_hex(&bytes);
    if digest != rec.sha256 {
        return Err(format!("checksum mismatch for {}: {digest} != {}", path.display(), rec.sha256));
    }
    let features = decode_features(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
    if features.shape() != (rec.t, rec.d) {
        return Err(format!(
            "feature shape {:?} does not match declared ({}, {})",
            features.shape(),
            rec.t,
            rec.d
        ));
    }
    if rec.d != header.feature_dim {
        return Err(format!("feature dim {} != manifest {}", rec.d, header.feature_dim));
    }
    let seq = FeatureSequence {
        video_id: rec.id.clone(),
        features,
        label: rec.label.iter().map(|&b| b == 1).collect(),
        snippet_duration: rec.snippet_duration,
    };
    seq.validate().map_err(|e| e.to_string())?;
    let extent = seq.duration();
    let mut present = BTreeSet::new();
    let segments: Vec<GroundTruthSegment> = rec
        .segments
        .iter()
        .map(|s| {
            if s.class_id >= header.classes || !(0.0 <= s.t_start && s.t_start < s.t_end && s.t_end <= extent + 1e-9) {
                return Err(format!("invalid segment {s:?}"));
            }
            present.insert(s.class_id);
            Ok(GroundTruthSegment {
                video_id: rec.id.clone(),
                class_id: s.class_id,
                t_start: s.t_start,
                t_end: s.t_end,
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    let positive: BTreeSet<usize> = c3bn_core::synth::positive_classes(&seq.label).into_iter().collect();
    if !segments.is_empty() && positive != present {
        return Err(format!("label classes {positive:?} differ from segment classes {present:?}"));
    }
    Ok((seq, segments))
}

pub fn load_dataset(manifest: &Path) -> Result<LoadedSplit> {
    let text = fs::read_to_string(manifest).map_err(|e| CliError::io(manifest, e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, e: &dyn std::fmt::Display| {
        CliError::Format(format!("{}:{}: {e}", manifest.display(), line + 1))
    };
    let (hl, first) = lines
        .next()
        .ok_or_else(|| CliError::Format(format!("{}: empty manifest", manifest.display())))?;
    let value: serde_json::Value = serde_json::from_str(first).map_err(|e| bad(hl, &e))?;
    warn_unknown(&value, HEADER_KEYS, hl + 1, manifest);
    let header: Header = serde_json::from_value(value).map_err(|e| bad(hl, &e))?;
    if header.kind != "header" || header.format != MANIFEST_FORMAT {
        return Err(bad(hl, &"first record is not a manifest header"));
    }
    if header.version != MANIFEST_VERSION {
        return Err(bad(hl, &format!("unsupported manifest version {}", header.version)));
    }
    let mut ids = BTreeSet::new();
    let mut videos = Vec::new();
    let mut segments = Vec::new();
    for (ln, line) in lines {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(ln, &e))?;
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_owned);
        warn_unknown(&value, VIDEO_KEYS, ln + 1, manifest);
        let rec: VideoRecord = serde_json::from_value(value).map_err(|e| match &id {
            Some(id) => CliError::load(id, format!("bad record: {e}")),
            None => bad(ln, &e),
        })?;
        if !ids.insert(rec.id.clone()) {
            return Err(CliError::load(&rec.id, "duplicate video id"));
        }
        let (seq, segs) = check_video(&rec, &header, base).map_err(|e| CliError::load(&rec.id, e))?;
        videos.push(seq);
        segments.extend(segs);
    }
    if videos.len() != header.videos {
        log::warn!(
            "{}: header declares {} videos, found {}",
            manifest.display(),
            header.videos,
            videos.len()
        );
    }
    Ok(LoadedSplit {
        header,
        videos,
        segments,
    })
}
