//! Synthetic untrimmed videos with smooth action boundaries.
//!
//! Every class and the background own a unit prototype vector. A video is a
//! layout of action segments separated by background gaps; each snippet's
//! clean feature is its region's prototype, except near a boundary at snippet
//! index `b` where it crossfades linearly:
//!
//! ```text
//! β(t) = clamp(0.5 + (t − b) / 2w, 0, 1)
//! clean(t) = (1 − β)·left + β·right
//! ```
//!
//! so snippets `b − w .. b + w` form the crossfade zone and snippet `b` itself
//! is the midpoint. Gaussian noise of standard deviation σ is then added.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const DEFAULT_SNIPPET_DURATION: f64 = 0.64;
const MAX_LAYOUT_ATTEMPTS: usize = 100;

/// One video: features, multi-hot label, and the snippet duration.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    pub features: Tensor2D,
    pub label: Vec<bool>,
    pub snippet_duration: f64,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.snippet_duration
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        positive_classes(&self.label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Input(format!(
                "video {} has {} snippets, need at least 2",
                self.video_id,
                self.len()
            )));
        }
        if !self.label.iter().any(|&y| y) {
            return Err(Error::Input(format!(
                "video {} has no positive class",
                self.video_id
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Input(format!(
                "video {} has non-finite features",
                self.video_id
            )));
        }
        Ok(())
    }
}

pub fn positive_classes(label: &[bool]) -> Vec<usize> {
    label
        .iter()
        .enumerate()
        .filter_map(|(c, &y)| y.then_some(c))
        .collect()
}

/// Annotated action interval, used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSegment {
    pub video_id: String,
    pub class_id: usize,
    pub t_start: f64,
    pub t_end: f64,
}

/// A labelled region of a layout in snippet indices, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    /// `None` for background.
    pub class_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub sequence: FeatureSequence,
    pub segments: Vec<GroundTruthSegment>,
    /// Background and action regions covering `0..T` in order.
    pub regions: Vec<Region>,
}

impl SyntheticVideo {
    /// Interior region boundaries as snippet indices.
    pub fn boundaries(&self) -> Vec<usize> {
        self.regions.iter().skip(1).map(|r| r.start).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub actions_min: usize,
    pub actions_max: usize,
    pub classes_per_video_max: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    /// Minimum background gap, including before the first and after the last
    /// action.
    pub gap_min: usize,
    pub crossfade: usize,
    pub noise: f64,
    pub train_videos: usize,
    pub test_videos: usize,
    pub snippet_duration: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            feature_dim: 32,
            t_min: 40,
            t_max: 120,
            actions_min: 1,
            actions_max: 3,
            classes_per_video_max: 2,
            segment_min: 6,
            segment_max: 24,
            gap_min: 6,
            crossfade: 3,
            noise: 0.15,
            train_videos: 60,
            test_videos: 30,
            snippet_duration: DEFAULT_SNIPPET_DURATION,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.feature_dim < 4 {
            return Err(Error::config("feature_dim", "need at least 4 dimensions"));
        }
        if self.t_min < 2 || self.t_min > self.t_max {
            return Err(Error::config(
                "t_min",
                format!("invalid length range {}..={}", self.t_min, self.t_max),
            ));
        }
        if self.actions_min < 1 || self.actions_min > self.actions_max {
            return Err(Error::config(
                "actions_min",
                format!(
                    "invalid action count range {}..={}",
                    self.actions_min, self.actions_max
                ),
            ));
        }
        if self.classes_per_video_max < 1 {
            return Err(Error::config("classes_per_video_max", "must be >= 1"));
        }
        if self.segment_min < 1 || self.segment_min > self.segment_max {
            return Err(Error::config(
                "segment_min",
                format!(
                    "invalid segment length range {}..={}",
                    self.segment_min, self.segment_max
                ),
            ));
        }
        // Crossfade zones of neighbouring boundaries must not overlap, and
        // the first/last zone must stay inside the video.
        if self.segment_min < 2 * self.crossfade {
            return Err(Error::config(
                "segment_min",
                format!("must be >= 2 * crossfade = {}", 2 * self.crossfade),
            ));
        }
        if self.gap_min < (2 * self.crossfade).max(1) {
            return Err(Error::config(
                "gap_min",
                format!("must be >= max(1, 2 * crossfade) = {}", (2 * self.crossfade).max(1)),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::config("noise", "must be >= 0"));
        }
        if self.train_videos < 1 {
            return Err(Error::config("train_videos", "must be >= 1"));
        }
        if self.test_videos < 1 {
            return Err(Error::config("test_videos", "must be >= 1"));
        }
        if !(self.snippet_duration > 0.0) {
            return Err(Error::config("snippet_duration", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    /// `classes + 1` unit rows; the last row is the background.
    pub prototypes: Tensor2D,
    pub train: Vec<SyntheticVideo>,
    pub test: Vec<SyntheticVideo>,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn prototypes(cfg: &GeneratorConfig, seed: u64) -> Tensor2D {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0]));
    let rows = cfg.classes + 1;
    let mut protos = Tensor2D::zeros(rows, cfg.feature_dim);
    for r in 0..rows {
        loop {
            let row = protos.row_mut(r);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 1e-6 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    protos
}

/// Samples a layout of `t_len` snippets, retrying up to 100 times.
pub fn sample_layout(
    cfg: &GeneratorConfig,
    t_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Region>> {
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        let n_actions = rng.random_range(cfg.actions_min..=cfg.actions_max);
        let n_classes = rng
            .random_range(1..=cfg.classes_per_video_max.min(cfg.classes))
            .min(n_actions);
        let lengths: Vec<usize> = (0..n_actions)
            .map(|_| rng.random_range(cfg.segment_min..=cfg.segment_max))
            .collect();
        let required = lengths.iter().sum::<usize>() + (n_actions + 1) * cfg.gap_min;
        if required > t_len {
            continue;
        }
        // distinct classes for the video, each used at least once
        let mut pool: Vec<usize> = (0..cfg.classes).collect();
        let mut chosen = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let i = rng.random_range(0..pool.len());
            chosen.push(pool.swap_remove(i));
        }
        let mut classes: Vec<usize> = (0..n_actions)
            .map(|i| {
                if i < n_classes {
                    chosen[i]
                } else {
                    chosen[rng.random_range(0..n_classes)]
                }
            })
            .collect();
        for i in (1..classes.len()).rev() {
            let j = rng.random_range(0..=i);
            classes.swap(i, j);
        }
        // spread the slack over the n + 1 gaps
        let slack = t_len - required;
        let mut cuts: Vec<usize> = (0..n_actions).map(|_| rng.random_range(0..=slack)).collect();
        cuts.sort_unstable();
        let mut gaps = Vec::with_capacity(n_actions + 1);
        let mut prev = 0;
        for &c in &cuts {
            gaps.push(cfg.gap_min + c - prev);
            prev = c;
        }
        gaps.push(cfg.gap_min + slack - prev);

        let mut regions = Vec::with_capacity(2 * n_actions + 1);
        let mut pos = 0;
        for (i, (&len, &class_id)) in lengths.iter().zip(&classes).enumerate() {
            regions.push(Region {
                start: pos,
                end: pos + gaps[i],
                class_id: None,
            });
            pos += gaps[i];
            regions.push(Region {
                start: pos,
                end: pos + len,
                class_id: Some(class_id),
            });
            pos += len;
        }
        regions.push(Region {
            start: pos,
            end: pos + gaps[n_actions],
            class_id: None,
        });
        debug_assert_eq!(pos + gaps[n_actions], t_len);
        return Ok(regions);
    }
    Err(Error::config(
        "t_min",
        format!("no feasible layout for T = {t_len} after {MAX_LAYOUT_ATTEMPTS} attempts"),
    ))
}

/// Weight on the right-hand prototype for snippet `t` near boundary `b`.
pub fn crossfade_weight(t: usize, boundary: usize, half_width: usize) -> f64 {
    if half_width == 0 {
        return if t >= boundary { 1.0 } else { 0.0 };
    }
    let offset = t as f64 - boundary as f64;
    (0.5 + offset / (2.0 * half_width as f64)).clamp(0.0, 1.0)
}

/// Noise-free features for a layout.
pub fn clean_features(regions: &[Region], protos: &Tensor2D, half_width: usize) -> Tensor2D {
    let t_len = regions.last().map_or(0, |r| r.end);
    let background = protos.rows() - 1;
    let proto_of = |r: &Region| r.class_id.unwrap_or(background);
    let mut out = Tensor2D::zeros(t_len, protos.cols());
    for (ri, region) in regions.iter().enumerate() {
        for t in region.start..region.end {
            let own = protos.row(proto_of(region));
            // a snippet is influenced by at most one boundary
            let (left, right, beta) = if ri > 0 && t < region.start + half_width {
                let prev = protos.row(proto_of(&regions[ri - 1]));
                (prev, own, crossfade_weight(t, region.start, half_width))
            } else if ri + 1 < regions.len() && t + half_width >= region.end {
                let next = protos.row(proto_of(&regions[ri + 1]));
                (own, next, crossfade_weight(t, region.end, half_width))
            } else {
                (own, own, 0.0)
            };
            for (o, (&a, &b)) in out.row_mut(t).iter_mut().zip(left.iter().zip(right)) {
                *o = (1.0 - beta) * a + beta * b;
            }
        }
    }
    out
}

/// Generates one video from its own seed.
pub fn generate_video(
    cfg: &GeneratorConfig,
    protos: &Tensor2D,
    video_id: String,
    seed: u64,
) -> Result<SyntheticVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_len = rng.random_range(cfg.t_min..=cfg.t_max);
    let regions = sample_layout(cfg, t_len, &mut rng)?;
    let mut features = clean_features(&regions, protos, cfg.crossfade);
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::config("noise", format!("{e}")))?;
        for v in features.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut label = vec![false; cfg.classes];
    let mut segments = Vec::new();
    for r in &regions {
        if let Some(c) = r.class_id {
            label[c] = true;
            segments.push(GroundTruthSegment {
                video_id: video_id.clone(),
                class_id: c,
                t_start: r.start as f64 * cfg.snippet_duration,
                t_end: r.end as f64 * cfg.snippet_duration,
            });
        }
    }
    Ok(SyntheticVideo {
        sequence: FeatureSequence {
            video_id,
            features,
            label,
            snippet_duration: cfg.snippet_duration,
        },
        segments,
        regions,
    })
}

pub fn video_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix_seed(seed, &[split.tag(), index as u64])
}

pub fn video_id(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.name())
}

/// Generates both splits; deterministic given `(cfg, seed)`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let protos = prototypes(cfg, seed);
    let split = |split: Split, count: usize| -> Result<Vec<SyntheticVideo>> {
        (0..count)
            .map(|i| generate_video(cfg, &protos, video_id(split, i), video_seed(seed, split, i)))
            .collect()
    };
    Ok(SyntheticDataset {
        config: cfg.clone(),
        seed,
        train: split(Split::Train, cfg.train_videos)?,
        test: split(Split::Test, cfg.test_videos)?,
        prototypes: protos,
    })
}
