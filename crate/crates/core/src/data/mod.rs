//! Domain types for video timelines, dataset IO, validation, statistics,
//! and a synthetic timeline generator.

mod io;
mod synth;

pub use io::{parse_dataset, parse_predictions, write_dataset, write_predictions};
pub use synth::{generate_synthetic, GenConfig};

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of nodes a timeline can have.
pub const MAX_NODES: usize = 24;

/// One video: an opaque id, a release timestamp, and (unless the dataset is
/// metrics-only) a fixed-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    #[serde(default)]
    pub release_time: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

/// Per-video node-ID assignment, aligned with the sample's stored video order.
/// IDs are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(pub Vec<u32>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for LabelVector {
    fn from(v: Vec<u32>) -> Self {
        LabelVector(v)
    }
}

/// One news topic: its videos, ground-truth node labels, and optionally a
/// text embedding per node (teacher-only input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSample {
    pub topic_id: String,
    pub videos: Vec<Video>,
    pub labels: LabelVector,
    pub num_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_text_embeddings: Option<Vec<Vec<f64>>>,
}

impl TimelineSample {
    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }
}

/// A named split of timeline samples sharing one embedding dimension.
/// `embedding_dim == None` marks a metrics-only dataset (labels without
/// features), as produced by the bare id-list format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(rename = "split", default)]
    pub split_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    pub samples: Vec<TimelineSample>,
}

impl Dataset {
    pub fn metrics_only(&self) -> bool {
        self.embedding_dim.is_none()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A single invariant violation found by [`validate_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.rule)
    }
}

fn violation(rule: impl Into<String>) -> Violation {
    Violation { rule: rule.into() }
}

/// Checks the partition invariants of one sample. Returns an empty list iff
/// the sample is valid; each entry names the violated rule and the offending
/// index.
pub fn validate_sample(s: &TimelineSample) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = s.num_nodes;

    if !(2..=MAX_NODES).contains(&k) {
        out.push(violation(format!(
            "K out of range: num_nodes = {k}, expected 2..={MAX_NODES}"
        )));
    }
    if s.labels.len() != s.videos.len() {
        out.push(violation(format!(
            "label count {} does not match video count {}",
            s.labels.len(),
            s.videos.len()
        )));
    }

    let mut seen_ids = HashSet::new();
    for (i, v) in s.videos.iter().enumerate() {
        if !seen_ids.insert(v.id.as_str()) {
            out.push(violation(format!(
                "duplicate video id `{}` at index {i}",
                v.id
            )));
        }
    }

    let mut node_counts = vec![0usize; k];
    for (i, &a) in s.labels.ids().iter().enumerate() {
        if a < 1 || a as usize > k {
            out.push(violation(format!(
                "label {a} at index {i} outside 1..={k}"
            )));
        } else {
            node_counts[a as usize - 1] += 1;
        }
    }
    for (node, &count) in node_counts.iter().enumerate() {
        if count == 0 {
            out.push(violation(format!("node {} empty", node + 1)));
        }
    }

    if let Some(texts) = &s.node_text_embeddings {
        if texts.len() != k {
            out.push(violation(format!(
                "node_text_embeddings has {} entries, expected K = {k}",
                texts.len()
            )));
        }
    }

    out
}

/// Validates every sample and the dataset-level embedding dimension.
pub fn validate_dataset(d: &Dataset) -> Result<()> {
    for s in &d.samples {
        let violations = validate_sample(s);
        if let Some(v) = violations.first() {
            return Err(Error::Validation {
                topic_id: s.topic_id.clone(),
                message: v.rule.clone(),
            });
        }
        for video in &s.videos {
            match (&video.embedding, d.embedding_dim) {
                (Some(e), Some(dim)) if e.len() != dim => {
                    return Err(Error::Dimension(format!(
                        "video `{}` in `{}` has embedding length {}, dataset declares {}",
                        video.id,
                        s.topic_id,
                        e.len(),
                        dim
                    )));
                }
                (Some(e), None) => {
                    return Err(Error::Dimension(format!(
                        "video `{}` in `{}` carries an embedding of length {} but the dataset declares none",
                        video.id,
                        s.topic_id,
                        e.len()
                    )));
                }
                (None, Some(_)) => {
                    return Err(Error::Dimension(format!(
                        "video `{}` in `{}` is missing its embedding",
                        video.id, s.topic_id
                    )));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Stable release-time ordering: ascending `release_time`, ties broken by
/// ascending video id, then by original index. Returns the permutation of
/// indices; `perm[rank] = original index`.
pub fn order_videos_by_release(s: &TimelineSample) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.videos.len()).collect();
    idx.sort_by(|&a, &b| {
        let va = &s.videos[a];
        let vb = &s.videos[b];
        va.release_time
            .cmp(&vb.release_time)
            .then_with(|| va.id.cmp(&vb.id))
            .then(a.cmp(&b))
    });
    idx
}

/// Three integer histograms plus totals, mirroring the dataset distribution
/// plots: videos per node, nodes per timeline, videos per timeline.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_timelines: usize,
    pub num_nodes: usize,
    pub num_videos: usize,
    pub videos_per_node: BTreeMap<usize, usize>,
    pub nodes_per_timeline: BTreeMap<usize, usize>,
    pub videos_per_timeline: BTreeMap<usize, usize>,
}

pub fn dataset_stats(d: &Dataset) -> StatsReport {
    let mut r = StatsReport::default();
    for s in &d.samples {
        r.num_timelines += 1;
        r.num_nodes += s.num_nodes;
        r.num_videos += s.num_videos();
        *r.nodes_per_timeline.entry(s.num_nodes).or_default() += 1;
        *r.videos_per_timeline.entry(s.num_videos()).or_default() += 1;
        let mut counts = vec![0usize; s.num_nodes];
        for &a in s.labels.ids() {
            if a >= 1 && (a as usize) <= s.num_nodes {
                counts[a as usize - 1] += 1;
            }
        }
        for c in counts {
            *r.videos_per_node.entry(c).or_default() += 1;
        }
    }
    r
}

/// Randomly partitions a dataset into train/val/test by the given ratios.
/// Deterministic per seed; every sample lands in exactly one split.
pub fn split_dataset(
    d: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }

    let n = d.samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    // Largest-remainder apportionment keeps each split within one sample of
    // its exact share.
    let targets = [a, b, c].map(|r| r * n as f64);
    let mut counts = targets.map(|t| t.floor() as usize);
    let mut rem: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let fi = targets[i] - targets[i].floor();
        let fj = targets[j] - targets[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in &order {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }

    let make = |name: &str, ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Dataset {
            split_name: name.to_string(),
            embedding_dim: d.embedding_dim,
            samples: ids.iter().map(|&i| d.samples[i].clone()).collect(),
        }
    };
    let train = make("train", &idx[..counts[0]]);
    let val = make("val", &idx[counts[0]..counts[0] + counts[1]]);
    let test = make("test", &idx[counts[0] + counts[1]..]);
    Ok((train, val, test))
}
