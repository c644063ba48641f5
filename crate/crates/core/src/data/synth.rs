//! Synthetic timeline generator.
//!
//! Each timeline draws a latent event vector per node from a normalized
//! random walk; video embeddings are noisy copies of their node's event
//! vector and release times fall inside per-node time windows. The
//! `release_overlap_fraction` knob jitters a share of release times into the
//! adjacent node's window so that sorting by time alone no longer solves the
//! task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelVector, TimelineSample, Video, MAX_NODES};
use crate::error::{Error, Result};

/// Window length per node, in seconds.
const NODE_WINDOW_SECS: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_timelines: usize,
    pub node_count_range: (usize, usize),
    pub videos_per_node_range: (usize, usize),
    pub embedding_dim: usize,
    pub event_step_scale: f64,
    pub video_noise_sigma: f64,
    pub text_noise_sigma: f64,
    pub release_overlap_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_timelines: 100,
            node_count_range: (2, MAX_NODES),
            videos_per_node_range: (1, 5),
            embedding_dim: 16,
            event_step_scale: 1.0,
            video_noise_sigma: 0.1,
            text_noise_sigma: 0.05,
            release_overlap_fraction: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (kmin, kmax) = self.node_count_range;
        if kmin > kmax || kmin < 2 || kmax > MAX_NODES {
            return Err(Error::Config(format!(
                "node_count_range ({kmin}, {kmax}) must satisfy 2 <= min <= max <= {MAX_NODES}"
            )));
        }
        let (vmin, vmax) = self.videos_per_node_range;
        if vmin > vmax || vmin < 1 {
            return Err(Error::Config(format!(
                "videos_per_node_range ({vmin}, {vmax}) must satisfy 1 <= min <= max"
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        for (name, v) in [
            ("event_step_scale", self.event_step_scale),
            ("video_noise_sigma", self.video_noise_sigma),
            ("text_noise_sigma", self.text_noise_sigma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.release_overlap_fraction) {
            return Err(Error::Config(format!(
                "release_overlap_fraction must be in [0, 1), got {}",
                self.release_overlap_fraction
            )));
        }
        Ok(())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn gauss_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            sigma * x
        })
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Deterministic per seed: the same config always yields a byte-identical
/// dataset.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.embedding_dim;
    let (kmin, kmax) = cfg.node_count_range;
    let (vmin, vmax) = cfg.videos_per_node_range;

    let mut samples = Vec::with_capacity(cfg.num_timelines);
    for t in 0..cfg.num_timelines {
        let k = rng.gen_range(kmin..=kmax);

        // Latent event vectors: normalized random walk.
        let mut events: Vec<Vec<f64>> = Vec::with_capacity(k);
        events.push(normalize(gauss_vec(&mut rng, dim, 1.0)));
        for _ in 1..k {
            let step = gauss_vec(&mut rng, dim, cfg.event_step_scale);
            events.push(normalize(add(events.last().unwrap(), &step)));
        }

        let mut videos = Vec::new();
        let mut labels = Vec::new();
        for (node, event) in events.iter().enumerate() {
            let m = rng.gen_range(vmin..=vmax);
            for j in 0..m {
                let noise = gauss_vec(&mut rng, dim, cfg.video_noise_sigma);
                let embedding = normalize(add(event, &noise));

                // Which node's time window the release time falls in.
                let window = if rng.gen::<f64>() < cfg.release_overlap_fraction && k > 1 {
                    if node == 0 {
                        1
                    } else if node == k - 1 {
                        k - 2
                    } else if rng.gen::<bool>() {
                        node + 1
                    } else {
                        node - 1
                    }
                } else {
                    node
                };
                let lo = window as i64 * NODE_WINDOW_SECS;
                let release_time = rng.gen_range(lo..lo + NODE_WINDOW_SECS);

                videos.push(Video {
                    id: format!("t{t:05}_n{:02}_v{j}", node + 1),
                    release_time,
                    embedding: Some(embedding),
                    title: None,
                });
                labels.push(node as u32 + 1);
            }
        }

        let node_text_embeddings = events
            .iter()
            .map(|e| normalize(add(e, &gauss_vec(&mut rng, dim, cfg.text_noise_sigma))))
            .collect();

        samples.push(TimelineSample {
            topic_id: format!("synthetic-{}-{t:05}", cfg.seed),
            videos,
            labels: LabelVector(labels),
            num_nodes: k,
            node_text_embeddings: Some(node_text_embeddings),
        });
    }

    Ok(Dataset {
        split_name: "synthetic".into(),
        embedding_dim: Some(dim),
        samples,
    })
}
