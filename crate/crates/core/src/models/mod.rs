//! The three baseline architectures (V-Transformer, Tri-Transformer, and the
//! distilled Tri-Transformer), their losses, inference, and the empty-node
//! post-processing.

mod net;

pub use net::{
    cross_entropy_graph, distill_loss_graph, encoder, forward, BoundParams, GraphForward,
};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{order_videos_by_release, LabelVector, TimelineSample, MAX_NODES};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    V,
    Tri,
    TriDistill,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::V => f.write_str("v"),
            ModelKind::Tri => f.write_str("tri"),
            ModelKind::TriDistill => f.write_str("tri_distill"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_kind: ModelKind,
    /// Input video embedding dimension.
    pub input_dim: usize,
    pub d_model: usize,
    pub num_heads: usize,
    /// Layers per transformer encoder.
    pub num_layers: usize,
    pub feedforward_dim: usize,
    pub dropout_p: f64,
    pub max_classes: usize,
    pub use_video_pe: bool,
    /// Tri only: enable the node-only and video-only encoders.
    pub use_encoders_2_3: bool,
    /// Teacher variant: project node text embeddings into the node tokens.
    pub use_text: bool,
    /// Text embedding dimension (teacher only).
    pub d_text: Option<usize>,
    pub ce_weight: f64,
    pub distill_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            model_kind: ModelKind::Tri,
            input_dim: 16,
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            feedforward_dim: 128,
            dropout_p: 0.1,
            max_classes: MAX_NODES,
            use_video_pe: true,
            use_encoders_2_3: true,
            use_text: false,
            d_text: None,
            ce_weight: 1.0,
            distill_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_classes != MAX_NODES {
            return Err(Error::Config(format!(
                "max_classes is fixed at {MAX_NODES}, got {}",
                self.max_classes
            )));
        }
        if self.d_model == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.ce_weight < 0.0 || self.distill_weight < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.use_text && self.d_text.is_none() {
            return Err(Error::Config("use_text requires d_text".into()));
        }
        Ok(())
    }

    pub fn is_tri(&self) -> bool {
        matches!(self.model_kind, ModelKind::Tri | ModelKind::TriDistill)
    }
}

/// Named parameter tensors for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data)
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let mut t: BTreeMap<String, Tensor> = BTreeMap::new();
        // Insertion order is fixed so the RNG stream (and thus the init) is
        // reproducible; BTreeMap ordering only affects iteration.
        t.insert("input_proj.w".into(), xavier(&mut rng, cfg.input_dim, d));
        t.insert("input_proj.b".into(), Tensor::zeros(&[d]));

        let encoders: &[&str] = match cfg.model_kind {
            ModelKind::V => &["enc1"],
            ModelKind::Tri | ModelKind::TriDistill => {
                if cfg.use_encoders_2_3 {
                    &["enc1", "enc2", "enc3"]
                } else {
                    &["enc1"]
                }
            }
        };
        for enc in encoders {
            for l in 0..cfg.num_layers {
                let p = format!("{enc}.l{l}");
                for w in ["wq", "wk", "wv", "wo"] {
                    t.insert(format!("{p}.attn.{w}"), xavier(&mut rng, d, d));
                }
                t.insert(format!("{p}.ffn.w1"), xavier(&mut rng, d, cfg.feedforward_dim));
                t.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.feedforward_dim]));
                t.insert(format!("{p}.ffn.w2"), xavier(&mut rng, cfg.feedforward_dim, d));
                t.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
                t.insert(format!("{p}.ln1.g"), Tensor::new(vec![d], vec![1.0; d]));
                t.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
                t.insert(format!("{p}.ln2.g"), Tensor::new(vec![d], vec![1.0; d]));
                t.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
            }
        }

        match cfg.model_kind {
            ModelKind::V => {
                t.insert("head.w".into(), xavier(&mut rng, d, MAX_NODES));
                t.insert("head.b".into(), Tensor::zeros(&[MAX_NODES]));
            }
            ModelKind::Tri | ModelKind::TriDistill => {
                t.insert("node_emb".into(), xavier(&mut rng, MAX_NODES, d));
                t.insert("node_pe".into(), xavier(&mut rng, MAX_NODES, d));
                t.insert("score.wq".into(), xavier(&mut rng, d, d));
                t.insert("score.wk".into(), xavier(&mut rng, d, d));
                if cfg.use_text {
                    let d_text = cfg.d_text.unwrap();
                    t.insert("text_proj.w".into(), xavier(&mut rng, d_text, d));
                }
            }
        }
        Ok(ModelParams { tensors: t })
    }
}

/// Execution mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Model-ready inputs for one sample: video embeddings in release-time
/// order, the applied permutation, and the labels in the same order.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub embeddings: Tensor,
    /// `perm[rank] = original index`.
    pub perm: Vec<usize>,
    pub labels_ordered: Vec<u32>,
    pub text: Option<Tensor>,
}

impl ModelInput {
    pub fn from_sample(s: &TimelineSample) -> Result<ModelInput> {
        let perm = order_videos_by_release(s);
        let n = s.videos.len();
        let dim = s
            .videos
            .first()
            .and_then(|v| v.embedding.as_ref())
            .map(|e| e.len())
            .ok_or_else(|| {
                Error::Input(format!(
                    "sample `{}` has no video embeddings (metrics-only data)",
                    s.topic_id
                ))
            })?;
        let mut data = Vec::with_capacity(n * dim);
        for &i in &perm {
            let e = s.videos[i].embedding.as_ref().ok_or_else(|| {
                Error::Input(format!(
                    "video `{}` in `{}` has no embedding",
                    s.videos[i].id, s.topic_id
                ))
            })?;
            data.extend_from_slice(e);
        }
        let labels_ordered = perm.iter().map(|&i| s.labels.ids()[i]).collect();
        let text = s.node_text_embeddings.as_ref().map(|rows| {
            let d_text = rows.first().map_or(0, |r| r.len());
            let data: Vec<f64> = rows.iter().flatten().copied().collect();
            Tensor::matrix(rows.len(), d_text, data)
        });
        Ok(ModelInput {
            embeddings: Tensor::matrix(n, dim, data),
            perm,
            labels_ordered,
            text,
        })
    }

    /// Maps labels predicted in release order back to the sample's stored
    /// video order.
    pub fn restore_order(&self, ordered: &LabelVector) -> LabelVector {
        let mut out = vec![0u32; ordered.len()];
        for (rank, &orig) in self.perm.iter().enumerate() {
            out[orig] = ordered.ids()[rank];
        }
        LabelVector(out)
    }
}

/// Detached forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[N, 24]` assignment probabilities.
    pub scores: Tensor,
    pub node_reps: Option<Tensor>,
    pub video_reps: Option<Tensor>,
}

fn run_forward(
    sample: &TimelineSample,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    text: Option<&Tensor>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let input = ModelInput::from_sample(sample)?;
    let mut g = match mode {
        Mode::Train { dropout_seed } => Graph::new(true, dropout_seed),
        Mode::Eval => Graph::inference(),
    };
    let bound = BoundParams::bind(&mut g, params, false);
    let emb = g.constant(input.embeddings.clone());
    let fwd = forward(&mut g, &bound, emb, cfg, text)?;
    Ok(ForwardOutput {
        scores: g.value(fwd.scores).clone(),
        node_reps: fwd.node_reps.map(|id| g.value(id).clone()),
        video_reps: fwd.video_reps.map(|id| g.value(id).clone()),
    })
}

/// V-Transformer forward over one sample (videos presented in release-time
/// order internally).
pub fn v_transformer_forward(
    sample: &TimelineSample,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    if !matches!(cfg.model_kind, ModelKind::V) {
        return Err(Error::Config(format!(
            "v_transformer_forward called with model_kind {}",
            cfg.model_kind
        )));
    }
    run_forward(sample, params, cfg, mode, None)
}

/// Tri-Transformer forward; pass `text_embeddings` for the teacher variant.
pub fn tri_transformer_forward(
    sample: &TimelineSample,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    text_embeddings: Option<&Tensor>,
) -> Result<ForwardOutput> {
    if !cfg.is_tri() {
        return Err(Error::Config(format!(
            "tri_transformer_forward called with model_kind {}",
            cfg.model_kind
        )));
    }
    run_forward(sample, params, cfg, mode, text_embeddings)
}

/// Mean over videos of `-ln p(label)` given probability rows.
pub fn cross_entropy_loss(scores: &Tensor, labels: &LabelVector) -> Result<f64> {
    if scores.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "scores have {} rows but {} labels given",
            scores.rows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &a) in labels.ids().iter().enumerate() {
        if a < 1 || a as usize > scores.cols() {
            return Err(Error::Input(format!(
                "label {a} outside 1..={}",
                scores.cols()
            )));
        }
        total -= scores.at(i, a as usize - 1).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between student and teacher first-encoder
/// representations (node rows then video rows).
pub fn distillation_loss(student: &ForwardOutput, teacher: &ForwardOutput) -> Result<f64> {
    let pair = |a: &Option<Tensor>, b: &Option<Tensor>, what: &str| {
        match (a, b) {
            (Some(a), Some(b)) if a.shape() == b.shape() => Ok((a.clone(), b.clone())),
            (Some(a), Some(b)) => Err(Error::Shape(format!(
                "{what}: student {:?} vs teacher {:?}",
                a.shape(),
                b.shape()
            ))),
            _ => Err(Error::Input(format!(
                "{what} representations missing (not a tri model output?)"
            ))),
        }
    };
    let (sn, tn) = pair(&student.node_reps, &teacher.node_reps, "node reps")?;
    let (sv, tv) = pair(&student.video_reps, &teacher.video_reps, "video reps")?;
    let count = (sn.len() + sv.len()) as f64;
    let sq = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };
    Ok((sq(&sn, &tn) + sq(&sv, &tv)) / count)
}

/// Per-video argmax node ID (1-based); ties break toward the smaller ID.
pub fn predict_assignments(scores: &Tensor) -> LabelVector {
    let cols = scores.cols();
    let ids = (0..scores.rows())
        .map(|i| {
            let mut best = 0;
            for j in 1..cols {
                if scores.at(i, j) > scores.at(i, best) {
                    best = j;
                }
            }
            best as u32 + 1
        })
        .collect();
    LabelVector(ids)
}

/// Renumbers the distinct predicted IDs by rank so the timeline is
/// contiguous (1..K̂), skipping empty nodes.
pub fn postprocess_skip_empty(raw: &LabelVector) -> LabelVector {
    let mut distinct: Vec<u32> = raw.ids().to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let rank = |a: u32| distinct.iter().position(|&x| x == a).unwrap() as u32 + 1;
    LabelVector(raw.ids().iter().map(|&a| rank(a)).collect())
}
