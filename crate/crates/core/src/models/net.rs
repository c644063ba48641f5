//! Graph construction for the transformer encoders, pointer-style scoring,
//! and losses.

use std::collections::BTreeMap;

use super::{ModelConfig, ModelKind, ModelParams};
use crate::data::MAX_NODES;
use crate::error::{Error, Result};
use crate::numerics::{sinusoidal_pe, Graph, NodeId, Tensor};

/// Parameter tensors bound into a graph, keyed by name.
pub struct BoundParams {
    pub nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Binds every parameter as a differentiable leaf (training) or a
    /// constant (inference).
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> BoundParams {
        let nodes = params
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), id)
            })
            .collect();
        BoundParams { nodes }
    }

    fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing model parameter `{name}`")))
    }
}

/// Forward results still attached to the graph.
pub struct GraphForward {
    /// `[N, 24]` assignment probabilities, one row per video.
    pub scores: NodeId,
    /// First-encoder node representations `[24, d_model]` (tri only).
    pub node_reps: Option<NodeId>,
    /// First-encoder video representations `[N, d_model]` (tri only).
    pub video_reps: Option<NodeId>,
}

fn multi_head_attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let q = g.matmul(x, p.get(&format!("{prefix}.wq"))?)?;
    let k = g.matmul(x, p.get(&format!("{prefix}.wk"))?)?;
    let v = g.matmul(x, p.get(&format!("{prefix}.wv"))?)?;
    let head_dim = cfg.d_model / cfg.num_heads;
    let mut merged: Option<NodeId> = None;
    for h in 0..cfg.num_heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let logits = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(logits, 1.0 / (head_dim as f64).sqrt());
        let attn = g.softmax(scaled)?;
        let out = g.matmul(attn, vh)?;
        merged = Some(match merged {
            None => out,
            Some(m) => g.concat_cols(m, out)?,
        });
    }
    g.matmul(merged.unwrap(), p.get(&format!("{prefix}.wo"))?)
}

fn layer_norm_affine(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let normed = g.layer_norm(x);
    let scaled = g.mul_row(normed, p.get(&format!("{prefix}.g"))?)?;
    g.add_row(scaled, p.get(&format!("{prefix}.b"))?)
}

/// A stack of post-norm transformer layers.
pub fn encoder(
    g: &mut Graph,
    p: &BoundParams,
    enc: &str,
    mut x: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    for l in 0..cfg.num_layers {
        let prefix = format!("{enc}.l{l}");
        let attn = multi_head_attention(g, p, &format!("{prefix}.attn"), x, cfg)?;
        let attn = g.dropout(attn, cfg.dropout_p)?;
        let res = g.add(x, attn)?;
        x = layer_norm_affine(g, p, &format!("{prefix}.ln1"), res)?;

        let h1 = g.matmul(x, p.get(&format!("{prefix}.ffn.w1"))?)?;
        let h1 = g.add_row(h1, p.get(&format!("{prefix}.ffn.b1"))?)?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, p.get(&format!("{prefix}.ffn.w2"))?)?;
        let h2 = g.add_row(h2, p.get(&format!("{prefix}.ffn.b2"))?)?;
        let h2 = g.dropout(h2, cfg.dropout_p)?;
        let res = g.add(x, h2)?;
        x = layer_norm_affine(g, p, &format!("{prefix}.ln2"), res)?;
    }
    Ok(x)
}

fn project_videos(
    g: &mut Graph,
    p: &BoundParams,
    embeddings: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let x = g.matmul(embeddings, p.get("input_proj.w")?)?;
    let x = g.add_row(x, p.get("input_proj.b")?)?;
    if cfg.use_video_pe {
        let n = g.value(x).rows();
        let pe = sinusoidal_pe(n, cfg.d_model)?;
        let pe = g.constant(pe);
        g.add(x, pe)
    } else {
        Ok(x)
    }
}

/// Encoder over release-time-ordered video tokens with a 24-way classifier
/// head.
pub fn v_forward(
    g: &mut Graph,
    p: &BoundParams,
    embeddings: NodeId,
    cfg: &ModelConfig,
) -> Result<GraphForward> {
    let x = project_videos(g, p, embeddings, cfg)?;
    let h = encoder(g, p, "enc1", x, cfg)?;
    let logits = g.matmul(h, p.get("head.w")?)?;
    let logits = g.add_row(logits, p.get("head.b")?)?;
    let scores = g.softmax(logits)?;
    Ok(GraphForward {
        scores,
        node_reps: None,
        video_reps: None,
    })
}

/// Joint node+video encoder, optional node-only and video-only encoders,
/// and pointer-style attention of videos over the 24 node tokens.
///
/// `text` carries one embedding per ground-truth node (teacher input); it is
/// projected and added to the first K node embeddings.
pub fn tri_forward(
    g: &mut Graph,
    p: &BoundParams,
    embeddings: NodeId,
    cfg: &ModelConfig,
    text: Option<&Tensor>,
) -> Result<GraphForward> {
    let mut node_tokens = p.get("node_emb")?;
    if let Some(text) = text {
        let k = text.rows();
        if k > MAX_NODES {
            return Err(Error::Input(format!(
                "{k} node text embeddings exceed the {MAX_NODES}-node cap"
            )));
        }
        let text = g.constant(text.clone());
        let proj = g.matmul(text, p.get("text_proj.w")?)?;
        let padded = if k < MAX_NODES {
            let zeros = g.constant(Tensor::zeros(&[MAX_NODES - k, cfg.d_model]));
            g.concat_rows(proj, zeros)?
        } else {
            proj
        };
        node_tokens = g.add(node_tokens, padded)?;
    }
    // Node-order positional encoding: a learned 24-entry table.
    let node_tokens = g.add(node_tokens, p.get("node_pe")?)?;

    let video_tokens = project_videos(g, p, embeddings, cfg)?;
    let n = g.value(video_tokens).rows();

    let seq = g.concat_rows(node_tokens, video_tokens)?;
    let h = encoder(g, p, "enc1", seq, cfg)?;
    let node_reps = g.slice_rows(h, 0, MAX_NODES)?;
    let video_reps = g.slice_rows(h, MAX_NODES, MAX_NODES + n)?;

    let (node_final, video_final) = if cfg.use_encoders_2_3 {
        (
            encoder(g, p, "enc2", node_reps, cfg)?,
            encoder(g, p, "enc3", video_reps, cfg)?,
        )
    } else {
        (node_reps, video_reps)
    };

    let q = g.matmul(video_final, p.get("score.wq")?)?;
    let k = g.matmul(node_final, p.get("score.wk")?)?;
    let logits = g.matmul_nt(q, k)?;
    let scaled = g.scale(logits, 1.0 / (cfg.d_model as f64).sqrt());
    let scores = g.softmax(scaled)?;

    Ok(GraphForward {
        scores,
        node_reps: Some(node_reps),
        video_reps: Some(video_reps),
    })
}

pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    embeddings: NodeId,
    cfg: &ModelConfig,
    text: Option<&Tensor>,
) -> Result<GraphForward> {
    match cfg.model_kind {
        ModelKind::V => v_forward(g, p, embeddings, cfg),
        ModelKind::Tri | ModelKind::TriDistill => tri_forward(g, p, embeddings, cfg, text),
    }
}

/// Mean over videos of `-ln p(label)`. Labels are 1-based node IDs.
pub fn cross_entropy_graph(g: &mut Graph, scores: NodeId, labels: &[u32]) -> Result<NodeId> {
    let cols = g.value(scores).cols();
    let idx: Vec<usize> = labels
        .iter()
        .map(|&a| {
            if a < 1 || a as usize > cols {
                Err(Error::Input(format!("label {a} outside 1..={cols}")))
            } else {
                Ok(a as usize - 1)
            }
        })
        .collect::<Result<_>>()?;
    let picked = g.gather_cols(scores, &idx)?;
    let logp = g.ln(picked);
    let mean = g.mean(logp);
    Ok(g.scale(mean, -1.0))
}

/// Mean squared distance between student and (frozen) teacher first-encoder
/// representations, node rows then video rows.
pub fn distill_loss_graph(
    g: &mut Graph,
    student_nodes: NodeId,
    student_videos: NodeId,
    teacher_nodes: &Tensor,
    teacher_videos: &Tensor,
) -> Result<NodeId> {
    let student = g.concat_rows(student_nodes, student_videos)?;
    let target = {
        let tn = g.constant(teacher_nodes.clone());
        let tv = g.constant(teacher_videos.clone());
        g.concat_rows(tn, tv)?
    };
    let diff = g.sub(student, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}
