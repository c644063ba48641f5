//! Training and evaluation harness: per-epoch Adam training with validation
//! selection, teacher/student distillation, grid search, and checkpointing.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVector, TimelineSample};
use crate::error::{Error, Result};
use crate::metrics::{score_dataset, MetricBlock, MetricsReport, ScoreConfig, Sigma};
use crate::models::{
    cross_entropy_graph, distill_loss_graph, forward, postprocess_skip_empty,
    predict_assignments, BoundParams, ModelConfig, ModelInput, ModelKind, ModelParams,
};
use crate::numerics::{
    adam_step, read_checkpoint, write_checkpoint, AdamState, Checkpoint, Graph, Tensor,
};

const CHECKPOINT_VERSION: u32 = 1;

/// How the best epoch (and grid cell) is selected on validation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    MicroAgreement,
    MacroAgreement,
    MicroHamming,
}

impl SelectionMetric {
    /// Value oriented so that larger is always better.
    fn oriented(&self, macro_avg: &MetricBlock, micro: &MetricBlock) -> f64 {
        match self {
            SelectionMetric::MicroAgreement => micro.agreement,
            SelectionMetric::MacroAgreement => macro_avg.agreement,
            SelectionMetric::MicroHamming => -micro.hamming,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
            seed: 0,
            model: ModelConfig::default(),
            selection_metric: SelectionMetric::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.model.validate()
    }
}

/// Learning-rate and dropout grids for [`grid_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            learning_rates: vec![0.01, 0.001, 0.0005],
            dropouts: vec![0.0, 0.1, 0.25, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro: MetricBlock,
    pub val_micro: MetricBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_selection_value: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
}

/// Packs a model into the binary checkpoint container.
pub fn to_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Result<Checkpoint> {
    let header = serde_json::to_string(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: cfg.clone(),
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Checkpoint {
        header,
        params: params.tensors.clone(),
    })
}

pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelConfig, ModelParams)> {
    let header: CheckpointHeader =
        serde_json::from_str(&ckpt.header).map_err(|e| Error::Parse(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    Ok((
        header.model,
        ModelParams {
            tensors: ckpt.params.clone(),
        },
    ))
}

pub fn save_checkpoint_file(path: &std::path::Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, write_checkpoint(&to_checkpoint(cfg, params)?))?;
    Ok(())
}

pub fn load_checkpoint_file(path: &std::path::Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    from_checkpoint(&read_checkpoint(&bytes)?)
}

fn check_dataset_for_model(d: &Dataset, cfg: &ModelConfig, what: &str) -> Result<()> {
    match d.embedding_dim {
        None => Err(Error::Input(format!(
            "{what} dataset is metrics-only (no embeddings); cannot run a model on it"
        ))),
        Some(dim) if dim != cfg.input_dim => Err(Error::Dimension(format!(
            "{what} dataset embedding_dim {dim} does not match model input_dim {}",
            cfg.input_dim
        ))),
        Some(_) => Ok(()),
    }
}

fn sample_text(s: &TimelineSample, cfg: &ModelConfig, input: &ModelInput) -> Result<Option<Tensor>> {
    if !cfg.use_text {
        return Ok(None);
    }
    match &input.text {
        Some(t) => Ok(Some(t.clone())),
        None => Err(Error::Input(format!(
            "sample `{}` has no node_text_embeddings (required by the teacher model)",
            s.topic_id
        ))),
    }
}

/// Teacher representations are computed once per sample in eval mode and
/// treated as constants during student training.
struct TeacherReps {
    node: Tensor,
    video: Tensor,
}

fn teacher_reps(
    sample: &TimelineSample,
    input: &ModelInput,
    teacher_cfg: &ModelConfig,
    teacher: &ModelParams,
) -> Result<TeacherReps> {
    let mut g = Graph::inference();
    let bound = BoundParams::bind(&mut g, teacher, false);
    let emb = g.constant(input.embeddings.clone());
    let text = sample_text(sample, teacher_cfg, input)?;
    let fwd = forward(&mut g, &bound, emb, teacher_cfg, text.as_ref())?;
    Ok(TeacherReps {
        node: g.value(fwd.node_reps.unwrap()).clone(),
        video: g.value(fwd.video_reps.unwrap()).clone(),
    })
}

/// One forward/backward pass for one sample; returns the loss value with
/// gradients accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
fn sample_step(
    sample: &TimelineSample,
    cfg: &ModelConfig,
    params: &ModelParams,
    teacher: Option<&(ModelConfig, ModelParams)>,
    dropout_seed: u64,
    grads: &mut BTreeMap<String, Tensor>,
) -> Result<f64> {
    let input = ModelInput::from_sample(sample)?;
    let mut g = Graph::new(true, dropout_seed);
    let bound = BoundParams::bind(&mut g, params, true);
    let emb = g.constant(input.embeddings.clone());
    let text = sample_text(sample, cfg, &input)?;
    let fwd = forward(&mut g, &bound, emb, cfg, text.as_ref())?;

    let ce = cross_entropy_graph(&mut g, fwd.scores, &input.labels_ordered)?;
    let mut loss = g.scale(ce, cfg.ce_weight);
    if let Some((tcfg, tparams)) = teacher {
        let reps = teacher_reps(sample, &input, tcfg, tparams)?;
        let dl = distill_loss_graph(
            &mut g,
            fwd.node_reps.expect("distillation requires a tri model"),
            fwd.video_reps.unwrap(),
            &reps.node,
            &reps.video,
        )?;
        let weighted = g.scale(dl, cfg.distill_weight);
        loss = g.add(loss, weighted)?;
    }
    g.backward(loss)?;
    for (name, &id) in &bound.nodes {
        if let Some(grad) = g.take_grad(id) {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(grad.data()) {
                        *a += d;
                    }
                }
                None => {
                    grads.insert(name.clone(), grad);
                }
            }
        }
    }
    Ok(g.value(loss).scalar_value())
}

fn train_single(
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    teacher: Option<&(ModelConfig, ModelParams)>,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_dataset_for_model(train_data, model_cfg, "training")?;
    check_dataset_for_model(val_data, model_cfg, "validation")?;
    if train_data.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }

    let started = Instant::now();
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));

    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for &i in batch {
                let dropout_seed =
                    cfg.seed ^ ((epoch as u64) << 32) ^ ((i as u64).wrapping_mul(0x9e3779b9));
                epoch_loss += sample_step(
                    &train_data.samples[i],
                    model_cfg,
                    &params,
                    teacher,
                    dropout_seed,
                    &mut grads,
                )?;
            }
            let scale = 1.0 / batch.len() as f64;
            for t in grads.values_mut() {
                for x in t.data_mut() {
                    *x *= scale;
                }
            }
            adam_step(&mut params.tensors, &grads, &mut adam)?;
        }
        epoch_loss /= train_data.len() as f64;

        let val_report = evaluate_params(model_cfg, &params, val_data, Sigma::HALF)?;
        let value = cfg
            .selection_metric
            .oriented(&val_report.macro_avg, &val_report.micro);
        if best.as_ref().map_or(true, |(b, _, _)| value > *b) {
            best = Some((value, epoch, params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            val_macro: val_report.macro_avg,
            val_micro: val_report.micro,
        });
    }

    let (best_value, best_epoch, best_params) = best.unwrap();
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch,
            best_selection_value: best_value,
            wall_time_secs: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Result of a full training run: the selected model plus, for distillation,
/// the frozen teacher it was trained against.
pub struct TrainOutcome {
    pub model_cfg: ModelConfig,
    pub params: ModelParams,
    pub report: TrainReport,
    pub teacher: Option<(ModelConfig, ModelParams, TrainReport)>,
}

/// Trains per the config. For `tri_distill`, phase 1 trains a text-informed
/// teacher, phase 2 freezes it and trains the student with the combined
/// cross-entropy + representation loss.
pub fn train(train_data: &Dataset, val_data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    match cfg.model.model_kind {
        ModelKind::V | ModelKind::Tri => {
            let model_cfg = ModelConfig {
                use_text: false,
                ..cfg.model.clone()
            };
            let (params, report) = train_single(train_data, val_data, cfg, &model_cfg, None)?;
            Ok(TrainOutcome {
                model_cfg,
                params,
                report,
                teacher: None,
            })
        }
        ModelKind::TriDistill => {
            let d_text = match cfg.model.d_text {
                Some(d) => d,
                None => infer_text_dim(train_data)?,
            };
            let teacher_cfg = ModelConfig {
                model_kind: ModelKind::Tri,
                use_text: true,
                d_text: Some(d_text),
                ..cfg.model.clone()
            };
            let (teacher_params, teacher_report) =
                train_single(train_data, val_data, cfg, &teacher_cfg, None)?;

            let student_cfg = ModelConfig {
                model_kind: ModelKind::TriDistill,
                use_text: false,
                d_text: Some(d_text),
                ..cfg.model.clone()
            };
            let frozen = (teacher_cfg.clone(), teacher_params);
            let (params, report) =
                train_single(train_data, val_data, cfg, &student_cfg, Some(&frozen))?;
            Ok(TrainOutcome {
                model_cfg: student_cfg,
                params,
                report,
                teacher: Some((frozen.0, frozen.1, teacher_report)),
            })
        }
    }
}

fn infer_text_dim(d: &Dataset) -> Result<usize> {
    d.samples
        .iter()
        .find_map(|s| {
            s.node_text_embeddings
                .as_ref()
                .and_then(|t| t.first())
                .map(|v| v.len())
        })
        .ok_or_else(|| {
            Error::Input(
                "distillation requires node_text_embeddings in the training data".into(),
            )
        })
}

/// Eval-mode predictions for every sample, in the samples' stored video
/// order, after empty-node post-processing.
pub fn predict_dataset(
    cfg: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
) -> Result<BTreeMap<String, LabelVector>> {
    check_dataset_for_model(data, cfg, "prediction")?;
    let entries: Vec<(String, LabelVector)> = data
        .samples
        .par_iter()
        .map(|s| {
            let input = ModelInput::from_sample(s)?;
            let mut g = Graph::inference();
            let bound = BoundParams::bind(&mut g, params, false);
            let emb = g.constant(input.embeddings.clone());
            let text = sample_text(s, cfg, &input)?;
            let fwd = forward(&mut g, &bound, emb, cfg, text.as_ref())?;
            let raw = predict_assignments(g.value(fwd.scores));
            let contiguous = postprocess_skip_empty(&raw);
            Ok((s.topic_id.clone(), input.restore_order(&contiguous)))
        })
        .collect::<Result<_>>()?;
    Ok(entries.into_iter().collect())
}

/// Forward in eval mode, argmax decoding, empty-node post-processing, then
/// the full metric protocol.
pub fn evaluate_params(
    cfg: &ModelConfig,
    params: &ModelParams,
    data: &Dataset,
    sigma: Sigma,
) -> Result<MetricsReport> {
    let predictions = predict_dataset(cfg, params, data)?;
    score_dataset(data, &predictions, &ScoreConfig { sigma })
}

/// Evaluates a packed checkpoint against a dataset.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, sigma: Sigma) -> Result<MetricsReport> {
    let (cfg, params) = from_checkpoint(ckpt)?;
    evaluate_params(&cfg, &params, data, sigma)
}

/// Trains every cell of the learning-rate x dropout grid and returns the
/// winner by validation selection metric (ties keep the earlier cell).
pub fn grid_search(
    train_data: &Dataset,
    val_data: &Dataset,
    base: &TrainConfig,
    grid: &GridConfig,
) -> Result<(TrainConfig, TrainOutcome)> {
    if grid.learning_rates.is_empty() || grid.dropouts.is_empty() {
        return Err(Error::Config("grid must have at least one cell".into()));
    }
    let mut best: Option<(f64, TrainConfig, TrainOutcome)> = None;
    for &lr in &grid.learning_rates {
        for &p in &grid.dropouts {
            let cfg = TrainConfig {
                learning_rate: lr,
                model: ModelConfig {
                    dropout_p: p,
                    ..base.model.clone()
                },
                ..base.clone()
            };
            let outcome = train(train_data, val_data, &cfg)?;
            let value = outcome.report.best_selection_value;
            if best.as_ref().map_or(true, |(b, _, _)| value > *b) {
                best = Some((value, cfg, outcome));
            }
        }
    }
    let (_, cfg, outcome) = best.unwrap();
    Ok((cfg, outcome))
}

/// Nearest-event baseline: assigns each video to the node whose text
/// embedding has the largest dot product with the video embedding. With low
/// generator noise this is a near-oracle and bounds what a model can reach.
pub fn nearest_text_predictions(data: &Dataset) -> Result<BTreeMap<String, LabelVector>> {
    data.samples
        .iter()
        .map(|s| {
            let texts = s.node_text_embeddings.as_ref().ok_or_else(|| {
                Error::Input(format!(
                    "sample `{}` has no node_text_embeddings",
                    s.topic_id
                ))
            })?;
            let ids = s
                .videos
                .iter()
                .map(|v| {
                    let e = v.embedding.as_ref().ok_or_else(|| {
                        Error::Input(format!("video `{}` has no embedding", v.id))
                    })?;
                    let mut best = 0usize;
                    let mut best_dot = f64::NEG_INFINITY;
                    for (k, t) in texts.iter().enumerate() {
                        let dot: f64 = e.iter().zip(t).map(|(a, b)| a * b).sum();
                        if dot > best_dot {
                            best_dot = dot;
                            best = k;
                        }
                    }
                    Ok(best as u32 + 1)
                })
                .collect::<Result<Vec<u32>>>()?;
            Ok((s.topic_id.clone(), LabelVector(ids)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenConfig};

    fn tiny_gen(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&GenConfig {
            num_timelines: n,
            node_count_range: (2, 3),
            videos_per_node_range: (1, 2),
            embedding_dim: 8,
            video_noise_sigma: 0.05,
            release_overlap_fraction: 0.1,
            seed,
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn tiny_train_cfg(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.001,
            seed: 7,
            model: ModelConfig {
                model_kind: kind,
                input_dim: 8,
                d_model: 8,
                num_heads: 2,
                num_layers: 1,
                feedforward_dim: 16,
                dropout_p: 0.1,
                d_text: Some(8),
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke() {
        let data = tiny_gen(8, 1);
        let cfg = tiny_train_cfg(ModelKind::Tri);
        let out = train(&data, &data, &cfg).unwrap();
        assert_eq!(out.report.epochs.len(), 1);
        assert!(out.report.epochs[0].train_loss.is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_gen(6, 2);
        let cfg = tiny_train_cfg(ModelKind::TriDistill);
        let a = train(&data, &data, &cfg).unwrap();
        let b = train(&data, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(
            write_checkpoint(&to_checkpoint(&a.model_cfg, &a.params).unwrap()),
            write_checkpoint(&to_checkpoint(&b.model_cfg, &b.params).unwrap())
        );
    }

    #[test]
    fn loss_decreases_on_easy_data() {
        let data = tiny_gen(16, 3);
        let mut cfg = tiny_train_cfg(ModelKind::Tri);
        cfg.epochs = 8;
        cfg.learning_rate = 0.01;
        cfg.model.dropout_p = 0.0;
        let out = train(&data, &data, &cfg).unwrap();
        let first = out.report.epochs.first().unwrap().train_loss;
        let last = out.report.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let data = tiny_gen(6, 4);
        let cfg = tiny_train_cfg(ModelKind::V);
        let out = train(&data, &data, &cfg).unwrap();
        let before = evaluate_params(&out.model_cfg, &out.params, &data, Sigma::HALF).unwrap();
        let bytes = write_checkpoint(&to_checkpoint(&out.model_cfg, &out.params).unwrap());
        let ckpt = read_checkpoint(&bytes).unwrap();
        let after = evaluate(&ckpt, &data, Sigma::HALF).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn evaluate_matches_manual_pipeline() {
        let data = tiny_gen(4, 5);
        let cfg = tiny_train_cfg(ModelKind::Tri);
        let params = ModelParams::init(&cfg.model, 0).unwrap();
        let report = evaluate_params(&cfg.model, &params, &data, Sigma::HALF).unwrap();
        let preds = predict_dataset(&cfg.model, &params, &data).unwrap();
        let manual = score_dataset(&data, &preds, &ScoreConfig::default()).unwrap();
        assert_eq!(report, manual);
    }

    #[test]
    fn perfect_predictions_give_perfect_report() {
        let data = tiny_gen(4, 6);
        let preds: BTreeMap<String, LabelVector> = data
            .samples
            .iter()
            .map(|s| (s.topic_id.clone(), s.labels.clone()))
            .collect();
        let report = score_dataset(&data, &preds, &ScoreConfig::default()).unwrap();
        assert_eq!(report.micro.precision, 1.0);
        assert_eq!(report.micro.recall, 1.0);
        assert_eq!(report.micro.hamming, 0.0);
        assert_eq!(report.micro.euclidean, 0.0);
        assert_eq!(report.micro.agreement, 1.0);
    }

    #[test]
    fn distillation_requires_text() {
        let mut data = tiny_gen(4, 7);
        for s in &mut data.samples {
            s.node_text_embeddings = None;
        }
        let cfg = tiny_train_cfg(ModelKind::TriDistill);
        assert!(train(&data, &data, &cfg).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let data = tiny_gen(4, 8);
        let mut cfg = tiny_train_cfg(ModelKind::V);
        cfg.model.input_dim = 12;
        assert!(train(&data, &data, &cfg).is_err());
    }

    #[test]
    fn grid_single_cell_matches_train() {
        let data = tiny_gen(6, 9);
        let cfg = tiny_train_cfg(ModelKind::V);
        let grid = GridConfig {
            learning_rates: vec![cfg.learning_rate],
            dropouts: vec![cfg.model.dropout_p],
        };
        let (best_cfg, outcome) = grid_search(&data, &data, &cfg, &grid).unwrap();
        let direct = train(&data, &data, &cfg).unwrap();
        assert_eq!(best_cfg, cfg);
        assert_eq!(outcome.params, direct.params);
    }

    #[test]
    fn grid_prefers_non_divergent_cell() {
        let data = tiny_gen(8, 10);
        let mut cfg = tiny_train_cfg(ModelKind::Tri);
        cfg.epochs = 3;
        cfg.model.dropout_p = 0.0;
        let grid = GridConfig {
            learning_rates: vec![10.0, 0.001],
            dropouts: vec![0.0],
        };
        let (best_cfg, _) = grid_search(&data, &data, &cfg, &grid).unwrap();
        assert_eq!(best_cfg.learning_rate, 0.001);
    }
}
