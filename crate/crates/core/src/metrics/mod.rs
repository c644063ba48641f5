//! Timeline evaluation protocol: IoU node matching via maximum bipartite
//! matching, Hamming and Euclidean label distances, pairwise order
//! agreement, and macro/micro aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelVector};
use crate::error::{Error, Result};

/// IoU threshold as an exact rational. The matching threshold sits exactly at
/// 1/2 in the published protocol, so the comparison `iou >= sigma` must not
/// go through floating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sigma {
    pub num: u64,
    pub den: u64,
}

impl Sigma {
    pub const HALF: Sigma = Sigma { num: 1, den: 2 };

    /// Parses a decimal string like `0.5` or `0.51` into an exact rational.
    pub fn from_decimal_str(s: &str) -> Result<Sigma> {
        let s = s.trim();
        let (int_part, frac_part) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if frac_part.len() > 12 {
            return Err(Error::Config(format!("sigma `{s}` has too many digits")));
        }
        let digits: String = format!("{int_part}{frac_part}");
        let num: u64 = digits
            .parse()
            .map_err(|_| Error::Config(format!("invalid sigma `{s}`")))?;
        let den = 10u64.pow(frac_part.len() as u32);
        let sigma = Sigma { num, den };
        if !sigma.is_valid() {
            return Err(Error::Config(format!("sigma must be in (0, 1], got `{s}`")));
        }
        Ok(sigma)
    }

    pub fn is_valid(&self) -> bool {
        self.den > 0 && self.num > 0 && self.num <= self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `inter/union >= self`, compared exactly.
    fn admits(&self, inter: usize, union: usize) -> bool {
        (inter as u128) * (self.den as u128) >= (self.num as u128) * (union as u128)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub sigma: Sigma,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { sigma: Sigma::HALF }
    }
}

/// The nonempty node groups induced by a label vector, ordered by node ID.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodePartition {
    pub nodes: Vec<Vec<usize>>,
}

impl NodePartition {
    pub fn from_labels(labels: &LabelVector) -> NodePartition {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &a) in labels.ids().iter().enumerate() {
            groups.entry(a).or_default().push(i);
        }
        NodePartition {
            nodes: groups.into_values().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn iou_counts(a: &[usize], b: &[usize]) -> (usize, usize) {
    let set: std::collections::HashSet<usize> = a.iter().copied().collect();
    let inter = b.iter().filter(|x| set.contains(x)).count();
    let union = a.len() + b.len() - inter;
    (inter, union)
}

/// Intersection-over-union of two video index sets.
pub fn iou(a: &[usize], b: &[usize]) -> Result<f64> {
    let (inter, union) = iou_counts(a, b);
    if union == 0 {
        return Err(Error::Input("iou of two empty sets is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Maximum-cardinality matching in a bipartite graph, by repeated augmenting
/// paths (unit-capacity max flow). Only the cardinality is unique, and only
/// the cardinality is returned.
pub fn max_bipartite_matching(edges: &[(usize, usize)], k: usize, k_hat: usize) -> usize {
    let mut adj = vec![Vec::new(); k];
    for &(g, p) in edges {
        debug_assert!(g < k && p < k_hat);
        adj[g].push(p);
    }
    let mut matched_right = vec![usize::MAX; k_hat];
    let mut count = 0;
    for g in 0..k {
        let mut visited = vec![false; k_hat];
        if augment(g, &adj, &mut matched_right, &mut visited) {
            count += 1;
        }
    }
    count
}

fn augment(
    g: usize,
    adj: &[Vec<usize>],
    matched_right: &mut [usize],
    visited: &mut [bool],
) -> bool {
    for &p in &adj[g] {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        if matched_right[p] == usize::MAX
            || augment(matched_right[p], adj, matched_right, visited)
        {
            matched_right[p] = g;
            return true;
        }
    }
    false
}

/// Node-level precision/recall after thresholded IoU matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMatchScore {
    pub matched: usize,
    pub k: usize,
    pub k_hat: usize,
    pub precision: f64,
    pub recall: f64,
}

pub fn node_precision_recall(
    gt: &LabelVector,
    pred: &LabelVector,
    cfg: &ScoreConfig,
) -> Result<NodeMatchScore> {
    check_lengths(gt, pred)?;
    let gt_part = NodePartition::from_labels(gt);
    let pred_part = NodePartition::from_labels(pred);
    let mut edges = Vec::new();
    for (gi, g) in gt_part.nodes.iter().enumerate() {
        for (pi, p) in pred_part.nodes.iter().enumerate() {
            let (inter, union) = iou_counts(g, p);
            if cfg.sigma.admits(inter, union) {
                edges.push((gi, pi));
            }
        }
    }
    let matched = max_bipartite_matching(&edges, gt_part.len(), pred_part.len());
    Ok(NodeMatchScore {
        matched,
        k: gt_part.len(),
        k_hat: pred_part.len(),
        precision: matched as f64 / pred_part.len() as f64,
        recall: matched as f64 / gt_part.len() as f64,
    })
}

fn check_lengths(gt: &LabelVector, pred: &LabelVector) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::Input(format!(
            "label vector lengths differ: gt {} vs pred {}",
            gt.len(),
            pred.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Input("label vectors are empty".into()));
    }
    Ok(())
}

/// Number of positions with a wrong node ID, averaged over videos.
pub fn hamming(gt: &LabelVector, pred: &LabelVector) -> Result<f64> {
    check_lengths(gt, pred)?;
    let mismatches = mismatch_count(gt, pred);
    Ok(mismatches as f64 / gt.len() as f64)
}

fn mismatch_count(gt: &LabelVector, pred: &LabelVector) -> usize {
    gt.ids()
        .iter()
        .zip(pred.ids())
        .filter(|(a, b)| a != b)
        .count()
}

/// Mean absolute node-ID deviation per video (the protocol's "video-level
/// Euclidean distance").
pub fn euclidean(gt: &LabelVector, pred: &LabelVector) -> Result<f64> {
    check_lengths(gt, pred)?;
    Ok(abs_dev_sum(gt, pred) as f64 / gt.len() as f64)
}

fn abs_dev_sum(gt: &LabelVector, pred: &LabelVector) -> u64 {
    gt.ids()
        .iter()
        .zip(pred.ids())
        .map(|(&a, &b)| (a as i64 - b as i64).unsigned_abs())
        .sum()
}

/// Counts video pairs whose three-way order relation (<, =, >) is predicted
/// correctly, out of all N(N-1)/2 pairs.
pub fn pairwise_agreement(gt: &LabelVector, pred: &LabelVector) -> Result<(usize, usize)> {
    check_lengths(gt, pred)?;
    let a = gt.ids();
    let b = pred.ids();
    let n = a.len();
    let mut correct = 0;
    for i in 0..n {
        for j in i + 1..n {
            if a[i].cmp(&a[j]) == b[i].cmp(&b[j]) {
                correct += 1;
            }
        }
    }
    Ok((correct, n * (n - 1) / 2))
}

/// All four metrics for one timeline sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub n: usize,
    pub k: usize,
    pub k_hat: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    pub hamming_avg: f64,
    pub euclidean_avg: f64,
    pub mismatch_count: usize,
    pub abs_dev_sum: u64,
    pub pairs_correct: usize,
    pub pairs_total: usize,
}

pub fn score_sample(
    gt: &LabelVector,
    pred: &LabelVector,
    cfg: &ScoreConfig,
) -> Result<SampleScore> {
    let nodes = node_precision_recall(gt, pred, cfg)?;
    let mismatches = mismatch_count(gt, pred);
    let dev = abs_dev_sum(gt, pred);
    let (pairs_correct, pairs_total) = pairwise_agreement(gt, pred)?;
    let n = gt.len();
    Ok(SampleScore {
        n,
        k: nodes.k,
        k_hat: nodes.k_hat,
        matched: nodes.matched,
        precision: nodes.precision,
        recall: nodes.recall,
        hamming_avg: mismatches as f64 / n as f64,
        euclidean_avg: dev as f64 / n as f64,
        mismatch_count: mismatches,
        abs_dev_sum: dev,
        pairs_correct,
        pairs_total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Macro,
    Micro,
}

/// One row of aggregated metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub precision: f64,
    pub recall: f64,
    pub hamming: f64,
    pub euclidean: f64,
    pub agreement: f64,
}

/// Macro: unweighted mean over timelines (samples without any video pair are
/// excluded from the agreement mean only). Micro: ratio of sums over nodes,
/// videos, or pairs.
pub fn aggregate(scores: &[SampleScore], mode: AggregateMode) -> Result<MetricBlock> {
    if scores.is_empty() {
        return Err(Error::Input("cannot aggregate zero samples".into()));
    }
    let block = match mode {
        AggregateMode::Macro => {
            let m = scores.len() as f64;
            let with_pairs: Vec<&SampleScore> =
                scores.iter().filter(|s| s.pairs_total > 0).collect();
            let agreement = if with_pairs.is_empty() {
                0.0
            } else {
                with_pairs
                    .iter()
                    .map(|s| s.pairs_correct as f64 / s.pairs_total as f64)
                    .sum::<f64>()
                    / with_pairs.len() as f64
            };
            MetricBlock {
                precision: scores.iter().map(|s| s.precision).sum::<f64>() / m,
                recall: scores.iter().map(|s| s.recall).sum::<f64>() / m,
                hamming: scores.iter().map(|s| s.hamming_avg).sum::<f64>() / m,
                euclidean: scores.iter().map(|s| s.euclidean_avg).sum::<f64>() / m,
                agreement,
            }
        }
        AggregateMode::Micro => {
            let sum = |f: &dyn Fn(&SampleScore) -> f64| scores.iter().map(f).sum::<f64>();
            let total_n = sum(&|s| s.n as f64);
            let total_pairs = sum(&|s| s.pairs_total as f64);
            MetricBlock {
                precision: sum(&|s| s.matched as f64) / sum(&|s| s.k_hat as f64),
                recall: sum(&|s| s.matched as f64) / sum(&|s| s.k as f64),
                hamming: sum(&|s| s.mismatch_count as f64) / total_n,
                euclidean: sum(&|s| s.abs_dev_sum as f64) / total_n,
                agreement: if total_pairs == 0.0 {
                    0.0
                } else {
                    sum(&|s| s.pairs_correct as f64) / total_pairs
                },
            }
        }
    };
    Ok(block)
}

/// A scored sample tagged with its topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub topic_id: String,
    #[serde(flatten)]
    pub score: SampleScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_sample: Vec<ScoredSample>,
    #[serde(rename = "macro")]
    pub macro_avg: MetricBlock,
    pub micro: MetricBlock,
}

/// Scores every sample of a dataset against a prediction map keyed by
/// topic id. Sample scoring runs in parallel; the reduction is ordered, so
/// the report is deterministic.
pub fn score_dataset(
    gt: &Dataset,
    predictions: &BTreeMap<String, LabelVector>,
    cfg: &ScoreConfig,
) -> Result<MetricsReport> {
    if gt.samples.is_empty() {
        return Err(Error::Input("cannot score an empty dataset".into()));
    }
    let per_sample: Vec<ScoredSample> = gt
        .samples
        .par_iter()
        .map(|s| {
            let pred = predictions
                .get(&s.topic_id)
                .ok_or_else(|| Error::MissingPrediction(s.topic_id.clone()))?;
            if pred.len() != s.labels.len() {
                return Err(Error::Input(format!(
                    "prediction for topic `{}` has length {}, expected {}",
                    s.topic_id,
                    pred.len(),
                    s.labels.len()
                )));
            }
            Ok(ScoredSample {
                topic_id: s.topic_id.clone(),
                score: score_sample(&s.labels, pred, cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    let scores: Vec<SampleScore> = per_sample.iter().map(|s| s.score.clone()).collect();
    Ok(MetricsReport {
        macro_avg: aggregate(&scores, AggregateMode::Macro)?,
        micro: aggregate(&scores, AggregateMode::Micro)?,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn worked_gt() -> LabelVector {
        LabelVector(vec![1, 1, 1, 1, 1, 2, 2, 2, 2, 3])
    }

    pub fn worked_pred() -> LabelVector {
        LabelVector(vec![1, 1, 1, 1, 3, 4, 2, 2, 4, 3])
    }

    #[test]
    fn iou_worked_example_nodes() {
        // C1 = {v1..v5}, C1_hat = {v1..v4}
        assert_eq!(iou(&[0, 1, 2, 3, 4], &[0, 1, 2, 3]).unwrap(), 4.0 / 5.0);
        assert_eq!(iou(&[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(iou(&[0, 1], &[2, 3]).unwrap(), 0.0);
        assert!(iou(&[], &[]).is_err());
    }

    #[test]
    fn matching_worked_example_graph() {
        let edges = [(0, 0), (1, 1), (2, 2)];
        assert_eq!(max_bipartite_matching(&edges, 3, 4), 3);
        assert_eq!(max_bipartite_matching(&[], 3, 4), 0);
    }

    #[test]
    fn matching_needs_augmentation() {
        // Greedy on left order would match 0-0 and strand 1.
        let edges = [(0, 0), (0, 1), (1, 0)];
        assert_eq!(max_bipartite_matching(&edges, 2, 2), 2);
    }

    #[test]
    fn precision_recall_worked_example() {
        let s = node_precision_recall(&worked_gt(), &worked_pred(), &ScoreConfig::default())
            .unwrap();
        assert_eq!(s.matched, 3);
        assert_eq!((s.k, s.k_hat), (3, 4));
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 1.0);
    }

    #[test]
    fn tighter_sigma_drops_boundary_edges() {
        // IoU(C2, C2_hat) and IoU(C3, C3_hat) are exactly 1/2.
        let cfg = ScoreConfig {
            sigma: Sigma::from_decimal_str("0.51").unwrap(),
        };
        let s = node_precision_recall(&worked_gt(), &worked_pred(), &cfg).unwrap();
        assert_eq!(s.matched, 1);
        assert_eq!(s.precision, 0.25);
        assert_eq!(s.recall, 1.0 / 3.0);
    }

    #[test]
    fn hamming_worked_example() {
        assert_eq!(hamming(&worked_gt(), &worked_pred()).unwrap(), 3.0 / 10.0);
        assert_eq!(hamming(&worked_gt(), &worked_gt()).unwrap(), 0.0);
        assert_eq!(
            hamming(&LabelVector(vec![1, 2]), &LabelVector(vec![2, 1])).unwrap(),
            1.0
        );
    }

    #[test]
    fn euclidean_worked_example() {
        assert_eq!(euclidean(&worked_gt(), &worked_pred()).unwrap(), 3.0 / 5.0);
        assert_eq!(euclidean(&worked_gt(), &worked_gt()).unwrap(), 0.0);
        assert_eq!(
            euclidean(&LabelVector(vec![1]), &LabelVector(vec![24])).unwrap(),
            23.0
        );
    }

    #[test]
    fn agreement_worked_example() {
        assert_eq!(pairwise_agreement(&worked_gt(), &worked_pred()).unwrap(), (32, 45));
        assert_eq!(pairwise_agreement(&worked_gt(), &worked_gt()).unwrap(), (45, 45));
        assert_eq!(
            pairwise_agreement(&LabelVector(vec![1, 1, 2]), &LabelVector(vec![1, 2, 1]))
                .unwrap(),
            (0, 3)
        );
    }

    #[test]
    fn score_sample_worked_example() {
        let s = score_sample(&worked_gt(), &worked_pred(), &ScoreConfig::default()).unwrap();
        assert_eq!(s.matched, 3);
        assert_eq!((s.k, s.k_hat), (3, 4));
        assert_eq!((s.precision, s.recall), (0.75, 1.0));
        assert_eq!(s.hamming_avg, 0.3);
        assert_eq!(s.euclidean_avg, 0.6);
        assert_eq!((s.pairs_correct, s.pairs_total), (32, 45));
    }

    #[test]
    fn aggregate_single_sample_macro_equals_micro() {
        let s = score_sample(&worked_gt(), &worked_pred(), &ScoreConfig::default()).unwrap();
        let mac = aggregate(std::slice::from_ref(&s), AggregateMode::Macro).unwrap();
        let mic = aggregate(std::slice::from_ref(&s), AggregateMode::Micro).unwrap();
        assert_eq!(mac, mic);
    }

    #[test]
    fn aggregate_hand_computed() {
        let mk = |n: usize, mismatches: usize| SampleScore {
            n,
            k: 2,
            k_hat: 2,
            matched: 2,
            precision: 1.0,
            recall: 1.0,
            hamming_avg: mismatches as f64 / n as f64,
            euclidean_avg: mismatches as f64 / n as f64,
            mismatch_count: mismatches,
            abs_dev_sum: mismatches as u64,
            pairs_correct: n * (n - 1) / 2,
            pairs_total: n * (n - 1) / 2,
        };
        // Equal sizes: macro == micro == 0.2.
        let scores = [mk(10, 3), mk(10, 1)];
        assert_eq!(aggregate(&scores, AggregateMode::Macro).unwrap().hamming, 0.2);
        assert_eq!(aggregate(&scores, AggregateMode::Micro).unwrap().hamming, 0.2);
        // Unequal sizes: macro (0.3 + 0.1)/2 = 0.2, micro 6/40 = 0.15.
        let scores = [mk(10, 3), mk(30, 3)];
        assert_eq!(aggregate(&scores, AggregateMode::Macro).unwrap().hamming, 0.2);
        assert_eq!(aggregate(&scores, AggregateMode::Micro).unwrap().hamming, 0.15);
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(aggregate(&[], AggregateMode::Macro).is_err());
    }

    #[test]
    fn sigma_parsing() {
        assert_eq!(Sigma::from_decimal_str("0.5").unwrap(), Sigma { num: 5, den: 10 });
        assert_eq!(Sigma::from_decimal_str("1").unwrap(), Sigma { num: 1, den: 1 });
        assert!(Sigma::from_decimal_str("0").is_err());
        assert!(Sigma::from_decimal_str("1.5").is_err());
        assert!(Sigma::from_decimal_str("abc").is_err());
    }
}
