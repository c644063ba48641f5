//! Dataset and prediction file IO.
//!
//! Two dataset layouts are accepted:
//!
//! * the extended schema `{ "split", "embedding_dim", "samples": [...] }`
//!   carrying per-video embeddings and release times, and
//! * the bare schema mapping a topic URL to nested lists of video ids, one
//!   inner list per node. Bare files produce a metrics-only dataset
//!   (labels without features).

use std::collections::BTreeMap;

use serde_json::Value;

use super::{validate_dataset, Dataset, LabelVector, TimelineSample, Video};
use crate::error::{Error, Result};

/// Parses a dataset from UTF-8 JSON text, accepting both layouts.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;

    let dataset = match &value {
        Value::Object(map) if map.contains_key("samples") => {
            serde_json::from_value::<Dataset>(value.clone())
                .map_err(|e| Error::Parse(e.to_string()))?
        }
        Value::Object(map) => parse_bare(map)?,
        _ => {
            return Err(Error::Parse(
                "top-level JSON value must be an object".into(),
            ))
        }
    };

    validate_dataset(&dataset)?;
    Ok(dataset)
}

fn parse_bare(map: &serde_json::Map<String, Value>) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(map.len());
    for (topic_id, nodes) in map {
        let node_lists: Vec<Vec<String>> = serde_json::from_value(nodes.clone())
            .map_err(|e| {
                Error::Parse(format!(
                    "topic `{topic_id}`: expected nested lists of video ids: {e}"
                ))
            })?;

        let mut videos = Vec::new();
        let mut labels = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (node_idx, ids) in node_lists.iter().enumerate() {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation {
                        topic_id: topic_id.clone(),
                        message: format!("video `{id}` assigned to two nodes"),
                    });
                }
                videos.push(Video {
                    id: id.clone(),
                    release_time: 0,
                    embedding: None,
                    title: None,
                });
                labels.push(node_idx as u32 + 1);
            }
        }
        samples.push(TimelineSample {
            topic_id: topic_id.clone(),
            videos,
            labels: LabelVector(labels),
            num_nodes: node_lists.len(),
            node_text_embeddings: None,
        });
    }
    Ok(Dataset {
        split_name: String::new(),
        embedding_dim: None,
        samples,
    })
}

/// Serializes a dataset in the extended schema. `parse_dataset` of the output
/// reproduces the input structurally.
pub fn write_dataset(d: &Dataset) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(d).map_err(|e| Error::Parse(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Parses a prediction file `{ topic_id: [node_id; N] }`.
pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, LabelVector>> {
    serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn write_predictions(preds: &BTreeMap<String, LabelVector>) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(preds).map_err(|e| Error::Parse(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The appendix listing: one topic, five nodes, seventeen videos.
    pub const APPENDIX_EXAMPLE: &str = r#"
    {"https://apnews.com/article/japan-accidents-tsunamis-earthquakes-42d4947609becd7f141e9524a8c98937":
        [
          ["OhEbGK4PnZg", "cl19tfn33hI", "R0l6z0HaUAM", "5QhCsR-t-qM", "ev3FBIoHMX8"],
          ["psAuFr8Xeqs", "BsRd7WQuBHc", "Dp_8rLL1Y18", "h1m7GFPAq3o"],
          ["f4TaKPKe1gg", "DLlsKd-QC2o"],
          ["ocluW1Vhvcg", "vusthiUFx_0", "vGHzuZQLYtg", "7XpLbhQxpLw", "UsPFUzXisq4"],
          ["hA3fNK0rxcs"]
        ]
    }"#;

    #[test]
    fn bare_appendix_example_parses() {
        let d = parse_dataset(APPENDIX_EXAMPLE).unwrap();
        assert!(d.metrics_only());
        assert_eq!(d.len(), 1);
        let s = &d.samples[0];
        assert_eq!(s.num_nodes, 5);
        assert_eq!(s.num_videos(), 17);
        let expected: Vec<u32> = [1u32; 5]
            .iter()
            .chain([2u32; 4].iter())
            .chain([3u32; 2].iter())
            .chain([4u32; 5].iter())
            .chain([5u32; 1].iter())
            .copied()
            .collect();
        assert_eq!(s.labels.ids(), &expected[..]);
    }

    #[test]
    fn empty_object_is_empty_dataset() {
        let d = parse_dataset("{\"split\": \"x\", \"samples\": []}").unwrap();
        assert!(d.is_empty());
        let d = parse_dataset("{}").unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn shared_video_id_across_nodes_rejected() {
        let text = r#"{"t": [["a", "b"], ["a"]]}"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(err.to_string().contains("assigned to two nodes"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_dataset("{\"t\": [[").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn appendix_round_trip() {
        let d = parse_dataset(APPENDIX_EXAMPLE).unwrap();
        let bytes = write_dataset(&d).unwrap();
        let d2 = parse_dataset(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn empty_dataset_round_trip() {
        let d = Dataset {
            split_name: "train".into(),
            embedding_dim: None,
            samples: vec![],
        };
        let bytes = write_dataset(&d).unwrap();
        let d2 = parse_dataset(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn mixed_embedding_dims_rejected() {
        let text = r#"{
            "split": "t", "embedding_dim": 2,
            "samples": [{
                "topic_id": "a",
                "videos": [
                    {"id": "v1", "release_time": 0, "embedding": [1.0, 0.0]},
                    {"id": "v2", "release_time": 1, "embedding": [1.0]}
                ],
                "labels": [1, 2],
                "num_nodes": 2
            }]
        }"#;
        let err = parse_dataset(text).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
    }
}
