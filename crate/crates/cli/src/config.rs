//! Experiment configuration: JSON files, task presets and `--set`
//! overrides.

use std::path::{Path, PathBuf};

use pointconv::network::{EncodingSpec, HeadSpec, NetworkConfig, Task};
use pointconv::training::{AugmentConfig, TrainConfig};
use pointconv::DensityMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// Sphere / cube / torus / cylinder classification.
    Shapes,
    /// Torus halves and cylinder caps vs. side, per-point labels.
    Parts,
    /// 16x16 axis-aligned vs. diagonal bar images as 2-D clouds.
    Bars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Dataset,
    pub n_train: usize,
    pub n_test: usize,
    /// Points per synthetic cloud (ignored for images).
    pub n_points: usize,
    /// Generator seed; defaults to the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Read the splits from manifests instead of generating them.
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Classify,
    Segment,
    Image,
}

impl std::str::FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "classify" => Ok(Preset::Classify),
            "segment" => Ok(Preset::Segment),
            "image" => Ok(Preset::Image),
            _ => Err(CliError::Usage(format!("unknown task `{s}`; expected classify, segment or image"))),
        }
    }
}

/// PointConv network for 16x16 single-channel images: two stride-like
/// sampling levels (256 -> 64 -> 16 points) with 3x3-sized neighborhoods.
pub fn image_network(classes: usize) -> NetworkConfig {
    let enc = |n_out, mlp: Vec<usize>, c_out| EncodingSpec {
        n_out,
        k: 9,
        mlp_channels: mlp,
        c_mid: 8,
        c_out,
        density: DensityMode::Mlp,
        weight_layers: 2,
    };
    NetworkConfig {
        task: Task::Classify,
        input_dim: 2,
        input_channels: 1,
        encoders: vec![enc(64, vec![16], 32), enc(16, vec![], 64)],
        propagators: vec![],
        head: HeadSpec { hidden: vec![32], classes, dropout: 0.0, batch_norm: true },
        bandwidth: pointconv::point_ops::DEFAULT_BANDWIDTH,
        weight_bn: false,
        seed: 0,
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Classify => ExperimentConfig {
                data: DataConfig {
                    dataset: Dataset::Shapes,
                    n_train: 400,
                    n_test: 100,
                    n_points: 512,
                    seed: None,
                    train_manifest: None,
                    test_manifest: None,
                },
                network: NetworkConfig::classification_default(3, 4),
                train: TrainConfig { epochs: 30, ..TrainConfig::default() },
            },
            Preset::Segment => ExperimentConfig {
                data: DataConfig {
                    dataset: Dataset::Parts,
                    n_train: 200,
                    n_test: 50,
                    n_points: 1024,
                    seed: None,
                    train_manifest: None,
                    test_manifest: None,
                },
                network: NetworkConfig::segmentation_default(3, 2),
                train: TrainConfig { epochs: 40, ..TrainConfig::default() },
            },
            Preset::Image => ExperimentConfig {
                data: DataConfig {
                    dataset: Dataset::Bars,
                    n_train: 512,
                    n_test: 128,
                    n_points: 256,
                    seed: None,
                    train_manifest: None,
                    test_manifest: None,
                },
                network: image_network(2),
                train: TrainConfig { epochs: 10, augment: AugmentConfig::none(), recalibrate_bn: true, ..TrainConfig::default() },
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| pointconv::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Start from `base` (a preset or file), apply `key=value` overrides,
    /// then stamp `seed` into every seeded component.
    pub fn resolve(base: ExperimentConfig, sets: &[String], seed: u64) -> Result<Self, CliError> {
        let mut v = serde_json::to_value(&base).map_err(pointconv::Error::from)?;
        for s in sets {
            apply_override(&mut v, s)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| CliError::Usage(format!("after --set overrides: {e}")))?;
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        cfg.data.seed.get_or_insert(seed);
        cfg.network.validate()?;
        Ok(cfg)
    }
}

/// Apply one `dotted.path=value` override. Path segments index objects by
/// key and arrays by position; the value is parsed as JSON and falls back
/// to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) =
        assignment.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if !map.contains_key(*part) && !last {
                    return Err(CliError::Usage(format!("--set {path}: no key `{part}`")));
                }
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part).expect("checked")
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| CliError::Usage(format!("--set {path}: `{part}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Usage(format!("--set {path}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Usage(format!("--set {path}: `{part}` is not inside an object or array"))),
        };
    }
    Err(CliError::Usage("--set with an empty key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_override() {
        let mut v = serde_json::json!({"a": {"b": [1, {"c": 2}]}});
        apply_override(&mut v, "a.b.1.c=5").unwrap();
        apply_override(&mut v, "a.name=hello").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": [1, {"c": 5}], "name": "hello"}}));
        assert!(apply_override(&mut v, "a.b.7=1").is_err());
        assert!(apply_override(&mut v, "nokey").is_err());
    }
}
