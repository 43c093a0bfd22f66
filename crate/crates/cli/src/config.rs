//! Per-subcommand JSON configs. Unknown fields are rejected.

use std::path::Path;

use fpf_core::archgen::ArchConfig;
use fpf_core::phantom::{DatasetConfig, Split};
use fpf_core::pipeline::TrainConfig;
use fpf_core::signal::{ParameterGrid, SequenceTrain};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Parse `path` into `T`, or fall back to `T::default()` without a path.
/// Errors name the offending field.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Schema(format!("reading {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        if field == "." {
            CliError::Schema(inner.to_string())
        } else {
            CliError::Schema(format!("field `{field}`: {inner}"))
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub sequence: Option<SequenceTrain>,
    #[serde(default)]
    pub grid: Option<ParameterGrid>,
    /// Also store the leading `svd_rank` right singular vectors.
    #[serde(default)]
    pub svd_rank: Option<usize>,
}

fn default_frames() -> usize {
    32
}

impl Default for DictConfig {
    fn default() -> Self {
        DictConfig { frames: default_frames(), sequence: None, grid: None, svd_rank: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetRun(pub DatasetConfig);

impl Default for DatasetRun {
    fn default() -> Self {
        DatasetRun(DatasetConfig::desk_default())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Match in a truncated SVD subspace of this rank.
    #[serde(default)]
    pub svd_rank: Option<usize>,
    /// Restrict to one split; all entries otherwise.
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArchRun(pub ArchConfig);

impl Default for ArchRun {
    fn default() -> Self {
        ArchRun(ArchConfig::clinical())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "ArchConfig::clinical")]
    pub base: ArchConfig,
    pub receptive_fields: Vec<usize>,
    pub budgets: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            base: ArchConfig::clinical(),
            receptive_fields: vec![1, 3, 5, 7, 9, 11, 13, 15],
            budgets: vec![1_000_000, 2_500_000, 5_000_000, 10_000_000],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    /// Receptive field of the desk-scale architecture, used when `arch` is absent.
    #[serde(default = "default_r")]
    pub receptive_field: usize,
    #[serde(default)]
    pub arch: Option<ArchConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_r() -> usize {
    7
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun { receptive_field: default_r(), arch: None, train: TrainConfig::default() }
    }
}

fn default_test() -> Option<Split> {
    Some(Split::Test)
}

fn default_patch() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    #[serde(default = "default_test")]
    pub split: Option<Split>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig { split: default_test(), patch_size: default_patch() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default = "default_test")]
    pub split: Option<Split>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { split: default_test() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlurConfig {
    #[serde(default = "default_test")]
    pub split: Option<Split>,
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
}

impl Default for BlurConfig {
    fn default() -> Self {
        BlurConfig { split: default_test(), thresholds: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceConfig {
    #[serde(default = "default_test")]
    pub split: Option<Split>,
    /// Frames to permute; every frame when absent.
    #[serde(default)]
    pub frames: Option<Vec<usize>>,
    /// Permutations per frame; seeds are `seed, seed + 1, ...`.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default)]
    pub max_slices: Option<usize>,
}

fn default_repeats() -> usize {
    3
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig { split: default_test(), frames: None, repeats: default_repeats(), patch_size: default_patch(), max_slices: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_name_the_field() {
        let e = parse::<TrainRun>(r#"{"train": {"epochs": "many"}}"#).unwrap_err();
        assert!(e.to_string().contains("train.epochs"), "{e}");
        let e = parse::<TrainRun>(r#"{"train": {"epoch": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn partial_configs_take_defaults() {
        let c: TrainRun = parse(r#"{"receptive_field": 1}"#).unwrap();
        assert_eq!(c.receptive_field, 1);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
        let d: DatasetRun = parse(r#"{"height": 16, "width": 16, "frames": 8, "n_train": 1, "n_validation": 0, "n_test": 1}"#).unwrap();
        assert_eq!(d.0.n_regions, 6);
    }
}
