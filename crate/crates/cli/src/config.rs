//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wsl_core::ae::AEConfig;
use wsl_core::data::{DatasetKind, DatasetSpec};
use wsl_core::downstream::{ProbeTarget, DEFAULT_ANCHOR_PERCENTILE, DEFAULT_PCA_DIM};
use wsl_core::losses::{LossConfig, QuerySource};
use wsl_core::zoo::ZooTrainConfig;
use wsl_core::WslError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Source of shifted-set queries. Defaults to the shifted variant of `dataset`.
    #[serde(default)]
    pub shifted_dataset: Option<DatasetSpec>,
    pub zoo: ZooTrainConfig,
    pub ae: AEConfig,
    pub loss: LossConfig,
    #[serde(default)]
    pub downstream: DownstreamConfig,
    #[serde(default)]
    pub grad_check: GradCheckConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Seeds autoencoder training, generation and gradient analysis.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub probe_targets: Vec<ProbeTarget>,
    /// Percentile of zoo test accuracy used as anchor threshold when
    /// `anchor_threshold` is unset.
    pub anchor_percentile: f64,
    pub anchor_threshold: Option<f64>,
    pub pca_dim: usize,
    pub generation_count: usize,
    pub histogram_bins: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            probe_targets: vec![ProbeTarget::TestAccuracy, ProbeTarget::GeneralizationGap],
            anchor_percentile: DEFAULT_ANCHOR_PERCENTILE,
            anchor_threshold: None,
            pca_dim: DEFAULT_PCA_DIM,
            generation_count: 20,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    /// Number of final test-split checkpoints analyzed.
    pub models: usize,
    pub queries: usize,
    pub taylor_eps: f64,
    pub directions: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { models: 2, queries: 8, taylor_eps: 1e-2, directions: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub query_sources: Vec<QuerySource>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            query_sources: vec![QuerySource::ZooTrainset, QuerySource::ShiftedSet, QuerySource::RandomUniform],
        }
    }
}

impl ExperimentConfig {
    /// Settings sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            dataset: DatasetSpec::desk(DatasetKind::BlobsStripesChecker, 0),
            shifted_dataset: None,
            zoo: ZooTrainConfig::desk(),
            ae: AEConfig::desk(),
            loss: LossConfig { n_queries: 64, ..LossConfig::full() },
            downstream: DownstreamConfig::default(),
            grad_check: GradCheckConfig::default(),
            sweep: SweepConfig::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, WslError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| WslError::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, WslError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WslError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn shifted(&self) -> DatasetSpec {
        self.shifted_dataset.clone().unwrap_or(DatasetSpec { kind: DatasetKind::ShiftedVariant, ..self.dataset.clone() })
    }

    /// Autoencoder settings with the experiment seed applied.
    pub fn ae_config(&self) -> AEConfig {
        AEConfig { seed: self.seed, ..self.ae.clone() }
    }

    pub fn validate(&self) -> Result<(), WslError> {
        let bad = |m: String| Err(WslError::Config(m));
        self.zoo.arch.validate()?;
        self.ae.validate()?;
        self.loss.validate()?;
        let d = &self.dataset;
        if [d.channels, d.side, d.side] != self.zoo.arch.input {
            return bad(format!(
                "dataset images [{}, {}, {}] do not match zoo.arch.input {:?}",
                d.channels, d.side, d.side, self.zoo.arch.input
            ));
        }
        if d.classes != self.zoo.arch.num_classes() {
            return bad(format!("dataset.classes is {} but zoo.arch emits {}", d.classes, self.zoo.arch.num_classes()));
        }
        let s = self.shifted();
        if [s.channels, s.side, s.side] != self.zoo.arch.input {
            return bad("shifted_dataset images do not match zoo.arch.input".into());
        }
        let ds = &self.downstream;
        if !(0.0..=100.0).contains(&ds.anchor_percentile) {
            return bad(format!("downstream.anchor_percentile must lie in [0, 100], got {}", ds.anchor_percentile));
        }
        if ds.pca_dim == 0 || ds.histogram_bins == 0 {
            return bad("downstream.pca_dim and downstream.histogram_bins must be positive".into());
        }
        let g = &self.grad_check;
        if g.models == 0 || g.queries == 0 || g.directions == 0 || !(g.taylor_eps > 0.0) {
            return bad("grad_check.models, queries, directions and taylor_eps must be positive".into());
        }
        if let Some(b) = self.sweep.betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return bad(format!("sweep.betas entries must lie in [0, 1], got {b}"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_roundtrips() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json(), "x").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
        v["loss"]["gama"] = serde_json::json!(0.1);
        let text = serde_json::to_string_pretty(&v).unwrap();
        let err = ExperimentConfig::from_json(&text, "cfg.json").unwrap_err().to_string();
        assert!(err.contains("gama") && err.contains("line"), "{err}");
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.dataset.side = 12;
        assert!(cfg.validate().unwrap_err().to_string().contains("zoo.arch.input"));
    }
}
