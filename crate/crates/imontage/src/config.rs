//! Run configuration: one JSON file drives every subcommand. Unknown keys
//! are rejected, every field has a documented default (an empty `{}` file
//! is a complete desk-scale experiment), and the digest of the parsed file
//! is embedded in checkpoints so a config edit invalidates resumption.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{toy_buckets, Bucket, SyntheticSceneSpec, DEFAULT_BATCH_CAP, DEFAULT_TOKEN_BUDGET};
use crate::flow::SamplerConfig;
use crate::model::ModelConfig;
use crate::rope::RopeStrategy;
use crate::train::{config_digest, StageConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every subcommand derives all of its randomness from it.
    /// Default 0.
    pub seed: u64,
    /// Root for outputs (checkpoints, logs, samples, reports). Default
    /// `out`.
    pub out_dir: PathBuf,
    /// Corpus root: `curate` writes images and `manifest.jsonl` here,
    /// `train` reads them back. Default `corpus`.
    pub corpus_dir: PathBuf,
    /// Position-layout strategy for training and sampling. Default
    /// `marginal`.
    pub strategy: RopeStrategy,
    /// Network shape. Defaults to the desk-scale model.
    pub model: ModelConfig,
    /// Inference-time integrator settings.
    pub sampler: SamplerConfig,
    /// Resolution buckets used when curating. Defaults to the toy trio;
    /// swap in [`crate::data::default_buckets`] for the production list.
    pub buckets: Vec<Bucket>,
    pub curate: CurateConfig,
    pub train: TrainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            corpus_dir: PathBuf::from("corpus"),
            strategy: RopeStrategy::Marginal,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            buckets: toy_buckets(),
            curate: CurateConfig::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateConfig {
    /// Procedural-scene knobs; the default renders 32x32 shape scenes.
    pub scene: SyntheticSceneSpec,
    /// Records to generate, round-robin over the scene's task list.
    /// Default 64.
    pub n_records: usize,
    /// Motion filter: frame pairs scoring below this (mean displacement in
    /// pixels) are dropped. Default 0.5.
    pub motion_threshold: f64,
    /// Sampling-weight multiplier for pairs scoring above the threshold.
    /// Default 2.0.
    pub motion_upweight: f64,
}

impl Default for CurateConfig {
    fn default() -> Self {
        CurateConfig {
            scene: SyntheticSceneSpec::default(),
            n_records: 64,
            motion_threshold: 0.5,
            motion_upweight: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Explicit curriculum. Leave empty (the default) to derive the
    /// three-stage reference curriculum from `stage_steps` and the
    /// manifest's per-task record counts.
    pub stages: Vec<StageConfig>,
    /// Steps per derived stage when `stages` is empty. Default [40, 16, 8].
    pub stage_steps: [u64; 3],
    /// Timestep-shift strength for drawing training times. Default 5.0.
    pub shift: f64,
    /// Probability of dropping the instruction so guidance has an
    /// unconditional branch to lean on. Default 0.1.
    pub null_caption_p: f64,
    /// Token budget that sizes each batch. Default 9216.
    pub token_budget: usize,
    /// Hard cap on batch size. Default 8.
    pub batch_cap: usize,
    /// Rolling checkpoint cadence in steps; 0 (default) keeps only the
    /// final checkpoint.
    pub checkpoint_every: u64,
    /// Validation cadence in steps; 0 (default) disables validation.
    pub val_every: u64,
    /// Held-out items scored per validation pass. Default 8.
    pub val_max_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stages: Vec::new(),
            stage_steps: [40, 16, 8],
            shift: 5.0,
            null_caption_p: 0.1,
            token_budget: DEFAULT_TOKEN_BUDGET,
            batch_cap: DEFAULT_BATCH_CAP,
            checkpoint_every: 0,
            val_every: 0,
            val_max_samples: 8,
        }
    }
}

impl RunConfig {
    /// Parse and validate `path`. Unknown keys anywhere in the tree are
    /// parse errors.
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // NaN fails every comparison below, so it is rejected everywhere.
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
            }
        };
        self.model.validate().map_err(ConfigError::Invalid)?;
        if self.buckets.is_empty() {
            return Err(ConfigError::Invalid("bucket list is empty".into()));
        }
        if self.sampler.steps == 0 {
            return Err(ConfigError::Invalid("sampler.steps must be positive".into()));
        }
        positive("sampler.shift", self.sampler.shift)?;
        positive("train.shift", self.train.shift)?;
        if !(0.0..=1.0).contains(&self.train.null_caption_p) {
            return Err(ConfigError::Invalid(format!(
                "train.null_caption_p must lie in [0, 1], got {}",
                self.train.null_caption_p
            )));
        }
        if self.train.batch_cap == 0 {
            return Err(ConfigError::Invalid("train.batch_cap must be positive".into()));
        }
        if self.curate.motion_threshold < 0.0 || self.curate.motion_threshold.is_nan() {
            return Err(ConfigError::Invalid(format!(
                "curate.motion_threshold must be nonnegative, got {}",
                self.curate.motion_threshold
            )));
        }
        positive("curate.motion_upweight", self.curate.motion_upweight)?;
        Ok(())
    }

    /// Digest of the parsed config; checkpoints carry it, so edits to the
    /// file orphan old checkpoints instead of silently mixing experiments.
    pub fn digest(&self) -> [u8; 32] {
        config_digest(self)
    }

    /// The manifest written by `curate` and read by `train`.
    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir.join("manifest.jsonl")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_yields_the_documented_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.strategy, RopeStrategy::Marginal);
        assert_eq!(cfg.buckets, toy_buckets());
        assert_eq!(cfg.train.stage_steps, [40, 16, 8]);
        assert_eq!(cfg.train.token_budget, DEFAULT_TOKEN_BUDGET);
        cfg.validate().unwrap();
    }

    #[test]
    fn full_round_trip_preserves_every_field() {
        let mut cfg = RunConfig {
            seed: 17,
            strategy: RopeStrategy::Even,
            ..RunConfig::default()
        };
        cfg.train.val_every = 5;
        cfg.curate.n_records = 12;
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for body in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"bogus": 1}}"#,
            r#"{"curate": {"scene": {"bogus": 1}}}"#,
            r#"{"model": {"bogus": 1}}"#,
            r#"{"sampler": {"bogus": 1}}"#,
        ] {
            assert!(
                serde_json::from_str::<RunConfig>(body).is_err(),
                "{body} should be rejected"
            );
        }
    }

    #[test]
    fn validation_catches_out_of_range_fields() {
        let assert_invalid = |mutate: fn(&mut RunConfig)| {
            let mut cfg = RunConfig::default();
            mutate(&mut cfg);
            assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        };
        assert_invalid(|c| c.buckets.clear());
        assert_invalid(|c| c.sampler.steps = 0);
        assert_invalid(|c| c.train.null_caption_p = 1.5);
        assert_invalid(|c| c.train.shift = 0.0);
        assert_invalid(|c| c.train.batch_cap = 0);
        assert_invalid(|c| c.curate.motion_upweight = 0.0);
        assert_invalid(|c| c.model.dim = 0);
    }

    #[test]
    fn digests_track_content_not_identity() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.digest(), c.digest());
        let mut d = RunConfig::default();
        d.train.stage_steps = [41, 16, 8];
        assert_ne!(a.digest(), d.digest());
    }

    #[test]
    fn load_reports_the_offending_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");

        match RunConfig::load(&path) {
            Err(ConfigError::Io { path: p, .. }) => assert_eq!(p, path),
            other => panic!("expected Io, got {other:?}"),
        }

        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));

        std::fs::write(&path, r#"{"seed": 9}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 9);

        std::fs::write(&path, r#"{"train": {"null_caption_p": 2.0}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Invalid(_))));
    }
}
