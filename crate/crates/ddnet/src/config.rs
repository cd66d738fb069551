//! One JSON document configuring a whole run — data synthesis, model
//! architecture, optimization, and evaluation — plus dotted-path overrides
//! of the form `train.lr=0.01` from the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SynthesisSpec;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("override {0:?} must look like section.field=value")]
    BadOverride(String),
    #[error("override path {0:?} does not name a config field")]
    UnknownPath(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Fully-resolved settings for one run. Defaults describe the desk-scale
/// reference experiment; any subset can be overridden from a file or the
/// command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthesisSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Read a config file; absent keys keep their defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), detail: e.to_string() })
    }

    /// Apply `section.field=value` overrides. Values parse as JSON (numbers,
    /// booleans, arrays); anything unparseable is treated as a string. Paths
    /// must name existing fields — typos are rejected rather than ignored.
    pub fn with_overrides(self, overrides: &[String]) -> Result<RunConfig> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = serde_json::to_value(&self)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(ov.clone()))?;
            let path = path.trim();
            if path.is_empty() {
                return Err(ConfigError::BadOverride(ov.clone()));
            }
            let value: serde_json::Value = serde_json::from_str(raw.trim())
                .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
            let mut segments = path.split('.').collect::<Vec<_>>();
            let last = segments.pop().expect("split always yields one segment");
            let mut cursor = &mut root;
            for seg in segments {
                cursor = cursor
                    .get_mut(seg)
                    .ok_or_else(|| ConfigError::UnknownPath(path.to_string()))?;
            }
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| ConfigError::UnknownPath(path.to_string()))?;
            if !obj.contains_key(last) {
                return Err(ConfigError::UnknownPath(path.to_string()));
            }
            obj.insert(last.to_string(), value);
        }
        serde_json::from_value(root).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Validate every section and their agreement with each other.
    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.model.d_sem != self.data.d_sem || self.model.d_tex != self.data.d_tex {
            return fail(format!(
                "model stream widths ({}, {}) do not match the data spec ({}, {})",
                self.model.d_sem, self.model.d_tex, self.data.d_sem, self.data.d_tex
            ));
        }
        if self.data.frames > self.model.t_max {
            return fail(format!(
                "data.frames ({}) exceeds model.t_max ({})",
                self.data.frames, self.model.t_max
            ));
        }
        if self.model.tda_enabled && self.model.k_domains != self.data.k_domains as usize {
            return fail(format!(
                "model.k_domains ({}) must match data.k_domains ({}) for the \
                 adversarial head to cover every domain",
                self.model.k_domains, self.data.k_domains
            ));
        }
        Ok(())
    }

    /// Pretty JSON for the echoed copy written into each run directory.
    pub fn to_pretty_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_deserialize_from_an_empty_document() {
        RunConfig::default().validate().unwrap();
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.data.frames, 64);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.eval.theta, 0.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn load_reads_files_and_reports_failures_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.01}, "model": {"tau": 0.5}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.tau, 0.5);
        assert_eq!(cfg.train.epochs, 30);

        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.json")),
            Err(ConfigError::Io { .. })
        ));
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn unknown_keys_in_a_config_file_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"trian": {"lr": 0.01}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
        std::fs::write(&path, r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn overrides_rewrite_nested_fields() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.lr=0.02".into(),
                "train.loss_weights.video=0.5".into(),
                "model.tau=0.1".into(),
                "data.segment_len_range=[4, 8]".into(),
                "model.tda_enabled=false".into(),
            ])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.train.loss_weights.video, 0.5);
        assert_eq!(cfg.model.tau, 0.1);
        assert_eq!(cfg.data.segment_len_range, (4, 8));
        assert!(!cfg.model.tda_enabled);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.train.loss_weights.adversarial, 0.005);
    }

    #[test]
    fn overrides_reject_bad_shapes_paths_and_types() {
        let bad_shape = RunConfig::default().with_overrides(&["train.lr".into()]);
        assert!(matches!(bad_shape, Err(ConfigError::BadOverride(_))));

        let unknown_leaf = RunConfig::default().with_overrides(&["train.nope=1".into()]);
        assert!(matches!(unknown_leaf, Err(ConfigError::UnknownPath(p)) if p == "train.nope"));

        let unknown_section = RunConfig::default().with_overrides(&["nope.lr=1".into()]);
        assert!(matches!(unknown_section, Err(ConfigError::UnknownPath(_))));

        // A path that dead-ends inside a scalar is a path error, not a panic.
        let through_scalar = RunConfig::default().with_overrides(&["train.lr.x=1".into()]);
        assert!(matches!(through_scalar, Err(ConfigError::UnknownPath(_))));

        // Unquoted words become strings, which then fail typed deserialization.
        let bad_type = RunConfig::default().with_overrides(&["train.lr=fast".into()]);
        assert!(matches!(bad_type, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn cross_section_disagreements_are_rejected() {
        let mismatch = RunConfig::default()
            .with_overrides(&["model.d_sem=10".into()])
            .unwrap();
        assert!(matches!(mismatch.validate(), Err(ConfigError::Invalid(_))));

        let short = RunConfig::default()
            .with_overrides(&["model.t_max=32".into()])
            .unwrap();
        assert!(matches!(short.validate(), Err(ConfigError::Invalid(_))));

        let domains = RunConfig::default()
            .with_overrides(&["model.k_domains=2".into()])
            .unwrap();
        assert!(matches!(domains.validate(), Err(ConfigError::Invalid(_))));

        // With the trace branch off, the expert count no longer has to match.
        let domains_off = RunConfig::default()
            .with_overrides(&["model.k_domains=2".into(), "model.tda_enabled=false".into()])
            .unwrap();
        domains_off.validate().unwrap();
    }
}
