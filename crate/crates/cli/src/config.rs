//! Experiment configuration: a JSON document with a fixed schema.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tavlab::analysis::HorizonConfig;
use tavlab::{Activation, MlpArchitecture, MlpModel, TaskDataset, TaskSpec};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    pub arch: ArchConfig,
    pub tasks: TasksConfig,
    pub train: TrainSection,
    pub analysis: AnalysisConfig,
    /// Where artifacts go; not part of the config hash.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("tavlab-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Weights are drawn from `N(0, init_gain² / fan_in)`.
    pub init_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    pub count: usize,
    pub samples: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub m_x: f64,
    pub separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eta: f64,
    pub alpha: f64,
    /// Finetuning epochs for `finetune` and `merge`.
    pub epochs: usize,
    pub convergence_tol: f64,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// The first `gap_tasks` tasks of the family enter the gap, lemma and
    /// bound runs.
    pub gap_tasks: usize,
    /// `k` of the gap scan; the curvature coefficient uses `h = k − 2`.
    pub gap_epochs: usize,
    pub eta_grid: Vec<f64>,
    pub alpha_sweep: Vec<f64>,
    pub lemma_epochs: Vec<usize>,
    pub bounds_alpha: f64,
    pub bounds_eta: f64,
    pub dominance_epochs: usize,
    pub horizon_alpha_grid: Vec<f64>,
    pub pca_rounds: usize,
    pub pca_epochs_per_round: usize,
}

/// A config document that could not be read or does not fit the schema.
#[derive(Debug)]
pub struct ConfigError {
    pub file: PathBuf,
    /// Dotted path of the offending field, when known.
    pub field: Option<String>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file.display())?;
        if let (Some(l), Some(c)) = (self.line, self.column) {
            write!(f, ":{l}:{c}")?;
        }
        if let Some(field) = &self.field {
            write!(f, ": field `{field}`")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.to_path_buf(),
            field: None,
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, file: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let full = inner.to_string();
            // the position is reported separately
            let message = match full.rsplit_once(" at line ") {
                Some((m, _)) if inner.line() > 0 => m.to_string(),
                _ => full,
            };
            let mut field = (path != ".").then_some(path);
            // a missing field is reported at its parent; name the field itself
            if let Some(name) = message
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next())
            {
                field = Some(match field {
                    Some(parent) => format!("{parent}.{name}"),
                    None => name.to_string(),
                });
            }
            ConfigError {
                file: file.to_path_buf(),
                field,
                line: Some(inner.line()),
                column: Some(inner.column()),
                message,
            }
        })?;
        cfg.validate().map_err(|(field, message)| ConfigError {
            file: file.to_path_buf(),
            field: Some(field.to_string()),
            line: None,
            column: None,
            message,
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let fail = |f: &'static str, m: String| Err((f, m));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return fail(
                "format_version",
                format!(
                    "unsupported version {}, expected {CONFIG_FORMAT_VERSION}",
                    self.format_version
                ),
            );
        }
        if let Err(e) = self.architecture() {
            return fail("arch.dims", e.to_string());
        }
        if !(self.arch.init_gain > 0.0) || !self.arch.init_gain.is_finite() {
            return fail("arch.init_gain", "must be positive".into());
        }
        let t = &self.tasks;
        if t.count == 0 || t.samples == 0 {
            return fail("tasks.count", "need at least one task with one sample".into());
        }
        if t.input_dim != self.arch.dims[0] {
            return fail(
                "tasks.input_dim",
                format!("{} does not match arch.dims[0] = {}", t.input_dim, self.arch.dims[0]),
            );
        }
        if t.classes != *self.arch.dims.last().unwrap() || t.classes < 2 {
            return fail("tasks.classes", "must match the output width and be ≥ 2".into());
        }
        if !(t.m_x > 0.0) || !(t.separation >= 0.0) {
            return fail("tasks.m_x", "m_x must be positive and separation non-negative".into());
        }
        let tr = &self.train;
        if !(tr.eta > 0.0) || !tr.eta.is_finite() {
            return fail("train.eta", "must be positive".into());
        }
        if !tr.alpha.is_finite() {
            return fail("train.alpha", "must be finite".into());
        }
        if tr.epochs == 0 || tr.max_epochs == 0 {
            return fail("train.epochs", "must be ≥ 1".into());
        }
        if !(tr.convergence_tol > 0.0) {
            return fail("train.convergence_tol", "must be positive".into());
        }
        let a = &self.analysis;
        if a.gap_tasks == 0 || a.gap_tasks > t.count {
            return fail("analysis.gap_tasks", format!("must be in 1..={}", t.count));
        }
        if a.gap_epochs < 2 {
            return fail("analysis.gap_epochs", "must be ≥ 2 so the curvature term exists".into());
        }
        if a.eta_grid.len() < 5
            || a.eta_grid.windows(2).any(|w| !(w[1] < w[0]))
            || a.eta_grid.iter().any(|e| !(*e > 0.0))
        {
            return fail(
                "analysis.eta_grid",
                "need ≥ 5 positive, strictly decreasing step sizes".into(),
            );
        }
        if a.alpha_sweep.is_empty() {
            return fail("analysis.alpha_sweep", "must not be empty".into());
        }
        if a.lemma_epochs.iter().any(|&m| m == 0) {
            return fail("analysis.lemma_epochs", "entries must be ≥ 1".into());
        }
        if !(a.bounds_eta > 0.0) {
            return fail("analysis.bounds_eta", "must be positive".into());
        }
        if a.dominance_epochs < 2 {
            return fail("analysis.dominance_epochs", "must be ≥ 2".into());
        }
        if a.horizon_alpha_grid.is_empty() {
            return fail("analysis.horizon_alpha_grid", "must not be empty".into());
        }
        if a.pca_rounds < 2 || a.pca_epochs_per_round == 0 {
            return fail("analysis.pca_rounds", "need ≥ 2 rounds of ≥ 1 epoch".into());
        }
        Ok(())
    }

    pub fn architecture(&self) -> tavlab::Result<MlpArchitecture> {
        MlpArchitecture::new(self.arch.dims.clone(), self.arch.activation)
    }

    pub fn base_model(&self) -> tavlab::Result<MlpModel> {
        Ok(MlpModel::random(&self.architecture()?, self.seed, self.arch.init_gain))
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            samples: self.tasks.samples,
            input_dim: self.tasks.input_dim,
            classes: self.tasks.classes,
            m_x: self.tasks.m_x,
            separation: self.tasks.separation,
        }
    }

    pub fn family(&self) -> tavlab::Result<Vec<TaskDataset>> {
        tavlab::taskgen::make_task_family(self.seed, self.tasks.count, &self.task_spec())
    }

    pub fn horizon(&self) -> HorizonConfig {
        HorizonConfig {
            eta: self.train.eta,
            convergence_tol: self.train.convergence_tol,
            max_epochs: self.train.max_epochs,
            alpha_grid: self.analysis.horizon_alpha_grid.clone(),
        }
    }

    /// SHA-256 of the canonical JSON of every field except `output_dir`.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("config serialises");
        hex(&Sha256::digest(bytes))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = include_str!("../configs/reference.json");

    fn reference() -> ExperimentConfig {
        ExperimentConfig::parse(REFERENCE, Path::new("reference.json")).unwrap()
    }

    #[test]
    fn reference_config_parses() {
        let cfg = reference();
        assert_eq!(cfg.tasks.count, 7);
        assert_eq!(cfg.architecture().unwrap().param_count(), 8 * 16 + 16 * 3);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = reference();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.eta *= 2.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_field_names_its_path() {
        let mut v: serde_json::Value = serde_json::from_str(REFERENCE).unwrap();
        v["train"].as_object_mut().unwrap().remove("eta");
        let err = ExperimentConfig::parse(&v.to_string(), Path::new("c.json")).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("train.eta"));
        assert!(err.to_string().contains("train.eta"));
    }

    #[test]
    fn unknown_field_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(REFERENCE).unwrap();
        v["arch"]["width"] = 3.into();
        let err = ExperimentConfig::parse(&v.to_string(), Path::new("c.json")).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("arch.width"));
    }

    #[test]
    fn semantic_errors_name_fields() {
        let mut cfg = reference();
        cfg.tasks.input_dim = 3;
        assert_eq!(cfg.validate().unwrap_err().0, "tasks.input_dim");
        let mut cfg = reference();
        cfg.analysis.eta_grid.reverse();
        assert_eq!(cfg.validate().unwrap_err().0, "analysis.eta_grid");
        let mut cfg = reference();
        cfg.format_version = 9;
        assert_eq!(cfg.validate().unwrap_err().0, "format_version");
    }
}
