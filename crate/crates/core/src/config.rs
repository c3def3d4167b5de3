//! Run configuration shared by the pipeline and the command line.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::subspace::DiscriminationConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Examples per task before splitting.
    pub example_count: usize,
    /// Per-task overrides of `example_count`, keyed by task name.
    pub example_counts: BTreeMap<TaskKind, usize>,
    pub operand_digits: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            example_count: 2000,
            // Chain and lookup need more examples to reach useful base accuracy.
            example_counts: BTreeMap::from([(TaskKind::Chain, 6000), (TaskKind::Lookup, 6000)]),
            operand_digits: 2,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, task: TaskKind, seed: u64) -> TaskSpec {
        let count = self.example_counts.get(&task).copied().unwrap_or(self.example_count);
        let mut spec = TaskSpec::new(task, count, seed);
        spec.operand_digits = self.operand_digits;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Tasks in the pretraining mixture and in every report.
    pub tasks: Vec<TaskKind>,
    pub dissimilar_target: TaskKind,
    pub similar_target: TaskKind,
    /// Tasks the similar-pair target is discriminated against.
    pub similar_others: Vec<TaskKind>,
    pub learn_task: TaskKind,
    /// Discriminate the learned task against the pretrained tasks before adding it.
    pub learn_discriminate: bool,
    /// Gradient ascent stops once target validation accuracy falls to this
    /// fraction of the base accuracy.
    pub ga_stop_fraction: f64,
    pub ga_max_steps: usize,
    pub sweep_ranks: Vec<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            dissimilar_target: TaskKind::Sort,
            similar_target: TaskKind::Chain,
            similar_others: vec![TaskKind::Add],
            learn_task: TaskKind::Lookup,
            learn_discriminate: true,
            ga_stop_fraction: 0.3,
            ga_max_steps: 400,
            sweep_ranks: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Cached base checkpoints and subspaces.
    pub artifact_dir: PathBuf,
    /// One subdirectory per run.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            artifact_dir: PathBuf::from("artifacts"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Overrides the seeds of the model and training sections.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub discrimination: DiscriminationConfig,
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Propagates the master seed and validates every section.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.discrimination.validate().map_err(cfg)?;
        let s = &self.scenario;
        if s.tasks.len() < 2 {
            return Err(Error::Config("scenario.tasks needs at least two tasks".into()));
        }
        let mut seen = s.tasks.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != s.tasks.len() {
            return Err(Error::Config("scenario.tasks lists a task twice".into()));
        }
        for (what, t) in [
            ("dissimilar_target", s.dissimilar_target),
            ("similar_target", s.similar_target),
            ("learn_task", s.learn_task),
        ] {
            if !s.tasks.contains(&t) {
                return Err(Error::Config(format!("scenario.{what} `{t}` is not in scenario.tasks")));
            }
        }
        for t in &s.similar_others {
            if !s.tasks.contains(t) || *t == s.similar_target {
                return Err(Error::Config(format!("scenario.similar_others: invalid task `{t}`")));
            }
        }
        if !(0.0..1.0).contains(&s.ga_stop_fraction) {
            return Err(Error::Config("scenario.ga_stop_fraction must lie in [0, 1)".into()));
        }
        if let Some(&k) = s.sweep_ranks.iter().find(|&&k| k == 0 || k > self.model.d_model) {
            return Err(Error::Config(format!("sweep rank {k} outside 1..={}", self.model.d_model)));
        }
        if self.train.k > self.model.d_model {
            return Err(Error::Config(format!(
                "train.k = {} exceeds model.d_model = {}",
                self.train.k, self.model.d_model
            )));
        }
        for &t in &s.tasks {
            let spec = self.data.spec(t, self.seed);
            spec.validate().map_err(cfg)?;
            if spec.max_total_len() > self.model.context_len {
                return Err(Error::Config(format!(
                    "task `{t}` needs context {} but model.context_len is {}",
                    spec.max_total_len(),
                    self.model.context_len
                )));
            }
        }
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = RunConfig::default().resolved().unwrap();
        assert_eq!(c.train.seed, c.seed);
    }

    #[test]
    fn invalid_sections_are_config_errors() {
        let mut c = RunConfig::default();
        c.train.patience = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.scenario.similar_others = vec![TaskKind::Chain];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.model.context_len = 8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.scenario.sweep_ranks = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.train.k = 4;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#);
        assert!(err.is_err());
    }
}
