//! Experiment configuration: one JSON document defines a run.

use std::path::{Path, PathBuf};

use mtlab::diagnostics::TraceMode;
use mtlab::optim::AdamConfig;
use mtlab::tasks::{default_suite, load_dataset, TaskDataset, TaskParams};
use mtlab::trainer::{ArchSpec, SamplerConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_N_TRAIN: usize = 512;
pub const DEFAULT_N_EVAL: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSize {
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
}

fn default_n_train() -> usize {
    DEFAULT_N_TRAIN
}

fn default_n_eval() -> usize {
    DEFAULT_N_EVAL
}

impl Default for SuiteSize {
    fn default() -> Self {
        SuiteSize { n_train: DEFAULT_N_TRAIN, n_eval: DEFAULT_N_EVAL }
    }
}

/// One task: a dataset file or generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSource {
    Dataset { dataset: PathBuf },
    Generated(TaskParams),
}

/// The built-in 11-task suite (generated from the experiment seed) or an
/// explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSuite {
    Default { default_suite: SuiteSize },
    List(Vec<TaskSource>),
}

impl Default for TaskSuite {
    fn default() -> Self {
        TaskSuite::Default { default_suite: SuiteSize::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaName {
    Uniform,
}

/// Task-sampling weights, or `"uniform"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    Named(AlphaName),
    Weights(Vec<f64>),
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Named(AlphaName::Uniform)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tasks: TaskSuite,
    /// Encoder layers and the segmentation head layout; classification
    /// heads are a dense layer sized by the task.
    #[serde(default)]
    pub arch: ArchSpec,
    #[serde(default)]
    pub alpha: Alpha,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub trace: TraceMode,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_iterations() -> u64 {
    5000
}

fn default_batch() -> usize {
    8
}

fn default_log_every() -> u64 {
    100
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn num_tasks(&self) -> usize {
        match &self.tasks {
            TaskSuite::Default { default_suite: s } => default_suite(self.seed, s.n_train, s.n_eval).len(),
            TaskSuite::List(list) => list.len(),
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        match &self.alpha {
            Alpha::Named(AlphaName::Uniform) => SamplerConfig::uniform(self.num_tasks()),
            Alpha::Weights(w) => SamplerConfig::new(w),
        }
        .map_err(|e| CliError::Config(format!("alpha: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            trace: self.trace,
            adam: self.adam,
        }
    }

    /// Checks every invariant that does not need the datasets themselves.
    pub fn validate(&self) -> Result<(), CliError> {
        let k = self.num_tasks();
        if k == 0 {
            return Err(CliError::Config("the task list is empty".into()));
        }
        if let Alpha::Weights(w) = &self.alpha {
            if w.len() != k {
                return Err(CliError::Config(format!("alpha has {} weights for {k} tasks", w.len())));
            }
        }
        self.sampler()?;
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let TaskSuite::List(list) = &self.tasks {
            for src in list {
                if let TaskSource::Dataset { dataset } = src {
                    if !dataset.is_file() {
                        return Err(CliError::Config(format!("dataset file {} does not exist", dataset.display())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn task_params(&self) -> Vec<Option<TaskParams>> {
        match &self.tasks {
            TaskSuite::Default { default_suite: s } => {
                default_suite(self.seed, s.n_train, s.n_eval).into_iter().map(Some).collect()
            }
            TaskSuite::List(list) => list
                .iter()
                .map(|src| match src {
                    TaskSource::Generated(p) => Some(p.clone()),
                    TaskSource::Dataset { .. } => None,
                })
                .collect(),
        }
    }

    /// Loads or generates every task's dataset, in order.
    pub fn datasets(&self) -> Result<Vec<TaskDataset>, CliError> {
        let params = self.task_params();
        let paths: Vec<Option<&PathBuf>> = match &self.tasks {
            TaskSuite::Default { .. } => vec![None; params.len()],
            TaskSuite::List(list) => list
                .iter()
                .map(|src| match src {
                    TaskSource::Dataset { dataset } => Some(dataset),
                    TaskSource::Generated(_) => None,
                })
                .collect(),
        };
        params
            .iter()
            .zip(paths)
            .map(|(p, path)| match (p, path) {
                (Some(p), _) => p.generate().map_err(CliError::from),
                (None, Some(path)) => load_dataset(path).map_err(|e| CliError::data(path.display(), e)),
                (None, None) => unreachable!("every task has a source"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_experiment() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c.num_tasks(), 11);
        assert_eq!((c.iterations, c.batch_size), (5000, 8));
        assert_eq!(c.alpha, Alpha::Named(AlphaName::Uniform));
        assert_eq!(c.trace, TraceMode::Exact);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn parses_task_lists_and_weights() {
        let c = ExperimentConfig::from_json(
            r#"{
                "tasks": [
                    {"generator": "classification", "id": 0, "name": "a", "num_classes": 2,
                     "input_shape": [3, 8, 8], "n_train": 10, "n_eval": 4, "difficulty": 0.0, "seed": 1},
                    {"dataset": "missing.mtld"}
                ],
                "alpha": [0.7, 0.3],
                "trace": {"mode": "sketch", "dim": 64, "seed": 3},
                "adam": {"lr": 0.01}
            }"#,
        )
        .unwrap();
        assert_eq!(c.num_tasks(), 2);
        assert_eq!(c.adam.beta2, 0.999);
        assert!(matches!(c.validate(), Err(CliError::Config(m)) if m.contains("missing.mtld")));
    }

    #[test]
    fn rejects_invalid_documents() {
        for bad in [
            r#"{"alpha": [0.5, 0.5]}"#,
            r#"{"alpha": "skewed"}"#,
            r#"{"log_every": 0}"#,
            r#"{"checkpoint_every": 0}"#,
            r#"{"batch_size": 0}"#,
            r#"{"tasks": []}"#,
            r#"{"adam": {"beta1": 1.5}}"#,
            r#"{"iterationz": 3}"#,
        ] {
            let res = ExperimentConfig::from_json(bad).and_then(|c| c.validate());
            assert!(matches!(res, Err(CliError::Config(_))), "{bad}");
        }
    }
}
