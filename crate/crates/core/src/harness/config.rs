//! Training configuration, read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, Schedule};
use super::task::{Task, TaskKind};
use crate::engine::{Algorithm, ModelGraph};
use crate::error::{Error, Result};
use crate::layers::{Activation, BlockSpec, InitSpec, LayerKind, LayerSpec};
use crate::numkit::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Plain,
    Relu,
    Gamma,
    Gru,
    Lstm,
}

impl ModelKind {
    pub fn is_recurrent(self) -> bool {
        matches!(self, ModelKind::Gru | ModelKind::Lstm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Tanh,
    Relu,
    Identity,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Tanh => Activation::Tanh,
            ActivationName::Relu => Activation::Relu,
            ActivationName::Identity => Activation::Identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Chain length `L`: stack depth, or sequence length for RNNs.
    pub layers: usize,
    /// State width; the cell width for an LSTM.
    pub width: usize,
    /// Hidden width of a two-layer residual block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default = "default_activation")]
    pub activation: ActivationName,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_scale")]
    pub init_scale: f64,
    #[serde(default)]
    pub forget_bias: f64,
}

fn default_activation() -> ActivationName {
    ActivationName::Tanh
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Adding,
    Copy,
    CharLm,
    RowImage,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskName,
    pub batch_size: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    /// Data file for `char_lm` and `row_image`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Features per step for `row_image`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    /// Class count for `row_image`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl TaskConfig {
    pub fn task_kind(&self) -> Result<TaskKind> {
        let path = || {
            self.path
                .clone()
                .ok_or_else(|| Error::Config(format!("task {:?} needs a path", self.kind)))
        };
        let extra = self.features.is_some() || self.classes.is_some();
        Ok(match self.kind {
            TaskName::RowImage => TaskKind::RowImage {
                path: path()?,
                features: self
                    .features
                    .ok_or_else(|| Error::Config("row_image needs features".into()))?,
                classes: self
                    .classes
                    .ok_or_else(|| Error::Config("row_image needs classes".into()))?,
            },
            _ if extra => return Err(Error::Config("features and classes apply to row_image only".into())),
            TaskName::CharLm => TaskKind::CharLm { path: path()? },
            _ if self.path.is_some() => return Err(Error::Config("this task takes no path".into())),
            TaskName::Adding => TaskKind::Adding,
            TaskName::Copy => TaskKind::Copy,
            TaskName::Teacher => TaskKind::Teacher,
        })
    }
}

fn default_eval_batches() -> usize {
    4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Backprop,
    Highway,
    Fpi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub name: AlgorithmName,
    #[serde(default)]
    pub k: usize,
    /// `(step, k)` pairs: from `step` on, use `k`. Overrides `k` once the
    /// first listed step is reached.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k_schedule: Vec<(usize, usize)>,
}

impl AlgorithmConfig {
    pub fn k_at(&self, step: usize) -> usize {
        self.k_schedule
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(self.k, |&(_, k)| k)
    }

    pub fn at(&self, step: usize) -> Algorithm {
        match self.name {
            AlgorithmName::Backprop => Algorithm::Backprop,
            AlgorithmName::Highway => Algorithm::Highway(self.k_at(step)),
            AlgorithmName::Fpi => Algorithm::Fpi(self.k_at(step)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Metrics row cadence in steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Held-out loss cadence; 0 disables.
    #[serde(default)]
    pub eval_every: usize,
    /// Cosine similarity against the exact gradient on a probe batch; 0
    /// disables.
    #[serde(default)]
    pub diag_every: usize,
}

fn default_log_every() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_every: default_log_every(),
            eval_every: 0,
            diag_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub algorithm: AlgorithmConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub run: RunConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.layers == 0 || m.width == 0 {
            return Err(Error::Config("model layers and width must be positive".into()));
        }
        if m.kind != ModelKind::Gamma && m.gamma != 0.0 {
            return Err(Error::Config("gamma only applies to the gamma model".into()));
        }
        if m.kind.is_recurrent() && m.hidden.is_some() {
            return Err(Error::Config("hidden applies to residual blocks only".into()));
        }
        if !(m.init_scale > 0.0 && m.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        let task_recurrent = self.task.task_kind()?.shape(m.width).recurrent;
        if task_recurrent != m.kind.is_recurrent() {
            return Err(Error::Config(if task_recurrent {
                "this task feeds per-step inputs and needs a gru or lstm model".into()
            } else {
                "the teacher task needs a residual model".into()
            }));
        }
        if self.task.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.algorithm.name == AlgorithmName::Backprop && (self.algorithm.k != 0 || !self.algorithm.k_schedule.is_empty()) {
            return Err(Error::Config("backprop takes no k".into()));
        }
        if self.algorithm.k_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("k_schedule steps must be strictly increasing".into()));
        }
        if self.run.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.layer_spec().validate()
    }

    fn layer_spec(&self) -> LayerSpec {
        let m = &self.model;
        let shape = self.task_kind().shape(m.width);
        let block = BlockSpec {
            hidden: m.hidden,
            activation: m.activation.into(),
        };
        match m.kind {
            ModelKind::Plain => LayerSpec::residual(LayerKind::PlainResidual, m.width, block),
            ModelKind::Relu => LayerSpec::residual(LayerKind::ReluResidual, m.width, block),
            ModelKind::Gamma => LayerSpec::residual(LayerKind::GammaResidual(m.gamma), m.width, block),
            ModelKind::Gru => LayerSpec::gru(m.width, shape.input_dim),
            ModelKind::Lstm => LayerSpec::lstm(m.width, shape.input_dim),
        }
    }

    /// Task kind of an already validated config.
    fn task_kind(&self) -> TaskKind {
        self.task.task_kind().expect("validated config")
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            scale: self.model.init_scale,
            forget_bias: self.model.forget_bias,
        }
    }

    /// Freshly initialized model; parameters come from `seed` stream 0.
    pub fn build_model(&self) -> Result<ModelGraph> {
        let spec = self.layer_spec();
        let shape = self.task_kind().shape(self.model.width);
        let rng = Rng::new(self.run.seed).split(streams::INIT);
        if self.model.kind.is_recurrent() {
            ModelGraph::recurrent(spec, self.model.layers, shape.head, shape.attach, &rng, self.init_spec())
        } else {
            ModelGraph::stack(
                vec![spec; self.model.layers],
                shape.head,
                shape.attach,
                &rng,
                self.init_spec(),
            )
        }
    }

    pub fn build_task(&self) -> Result<Task> {
        Task::new(
            self.task.task_kind()?,
            self.model.layers,
            self.task.batch_size,
            self.model.width,
            self.run.seed,
        )
    }
}

/// Generator streams split off the run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const PROBE: u64 = 3;
}

#[cfg(test)]
mod tests {
    use super::*;

    const ADDING: &str = r#"
[model]
kind = "gru"
layers = 16
width = 8

[task]
kind = "adding"
batch_size = 4

[algorithm]
name = "highway"
k = 2
k_schedule = [[0, 1], [50, 4]]

[optimizer]
name = "adam"
lr = 0.001

[schedule]
steps = 100
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = TrainConfig::from_toml(ADDING).unwrap();
        assert_eq!(cfg.algorithm.k_at(0), 1);
        assert_eq!(cfg.algorithm.k_at(49), 1);
        assert_eq!(cfg.algorithm.k_at(50), 4);
        assert_eq!(cfg.schedule.warmup_fraction, 0.1);
        let again = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        let model = cfg.build_model().unwrap();
        assert_eq!(model.len(), 16);
        assert_eq!(model.layers[0].input_dim, 2);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = ADDING.replace("width = 8", "width = 8\ndepth = 3");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
        let text = ADDING.replace("[schedule]", "[extra]\nx = 1\n[schedule]");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_inconsistent_settings() {
        for (from, to) in [
            ("lr = 0.001", "lr = -1.0"),
            ("kind = \"gru\"", "kind = \"plain\""),
            ("steps = 100", "steps = 100\nwarmup_fraction = 1.0"),
            ("name = \"highway\"", "name = \"backprop\""),
            ("[[0, 1], [50, 4]]", "[[50, 1], [0, 4]]"),
        ] {
            assert!(TrainConfig::from_toml(&ADDING.replace(from, to)).is_err(), "{to}");
        }
    }

    #[test]
    fn teacher_task_with_residual_stack() {
        let text = ADDING
            .replace("kind = \"gru\"", "kind = \"gamma\"\ngamma = 0.5\nhidden = 12")
            .replace("kind = \"adding\"", "kind = \"teacher\"");
        let cfg = TrainConfig::from_toml(&text).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.layers[0].kind, LayerKind::GammaResidual(0.5));
        assert_eq!(model.params.groups.len(), 17);
    }
}
