//! Run configuration, read from TOML. Unknown keys are rejected and every
//! field is validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::Preset;
use crate::error::{Error, Result};
use crate::nn::{OptimConfig, OptimKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    #[serde(default)]
    pub n_critics: usize,
    #[serde(default)]
    pub lstm_layers: usize,
    #[serde(default)]
    pub lstm_units: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Use only the first this-many training examples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
    },
    Spirals {
        n_per_class: usize,
        classes: usize,
        noise_std: f64,
        /// Points per class in the separately seeded test set.
        #[serde(default = "default_spiral_test")]
        test_per_class: usize,
    },
    Char {
        corpus: PathBuf,
        bptt: usize,
        #[serde(default = "default_valid_fraction")]
        valid_fraction: f64,
    },
}

fn default_spiral_test() -> usize {
    100
}

fn default_valid_fraction() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Sequential,
    Decoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    #[default]
    Test,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    /// Stop after this many steps; 0 means no cap.
    #[serde(default)]
    pub max_steps: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub max_inflight: usize,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Write a train row every this many steps; 0 disables them.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Probe every this many steps (and always at step 0 and each epoch
    /// end); 0 keeps only those.
    #[serde(default)]
    pub probe_every: u64,
    #[serde(default = "default_probe_batch")]
    pub probe_batch: usize,
    #[serde(default)]
    pub probe_source: ProbeSource,
    #[serde(default)]
    pub check_finite: bool,
    #[serde(default)]
    pub log_wall_clock: bool,
    /// Also evaluate every sub-model at each epoch end.
    #[serde(default = "default_true")]
    pub eval_heads: bool,
}

fn one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> u64 {
    100
}
fn default_probe_batch() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_main", deserialize_with = "main_with_defaults")]
    pub main: OptimConfig,
    #[serde(default = "OptimConfig::critic_default")]
    pub critic: OptimConfig,
}

fn default_main() -> OptimConfig {
    OptimConfig::main_default(0.1)
}

/// The main optimizer's weight decay defaults to 5e-4 rather than 0.
fn main_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<OptimConfig, D::Error> {
    let mut v = serde_json::Value::deserialize(d)?;
    if let Some(table) = v.as_object_mut() {
        table.entry("weight_decay").or_insert(serde_json::json!(5e-4));
    }
    serde_json::from_value(v).map_err(serde::de::Error::custom)
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            main: default_main(),
            critic: OptimConfig::critic_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses TOML text; relative paths are kept as written.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, msg)
        })
    }

    /// Reads a config file, resolves relative paths against its directory
    /// and validates it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataConfig::Char { corpus, .. } => fix(corpus),
            DataConfig::Spirals { .. } => {}
        }
        if let Some(d) = &mut self.output.dir {
            fix(d);
        }
    }

    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.model.preset, self.model.lstm_layers, self.model.lstm_units)
    }

    /// Checks every field; file paths must exist.
    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if t.epochs == 0 && t.max_steps == 0 {
            return Err(Error::config("train.epochs", "set epochs or max_steps"));
        }
        if t.max_inflight == 0 {
            return Err(Error::config("train.max_inflight", "must be at least 1"));
        }
        if t.probe_batch == 0 {
            return Err(Error::config("train.probe_batch", "must be at least 1"));
        }
        self.optim.main.validate("optim.main")?;
        self.optim.critic.validate("optim.critic")?;
        let exists = |field: &str, p: &Path| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::config(field, format!("file {} does not exist", p.display())))
            }
        };
        match &self.data {
            DataConfig::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
            } => {
                exists("data.train_images", train_images)?;
                exists("data.train_labels", train_labels)?;
                exists("data.test_images", test_images)?;
                exists("data.test_labels", test_labels)?;
                if *train_limit == Some(0) {
                    return Err(Error::config("data.train_limit", "must be at least 1"));
                }
            }
            DataConfig::Spirals {
                n_per_class,
                classes,
                noise_std,
                test_per_class,
            } => {
                if *n_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("data.n_per_class", "must be at least 1"));
                }
                if *classes < 2 {
                    return Err(Error::config("data.classes", "need at least two classes"));
                }
                if !(noise_std.is_finite() && *noise_std >= 0.0) {
                    return Err(Error::config("data.noise_std", "must be finite and non-negative"));
                }
            }
            DataConfig::Char {
                corpus,
                bptt,
                valid_fraction,
            } => {
                exists("data.corpus", corpus)?;
                if *bptt == 0 {
                    return Err(Error::config("data.bptt", "must be at least 1"));
                }
                if !(0.0 < *valid_fraction && *valid_fraction < 1.0) {
                    return Err(Error::config("data.valid_fraction", "must lie strictly between 0 and 1"));
                }
            }
        }
        Ok(())
    }

    /// A small spiral-classification config, convenient for tests.
    pub fn spirals_example() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                preset: "mlp-32-32-3".into(),
                n_critics: 1,
                lstm_layers: 0,
                lstm_units: 0,
            },
            data: DataConfig::Spirals {
                n_per_class: 100,
                classes: 3,
                noise_std: 0.05,
                test_per_class: 50,
            },
            train: TrainConfig {
                batch_size: 30,
                epochs: 2,
                max_steps: 0,
                mode: Mode::Sequential,
                max_inflight: 1,
                shuffle: true,
                log_every: 5,
                probe_every: 10,
                probe_batch: 64,
                probe_source: ProbeSource::Test,
                check_finite: false,
                log_wall_clock: false,
                eval_heads: true,
            },
            optim: OptimSection {
                main: OptimConfig {
                    kind: OptimKind::Sgd,
                    schedule: Schedule::Constant,
                    ..OptimConfig::main_default(0.05)
                },
                critic: OptimConfig::adam(1e-3),
            },
            output: OutputConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
seed = 3
[model]
preset = "mlp-16-3"
[data]
kind = "spirals"
n_per_class = 10
classes = 3
noise_std = 0.1
[train]
batch_size = 8
epochs = 1
"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let c = RunConfig::from_toml(MIN).unwrap();
        c.validate().unwrap();
        assert_eq!(c.optim.main.momentum, 0.9);
        assert_eq!(c.optim.main.weight_decay, 5e-4);
        assert_eq!(c.optim.critic.kind, OptimKind::Adam);
        assert_eq!(c.optim.critic.lr, 1e-4);
        assert_eq!(c.train.mode, Mode::Sequential);
    }

    #[test]
    fn main_section_keeps_weight_decay_default() {
        let text = format!("{MIN}[optim.main]\nkind = \"sgd\"\nlr = 0.2\n[optim.critic]\nkind = \"adam\"\nlr = 1e-3\n");
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.optim.main.lr, 0.2);
        assert_eq!(c.optim.main.weight_decay, 5e-4);
        assert_eq!(c.optim.critic.weight_decay, 0.0);
        let text = format!("{MIN}[optim.main]\nkind = \"sgd\"\nlr = 0.2\nweight_decay = 0.0\n");
        assert_eq!(RunConfig::from_toml(&text).unwrap().optim.main.weight_decay, 0.0);
        let text = format!("{MIN}[optim.main]\nkind = \"sgd\"\nlr = 0.2\nmomentun = 0.5\n");
        assert!(RunConfig::from_toml(&text).unwrap_err().to_string().contains("momentun"));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::spirals_example();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = MIN.replace("epochs = 1", "epochs = 1\nepohcs = 2");
        let e = RunConfig::from_toml(&text).unwrap_err();
        assert!(e.to_string().contains("epohcs"), "{e}");
    }

    #[test]
    fn missing_path_named() {
        let text = r#"
[model]
preset = "mlp-300-150-10"
[data]
kind = "mnist"
train_images = "a"
train_labels = "b"
test_images = "c"
[train]
batch_size = 8
epochs = 1
"#;
        let e = RunConfig::from_toml(text).unwrap_err();
        assert!(e.to_string().contains("test_labels"), "{e}");
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::spirals_example();
        c.train.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        let mut c = RunConfig::spirals_example();
        c.optim.main.momentum = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::spirals_example();
        c.model.preset = "vgg".into();
        assert!(c.validate().is_err());
    }
}
