//! `key = value` experiment configuration with `#` comments.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use distill_lab::mae::{ModelDims, ToyTaskConfig, TrainConfig, Variant};
use distill_lab::spectral::FeatureKind;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },

    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },

    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },

    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        line: usize,
        value: String,
        reason: String,
    },

    #[error("{}: {reason}", location(.key, .line))]
    Invalid {
        key: String,
        line: Option<usize>,
        reason: String,
    },

    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

fn location(key: &str, line: &Option<usize>) -> String {
    match line {
        Some(l) => format!("line {l}: `{key}`"),
        None => format!("`{key}`"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunMode {
    Theory,
    Mae,
    Ablate,
    Lowres,
    Verify,
}

impl RunMode {
    pub fn name(&self) -> &'static str {
        match self {
            RunMode::Theory => "theory",
            RunMode::Mae => "mae",
            RunMode::Ablate => "ablate",
            RunMode::Lowres => "lowres",
            RunMode::Verify => "verify",
        }
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theory" => Ok(RunMode::Theory),
            "mae" => Ok(RunMode::Mae),
            "ablate" => Ok(RunMode::Ablate),
            "lowres" => Ok(RunMode::Lowres),
            "verify" => Ok(RunMode::Verify),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialWeight {
    Gaussian,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Token,
    Patch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Option<RunMode>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// `T′`: distillation rounds, in both the linear and the toy setting.
    pub rounds: usize,

    // linear theory
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub input_dim: usize,
    pub n_pretrain: usize,
    pub shift: f64,
    pub feature: FeatureKind,
    pub lambda: f64,
    /// `T`: fine-tuning horizon of the gradient flow.
    pub horizon: f64,
    pub w00: InitialWeight,
    pub delta: f64,
    pub rademacher_c: f64,

    // toy masked autoencoder
    pub data: DataKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub gamma: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub steps_init: usize,
    pub steps_pretrain: usize,
    pub steps_finetune: usize,
    pub batch: usize,
    pub distill_weight: f64,
    pub variant: Variant,
    pub n_train: usize,
    pub n_test: usize,
    pub n_general: usize,
    pub topic_sharpness: f64,
    pub patch_noise: f64,
    pub lowres_sizes: Vec<usize>,

    // verify
    pub verify_instances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: None,
            seeds: vec![0, 1, 2, 3, 4],
            out: PathBuf::from("results"),
            rounds: 3,
            n: 8,
            d: 32,
            p: 2,
            input_dim: 6,
            n_pretrain: 64,
            shift: 1.0,
            feature: FeatureKind::RandomTanh,
            lambda: 0.05,
            horizon: 5.0,
            w00: InitialWeight::Pretrained,
            delta: 0.05,
            rademacher_c: 1.0,
            data: DataKind::Token,
            seq_len: 8,
            vocab: 32,
            classes: 4,
            gamma: 0.3,
            lr_pretrain: 0.003,
            lr_finetune: 0.1,
            steps_init: 200,
            steps_pretrain: 150,
            steps_finetune: 150,
            batch: 32,
            distill_weight: 1.0,
            variant: Variant::Representation,
            n_train: 32,
            n_test: 256,
            n_general: 256,
            topic_sharpness: 1.5,
            patch_noise: 1.0,
            lowres_sizes: vec![4, 8, 16, 32],
            verify_instances: 20,
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "seeds",
    "out",
    "rounds",
    "n",
    "d",
    "p",
    "input_dim",
    "n_pretrain",
    "shift",
    "feature",
    "lambda",
    "horizon",
    "w00",
    "delta",
    "rademacher_c",
    "data",
    "seq_len",
    "vocab",
    "classes",
    "gamma",
    "lr_pretrain",
    "lr_finetune",
    "steps_init",
    "steps_pretrain",
    "steps_finetune",
    "batch",
    "distill_weight",
    "variant",
    "n_train",
    "n_test",
    "n_general",
    "topic_sharpness",
    "patch_noise",
    "lowres_sizes",
    "verify_instances",
];

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("`{}` is not a valid list entry", s.trim()))
        })
        .collect()
}

fn parse_value<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse::<T>().map_err(|_| "cannot parse".to_string())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    key: key.to_string(),
                    line,
                });
            }
            if lines.insert(key.to_string(), line).is_some() {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line,
                });
            }
            cfg.set(key, value)
                .map_err(|reason| ConfigError::InvalidValue {
                    key: key.to_string(),
                    line,
                    value: value.to_string(),
                    reason,
                })?;
        }
        cfg.validate_with(&lines)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "mode" => self.mode = Some(value.parse()?),
            "seeds" => self.seeds = parse_list(value)?,
            "out" => self.out = PathBuf::from(value),
            "rounds" => self.rounds = parse_value(value)?,
            "n" => self.n = parse_value(value)?,
            "d" => self.d = parse_value(value)?,
            "p" => self.p = parse_value(value)?,
            "input_dim" => self.input_dim = parse_value(value)?,
            "n_pretrain" => self.n_pretrain = parse_value(value)?,
            "shift" => self.shift = parse_value(value)?,
            "feature" => {
                self.feature = match value {
                    "identity" => FeatureKind::Identity,
                    "tanh" => FeatureKind::RandomTanh,
                    "fourier" => FeatureKind::RandomFourier,
                    _ => return Err("expected identity, tanh or fourier".into()),
                }
            }
            "lambda" => self.lambda = parse_value(value)?,
            "horizon" => self.horizon = parse_value(value)?,
            "w00" => {
                self.w00 = match value {
                    "gaussian" => InitialWeight::Gaussian,
                    "pretrained" => InitialWeight::Pretrained,
                    _ => return Err("expected gaussian or pretrained".into()),
                }
            }
            "delta" => self.delta = parse_value(value)?,
            "rademacher_c" => self.rademacher_c = parse_value(value)?,
            "data" => {
                self.data = match value {
                    "token" => DataKind::Token,
                    "patch" => DataKind::Patch,
                    _ => return Err("expected token or patch".into()),
                }
            }
            "seq_len" => self.seq_len = parse_value(value)?,
            "vocab" => self.vocab = parse_value(value)?,
            "classes" => self.classes = parse_value(value)?,
            "gamma" => self.gamma = parse_value(value)?,
            "lr_pretrain" => self.lr_pretrain = parse_value(value)?,
            "lr_finetune" => self.lr_finetune = parse_value(value)?,
            "steps_init" => self.steps_init = parse_value(value)?,
            "steps_pretrain" => self.steps_pretrain = parse_value(value)?,
            "steps_finetune" => self.steps_finetune = parse_value(value)?,
            "batch" => self.batch = parse_value(value)?,
            "distill_weight" => self.distill_weight = parse_value(value)?,
            "variant" => {
                self.variant = Variant::parse(value).ok_or_else(|| "unknown variant".to_string())?
            }
            "n_train" => self.n_train = parse_value(value)?,
            "n_test" => self.n_test = parse_value(value)?,
            "n_general" => self.n_general = parse_value(value)?,
            "topic_sharpness" => self.topic_sharpness = parse_value(value)?,
            "patch_noise" => self.patch_noise = parse_value(value)?,
            "lowres_sizes" => self.lowres_sizes = parse_list(value)?,
            "verify_instances" => self.verify_instances = parse_value(value)?,
            _ => unreachable!("keys are checked against KEYS"),
        }
        Ok(())
    }

    /// Cross-field checks against the preconditions of the library.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with(&HashMap::new())
    }

    fn validate_with(&self, lines: &HashMap<String, usize>) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: String| ConfigError::Invalid {
            key: key.to_string(),
            line: lines.get(key).copied(),
            reason,
        };
        if self.seeds.is_empty() {
            return Err(fail("seeds", "at least one seed is required".into()));
        }
        if self.n == 0 || self.p == 0 || self.input_dim == 0 {
            return Err(fail("n", "n, p and input_dim must be >= 1".into()));
        }
        if self.d < self.n {
            return Err(fail(
                "d",
                format!(
                    "over-parameterization needs d >= n ({} < {})",
                    self.d, self.n
                ),
            ));
        }
        if self.feature == FeatureKind::Identity && self.d != self.input_dim {
            return Err(fail(
                "feature",
                "identity features need d = input_dim".into(),
            ));
        }
        for (key, v) in [
            ("lambda", self.lambda),
            ("horizon", self.horizon),
            ("rademacher_c", self.rademacher_c),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(fail(key, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(fail(
                "delta",
                format!("must lie in (0, 1), got {}", self.delta),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(fail(
                "gamma",
                format!("must lie in (0, 1), got {}", self.gamma),
            ));
        }
        for (key, v) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
            ("distill_weight", self.distill_weight),
            ("patch_noise", self.patch_noise),
            ("topic_sharpness", self.topic_sharpness),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(fail(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.seq_len < 2 {
            return Err(fail(
                "seq_len",
                "sequences need at least 2 positions".into(),
            ));
        }
        if self.vocab == 0 || self.classes == 0 || self.batch == 0 {
            return Err(fail(
                "classes",
                "vocab, classes and batch must be >= 1".into(),
            ));
        }
        if self.n_train < self.classes || self.n_test == 0 || self.n_general == 0 {
            return Err(fail(
                "n_train",
                "need n_train >= classes and non-empty test and general sets".into(),
            ));
        }
        if let Some(&small) = self.lowres_sizes.iter().find(|&&s| s < self.classes) {
            return Err(fail(
                "lowres_sizes",
                format!("size {small} is below the class count {}", self.classes),
            ));
        }
        if self.verify_instances == 0 {
            return Err(fail("verify_instances", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        let base = match self.data {
            DataKind::Token => ModelDims::token(self.classes),
            DataKind::Patch => ModelDims::patch(self.classes),
        };
        ModelDims {
            seq_len: self.seq_len,
            vocab: self.vocab,
            ..base
        }
    }

    pub fn task_config(&self, seed: u64) -> ToyTaskConfig {
        ToyTaskConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            n_general: self.n_general,
            topic_sharpness: self.topic_sharpness,
            patch_noise: self.patch_noise,
            ..ToyTaskConfig::new(self.model_dims(), seed)
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            lr_pretrain: self.lr_pretrain,
            lr_finetune: self.lr_finetune,
            steps_pretrain: self.steps_pretrain,
            steps_finetune: self.steps_finetune,
            batch: self.batch,
            rounds: self.rounds,
            variant: self.variant,
            distill_weight: self.distill_weight,
            seed,
        }
    }

    /// Configuration of the general-domain run that produces `θ_init`.
    pub fn init_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps_pretrain: self.steps_init,
            seed: seed.wrapping_add(1_000_003),
            ..self.train_config(seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# header\nmode = theory\nseeds = 3, 5 # trailing\n\nlambda=0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Some(RunMode::Theory));
        assert_eq!(cfg.seeds, vec![3, 5]);
        assert_eq!(cfg.lambda, 0.5);
    }

    #[test]
    fn unknown_key_reports_name_and_line() {
        let err = ExperimentConfig::parse("n = 4\n\nlamda = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "lamda".into(),
                line: 3
            }
        );
        assert!(err.to_string().contains("lamda"));
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(matches!(
            ExperimentConfig::parse("n = four"),
            Err(ConfigError::InvalidValue { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("n 4"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("n = 4\nn = 5"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        let err = ExperimentConfig::parse("gamma = 1.5").unwrap_err();
        assert!(
            matches!(err, ConfigError::Invalid { line: Some(1), .. }),
            "{err:?}"
        );
        assert!(ExperimentConfig::parse("d = 4\nn = 8").is_err());
        assert!(ExperimentConfig::parse("lowres_sizes = 2, 8").is_err());
    }
}
