//! Run configuration: `key = value` files overridden by `--key value` flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use tags_core::eval::GapOptions;
use tags_core::generator::{GenerationConfig, Masking};
use tags_core::model::ModelConfig;
use tags_core::training::{GeneratorMode, NegativeStrategy, OptimizerKind, TrainConfig};

/// Rejected configuration; maps to exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Every tunable of a run. Paths are optional; commands check the ones
/// they need.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub steps: usize,
    pub n: usize,
    pub oracle: bool,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1, 1);
        Self {
            train: TrainConfig::default(),
            d_model: model.d_model,
            layers: model.layers,
            heads: model.heads,
            ffn_hidden: model.ffn_hidden,
            steps: 500,
            n: 64,
            oracle: false,
            data: None,
            checkpoint: None,
            metrics: None,
            out: None,
        }
    }
}

/// Recognised keys, in help order.
pub const KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch-size",
    "optimizer",
    "lr",
    "weight-decay",
    "clip",
    "warmup-steps",
    "mode",
    "negatives",
    "woc-all-positions",
    "alpha",
    "lambda-irtm",
    "lambda-mlm",
    "lambda-istm",
    "lambda-wod",
    "lambda-woc",
    "k",
    "l",
    "m",
    "tau",
    "mask-ratio",
    "masking",
    "d-model",
    "layers",
    "heads",
    "ffn-hidden",
    "n",
    "oracle",
    "data",
    "checkpoint",
    "metrics",
    "out",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("invalid value {value:?} for key {key:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!("invalid value {value:?} for key {key:?}"))),
    }
}

impl RunConfig {
    /// Sets one key. Underscores and hyphens are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('_', "-");
        let k = key.as_str();
        let t = &mut self.train;
        let w = &mut t.weights;
        let g = &mut t.generation;
        match k {
            "seed" => t.seed = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "batch-size" => t.batch_size = parse(k, value)?,
            "optimizer" => t.optimizer = parse::<OptimizerKind>(k, value)?,
            "lr" => t.lr = parse(k, value)?,
            "weight-decay" => t.weight_decay = parse(k, value)?,
            "clip" => t.clip = parse(k, value)?,
            "warmup-steps" => t.warmup_steps = parse(k, value)?,
            "mode" => t.mode = parse::<GeneratorMode>(k, value)?,
            "negatives" => t.negatives = parse::<NegativeStrategy>(k, value)?,
            "woc-all-positions" => t.woc_all_positions = parse_bool(k, value)?,
            "alpha" => w.alpha = parse(k, value)?,
            "lambda-irtm" => w.irtm = parse(k, value)?,
            "lambda-mlm" => w.mlm = parse(k, value)?,
            "lambda-istm" => w.istm = parse(k, value)?,
            "lambda-wod" => w.wod = parse(k, value)?,
            "lambda-woc" => w.woc = parse(k, value)?,
            "k" => g.k = parse(k, value)?,
            "l" => g.l = parse(k, value)?,
            "m" => g.m = parse(k, value)?,
            "tau" => g.tau = parse(k, value)?,
            "mask-ratio" => g.mask_ratio = parse(k, value)?,
            "masking" => g.masking = parse::<Masking>(k, value)?,
            "d-model" => self.d_model = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "heads" => self.heads = parse(k, value)?,
            "ffn-hidden" => self.ffn_hidden = parse(k, value)?,
            "n" => self.n = parse(k, value)?,
            "oracle" => self.oracle = parse_bool(k, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(ConfigError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Builds a config from command-line words: an optional `--config FILE`
    /// read first, then `--key value` or `--key=value` overrides in order.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut file = None;
        let mut it = args.iter();
        while let Some(word) = it.next() {
            let Some(flag) = word.strip_prefix("--") else {
                return Err(ConfigError(format!("unexpected argument {word:?}")));
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| ConfigError(format!("missing value for --{flag}")))?;
                    (flag.to_string(), v.clone())
                }
            };
            if key == "config" {
                file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_file(&path)?;
        }
        for (k, v) in pairs {
            config.set(&k, &v)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.model_config(1, 1)
            .validate()
            .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn model_config(&self, vocab_size: usize, d_img: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            ..ModelConfig::new(vocab_size, d_img)
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        self.train.generation
    }

    pub fn gap_options(&self) -> GapOptions {
        GapOptions {
            batch_size: self.train.batch_size,
            generation: self.train.generation,
            seed: self.train.seed,
        }
    }

    /// `key = value` dump that `apply_text` reads back unchanged.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let g = &t.generation;
        let mut lines = vec![
            format!("seed = {}", t.seed),
            format!("steps = {}", self.steps),
            format!("batch-size = {}", t.batch_size),
            format!("optimizer = {}", t.optimizer),
            format!("lr = {}", t.lr),
            format!("weight-decay = {}", t.weight_decay),
            format!("clip = {}", t.clip),
            format!("warmup-steps = {}", t.warmup_steps),
            format!("mode = {}", t.mode),
            format!("negatives = {}", t.negatives),
            format!("woc-all-positions = {}", t.woc_all_positions),
            format!("alpha = {}", w.alpha),
            format!("lambda-irtm = {}", w.irtm),
            format!("lambda-mlm = {}", w.mlm),
            format!("lambda-istm = {}", w.istm),
            format!("lambda-wod = {}", w.wod),
            format!("lambda-woc = {}", w.woc),
            format!("k = {}", g.k),
            format!("l = {}", g.l),
            format!("m = {}", g.m),
            format!("tau = {}", g.tau),
            format!("mask-ratio = {}", g.mask_ratio),
            format!("masking = {}", g.masking),
            format!("d-model = {}", self.d_model),
            format!("layers = {}", self.layers),
            format!("heads = {}", self.heads),
            format!("ffn-hidden = {}", self.ffn_hidden),
            format!("n = {}", self.n),
            format!("oracle = {}", self.oracle),
        ];
        for (key, path) in [
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("metrics", &self.metrics),
            ("out", &self.out),
        ] {
            if let Some(p) = path {
                lines.push(format!("{key} = {}", p.display()));
            }
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn flags_override_defaults() {
        let c = RunConfig::from_args(&words("--lr 0.01 --mode static --k=5 --lambda_mlm 0.5")).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.mode, GeneratorMode::Static);
        assert_eq!(c.train.generation.k, 5);
        assert_eq!(c.train.weights.mlm, 0.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_args(&words("--learning-rate 0.1")).unwrap_err();
        assert!(err.0.contains("learning-rate"), "{err}");
    }

    #[test]
    fn bad_values_and_dangling_flags_are_rejected() {
        assert!(RunConfig::from_args(&words("--lr fast")).is_err());
        assert!(RunConfig::from_args(&words("--lr")).is_err());
        assert!(RunConfig::from_args(&words("lr 0.1")).is_err());
        assert!(RunConfig::from_args(&words("--alpha -1")).is_err());
        assert!(RunConfig::from_args(&words("--heads 5")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::from_args(&words("--tau 0.7 --masking word --out x.csv --negatives random")).unwrap();
        c.train.lr = 0.1 + 0.2;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "dump").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_lines_report_their_position() {
        let mut c = RunConfig::default();
        let err = c.apply_text("lr = 0.1\n# note\n\nbogus = 3\n", "run.cfg").unwrap_err();
        assert!(err.0.starts_with("run.cfg:4:"), "{err}");
        assert_eq!(c.train.lr, 0.1);
    }
}
