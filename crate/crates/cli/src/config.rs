//! `key=value` run configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use styleinv_core::iterator::{InitScheme, IterConfig};
use styleinv_core::optim::AdamConfig;
use styleinv_core::trainer::{LossWeights, TrainConfig, TrainMode, DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS};

/// A problem with the configuration or the command line (exit code 1).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Uint,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: String,
    help: &'static str,
}

macro_rules! key {
    ($name:literal, $kind:expr, $default:expr, $help:literal) => {
        Key { name: $name, kind: $kind, default: $default.to_string(), help: $help }
    };
}

const INIT_CHOICES: &[&str] = &["encoder", "mean", "random"];
const EDIT_CHOICES: &[&str] = &["morph", "mix", "colorize"];

fn schema() -> &'static [Key] {
    use Kind::*;
    static KEYS: std::sync::OnceLock<Vec<Key>> = std::sync::OnceLock::new();
    KEYS.get_or_init(|| {
        let it = IterConfig::default();
        let adam = AdamConfig::trainer_default();
        let w = LossWeights::default();
        vec![
            key!("seed", Uint, 0, "master seed: epoch order and random initialization"),
            key!("generator_seed", Uint, 1, "seed of the frozen generator"),
            key!("phi_seed", Uint, 2, "seed of the perceptual feature network"),
            key!("corpus_seed", Uint, 3, "seed of the synthetic corpus"),
            key!("embed_seed", Uint, 5, "seed of the embedding network initialization"),
            key!("threads", Uint, 0, "worker threads; 0 = one for train, all cores otherwise"),
            key!("corpus_dir", Text, "corpus", "corpus directory"),
            key!("corpus_size", Uint, 512, "number of generated samples"),
            key!("train_dir", Text, "train", "training output directory"),
            key!("checkpoint", Text, "train/model.ckpt", "trained model used by invert, bench, edit and eval"),
            key!("out_dir", Text, "", "output directory; empty = the subcommand name"),
            key!("epochs", Uint, DEFAULT_EPOCHS, "training epochs"),
            key!("batch_size", Uint, DEFAULT_BATCH_SIZE, "training batch size"),
            key!("lambda_mse", Float, w.mse, "weight of the image-level loss"),
            key!("lambda_per", Float, w.per, "weight of the feature-level loss"),
            key!("lambda_w", Float, w.latent, "weight of the latent-level loss"),
            key!("encoder_lr", Float, adam.lr, "encoder Adam learning rate"),
            key!("encoder_beta1", Float, adam.beta1, "encoder Adam beta1"),
            key!("encoder_beta2", Float, adam.beta2, "encoder Adam beta2"),
            key!("iter_steps", Uint, it.steps, "iterator steps per training batch"),
            key!("iter_lr", Float, it.lr, "iterator Adam learning rate"),
            key!("iter_alpha", Float, it.alpha, "weight of phi in the iterator objective"),
            key!("iter_beta1", Float, it.beta1, "iterator Adam beta1"),
            key!("iter_beta2", Float, it.beta2, "iterator Adam beta2"),
            key!("single_encoder", Bool, false, "train the single-encoder ablation"),
            key!("no_iterator", Bool, false, "train against the input image without the iterator"),
            key!("offline", Bool, false, "precompute all iterator targets from mean init, then train"),
            key!("finetune_generator", Bool, false, "also update the generator (no_iterator only)"),
            key!("resume", Bool, true, "continue from the latest checkpoint in train_dir"),
            key!("image", Text, "", "input image for invert"),
            key!("init", Choice(INIT_CHOICES), "encoder", "initialization scheme for invert"),
            key!("invert_steps", Uint, it.steps, "iterator steps for invert"),
            key!("bench_samples", Uint, 20, "held-out images used by the iterator tables"),
            key!("bench_long_steps", Uint, 1000, "steps of the long-run comparison"),
            key!("bench_trials", Uint, 10, "timing trials"),
            key!("no_iterator_checkpoint", Text, "", "ablation model; empty = row omitted"),
            key!("single_encoder_checkpoint", Text, "", "ablation model; empty = row omitted"),
            key!("offline_checkpoint", Text, "", "offline-pipeline model; empty = row omitted"),
            key!("edit_op", Choice(EDIT_CHOICES), "morph", "edit to perform"),
            key!("edit_a", Text, "", "first edit input image"),
            key!("edit_b", Text, "", "second edit input image"),
            key!("mix_layers", Uint, 4, "layers taken from the style code"),
            key!("eval_samples", Uint, 0, "held-out samples to evaluate; 0 = all"),
        ]
    })
}

fn check_value(kind: Kind, name: &str, v: &str) -> Result<(), ConfigError> {
    let ok = match kind {
        Kind::Uint => v.parse::<u64>().is_ok(),
        Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => v == "true" || v == "false",
        Kind::Text => !v.contains('\n'),
        Kind::Choice(c) => c.contains(&v),
    };
    if ok {
        return Ok(());
    }
    let want = match kind {
        Kind::Uint => "a non-negative integer".to_string(),
        Kind::Float => "a finite number".to_string(),
        Kind::Bool => "true or false".to_string(),
        Kind::Text => "a single-line string".to_string(),
        Kind::Choice(c) => format!("one of {}", c.join(", ")),
    };
    Err(ConfigError(format!("{name}={v:?}: expected {want}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: schema().iter().map(|k| (k.name, k.default.clone())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = schema()
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| ConfigError(format!("unknown config key {key:?}")))?;
        let value = value.trim();
        check_value(k.kind, k.name, value)?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies the lines of a config file. Blank lines and `#` comments are
    /// skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(ConfigError(format!("{origin}:{}: duplicate key {k:?}", i + 1)));
            }
            self.set(k, v).map_err(|e| ConfigError(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} missing from schema"))
    }

    pub fn text(&self, key: &str) -> &str {
        self.raw(key)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> T {
        // Values were checked against their kind when set.
        self.raw(key)
            .parse()
            .unwrap_or_else(|_| panic!("config key {key:?} holds an unchecked value"))
    }

    pub fn uint(&self, key: &str) -> u64 {
        self.parsed(key)
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parsed(key)
    }

    pub fn float(&self, key: &str) -> f64 {
        self.parsed(key)
    }

    pub fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.parsed("init")
    }

    pub fn iter_config(&self, steps: usize) -> IterConfig {
        IterConfig {
            steps,
            lr: self.float("iter_lr"),
            alpha: self.float("iter_alpha"),
            beta1: self.float("iter_beta1"),
            beta2: self.float("iter_beta2"),
            ..IterConfig::default()
        }
    }

    pub fn train_mode(&self) -> Result<TrainMode, ConfigError> {
        match (self.flag("no_iterator"), self.flag("offline")) {
            (true, true) => Err(ConfigError("no_iterator and offline are mutually exclusive".into())),
            (true, false) => Ok(TrainMode::NoIterator),
            (false, true) => Ok(TrainMode::Offline),
            (false, false) => Ok(TrainMode::Collaborative),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let c = TrainConfig {
            weights: LossWeights {
                mse: self.float("lambda_mse"),
                per: self.float("lambda_per"),
                latent: self.float("lambda_w"),
            },
            epochs: self.usize("epochs"),
            batch_size: self.usize("batch_size"),
            iterator: self.iter_config(self.usize("iter_steps")),
            adam: AdamConfig::new(self.float("encoder_lr"), self.float("encoder_beta1"), self.float("encoder_beta2")),
            seed: self.uint("seed"),
            mode: self.train_mode()?,
            finetune_generator: self.flag("finetune_generator"),
        };
        c.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(c)
    }

    /// Every key in schema order, one `key=value` per line.
    pub fn render(&self) -> String {
        schema()
            .iter()
            .map(|k| format!("{}={}\n", k.name, self.raw(k.name)))
            .collect()
    }

    /// A commented template listing every key with its default.
    pub fn template() -> String {
        let d = Self::default();
        schema()
            .iter()
            .map(|k| format!("# {}\n{}={}\n", k.help, k.name, d.raw(k.name)))
            .collect()
    }
}
