//! Run configuration: plain-text `key = value` files with `[section]`
//! headers, driving every command from one parsed value.
//!
//! Parsing is fail-fast: an unknown section, an unknown key, or a
//! malformed value is an error with its line number, never a silent
//! fallback to a default. Every key has a default, so a config file only
//! states what it changes. `canonical()` serialises the full key set in
//! a fixed order and round-trips through `parse`, which is what run
//! manifests embed.

use std::fmt::Write as _;
use std::path::Path;

use crate::evalinfer::EvalOptions;
use crate::losses::LossWeights;
use crate::model::{AblationFlags, ModelConfig};
use crate::scenegen::GenParams;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Everything a run needs: model size, dataset recipe, loss weights,
/// inference thresholds, the optimizer schedule, and the stage switches.
#[derive(Clone, Debug)]
pub struct Config {
    pub model: ModelConfig,
    pub gen: GenParams,
    pub weights: LossWeights,
    pub train: TrainConfig,
    /// Odd pixel width of the ground-truth density splat.
    pub kernel_size: usize,
    /// Gaussian width rule: `sigma = kernel_size / sigma_divisor`.
    pub sigma_divisor: f64,
    pub cls_threshold: f64,
    pub token_threshold: f64,
    pub crop_trigger: f64,
    /// Localization match radius in pixels.
    pub tau: f64,
    /// Scenes generated by `gen`, split by `train_fraction`.
    pub scenes: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelConfig {
                channels: 16,
                queries: 24,
                decoder_blocks: 2,
                heads: 4,
                cade_depth: 2,
                flags: AblationFlags::full(),
            },
            gen: GenParams {
                image_size: (128, 128),
                count_range: (2, 8),
                n_classes: 2,
                attrs_per_class: 3,
                max_attrs_per_object: 2,
                min_separation: 8.0,
                margin: 8.0,
                scale_range: (2.0, 6.0),
                noise_amplitude: 0.05,
                context_amplitude: 0.3,
                max_expressions_per_scene: 4,
            },
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            kernel_size: 15,
            sigma_divisor: 4.0,
            cls_threshold: crate::evalinfer::CLS_THRESHOLD,
            token_threshold: crate::evalinfer::TOKEN_THRESHOLD,
            crop_trigger: crate::evalinfer::CROP_TRIGGER,
            tau: crate::evalinfer::DEFAULT_TAU,
            scenes: 200,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

const SECTIONS: [&str; 8] = [
    "model",
    "data",
    "density",
    "loss",
    "inference",
    "optimizer",
    "ablation",
    "run",
];

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str, line: usize) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!("line {line}: bad value {value:?} for {section}.{key}"))
    })
}

fn parse_bool(section: &str, key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: {section}.{key} takes true or false, got {value:?}"
        ))),
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Defaults overridden by the given text, then validated.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.trim();
            if stripped.is_empty() || stripped.starts_with('#') {
                continue;
            }
            if let Some(inner) = stripped.strip_prefix('[') {
                let name = inner
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line}: unclosed section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(Error::Config(format!("line {line}: unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let section = section
                .as_deref()
                .ok_or_else(|| Error::Config(format!("line {line}: key before any [section]")))?;
            cfg.set(section, key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        macro_rules! num {
            () => {
                parse_num(section, key, value, line)?
            };
        }
        match (section, key) {
            ("model", "channels") => self.model.channels = num!(),
            ("model", "queries") => self.model.queries = num!(),
            ("model", "decoder_blocks") => self.model.decoder_blocks = num!(),
            ("model", "heads") => self.model.heads = num!(),
            ("model", "cade_depth") => self.model.cade_depth = num!(),

            ("data", "image_height") => self.gen.image_size.0 = num!(),
            ("data", "image_width") => self.gen.image_size.1 = num!(),
            ("data", "count_min") => self.gen.count_range.0 = num!(),
            ("data", "count_max") => self.gen.count_range.1 = num!(),
            ("data", "classes") => self.gen.n_classes = num!(),
            ("data", "attrs_per_class") => self.gen.attrs_per_class = num!(),
            ("data", "max_attrs_per_object") => self.gen.max_attrs_per_object = num!(),
            ("data", "min_separation") => self.gen.min_separation = num!(),
            ("data", "margin") => self.gen.margin = num!(),
            ("data", "scale_min") => self.gen.scale_range.0 = num!(),
            ("data", "scale_max") => self.gen.scale_range.1 = num!(),
            ("data", "noise_amplitude") => self.gen.noise_amplitude = num!(),
            ("data", "context_amplitude") => self.gen.context_amplitude = num!(),
            ("data", "max_expressions_per_scene") => self.gen.max_expressions_per_scene = num!(),
            ("data", "scenes") => self.scenes = num!(),
            ("data", "train_fraction") => self.train_fraction = num!(),

            ("density", "kernel_size") => self.kernel_size = num!(),
            ("density", "sigma_divisor") => self.sigma_divisor = num!(),

            ("loss", "lambda1") => self.weights.lambda1 = num!(),
            ("loss", "lambda2") => self.weights.lambda2 = num!(),
            ("loss", "alpha") => self.weights.alpha = num!(),

            ("inference", "cls_threshold") => self.cls_threshold = num!(),
            ("inference", "token_threshold") => self.token_threshold = num!(),
            ("inference", "crop_trigger") => self.crop_trigger = num!(),
            ("inference", "tau") => self.tau = num!(),

            ("optimizer", "step_size") => self.train.step_size = num!(),
            ("optimizer", "weight_decay") => self.train.weight_decay = num!(),
            ("optimizer", "beta1") => self.train.beta1 = num!(),
            ("optimizer", "beta2") => self.train.beta2 = num!(),
            ("optimizer", "eps") => self.train.eps = num!(),
            ("optimizer", "epochs") => self.train.epochs = num!(),
            ("optimizer", "decay_epoch") => self.train.decay_epoch = num!(),
            ("optimizer", "decay_factor") => self.train.decay_factor = num!(),

            ("ablation", "cadgen") => self.model.flags.cadgen = parse_bool(section, key, value, line)?,
            ("ablation", "spatial_attn") => {
                self.model.flags.spatial_attn = parse_bool(section, key, value, line)?
            }
            ("ablation", "channel_attn") => {
                self.model.flags.channel_attn = parse_bool(section, key, value, line)?
            }
            ("ablation", "text_init") => {
                self.model.flags.text_init = parse_bool(section, key, value, line)?
            }
            ("ablation", "density_init") => {
                self.model.flags.density_init = parse_bool(section, key, value, line)?
            }
            ("ablation", "density_guided_inference") => {
                self.model.flags.density_guided_inference = parse_bool(section, key, value, line)?
            }

            ("run", "seed") => self.seed = num!(),

            _ => {
                return Err(Error::Config(format!(
                    "line {line}: unknown key {section}.{key}"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.gen.validate()?;
        self.train.validate()?;
        for (name, v) in [
            ("loss.lambda1", self.weights.lambda1),
            ("loss.lambda2", self.weights.lambda2),
            ("loss.alpha", self.weights.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        for (name, v) in [
            ("inference.cls_threshold", self.cls_threshold),
            ("inference.token_threshold", self.token_threshold),
        ] {
            if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                return Err(Error::Config(format!("{name} = {v} outside (0, 1)")));
            }
        }
        if !self.crop_trigger.is_finite() || self.crop_trigger < 0.0 {
            return Err(Error::Config(format!(
                "inference.crop_trigger = {} must be finite and >= 0",
                self.crop_trigger
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("inference.tau = {} must be positive", self.tau)));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "density.kernel_size = {} must be odd",
                self.kernel_size
            )));
        }
        if !self.sigma_divisor.is_finite() || self.sigma_divisor <= 0.0 {
            return Err(Error::Config(format!(
                "density.sigma_divisor = {} must be positive",
                self.sigma_divisor
            )));
        }
        if self.scenes == 0 {
            return Err(Error::Config("data.scenes must be >= 1".into()));
        }
        if !self.train_fraction.is_finite()
            || self.train_fraction <= 0.0
            || self.train_fraction >= 1.0
        {
            return Err(Error::Config(format!(
                "data.train_fraction = {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Width of the ground-truth density Gaussian.
    pub fn sigma(&self) -> f64 {
        self.kernel_size as f64 / self.sigma_divisor
    }

    /// Inference knobs; the strategy follows the ablation switches.
    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            strategy: self.model.flags.strategy(),
            tau: self.tau,
            cls_threshold: self.cls_threshold,
            token_threshold: self.token_threshold,
            crop_trigger: self.crop_trigger,
        }
    }

    /// Deterministic train/val sizes. Both sides are non-empty whenever
    /// at least two scenes exist.
    pub fn split_counts(&self) -> (usize, usize) {
        let n = self.scenes;
        if n == 1 {
            return (1, 0);
        }
        let train = ((n as f64 * self.train_fraction).round() as usize).clamp(1, n - 1);
        (train, n - train)
    }

    /// Full fixed-order serialisation; `parse(canonical())` reproduces
    /// the value.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let f = &mut s;
        writeln!(f, "[model]").unwrap();
        writeln!(f, "channels = {}", self.model.channels).unwrap();
        writeln!(f, "queries = {}", self.model.queries).unwrap();
        writeln!(f, "decoder_blocks = {}", self.model.decoder_blocks).unwrap();
        writeln!(f, "heads = {}", self.model.heads).unwrap();
        writeln!(f, "cade_depth = {}", self.model.cade_depth).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[data]").unwrap();
        writeln!(f, "image_height = {}", self.gen.image_size.0).unwrap();
        writeln!(f, "image_width = {}", self.gen.image_size.1).unwrap();
        writeln!(f, "count_min = {}", self.gen.count_range.0).unwrap();
        writeln!(f, "count_max = {}", self.gen.count_range.1).unwrap();
        writeln!(f, "classes = {}", self.gen.n_classes).unwrap();
        writeln!(f, "attrs_per_class = {}", self.gen.attrs_per_class).unwrap();
        writeln!(f, "max_attrs_per_object = {}", self.gen.max_attrs_per_object).unwrap();
        writeln!(f, "min_separation = {}", self.gen.min_separation).unwrap();
        writeln!(f, "margin = {}", self.gen.margin).unwrap();
        writeln!(f, "scale_min = {}", self.gen.scale_range.0).unwrap();
        writeln!(f, "scale_max = {}", self.gen.scale_range.1).unwrap();
        writeln!(f, "noise_amplitude = {}", self.gen.noise_amplitude).unwrap();
        writeln!(f, "context_amplitude = {}", self.gen.context_amplitude).unwrap();
        writeln!(f, "max_expressions_per_scene = {}", self.gen.max_expressions_per_scene).unwrap();
        writeln!(f, "scenes = {}", self.scenes).unwrap();
        writeln!(f, "train_fraction = {}", self.train_fraction).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[density]").unwrap();
        writeln!(f, "kernel_size = {}", self.kernel_size).unwrap();
        writeln!(f, "sigma_divisor = {}", self.sigma_divisor).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[loss]").unwrap();
        writeln!(f, "lambda1 = {}", self.weights.lambda1).unwrap();
        writeln!(f, "lambda2 = {}", self.weights.lambda2).unwrap();
        writeln!(f, "alpha = {}", self.weights.alpha).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[inference]").unwrap();
        writeln!(f, "cls_threshold = {}", self.cls_threshold).unwrap();
        writeln!(f, "token_threshold = {}", self.token_threshold).unwrap();
        writeln!(f, "crop_trigger = {}", self.crop_trigger).unwrap();
        writeln!(f, "tau = {}", self.tau).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[optimizer]").unwrap();
        writeln!(f, "step_size = {}", self.train.step_size).unwrap();
        writeln!(f, "weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(f, "beta1 = {}", self.train.beta1).unwrap();
        writeln!(f, "beta2 = {}", self.train.beta2).unwrap();
        writeln!(f, "eps = {}", self.train.eps).unwrap();
        writeln!(f, "epochs = {}", self.train.epochs).unwrap();
        writeln!(f, "decay_epoch = {}", self.train.decay_epoch).unwrap();
        writeln!(f, "decay_factor = {}", self.train.decay_factor).unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[ablation]").unwrap();
        writeln!(f, "cadgen = {}", self.model.flags.cadgen).unwrap();
        writeln!(f, "spatial_attn = {}", self.model.flags.spatial_attn).unwrap();
        writeln!(f, "channel_attn = {}", self.model.flags.channel_attn).unwrap();
        writeln!(f, "text_init = {}", self.model.flags.text_init).unwrap();
        writeln!(f, "density_init = {}", self.model.flags.density_init).unwrap();
        writeln!(
            f,
            "density_guided_inference = {}",
            self.model.flags.density_guided_inference
        )
        .unwrap();
        writeln!(f).unwrap();
        writeln!(f, "[run]").unwrap();
        writeln!(f, "seed = {}", self.seed).unwrap();
        s
    }
}
