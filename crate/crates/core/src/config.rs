//! Flat key-value run configuration shared by every subcommand.
//!
//! One TOML table with no nesting; unknown keys are rejected. Every key is
//! optional. `config/schema.toml` at the repository root lists each key with
//! its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{SceneSpec, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{Mode, TrainConfig};

/// Environment variable consulted when neither `--seed` nor the config sets
/// a seed.
pub const SEED_ENV: &str = "DROPCLASS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    // Data generation.
    pub image_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Per-rule co-occurrence probabilities, in the default benchmark's
    /// rule order (rider above bike, car above road, bike on road).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_rho: Option<Vec<f64>>,

    // Training.
    pub mode: Mode,
    /// `None` uses the mode's default step count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub reweighting: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample_class: Option<usize>,

    // Model.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub compensation_kernel: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensation_gain: Option<f64>,

    // Gradient check.
    pub gradcheck_coords: usize,
}

impl Default for Config {
    fn default() -> Self {
        let train = TrainConfig::new(Mode::Dropclass, 1);
        Config {
            seed: None,
            image_size: 64,
            train_samples: 2000,
            val_samples: 300,
            test_samples: 300,
            rule_rho: None,
            mode: Mode::Dropclass,
            iterations: None,
            batch_size: train.batch_size,
            learning_rate: 0.05,
            momentum: 0.9,
            alpha: 10.0,
            reweighting: train.reweighting,
            resample_class: None,
            widths: train.model.widths.clone(),
            kernel_size: train.model.kernel_size,
            compensation_kernel: train.model.compensation_kernel,
            compensation_gain: None,
            gradcheck_coords: crate::gradcheck::MIN_COORDS + 1,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if self.train_samples == 0 || self.val_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("sample counts must be >= 1".into()));
        }
        if self.gradcheck_coords < crate::gradcheck::MIN_COORDS {
            return Err(Error::Config(format!(
                "gradcheck_coords must be >= {}, got {}",
                crate::gradcheck::MIN_COORDS,
                self.gradcheck_coords
            )));
        }
        self.scene()?;
        self.train_config(self.mode, 0)?;
        Ok(())
    }

    /// Seed precedence: explicit override, then the config, then
    /// `DROPCLASS_SEED`, then 0.
    pub fn resolve_seed(&self, explicit: Option<u64>) -> Result<u64> {
        if let Some(s) = explicit.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    /// The default benchmark at `image_size`, with class sizes scaled from
    /// 64 pixels and the rule probabilities overridden.
    pub fn scene(&self) -> Result<SceneSpec> {
        let mut spec = SceneSpec::default_benchmark();
        if self.image_size != spec.image_size {
            let ratio = self.image_size as f64 / spec.image_size as f64;
            let scale = |v: usize| {
                if v == 0 {
                    0
                } else {
                    ((v as f64 * ratio).round() as usize).max(1)
                }
            };
            for c in &mut spec.classes {
                c.size_min = scale(c.size_min);
                c.size_max = scale(c.size_max).max(c.size_min);
                if let crate::datagen::Shape::Rectangle {
                    height_min,
                    height_max,
                } = &mut c.shape
                {
                    *height_min = scale(*height_min);
                    *height_max = scale(*height_max).max(*height_min);
                }
            }
            spec.image_size = self.image_size;
        }
        if let Some(rho) = &self.rule_rho {
            if rho.len() != spec.cooccurrence_rules.len() {
                return Err(Error::Config(format!(
                    "rule_rho needs {} entries, got {}",
                    spec.cooccurrence_rules.len(),
                    rho.len()
                )));
            }
            for (r, &p) in spec.cooccurrence_rules.iter_mut().zip(rho) {
                r.rho = p;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn sample_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> Result<TrainConfig> {
        let num_classes = SceneSpec::default_benchmark().num_classes();
        let mut model = ModelConfig::new(num_classes);
        model.widths = self.widths.clone();
        model.kernel_size = self.kernel_size;
        model.compensation_kernel = self.compensation_kernel;
        model.compensation_gain = self.compensation_gain.map(|g| g as f32);
        model.seed = seed;
        let cfg = TrainConfig {
            mode,
            iterations: self.iterations.unwrap_or(mode.default_iterations()),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate as f32,
            momentum: self.momentum as f32,
            alpha: self.alpha as f32,
            reweighting: self.reweighting,
            resample_class: self.resample_class,
            seed,
            model,
            dump_dir: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Base sample seed of a split: splits live in disjoint 2^30-wide ranges of
/// the master seed's 2^32 block.
pub fn split_base_seed(seed: u64, split: Split) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    (seed << 32).wrapping_add(offset << 30)
}
