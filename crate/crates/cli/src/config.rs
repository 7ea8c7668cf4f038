//! Run configuration: one TOML file holding every module's settings.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/default"
//!
//! [data]
//! root = "data/synth"
//! train_split = [0]       # "train" | "val" | "test" | "all" | [ids]
//! val_split = []          # empty: validate on the training set
//! eval_split = "all"
//!
//! [train]
//! batch_size = 16
//! lr_init = 0.001
//! ```
//!
//! Every table is optional and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use fusenav::data::{AugmentPolicy, LabelConfig, NamedSplit, Split};
use fusenav::metrics::{FPS_BASELINE, NA_THRESHOLD};
use fusenav::model::ModelConfig;
use fusenav::numeric::TrainConfig;
use fusenav::sim::SimConfig;
use fusenav::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: Split,
    pub val_split: Split,
    pub eval_split: Split,
    pub labels: LabelConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synth"),
            train_split: Split::Ids(vec![0]),
            val_split: Split::Ids(Vec::new()),
            eval_split: Split::Named(NamedSplit::All),
            labels: LabelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub na_threshold: f64,
    pub fps_baseline: f64,
    /// Frames timed by `bench`, after `bench_warmup` untimed ones.
    pub bench_frames: usize,
    pub bench_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            na_threshold: NA_THRESHOLD,
            fps_baseline: FPS_BASELINE,
            bench_frames: 200,
            bench_warmup: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub sim: SimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        // Laplacian variance of the synthetic renders is in the 10^4 range.
        model.fusion.tau_img = 10_000.0;
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model,
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            sim: SimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serializing config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.labels.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sim.validate()?;
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if !(self.eval.na_threshold > 0.0) {
            return Err(Error::config("eval.na_threshold must be positive"));
        }
        if self.eval.bench_frames == 0 {
            return Err(Error::config("eval.bench_frames must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::config("augment.flip_prob must be in [0, 1]"));
        }
        Ok(())
    }

    /// Sets the run seed and the training seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }
}
