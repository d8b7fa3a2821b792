//! Run configuration file.
//!
//! A run is described by one TOML document. Every key is optional and falls
//! back to [`RunConfig::default`] (printed by `ggnet config`). Unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [phantom]
//! height = 64
//! width = 64
//!
//! [data]
//! count = 250
//! folds = 5
//! test_fold = 0
//!
//! [encoder]
//! stage_channels = [8, 16, 32, 32]
//! aspp_out_channels = 32
//!
//! [model]
//! bd = false
//!
//! [train]
//! epochs = 30
//! lr = 0.003
//!
//! [loss]
//! lambda2 = 10.0
//!
//! [eval]
//! threshold = 0.5
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::data::PhantomParams;
use crate::error::{Error, Result};
use crate::ggb::DEFAULT_REDUCTION;
use crate::losses::LossWeights;
use crate::network::{Architecture, Variant};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory. Defaults to `<out_dir>/data`.
    pub root: Option<PathBuf>,
    /// Number of phantoms written by `generate`.
    pub count: usize,
    pub folds: usize,
    /// Fold held out as the test split.
    pub test_fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { root: None, count: 250, folds: 5, test_fold: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width divisor of the channel block's excitation MLP.
    pub reduction: usize,
    pub spatial_ggb: bool,
    pub channel_ggb: bool,
    pub guidance: bool,
    pub bd: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let v = Variant::FULL;
        ModelConfig {
            reduction: DEFAULT_REDUCTION,
            spatial_ggb: v.spatial_ggb,
            channel_ggb: v.channel_ggb,
            guidance: v.guidance,
            bd: v.bd,
        }
    }
}

impl ModelConfig {
    pub fn variant(&self) -> Variant {
        Variant { spatial_ggb: self.spatial_ggb, channel_ggb: self.channel_ggb, guidance: self.guidance, bd: self.bd }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probabilities strictly above this value count as foreground.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { threshold: 0.5 }
    }
}

/// All settings of a run. The single `seed` drives phantom generation, fold
/// assignment, initialization, shuffling and augmentation, each through its
/// own derived stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(serialize_with = "phantom_without_seed::serialize", deserialize_with = "phantom_without_seed::deserialize")]
    pub phantom: PhantomParams,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            phantom: PhantomParams::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// The `[phantom]` table takes every generator field except `seed`, which
/// always comes from the top-level seed.
mod phantom_without_seed {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::data::PhantomParams;

    pub fn serialize<S: Serializer>(p: &PhantomParams, s: S) -> Result<S::Ok, S::Error> {
        let mut v = toml::Value::try_from(p).map_err(serde::ser::Error::custom)?;
        if let Some(t) = v.as_table_mut() {
            t.remove("seed");
        }
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<PhantomParams, D::Error> {
        let v = toml::Value::deserialize(d)?;
        if v.get("seed").is_some() {
            return Err(D::Error::custom("phantom.seed is not configurable; set the top-level seed instead"));
        }
        v.try_into().map_err(D::Error::custom)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.phantom.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { encoder: self.encoder.clone(), reduction: self.model.reduction, variant: self.model.variant() }
    }

    /// Output directory for the configured model variant.
    pub fn variant_dir(&self) -> PathBuf {
        self.out_dir.join(self.model.variant().label())
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.model.reduction == 0 {
            return Err(Error::Config("model.reduction must be positive".into()));
        }
        if self.data.folds == 0 {
            return Err(Error::Config("data.folds must be positive".into()));
        }
        if self.data.test_fold >= self.data.folds {
            return Err(Error::Config(format!(
                "data.test_fold {} is out of range for {} folds",
                self.data.test_fold, self.data.folds
            )));
        }
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in ["sed = 1", "[train]\nepoch = 3", "[phantom]\nnoise = 0.1", "[extra]\na = 1"] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn phantom_seed_follows_master_seed() {
        let c = RunConfig::from_toml("seed = 42\n[phantom]\nheight = 32\nwidth = 32\naxes_max = 10.0").unwrap();
        assert_eq!(c.phantom.seed, 42);
        assert_eq!(c.phantom.height, 32);
        assert!(RunConfig::from_toml("[phantom]\nseed = 3").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.set_seed(9);
        c.model.bd = false;
        c.train.epochs = 3;
        c.data.root = Some("elsewhere".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.data.test_fold = 5;
        assert!(c.validate().is_err());
        c.data.test_fold = 0;
        c.eval.threshold = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_dir_uses_label() {
        let mut c = RunConfig::default();
        c.model.bd = false;
        assert!(c.variant_dir().ends_with("baseline+ggb"));
    }
}
