//! Run configuration: one TOML table per module, every key optional.
//!
//! ```toml
//! [backend]
//! mode = "decoder"
//!
//! [train]
//! learning_rate = 1e-5
//! objectives = { lm = true, itm = true, joint = false }
//!
//! [inference]
//! lambda = 0.7
//! overrides = { piqa = 0.4 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::EncoderConfig;
use crate::error::{Error, Result};
use crate::forge::ForgeConfig;
use crate::imagination::Strategy;
use crate::inference::EnsembleConfig;
use crate::toy::ToyTaskConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImaginationConfig {
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Patches to erase; unset means the grid-size default.
    pub mask_k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: EncoderConfig,
    pub train: TrainConfig,
    pub forge: ForgeConfig,
    pub inference: EnsembleConfig,
    pub imagination: ImaginationConfig,
    pub analysis: AnalysisConfig,
    /// Synthetic task used by `--toy` runs.
    pub toy: ToyTaskConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.train.validate()?;
        self.forge.validate()?;
        self.inference.validate()
    }

    /// Seeds every stochastic stage except the frozen backbone, whose seed
    /// identifies the model.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.forge.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Mode;

    #[test]
    fn empty_is_default_and_round_trips() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn sections_override() {
        let c = Config::parse(
            "[backend]\nmode = \"decoder\"\n[train]\nepochs = 5\nobjectives = { itm = false }\n\
             [inference]\nlambda = 0.7\noverrides = { piqa = 0.4 }\n[imagination]\nstrategy = \"retrieve\"\n",
        )
        .unwrap();
        assert_eq!(c.backend.mode, Mode::Decoder);
        assert_eq!(c.train.epochs, 5);
        assert!(c.train.objectives.lm && !c.train.objectives.itm);
        assert_eq!(c.inference.lambda_for(Some("piqa")), 0.4);
        assert_eq!(c.imagination.strategy, Strategy::Retrieve);
    }

    #[test]
    fn invalid_values_and_unknown_sections() {
        assert!(matches!(Config::parse("[inference]\nlambda = 1.5"), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse("[nonsense]\nx = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(Config::parse("[train\n"), Err(Error::InvalidConfig(_))));
    }
}
