use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::density::GtParams;
use crate::error::Result;
use crate::format;
use crate::fusion::FusionConfig;
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

/// Everything a pipeline run needs. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub gt: GtParams,
}

impl Config {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            backbone: self.backbone.clone(),
            fusion: self.fusion.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.train.validate()?;
        self.gt.validate()
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let config: Config = format::parse_json(bytes, "config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: Config = format::read_json(path)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(Config::from_json(b"{}").unwrap(), Config::default());
    }

    #[test]
    fn json_roundtrip() {
        let c = Config::default();
        let bytes = format::json_bytes(&c);
        assert_eq!(Config::from_json(&bytes).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_json(br#"{"optimizer": {}}"#).is_err());
        assert!(Config::from_json(br#"{"fusion": {"lambda": [1,1,1,1]}}"#).is_err());
    }
}
