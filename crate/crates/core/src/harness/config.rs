use std::path::Path;

use super::trial::TrialConfig;
use crate::error::{Error, Result};

/// Parses a TOML configuration. Every key is optional; unknown keys are an
/// error.
pub fn parse_config(text: &str) -> Result<TrialConfig> {
    let cfg: TrialConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrialConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// The default configuration as TOML.
pub fn default_config_toml() -> String {
    toml::to_string(&TrialConfig::default()).expect("default config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrialConfig::default());
    }

    #[test]
    fn dotted_keys_override_fields() {
        let cfg = parse_config("theta0 = 0.428\nsac.horizon = 0.8\nplant.force_model = \"derived-tension\"\n").unwrap();
        assert_eq!(cfg.theta0, 0.428);
        assert_eq!(cfg.sac.horizon, 0.8);
        assert_eq!(cfg.plant.force_model, crate::model::ForceModel::DerivedTension);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("thetaO = 0.4").is_err());
        assert!(parse_config("sac.horizn = 1.0").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse_config("task.r_tau = -1.0").is_err());
        assert!(parse_config("theta0 = 2.0").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        assert_eq!(parse_config(&default_config_toml()).unwrap(), TrialConfig::default());
    }
}
