//! Model-config files: TOML with strict key checking.
//!
//! `parse_config` rejects unknown keys, fills defaults and validates the
//! result; `serialize_config` echoes the fully resolved config back, so
//! parse -> serialize -> parse is a fixed point.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn serialize_config(config: &ModelConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(format!("config serialize: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn preset_serializes_and_parses_back() {
        for name in crate::model::PRESET_NAMES {
            let cfg = preset(name).unwrap();
            let text = serialize_config(&cfg).unwrap();
            let parsed = parse_config(&text).unwrap();
            assert_eq!(parsed, cfg, "{name}");
        }
    }

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        let text = serialize_config(&preset("vitae-t").unwrap()).unwrap();
        let once = parse_config(&text).unwrap();
        let echoed = serialize_config(&once).unwrap();
        let twice = parse_config(&echoed).unwrap();
        assert_eq!(once, twice);
        assert_eq!(echoed, serialize_config(&twice).unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = serialize_config(&preset("tiny-desk").unwrap()).unwrap();
        text.push_str("\nbogus_key = 1\n");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn multistage_with_three_stages_is_invariant_error() {
        let mut cfg = preset("vitaev2-s").unwrap();
        cfg.stages.pop();
        let text = serialize_config(&cfg).unwrap();
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn missing_required_field_is_error() {
        assert!(parse_config("input_size = 224").is_err());
    }
}
