//! Architecture presets shipped with the crate.

use crate::error::{HgError, Result};
use crate::hourglass::NetworkConfig;

pub const PRESETS: &[(&str, &str)] = &[
    ("baseline-1hg", include_str!("../presets/baseline-1hg.json")),
    ("baseline-2hg", include_str!("../presets/baseline-2hg.json")),
    ("baseline-3hg", include_str!("../presets/baseline-3hg.json")),
    ("ghost", include_str!("../presets/ghost.json")),
    ("shuffle", include_str!("../presets/shuffle.json")),
    ("dice", include_str!("../presets/dice.json")),
    ("dilated", include_str!("../presets/dilated.json")),
    ("dilated-separable", include_str!("../presets/dilated-separable.json")),
    ("multidilated-hg", include_str!("../presets/multidilated-hg.json")),
    ("multidilated-everywhere", include_str!("../presets/multidilated-everywhere.json")),
    ("low-channels", include_str!("../presets/low-channels.json")),
    ("fully-separable", include_str!("../presets/fully-separable.json")),
    ("best-model", include_str!("../presets/best-model.json")),
    ("toy", include_str!("../presets/toy.json")),
    ("toy-d2", include_str!("../presets/toy-d2.json")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset(name: &str) -> Result<NetworkConfig> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            HgError::usage(format!(
                "unknown preset '{name}' (available: {})",
                names().collect::<Vec<_>>().join(", ")
            ))
        })?;
    NetworkConfig::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for n in names() {
            preset(n).unwrap_or_else(|e| panic!("{n}: {e}"));
        }
        assert_eq!(preset("toy").unwrap(), NetworkConfig::toy());
        assert!(preset("missing").is_err());
    }
}
