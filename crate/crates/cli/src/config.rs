//! TOML run configuration. Every key is optional; missing keys take the
//! library defaults for the selected algorithm.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sparsenas::data::SynthBlobs;
use sparsenas::search::RetrainConfig;
use sparsenas::{Algorithm, SearchConfig};
use toml::{Table, Value};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    /// Generator used when no dataset directory is given.
    pub synthetic: SynthBlobs,
}

impl RunConfig {
    pub fn defaults(algorithm: Algorithm) -> Self {
        Self {
            search: SearchConfig::for_algorithm(algorithm),
            retrain: RetrainConfig::default(),
            synthetic: SynthBlobs::default(),
        }
    }

    /// Reads `path` (if any) and layers it over the defaults. The algorithm
    /// named by `algorithm` wins over the file and selects the default set.
    pub fn load(path: Option<&Path>, algorithm: Option<Algorithm>) -> Result<Self> {
        let overlay = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        Self::from_table(overlay, algorithm).with_context(|| match path {
            Some(p) => format!("config {}", p.display()),
            None => "default config".into(),
        })
    }

    pub fn from_table(overlay: Table, algorithm: Option<Algorithm>) -> Result<Self> {
        let file_algorithm = overlay
            .get("search")
            .and_then(|s| s.get("algorithm"))
            .map(|v| v.clone().try_into::<Algorithm>())
            .transpose()
            .map_err(|e| UsageError(format!("search.algorithm: {e}")))?;
        let chosen = algorithm.or(file_algorithm).unwrap_or(Algorithm::ZoDartsPlus);
        let base = Table::try_from(Self::defaults(chosen)).context("serializing defaults")?;
        let mut merged = merge(base, overlay);
        if let Some(Value::Table(search)) = merged.get_mut("search") {
            search.insert("algorithm".into(), Value::String(chosen.name().into()));
        }
        let config: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(e.message().to_string()))?;
        config.search.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(config)
    }
}

/// Recursive table merge. A table carrying a different `kind` tag from the
/// base replaces it outright, so switching optimizer does not inherit
/// fields of the old variant.
fn merge(mut base: Table, overlay: Table) -> Table {
    for (key, value) in overlay {
        let merged = match (base.remove(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) if b.get("kind") == o.get("kind") || o.get("kind").is_none() => {
                Value::Table(merge(b, o))
            }
            (_, v) => v,
        };
        base.insert(key, merged);
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsenas::optim::OptimizerKind;

    fn parse(text: &str, algorithm: Option<Algorithm>) -> Result<RunConfig> {
        RunConfig::from_table(text.parse().unwrap(), algorithm)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("", None).unwrap();
        assert_eq!(c, RunConfig::defaults(Algorithm::ZoDartsPlus));
    }

    #[test]
    fn example_file_spells_out_the_defaults() {
        let c = parse(include_str!("../config.example.toml"), None).unwrap();
        assert_eq!(c, RunConfig::defaults(Algorithm::ZoDartsPlus));
    }

    #[test]
    fn algorithm_defaults_follow_the_selected_algorithm() {
        let c = parse("[search]\nalgorithm = \"darts-1st\"\n", None).unwrap();
        assert_eq!(c.search.inner_steps, 1);
        let c = parse("[search]\nalgorithm = \"darts-1st\"\n", Some(Algorithm::ZoDarts)).unwrap();
        assert_eq!(c.search.algorithm, Algorithm::ZoDarts);
        assert_eq!(c.search.inner_steps, 10);
        let c = parse("[search]\ninner_steps = 4\n", Some(Algorithm::Darts1st)).unwrap();
        assert_eq!(c.search.inner_steps, 4);
    }

    #[test]
    fn nested_keys_merge() {
        let c = parse("[search.skeleton]\nstem_channels = 4\n[search.early_stop]\npatience = 5\n", None).unwrap();
        assert_eq!(c.search.skeleton.stem_channels, 4);
        assert_eq!(c.search.skeleton.num_stages, 3);
        assert_eq!(c.search.early_stop.patience, 5);
        assert!(c.search.early_stop.enabled);
    }

    #[test]
    fn optimizer_switch_replaces_variant() {
        let c = parse("[search.optimizer_w]\nkind = \"sgd\"\n", None).unwrap();
        assert_eq!(c.search.optimizer_w, OptimizerKind::Sgd);
        let c = parse("[search.optimizer_w]\nmomentum = 0.5\n", None).unwrap();
        assert!(matches!(c.search.optimizer_w, OptimizerKind::SgdMomentum { momentum, .. } if momentum == 0.5));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("[search]\nlearning_rate = 0.1\n", None).unwrap_err();
        assert!(format!("{err:#}").contains("learning_rate"), "{err:#}");
        let err = parse("[searchh]\n", None).unwrap_err();
        assert!(format!("{err:#}").contains("searchh"), "{err:#}");
    }

    #[test]
    fn out_of_range_value_is_rejected() {
        let err = parse("[search]\nepochs = 0\n", None).unwrap_err();
        assert!(format!("{err:#}").contains("epochs"), "{err:#}");
    }

    #[test]
    fn unknown_algorithm_lists_candidates() {
        let err = parse("[search]\nalgorithm = \"enas\"\n", None).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("zo-darts-plus") && msg.contains("darts-1st"), "{msg}");
    }
}
