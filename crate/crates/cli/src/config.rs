// SPDX-License-Identifier: Apache-2.0

//! TOML run configuration for `train` and `eval`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use melody::hybrid::HybridConfig;
use melody::synth::{desk_hybrid, ExperimentConfig};
use melody::{LabelingScheme, Registry};
use serde::{Deserialize, Serialize};

/// `train` settings. Every field is optional in the file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    /// Featurizer registry; the built-in one when absent. Relative paths
    /// resolve against the config file.
    pub registry: Option<PathBuf>,
    pub scheme: LabelingScheme,
    pub seed: u64,
    pub hybrid: HybridConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            registry: None,
            scheme: LabelingScheme::Hard,
            seed: 0,
            hybrid: desk_hybrid(),
        }
    }
}

/// `eval` settings: the experiment plus an optional registry.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalFile {
    pub registry: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

/// Parses `text` as overrides layered onto `T::default()`, table by table.
pub fn layered<T: Serialize + for<'de> Deserialize<'de> + Default>(text: &str) -> Result<T> {
    let mut base = toml::Value::try_from(T::default())?;
    let over: toml::Value = toml::from_str(text)?;
    merge(&mut base, over);
    Ok(base.try_into()?)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_toml<T: Serialize + for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            layered(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Registry from an explicit flag, else from the config file, else built in.
pub fn resolve_registry(flag: Option<&Path>, from_file: Option<&Path>, config: Option<&Path>) -> Result<Registry> {
    let path = match (flag, from_file) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(p)) if p.is_relative() => Some(config.and_then(Path::parent).unwrap_or(Path::new(".")).join(p)),
        (None, Some(p)) => Some(p.to_path_buf()),
        (None, None) => None,
    };
    match path {
        Some(p) => Registry::from_file(&p).with_context(|| format!("loading registry {}", p.display())),
        None => Ok(Registry::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_files_take_defaults() {
        let t: TrainFile = layered("").unwrap();
        assert_eq!(t.hybrid, desk_hybrid());
        let e: EvalFile = layered("runs = 2\n[synth]\nn_labeled = 50\n").unwrap();
        assert_eq!(e.experiment.runs, 2);
        assert_eq!(e.experiment.synth.n_labeled, 50);
        assert_eq!(e.experiment.hybrid, desk_hybrid());
    }

    #[test]
    fn nested_sections_override() {
        let t: TrainFile = layered("scheme = \"soft\"\n[hybrid.semidoc]\nmax_epochs = 3\n").unwrap();
        assert_eq!(t.scheme, LabelingScheme::Soft);
        assert_eq!(t.hybrid.semidoc.max_epochs, 3);
        // untouched keys keep the desk defaults, not the bare struct defaults
        assert_eq!(t.hybrid.semidoc.patience, desk_hybrid().semidoc.patience);
        assert_eq!(t.hybrid.filter_recalls, desk_hybrid().filter_recalls);
    }
}
