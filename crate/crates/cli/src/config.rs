//! TOML config files with `key=value` command-line overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use csi_codec::{BaselineConfig, ChannelConfig, TrainingConfig};

/// A problem with a config file or flag; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Reads a TOML table (empty when `path` is `None`) and applies overrides of
/// the form `key=value` or `table.key=value`. Values parse as TOML and fall
/// back to plain strings.
pub fn load_table(path: Option<&Path>, sets: &[String]) -> Result<Table> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| config_err(format!("override {s:?} is not key=value")))?;
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_err(format!("empty key in {s:?}")))?;
        let mut cur = &mut table;
        for p in parts {
            cur = cur
                .entry(p)
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .ok_or_else(|| config_err(format!("{p} is not a table")))?;
        }
        cur.insert(last.to_string(), value);
    }
    Ok(table)
}

fn known_keys<T: Serialize + Default>() -> Vec<String> {
    Table::try_from(T::default()).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

fn reject_unknown(table: &Table, known: &[String], what: &str) -> Result<()> {
    for k in table.keys() {
        if !known.iter().any(|n| n == k) {
            return Err(config_err(format!("unknown {what} key {k:?}")));
        }
    }
    Ok(())
}

fn parse<T: DeserializeOwned>(table: Table, what: &str) -> Result<T> {
    T::deserialize(Value::Table(table)).map_err(|e| config_err(format!("{what}: {e}")))
}

/// A typed section whose keys must all be known to `T`.
pub fn section<T: DeserializeOwned + Serialize + Default>(table: Table, what: &str) -> Result<T> {
    reject_unknown(&table, &known_keys::<T>(), what)?;
    parse(table, what)
}

pub fn channel_config(table: Table) -> Result<ChannelConfig> {
    let c: ChannelConfig = section(table, "channel config")?;
    c.validate()?;
    Ok(c)
}

/// The flat training file: every training key plus the baseline
/// architecture keys (`n_clf`, `bits_per_element`, `width`, `refine_blocks`).
/// The baseline's side-information flag follows `use_side_info`.
pub fn training_file(table: Table) -> Result<(TrainingConfig, BaselineConfig)> {
    let training_keys = known_keys::<TrainingConfig>();
    let baseline_keys: Vec<String> =
        known_keys::<BaselineConfig>().into_iter().filter(|k| k != "use_side_info").collect();
    let (mut t, mut b) = (Table::new(), Table::new());
    for (k, v) in table {
        if training_keys.contains(&k) {
            t.insert(k, v);
        } else if baseline_keys.contains(&k) {
            b.insert(k, v);
        } else {
            return Err(config_err(format!("unknown training key {k:?}")));
        }
    }
    let training: TrainingConfig = parse(t, "training config")?;
    let mut baseline: BaselineConfig = parse(b, "baseline config")?;
    baseline.use_side_info = training.use_side_info;
    training.validate()?;
    baseline.validate()?;
    Ok((training, baseline))
}

/// Generated data for a sweep when no dataset files are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub train_samples: usize,
    pub test_samples: usize,
    pub channel: ChannelConfig,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { train_samples: 100, test_samples: 50, channel: ChannelConfig::default() }
    }
}

/// A rate-distortion sweep: every (codec, rate, side-info) cell is trained
/// and evaluated on the test split.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset identifier written to the CSV.
    #[serde(default = "default_name")]
    pub name: String,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
    /// Evaluate on at most this many test samples.
    pub eval_samples: Option<usize>,
    /// Codebook sizes N_v of the diffusion codec.
    #[serde(default)]
    pub diffusion_rates: Vec<usize>,
    /// Latent sizes N_clf of the baseline.
    #[serde(default)]
    pub baseline_rates: Vec<usize>,
    #[serde(default = "default_side")]
    pub side_info: Vec<bool>,
    #[serde(default)]
    pub training: Table,
    #[serde(default)]
    pub baseline: Table,
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_side() -> Vec<bool> {
    vec![false]
}

impl ExperimentConfig {
    /// Parses and validates; relative data paths resolve against `base`.
    pub fn from_table(table: Table, base: &Path) -> Result<(Self, TrainingConfig, BaselineConfig)> {
        let mut exp: Self = parse(table, "experiment config")?;
        if exp.diffusion_rates.is_empty() && exp.baseline_rates.is_empty() {
            return Err(config_err("experiment needs at least one rate point"));
        }
        if exp.side_info.is_empty() {
            return Err(config_err("side_info must list at least one setting"));
        }
        match (&exp.train_data, &exp.test_data, &exp.synthetic) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => {}
            _ => return Err(config_err("give either train_data and test_data, or a [synthetic] table")),
        }
        for p in [&mut exp.train_data, &mut exp.test_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        let training = section::<TrainingConfig>(exp.training.clone(), "[training]")?;
        training.validate()?;
        let baseline = section::<BaselineConfig>(exp.baseline.clone(), "[baseline]")?;
        for &nv in &exp.diffusion_rates {
            csi_codec::vq::rate_for(nv)?;
        }
        for &n in &exp.baseline_rates {
            BaselineConfig { n_clf: n, ..baseline.clone() }.validate()?;
        }
        Ok((exp, training, baseline))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_values() {
        let t = load_table(None, &["n_train=5".into(), "profile=desk".into(), "training.eta=0.5".into()]).unwrap();
        assert_eq!(t["n_train"].as_integer(), Some(5));
        assert_eq!(t["profile"].as_str(), Some("desk"));
        assert_eq!(t["training"]["eta"].as_float(), Some(0.5));
    }

    #[test]
    fn training_file_splits_keys() {
        let t = load_table(None, &["n_clf=11".into(), "use_side_info=true".into(), "batch_size=3".into()]).unwrap();
        let (tc, bc) = training_file(t).unwrap();
        assert_eq!(tc.batch_size, 3);
        assert_eq!(bc.n_clf, 11);
        assert!(bc.use_side_info);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let t = load_table(None, &["bacth_size=3".into()]).unwrap();
        let err = training_file(t).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn experiment_needs_a_rate() {
        let t: Table = "name = \"x\"\n[synthetic]\ntrain_samples = 2".parse().unwrap();
        assert!(ExperimentConfig::from_table(t, Path::new(".")).is_err());
        let t: Table = "diffusion_rates = [2]\n[synthetic]\ntrain_samples = 2".parse().unwrap();
        let (exp, _, _) = ExperimentConfig::from_table(t, Path::new(".")).unwrap();
        assert_eq!(exp.synthetic.unwrap().train_samples, 2);
    }
}
