//! `key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 3
//! data.train = runs/train.mvds
//! distill.topology = b
//! train.epochs = 30
//! ```
//!
//! Unknown keys, repeated keys and unparsable values are configuration
//! errors that name the key.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::{ObjectiveConfig, ScheduleParams};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::trainkit::{Timing, TrainConfig};

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.val",
    "model.conv_channels",
    "model.kernel",
    "model.stride",
    "model.dim",
    "model.depth",
    "model.heads",
    "model.ff",
    "distill.topology",
    "distill.tau_base",
    "distill.lambda_base",
    "distill.pmv",
    "distill.adaptive",
    "distill.uw",
    "train.views",
    "train.epochs",
    "train.batch_size",
    "train.lr_max",
    "train.lr_min",
    "train.t0",
    "train.t_mult",
    "train.draws_per_class",
    "train.val_fraction",
    "train.eval_cap",
    "train.timing",
];

/// Parsed configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_data: None,
            val_data: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn on_off(b: bool) -> String {
    b.to_string()
}

/// Splits `text` into `key → value`, rejecting malformed lines and repeats.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("{k}: given more than once")));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Reads and parses a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("--config: cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let o = &mut t.objective;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.train" => self.train_data = Some(PathBuf::from(value)),
            "data.val" => self.val_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "model.conv_channels" => {
                m.conv_channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "model.kernel" => m.kernel = parse(key, value)?,
            "model.stride" => m.stride = parse(key, value)?,
            "model.dim" => m.dim = parse(key, value)?,
            "model.depth" => m.depth = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.ff" => m.ff = parse(key, value)?,
            "distill.topology" => o.topology = parse(key, value)?,
            "distill.tau_base" => o.schedule.tau_base = parse(key, value)?,
            "distill.lambda_base" => o.schedule.lambda_base = parse(key, value)?,
            "distill.pmv" => o.pmv = parse_bool(key, value)?,
            "distill.adaptive" => o.adaptive = parse_bool(key, value)?,
            "distill.uw" => o.uw = parse_bool(key, value)?,
            "train.views" => t.views = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr_max" => t.lr_max = parse(key, value)?,
            "train.lr_min" => t.lr_min = parse(key, value)?,
            "train.t0" => t.t0 = parse(key, value)?,
            "train.t_mult" => t.t_mult = parse(key, value)?,
            "train.draws_per_class" => t.draws_per_class = parse(key, value)?,
            "train.val_fraction" => t.val_fraction = parse(key, value)?,
            "train.eval_cap" => {
                t.eval_cap = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.timing" => {
                t.timing = match value {
                    "wall" => Timing::Wall,
                    "off" => Timing::Off,
                    _ => return Err(Error::Config(format!("{key}: expected wall or off, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Checks the settings that do not depend on a dataset.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let ModelConfig {
            conv_channels,
            dim,
            heads,
            ..
        } = &self.model;
        if conv_channels.is_empty() || conv_channels.contains(&0) {
            return Err(Error::Config("model.conv_channels: need one or more positive channel counts".into()));
        }
        if *heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("model.heads: {heads} does not divide model.dim = {dim}")));
        }
        Ok(())
    }

    /// The training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn effective(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let o: &ObjectiveConfig = &t.objective;
        let ScheduleParams { tau_base, lambda_base } = o.schedule;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values = [
            self.seed.to_string(),
            path(&self.train_data),
            path(&self.val_data),
            m.conv_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            m.kernel.to_string(),
            m.stride.to_string(),
            m.dim.to_string(),
            m.depth.to_string(),
            m.heads.to_string(),
            m.ff.to_string(),
            o.topology.to_string(),
            tau_base.to_string(),
            lambda_base.to_string(),
            on_off(o.pmv),
            on_off(o.adaptive),
            on_off(o.uw),
            t.views.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.lr_max.to_string(),
            t.lr_min.to_string(),
            t.t0.to_string(),
            t.t_mult.to_string(),
            t.draws_per_class.to_string(),
            t.val_fraction.to_string(),
            t.eval_cap.map_or("none".into(), |c| c.to_string()),
            match t.timing {
                Timing::Wall => "wall".into(),
                Timing::Off => "off".into(),
            },
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// [`RunConfig::effective`] as config-file text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.effective()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RunConfig::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Topology;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse("# a run\nseed = 4\ndistill.topology = c\ntrain.eval_cap = none\n\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.objective.topology, Topology::C);
        assert_eq!(cfg.train.eval_cap, None);
        assert_eq!(cfg.train_config().seed, 4);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_and_bad_keys_are_named() {
        let err = RunConfig::parse("train.epoch = 3").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("train.epoch"));
        let err = RunConfig::parse("train.lr_max = fast").unwrap_err();
        assert!(err.to_string().contains("train.lr_max"));
        let err = RunConfig::parse("distill.pmv = maybe").unwrap_err();
        assert!(err.to_string().contains("distill.pmv"));
        assert!(RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string().contains("seed"));
        assert!(RunConfig::parse("just words").is_err());
        assert!(RunConfig::parse("train.batch_size = 0").unwrap_err().is_config());
        assert!(RunConfig::parse("model.heads = 3").unwrap_err().to_string().contains("model.heads"));
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse("seed = 9\ndata.train = a.mvds\ndistill.uw = off\nmodel.conv_channels = 4, 6\ntrain.lr_max = 0.125")
            .unwrap();
        let eff = cfg.effective();
        assert_eq!(eff.len(), KEYS.len());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
