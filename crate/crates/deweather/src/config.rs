//! Line-oriented configuration files: `[section]` headers and `key = value`
//! pairs, `#` comments. CLI flags override file values.

use crate::data_synth::{Inconsistency, Weather, ALL_INCONSISTENCIES};
use crate::error::{Error, Result};
use crate::losses::MsSsimConfig;
use crate::models::NormKind;
use crate::training::TrainConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::InvalidConfig(format!(
                        "line {}: malformed section header '{raw}'",
                        lineno + 1
                    )));
                }
                current = line[1..line.len() - 1].trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { sections })
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(String::as_str)
    }

    fn parse_as<T: std::str::FromStr>(&self, section: &str, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(raw) = self.get(section, key) {
            *into = raw.parse().map_err(|e| {
                Error::InvalidConfig(format!("[{section}] {key} = '{raw}': {e}"))
            })?;
        }
        Ok(())
    }
}

/// Settings of the `gen-data` subcommand.
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub scenes: usize,
    pub canvas: usize,
    pub frames: usize,
    pub density: f64,
    pub weathers: Vec<Weather>,
    pub inconsistencies: Vec<Inconsistency>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenes: 8,
            canvas: 32,
            frames: 5,
            density: 0.5,
            weathers: vec![Weather::Rain, Weather::Snow, Weather::Fog],
            inconsistencies: ALL_INCONSISTENCIES.to_vec(),
            seed: 7,
        }
    }
}

fn parse_list<T: std::str::FromStr<Err = Error>>(raw: &str) -> Result<Vec<T>> {
    if raw.trim() == "none" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<Vec<T>>>()
}

/// Merge file values over the built-in defaults.
pub fn load_data_config(file: &ConfigFile) -> Result<DataConfig> {
    let mut cfg = DataConfig::default();
    file.parse_as("data", "scenes", &mut cfg.scenes)?;
    file.parse_as("data", "canvas", &mut cfg.canvas)?;
    file.parse_as("data", "frames", &mut cfg.frames)?;
    file.parse_as("data", "density", &mut cfg.density)?;
    file.parse_as("data", "seed", &mut cfg.seed)?;
    if let Some(raw) = file.get("data", "weathers") {
        cfg.weathers = parse_list(raw)?;
        if cfg.weathers.is_empty() {
            return Err(Error::InvalidConfig("weathers list is empty".into()));
        }
    }
    if let Some(raw) = file.get("data", "inconsistencies") {
        cfg.inconsistencies = parse_list(raw)?;
    }
    Ok(cfg)
}

pub fn load_train_config(file: &ConfigFile) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    file.parse_as("train", "epochs", &mut cfg.epochs)?;
    file.parse_as("train", "batch", &mut cfg.batch_size)?;
    file.parse_as("train", "crop", &mut cfg.crop)?;
    file.parse_as("train", "lr_warm", &mut cfg.lr_warm_start)?;
    file.parse_as("train", "lr_peak", &mut cfg.lr_peak)?;
    file.parse_as("train", "lr_floor", &mut cfg.lr_floor)?;
    file.parse_as("train", "warmup_epochs", &mut cfg.warmup_epochs)?;
    file.parse_as("train", "beta1", &mut cfg.adam_beta1)?;
    file.parse_as("train", "beta2", &mut cfg.adam_beta2)?;
    file.parse_as("train", "seed", &mut cfg.seed)?;
    file.parse_as("train", "stage", &mut cfg.stage)?;
    file.parse_as("train", "supervision", &mut cfg.supervision)?;
    file.parse_as("train", "frames_n", &mut cfg.frames_n)?;
    file.parse_as("train", "checkpoint_every", &mut cfg.checkpoint_every)?;
    if let Some(raw) = file.get("train", "rotate") {
        cfg.rotate = parse_bool(raw)?;
    }
    if let Some(raw) = file.get("train", "flip") {
        cfg.flip = parse_bool(raw)?;
    }

    file.parse_as("model", "base_channels", &mut cfg.backbone.base_channels)?;
    file.parse_as("model", "depth", &mut cfg.backbone.depth)?;
    file.parse_as("model", "resblocks", &mut cfg.backbone.resblocks_per_stage)?;
    if let Some(raw) = file.get("model", "norm") {
        cfg.backbone.norm = match raw {
            "batch" => NormKind::Batch,
            "none" => NormKind::None,
            other => {
                return Err(Error::InvalidConfig(format!("unknown norm '{other}'")));
            }
        };
    }

    file.parse_as("match", "s", &mut cfg.match_cfg.s)?;
    file.parse_as("match", "padding", &mut cfg.match_cfg.padding)?;
    file.parse_as("match", "k", &mut cfg.match_cfg.k)?;
    cfg.match_cfg.n = cfg.frames_n;

    file.parse_as("loss", "tau", &mut cfg.weights.tau)?;
    file.parse_as("loss", "lambda1", &mut cfg.weights.lambda1)?;
    file.parse_as("loss", "lambda2", &mut cfg.weights.lambda2)?;
    file.parse_as("loss", "lambda_o", &mut cfg.weights.lambda_o)?;
    file.parse_as("loss", "lambda_d", &mut cfg.weights.lambda_d)?;
    file.parse_as("loss", "sw_cprime", &mut cfg.sw_cprime)?;
    if let Some(raw) = file.get("loss", "sw_resample") {
        cfg.sw_resample = parse_bool(raw)?;
    }
    let mut mss = MsSsimConfig::desk_loss();
    file.parse_as("loss", "msssim_window", &mut mss.window)?;
    file.parse_as("loss", "msssim_scales", &mut mss.scales)?;
    cfg.msssim = mss;
    Ok(cfg)
}

fn parse_bool(raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidConfig(format!("expected bool, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Stage, Supervision};

    #[test]
    fn parses_sections_and_overrides_defaults() {
        let text = "\
# comment
[data]
scenes = 4
weathers = rain, fog
[train]
epochs = 3
stage = clc
supervision = pseudo
rotate = false
[loss]
lambda_o = 0.5
[match]
s = 2
";
        let file = ConfigFile::parse(text).unwrap();
        let data = load_data_config(&file).unwrap();
        assert_eq!(data.scenes, 4);
        assert_eq!(data.weathers, vec![Weather::Rain, Weather::Fog]);
        assert_eq!(data.frames, 5); // default preserved

        let train = load_train_config(&file).unwrap();
        assert_eq!(train.epochs, 3);
        assert_eq!(train.stage, Stage::Clc);
        assert_eq!(train.supervision, Supervision::Pseudo);
        assert!(!train.rotate);
        assert_eq!(train.weights.lambda_o, 0.5);
        assert_eq!(train.match_cfg.s, 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(ConfigFile::parse("[data\nscenes = 4").is_err());
        assert!(ConfigFile::parse("[data]\nscenes 4").is_err());
        let file = ConfigFile::parse("[train]\nepochs = many").unwrap();
        assert!(load_train_config(&file).is_err());
    }

    #[test]
    fn empty_config_gives_defaults() {
        let file = ConfigFile::parse("").unwrap();
        let train = load_train_config(&file).unwrap();
        assert_eq!(train.epochs, 30);
        assert_eq!(train.lr_peak, 2e-4);
    }
}
