//! Flat `key = value` experiment configuration with `#` comments.
//!
//! Every key can be overridden on the command line as `--key value`
//! (underscores become dashes). The effective configuration is rendered
//! back into output headers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use privshape_core::eval::WaveVariant;
use privshape_core::protocol::{LengthRange, MatchMode, Mechanism, PopulationSplit, Task};
use privshape_core::{DistanceMetric, PrivacyBudget, ProtocolConfig, ShapeTransform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Clustering,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Trig,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub epsilon: f64,
    pub t: usize,
    pub w: usize,
    pub l_low: usize,
    pub l_high: usize,
    pub c: usize,
    pub k: usize,
    pub split: Vec<f64>,
    pub metric: DistanceMetric,
    pub task: TaskKind,
    pub mechanism: Mechanism,
    pub threshold: f64,
    pub seed: u64,
    pub trials: usize,
    pub dataset: DatasetSource,
    pub test_dataset: Option<PathBuf>,
    pub trig_count: usize,
    pub trig_lengths: Vec<usize>,
    pub trig_noise: f64,
    pub trig_variant: WaveVariant,
    pub no_sax: bool,
    pub no_compress: bool,
    pub prefix_match: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0,
            t: 4,
            w: 10,
            l_low: 1,
            l_high: 10,
            c: 3,
            k: 2,
            split: vec![0.02, 0.08, 0.7, 0.2],
            metric: DistanceMetric::Dtw,
            task: TaskKind::Clustering,
            mechanism: Mechanism::PrivShape,
            threshold: 100.0,
            seed: 1,
            trials: 1,
            dataset: DatasetSource::Trig,
            test_dataset: None,
            trig_count: 20_000,
            trig_lengths: vec![200, 400, 600, 800, 1000],
            trig_noise: 0.0,
            trig_variant: WaveVariant::FullPeriod,
            no_sax: false,
            no_compress: false,
            prefix_match: true,
        }
    }
}

pub const KEYS: &[&str] = &[
    "epsilon",
    "t",
    "w",
    "l_low",
    "l_high",
    "c",
    "k",
    "split",
    "metric",
    "task",
    "mechanism",
    "threshold",
    "seed",
    "trials",
    "dataset",
    "test_dataset",
    "trig_count",
    "trig_lengths",
    "trig_noise",
    "trig_variant",
    "no_sax",
    "no_compress",
    "prefix_match",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected a number, got {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "epsilon" => {
                self.epsilon = match value.to_ascii_lowercase().as_str() {
                    "inf" | "infinity" => f64::INFINITY,
                    _ => num(key, value)?,
                }
            }
            "t" => self.t = num(key, value)?,
            "w" => self.w = num(key, value)?,
            "l_low" => self.l_low = num(key, value)?,
            "l_high" => self.l_high = num(key, value)?,
            "c" => self.c = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "split" => self.split = list(key, value)?,
            "metric" => self.metric = value.parse().map_err(|e| Error::config(key, format!("{e}")))?,
            "task" => {
                self.task = match value {
                    "clustering" => TaskKind::Clustering,
                    "classification" => TaskKind::Classification,
                    _ => return Err(Error::config(key, format!("expected clustering or classification, got {value:?}"))),
                }
            }
            "mechanism" => self.mechanism = value.parse().map_err(|e| Error::config(key, format!("{e}")))?,
            "threshold" => self.threshold = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "trig" => DatasetSource::Trig,
                    "" => return Err(Error::config(key, "empty dataset")),
                    path => DatasetSource::File(PathBuf::from(path)),
                }
            }
            "test_dataset" => {
                self.test_dataset = match value {
                    "" | "none" => None,
                    path => Some(PathBuf::from(path)),
                }
            }
            "trig_count" => self.trig_count = num(key, value)?,
            "trig_lengths" => self.trig_lengths = list(key, value)?,
            "trig_noise" => self.trig_noise = num(key, value)?,
            "trig_variant" => {
                self.trig_variant = match value {
                    "full" => WaveVariant::FullPeriod,
                    "prefix" => WaveVariant::Prefix,
                    _ => return Err(Error::config(key, format!("expected full or prefix, got {value:?}"))),
                }
            }
            "no_sax" => self.no_sax = flag(key, value)?,
            "no_compress" => self.no_compress = flag(key, value)?,
            "prefix_match" => self.prefix_match = flag(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epsilon" => self.epsilon.to_string(),
            "t" => self.t.to_string(),
            "w" => self.w.to_string(),
            "l_low" => self.l_low.to_string(),
            "l_high" => self.l_high.to_string(),
            "c" => self.c.to_string(),
            "k" => self.k.to_string(),
            "split" => join(&self.split),
            "metric" => self.metric.to_string(),
            "task" => match self.task {
                TaskKind::Clustering => "clustering".into(),
                TaskKind::Classification => "classification".into(),
            },
            "mechanism" => self.mechanism.name().into(),
            "threshold" => self.threshold.to_string(),
            "seed" => self.seed.to_string(),
            "trials" => self.trials.to_string(),
            "dataset" => match &self.dataset {
                DatasetSource::Trig => "trig".into(),
                DatasetSource::File(p) => p.display().to_string(),
            },
            "test_dataset" => self
                .test_dataset
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "trig_count" => self.trig_count.to_string(),
            "trig_lengths" => join(&self.trig_lengths),
            "trig_noise" => self.trig_noise.to_string(),
            "trig_variant" => match self.trig_variant {
                WaveVariant::FullPeriod => "full".into(),
                WaveVariant::Prefix => "prefix".into(),
            },
            "no_sax" => self.no_sax.to_string(),
            "no_compress" => self.no_compress.to_string(),
            "prefix_match" => self.prefix_match.to_string(),
            _ => return None,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Effective configuration as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn transform(&self) -> Result<ShapeTransform> {
        if self.no_sax {
            return Ok(ShapeTransform::fixed_bins(!self.no_compress));
        }
        if self.w == 0 {
            return Err(Error::config("w", "segment length must be at least 1"));
        }
        let mut tf = ShapeTransform::compressive_sax(self.t, self.w).map_err(|e| Error::config("t", e.to_string()))?;
        tf.compress = !self.no_compress;
        Ok(tf)
    }

    /// Protocol settings for one trial. The alphabet size follows the
    /// transform (the fixed bins have eight symbols).
    pub fn protocol(&self, num_classes: usize, seed: u64) -> Result<ProtocolConfig> {
        let epsilon = PrivacyBudget::new(self.epsilon).map_err(|e| Error::config("epsilon", e.to_string()))?;
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon", "must be positive"));
        }
        let lengths = LengthRange::new(self.l_low, self.l_high).map_err(|e| Error::config("l_low", e.to_string()))?;
        let split = match (self.mechanism, self.split.as_slice()) {
            (Mechanism::Baseline, [p_a, ..]) => PopulationSplit::baseline(*p_a),
            _ => PopulationSplit::new(self.split.clone()),
        }
        .map_err(|e| Error::config("split", e.to_string()))?;
        let task = match self.task {
            TaskKind::Clustering => Task::Clustering,
            TaskKind::Classification => Task::Classification { num_classes },
        };
        let cfg = ProtocolConfig {
            epsilon,
            t: self.transform()?.alphabet_size(),
            k: self.k,
            c: self.c,
            lengths,
            split,
            metric: self.metric,
            task,
            mechanism: self.mechanism,
            threshold: self.threshold,
            match_mode: if self.prefix_match {
                MatchMode::Prefix
            } else {
                MatchMode::FullSequence
            },
            seed,
        };
        cfg.validate().map_err(|e| {
            let key = match &e {
                privshape_core::Error::AlphabetSize(_) => "t",
                privshape_core::Error::InvalidSplit(_) => "split",
                privshape_core::Error::InvalidLengthRange { .. } => "l_low",
                _ => "config",
            };
            Error::config(key, e.to_string())
        })?;
        Ok(cfg)
    }

    /// Check everything a run needs, without loading data.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.task == TaskKind::Classification && self.mechanism == Mechanism::Baseline {
            return Err(Error::config("mechanism", "the baseline has no labelled refinement; use privshape"));
        }
        self.protocol(2, self.seed)?;
        Ok(())
    }
}

/// `--key value` overrides for every configuration key.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides {
    pub values: Vec<(String, String)>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        for (k, v) in &self.values {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(matches: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut values = Vec::new();
        for key in KEYS {
            if let Some(v) = matches.get_one::<String>(key) {
                values.push((key.to_string(), v.clone()));
            }
        }
        Ok(Self { values })
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(matches)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: Command) -> Command {
        KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .help_heading("Configuration overrides")
                    .allow_hyphen_values(true),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.c, 3);
        assert_eq!(cfg.split, vec![0.02, 0.08, 0.7, 0.2]);
        assert_eq!(cfg.threshold, 100.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# symbols-style\nt = 6\nw = 25 # segment\nepsilon = inf\nmetric = sed\nsplit = 0.1, 0.1, 0.6, 0.2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.t, 6);
        assert_eq!(cfg.w, 25);
        assert!(cfg.epsilon.is_infinite());
        assert_eq!(cfg.metric, DistanceMetric::Sed);
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn field_level_errors() {
        let err = ExperimentConfig::parse("t = 4\nk = two\n").unwrap_err();
        assert_eq!(err.to_string(), "line 2: k: expected a number, got \"two\"");
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.set("split", "0.5,0.6,0.1,0.1").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().starts_with("split:"));
        let mut cfg = ExperimentConfig::default();
        cfg.set("epsilon", "0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().starts_with("epsilon:"));
        let mut cfg = ExperimentConfig::default();
        cfg.set("t", "40").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().starts_with("t:"));
    }

    #[test]
    fn no_sax_uses_eight_symbols() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("no_sax", "true").unwrap();
        assert_eq!(cfg.protocol(2, 0).unwrap().t, 8);
    }

    #[test]
    fn overrides_from_flags() {
        #[derive(clap::Parser)]
        struct Cli {
            #[command(flatten)]
            overrides: ConfigOverrides,
        }
        use clap::Parser;
        let cli = Cli::try_parse_from(["x", "--epsilon", "0.5", "--l-high", "12", "--trig-noise", "-0"]).unwrap();
        let mut cfg = ExperimentConfig::default();
        cli.overrides.apply(&mut cfg).unwrap();
        assert_eq!(cfg.epsilon, 0.5);
        assert_eq!(cfg.l_high, 12);
    }
}
