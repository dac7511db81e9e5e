//! The work behind each subcommand, kept free of argument parsing so that
//! tests can call it directly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use privshape_core::eval::{adjusted_rand_index, assign_clusters, gen_trig_waves, sequence_accuracy, Dataset, WaveVariant};
use privshape_core::ldp::{stream, RandomSource};
use privshape_core::protocol::{run, Report, ShapeResult, UserData};
use privshape_core::{ShapeTransform, SymbolSequence, TimeSeries};
use rayon::prelude::*;

use crate::config::{DatasetSource, ExperimentConfig, TaskKind};
use crate::error::{Error, Result};
use crate::ucr::{load_ucr, parse_ucr};

pub const RUN_SCHEMA: &str = "# privshape-run v1";
pub const SWEEP_SCHEMA: &str = "# privshape-sweep v1";
pub const SWEEP_PARAMS: &[&str] = &["epsilon", "t", "w"];

/// Raw class labels mapped onto `0..num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelMap {
    raw: Vec<u32>,
}

impl LabelMap {
    pub fn from_datasets<'a>(sets: impl IntoIterator<Item = &'a Dataset>) -> Self {
        let mut raw: Vec<u32> = sets
            .into_iter()
            .flat_map(|d| d.instances().iter().filter_map(|s| s.label))
            .collect();
        raw.sort_unstable();
        raw.dedup();
        Self { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn dense(&self, raw: u32) -> Option<u32> {
        self.raw.binary_search(&raw).ok().map(|i| i as u32)
    }

    pub fn raw(&self, dense: u32) -> u32 {
        self.raw[dense as usize]
    }
}

/// Transformed data shared by every trial of one configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub users: Vec<UserData>,
    pub test: Vec<SymbolSequence>,
    pub test_truth: Vec<u32>,
    pub labels: LabelMap,
}

fn dense_labels(ds: &Dataset, map: &LabelMap, what: &str) -> Result<Vec<u32>> {
    ds.instances()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .and_then(|l| map.dense(l))
                .ok_or_else(|| Error::config(what, format!("instance {} has no usable label", i + 1)))
        })
        .collect()
}

pub fn trig_dataset(cfg: &ExperimentConfig, id: u64) -> Result<Dataset> {
    let mut rng = RandomSource::derived(cfg.seed, stream::DATA, id);
    Ok(gen_trig_waves(
        cfg.trig_count,
        &cfg.trig_lengths,
        cfg.trig_noise,
        cfg.trig_variant,
        &mut rng,
    )?)
}

/// Load or generate the data a configuration names. Without a test file,
/// classification on generated waves scores a second, independently
/// generated set; a loaded file is scored on itself.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>)> {
    let train = match &cfg.dataset {
        DatasetSource::Trig => trig_dataset(cfg, 0)?,
        DatasetSource::File(p) => load_ucr(p)?,
    };
    let test = match (&cfg.test_dataset, &cfg.dataset, cfg.task) {
        (Some(p), _, _) => Some(load_ucr(p)?),
        (None, DatasetSource::Trig, TaskKind::Classification) => Some(trig_dataset(cfg, 1)?),
        _ => None,
    };
    Ok((train, test))
}

pub fn prepare(cfg: &ExperimentConfig, train: &Dataset, test: Option<&Dataset>) -> Result<Prepared> {
    let transform = cfg.transform()?;
    let labels = LabelMap::from_datasets(std::iter::once(train).chain(test));
    let train_truth = dense_labels(train, &labels, "dataset")?;
    let seqs = train.transform(&transform)?;
    let users: Vec<UserData> = seqs
        .iter()
        .zip(&train_truth)
        .map(|(s, &l)| UserData {
            sequence: s.clone(),
            label: Some(l),
        })
        .collect();
    let (test, test_truth) = match test {
        Some(t) => (t.transform(&transform)?, dense_labels(t, &labels, "test_dataset")?),
        None => (seqs, train_truth),
    };
    Ok(Prepared {
        users,
        test,
        test_truth,
        labels,
    })
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub metric: &'static str,
    pub value: f64,
    pub result: ShapeResult,
    pub transcript: Vec<Report>,
}

pub fn metric_name(cfg: &ExperimentConfig) -> &'static str {
    match cfg.task {
        TaskKind::Clustering => "ari",
        TaskKind::Classification => "accuracy",
    }
}

pub fn run_trial(cfg: &ExperimentConfig, data: &Prepared, trial: usize) -> Result<TrialOutcome> {
    let seed = cfg.seed.wrapping_add(trial as u64);
    let protocol = cfg.protocol(data.labels.len().max(1), seed)?;
    let out = run(&data.users, &protocol)?;
    let shapes = &out.result.shapes;
    let value = match cfg.task {
        TaskKind::Clustering => {
            let predicted = assign_clusters(&data.test, shapes, cfg.metric)?;
            adjusted_rand_index(&predicted, &data.test_truth)?
        }
        TaskKind::Classification => {
            let labels = out.result.labels.as_deref().ok_or_else(|| Error::config("task", "run produced no labels"))?;
            sequence_accuracy(&data.test, &data.test_truth, shapes, labels, cfg.metric)?
        }
    };
    Ok(TrialOutcome {
        trial,
        metric: metric_name(cfg),
        value,
        result: out.result,
        transcript: out.transcript,
    })
}

/// Trials run in parallel; outcomes come back in trial order.
pub fn run_trials(cfg: &ExperimentConfig, data: &Prepared) -> Result<Vec<TrialOutcome>> {
    (0..cfg.trials)
        .into_par_iter()
        .map(|i| run_trial(cfg, data, i))
        .collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn header(schema: &str, cfg: &ExperimentConfig) -> String {
    let mut out = format!("{schema}\n");
    for line in cfg.render().lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: String,
    pub transcript: String,
    pub trials: Vec<TrialOutcome>,
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let data = prepare(cfg, &train, test.as_ref())?;
    let trials = run_trials(cfg, &data)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "trial", "name", "value", "label"])?;
    for t in &trials {
        let trial = t.trial.to_string();
        w.write_record(["metric", &trial, t.metric, &t.value.to_string(), ""])?;
        for (i, (shape, count)) in t.result.shapes.iter().zip(&t.result.counts).enumerate() {
            let label = t
                .result
                .labels
                .as_ref()
                .map_or_else(String::new, |l| data.labels.raw(l[i]).to_string());
            w.write_record(["shape", &trial, &shape.to_string(), &count.to_string(), &label])?;
        }
        for d in &t.result.diagnostics {
            w.write_record(["diagnostic", &trial, d, "", ""])?;
        }
    }
    let values: Vec<f64> = trials.iter().map(|t| t.value).collect();
    let (mean, std) = mean_std(&values);
    let metric = metric_name(cfg);
    w.write_record(["summary", "", &format!("{metric}_mean"), &mean.to_string(), ""])?;
    w.write_record(["summary", "", &format!("{metric}_std"), &std.to_string(), ""])?;
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is UTF-8");

    let mut transcript = header(RUN_SCHEMA, cfg);
    for t in &trials {
        let _ = writeln!(transcript, "# trial {}", t.trial);
        for r in &t.transcript {
            let _ = writeln!(transcript, "{r}");
        }
    }
    Ok(RunOutput {
        csv: header(RUN_SCHEMA, cfg) + &body,
        transcript,
        trials,
    })
}

/// One line per instance: label, tab, symbol string.
pub fn cmd_transform(input: &Path, transform: &ShapeTransform) -> Result<String> {
    transform_text(&std::fs::read_to_string(input)?, transform)
}

pub fn transform_text(text: &str, transform: &ShapeTransform) -> Result<String> {
    let ds = parse_ucr(text.as_bytes())?;
    let mut out = String::new();
    for (i, s) in ds.instances().iter().enumerate() {
        let seq = transform.apply(s).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let _ = writeln!(out, "{}\t{seq}", s.label.unwrap_or(0));
    }
    Ok(out)
}

pub fn cmd_gen(count: usize, lengths: &[usize], noise: f64, variant: WaveVariant, seed: u64) -> Result<Dataset> {
    let mut rng = RandomSource::derived(seed, stream::DATA, 0);
    Ok(gen_trig_waves(count, lengths, noise, variant, &mut rng)?)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: &str, values: &[String]) -> Result<String> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::config(
            "param",
            format!("cannot sweep {param:?}; expected one of {}", SWEEP_PARAMS.join(", ")),
        ));
    }
    if values.is_empty() {
        return Err(Error::config("values", "no values to sweep"));
    }
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let mut prepared: BTreeMap<String, Prepared> = BTreeMap::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "metric", "mean", "std"])?;
    for v in values {
        let mut point = cfg.clone();
        point.set(param, v)?;
        point.validate()?;
        let transform_key = format!("{:?}", point.transform()?);
        if !prepared.contains_key(&transform_key) {
            prepared.insert(transform_key.clone(), prepare(&point, &train, test.as_ref())?);
        }
        let trials = run_trials(&point, &prepared[&transform_key])?;
        let (mean, std) = mean_std(&trials.iter().map(|t| t.value).collect::<Vec<_>>());
        w.write_record([param, v.trim(), metric_name(cfg), &mean.to_string(), &std.to_string()])?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is UTF-8");
    Ok(header(SWEEP_SCHEMA, cfg) + &body)
}

/// Symbol sequence for a networked client from either letters or raw
/// values.
pub fn client_sequence(letters: Option<&str>, values: Option<&str>, transform: &ShapeTransform) -> Result<SymbolSequence> {
    match (letters, values) {
        (Some(s), None) => Ok(SymbolSequence::parse(s)?),
        (None, Some(v)) => {
            let values = v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config("values", format!("{x:?} is not a number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(transform.apply(&TimeSeries::new(values))?)
        }
        _ => Err(Error::config("sequence", "give exactly one of --sequence or --values")),
    }
}
