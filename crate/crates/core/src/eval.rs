//! Datasets, shape matching and scoring (ARI, accuracy), plus a brute-force
//! frequent-shape oracle and the trigonometric wave generator.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ldp::RandomSource;
use crate::metrics::{distance, DistanceMetric};
use crate::protocol::UserData;
use crate::series::{normalize, ShapeTransform, SymbolSequence, TimeSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<TimeSeries>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(instances: Vec<TimeSeries>, class_names: Option<Vec<String>>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::TooFewItems { needed: 1, got: 0 });
        }
        if let Some(names) = &class_names {
            for (i, s) in instances.iter().enumerate() {
                match s.label {
                    Some(l) if (l as usize) < names.len() => {}
                    Some(_) => return Err(Error::UnlabelledShape(i)),
                    None => return Err(Error::MissingLabel(i)),
                }
            }
        }
        Ok(Self { instances, class_names })
    }

    pub fn instances(&self) -> &[TimeSeries] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<TimeSeries> {
        self.instances
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Labels of every instance, or `None` if any is unlabelled.
    pub fn labels(&self) -> Option<Vec<u32>> {
        self.instances.iter().map(|s| s.label).collect()
    }

    /// Number of distinct classes (largest label + 1).
    pub fn num_classes(&self) -> usize {
        match &self.class_names {
            Some(names) => names.len(),
            None => self.instances.iter().filter_map(|s| s.label).max().map_or(0, |m| m as usize + 1),
        }
    }

    pub fn transform(&self, transform: &ShapeTransform) -> Result<Vec<SymbolSequence>> {
        self.instances.iter().map(|s| transform.apply(s)).collect()
    }

    pub fn user_data(&self, transform: &ShapeTransform) -> Result<Vec<UserData>> {
        self.instances
            .iter()
            .map(|s| {
                Ok(UserData {
                    sequence: transform.apply(s)?,
                    label: s.label,
                })
            })
            .collect()
    }
}

/// Index of the closest shape; ties go to the smallest index.
pub fn match_shape(seq: &SymbolSequence, shapes: &[SymbolSequence], metric: DistanceMetric) -> Result<usize> {
    if shapes.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = (0, f64::INFINITY);
    for (i, shape) in shapes.iter().enumerate() {
        let d = distance(seq, shape, metric)?;
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}

/// Cluster id of every sequence: the index of its nearest shape.
pub fn assign_clusters(seqs: &[SymbolSequence], shapes: &[SymbolSequence], metric: DistanceMetric) -> Result<Vec<u32>> {
    seqs.iter()
        .map(|s| match_shape(s, shapes, metric).map(|i| i as u32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequentShapeQuery {
    pub theta: f64,
    pub metric: DistanceMetric,
    pub min_count: usize,
}

impl FrequentShapeQuery {
    pub fn new(theta: f64, metric: DistanceMetric, min_count: usize) -> Result<Self> {
        if theta.is_nan() || theta < 0.0 {
            return Err(Error::InvalidConfig(alloc::format!("theta must be non-negative, got {theta}")));
        }
        if min_count < 1 {
            return Err(Error::InvalidConfig(String::from("min_count must be at least 1")));
        }
        Ok(Self { theta, metric, min_count })
    }
}

/// Caps on the enumerated universe of the frequent-shape oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_len: usize,
    pub max_symbols: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_len: 6,
            max_symbols: 4,
        }
    }
}

/// Every sequence without adjacent repeats, of length `1..=max_len` over
/// `t` symbols, in lexicographic order.
pub fn compressed_universe(t: usize, max_len: usize) -> Vec<SymbolSequence> {
    fn walk(t: u8, max_len: usize, cur: &mut Vec<u8>, out: &mut Vec<SymbolSequence>) {
        if !cur.is_empty() {
            out.push(SymbolSequence::new(cur.clone()));
        }
        if cur.len() == max_len {
            return;
        }
        for x in 0..t {
            if cur.last() != Some(&x) {
                cur.push(x);
                walk(t, max_len, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(t as u8, max_len, &mut Vec::new(), &mut out);
    out
}

/// Non-private ground truth: every universe sequence whose neighbourhood
/// (distance ≤ θ) holds at least `min_count` dataset sequences, most
/// frequent first, ties lexicographic.
pub fn frequent_shapes_oracle(
    seqs: &[SymbolSequence],
    query: &FrequentShapeQuery,
    limits: OracleLimits,
) -> Result<Vec<(SymbolSequence, usize)>> {
    let max_len = seqs.iter().map(SymbolSequence::len).max().unwrap_or(0);
    let t = seqs
        .iter()
        .flat_map(|s| s.symbols().iter())
        .max()
        .map_or(0, |&m| m as usize + 1);
    if max_len > limits.max_len || t > limits.max_symbols {
        return Err(Error::UniverseTooLarge(alloc::format!(
            "length {max_len} over {t} symbols exceeds caps {} and {}",
            limits.max_len,
            limits.max_symbols
        )));
    }
    let mut distinct: BTreeMap<&SymbolSequence, usize> = BTreeMap::new();
    for s in seqs {
        *distinct.entry(s).or_default() += 1;
    }
    let mut out = Vec::new();
    for candidate in compressed_universe(t, max_len) {
        let mut count = 0;
        for (s, &n) in &distinct {
            if !s.is_empty() && distance(s, &candidate, query.metric)? <= query.theta {
                count += n;
            }
        }
        if count >= query.min_count {
            out.push((candidate, count));
        }
    }
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand Index between two labelings of the same items. Two
/// trivial partitions (all-in-one or all singletons on both sides) score 1.
pub fn adjusted_rand_index(predicted: &[u32], truth: &[u32]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LabelLengthMismatch(predicted.len(), truth.len()));
    }
    let n = predicted.len();
    if n < 2 {
        return Err(Error::TooFewItems { needed: 2, got: n });
    }
    let mut cells: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *cells.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = cells.values().map(|&c| choose2(c)).sum();
    let a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(n as u64);
    let max = (a + b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of test instances whose nearest labelled shape carries their
/// own label.
pub fn classify_accuracy(
    test: &[TimeSeries],
    shapes: &[SymbolSequence],
    labels: &[u32],
    transform: &ShapeTransform,
    metric: DistanceMetric,
) -> Result<f64> {
    let truth = test
        .iter()
        .enumerate()
        .map(|(i, s)| s.label.ok_or(Error::MissingLabel(i)))
        .collect::<Result<Vec<u32>>>()?;
    let seqs = test.iter().map(|s| transform.apply(s)).collect::<Result<Vec<_>>>()?;
    sequence_accuracy(&seqs, &truth, shapes, labels, metric)
}

/// [`classify_accuracy`] on already transformed sequences.
pub fn sequence_accuracy(
    seqs: &[SymbolSequence],
    truth: &[u32],
    shapes: &[SymbolSequence],
    labels: &[u32],
    metric: DistanceMetric,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::TooFewItems { needed: 1, got: 0 });
    }
    if seqs.len() != truth.len() {
        return Err(Error::LabelLengthMismatch(seqs.len(), truth.len()));
    }
    if shapes.len() != labels.len() {
        return Err(Error::LabelLengthMismatch(shapes.len(), labels.len()));
    }
    let mut correct = 0usize;
    for (seq, &t) in seqs.iter().zip(truth) {
        if labels[match_shape(seq, shapes, metric)?] == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// How instance lengths relate to the wave period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WaveVariant {
    /// One full period sampled at the instance length.
    #[default]
    FullPeriod,
    /// The first `len` points of a 1000-point period.
    Prefix,
}

pub const PREFIX_PERIOD: usize = 1000;

/// Alternating sine (label 0) and cosine (label 1) instances; each class
/// cycles through `lengths`. Gaussian noise is added per point before
/// z-normalization.
pub fn gen_trig_waves(
    count: usize,
    lengths: &[usize],
    noise_sigma: f64,
    variant: WaveVariant,
    rng: &mut RandomSource,
) -> Result<Dataset> {
    if lengths.is_empty() {
        return Err(Error::InvalidConfig(String::from("no wave lengths given")));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l < 4) {
        return Err(Error::InvalidConfig(alloc::format!("wave length {l} is below 4")));
    }
    if variant == WaveVariant::Prefix {
        if let Some(&l) = lengths.iter().find(|&&l| l > PREFIX_PERIOD) {
            return Err(Error::InvalidConfig(alloc::format!(
                "prefix length {l} exceeds the {PREFIX_PERIOD}-point period"
            )));
        }
    }
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).map_err(|_| Error::InvalidConfig(alloc::format!("bad noise {noise_sigma}")))?)
    } else if noise_sigma == 0.0 {
        None
    } else {
        return Err(Error::InvalidConfig(alloc::format!("noise sigma must be non-negative, got {noise_sigma}")));
    };
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u32;
        let len = lengths[(i / 2) % lengths.len()];
        let period = match variant {
            WaveVariant::FullPeriod => len,
            WaveVariant::Prefix => PREFIX_PERIOD,
        };
        let values: Vec<f64> = (0..len)
            .map(|j| {
                let phase = 2.0 * core::f64::consts::PI * j as f64 / period as f64;
                let clean = if label == 0 { libm::sin(phase) } else { libm::cos(phase) };
                clean + noise.map_or(0.0, |d| d.sample(rng))
            })
            .collect();
        instances.push(normalize(&TimeSeries::labelled(values, label)));
    }
    Dataset::new(instances, Some(vec![String::from("sine"), String::from("cosine")]))
}
