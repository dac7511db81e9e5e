//! Distances between symbol strings and the Exponential Mechanism score.
//!
//! DTW and Euclidean treat a symbol as its integer index (`a = 0`, `b = 1`,
//! ...), so the per-cell cost is `|i - j|`.

use alloc::vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::series::SymbolSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistanceMetric {
    #[default]
    Dtw,
    Sed,
    Euclidean,
}

impl DistanceMetric {
    pub const ALL: [DistanceMetric; 3] = [Self::Dtw, Self::Sed, Self::Euclidean];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dtw => "dtw",
            Self::Sed => "sed",
            Self::Euclidean => "euclidean",
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dtw" => Ok(Self::Dtw),
            "sed" => Ok(Self::Sed),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::InvalidConfig(alloc::format!(
                "unknown metric {other:?} (expected dtw, sed or euclidean)"
            ))),
        }
    }
}

#[inline]
fn cost(a: u8, b: u8) -> f64 {
    (a as i32 - b as i32).unsigned_abs() as f64
}

pub fn distance(a: &SymbolSequence, b: &SymbolSequence, metric: DistanceMetric) -> Result<f64> {
    match metric {
        DistanceMetric::Dtw => dtw(a.symbols(), b.symbols()),
        DistanceMetric::Sed => Ok(edit_distance(a.symbols(), b.symbols()) as f64),
        DistanceMetric::Euclidean => resampled_abs_distance(a.symbols(), b.symbols()),
    }
}

/// Similarity in `(0, 1]`: `1 / (1 + distance)`.
pub fn score(user_seq: &SymbolSequence, candidate: &SymbolSequence, metric: DistanceMetric) -> Result<f64> {
    Ok(1.0 / (1.0 + distance(user_seq, candidate, metric)?))
}

/// Full-matrix DTW, rolling two rows.
pub fn dtw(a: &[u8], b: &[u8]) -> Result<f64> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            return Err(Error::UndefinedDistance("DTW between empty and non-empty sequence"))
        }
        _ => {}
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &x in a {
        cur[0] = f64::INFINITY;
        for (j, &y) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = cost(x, y) + best;
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: alloc::vec::Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sum of `|i - j|` after stretching the shorter operand to the longer
/// one's length by nearest-index resampling (endpoints aligned).
pub fn resampled_abs_distance(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance("Euclidean distance with an empty sequence"));
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let n = long.len();
    let s = short.len();
    let total = long
        .iter()
        .enumerate()
        .map(|(p, &x)| {
            let idx = if n == 1 {
                0
            } else {
                (2 * p * (s - 1) + (n - 1)) / (2 * (n - 1))
            };
            cost(x, short[idx])
        })
        .sum();
    Ok(total)
}
