//! Time series, z-score normalization, SAX and Compressive SAX.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// Largest supported alphabet; symbols render as `'a'..='z'`.
pub const MAX_ALPHABET: usize = 26;

/// A real-valued series with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub label: Option<u32>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, label: None }
    }

    pub fn labelled(values: Vec<f64>, label: u32) -> Self {
        Self {
            values,
            label: Some(label),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Z-score normalization with the population standard deviation.
///
/// A constant series (zero spread, up to rounding) maps to all zeros. The
/// label is carried through unchanged.
pub fn normalize(series: &TimeSeries) -> TimeSeries {
    let n = series.values.len();
    if n == 0 {
        return series.clone();
    }
    let nf = n as f64;
    let mean = series.values.iter().sum::<f64>() / nf;
    let var = series
        .values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / nf;
    let std = libm::sqrt(var);
    let scale = if libm::fabs(mean) > 1.0 { libm::fabs(mean) } else { 1.0 };
    let values = if !(std > 1e-12 * scale) {
        alloc::vec![0.0; n]
    } else {
        series.values.iter().map(|v| (v - mean) / std).collect()
    };
    TimeSeries {
        values,
        label: series.label,
    }
}

/// Breakpoints that split the real line into `t` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SaxAlphabet {
    t: usize,
    breakpoints: Vec<f64>,
}

impl SaxAlphabet {
    /// Equiprobable bins under the standard normal: breakpoint `i` is
    /// `Φ⁻¹((i + 1) / t)`.
    pub fn new(t: usize) -> Result<Self> {
        if !(2..=MAX_ALPHABET).contains(&t) {
            return Err(Error::AlphabetSize(t));
        }
        let breakpoints = (1..t)
            .map(|i| inverse_normal_cdf(i as f64 / t as f64))
            .collect();
        Ok(Self { t, breakpoints })
    }

    /// Arbitrary strictly increasing breakpoints; `t = breakpoints.len() + 1`.
    pub fn from_breakpoints(breakpoints: Vec<f64>) -> Result<Self> {
        let t = breakpoints.len() + 1;
        if !(2..=MAX_ALPHABET).contains(&t) {
            return Err(Error::AlphabetSize(t));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig(String::from(
                "breakpoints must be strictly increasing",
            )));
        }
        Ok(Self { t, breakpoints })
    }

    /// Eight fixed 0.33-wide bins on raw values, edges from -0.99 to 0.99.
    /// Values beyond ±0.99 fall into the outermost bins.
    pub fn fixed_bins() -> Self {
        Self {
            t: 8,
            breakpoints: alloc::vec![-0.99, -0.66, -0.33, 0.0, 0.33, 0.66, 0.99],
        }
    }

    pub fn size(&self) -> usize {
        self.t
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Bin index of `value`; a value equal to a breakpoint goes to the
    /// higher bin.
    pub fn symbol_for(&self, value: f64) -> u8 {
        self.breakpoints.partition_point(|b| *b <= value) as u8
    }
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation followed by one Halley step against
/// `erfc`, which brings the absolute error well below 1e-9.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut x = if p < P_LOW {
        tail(libm::sqrt(-2.0 * libm::log(p)))
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(libm::sqrt(-2.0 * libm::log(1.0 - p)))
    };

    let e = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = e * libm::sqrt(2.0 * core::f64::consts::PI) * libm::exp(x * x / 2.0);
    x -= u / (1.0 + x * u / 2.0);
    x
}

/// An ordered string of symbol indices.
///
/// Equality, ordering and hashing look only at the symbols; the
/// `compressed` flag records provenance.
#[derive(Debug, Clone, Default)]
pub struct SymbolSequence {
    symbols: Vec<u8>,
    compressed: bool,
}

impl SymbolSequence {
    pub fn new(symbols: Vec<u8>) -> Self {
        Self {
            symbols,
            compressed: false,
        }
    }

    /// Parse a letter string such as `"acba"` (`'a'` is symbol 0).
    pub fn parse(s: &str) -> Result<Self> {
        let symbols = s
            .chars()
            .map(|ch| {
                if ch.is_ascii_lowercase() {
                    Ok(ch as u8 - b'a')
                } else {
                    Err(Error::InvalidSymbolChar(ch))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self::new(symbols))
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn into_symbols(self) -> Vec<u8> {
        self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }

    pub fn last(&self) -> Option<u8> {
        self.symbols.last().copied()
    }

    /// The first `len` symbols (or all of them when shorter).
    pub fn prefix(&self, len: usize) -> SymbolSequence {
        SymbolSequence {
            symbols: self.symbols[..len.min(self.symbols.len())].to_vec(),
            compressed: self.compressed,
        }
    }

    /// A copy with `symbol` appended.
    pub fn extended(&self, symbol: u8) -> SymbolSequence {
        let mut symbols = Vec::with_capacity(self.symbols.len() + 1);
        symbols.extend_from_slice(&self.symbols);
        symbols.push(symbol);
        SymbolSequence {
            symbols,
            compressed: self.compressed,
        }
    }

    pub fn has_adjacent_repeat(&self) -> bool {
        self.symbols.windows(2).any(|w| w[0] == w[1])
    }

    pub fn check_alphabet(&self, t: usize) -> Result<()> {
        match self.symbols.iter().find(|&&s| s as usize >= t) {
            Some(&symbol) => Err(Error::SymbolOutOfRange { symbol, t }),
            None => Ok(()),
        }
    }
}

impl PartialEq for SymbolSequence {
    fn eq(&self, other: &Self) -> bool {
        self.symbols == other.symbols
    }
}

impl Eq for SymbolSequence {}

impl PartialOrd for SymbolSequence {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SymbolSequence {
    fn cmp(&self, other: &Self) -> Ordering {
        self.symbols.cmp(&other.symbols)
    }
}

impl Hash for SymbolSequence {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.symbols.hash(state);
    }
}

impl fmt::Display for SymbolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &s in &self.symbols {
            let ch = if (s as usize) < MAX_ALPHABET {
                (b'a' + s) as char
            } else {
                '_'
            };
            fmt::Write::write_char(f, ch)?;
        }
        Ok(())
    }
}

/// Piecewise aggregate approximation followed by symbol lookup.
///
/// Produces `⌈m / w⌉` symbols; the final segment averages whatever values
/// remain.
pub fn sax(series: &TimeSeries, w: usize, alphabet: &SaxAlphabet) -> Result<SymbolSequence> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if w == 0 {
        return Err(Error::ZeroSegment);
    }
    let symbols = series
        .values
        .chunks(w)
        .map(|seg| alphabet.symbol_for(seg.iter().sum::<f64>() / seg.len() as f64))
        .collect();
    Ok(SymbolSequence::new(symbols))
}

/// Collapse runs of equal adjacent symbols.
pub fn compress(seq: &SymbolSequence) -> SymbolSequence {
    let mut symbols = seq.symbols.clone();
    symbols.dedup();
    SymbolSequence {
        symbols,
        compressed: true,
    }
}

/// How raw series become symbol strings before the protocol runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTransform {
    pub alphabet: SaxAlphabet,
    /// Segment length; `None` bins every point individually (no SAX averaging).
    pub segment: Option<usize>,
    pub compress: bool,
}

impl ShapeTransform {
    /// Compressive SAX with `t` symbols and segment length `w`.
    pub fn compressive_sax(t: usize, w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::ZeroSegment);
        }
        Ok(Self {
            alphabet: SaxAlphabet::new(t)?,
            segment: Some(w),
            compress: true,
        })
    }

    /// Raw-value discretization into the fixed eight bins.
    pub fn fixed_bins(compress: bool) -> Self {
        Self {
            alphabet: SaxAlphabet::fixed_bins(),
            segment: None,
            compress,
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet.size()
    }

    pub fn apply(&self, series: &TimeSeries) -> Result<SymbolSequence> {
        if series.is_empty() {
            return Err(Error::EmptySeries);
        }
        let normalized = normalize(series);
        let seq = sax(&normalized, self.segment.unwrap_or(1), &self.alphabet)?;
        Ok(if self.compress { compress(&seq) } else { seq })
    }
}
