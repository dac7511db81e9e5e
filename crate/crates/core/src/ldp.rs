//! Local-differential-privacy primitives: Generalized Randomized Response,
//! Optimized Unary Encoding, Exponential Mechanism selection, and the
//! matching unbiased aggregators.
//!
//! Probabilities are written in terms of `e^-ε` so that `ε = +∞` evaluates
//! to the noiseless limit instead of `∞/∞`.

use alloc::collections::BTreeSet;
use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{score, DistanceMetric};
use crate::series::SymbolSequence;

/// Privacy budget ε. Zero is accepted as the no-information limit and
/// `+∞` as the noiseless limit; protocol configs require `0 < ε`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PrivacyBudget(f64);

impl PrivacyBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(Error::InvalidBudget(epsilon));
        }
        Ok(Self(epsilon))
    }

    pub const fn noiseless() -> Self {
        Self(f64::INFINITY)
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }

    fn exp_neg(self) -> f64 {
        libm::exp(-self.0)
    }

    /// GRR keep probability `e^ε / (e^ε + d - 1)`.
    pub fn grr_keep(self, d: usize) -> f64 {
        1.0 / (1.0 + (d as f64 - 1.0) * self.exp_neg())
    }

    /// GRR probability of reporting one specific other value, `1 / (e^ε + d - 1)`.
    pub fn grr_flip(self, d: usize) -> f64 {
        let e = self.exp_neg();
        e / (1.0 + (d as f64 - 1.0) * e)
    }

    /// OUE probability that a non-held cell reports 1, `1 / (e^ε + 1)`.
    pub fn oue_flip(self) -> f64 {
        let e = self.exp_neg();
        e / (1.0 + e)
    }
}

impl fmt::Display for PrivacyBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Seeded, replayable random stream.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha8Rng,
}

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Domain tags keep user streams and server streams disjoint.
pub mod stream {
    pub const USER: u64 = 0x7573_6572;
    pub const SPLIT: u64 = 0x7370_6c69;
    pub const SERVER: u64 = 0x7365_7276;
    pub const DATA: u64 = 0x6461_7461;
}

/// Mix a run seed with a domain tag and an id into an independent seed.
pub const fn derive_seed(run_seed: u64, domain: u64, id: u64) -> u64 {
    splitmix64(splitmix64(run_seed ^ splitmix64(domain)) ^ id)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The stream owned by user `user_id` in the run seeded with `run_seed`.
    pub fn for_user(run_seed: u64, user_id: u64) -> Self {
        Self::new(derive_seed(run_seed, stream::USER, user_id))
    }

    pub fn derived(run_seed: u64, domain: u64, id: u64) -> Self {
        Self::new(derive_seed(run_seed, domain, id))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Non-empty list of distinct candidate shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    candidates: Vec<SymbolSequence>,
}

impl CandidateSet {
    pub fn new(candidates: Vec<SymbolSequence>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let mut seen = BTreeSet::new();
        for c in &candidates {
            if !seen.insert(c) {
                return Err(Error::DuplicateCandidate(c.to_string()));
            }
        }
        Ok(Self { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[SymbolSequence] {
        &self.candidates
    }

    pub fn get(&self, i: usize) -> Option<&SymbolSequence> {
        self.candidates.get(i)
    }

    pub fn iter(&self) -> core::slice::Iter<'_, SymbolSequence> {
        self.candidates.iter()
    }

    pub fn into_vec(self) -> Vec<SymbolSequence> {
        self.candidates
    }
}

/// Keep `value` with probability `p = e^ε/(e^ε + d - 1)`, otherwise report
/// one of the other `d - 1` values uniformly.
pub fn grr_perturb(value: usize, d: usize, budget: PrivacyBudget, rng: &mut RandomSource) -> Result<usize> {
    if d < 2 {
        return Err(Error::DegenerateDomain(d));
    }
    if value >= d {
        return Err(Error::ValueOutOfDomain { value, domain: d });
    }
    if rng.bernoulli(budget.grr_keep(d)) {
        return Ok(value);
    }
    let other = rng.index(d - 1);
    Ok(if other >= value { other + 1 } else { other })
}

/// Unbiased GRR frequency estimates `(c_v - n q) / (p - q)`.
pub fn grr_debias(counts: &[u64], n: u64, budget: PrivacyBudget) -> Result<Vec<f64>> {
    let d = counts.len();
    if d < 2 {
        return Err(Error::DegenerateDomain(d));
    }
    let sum: u64 = counts.iter().sum();
    if sum != n {
        return Err(Error::CountMismatch { sum, expected: n });
    }
    let p = budget.grr_keep(d);
    let q = budget.grr_flip(d);
    if p <= q {
        return Err(Error::DegenerateBudget);
    }
    let nq = n as f64 * q;
    Ok(counts.iter().map(|&c| (c as f64 - nq) / (p - q)).collect())
}

/// One-hot encode `true_cell` and flip: the held cell reports 1 with
/// probability 1/2, every other cell with probability `1/(e^ε + 1)`.
pub fn oue_perturb(true_cell: usize, num_cells: usize, budget: PrivacyBudget, rng: &mut RandomSource) -> Result<Vec<bool>> {
    if true_cell >= num_cells {
        return Err(Error::ValueOutOfDomain {
            value: true_cell,
            domain: num_cells,
        });
    }
    let q = budget.oue_flip();
    Ok((0..num_cells)
        .map(|cell| rng.bernoulli(if cell == true_cell { 0.5 } else { q }))
        .collect())
}

/// Unbiased OUE estimates `(sum_c - n q) / (1/2 - q)`.
pub fn oue_debias(bit_sums: &[u64], n: u64, budget: PrivacyBudget) -> Result<Vec<f64>> {
    if let Some(&sum) = bit_sums.iter().find(|&&s| s > n) {
        return Err(Error::CountMismatch { sum, expected: n });
    }
    let q = budget.oue_flip();
    if q >= 0.5 {
        return Err(Error::DegenerateBudget);
    }
    let nq = n as f64 * q;
    Ok(bit_sums.iter().map(|&s| (s as f64 - nq) / (0.5 - q)).collect())
}

/// Standard deviation of a debiased OUE cell whose true count is zero.
pub fn oue_null_sd(n: u64, budget: PrivacyBudget) -> f64 {
    let q = budget.oue_flip();
    libm::sqrt(n as f64 * q * (1.0 - q)) / (0.5 - q)
}

/// Exponential Mechanism output distribution with sensitivity 1:
/// `P(j) ∝ exp(ε · score(user, c_j) / 2)`.
pub fn em_probabilities(
    user_seq: &SymbolSequence,
    candidates: &CandidateSet,
    metric: DistanceMetric,
    budget: PrivacyBudget,
) -> Result<Vec<f64>> {
    let scores = candidates
        .iter()
        .map(|c| score(user_seq, c, metric))
        .collect::<Result<Vec<f64>>>()?;
    Ok(weights_from_scores(&scores, budget))
}

/// Normalized EM weights for precomputed scores.
pub fn weights_from_scores(scores: &[f64], budget: PrivacyBudget) -> Vec<f64> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eps = budget.epsilon();
    let mut w: Vec<f64> = scores
        .iter()
        .map(|&s| {
            if eps.is_infinite() {
                if s == top {
                    1.0
                } else {
                    0.0
                }
            } else {
                libm::exp(eps * (s - top) / 2.0)
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Sample a candidate index by inverting the cumulative EM distribution.
pub fn em_select(
    user_seq: &SymbolSequence,
    candidates: &CandidateSet,
    metric: DistanceMetric,
    budget: PrivacyBudget,
    rng: &mut RandomSource,
) -> Result<usize> {
    let probs = em_probabilities(user_seq, candidates, metric, budget)?;
    Ok(sample_index(&probs, rng))
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut RandomSource) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just under 1
    last_positive
}
