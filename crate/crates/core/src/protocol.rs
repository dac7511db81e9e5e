//! End-to-end orchestration of the baseline and PrivShape mechanisms.
//!
//! The [`Server`] is a round-based state machine. Each [`Round`] names the
//! users taking part and the [`Request`] they answer; every user answers
//! exactly one request in the whole run with one [`Report`]. In-process
//! simulation ([`run`]) and the networked mode drive the same machine.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::match_shape;
use crate::ldp::{
    em_select, grr_debias, grr_perturb, oue_debias, oue_null_sd, oue_perturb, stream, CandidateSet, PrivacyBudget,
    RandomSource,
};
use crate::metrics::{distance, DistanceMetric};
use crate::series::{SymbolSequence, MAX_ALPHABET};
use crate::trie::{
    expand_baseline, expand_pruned, pair_domain_size, pair_from_index, pair_index, prune_topck, rank_order,
    CountedShape, SubShapeTable, SymbolPair, Trie,
};

pub type UserId = u64;

/// Refined classification counts within this many null standard
/// deviations of zero are dropped before post-processing.
pub const NOISE_FLOOR_SDS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mechanism {
    #[default]
    PrivShape,
    Baseline,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Self::PrivShape => "privshape",
            Self::Baseline => "baseline",
        }
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "privshape" => Ok(Self::PrivShape),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::InvalidConfig(alloc::format!("unknown mechanism {other:?}"))),
        }
    }
}

/// What the extracted shapes are for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    #[default]
    Clustering,
    Classification { num_classes: usize },
}

/// What a user compares against the candidates in a trie round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// The user's whole sequence.
    FullSequence,
    /// The user's prefix of the candidates' length.
    #[default]
    Prefix,
}

impl MatchMode {
    fn view(self, seq: &SymbolSequence, candidate_len: usize) -> SymbolSequence {
        match self {
            Self::FullSequence => seq.clone(),
            Self::Prefix => seq.prefix(candidate_len),
        }
    }
}

/// Population fractions: four groups for PrivShape (length, sub-shape,
/// trie, refinement), two for the baseline (length, trie).
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSplit {
    fractions: Vec<f64>,
}

impl PopulationSplit {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.len() < 2 {
            return Err(Error::InvalidSplit(String::from("need at least two groups")));
        }
        if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return Err(Error::InvalidSplit(alloc::format!("fraction {f} not in (0, 1)")));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(alloc::format!("fractions sum to {sum}, not 1")));
        }
        Ok(Self { fractions })
    }

    /// The default four-way split (0.02, 0.08, 0.7, 0.2).
    pub fn privshape_default() -> Self {
        Self {
            fractions: vec![0.02, 0.08, 0.7, 0.2],
        }
    }

    pub fn baseline(p_a: f64) -> Result<Self> {
        Self::new(vec![p_a, 1.0 - p_a])
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Group sizes by largest remainder: every group gets `⌊f·n⌋`, and the
    /// leftover users go to the largest fractional parts.
    pub fn sizes(&self, n: usize) -> Vec<usize> {
        let exact: Vec<f64> = self.fractions.iter().map(|f| f * n as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|x| libm::floor(x + 1e-9) as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - sizes[a] as f64;
            let rb = exact[b] - sizes[b] as f64;
            rb.total_cmp(&ra)
                .then(self.fractions[b].total_cmp(&self.fractions[a]))
                .then(a.cmp(&b))
        });
        for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
            sizes[i] += 1;
        }
        sizes
    }
}

/// Clamp range for reported sequence lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthRange {
    pub low: usize,
    pub high: usize,
}

impl LengthRange {
    pub fn new(low: usize, high: usize) -> Result<Self> {
        if low < 1 || low > high {
            return Err(Error::InvalidLengthRange { low, high });
        }
        Ok(Self { low, high })
    }

    pub fn domain_size(&self) -> usize {
        self.high - self.low + 1
    }

    pub fn clamp(&self, len: usize) -> usize {
        len.clamp(self.low, self.high)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub epsilon: PrivacyBudget,
    /// Alphabet size.
    pub t: usize,
    pub k: usize,
    pub c: usize,
    pub lengths: LengthRange,
    pub split: PopulationSplit,
    pub metric: DistanceMetric,
    pub task: Task,
    pub mechanism: Mechanism,
    /// Baseline pruning threshold on raw selection tallies.
    pub threshold: f64,
    pub match_mode: MatchMode,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            epsilon: PrivacyBudget::new(4.0).expect("valid"),
            t: 4,
            k: 2,
            c: 3,
            lengths: LengthRange { low: 1, high: 10 },
            split: PopulationSplit::privshape_default(),
            metric: DistanceMetric::Dtw,
            task: Task::Clustering,
            mechanism: Mechanism::PrivShape,
            threshold: 100.0,
            match_mode: MatchMode::Prefix,
            seed: 2023,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.epsilon.epsilon() > 0.0) {
            return bad(alloc::format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(2..=MAX_ALPHABET).contains(&self.t) {
            return Err(Error::AlphabetSize(self.t));
        }
        if self.k < 1 {
            return bad(String::from("k must be at least 1"));
        }
        if self.c < 2 {
            return bad(alloc::format!("c must be at least 2, got {}", self.c));
        }
        LengthRange::new(self.lengths.low, self.lengths.high)?;
        let groups = self.split.fractions().len();
        match (self.mechanism, groups) {
            (Mechanism::PrivShape, 4) | (Mechanism::Baseline, 2) => {}
            (m, g) => {
                return Err(Error::InvalidSplit(alloc::format!(
                    "{} needs {} groups, split has {g}",
                    m.name(),
                    if m == Mechanism::PrivShape { 4 } else { 2 }
                )))
            }
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return bad(alloc::format!("threshold must be non-negative, got {}", self.threshold));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 1 {
                return bad(String::from("classification needs at least one class"));
            }
            if self.mechanism == Mechanism::Baseline {
                return bad(String::from(
                    "the baseline mechanism has no labelled refinement; use privshape for classification",
                ));
            }
        }
        Ok(())
    }

    pub fn user_params(&self) -> UserParams {
        UserParams {
            epsilon: self.epsilon,
            t: self.t,
            metric: self.metric,
            match_mode: self.match_mode,
        }
    }
}

/// Public parameters every user needs to answer requests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserParams {
    pub epsilon: PrivacyBudget,
    pub t: usize,
    pub metric: DistanceMetric,
    pub match_mode: MatchMode,
}

/// Instruction sent to the users of one round.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Length { range: LengthRange },
    SubShape { target_len: usize },
    Select { level: usize, candidates: CandidateSet },
    /// `num_classes` selects the labelled (unary encoding) variant.
    Refine { candidates: CandidateSet, num_classes: Option<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportKind {
    Length,
    SubShape,
    Selection,
    Refinement,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Length => "LENGTH",
            Self::SubShape => "SUBSHAPE",
            Self::Selection => "SELECTION",
            Self::Refinement => "REFINEMENT",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LENGTH" => Ok(Self::Length),
            "SUBSHAPE" => Ok(Self::SubShape),
            "SELECTION" => Ok(Self::Selection),
            "REFINEMENT" => Ok(Self::Refinement),
            other => Err(Error::Protocol(alloc::format!("unknown report kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefinePayload {
    Selection(usize),
    Bits(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReportPayload {
    /// Perturbed length value (not an offset).
    Length(usize),
    /// 1-based pair position and perturbed pair index.
    SubShape { level: usize, index: usize },
    Selection(usize),
    Refinement(RefinePayload),
}

impl ReportPayload {
    pub fn kind(&self) -> ReportKind {
        match self {
            Self::Length(_) => ReportKind::Length,
            Self::SubShape { .. } => ReportKind::SubShape,
            Self::Selection(_) => ReportKind::Selection,
            Self::Refinement(_) => ReportKind::Refinement,
        }
    }

    /// Parse the textual payload of a report of `kind`.
    pub fn parse(kind: ReportKind, s: &str) -> Result<Self> {
        let num = |x: &str| {
            x.parse::<usize>()
                .map_err(|_| Error::Protocol(alloc::format!("bad number {x:?} in payload")))
        };
        match kind {
            ReportKind::Length => Ok(Self::Length(num(s)?)),
            ReportKind::Selection => Ok(Self::Selection(num(s)?)),
            ReportKind::SubShape => {
                let (level, index) = s
                    .split_once(':')
                    .ok_or_else(|| Error::Protocol(alloc::format!("bad sub-shape payload {s:?}")))?;
                Ok(Self::SubShape {
                    level: num(level)?,
                    index: num(index)?,
                })
            }
            ReportKind::Refinement => {
                if let Some(idx) = s.strip_prefix("sel:") {
                    Ok(Self::Refinement(RefinePayload::Selection(num(idx)?)))
                } else if let Some(bits) = s.strip_prefix("bits:") {
                    let bits = bits
                        .chars()
                        .map(|ch| match ch {
                            '0' => Ok(false),
                            '1' => Ok(true),
                            _ => Err(Error::Protocol(alloc::format!("bad bit {ch:?}"))),
                        })
                        .collect::<Result<Vec<bool>>>()?;
                    Ok(Self::Refinement(RefinePayload::Bits(bits)))
                } else {
                    Err(Error::Protocol(alloc::format!("bad refinement payload {s:?}")))
                }
            }
        }
    }
}

impl fmt::Display for ReportPayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Length(v) | Self::Selection(v) => write!(f, "{v}"),
            Self::SubShape { level, index } => write!(f, "{level}:{index}"),
            Self::Refinement(RefinePayload::Selection(i)) => write!(f, "sel:{i}"),
            Self::Refinement(RefinePayload::Bits(bits)) => {
                f.write_str("bits:")?;
                for &b in bits {
                    f.write_str(if b { "1" } else { "0" })?;
                }
                Ok(())
            }
        }
    }
}

/// One user's single randomized contribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub user: UserId,
    pub round: usize,
    pub payload: ReportPayload,
}

impl Report {
    pub fn kind(&self) -> ReportKind {
        self.payload.kind()
    }
}

/// Transcript line: user id, kind, payload, round (tab separated).
impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.user, self.kind(), self.payload, self.round)
    }
}

impl FromStr for Report {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end().split('\t').collect();
        let [user, kind, payload, round] = fields[..] else {
            return Err(Error::Protocol(alloc::format!("bad transcript line {line:?}")));
        };
        let bad = |_| Error::Protocol(alloc::format!("bad transcript line {line:?}"));
        let kind: ReportKind = kind.parse()?;
        Ok(Report {
            user: user.parse().map_err(bad)?,
            round: round.parse().map_err(bad)?,
            payload: ReportPayload::parse(kind, payload)?,
        })
    }
}

/// A user's private data plus their own randomness.
#[derive(Debug, Clone)]
pub struct UserAgent {
    pub id: UserId,
    pub sequence: SymbolSequence,
    pub label: Option<u32>,
    pub rng: RandomSource,
}

impl UserAgent {
    /// A user whose randomness is derived from the run seed and user id.
    pub fn new(id: UserId, sequence: SymbolSequence, label: Option<u32>, run_seed: u64) -> Self {
        Self {
            id,
            sequence,
            label,
            rng: RandomSource::for_user(run_seed, id),
        }
    }

    pub fn respond(&mut self, params: &UserParams, round: usize, request: &Request) -> Result<Report> {
        let payload = match request {
            Request::Length { range } => {
                ReportPayload::Length(perturb_length(self.sequence.len(), *range, params.epsilon, &mut self.rng)?)
            }
            Request::SubShape { target_len } => {
                let (level, index) =
                    perturb_subshape(&self.sequence, *target_len, params.t, params.epsilon, &mut self.rng)?;
                ReportPayload::SubShape { level, index }
            }
            Request::Select { candidates, .. } => ReportPayload::Selection(self.select(params, candidates)?),
            Request::Refine {
                candidates,
                num_classes: None,
            } => ReportPayload::Refinement(RefinePayload::Selection(self.select(params, candidates)?)),
            Request::Refine {
                candidates,
                num_classes: Some(classes),
            } => {
                let label = self.label.ok_or(Error::MissingLabel(self.id as usize))? as usize;
                if label >= *classes {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let nearest = match_shape(&self.sequence, candidates.as_slice(), params.metric)?;
                let bits = oue_perturb(
                    nearest * classes + label,
                    candidates.len() * classes,
                    params.epsilon,
                    &mut self.rng,
                )?;
                ReportPayload::Refinement(RefinePayload::Bits(bits))
            }
        };
        Ok(Report {
            user: self.id,
            round,
            payload,
        })
    }

    fn select(&mut self, params: &UserParams, candidates: &CandidateSet) -> Result<usize> {
        let cand_len = candidates.get(0).map_or(0, SymbolSequence::len);
        let view = params.match_mode.view(&self.sequence, cand_len);
        em_select(&view, candidates, params.metric, params.epsilon, &mut self.rng)
    }
}

/// Clamp a length into the range and perturb it with GRR over the range.
pub fn perturb_length(len: usize, range: LengthRange, budget: PrivacyBudget, rng: &mut RandomSource) -> Result<usize> {
    let d = range.domain_size();
    if d == 1 {
        return Ok(range.low);
    }
    Ok(range.low + grr_perturb(range.clamp(len) - range.low, d, budget, rng)?)
}

/// Most reported length; ties go to the smaller length. The argmax is
/// taken on raw tallies since the GRR debias map is increasing and affine.
pub fn aggregate_length(reports: &[usize], range: LengthRange) -> usize {
    let mut tallies = vec![0u64; range.domain_size()];
    for &l in reports {
        if (range.low..=range.high).contains(&l) {
            tallies[l - range.low] += 1;
        }
    }
    let mut best = 0;
    for (i, &c) in tallies.iter().enumerate() {
        if c > tallies[best] {
            best = i;
        }
    }
    range.low + best
}

/// Length estimation over a group of sequences, each user drawing from
/// its own stream derived from `seed`.
pub fn estimate_length(users: &[SymbolSequence], range: LengthRange, budget: PrivacyBudget, seed: u64) -> Result<usize> {
    let reports = users
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_length(s.len(), range, budget, &mut RandomSource::for_user(seed, i as u64)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(aggregate_length(&reports, range))
}

/// Sub-shape report domain is built on pairs of this many positions; a
/// single-symbol target is padded to one pair.
fn subshape_len(target_len: usize) -> usize {
    target_len.max(2)
}

/// Pad (with the reserved symbol `t`) or truncate to the target length,
/// sample a pair position, and perturb the pair index with GRR.
pub fn perturb_subshape(
    seq: &SymbolSequence,
    target_len: usize,
    t: usize,
    budget: PrivacyBudget,
    rng: &mut RandomSource,
) -> Result<(usize, usize)> {
    if target_len == 0 {
        return Err(Error::TooShortForPairs(target_len));
    }
    let len = subshape_len(target_len);
    let pad = t as u8;
    let at = |i: usize| seq.symbols().get(i).copied().unwrap_or(pad);
    let level = rng.index(len - 1) + 1;
    let pair = SymbolPair(at(level - 1), at(level));
    let index = grr_perturb(pair_index(pair, t), pair_domain_size(t), budget, rng)?;
    Ok((level, index))
}

/// Debias per-position pair reports and keep the top `c·k` non-null pairs
/// at every position. Reports are `(level, perturbed index)`.
pub fn aggregate_subshapes(
    reports: &[(usize, usize)],
    target_len: usize,
    t: usize,
    budget: PrivacyBudget,
    c: usize,
    k: usize,
) -> Result<SubShapeTable> {
    if target_len == 0 {
        return Err(Error::TooShortForPairs(target_len));
    }
    let levels = subshape_len(target_len) - 1;
    let d = pair_domain_size(t);
    let mut tallies = vec![vec![0u64; d]; levels];
    for &(level, index) in reports {
        if level == 0 || level > levels || index >= d {
            return Err(Error::Protocol(alloc::format!("sub-shape report ({level}, {index}) out of range")));
        }
        tallies[level - 1][index] += 1;
    }
    let mut table = Vec::with_capacity(levels);
    for counts in tallies {
        let n: u64 = counts.iter().sum();
        if n == 0 {
            table.push(Vec::new());
            continue;
        }
        let est = grr_debias(&counts, n, budget)?;
        let mut pairs: Vec<(SymbolPair, f64)> = est
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| pair_from_index(i, t).map(|p| (p, f)))
            .collect();
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        pairs.truncate(c * k);
        table.push(pairs);
    }
    SubShapeTable::new(table)
}

/// Sub-shape estimation over a group of sequences (each user on its own
/// derived stream).
pub fn estimate_subshapes(
    users: &[SymbolSequence],
    target_len: usize,
    t: usize,
    budget: PrivacyBudget,
    c: usize,
    k: usize,
    seed: u64,
) -> Result<SubShapeTable> {
    if target_len < 2 {
        return Err(Error::TooShortForPairs(target_len));
    }
    let reports = users
        .iter()
        .enumerate()
        .map(|(i, s)| perturb_subshape(s, target_len, t, budget, &mut RandomSource::for_user(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_subshapes(&reports, target_len, t, budget, c, k)
}

/// Randomly partition `0..n` into groups sized by [`PopulationSplit::sizes`].
pub fn split_population(n: usize, split: &PopulationSplit, rng: &mut RandomSource) -> Result<Vec<Vec<UserId>>> {
    if n < split.fractions().len() {
        return Err(Error::InvalidSplit(alloc::format!("{n} users cannot fill {} groups", split.fractions().len())));
    }
    let sizes = split.sizes(n);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidSplit(alloc::format!("group {i} is empty with {n} users")));
    }
    let mut ids: Vec<UserId> = (0..n as UserId).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.index(i + 1));
    }
    let mut groups = Vec::with_capacity(sizes.len());
    let mut rest = ids.as_slice();
    for size in sizes {
        let (head, tail) = rest.split_at(size);
        groups.push(head.to_vec());
        rest = tail;
    }
    Ok(groups)
}

/// `parts` consecutive chunks whose sizes differ by at most one.
fn chunk_evenly(ids: &[UserId], parts: usize) -> Vec<Vec<UserId>> {
    let base = ids.len() / parts;
    let extra = ids.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(ids[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Average-linkage agglomerative clustering of the candidates into
/// `min(k, n)` groups; each group contributes its highest-count member.
/// Candidates with a non-positive count are left out when any count is
/// positive. Output is ordered by count (descending), ties lexicographic.
pub fn postprocess(
    candidates: &[CountedShape],
    labels: Option<&[u32]>,
    k: usize,
    metric: DistanceMetric,
) -> Result<ShapeResult> {
    let mut kept: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i].count > 0.0).collect();
    if kept.is_empty() {
        kept = (0..candidates.len()).collect();
    }
    let clusters = average_linkage(
        &kept.iter().map(|&i| candidates[i].seq.clone()).collect::<Vec<_>>(),
        k,
        metric,
    )?;
    let mut picks: Vec<usize> = clusters
        .iter()
        .map(|members| {
            members
                .iter()
                .map(|&m| kept[m])
                .min_by(|&a, &b| rank_order(&candidates[a], &candidates[b]))
                .expect("clusters are non-empty")
        })
        .collect();
    picks.sort_by(|&a, &b| rank_order(&candidates[a], &candidates[b]));
    Ok(ShapeResult {
        shapes: picks.iter().map(|&i| candidates[i].seq.clone()).collect(),
        counts: picks.iter().map(|&i| candidates[i].count).collect(),
        labels: labels.map(|l| picks.iter().map(|&i| l[i]).collect()),
        ..ShapeResult::default()
    })
}

/// Clusters as sorted member index lists, ordered by smallest member.
///
/// Merges the closest pair under mean pairwise distance, maintained with
/// the size-weighted Lance-Williams update; ties merge the pair that comes
/// first in cluster order.
pub fn average_linkage(items: &[SymbolSequence], k: usize, metric: DistanceMetric) -> Result<Vec<Vec<usize>>> {
    let n = items.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(&items[i], &items[j], metric)?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let target = k.clamp(1, n);
    while clusters.len() > target {
        let mut best = (0, 1);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                if dist[i][j] < dist[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        let (a, b) = best;
        let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
        for x in 0..clusters.len() {
            if x != a && x != b {
                let d = (na * dist[a][x] + nb * dist[b][x]) / (na + nb);
                dist[a][x] = d;
                dist[x][a] = d;
            }
        }
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
        dist.remove(b);
        for row in &mut dist {
            row.remove(b);
        }
    }
    Ok(clusters)
}

/// Extracted shapes, most frequent first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShapeResult {
    pub shapes: Vec<SymbolSequence>,
    pub counts: Vec<f64>,
    pub labels: Option<Vec<u32>>,
    /// Estimated trie height.
    pub length: usize,
    /// Non-fatal events, e.g. a trie level that could not be expanded.
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Length,
    SubShape,
    Trie(usize),
    Refine,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Length => f.write_str("length"),
            Self::SubShape => f.write_str("subshape"),
            Self::Trie(l) => write!(f, "trie{l}"),
            Self::Refine => f.write_str("refine"),
        }
    }
}

/// The user population a user belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Length,
    SubShape,
    Trie,
    Refine,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Self::Length => "length",
            Self::SubShape => "subshape",
            Self::Trie => "trie",
            Self::Refine => "refine",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub index: usize,
    pub phase: Phase,
    pub request: Request,
    pub users: Vec<UserId>,
}

/// Per-round bookkeeping kept for audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundSummary {
    pub index: usize,
    pub phase: Phase,
    pub users: usize,
    pub reports: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Length,
    SubShape,
    Trie(usize),
    Refine,
    Done,
}

/// Server role: population split, aggregation, trie growth, refinement.
#[derive(Debug, Clone)]
pub struct Server {
    config: ProtocolConfig,
    n_users: usize,
    groups: Vec<Vec<UserId>>,
    group_of: Vec<Group>,
    stage: Stage,
    round: usize,
    length: usize,
    table: SubShapeTable,
    trie: Trie,
    level_groups: Vec<Vec<UserId>>,
    frontier: Vec<CountedShape>,
    issued: Option<CandidateSet>,
    stalled: bool,
    pending: Option<Round>,
    reported: BTreeSet<UserId>,
    transcript: Vec<Report>,
    rounds: Vec<RoundSummary>,
    diagnostics: Vec<String>,
    result: Option<ShapeResult>,
}

impl Server {
    pub fn new(config: ProtocolConfig, n_users: usize) -> Result<Self> {
        config.validate()?;
        if n_users < 4 {
            return Err(Error::InvalidSplit(alloc::format!("need at least 4 users, got {n_users}")));
        }
        let mut rng = RandomSource::derived(config.seed, stream::SPLIT, 0);
        let groups = split_population(n_users, &config.split, &mut rng)?;
        let kinds: &[Group] = match config.mechanism {
            Mechanism::PrivShape => &[Group::Length, Group::SubShape, Group::Trie, Group::Refine],
            Mechanism::Baseline => &[Group::Length, Group::Trie],
        };
        let mut group_of = vec![Group::Length; n_users];
        for (g, ids) in kinds.iter().zip(&groups) {
            for &id in ids {
                group_of[id as usize] = *g;
            }
        }
        Ok(Self {
            config,
            n_users,
            groups,
            group_of,
            stage: Stage::Length,
            round: 0,
            length: 0,
            table: SubShapeTable::default(),
            trie: Trie::new(),
            level_groups: Vec::new(),
            frontier: Vec::new(),
            issued: None,
            stalled: false,
            pending: None,
            reported: BTreeSet::new(),
            transcript: Vec::new(),
            rounds: Vec::new(),
            diagnostics: Vec::new(),
            result: None,
        })
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn group_of(&self, user: UserId) -> Option<Group> {
        self.group_of.get(user as usize).copied()
    }

    pub fn trie(&self) -> &Trie {
        &self.trie
    }

    pub fn transcript(&self) -> &[Report] {
        &self.transcript
    }

    pub fn rounds(&self) -> &[RoundSummary] {
        &self.rounds
    }

    pub fn sub_shapes(&self) -> &SubShapeTable {
        &self.table
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn result(&self) -> Option<&ShapeResult> {
        self.result.as_ref()
    }

    fn trie_group(&self) -> &[UserId] {
        &self.groups[if self.config.mechanism == Mechanism::PrivShape { 2 } else { 1 }]
    }

    /// The next round to run, or `None` once the result is available. A
    /// round must be submitted before the next one is issued.
    pub fn next_round(&mut self) -> Result<Option<Round>> {
        if let Some(r) = &self.pending {
            return Ok(Some(r.clone()));
        }
        let (phase, request, users) = match self.stage.clone() {
            Stage::Done => return Ok(None),
            Stage::Length => (
                Phase::Length,
                Request::Length {
                    range: self.config.lengths,
                },
                self.groups[0].clone(),
            ),
            Stage::SubShape => (
                Phase::SubShape,
                Request::SubShape {
                    target_len: self.length,
                },
                self.groups[1].clone(),
            ),
            Stage::Trie(level) => {
                let candidates = self.trie_candidates(level)?;
                (
                    Phase::Trie(level),
                    Request::Select { level, candidates },
                    self.level_groups[level - 1].clone(),
                )
            }
            Stage::Refine => {
                let leaves = prune_topck(self.frontier.clone(), self.config.c, self.config.k);
                let candidates = CandidateSet::new(leaves.into_iter().map(|c| c.seq).collect())?;
                let num_classes = match self.config.task {
                    Task::Classification { num_classes } => Some(num_classes),
                    Task::Clustering => None,
                };
                (
                    Phase::Refine,
                    Request::Refine {
                        candidates,
                        num_classes,
                    },
                    self.groups[3].clone(),
                )
            }
        };
        let round = Round {
            index: self.round,
            phase,
            request,
            users,
        };
        self.pending = Some(round.clone());
        Ok(Some(round))
    }

    fn trie_candidates(&mut self, level: usize) -> Result<CandidateSet> {
        if self.stalled {
            return Ok(self.issued.clone().expect("stalled only after a first issue"));
        }
        let expanded = match self.config.mechanism {
            Mechanism::Baseline => {
                let frontier = if level == 1 {
                    vec![CountedShape::new(SymbolSequence::default(), f64::INFINITY)]
                } else {
                    self.frontier.clone()
                };
                expand_baseline(&frontier, self.config.t, self.config.threshold)
            }
            Mechanism::PrivShape => {
                let frontier: Vec<SymbolSequence> = if level == 1 {
                    vec![SymbolSequence::default()]
                } else {
                    self.frontier.iter().map(|c| c.seq.clone()).collect()
                };
                expand_pruned(&frontier, &self.table, level - 1, self.config.c, self.config.k)
            }
        };
        let set = match (expanded, self.issued.clone()) {
            (Ok(set), _) => set,
            (Err(Error::EmptyFrontier), prev) => {
                self.stalled = true;
                let set = match prev {
                    Some(prev) => prev,
                    None => expand_baseline(
                        &[CountedShape::new(SymbolSequence::default(), f64::INFINITY)],
                        self.config.t,
                        0.0,
                    )?,
                };
                self.diagnostics.push(alloc::format!(
                    "empty frontier at trie level {level}; reissuing {} earlier candidates",
                    set.len()
                ));
                set
            }
            (Err(e), _) => return Err(e),
        };
        self.issued = Some(set.clone());
        Ok(set)
    }

    /// Aggregate the reports of the pending round. Users that did not
    /// report are simply absent; a user may report once per run.
    pub fn submit(&mut self, reports: &[Report]) -> Result<()> {
        let round = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(String::from("no round pending")))?;
        if let Err(e) = self.check_reports(&round, reports) {
            self.pending = Some(round);
            return Err(e);
        }
        for r in reports {
            self.reported.insert(r.user);
        }
        self.transcript.extend(reports.iter().cloned());
        let candidates = match &round.request {
            Request::Select { candidates, .. } | Request::Refine { candidates, .. } => candidates.len(),
            _ => 0,
        };
        self.rounds.push(RoundSummary {
            index: round.index,
            phase: round.phase,
            users: round.users.len(),
            reports: reports.len(),
            candidates,
        });
        self.round += 1;

        match round.request {
            Request::Length { range } => {
                let lens: Vec<usize> = reports
                    .iter()
                    .map(|r| match r.payload {
                        ReportPayload::Length(l) => l,
                        _ => unreachable!("checked"),
                    })
                    .collect();
                self.length = aggregate_length(&lens, range);
                self.level_groups = chunk_evenly(self.trie_group(), self.length);
                self.stage = match self.config.mechanism {
                    Mechanism::PrivShape => Stage::SubShape,
                    Mechanism::Baseline => Stage::Trie(1),
                };
            }
            Request::SubShape { target_len } => {
                let pairs: Vec<(usize, usize)> = reports
                    .iter()
                    .map(|r| match r.payload {
                        ReportPayload::SubShape { level, index } => (level, index),
                        _ => unreachable!("checked"),
                    })
                    .collect();
                self.table = aggregate_subshapes(
                    &pairs,
                    target_len,
                    self.config.t,
                    self.config.epsilon,
                    self.config.c,
                    self.config.k,
                )?;
                self.stage = Stage::Trie(1);
            }
            Request::Select { level, candidates } => {
                let mut tallies = vec![0u64; candidates.len()];
                for r in reports {
                    if let ReportPayload::Selection(i) = r.payload {
                        tallies[i] += 1;
                    }
                }
                let mut level_counts = Vec::with_capacity(candidates.len());
                for (seq, &n) in candidates.iter().zip(&tallies) {
                    let prior = if self.stalled {
                        self.trie.node(seq).map_or(0.0, |node| node.count)
                    } else {
                        0.0
                    };
                    let count = prior + n as f64;
                    self.trie.set_count(seq, count);
                    level_counts.push(CountedShape::new(seq.clone(), count));
                }
                self.frontier = match self.config.mechanism {
                    Mechanism::PrivShape => prune_topck(level_counts, self.config.c, self.config.k),
                    Mechanism::Baseline => level_counts,
                };
                self.stage = if level < self.length {
                    Stage::Trie(level + 1)
                } else {
                    match self.config.mechanism {
                        Mechanism::PrivShape => Stage::Refine,
                        Mechanism::Baseline => {
                            self.finish_baseline();
                            Stage::Done
                        }
                    }
                };
            }
            Request::Refine {
                candidates,
                num_classes,
            } => {
                self.finish_refine(&candidates, num_classes, reports)?;
                self.stage = Stage::Done;
            }
        }
        Ok(())
    }

    fn check_reports(&self, round: &Round, reports: &[Report]) -> Result<()> {
        let members: BTreeSet<UserId> = round.users.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let expected = match round.phase {
            Phase::Length => ReportKind::Length,
            Phase::SubShape => ReportKind::SubShape,
            Phase::Trie(_) => ReportKind::Selection,
            Phase::Refine => ReportKind::Refinement,
        };
        for r in reports {
            if r.round != round.index {
                return Err(Error::Protocol(alloc::format!(
                    "report from user {} is for round {}, pending round is {}",
                    r.user,
                    r.round,
                    round.index
                )));
            }
            if !members.contains(&r.user) {
                return Err(Error::Protocol(alloc::format!("user {} is not in round {}", r.user, round.index)));
            }
            if self.reported.contains(&r.user) || !seen.insert(r.user) {
                return Err(Error::Protocol(alloc::format!("user {} already reported", r.user)));
            }
            if r.kind() != expected {
                return Err(Error::Protocol(alloc::format!(
                    "user {} sent {} in a {} round",
                    r.user,
                    r.kind(),
                    round.phase
                )));
            }
            let ok = match (&round.request, &r.payload) {
                (Request::Length { range }, ReportPayload::Length(l)) => (range.low..=range.high).contains(l),
                (Request::SubShape { target_len }, ReportPayload::SubShape { level, index }) => {
                    *level >= 1 && *level < subshape_len(*target_len) && *index < pair_domain_size(self.config.t)
                }
                (Request::Select { candidates, .. }, ReportPayload::Selection(i)) => *i < candidates.len(),
                (
                    Request::Refine {
                        candidates,
                        num_classes: None,
                    },
                    ReportPayload::Refinement(RefinePayload::Selection(i)),
                ) => *i < candidates.len(),
                (
                    Request::Refine {
                        candidates,
                        num_classes: Some(classes),
                    },
                    ReportPayload::Refinement(RefinePayload::Bits(bits)),
                ) => bits.len() == candidates.len() * classes,
                _ => false,
            };
            if !ok {
                return Err(Error::Protocol(alloc::format!(
                    "malformed {} payload {} from user {}",
                    r.kind(),
                    r.payload,
                    r.user
                )));
            }
        }
        Ok(())
    }

    fn finish_baseline(&mut self) {
        let mut leaves = self.frontier.clone();
        leaves.sort_by(rank_order);
        leaves.truncate(self.config.k);
        self.result = Some(ShapeResult {
            shapes: leaves.iter().map(|c| c.seq.clone()).collect(),
            counts: leaves.iter().map(|c| c.count).collect(),
            labels: None,
            length: self.length,
            diagnostics: self.diagnostics.clone(),
        });
    }

    fn finish_refine(&mut self, candidates: &CandidateSet, num_classes: Option<usize>, reports: &[Report]) -> Result<()> {
        let m = candidates.len();
        let (counts, labels, floor) = match num_classes {
            None => {
                let mut tallies = vec![0.0f64; m];
                for r in reports {
                    if let ReportPayload::Refinement(RefinePayload::Selection(i)) = r.payload {
                        tallies[i] += 1.0;
                    }
                }
                (tallies, None, 0.0)
            }
            Some(classes) => {
                let mut sums = vec![0u64; m * classes];
                for r in reports {
                    if let ReportPayload::Refinement(RefinePayload::Bits(bits)) = &r.payload {
                        for (s, &b) in sums.iter_mut().zip(bits) {
                            *s += u64::from(b);
                        }
                    }
                }
                let est = oue_debias(&sums, reports.len() as u64, self.config.epsilon)?;
                let mut counts = Vec::with_capacity(m);
                let mut labels = Vec::with_capacity(m);
                for cells in est.chunks(classes) {
                    let mut best = 0;
                    for (j, &v) in cells.iter().enumerate() {
                        if v > cells[best] {
                            best = j;
                        }
                    }
                    labels.push(best as u32);
                    counts.push(cells.iter().sum());
                }
                let floor = NOISE_FLOOR_SDS * libm::sqrt(classes as f64) * oue_null_sd(reports.len() as u64, self.config.epsilon);
                (counts, Some(labels), floor)
            }
        };
        let mut kept: Vec<usize> = (0..m).filter(|&i| counts[i] > floor).collect();
        if kept.is_empty() {
            kept = (0..m).collect();
        }
        let shapes: Vec<CountedShape> = kept
            .iter()
            .map(|&i| CountedShape::new(candidates.as_slice()[i].clone(), counts[i]))
            .collect();
        let labels = labels.map(|l| kept.iter().map(|&i| l[i]).collect::<Vec<u32>>());
        let mut result = postprocess(&shapes, labels.as_deref(), self.config.k, self.config.metric)?;
        result.length = self.length;
        result.diagnostics = self.diagnostics.clone();
        self.result = Some(result);
        Ok(())
    }
}

/// One user's data for an in-process run.
#[derive(Debug, Clone, PartialEq)]
pub struct UserData {
    pub sequence: SymbolSequence,
    pub label: Option<u32>,
}

/// Everything an in-process run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: ShapeResult,
    pub transcript: Vec<Report>,
    pub rounds: Vec<RoundSummary>,
    pub trie_dump: String,
}

/// Simulate the whole protocol in process. User `i` holds `users[i]` and
/// draws from the stream derived from `config.seed` and `i`.
pub fn run(users: &[UserData], config: &ProtocolConfig) -> Result<RunOutput> {
    let mut server = Server::new(config.clone(), users.len())?;
    let params = config.user_params();
    let mut agents: Vec<UserAgent> = users
        .iter()
        .enumerate()
        .map(|(i, u)| UserAgent::new(i as UserId, u.sequence.clone(), u.label, config.seed))
        .collect();
    while let Some(round) = server.next_round()? {
        let reports = round
            .users
            .iter()
            .map(|&u| agents[u as usize].respond(&params, round.index, &round.request))
            .collect::<Result<Vec<Report>>>()?;
        server.submit(&reports)?;
    }
    Ok(RunOutput {
        result: server.result().cloned().expect("done"),
        transcript: server.transcript().to_vec(),
        rounds: server.rounds().to_vec(),
        trie_dump: server.trie().dump(),
    })
}

pub fn run_privshape(users: &[UserData], config: &ProtocolConfig) -> Result<RunOutput> {
    let config = ProtocolConfig {
        mechanism: Mechanism::PrivShape,
        ..config.clone()
    };
    run(users, &config)
}

/// Runs the baseline; a four-way split is collapsed to `(p_a, 1 - p_a)`.
pub fn run_baseline(users: &[UserData], config: &ProtocolConfig) -> Result<RunOutput> {
    let split = match config.split.fractions() {
        [_, _] => config.split.clone(),
        [p_a, ..] => PopulationSplit::baseline(*p_a)?,
        [] => unreachable!("validated"),
    };
    let config = ProtocolConfig {
        mechanism: Mechanism::Baseline,
        split,
        ..config.clone()
    };
    run(users, &config)
}

/// Worst-case per-level perturbation-domain ratio between the baseline and
/// PrivShape: `t(t-1)^(ℓ-1) / (c²k²)`.
pub fn utility_bound(t: usize, level: usize, c: usize, k: usize) -> f64 {
    let level = level.max(1);
    t as f64 * libm::pow(t as f64 - 1.0, level as f64 - 1.0) / ((c * c * k * k) as f64)
}

/// Ratio summed over all `ℓ_S` levels:
/// `(t(t-1)^ℓ_S - t) / (ℓ_S · c²k² · (t-2))`. Undefined for `t = 2`.
pub fn overall_bound(t: usize, length: usize, c: usize, k: usize) -> Result<f64> {
    if t <= 2 {
        return Err(Error::InvalidConfig(alloc::format!("overall bound undefined for t = {t}")));
    }
    let tf = t as f64;
    let num = tf * libm::pow(tf - 1.0, length as f64) - tf;
    Ok(num / (length as f64 * (c * c * k * k) as f64 * (tf - 2.0)))
}
