//! Levelled candidate trie: threshold expansion for the baseline, sub-shape
//! driven expansion and top-`c·k` pruning for PrivShape.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::ldp::CandidateSet;
use crate::series::SymbolSequence;

/// A sequence with its (raw or debiased) frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CountedShape {
    pub seq: SymbolSequence,
    pub count: f64,
}

impl CountedShape {
    pub fn new(seq: SymbolSequence, count: f64) -> Self {
        Self { seq, count }
    }
}

/// Descending count, then ascending sequence.
pub fn rank_order(a: &CountedShape, b: &CountedShape) -> Ordering {
    b.count.total_cmp(&a.count).then_with(|| a.seq.cmp(&b.seq))
}

/// Ordered pair of distinct adjacent symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolPair(pub u8, pub u8);

/// Size of the sub-shape report domain: `t(t-1)` ordered pairs plus the
/// null bucket for pairs that touch padding.
pub fn pair_domain_size(t: usize) -> usize {
    t * (t - 1) + 1
}

/// Dense index of a distinct pair; pairs that repeat a symbol or fall
/// outside the alphabet (padding) map to the null bucket `t(t-1)`.
pub fn pair_index(pair: SymbolPair, t: usize) -> usize {
    let (x, y) = (pair.0 as usize, pair.1 as usize);
    if x >= t || y >= t || x == y {
        return t * (t - 1);
    }
    x * (t - 1) + if y < x { y } else { y - 1 }
}

/// Inverse of [`pair_index`]; `None` for the null bucket.
pub fn pair_from_index(index: usize, t: usize) -> Option<SymbolPair> {
    if index >= t * (t - 1) {
        return None;
    }
    let x = index / (t - 1);
    let r = index % (t - 1);
    let y = if r < x { r } else { r + 1 };
    Some(SymbolPair(x as u8, y as u8))
}

/// Retained frequent sub-shapes per pair position `j ∈ 1..ℓ_S`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SubShapeTable {
    levels: Vec<Vec<(SymbolPair, f64)>>,
}

impl SubShapeTable {
    /// `levels[j - 1]` holds the ranked pairs for position `j`.
    pub fn new(levels: Vec<Vec<(SymbolPair, f64)>>) -> Result<Self> {
        for level in &levels {
            if let Some((p, _)) = level.iter().find(|(p, _)| p.0 == p.1) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "sub-shape ({}, {}) repeats a symbol",
                    p.0,
                    p.1
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Pairs at 1-based position `j` (empty when out of range).
    pub fn level(&self, j: usize) -> &[(SymbolPair, f64)] {
        j.checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Baseline expansion: drop prefixes whose count is below `threshold`, then
/// give every survivor `t - 1` children (every symbol except its last).
/// The empty root prefix is never pruned and spawns all `t` symbols.
pub fn expand_baseline(frontier: &[CountedShape], t: usize, threshold: f64) -> Result<CandidateSet> {
    let mut out = Vec::new();
    for node in frontier {
        let root = node.seq.is_empty();
        if !root && node.count < threshold {
            continue;
        }
        let last = node.seq.last();
        out.extend(
            (0..t as u8)
                .filter(|&s| Some(s) != last)
                .map(|s| node.seq.extended(s)),
        );
    }
    if out.is_empty() {
        return Err(Error::EmptyFrontier);
    }
    out.sort();
    CandidateSet::new(out)
}

/// PrivShape expansion from prefixes of length `level` using the retained
/// sub-shapes at position `level`: a prefix ending in `x` gains `y` for each
/// retained `(x, y)`. At `level = 0` the root expands to the distinct first
/// symbols of the position-1 sub-shapes.
pub fn expand_pruned(
    frontier: &[SymbolSequence],
    table: &SubShapeTable,
    level: usize,
    c: usize,
    k: usize,
) -> Result<CandidateSet> {
    if frontier.len() > c * k {
        return Err(Error::Protocol(alloc::format!(
            "frontier of {} exceeds c*k = {}",
            frontier.len(),
            c * k
        )));
    }
    let mut out = Vec::new();
    if level == 0 {
        let mut firsts: Vec<u8> = table.level(1).iter().map(|(p, _)| p.0).collect();
        firsts.sort_unstable();
        firsts.dedup();
        if frontier.iter().any(SymbolSequence::is_empty) {
            out.extend(firsts.into_iter().map(|s| SymbolSequence::new(alloc::vec![s])));
        }
    } else {
        let pairs = table.level(level);
        for prefix in frontier {
            if prefix.len() != level {
                return Err(Error::Protocol(alloc::format!(
                    "prefix {prefix} does not have length {level}"
                )));
            }
            let Some(x) = prefix.last() else { continue };
            out.extend(
                pairs
                    .iter()
                    .filter(|(p, _)| p.0 == x)
                    .map(|(p, _)| prefix.extended(p.1)),
            );
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyFrontier);
    }
    out.sort();
    out.dedup();
    CandidateSet::new(out)
}

/// The `min(c·k, |nodes|)` highest counts, ties to the lexicographically
/// smaller sequence.
pub fn prune_topck(mut nodes: Vec<CountedShape>, c: usize, k: usize) -> Vec<CountedShape> {
    nodes.sort_by(rank_order);
    nodes.truncate(c * k);
    nodes
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrieNode {
    pub symbol: Option<u8>,
    pub depth: usize,
    pub count: f64,
    pub children: Vec<usize>,
}

/// Server-side record of every candidate issued and its tally.
#[derive(Debug, Clone)]
pub struct Trie {
    nodes: Vec<TrieNode>,
    index: BTreeMap<SymbolSequence, usize>,
}

impl Default for Trie {
    fn default() -> Self {
        Self::new()
    }
}

impl Trie {
    pub fn new() -> Self {
        let root = TrieNode {
            symbol: None,
            depth: 0,
            count: 0.0,
            children: Vec::new(),
        };
        let mut index = BTreeMap::new();
        index.insert(SymbolSequence::default(), 0);
        Self {
            nodes: alloc::vec![root],
            index,
        }
    }

    pub fn root(&self) -> &TrieNode {
        &self.nodes[0]
    }

    pub fn node(&self, seq: &SymbolSequence) -> Option<&TrieNode> {
        self.index.get(seq).map(|&i| &self.nodes[i])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Insert (or update) the node for `seq`, creating missing ancestors
    /// with zero count.
    pub fn set_count(&mut self, seq: &SymbolSequence, count: f64) {
        let mut parent = 0;
        for depth in 1..=seq.len() {
            let prefix = seq.prefix(depth);
            parent = match self.index.get(&prefix) {
                Some(&i) => i,
                None => {
                    let id = self.nodes.len();
                    self.nodes.push(TrieNode {
                        symbol: prefix.last(),
                        depth,
                        count: 0.0,
                        children: Vec::new(),
                    });
                    self.nodes[parent].children.push(id);
                    self.index.insert(prefix, id);
                    id
                }
            };
        }
        self.nodes[parent].count = count;
    }

    /// All nodes at `depth`, in lexicographic order.
    pub fn level(&self, depth: usize) -> Vec<CountedShape> {
        self.index
            .iter()
            .filter(|(s, _)| s.len() == depth)
            .map(|(s, &i)| CountedShape::new(s.clone(), self.nodes[i].count))
            .collect()
    }

    /// Indented text dump, one node per line: depth, sequence, count.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (seq, &i) in &self.index {
            let node = &self.nodes[i];
            let shown = if seq.is_empty() { String::from("<root>") } else { alloc::format!("{seq}") };
            let _ = writeln!(
                out,
                "{:indent$}{} {} {}",
                "",
                node.depth,
                shown,
                node.count,
                indent = 2 * node.depth
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn s(x: &str) -> SymbolSequence {
        SymbolSequence::parse(x).unwrap()
    }

    fn cs(x: &str, n: f64) -> CountedShape {
        CountedShape::new(s(x), n)
    }

    fn names(set: &CandidateSet) -> Vec<String> {
        set.iter().map(|c| c.to_string()).collect()
    }

    #[test]
    fn pair_indexing_is_a_bijection() {
        for t in 2..8 {
            let mut seen = vec![false; t * (t - 1)];
            for x in 0..t as u8 {
                for y in 0..t as u8 {
                    if x == y {
                        assert_eq!(pair_index(SymbolPair(x, y), t), t * (t - 1));
                        continue;
                    }
                    let i = pair_index(SymbolPair(x, y), t);
                    assert!(!seen[i]);
                    seen[i] = true;
                    assert_eq!(pair_from_index(i, t), Some(SymbolPair(x, y)));
                }
            }
            assert_eq!(pair_from_index(t * (t - 1), t), None);
            assert_eq!(pair_index(SymbolPair(t as u8, 0), t), t * (t - 1));
        }
        assert_eq!(pair_domain_size(3), 7);
    }

    #[test]
    fn baseline_level_two_fanout() {
        let frontier: Vec<_> = ["a", "b", "c", "d"].iter().map(|x| cs(x, 500.0)).collect();
        let out = expand_baseline(&frontier, 4, 100.0).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|c| !c.has_adjacent_repeat()));
    }

    #[test]
    fn baseline_threshold_behaviour() {
        let frontier = vec![cs("a", 5.0), cs("b", 5.0)];
        assert_eq!(expand_baseline(&frontier, 3, 100.0), Err(Error::EmptyFrontier));
        let out = expand_baseline(&[cs("ab", 200.0), cs("ba", 1.0)], 3, 100.0).unwrap();
        assert_eq!(names(&out), ["aba", "abc"]);
        let root = expand_baseline(&[cs("", 0.0)], 3, 100.0).unwrap();
        assert_eq!(names(&root), ["a", "b", "c"]);
    }

    fn table(levels: Vec<Vec<(&str, f64)>>) -> SubShapeTable {
        SubShapeTable::new(
            levels
                .into_iter()
                .map(|l| {
                    l.into_iter()
                        .map(|(p, f)| {
                            let b = p.as_bytes();
                            (SymbolPair(b[0] - b'a', b[1] - b'a'), f)
                        })
                        .collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pruned_expansion_rules() {
        let tbl = table(vec![
            vec![("ab", 9.0), ("ca", 5.0), ("ac", 3.0)],
            vec![("bc", 7.0), ("ba", 4.0)],
        ]);
        let root = expand_pruned(&[SymbolSequence::default()], &tbl, 0, 3, 2).unwrap();
        assert_eq!(names(&root), ["a", "c"]);

        let l2 = expand_pruned(&[s("a"), s("b"), s("c")], &tbl, 1, 3, 2).unwrap();
        assert_eq!(names(&l2), ["ab", "ac", "ca"]);

        // "ac" has no retained pair starting with c at position 2
        let l3 = expand_pruned(&[s("ab"), s("ac")], &tbl, 2, 3, 2).unwrap();
        assert_eq!(names(&l3), ["aba", "abc"]);

        assert_eq!(expand_pruned(&[s("ac")], &tbl, 2, 3, 2), Err(Error::EmptyFrontier));
        assert!(expand_pruned(&[s("abc")], &tbl, 2, 3, 2).is_err());
    }

    #[test]
    fn pruned_full_fanout() {
        let t = 5u8;
        let pairs: Vec<(SymbolPair, f64)> = (0..t).filter(|&y| y != 2).map(|y| (SymbolPair(2, y), 1.0)).collect();
        let tbl = SubShapeTable::new(vec![pairs]).unwrap();
        let out = expand_pruned(&[s("c")], &tbl, 1, 3, 2).unwrap();
        assert_eq!(out.len(), t as usize - 1);
    }

    #[test]
    fn fig7_configuration_bound() {
        // c = 3, k = 2: six retained prefixes, six retained pairs
        let prefixes: Vec<_> = ["ab", "ac", "ba", "bc", "ca", "cb"].iter().map(|x| s(x)).collect();
        let tbl = table(vec![
            vec![],
            vec![("ab", 1.0), ("ac", 1.0), ("ba", 1.0), ("bc", 1.0), ("ca", 1.0), ("cb", 1.0)],
        ]);
        let out = expand_pruned(&prefixes, &tbl, 2, 3, 2).unwrap();
        assert!(out.len() <= 36);
        assert_eq!(out.len(), 12);
        let too_many: Vec<_> = (0..7).map(|i| SymbolSequence::new(vec![i, i + 1])).collect();
        assert!(expand_pruned(&too_many, &tbl, 2, 3, 2).is_err());
    }

    #[test]
    fn prune_examples() {
        let few = vec![cs("a", 1.0), cs("b", 2.0)];
        assert_eq!(prune_topck(few, 3, 2).len(), 2);

        let many: Vec<_> = (0..10u8).map(|i| CountedShape::new(SymbolSequence::new(vec![i]), i as f64)).collect();
        let top = prune_topck(many, 3, 2);
        let counts: Vec<f64> = top.iter().map(|n| n.count).collect();
        assert_eq!(counts, [9.0, 8.0, 7.0, 6.0, 5.0, 4.0]);

        let tied = vec![cs("cb", 3.0), cs("ab", 3.0), cs("ba", 3.0)];
        let top = prune_topck(tied, 1, 2);
        assert_eq!(top, vec![cs("ab", 3.0), cs("ba", 3.0)]);
    }

    proptest! {
        #[test]
        fn prune_matches_exhaustive_sort(
            entries in proptest::collection::vec((proptest::collection::vec(0u8..3, 1..4), 0u8..4), 0..20),
            c in 1usize..4,
            k in 1usize..4,
        ) {
            let mut nodes: Vec<CountedShape> = Vec::new();
            for (sym, cnt) in entries {
                let seq = SymbolSequence::new(sym);
                if !nodes.iter().any(|n| n.seq == seq) {
                    nodes.push(CountedShape::new(seq, cnt as f64));
                }
            }
            // oracle: selection by repeatedly taking the best remaining entry
            let mut pool = nodes.clone();
            let mut want = Vec::new();
            while want.len() < c * k && !pool.is_empty() {
                let mut best = 0;
                for i in 1..pool.len() {
                    let (a, b) = (&pool[i], &pool[best]);
                    if a.count > b.count || (a.count == b.count && a.seq.symbols() < b.seq.symbols()) {
                        best = i;
                    }
                }
                want.push(pool.remove(best));
            }
            prop_assert_eq!(prune_topck(nodes, c, k), want);
        }
    }

    #[test]
    fn unpruned_growth_matches_closed_form() {
        for t in 2..=4usize {
            let mut frontier = vec![cs("", 0.0)];
            for level in 1..=4u32 {
                let set = expand_baseline(&frontier, t, 0.0).unwrap();
                assert_eq!(set.len(), t * (t - 1).pow(level - 1));
                assert!(set.iter().all(|c| !c.has_adjacent_repeat()));
                frontier = set.iter().map(|c| CountedShape::new(c.clone(), 1.0)).collect();
            }
        }
    }

    #[test]
    fn trie_records_and_dumps() {
        let mut trie = Trie::new();
        trie.set_count(&s("a"), 4.0);
        trie.set_count(&s("ab"), 3.0);
        trie.set_count(&s("ac"), 1.0);
        trie.set_count(&s("cab"), 2.0);
        assert_eq!(trie.len(), 7);
        assert_eq!(trie.node(&s("ca")).unwrap().count, 0.0);
        assert_eq!(trie.root().children.len(), 2);
        assert_eq!(trie.level(2).len(), 3);
        let dump = trie.dump();
        assert!(dump.starts_with("0 <root> 0\n"));
        assert!(dump.contains("\n    2 ab 3\n"));
        for node in trie.nodes.iter() {
            for &c in &node.children {
                assert_eq!(trie.nodes[c].depth, node.depth + 1);
                assert_ne!(trie.nodes[c].symbol, node.symbol);
            }
        }
    }
}
