//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one ordered PASS/FAIL line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::TcpListener;
use std::process::ExitCode;
use std::thread;
use std::time::Instant;

use privshape::commands::cmd_run;
use privshape::config::ExperimentConfig;
use privshape::transport::{connect, serve, ServeOptions};
use privshape_core::eval::{compressed_universe, frequent_shapes_oracle, FrequentShapeQuery, OracleLimits};
use privshape_core::ldp::{
    em_probabilities, em_select, grr_debias, grr_perturb, oue_debias, oue_perturb, CandidateSet, PrivacyBudget,
    RandomSource,
};
use privshape_core::protocol::{
    overall_bound, run, run_privshape, utility_bound, Phase, ProtocolConfig, Report, ReportPayload, ShapeResult,
    UserData,
};
use privshape_core::series::{compress, normalize, sax, SaxAlphabet};
use privshape_core::trie::{expand_baseline, CountedShape};
use privshape_core::{DistanceMetric, SymbolSequence, TimeSeries};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const TRIALS: usize = 1_000_000;

fn seq(s: &str) -> SymbolSequence {
    SymbolSequence::parse(s).unwrap()
}

fn budget(e: f64) -> PrivacyBudget {
    PrivacyBudget::new(e).unwrap()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sax_golden() -> Check {
    let mut values = Vec::new();
    for ch in "aaaccccccbbbbaaa".chars() {
        let v = match ch {
            'a' => -1.0,
            'b' => 0.0,
            _ => 1.0,
        };
        values.extend(std::iter::repeat_n(v, 8));
    }
    let series = normalize(&TimeSeries::new(values));
    let symbols = sax(&series, 8, &SaxAlphabet::new(3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(symbols.to_string() == "aaaccccccbbbbaaa", || format!("sax gave {symbols}"))?;
    let compressed = compress(&symbols);
    ensure(compressed.to_string() == "acba", || format!("compress gave {compressed}"))?;
    Ok(format!("{symbols} -> {compressed}"))
}

/// Largest `P̂(o|v) - e^ε P̂(o|v')` in units of its sampling standard
/// deviation, over every output and ordered pair of inputs.
fn worst_ratio_excess(hist: &[Vec<u64>], n: usize, epsilon: f64) -> f64 {
    let bound = epsilon.exp();
    let nf = n as f64;
    let mut worst = f64::NEG_INFINITY;
    for a in hist {
        for b in hist {
            for (&ca, &cb) in a.iter().zip(b) {
                let (pa, pb) = (ca as f64 / nf, cb as f64 / nf);
                let sd = (pa * (1.0 - pa) / nf + bound * bound * pb * (1.0 - pb) / nf).sqrt();
                let excess = pa - bound * pb;
                let z = if sd > 0.0 {
                    excess / sd
                } else if excess > 0.0 {
                    f64::INFINITY
                } else {
                    f64::NEG_INFINITY
                };
                worst = worst.max(z);
            }
        }
    }
    worst
}

fn ldp_ratios() -> Check {
    let mut worst = f64::NEG_INFINITY;
    for d in [2usize, 5, 10] {
        for (cell, eps) in [0.5, 1.0, 4.0].into_iter().enumerate() {
            let mut rng = RandomSource::derived(11, d as u64, cell as u64);
            let b = budget(eps);
            let hist: Vec<Vec<u64>> = (0..d)
                .map(|v| {
                    let mut h = vec![0u64; d];
                    for _ in 0..TRIALS {
                        h[grr_perturb(v, d, b, &mut rng).unwrap()] += 1;
                    }
                    h
                })
                .collect();
            let z = worst_ratio_excess(&hist, TRIALS, eps);
            ensure(z <= 3.0, || format!("GRR d={d} eps={eps}: ratio exceeds e^eps by {z:.2} sd"))?;
            worst = worst.max(z);
        }
    }

    let pool = ["ab", "abc", "dcba", "cad", "bd", "acbd"].map(seq);
    let users = [seq("abcd"), seq("dcb")];
    let eps = 1.0;
    let b = budget(eps);
    let mut rng = RandomSource::new(11);
    let mut min_p = f64::INFINITY;
    for m in 3..=6 {
        let cands = CandidateSet::new(pool[..m].to_vec()).unwrap();
        let mut hist = Vec::new();
        for user in &users {
            let mut h = vec![0u64; m];
            for _ in 0..TRIALS {
                h[em_select(user, &cands, DistanceMetric::Dtw, b, &mut rng).unwrap()] += 1;
            }
            let probs = em_probabilities(user, &cands, DistanceMetric::Dtw, b).unwrap();
            let stat: f64 = h
                .iter()
                .zip(&probs)
                .map(|(&o, &p)| {
                    let e = p * TRIALS as f64;
                    (o as f64 - e).powi(2) / e
                })
                .sum();
            let p = 1.0 - ChiSquared::new((m - 1) as f64).unwrap().cdf(stat);
            ensure(p > 0.01, || format!("EM m={m} user {user}: chi-square p = {p:.4}"))?;
            min_p = min_p.min(p);
            hist.push(h);
        }
        let z = worst_ratio_excess(&hist, TRIALS, eps);
        ensure(z <= 3.0, || format!("EM m={m}: ratio exceeds e^eps by {z:.2} sd"))?;
        worst = worst.max(z);
    }
    Ok(format!("worst excess {worst:.2} sd, min chi-square p {min_p:.3}"))
}

fn debias_unbiased() -> Check {
    let dist = [0.4, 0.25, 0.2, 0.1, 0.05];
    let d = dist.len();
    let truth: Vec<u64> = dist.iter().map(|p| (p * TRIALS as f64) as u64).collect();
    let n = TRIALS as u64;
    let mut rng = RandomSource::new(12);
    let mut worst: f64 = 0.0;
    for eps in [0.5, 1.0, 4.0] {
        let b = budget(eps);

        let mut counts = vec![0u64; d];
        for (v, &c) in truth.iter().enumerate() {
            for _ in 0..c {
                counts[grr_perturb(v, d, b, &mut rng).unwrap()] += 1;
            }
        }
        let est = grr_debias(&counts, n, b).unwrap();
        let (p, q) = (b.grr_keep(d), b.grr_flip(d));
        for (v, &c) in truth.iter().enumerate() {
            let c = c as f64;
            let var = (c * p * (1.0 - p) + (n as f64 - c) * q * (1.0 - q)) / ((p - q) * (p - q));
            let z = (est[v] - c).abs() / var.sqrt();
            ensure(z <= 3.0, || format!("GRR eps={eps} cell {v}: {:.1} vs {c} ({z:.2} SE)", est[v]))?;
            worst = worst.max(z);
        }

        let mut sums = vec![0u64; d];
        for (v, &c) in truth.iter().enumerate() {
            for _ in 0..c {
                for (s, bit) in sums.iter_mut().zip(oue_perturb(v, d, b, &mut rng).unwrap()) {
                    *s += u64::from(bit);
                }
            }
        }
        let est = oue_debias(&sums, n, b).unwrap();
        let q = b.oue_flip();
        for (v, &c) in truth.iter().enumerate() {
            let c = c as f64;
            let var = (c * 0.25 + (n as f64 - c) * q * (1.0 - q)) / ((0.5 - q) * (0.5 - q));
            let z = (est[v] - c).abs() / var.sqrt();
            ensure(z <= 3.0, || format!("OUE eps={eps} cell {v}: {:.1} vs {c} ({z:.2} SE)", est[v]))?;
            worst = worst.max(z);
        }
    }
    Ok(format!("worst cell {worst:.2} SE"))
}

fn random_compressed(rng: &mut RandomSource, t: usize, max_len: usize) -> SymbolSequence {
    let len = 1 + rng.index(max_len);
    let mut out: Vec<u8> = Vec::with_capacity(len);
    while out.len() < len {
        let s = rng.index(t) as u8;
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    SymbolSequence::new(out)
}

/// Sum of per-position gaps over the shape's length; sequences shorter than
/// the shape never match it.
fn additive_distance(s: &SymbolSequence, shape: &SymbolSequence) -> Option<u32> {
    if s.len() < shape.len() {
        return None;
    }
    Some(
        s.symbols()
            .iter()
            .zip(shape.symbols())
            .map(|(&a, &b)| u32::from(a.abs_diff(b)))
            .sum(),
    )
}

fn prefix_monotonicity() -> Check {
    let mut rng = RandomSource::new(13);
    let data: Vec<SymbolSequence> = (0..300).map(|_| random_compressed(&mut rng, 4, 6)).collect();
    let universe = compressed_universe(4, 6);
    let mut checked = 0usize;
    for theta in 0..=4u32 {
        let freq = |shape: &SymbolSequence| {
            data.iter()
                .filter(|s| additive_distance(s, shape).is_some_and(|d| d <= theta))
                .count()
        };
        let table: BTreeMap<&SymbolSequence, usize> = universe.iter().map(|u| (u, freq(u))).collect();
        for min_count in [1usize, 5, 20, 50] {
            for (shape, &f) in &table {
                if f < min_count {
                    continue;
                }
                for len in 1..shape.len() {
                    let p = shape.prefix(len);
                    let pf = table[&p];
                    ensure(pf >= f, || format!("theta={theta}: prefix {p} ({pf}) of {shape} ({f})"))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{} sequences, {checked} prefix checks", data.len()))
}

fn trie_cardinality() -> Check {
    for t in 2..=4usize {
        let mut frontier = vec![CountedShape::new(SymbolSequence::new(Vec::new()), 0.0)];
        for level in 1..=4u32 {
            let cands = expand_baseline(&frontier, t, 0.0).map_err(|e| e.to_string())?;
            let want = t * (t - 1).pow(level - 1);
            ensure(cands.len() == want, || format!("t={t} level {level}: {} != {want}", cands.len()))?;
            frontier = cands.iter().map(|s| CountedShape::new(s.clone(), 0.0)).collect();
        }
    }
    let mut rng = RandomSource::new(14);
    let mut rounds = 0;
    for run_id in 0..20u64 {
        let c = 2 + rng.index(2);
        let k = 1 + rng.index(3);
        let eps = [0.5, 1.0, 4.0][rng.index(3)];
        let users: Vec<UserData> = (0..600)
            .map(|_| UserData {
                sequence: random_compressed(&mut rng, 4, 6),
                label: None,
            })
            .collect();
        let config = ProtocolConfig {
            epsilon: budget(eps),
            c,
            k,
            seed: run_id,
            ..ProtocolConfig::default()
        };
        let out = run_privshape(&users, &config).map_err(|e| e.to_string())?;
        for r in &out.rounds {
            if matches!(r.phase, Phase::Trie(_) | Phase::Refine) {
                ensure(r.candidates <= c * c * k * k, || {
                    format!("run {run_id}: round {} has {} > c²k² candidates", r.index, r.candidates)
                })?;
                rounds += 1;
            }
        }
    }
    Ok(format!("t(t-1)^(l-1) for t<=4, l<=4; {rounds} randomized rounds within c²k²"))
}

fn noiseless_end_to_end() -> Check {
    let users: Vec<UserData> = (0..10_000)
        .map(|i| UserData {
            sequence: seq(if i % 5 < 3 { "acbd" } else { "dbca" }),
            label: None,
        })
        .collect();
    let config = ProtocolConfig {
        epsilon: budget(f64::INFINITY),
        seed: 15,
        ..ProtocolConfig::default()
    };
    let out = run_privshape(&users, &config).map_err(|e| e.to_string())?;
    let seqs: Vec<SymbolSequence> = users.iter().map(|u| u.sequence.clone()).collect();
    let query = FrequentShapeQuery::new(0.0, DistanceMetric::Dtw, 1).unwrap();
    let oracle = frequent_shapes_oracle(&seqs, &query, OracleLimits::default()).map_err(|e| e.to_string())?;
    let expected: Vec<SymbolSequence> = oracle.iter().take(2).map(|(s, _)| s.clone()).collect();
    ensure(out.result.shapes == expected, || {
        format!("got {:?}, oracle top-2 {:?}", out.result.shapes, expected)
    })?;
    let mut truth: BTreeMap<&SymbolSequence, f64> = BTreeMap::new();
    for r in out.transcript.iter().filter(|r| matches!(r.payload, ReportPayload::Refinement(_))) {
        *truth.entry(&users[r.user as usize].sequence).or_default() += 1.0;
    }
    for (s, &c) in out.result.shapes.iter().zip(&out.result.counts) {
        let want = truth.get(s).copied().unwrap_or(0.0);
        ensure((c - want).abs() <= 0.01 * want, || format!("{s}: count {c} vs {want}"))?;
    }
    Ok(format!(
        "{} with counts {:?} (population {:?})",
        out.result.shapes.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        out.result.counts,
        oracle.iter().take(2).map(|(_, n)| *n).collect::<Vec<_>>()
    ))
}

fn classification_trend() -> Check {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [("task", "classification"), ("trials", "20"), ("trig_count", "20000"), ("t", "4"), ("w", "10")] {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    let mut means = Vec::new();
    for eps in ["4", "0.5"] {
        cfg.set("epsilon", eps).map_err(|e| e.to_string())?;
        let out = cmd_run(&cfg).map_err(|e| e.to_string())?;
        means.push(out.trials.iter().map(|t| t.value).sum::<f64>() / out.trials.len() as f64);
    }
    ensure(means[0] >= 0.80, || format!("mean accuracy at eps=4 is {:.3}", means[0]))?;
    ensure(means[0] > means[1], || {
        format!("accuracy at eps=4 ({:.3}) not above eps=0.5 ({:.3})", means[0], means[1])
    })?;
    Ok(format!("accuracy {:.3} at eps=4, {:.3} at eps=0.5", means[0], means[1]))
}

fn deterministic_replay() -> Check {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [("task", "classification"), ("trials", "3"), ("trig_count", "2000"), ("seed", "99")] {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    let a = cmd_run(&cfg).map_err(|e| e.to_string())?;
    let b = cmd_run(&cfg).map_err(|e| e.to_string())?;
    ensure(a.csv == b.csv, || "CSV output differs between runs".into())?;
    ensure(a.transcript == b.transcript, || "transcripts differ between runs".into())?;

    let mut sections: Vec<Vec<u64>> = Vec::new();
    for line in a.transcript.lines() {
        if line.starts_with("# trial ") {
            sections.push(Vec::new());
        } else if !line.starts_with('#') {
            let r: Report = line.parse().map_err(|e| format!("{line:?}: {e}"))?;
            sections.last_mut().ok_or("report before first trial")?.push(r.user);
        }
    }
    ensure(sections.len() == 3, || format!("{} trial sections", sections.len()))?;
    for (i, ids) in sections.iter().enumerate() {
        let distinct: BTreeSet<u64> = ids.iter().copied().collect();
        ensure(ids.len() == 2000 && distinct.len() == 2000, || {
            format!("trial {i}: {} reports from {} distinct users", ids.len(), distinct.len())
        })?;
    }
    Ok(format!("{} transcript bytes identical, 3 x 2000 single reports", a.transcript.len()))
}

fn bounds() -> Check {
    let u = utility_bound(4, 3, 3, 2);
    let o = overall_bound(4, 3, 3, 2).map_err(|e| e.to_string())?;
    ensure((u - 1.0).abs() < 1e-12, || format!("utility bound {u}"))?;
    ensure((o - 104.0 / 216.0).abs() < 1e-12, || format!("overall bound {o}"))?;
    Ok(format!("utility {u}, overall {o:.6}"))
}

fn wire_equivalence() -> Check {
    let templates = ["acbd", "dbca", "abcb", "cadb"];
    let mut rng = RandomSource::new(16);
    let data: Vec<SymbolSequence> = (0..50).map(|_| seq(templates[rng.index(templates.len())])).collect();
    let config = ProtocolConfig {
        seed: 17,
        ..ProtocolConfig::default()
    };

    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let server_config = config.clone();
    let server = thread::spawn(move || serve(&listener, server_config, &ServeOptions::new(50)));
    let clients: Vec<_> = data
        .iter()
        .cloned()
        .map(|s| thread::spawn(move || connect(addr, s, None)))
        .collect();
    let mut by_id: Vec<Option<UserData>> = vec![None; data.len()];
    let mut received: Vec<ShapeResult> = Vec::new();
    for (h, s) in clients.into_iter().zip(&data) {
        let out = h.join().map_err(|_| "client panicked")?.map_err(|e| e.to_string())?;
        by_id[out.assignment.user as usize] = Some(UserData {
            sequence: s.clone(),
            label: None,
        });
        received.push(out.result);
    }
    let served = server.join().map_err(|_| "server panicked")?.map_err(|e| e.to_string())?;
    let users: Vec<UserData> = by_id.into_iter().collect::<Option<_>>().ok_or("an id was never assigned")?;
    let local = run(&users, &config).map_err(|e| e.to_string())?;

    ensure(served.result == local.result, || {
        format!("served {:?} vs in-process {:?}", served.result, local.result)
    })?;
    ensure(served.transcript == local.transcript, || "transcripts differ".into())?;
    ensure(received.iter().all(|r| *r == local.result), || "a client received a different RESULT".into())?;
    Ok(format!(
        "50 clients, RESULT {}",
        local.result.shapes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("sax golden fixture", sax_golden),
        ("ldp likelihood ratios", ldp_ratios),
        ("debiasing unbiased", debias_unbiased),
        ("prefix-frequency monotonicity", prefix_monotonicity),
        ("trie cardinality", trie_cardinality),
        ("noiseless end-to-end", noiseless_end_to_end),
        ("classification trend", classification_trend),
        ("deterministic replay", deterministic_replay),
        ("utility bounds", bounds),
        ("wire equivalence", wire_equivalence),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let verdict = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{tag} {id:>2} {name} ({secs:.1}s): {detail}");
        let _ = out.flush();
    }
    if failed > 0 {
        let _ = writeln!(out, "{failed} criteria failed");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
