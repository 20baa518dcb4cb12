#![allow(dead_code)]

use std::collections::HashMap;

use rand::Rng;
use sicql::lang::*;

/// Random pattern over the letters a, b, c within the supported subset.
pub fn random_pattern(rng: &mut impl Rng) -> String {
    let branches = if rng.random_bool(0.25) { 2 } else { 1 };
    let mut parts = Vec::new();
    for _ in 0..branches {
        let mut s = String::new();
        if rng.random_bool(0.7) {
            s.push('^');
        }
        s.push_str(&random_node(rng, 2));
        if rng.random_bool(0.7) {
            s.push('$');
        }
        parts.push(s);
    }
    parts.join("|")
}

fn random_atom(rng: &mut impl Rng, depth: u32) -> String {
    match rng.random_range(0..10) {
        0..=3 => ["a", "b", "c"][rng.random_range(0..3)].to_string(),
        4 => ["[ab]", "[^a]", "[a-c]", "[bc]"][rng.random_range(0..4)].to_string(),
        5 => ".".to_string(),
        6 => ["\\w", "\\d", "\\W"][rng.random_range(0..3)].to_string(),
        _ if depth > 0 => {
            let n = rng.random_range(1..=2);
            let alts: Vec<String> = (0..n).map(|_| random_node(rng, depth - 1)).collect();
            if rng.random_bool(0.5) {
                format!("({})", alts.join("|"))
            } else {
                format!("(?:{})", alts.join("|"))
            }
        }
        _ => "a".to_string(),
    }
}

fn random_node(rng: &mut impl Rng, depth: u32) -> String {
    let n = rng.random_range(1..=3);
    let mut s = String::new();
    for _ in 0..n {
        s.push_str(&random_atom(rng, depth));
        match rng.random_range(0..10) {
            0 => s.push('*'),
            1 => s.push('+'),
            2 => s.push('?'),
            3 => {
                let lo = rng.random_range(0..3);
                match rng.random_range(0..3) {
                    0 => s.push_str(&format!("{{{lo}}}")),
                    1 => s.push_str(&format!("{{{lo},}}")),
                    _ => s.push_str(&format!("{{{lo},{}}}", lo + rng.random_range(0..3))),
                }
            }
            _ => {}
        }
    }
    s
}

pub fn random_string(rng: &mut impl Rng, alphabet: &[char], max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect()
}

/// Every string over `alphabet` of length at most `max_len`.
pub fn all_strings(alphabet: &[char], max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &c in alphabet {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Naive substring test, independent of `str::contains`.
pub fn naive_contains(text: &[char], probe: &[char]) -> bool {
    if probe.is_empty() {
        return true;
    }
    (0..text.len())
        .filter(|&i| i + probe.len() <= text.len())
        .any(|i| text[i..i + probe.len()] == *probe)
}

/// Random pipe query over a table `t` mixing prompt and expression stages,
/// with asserts placed at arbitrary points after their inputs exist.
pub fn random_plan_query(rng: &mut impl Rng, operators: usize) -> String {
    let mut attrs: Vec<String> = vec!["s0".into(), "s1".into()];
    let mut aliases: Vec<String> = Vec::new();
    let mut q = String::from("FROM t");
    for i in 0..operators {
        let x = attrs[rng.random_range(0..attrs.len())].clone();
        match rng.random_range(0..4) {
            0 => {
                q.push_str(&format!(" |> EXTEND p'rewrite {{{x}}}' AS a{i}"));
                attrs.push(format!("a{i}"));
            }
            1 => {
                q.push_str(&format!(" |> EXTEND {x} || 'z' AS a{i}"));
                attrs.push(format!("a{i}"));
            }
            2 => {
                let y = attrs[rng.random_range(0..attrs.len())].clone();
                q.push_str(&format!(" |> SET {x} = p'merge {{{y}}}'"));
            }
            _ => {
                q.push_str(&format!(" |> WHERE p'keep {{{x}}}' AS w{i}"));
                aliases.push(format!("w{i}"));
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let a = attrs[rng.random_range(0..attrs.len())].clone();
            let b = attrs[rng.random_range(0..attrs.len())].clone();
            let decl = match rng.random_range(0..4) {
                0 => format!("{a} INCLUDES 'q'"),
                1 => format!("LENGTH({a}) < 50"),
                2 => format!("LENGTH({a}) <= LENGTH({b})"),
                _ if !aliases.is_empty() => format!("{} SOUND", aliases[rng.random_range(0..aliases.len())]),
                _ => format!("{a} EXCLUDES 'x'"),
            };
            q.push_str(&format!(" |> ASSERT {decl}"));
        }
    }
    q
}

/// A one-operator plan with up to four checks and a random profile.
pub fn random_selection_instance(
    rng: &mut impl Rng,
) -> (sicql::lang::LogicalPlan, sicql::physical::Profile) {
    use serde_json::json;
    let annotation = ["EXTRACTIVE", "ABSTRACTIVE"][rng.random_range(0..2)];
    let mut q = format!("FROM t |> EXTEND {annotation} p'copy {{x}}' AS y");
    let pool = [
        "y GROUNDED",
        "REGEXP_CONTAINS(y, r'^a+$')",
        "y EXCLUDES p'anything rude'",
        "y IN ('a', 'b')",
        "y INCLUDES 'k'",
        "y RELEVANT",
    ];
    let n = rng.random_range(1..=4);
    for _ in 0..n {
        q.push_str(&format!(" |> ASSERT {}", pool[rng.random_range(0..pool.len())]));
    }
    let plan = sicql::lang::parse_query(&q).unwrap();
    let mut constraints = serde_json::Map::new();
    for c in plan.constraints() {
        let candidates: Vec<_> = [
            ("reactive", "model"),
            ("proactive-stream", "model"),
            ("proactive-mask", "deterministic:regex-dfa"),
            ("proactive-mask", "deterministic:suffix-automaton"),
            ("reactive", "deterministic:substring"),
        ]
        .iter()
        .map(|(mode, mech)| {
            json!({
                "mode": mode,
                "mechanism": mech,
                "cost": rng.random_range(0.0..3.0),
                "precision": rng.random_range(0.6..1.0),
                "recall": rng.random_range(0.6..1.0),
            })
        })
        .collect();
        constraints.insert(
            c.id.clone(),
            json!({"candidates": candidates, "violation_prob": rng.random_range(0.0..0.7)}),
        );
    }
    let mut thresholds = serde_json::Map::new();
    if rng.random_bool(0.5) {
        thresholds.insert("min_recall".into(), json!(rng.random_range(0.6..0.95)));
    }
    if rng.random_bool(0.3) {
        thresholds.insert("min_precision".into(), json!(rng.random_range(0.6..0.95)));
    }
    let profile = serde_json::from_value(json!({
        "operators": {"y": {"cost": rng.random_range(0.5..5.0)}},
        "constraints": constraints,
        "thresholds": thresholds,
        "input_cardinality": 10.0,
    }))
    .unwrap();
    (plan, profile)
}

/// Brute-force optimum: every assignment, checked for thresholds and the
/// one-mask-per-operator rule, cheapest first in enumeration order.
pub fn brute_force_selection(
    plan: &sicql::lang::LogicalPlan,
    profile: &sicql::physical::Profile,
    caps: &sicql::physical::Capabilities,
    config: &sicql::config::EngineConfig,
) -> Option<(f64, std::collections::BTreeMap<String, sicql::physical::ImplCandidate>)> {
    use sicql::physical::*;
    let table = candidate_table(plan, profile, caps, config).unwrap();
    let th = &profile.thresholds;
    let ok = |k: &ImplCandidate| {
        let p = th.constraints.get(&k.constraint_id).and_then(|t| t.min_precision).or(th.min_precision);
        let r = th.constraints.get(&k.constraint_id).and_then(|t| t.min_recall).or(th.min_recall);
        k.is_deterministic()
            || (p.is_none_or(|p| k.precision >= p)
                && r.is_none_or(|r| k.recall >= r)
                && (th.min_confidence.is_none() || k.confidence_capable))
    };
    let mut assignments: Vec<Vec<&ImplCandidate>> = vec![vec![]];
    for (_, _, cands) in &table {
        assignments = assignments
            .into_iter()
            .flat_map(|a| {
                cands.iter().map(move |k| {
                    let mut a = a.clone();
                    a.push(k);
                    a
                })
            })
            .collect();
    }
    let mut best: Option<(f64, std::collections::BTreeMap<String, ImplCandidate>)> = None;
    for a in assignments {
        if !a.iter().all(|k| ok(k)) {
            continue;
        }
        let mut masks_per_stage = std::collections::HashMap::new();
        for ((_, stage, _), k) in table.iter().zip(&a) {
            if k.mode == ImplMode::ProactiveMask {
                *masks_per_stage.entry(*stage).or_insert(0) += 1;
            }
        }
        if masks_per_stage.values().any(|&n| n > 1) {
            continue;
        }
        let choices: std::collections::BTreeMap<_, _> =
            a.iter().map(|k| (k.constraint_id.clone(), (*k).clone())).collect();
        let cost = estimate_plan(plan, &choices, profile, config).unwrap().expected_cost;
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, choices));
        }
    }
    best
}

/// Ordinal of the last non-assert stage writing each name, up to `end`.
pub fn writers(plan: &LogicalPlan, end: usize) -> HashMap<String, usize> {
    let mut w = HashMap::new();
    let mut ordinal = 0;
    for s in &plan.stages[..end] {
        if s.is_assert() {
            continue;
        }
        let names: Vec<String> = match &s.kind {
            StageKind::Scan { .. } => s.schema.names().map(str::to_string).collect(),
            _ => s.produces().or(s.alias()).map(str::to_string).into_iter().collect(),
        };
        for n in names {
            w.insert(n, ordinal);
        }
        ordinal += 1;
    }
    w
}

pub fn reads(c: &ConstraintDecl) -> Vec<String> {
    let mut r = constraint_attributes(c);
    if let Target::Operator(a) = &c.target {
        r.push(a.clone());
    }
    r
}

/// For each constraint: the writers it sees and the ordinal of the
/// operator right before it.
pub fn placements(plan: &LogicalPlan) -> HashMap<String, (Vec<usize>, usize)> {
    let mut out = HashMap::new();
    for (i, s) in plan.stages.iter().enumerate() {
        if let Some(c) = s.constraint() {
            let w = writers(plan, i);
            let seen = reads(c).iter().map(|r| w[r]).collect();
            let before = plan.stages[..i].iter().filter(|s| !s.is_assert()).count() - 1;
            out.insert(c.id.clone(), (seen, before));
        }
    }
    out
}

/// All orderings of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Mean attempts of a retry loop simulated by coin flips.
pub fn monte_carlo_attempts(rng: &mut impl Rng, v: f64, r: u32, trials: u32) -> f64 {
    let mut total = 0u64;
    for _ in 0..trials {
        let mut attempts = 1;
        while attempts <= r && rng.random_bool(v) {
            attempts += 1;
        }
        total += attempts as u64;
    }
    total as f64 / trials as f64
}

