mod common;

use std::collections::HashMap;

use common::{permutations, placements};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sicql::lang::*;
use sicql::logical::*;

#[test]
fn pushdown_places_every_assert_at_its_producer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let q = common::random_plan_query(&mut rng, 8);
        let plan = parse_query(&q).unwrap_or_else(|e| panic!("{q}: {e}"));
        let pushed = pushdown_constraints(&plan).unwrap();
        let before = placements(&plan);
        let after = placements(&pushed);
        assert_eq!(before.len(), after.len());
        for (id, (seen, _)) in &before {
            let (seen_after, anchor) = &after[id];
            assert_eq!(seen, seen_after, "{q}: {id} reads different writers");
            assert_eq!(seen.iter().max(), Some(anchor), "{q}: {id} is not adjacent");
        }
        assert_eq!(pushdown_constraints(&pushed).unwrap(), pushed);
    }
}

fn stats() -> impl Strategy<Value = ConstraintStats> {
    (0.01f64..10.0, 0.0f64..1.0).prop_map(|(cost, selectivity)| ConstraintStats { cost, selectivity })
}

proptest! {
    #[test]
    fn rank_order_is_optimal(block in prop::collection::vec(stats(), 1..=6)) {
        let mut q = String::from("FROM t |> EXTEND p'{x}' AS y");
        for i in 0..block.len() {
            q.push_str(&format!(" |> ASSERT y INCLUDES 'k{i}'"));
        }
        let plan = parse_query(&q).unwrap();
        let lookup = |c: &ConstraintDecl| block[c.id[1..].parse::<usize>().unwrap() - 1];
        let ordered = reorder_constraints(&plan, &lookup);
        let chosen: Vec<ConstraintStats> = ordered.stages.iter().filter_map(|s| s.constraint()).map(lookup).collect();
        let best = permutations(block.len())
            .into_iter()
            .map(|p| expected_check_cost(&p.iter().map(|&i| block[i]).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        prop_assert!((expected_check_cost(&chosen) - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn optimize_is_idempotent(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = parse_query(&common::random_plan_query(&mut rng, 6)).unwrap();
        let config = sicql::config::EngineConfig { default_relevance: true, ..Default::default() };
        let stats = default_stats(&config);
        let once = optimize(&plan, &config, &stats).unwrap();
        prop_assert_eq!(optimize(&once, &config, &stats).unwrap(), once);
    }
}

#[test]
fn grounding_chain_gets_one_check_per_edge() {
    let q = "FROM src |> EXTEND p'read {s}' AS a |> EXTEND p'refine {a}' AS b |> EXTEND p'condense {b}' AS c |> ASSERT c GROUNDED";
    let p = expand_grounding_lineage(&parse_query(q).unwrap());
    let mut per_target: HashMap<String, usize> = HashMap::new();
    for c in p.constraints().filter(|c| matches!(c.class, ConstraintClass::Grounded)) {
        *per_target.entry(c.target.name().to_string()).or_default() += 1;
    }
    assert_eq!(per_target.len(), 3);
    assert!(per_target.values().all(|&n| n == 1));
}
