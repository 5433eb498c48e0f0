mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use socketstore::behaviors::manifest::BehaviorManifest;
use socketstore::catalog;
use socketstore::domain::{Lifecycle, Rating};
use socketstore::netsim::{disjoint_pair, load_topology, shortest_route, Link, PathConstraints, Topology, TopologyDoc};
use socketstore::registry::{rank_score, RankInputs, RankWeights, Registry, RegistryConfig, Verdict};

/// Node count, then (a, b, latency, up) candidates; a spanning chain keeps
/// the graph connected before links are taken down.
fn graph() -> impl Strategy<Value = Topology> {
    (2usize..8).prop_flat_map(|n| {
        let chain = proptest::collection::vec((1u32..15, any::<bool>()), n - 1);
        let extra = proptest::collection::vec((0..n, 0..n, 1u32..15, any::<bool>()), 0..n + 2);
        (Just(n), chain, extra).prop_map(|(n, chain, extra)| {
            let nodes: Vec<String> = (0..n).map(|i| format!("N{i}")).collect();
            let mut links = Vec::new();
            let mut link = |a: usize, b: usize, lat: u32, up: bool| {
                links.push(Link {
                    id: format!("L{}", links.len()),
                    a: nodes[a].clone(),
                    b: nodes[b].clone(),
                    latency_ms: f64::from(lat),
                    bandwidth_mbps: 100.0,
                    up,
                })
            };
            for (i, (lat, up)) in chain.into_iter().enumerate() {
                link(i, i + 1, lat, up || i % 2 == 0);
            }
            for (a, b, lat, up) in extra {
                if a != b {
                    link(a, b, lat, up);
                }
            }
            load_topology(&TopologyDoc { nodes: nodes.clone(), links }).unwrap()
        })
    })
}

fn ends(topo: &Topology) -> (String, String) {
    let n = topo.nodes.len();
    ("N0".into(), format!("N{}", n - 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shortest_route_is_the_exhaustive_optimum(topo in graph()) {
        let (src, dst) = ends(&topo);
        let got = shortest_route(&topo, &src, &dst, &PathConstraints::default());
        let want = common::best_route(&topo, &src, &dst);
        match (got, want) {
            (None, None) => {}
            (Some(r), Some((lat, nodes, links))) => {
                prop_assert_eq!(r.latency_ms, lat);
                prop_assert_eq!(r.nodes, nodes);
                prop_assert_eq!(r.links, links);
            }
            (g, w) => prop_assert!(false, "route {:?} vs oracle {:?}", g, w),
        }
    }

    #[test]
    fn disjoint_pair_matches_pairwise_search(topo in graph()) {
        let (src, dst) = ends(&topo);
        let routes = common::all_routes(&topo, &src, &dst);
        let disjoint = |a: &[String], b: &[String]| {
            let la: BTreeSet<&String> = a.iter().collect();
            b.iter().all(|l| !la.contains(l))
        };
        let key = |r: &(f64, Vec<String>, Vec<String>)| (r.0, r.1.clone(), r.2.clone());
        let best = |rs: Vec<&(f64, Vec<String>, Vec<String>)>| {
            rs.into_iter().map(key).min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)))
        };
        let primary = best(routes.iter().filter(|p| routes.iter().any(|b| disjoint(&p.2, &b.2))).collect());
        let got = disjoint_pair(&topo, &src, &dst, &PathConstraints::default());
        prop_assert_eq!(got.is_some(), common::has_disjoint_pair(&topo, &src, &dst));
        if let (Some((p, b)), Some(want)) = (got, primary) {
            prop_assert_eq!((p.latency_ms, p.nodes.clone(), p.links.clone()), want.clone());
            let backup = best(routes.iter().filter(|r| disjoint(&want.2, &r.2)).collect()).unwrap();
            prop_assert_eq!((b.latency_ms, b.nodes, b.links), backup);
        }
    }

    #[test]
    fn rank_score_is_monotone_in_each_input(
        stars in 0.0f64..5.0, ratio in 0.0f64..1.0, purchases in 0u64..2000,
        d_stars in 0.0f64..1.0, d_ratio in 0.0f64..1.0, d_purchases in 0u64..50,
    ) {
        let w = RankWeights::default();
        let base = RankInputs { mean_stars: stars, attainment_ratio: ratio, purchase_count: purchases };
        let s = rank_score(&w, base);
        let more_stars = RankInputs { mean_stars: (stars + d_stars).min(5.0), ..base };
        let more_ratio = RankInputs { attainment_ratio: (ratio + d_ratio).min(1.0), ..base };
        let more_bought = RankInputs { purchase_count: purchases + d_purchases, ..base };
        prop_assert!(rank_score(&w, more_stars) >= s);
        prop_assert!(rank_score(&w, more_ratio) >= s);
        prop_assert!(rank_score(&w, more_bought) >= s);
    }
}

#[derive(Debug, Clone)]
enum RegOp {
    Rate(u8),
    Sample(bool),
    Purchase,
    Resubmit,
    Accept,
    Deprecate,
}

fn reg_op() -> impl Strategy<Value = RegOp> {
    prop_oneof![
        (0u8..7).prop_map(RegOp::Rate),
        any::<bool>().prop_map(RegOp::Sample),
        Just(RegOp::Purchase),
        Just(RegOp::Resubmit),
        Just(RegOp::Accept),
        Just(RegOp::Deprecate),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Whatever sequence of operations ran, reopening the log rebuilds the
    /// same state, and only successful operations were logged.
    #[test]
    fn reopened_registry_equals_the_live_one(ops in proptest::collection::vec(reg_op(), 0..30)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ops.jsonl");
        let mut reg = Registry::open(RegistryConfig::default(), BehaviorManifest::builtin(), &path).unwrap();
        catalog::publish(&mut reg, catalog::forward(50.0), 0).unwrap();
        let mut logged = 2;
        for (i, op) in ops.iter().enumerate() {
            let now = i as u64 * 1000;
            let ok = match op {
                RegOp::Rate(stars) => reg.rate_module("fwd", Rating { rater: format!("r{i}"), stars: *stars, comment: String::new(), at: now }).is_ok(),
                RegOp::Sample(a) => reg.record_sample("fwd", *a).is_ok(),
                RegOp::Purchase => reg.purchase("app", "fwd", None, now).is_ok(),
                RegOp::Resubmit => reg.publish_module(catalog::forward(40.0), catalog::CONTRIBUTOR, now).is_ok(),
                RegOp::Accept => reg.review_module("fwd", Verdict::Accept).is_ok(),
                RegOp::Deprecate => reg.transition_lifecycle("fwd", Lifecycle::Deprecated, now).is_ok(),
            };
            logged += usize::from(ok);
        }
        let live = reg.state_json();
        drop(reg);
        let lines = std::fs::read_to_string(&path).unwrap().lines().filter(|l| !l.trim().is_empty()).count();
        prop_assert_eq!(lines, logged);
        let reopened = Registry::open(RegistryConfig::default(), BehaviorManifest::builtin(), &path).unwrap();
        prop_assert_eq!(reopened.state_json(), live);
    }
}
