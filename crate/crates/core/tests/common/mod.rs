//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use socketstore::netsim::Topology;

/// Every simple path from `src` to `dst` over up links, as (latency, nodes, links).
pub fn all_routes(topo: &Topology, src: &str, dst: &str) -> Vec<(f64, Vec<String>, Vec<String>)> {
    fn walk(
        topo: &Topology,
        at: &str,
        dst: &str,
        nodes: &mut Vec<String>,
        links: &mut Vec<String>,
        latency: f64,
        out: &mut Vec<(f64, Vec<String>, Vec<String>)>,
    ) {
        if at == dst {
            out.push((latency, nodes.clone(), links.clone()));
            return;
        }
        for l in topo.links.values().filter(|l| l.up) {
            let next = if l.a == at {
                &l.b
            } else if l.b == at {
                &l.a
            } else {
                continue;
            };
            if nodes.contains(next) {
                continue;
            }
            nodes.push(next.clone());
            links.push(l.id.clone());
            walk(topo, next, dst, nodes, links, latency + l.latency_ms, out);
            nodes.pop();
            links.pop();
        }
    }
    let mut out = Vec::new();
    if topo.nodes.contains(src) && topo.nodes.contains(dst) {
        walk(topo, src, dst, &mut vec![src.to_string()], &mut Vec::new(), 0.0, &mut out);
    }
    out
}

/// Minimum-latency simple path, ties broken by node sequence then link sequence.
pub fn best_route(topo: &Topology, src: &str, dst: &str) -> Option<(f64, Vec<String>, Vec<String>)> {
    all_routes(topo, src, dst).into_iter().min_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2))
    })
}

/// Whether two link-disjoint paths exist, by checking every pair of routes.
pub fn has_disjoint_pair(topo: &Topology, src: &str, dst: &str) -> bool {
    let routes = all_routes(topo, src, dst);
    routes.iter().enumerate().any(|(i, a)| {
        let la: BTreeSet<&String> = a.2.iter().collect();
        routes[i + 1..].iter().any(|b| b.2.iter().all(|l| !la.contains(l)))
    })
}
