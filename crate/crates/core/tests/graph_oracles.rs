mod common;

use std::collections::BTreeMap;

use common::fixture;
use nwp_core::representer::compute_alphas;
use nwp_core::type2graph::build_graph;

#[test]
fn graph_and_degrees_match_a_brute_force_recount() {
    let f = fixture();
    let tau = 0.05;
    let index = compute_alphas(&f.stationary, &f.corpus, &f.split.train, tau, 0.5).unwrap();
    let graph = build_graph(&index);
    let mut edges: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for &id in &f.split.train {
        let probs = f.stationary.forward_with_hiddens(f.corpus.prefix(id)).unwrap().probs;
        let y = f.corpus.target(id);
        for (v, &p) in probs.iter().enumerate() {
            if v as u32 != y && p >= tau {
                *edges.entry((y, v as u32)).or_insert(0) += 1;
            }
        }
    }
    assert!(!edges.is_empty());
    assert_eq!(graph.edges, edges);
    for weighted in [false, true] {
        for d in graph.degrees(weighted) {
            let count = |pick: &dyn Fn(&(u32, u32)) -> bool| {
                edges.iter().filter(|(k, _)| pick(k)).map(|(_, &m)| if weighted { m } else { 1 }).sum::<usize>()
            };
            assert_eq!(d.out_degree, count(&|k| k.0 == d.token));
            assert_eq!(d.in_degree, count(&|k| k.1 == d.token));
        }
    }
}
