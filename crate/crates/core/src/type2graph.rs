//! Directed token graph induced by Type-2 support: an edge `v → u` for
//! every sample with target `v` that is Type-2 support of `u`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::representer::{SupportIndex, SupportType};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Type2Graph {
    /// `(v, u) → multiplicity`.
    pub edges: BTreeMap<(TokenId, TokenId), usize>,
}

pub fn build_graph(index: &SupportIndex) -> Type2Graph {
    let mut edges = BTreeMap::new();
    for a in &index.annotations {
        for e in a.entries.iter().filter(|e| e.kind == SupportType::Type2) {
            *edges.entry((a.target, e.token)).or_insert(0) += 1;
        }
    }
    Type2Graph { edges }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degree {
    pub token: TokenId,
    pub in_degree: usize,
    pub out_degree: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeStats {
    pub top_in: Vec<(TokenId, usize)>,
    pub top_out: Vec<(TokenId, usize)>,
}

impl Type2Graph {
    pub fn nodes(&self) -> BTreeSet<TokenId> {
        self.edges.keys().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// In/out degree per node. `weighted` sums multiplicities instead of
    /// counting distinct neighbours.
    pub fn degrees(&self, weighted: bool) -> Vec<Degree> {
        let mut map: BTreeMap<TokenId, (usize, usize)> = BTreeMap::new();
        for (&(v, u), &m) in &self.edges {
            let w = if weighted { m } else { 1 };
            map.entry(v).or_default().1 += w;
            map.entry(u).or_default().0 += w;
        }
        map.into_iter().map(|(token, (i, o))| Degree { token, in_degree: i, out_degree: o }).collect()
    }

    pub fn degree_stats(&self, k: usize, weighted: bool) -> Result<DegreeStats> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let degs = self.degrees(weighted);
        let top = |f: fn(&Degree) -> usize| {
            let mut v: Vec<(TokenId, usize)> = degs.iter().map(|d| (d.token, f(d))).filter(|x| x.1 > 0).collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            v.truncate(k);
            v
        };
        Ok(DegreeStats { top_in: top(|d| d.in_degree), top_out: top(|d| d.out_degree) })
    }

    /// `source target multiplicity` lines.
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        for (&(v, u), &m) in &self.edges {
            s.push_str(&format!("{v} {u} {m}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representer::annotate_row;

    fn index(rows: &[(TokenId, Vec<f64>)]) -> SupportIndex {
        let annotations = rows.iter().enumerate().map(|(i, (y, p))| annotate_row(i, *y, p, 0.9)).collect();
        SupportIndex { checkpoint: String::new(), tau: 0.9, gamma: 0.5, annotations }
    }

    #[test]
    fn no_type2_means_empty_graph() {
        let g = build_graph(&index(&[(0, vec![0.5, 0.5])]));
        assert_eq!(g.edge_count(), 0);
        assert!(g.degree_stats(5, false).unwrap().top_in.is_empty());
    }

    #[test]
    fn single_edge() {
        let g = build_graph(&index(&[(0, vec![0.05, 0.95])]));
        assert_eq!(g.edges.get(&(0, 1)), Some(&1));
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn star_hub_tops_out_degree() {
        let mut rows = Vec::new();
        for u in 1..=5 {
            let mut p = vec![0.0; 6];
            p[u] = 0.97;
            p[0] = 0.03;
            rows.push((0, p.clone()));
            rows.push((0, p));
        }
        let g = build_graph(&index(&rows));
        let s = g.degree_stats(1, false).unwrap();
        assert_eq!(s.top_out, vec![(0, 5)]);
        assert_eq!(g.degree_stats(1, true).unwrap().top_out, vec![(0, 10)]);
        let degs = g.degrees(false);
        let ins: usize = degs.iter().map(|d| d.in_degree).sum();
        let outs: usize = degs.iter().map(|d| d.out_degree).sum();
        assert_eq!((ins, outs), (5, 5));
    }
}
