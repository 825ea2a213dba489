//! Predicted patents: maximal cliques of the link-augmented graph that use at
//! least one predicted edge, and their validation against later patents.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, KnowledgeGraph};
use crate::link::{Method, PredictedLinkSet};

pub const CANDIDATES_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CLIQUE_CAP: usize = 100_000;

#[derive(Debug, Error)]
pub enum PatentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("predicted link ({0}, {1}) is already an edge")]
    ExistingEdge(String, String),
    #[error("predicted link ({0}, {1}) is not a valid pair")]
    BadLink(usize, usize),
    #[error("clique enumeration stopped: more than {cap} candidates")]
    CapExceeded { cap: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PatentError>;

/// A cutoff graph with predicted edges added and tagged.
#[derive(Clone, Debug)]
pub struct AugmentedGraph {
    base: KnowledgeGraph,
    method: Method,
    predicted: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl AugmentedGraph {
    pub fn base(&self) -> &KnowledgeGraph {
        &self.base
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn predicted(&self) -> &BTreeSet<(usize, usize)> {
        &self.predicted
    }

    pub fn is_predicted(&self, a: usize, b: usize) -> bool {
        self.predicted.contains(&(a.min(b), a.max(b)))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.base.has_edge(a, b) || self.is_predicted(a, b)
    }

    pub fn edge_count(&self) -> usize {
        self.base.edge_count() + self.predicted.len()
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }
}

pub fn augment_graph(kg: &KnowledgeGraph, links: &PredictedLinkSet) -> Result<AugmentedGraph> {
    let n = kg.entity_count();
    let mut predicted = BTreeSet::new();
    for (i, j) in links.pairs() {
        if i == j || i.max(j) >= n {
            return Err(PatentError::BadLink(i, j));
        }
        if kg.has_edge(i, j) {
            return Err(PatentError::ExistingEdge(
                kg.entity_id(i)?.to_string(),
                kg.entity_id(j)?.to_string(),
            ));
        }
        predicted.insert((i.min(j), i.max(j)));
    }
    let mut adjacency = kg.adjacency().to_vec();
    for &(i, j) in &predicted {
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    for nb in &mut adjacency {
        nb.sort_unstable();
    }
    Ok(AugmentedGraph {
        base: kg.clone(),
        method: links.method,
        predicted,
        adjacency,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PredictedPatent {
    /// Sorted entity ids.
    pub entities: Vec<String>,
    /// Predicted edges inside the clique, as sorted id pairs.
    pub predicted_edges: Vec<(String, String)>,
    pub cutoff_year: i32,
    pub method: Method,
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut p, mut q, mut out) = (0, 0, Vec::new());
    while p < a.len() && q < b.len() {
        match a[p].cmp(&b[q]) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[p]);
                p += 1;
                q += 1;
            }
        }
    }
    out
}

/// Bron–Kerbosch with pivoting. `p` and `x` stay sorted.
fn bron_kerbosch(
    adj: &[Vec<usize>],
    r: &mut Vec<usize>,
    p: Vec<usize>,
    x: Vec<usize>,
    out: &mut Vec<Vec<usize>>,
    cap: usize,
) -> Result<()> {
    if p.is_empty() {
        if x.is_empty() {
            if out.len() >= cap {
                return Err(PatentError::CapExceeded { cap });
            }
            let mut clique = r.clone();
            clique.sort_unstable();
            out.push(clique);
        }
        return Ok(());
    }
    let pivot = p
        .iter()
        .chain(&x)
        .copied()
        .max_by_key(|&u| (intersect(&p, &adj[u]).len(), std::cmp::Reverse(u)))
        .expect("p is non-empty");
    let mut p = p;
    let mut x = x;
    let branch: Vec<usize> = p.iter().copied().filter(|v| adj[pivot].binary_search(v).is_err()).collect();
    for v in branch {
        r.push(v);
        bron_kerbosch(adj, r, intersect(&p, &adj[v]), intersect(&x, &adj[v]), out, cap)?;
        r.pop();
        p.retain(|&u| u != v);
        let at = x.binary_search(&v).unwrap_or_else(|e| e);
        x.insert(at, v);
    }
    Ok(())
}

/// Index sets of every maximal clique that contains at least one predicted
/// edge, sorted.
pub fn candidate_cliques(aug: &AugmentedGraph, cap: usize) -> Result<Vec<Vec<usize>>> {
    let adj = &aug.adjacency;
    let per_edge = aug
        .predicted
        .par_iter()
        .map(|&(u, v)| {
            let mut out = Vec::new();
            bron_kerbosch(adj, &mut vec![u, v], intersect(&adj[u], &adj[v]), Vec::new(), &mut out, cap)?;
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = BTreeSet::new();
    for clique in per_edge.into_iter().flatten() {
        all.insert(clique);
        if all.len() > cap {
            return Err(PatentError::CapExceeded { cap });
        }
    }
    Ok(all.into_iter().collect())
}

pub fn enumerate_candidate_patents(aug: &AugmentedGraph, cap: usize) -> Result<Vec<PredictedPatent>> {
    let kg = &aug.base;
    candidate_cliques(aug, cap)?
        .into_iter()
        .map(|clique| {
            let mut predicted_edges = Vec::new();
            for (p, &a) in clique.iter().enumerate() {
                for &b in &clique[p + 1..] {
                    if aug.is_predicted(a, b) {
                        predicted_edges.push((kg.entity_id(a)?.to_string(), kg.entity_id(b)?.to_string()));
                    }
                }
            }
            let entities = clique
                .iter()
                .map(|&i| kg.entity_id(i).map(str::to_string))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(PredictedPatent {
                entities,
                predicted_edges,
                cutoff_year: kg.cutoff_year(),
                method: aug.method,
            })
        })
        .collect()
}

/// Entity sets of patents with `cutoff < year ≤ cutoff + horizon` (no upper
/// bound when `horizon` is `None`).
pub fn future_patents(
    kg: &KnowledgeGraph,
    cutoff: i32,
    horizon: Option<i32>,
) -> BTreeMap<String, BTreeSet<String>> {
    kg.patent_entity_sets()
        .filter(|(_, year, _)| *year > cutoff && horizon.is_none_or(|h| *year <= cutoff + h))
        .map(|(id, _, set)| (id.to_string(), set))
        .collect()
}

/// True when some future patent mentions every entity of `p`.
pub fn validate_patent(p: &PredictedPatent, future: &BTreeMap<String, BTreeSet<String>>) -> bool {
    future.values().any(|set| p.entities.iter().all(|e| set.contains(e)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateEntry {
    entities: Vec<String>,
    predicted_edges: Vec<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    valid: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidatesFile {
    version: u32,
    cutoff_year: i32,
    method: Method,
    candidates: Vec<CandidateEntry>,
}

/// Serializes candidates, with validity flags when `valid` is given.
pub fn candidates_to_json(
    cutoff_year: i32,
    method: Method,
    candidates: &[PredictedPatent],
    valid: Option<&[bool]>,
) -> Result<String> {
    if let Some(v) = valid {
        if v.len() != candidates.len() {
            return Err(PatentError::Format(format!(
                "{} validity flags for {} candidates",
                v.len(),
                candidates.len()
            )));
        }
    }
    let file = CandidatesFile {
        version: CANDIDATES_FORMAT_VERSION,
        cutoff_year,
        method,
        candidates: candidates
            .iter()
            .enumerate()
            .map(|(k, c)| CandidateEntry {
                entities: c.entities.clone(),
                predicted_edges: c.predicted_edges.clone(),
                valid: valid.map(|v| v[k]),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| PatentError::Format(e.to_string()))
}

pub fn candidates_from_json(text: &str) -> Result<(Vec<PredictedPatent>, Option<Vec<bool>>)> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| PatentError::Format(e.to_string()))?;
    let found = value.get("version").and_then(|v| v.as_u64());
    if found != Some(CANDIDATES_FORMAT_VERSION as u64) {
        return Err(PatentError::Format(format!(
            "expected candidates version {CANDIDATES_FORMAT_VERSION}, found {}",
            found.map_or("none".to_string(), |v| v.to_string())
        )));
    }
    let file: CandidatesFile = serde_json::from_value(value).map_err(|e| PatentError::Format(e.to_string()))?;
    let flags: Option<Vec<bool>> = file.candidates.iter().map(|c| c.valid).collect();
    let candidates = file
        .candidates
        .into_iter()
        .map(|c| PredictedPatent {
            entities: c.entities,
            predicted_edges: c.predicted_edges,
            cutoff_year: file.cutoff_year,
            method: file.method,
        })
        .collect();
    Ok((candidates, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::ScoredLink;

    fn graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
        let names: Vec<String> = (0..n).map(|i| format!("e{i:02}")).collect();
        let mut sets: Vec<(String, BTreeSet<String>)> = edges
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| (format!("p{k}"), [names[a].clone(), names[b].clone()].into()))
            .collect();
        for (i, name) in names.iter().enumerate() {
            sets.push((format!("solo{i}"), [name.clone()].into()));
        }
        KnowledgeGraph::from_patents(2010, sets.iter().map(|(id, s)| (id.as_str(), 2010, s)))
    }

    fn links(kg: &KnowledgeGraph, pairs: &[(usize, usize)]) -> PredictedLinkSet {
        PredictedLinkSet {
            cutoff_year: kg.cutoff_year(),
            method: Method::Cnm,
            rho_or_zeta: 1.0,
            k: pairs.len(),
            links: pairs.iter().map(|&(i, j)| ScoredLink { i, j, score: 1.0 }).collect(),
        }
    }

    #[test]
    fn augment_examples() {
        let path = graph(3, &[(0, 1), (1, 2)]);
        let same = augment_graph(&path, &links(&path, &[])).unwrap();
        assert_eq!(same.edge_count(), 2);
        assert_eq!(same.adjacency(), path.adjacency());
        let tri = augment_graph(&path, &links(&path, &[(0, 2)])).unwrap();
        assert_eq!(tri.edge_count(), 3);
        assert!(tri.is_predicted(2, 0));
        assert!(!tri.is_predicted(0, 1));
        assert!(tri.has_edge(0, 2) && !tri.base().has_edge(0, 2));
        assert!(matches!(
            augment_graph(&path, &links(&path, &[(0, 1)])),
            Err(PatentError::ExistingEdge(..))
        ));
    }

    #[test]
    fn enumerate_examples() {
        let path = graph(3, &[(0, 1), (1, 2)]);
        let none = augment_graph(&path, &links(&path, &[])).unwrap();
        assert!(enumerate_candidate_patents(&none, DEFAULT_CLIQUE_CAP).unwrap().is_empty());
        let tri = augment_graph(&path, &links(&path, &[(0, 2)])).unwrap();
        let got = enumerate_candidate_patents(&tri, DEFAULT_CLIQUE_CAP).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].entities, ["e00", "e01", "e02"]);
        assert_eq!(got[0].predicted_edges, [("e00".to_string(), "e02".to_string())]);
    }

    #[test]
    fn cap_is_enforced() {
        // Two disjoint predicted edges give two candidates.
        let g = graph(4, &[]);
        let aug = augment_graph(&g, &links(&g, &[(0, 1), (2, 3)])).unwrap();
        assert_eq!(candidate_cliques(&aug, 2).unwrap().len(), 2);
        assert!(matches!(candidate_cliques(&aug, 1), Err(PatentError::CapExceeded { cap: 1 })));
    }

    fn patent(ids: &[&str]) -> PredictedPatent {
        PredictedPatent {
            entities: ids.iter().map(|s| s.to_string()).collect(),
            predicted_edges: vec![],
            cutoff_year: 2010,
            method: Method::Cnm,
        }
    }

    fn futures(sets: &[&[&str]]) -> BTreeMap<String, BTreeSet<String>> {
        sets.iter()
            .enumerate()
            .map(|(k, s)| (format!("f{k}"), s.iter().map(|x| x.to_string()).collect()))
            .collect()
    }

    #[test]
    fn validate_examples() {
        let p = patent(&["A", "B"]);
        assert!(validate_patent(&p, &futures(&[&["A", "B", "C"]])));
        assert!(!validate_patent(&p, &futures(&[&["A", "C"], &["B", "C"]])));
        assert!(!validate_patent(&p, &futures(&[])));
    }

    #[test]
    fn future_patent_window() {
        let sets: Vec<(String, i32, BTreeSet<String>)> = (0..4)
            .map(|k| (format!("p{k}"), 2010 + k, ["x".to_string(), format!("y{k}")].into()))
            .collect();
        let kg = KnowledgeGraph::from_patents(2013, sets.iter().map(|(id, y, s)| (id.as_str(), *y, s)));
        assert_eq!(future_patents(&kg, 2011, None).into_keys().collect::<Vec<_>>(), ["p2", "p3"]);
        assert_eq!(future_patents(&kg, 2011, Some(1)).into_keys().collect::<Vec<_>>(), ["p2"]);
    }

    #[test]
    fn candidates_round_trip() {
        let c = vec![patent(&["A", "B"]), patent(&["B", "C", "D"])];
        let text = candidates_to_json(2010, Method::Cnm, &c, Some(&[true, false])).unwrap();
        let (back, flags) = candidates_from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(flags, Some(vec![true, false]));
        let text = candidates_to_json(2010, Method::Cnm, &c, None).unwrap();
        assert!(!text.contains("valid"));
        assert_eq!(candidates_from_json(&text).unwrap().1, None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Maximal cliques by checking every vertex subset.
        fn brute_force(n: usize, has: impl Fn(usize, usize) -> bool, tagged: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
            let is_clique = |m: u32| (0..n).all(|a| (0..n).all(|b| a == b || m & (1 << a) == 0 || m & (1 << b) == 0 || has(a, b)));
            let mut out = Vec::new();
            for m in 1u32..(1 << n) {
                if m.count_ones() < 2 || !is_clique(m) {
                    continue;
                }
                if (0..n).any(|v| m & (1 << v) == 0 && is_clique(m | (1 << v))) {
                    continue;
                }
                let members: Vec<usize> = (0..n).filter(|v| m & (1 << v) != 0).collect();
                let tag = members.iter().any(|&a| members.iter().any(|&b| a < b && tagged(a, b)));
                if tag {
                    out.push(members);
                }
            }
            out.sort();
            out
        }

        proptest! {
            #[test]
            fn matches_subset_oracle(n in 2usize..=12, bits in prop::collection::vec(0u8..4, 66)) {
                let mut edges = Vec::new();
                let mut tagged = Vec::new();
                let mut k = 0;
                for a in 0..n {
                    for b in (a + 1)..n {
                        match bits[k] {
                            0 | 1 => edges.push((a, b)),
                            2 => tagged.push((a, b)),
                            _ => {}
                        }
                        k += 1;
                    }
                }
                let g = graph(n, &edges);
                let aug = augment_graph(&g, &links(&g, &tagged)).unwrap();
                let got = candidate_cliques(&aug, DEFAULT_CLIQUE_CAP).unwrap();
                let want = brute_force(n, |a, b| aug.has_edge(a, b), |a, b| aug.is_predicted(a, b));
                prop_assert_eq!(got, want);
            }
        }
    }
}
