//! Year-accumulative co-occurrence knowledge graph.
//!
//! Two entities are linked when they are mentioned in the same document.
//! Each edge remembers the earliest year it was observed, so a graph built
//! at a late cutoff can be cut back to any earlier year.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{extract_entities, Document, Lexicon};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// The only relation type in the graph.
pub const CO_OCCURRENCE: &str = "co_occurrence";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("year {year} is after the graph cutoff {cutoff}")]
    Range { year: i32, cutoff: i32 },
    #[error("unknown entity index {0}")]
    UnknownEntity(usize),
    #[error("unknown entity `{0}`")]
    UnknownEntityId(String),
    #[error("graph format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// A patent's application year and the indices of its entities (sorted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatentRecord {
    pub year: i32,
    pub entity_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeGraph {
    cutoff_year: i32,
    entities: Vec<String>,
    edges: BTreeMap<(usize, usize), i32>,
    patents: BTreeMap<String, PatentRecord>,
    adjacency: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    pub fn empty(cutoff_year: i32) -> Self {
        KnowledgeGraph {
            cutoff_year,
            entities: Vec::new(),
            edges: BTreeMap::new(),
            patents: BTreeMap::new(),
            adjacency: Vec::new(),
        }
    }

    /// Builds a graph from patents given as `(id, year, entity ids)`. Patents
    /// after `cutoff_year` are ignored. Entity indices follow the sorted order
    /// of entity ids, so the result does not depend on input order.
    pub fn from_patents<'a, I>(cutoff_year: i32, patents: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, i32, &'a BTreeSet<String>)>,
    {
        let kept: Vec<_> = patents.into_iter().filter(|(_, y, _)| *y <= cutoff_year).collect();
        let entities: Vec<String> = kept
            .iter()
            .flat_map(|(_, _, es)| es.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = entities.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();

        let mut edges: BTreeMap<(usize, usize), i32> = BTreeMap::new();
        let mut records = BTreeMap::new();
        for (id, year, es) in kept {
            let ix: Vec<usize> = es.iter().map(|e| index[e.as_str()]).collect();
            for (a, &i) in ix.iter().enumerate() {
                for &j in &ix[a + 1..] {
                    edges
                        .entry((i, j))
                        .and_modify(|y| *y = (*y).min(year))
                        .or_insert(year);
                }
            }
            if !ix.is_empty() {
                records.insert(
                    id.to_string(),
                    PatentRecord {
                        year,
                        entity_indices: ix,
                    },
                );
            }
        }
        let adjacency = adjacency_of(entities.len(), edges.keys().copied());
        KnowledgeGraph {
            cutoff_year,
            entities,
            edges,
            patents: records,
            adjacency,
        }
    }

    /// Validates and assembles a graph from its stored parts.
    pub fn from_parts(
        cutoff_year: i32,
        entities: Vec<String>,
        edges: BTreeMap<(usize, usize), i32>,
        patents: BTreeMap<String, PatentRecord>,
    ) -> Result<Self> {
        if entities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GraphError::Format("entities must be sorted and unique".into()));
        }
        let n = entities.len();
        for (&(i, j), &year) in &edges {
            if i >= j {
                return Err(GraphError::Format(format!("edge ({i}, {j}) is not canonical")));
            }
            if j >= n {
                return Err(GraphError::UnknownEntity(j));
            }
            if year > cutoff_year {
                return Err(GraphError::Format(format!("edge ({i}, {j}) first seen after cutoff")));
            }
        }
        for (pid, rec) in &patents {
            if rec.entity_indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(GraphError::Format(format!("patent `{pid}` entities must be sorted and unique")));
            }
            if let Some(&bad) = rec.entity_indices.iter().find(|&&e| e >= n) {
                return Err(GraphError::UnknownEntity(bad));
            }
            for (a, &i) in rec.entity_indices.iter().enumerate() {
                for &j in &rec.entity_indices[a + 1..] {
                    match edges.get(&(i, j)) {
                        Some(&y) if y <= rec.year => {}
                        _ => {
                            return Err(GraphError::Format(format!(
                                "patent `{pid}` is missing co-occurrence edge ({i}, {j})"
                            )))
                        }
                    }
                }
            }
        }
        let adjacency = adjacency_of(n, edges.keys().copied());
        Ok(KnowledgeGraph {
            cutoff_year,
            entities,
            edges,
            patents,
            adjacency,
        })
    }

    pub fn cutoff_year(&self) -> i32 {
        self.cutoff_year
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity_id(&self, i: usize) -> Result<&str> {
        self.entities
            .get(i)
            .map(String::as_str)
            .ok_or(GraphError::UnknownEntity(i))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entities.binary_search_by(|e| e.as_str().cmp(id)).ok()
    }

    /// Canonical `(i, j)` pairs with `i < j` and their first-seen year.
    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), i32)> + '_ {
        self.edges.iter().map(|(&k, &y)| (k, y))
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&(a.min(b), a.max(b)))
    }

    pub fn first_seen(&self, a: usize, b: usize) -> Option<i32> {
        self.edges.get(&(a.min(b), a.max(b))).copied()
    }

    /// Sorted neighbor indices.
    pub fn neighbors(&self, e: usize) -> Result<&[usize]> {
        self.adjacency
            .get(e)
            .map(Vec::as_slice)
            .ok_or(GraphError::UnknownEntity(e))
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn degree(&self, e: usize) -> usize {
        self.adjacency.get(e).map_or(0, Vec::len)
    }

    pub fn patents(&self) -> &BTreeMap<String, PatentRecord> {
        &self.patents
    }

    /// Patents as entity-id sets, for comparison across graphs.
    pub fn patent_entity_sets(&self) -> impl Iterator<Item = (&str, i32, BTreeSet<String>)> + '_ {
        self.patents.iter().map(|(id, rec)| {
            let set = rec.entity_indices.iter().map(|&i| self.entities[i].clone()).collect();
            (id.as_str(), rec.year, set)
        })
    }

    /// The graph as it stood at the end of `year`.
    pub fn snapshot(&self, year: i32) -> Result<KnowledgeGraph> {
        if year > self.cutoff_year {
            return Err(GraphError::Range {
                year,
                cutoff: self.cutoff_year,
            });
        }
        let sets: Vec<_> = self.patent_entity_sets().collect();
        Ok(KnowledgeGraph::from_patents(
            year,
            sets.iter().map(|(id, y, s)| (*id, *y, s)),
        ))
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            version: GRAPH_FORMAT_VERSION,
            cutoff_year: self.cutoff_year,
            entities: self.entities.clone(),
            edges: self.edges.iter().map(|(&(i, j), &y)| (i, j, y)).collect(),
            patents: self.patents.clone(),
        };
        serde_json::to_string(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| GraphError::Format(e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64());
        if found != Some(GRAPH_FORMAT_VERSION as u64) {
            return Err(GraphError::Format(format!(
                "expected graph version {GRAPH_FORMAT_VERSION}, found {}",
                found.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        let file: GraphFile = serde_json::from_value(value).map_err(|e| GraphError::Format(e.to_string()))?;
        let mut edges = BTreeMap::new();
        for (i, j, y) in file.edges {
            if edges.insert((i, j), y).is_some() {
                return Err(GraphError::Format(format!("duplicate edge ({i}, {j})")));
            }
        }
        KnowledgeGraph::from_parts(file.cutoff_year, file.entities, edges, file.patents)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        KnowledgeGraph::from_json(&std::fs::read_to_string(path)?)
    }

    /// `head<TAB>co_occurrence<TAB>tail<TAB>year`, one canonical edge per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (&(i, j), &y) in &self.edges {
            writeln!(out, "{}\t{CO_OCCURRENCE}\t{}\t{y}", self.entities[i], self.entities[j]).unwrap();
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    version: u32,
    cutoff_year: i32,
    entities: Vec<String>,
    edges: Vec<(usize, usize, i32)>,
    patents: BTreeMap<String, PatentRecord>,
}

fn adjacency_of(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Per-document entity sets for documents up to `cutoff_year`, in document
/// order. Extraction runs in parallel; the output order is deterministic.
pub fn extract_patent_sets<'a>(
    docs: &'a [Document],
    lex: &Lexicon,
    cutoff_year: i32,
) -> Vec<(&'a str, i32, BTreeSet<String>)> {
    docs.par_iter()
        .filter(|d| d.year <= cutoff_year)
        .map(|d| (d.id.as_str(), d.year, extract_entities(d, lex)))
        .collect()
}

/// Builds `KG(cutoff_year)` from every document with `year <= cutoff_year`.
pub fn build_graph(docs: &[Document], lex: &Lexicon, cutoff_year: i32) -> KnowledgeGraph {
    let sets = extract_patent_sets(docs, lex, cutoff_year);
    if sets.is_empty() {
        log::warn!("no documents on or before {cutoff_year}; graph is empty");
    }
    KnowledgeGraph::from_patents(cutoff_year, sets.iter().map(|(id, y, s)| (*id, *y, s)))
}
