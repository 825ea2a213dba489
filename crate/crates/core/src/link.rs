//! Missing-link prediction on a cutoff-year graph.
//!
//! Three families are provided:
//!
//! * the common-neighbor method, scoring a non-adjacent pair by the number of
//!   neighbors it shares and keeping pairs at or above a threshold;
//! * translation embeddings (`h + r ≈ t`) trained with a margin hinge loss,
//!   either directly on an entity table or on top of the attention encoders.
//!
//! Edges are undirected; training and scoring use the canonical direction
//! `i < j` with a single `co_occurrence` relation vector.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{AttentionGraph, EncodeError, Encoder, EncoderConfig, EncoderMode, TokenBatch, Vocabulary};
use crate::graph::{GraphError, KnowledgeGraph};
use crate::num::{sq_l2, Array, NumError, ParamId, ParamStore, Tape, Var};

pub const LINKS_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged { epoch: usize, batch: usize, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LinkError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cnm,
    Transe,
    Gat,
    Cgat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cnm, Method::Transe, Method::Gat, Method::Cgat];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cnm => "cnm",
            Method::Transe => "transe",
            Method::Gat => "gat",
            Method::Cgat => "cgat",
        }
    }

    pub fn is_trained(self) -> bool {
        self != Method::Cnm
    }

    fn encoder_mode(self) -> Option<EncoderMode> {
        match self {
            Method::Gat => Some(EncoderMode::Gat),
            Method::Cgat => Some(EncoderMode::Cgat),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnm" => Ok(Method::Cnm),
            "transe" => Ok(Method::Transe),
            "gat" => Ok(Method::Gat),
            "cgat" => Ok(Method::Cgat),
            other => Err(LinkError::Input(format!("unknown method `{other}`"))),
        }
    }
}

/// A candidate edge `(i, j)` with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredLink {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

fn rank_order(a: &ScoredLink, b: &ScoredLink) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then((a.i, a.j).cmp(&(b.i, b.j)))
}

/// Predicted missing links for one cutoff graph, sorted by descending score
/// with ties broken by `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedLinkSet {
    pub cutoff_year: i32,
    pub method: Method,
    /// The common-neighbor threshold used, or the top-K fraction `ρ`.
    pub rho_or_zeta: f64,
    /// Number of links requested (top-K) or admitted by the threshold.
    pub k: usize,
    pub links: Vec<ScoredLink>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinksFile {
    version: u32,
    cutoff_year: i32,
    method: Method,
    rho_or_zeta: f64,
    k: usize,
    links: Vec<(String, String, f64)>,
}

impl PredictedLinkSet {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.links.iter().map(|l| (l.i, l.j))
    }

    /// Checks the set against `kg`: canonical, unique, non-edges, finite
    /// scores, sorted.
    pub fn validate(&self, kg: &KnowledgeGraph) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.links {
            if l.i >= l.j || l.j >= kg.entity_count() {
                return Err(LinkError::Input(format!("link ({}, {}) is not a canonical pair", l.i, l.j)));
            }
            if kg.has_edge(l.i, l.j) {
                return Err(LinkError::Input(format!("link ({}, {}) already exists", l.i, l.j)));
            }
            if !seen.insert((l.i, l.j)) {
                return Err(LinkError::Input(format!("duplicate link ({}, {})", l.i, l.j)));
            }
            if !l.score.is_finite() {
                return Err(LinkError::Input(format!("link ({}, {}) has a non-finite score", l.i, l.j)));
            }
        }
        if self.links.windows(2).any(|w| rank_order(&w[0], &w[1]) == std::cmp::Ordering::Greater) {
            return Err(LinkError::Input("links are not sorted by score".into()));
        }
        Ok(())
    }

    pub fn to_json(&self, kg: &KnowledgeGraph) -> Result<String> {
        let links = self
            .links
            .iter()
            .map(|l| Ok((kg.entity_id(l.i)?.to_string(), kg.entity_id(l.j)?.to_string(), l.score)))
            .collect::<Result<Vec<_>>>()?;
        let file = LinksFile {
            version: LINKS_FORMAT_VERSION,
            cutoff_year: self.cutoff_year,
            method: self.method,
            rho_or_zeta: self.rho_or_zeta,
            k: self.k,
            links,
        };
        serde_json::to_string(&file).map_err(|e| LinkError::Format(e.to_string()))
    }

    /// Reads a link file and resolves entity ids against `kg`.
    pub fn from_json(text: &str, kg: &KnowledgeGraph) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LinkError::Format(e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64());
        if found != Some(LINKS_FORMAT_VERSION as u64) {
            return Err(LinkError::Format(format!(
                "expected links version {LINKS_FORMAT_VERSION}, found {}",
                found.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        let file: LinksFile = serde_json::from_value(value).map_err(|e| LinkError::Format(e.to_string()))?;
        if file.cutoff_year != kg.cutoff_year() {
            return Err(LinkError::Format(format!(
                "links are for cutoff {}, graph is for {}",
                file.cutoff_year,
                kg.cutoff_year()
            )));
        }
        let lookup = |id: &str| kg.index_of(id).ok_or_else(|| GraphError::UnknownEntityId(id.to_string()));
        let mut links = Vec::with_capacity(file.links.len());
        for (a, b, score) in &file.links {
            let (x, y) = (lookup(a)?, lookup(b)?);
            links.push(ScoredLink {
                i: x.min(y),
                j: x.max(y),
                score: *score,
            });
        }
        let set = PredictedLinkSet {
            cutoff_year: file.cutoff_year,
            method: file.method,
            rho_or_zeta: file.rho_or_zeta,
            k: file.k,
            links,
        };
        set.validate(kg)?;
        Ok(set)
    }
}

// ---------------------------------------------------------------------------
// Common neighbors

/// `|Γx ∩ Γy|`.
pub fn cnm_score(kg: &KnowledgeGraph, x: usize, y: usize) -> Result<usize> {
    if x == y {
        return Err(LinkError::Input(format!("common neighbors of {x} with itself")));
    }
    let (a, b) = (kg.neighbors(x)?, kg.neighbors(y)?);
    let (mut p, mut q, mut n) = (0, 0, 0);
    while p < a.len() && q < b.len() {
        match a[p].cmp(&b[q]) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                p += 1;
                q += 1;
            }
        }
    }
    Ok(n)
}

/// Common-neighbor counts of every non-adjacent pair that has at least one.
pub fn two_hop_counts(kg: &KnowledgeGraph) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for nb in kg.adjacency() {
        for (p, &a) in nb.iter().enumerate() {
            for &b in &nb[p + 1..] {
                if !kg.has_edge(a, b) {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// Largest common-neighbor count `M` over non-adjacent pairs (0 if none).
pub fn max_common_neighbors(kg: &KnowledgeGraph) -> usize {
    two_hop_counts(kg).values().copied().max().unwrap_or(0)
}

/// Emits every non-adjacent pair whose common-neighbor count reaches the
/// threshold: `zeta` if given, otherwise `⌈M/2⌉`. Pairs with no common
/// neighbor are never emitted.
pub fn cnm_predict(kg: &KnowledgeGraph, zeta: Option<usize>) -> Result<PredictedLinkSet> {
    if zeta == Some(0) {
        return Err(LinkError::Input("zeta must be at least 1".into()));
    }
    let counts = two_hop_counts(kg);
    let max = counts.values().copied().max().unwrap_or(0);
    let threshold = zeta.unwrap_or(max.div_ceil(2)).max(1);
    let mut links: Vec<ScoredLink> = counts
        .into_iter()
        .filter(|&(_, c)| c >= threshold)
        .map(|((i, j), c)| ScoredLink { i, j, score: c as f64 })
        .collect();
    links.sort_by(rank_order);
    Ok(PredictedLinkSet {
        cutoff_year: kg.cutoff_year(),
        method: Method::Cnm,
        rho_or_zeta: threshold as f64,
        k: links.len(),
        links,
    })
}

// ---------------------------------------------------------------------------
// Translation embeddings

/// Entity representations and the relation vector used for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// `N × D`.
    pub entities: Array,
    pub relation: Vec<f64>,
}

impl Embeddings {
    /// `‖h + r − t‖²`.
    pub fn distance(&self, head: usize, tail: usize) -> Result<f64> {
        let (n, _) = self.entities.dims2()?;
        if head >= n || tail >= n {
            return Err(GraphError::UnknownEntity(head.max(tail)).into());
        }
        let h = self.entities.row(head);
        let t = self.entities.row(tail);
        let shifted: Vec<f64> = h.iter().zip(&self.relation).map(|(a, b)| a + b).collect();
        Ok(sq_l2(&shifted, t))
    }

    /// `−‖h + r − t‖²`; larger is more plausible.
    pub fn score(&self, head: usize, tail: usize) -> Result<f64> {
        Ok(-self.distance(head, tail)?)
    }
}

/// `Σ max(0, γ + d(h+r, t) − d(h'+r, t'))` over positives paired 1:1 with
/// negatives.
pub fn transe_loss(
    emb: &Embeddings,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    margin: f64,
) -> Result<f64> {
    if positives.len() != negatives.len() {
        return Err(LinkError::Input(format!(
            "{} positives but {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    let mut total = 0.0;
    for (&(h, t), &(hn, tn)) in positives.iter().zip(negatives) {
        total += (margin + emb.distance(h, t)? - emb.distance(hn, tn)?).max(0.0);
    }
    Ok(total)
}

/// Replaces the head or the tail (fair coin) of each positive with a
/// different, uniformly drawn entity. Corrupted pairs are not filtered
/// against the graph.
pub fn sample_negatives<R: Rng>(entities: usize, positives: &[(usize, usize)], rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if entities < 2 {
        return Err(LinkError::Input("negative sampling needs at least 2 entities".into()));
    }
    Ok(positives
        .iter()
        .map(|&(h, t)| {
            let corrupt_head = rng.gen_bool(0.5);
            let original = if corrupt_head { h } else { t };
            let mut e = rng.gen_range(0..entities - 1);
            if e >= original {
                e += 1;
            }
            if corrupt_head {
                (e, t)
            } else {
                (h, e)
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hinge margin `γ`.
    pub margin: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Dimensions and attention settings; plain translation embeddings use
    /// `F` as their size.
    pub model: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 0.01,
            margin: 1.0,
            batch_size: 128,
            seed: 0,
            model: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(LinkError::Input(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LinkError::Input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(LinkError::Input("batch size must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Where the model's parameters live inside its store.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub method: Method,
    pub entity: ParamId,
    pub relation: ParamId,
    pub encoder: Option<Encoder>,
}

impl ModelLayout {
    pub fn init<R: Rng>(
        method: Method,
        config: &EncoderConfig,
        entities: usize,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if !method.is_trained() {
            return Err(LinkError::Input(format!("method {method} has no trainable model")));
        }
        if entities == 0 {
            return Err(LinkError::Input("cannot train on an empty graph".into()));
        }
        let entity = store.add_uniform("entity", &[entities, config.f], rng)?;
        let encoder = match method.encoder_mode() {
            Some(mode) => Some(Encoder::init(config, mode, entities, vocab_size, store, rng)?),
            None => None,
        };
        let rel_dim = if encoder.is_some() { config.f_prime } else { config.f };
        let relation = store.add_uniform("relation", &[1, rel_dim], rng)?;
        Ok(ModelLayout {
            method,
            entity,
            relation,
            encoder,
        })
    }

    pub fn attach(method: Method, config: &EncoderConfig, store: &ParamStore) -> Result<Self> {
        let encoder = match method.encoder_mode() {
            Some(mode) => Some(Encoder::attach(config, mode, store)?),
            None => None,
        };
        Ok(ModelLayout {
            method,
            entity: store.id("entity")?,
            relation: store.id("relation")?,
            encoder,
        })
    }

    /// Records entity representations (`N × D`) and the relation row.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &AttentionGraph,
        tokens: Option<&TokenBatch>,
    ) -> Result<(Var, Var)> {
        let base = tape.param(store, self.entity)?;
        let relation = tape.param(store, self.relation)?;
        let z = match &self.encoder {
            Some(enc) => enc.forward(tape, store, base, graph, tokens)?.output,
            None => base,
        };
        Ok((z, relation))
    }

    /// Records the margin loss for paired positives and negatives.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &AttentionGraph,
        tokens: Option<&TokenBatch>,
        positives: &[(usize, usize)],
        negatives: &[(usize, usize)],
        margin: f64,
    ) -> Result<Var> {
        if positives.len() != negatives.len() || positives.is_empty() {
            return Err(LinkError::Input(format!(
                "{} positives and {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        let (z, r) = self.encode(tape, store, graph, tokens)?;
        let pos = triple_distances(tape, z, r, positives)?;
        let neg = triple_distances(tape, z, r, negatives)?;
        let gap = tape.sub(pos, neg)?;
        let shifted = tape.add_scalar(gap, margin)?;
        let hinge = tape.relu(shifted)?;
        Ok(tape.sum(hinge)?)
    }
}

fn triple_distances(tape: &mut Tape, z: Var, r: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let heads: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let h = tape.gather_rows(z, &heads)?;
    let t = tape.gather_rows(z, &tails)?;
    let shifted = tape.add_row(h, r)?;
    Ok(tape.row_sq_dist(shifted, t)?)
}

/// Losses recorded during training. `initial_loss` and `final_loss` use one
/// fixed set of negatives so they are comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// A trained translation model, with everything needed to re-encode the
/// graph it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkModel {
    pub method: Method,
    pub config: TrainConfig,
    pub entities: Vec<String>,
    pub vocab: Option<Vocabulary>,
    /// Context sentence tokens per entity (context mode only).
    pub context: BTreeMap<String, Vec<String>>,
    pub store: ParamStore,
    pub trace: TrainTrace,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    method: Method,
    config: TrainConfig,
    entities: Vec<String>,
    vocab: Option<Vocabulary>,
    context: BTreeMap<String, Vec<String>>,
    trace: TrainTrace,
    params: serde_json::Value,
}

/// Graph-derived inputs shared by training and scoring.
struct Inputs {
    graph: AttentionGraph,
    tokens: Option<TokenBatch>,
}

fn inputs_for(kg: &KnowledgeGraph, method: Method, vocab: Option<&Vocabulary>, context: &BTreeMap<String, Vec<String>>) -> Result<Inputs> {
    let tokens = match (method, vocab) {
        (Method::Cgat, Some(v)) => Some(TokenBatch::from_sentences(kg.entities(), context, v)?),
        (Method::Cgat, None) => return Err(LinkError::Input("context model without vocabulary".into())),
        _ => None,
    };
    Ok(Inputs {
        graph: AttentionGraph::new(kg.adjacency()),
        tokens,
    })
}

/// Canonical `(i, j)` edges in sorted order.
pub fn positive_pairs(kg: &KnowledgeGraph) -> Vec<(usize, usize)> {
    kg.edges().map(|(k, _)| k).collect()
}

fn renormalize_rows(a: &mut Array) {
    let Ok((rows, _)) = a.dims2() else { return };
    for i in 0..rows {
        let row = a.row_mut(i);
        let norm = row.iter().fold(0.0, |s, x| s + x * x).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

const EVAL_NEGATIVE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains `method` on the edges of `kg` by minibatch gradient descent on the
/// margin loss. Entity base embeddings are rescaled to unit length after each
/// epoch. `context` supplies sentence tokens per entity id for the context
/// encoder; entities without one fall back to their own term.
pub fn train(
    method: Method,
    kg: &KnowledgeGraph,
    config: &TrainConfig,
    context: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<LinkModel> {
    config.validate()?;
    if kg.entity_count() < 2 {
        return Err(LinkError::Input("training needs at least 2 entities".into()));
    }
    let positives = positive_pairs(kg);
    if positives.is_empty() {
        return Err(LinkError::Input("training needs at least one edge".into()));
    }
    let mut config = config.clone();
    config.model.seed = config.seed;

    let context: BTreeMap<String, Vec<String>> = match method {
        Method::Cgat => kg
            .entities()
            .iter()
            .map(|e| {
                let sentence = context
                    .and_then(|c| c.get(e))
                    .filter(|s| !s.is_empty())
                    .cloned()
                    .unwrap_or_else(|| e.split(' ').map(str::to_string).collect());
                (e.clone(), sentence)
            })
            .collect(),
        _ => BTreeMap::new(),
    };
    let vocab = (method == Method::Cgat).then(|| Vocabulary::from_sentences(context.values()));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new(config.seed);
    let layout = ModelLayout::init(
        method,
        &config.model,
        kg.entity_count(),
        vocab.as_ref().map_or(0, Vocabulary::len),
        &mut store,
        &mut rng,
    )?;
    let inputs = inputs_for(kg, method, vocab.as_ref(), &context)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_NEGATIVE_STREAM);
    let eval_negatives = sample_negatives(kg.entity_count(), &positives, &mut eval_rng)?;
    let full_loss = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = layout.loss(
            &mut tape,
            store,
            &inputs.graph,
            inputs.tokens.as_ref(),
            &positives,
            &eval_negatives,
            config.margin,
        )?;
        Ok(tape.scalar(loss)?)
    };
    let initial_loss = full_loss(&store)?;

    let mut order = positives.clone();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let negatives = sample_negatives(kg.entity_count(), chunk, &mut rng)?;
            let diverged = |e: &dyn fmt::Display| LinkError::Diverged {
                epoch,
                batch,
                message: e.to_string(),
            };
            let mut tape = Tape::new();
            let loss = layout
                .loss(
                    &mut tape,
                    &store,
                    &inputs.graph,
                    inputs.tokens.as_ref(),
                    chunk,
                    &negatives,
                    config.margin,
                )
                .map_err(|e| diverged(&e))?;
            epoch_loss += tape.scalar(loss)?;
            tape.backward(loss, &mut store).map_err(|e| diverged(&e))?;
            store.sgd_step(config.learning_rate);
            store.zero_grads();
        }
        renormalize_rows(store.value_mut(layout.entity));
        if !epoch_loss.is_finite() {
            return Err(LinkError::Diverged {
                epoch,
                batch: 0,
                message: "non-finite epoch loss".into(),
            });
        }
        epoch_losses.push(epoch_loss);
    }
    let final_loss = full_loss(&store)?;

    Ok(LinkModel {
        method,
        config,
        entities: kg.entities().to_vec(),
        vocab,
        context,
        store,
        trace: TrainTrace {
            epoch_losses,
            initial_loss,
            final_loss,
        },
    })
}

impl LinkModel {
    pub fn layout(&self) -> Result<ModelLayout> {
        ModelLayout::attach(self.method, &self.config.model, &self.store)
    }

    fn check_graph(&self, kg: &KnowledgeGraph) -> Result<()> {
        if kg.entities() != self.entities.as_slice() {
            return Err(LinkError::Input(
                "graph entities differ from the ones the model was trained on".into(),
            ));
        }
        Ok(())
    }

    /// Entity representations over the training graph.
    pub fn embed(&self, kg: &KnowledgeGraph) -> Result<Embeddings> {
        self.check_graph(kg)?;
        let layout = self.layout()?;
        let inputs = inputs_for(kg, self.method, self.vocab.as_ref(), &self.context)?;
        let mut tape = Tape::new();
        let (z, r) = layout.encode(&mut tape, &self.store, &inputs.graph, inputs.tokens.as_ref())?;
        Ok(Embeddings {
            entities: tape.value(z).clone(),
            relation: tape.value(r).data().to_vec(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            method: self.method,
            config: self.config.clone(),
            entities: self.entities.clone(),
            vocab: self.vocab.clone(),
            context: self.context.clone(),
            trace: self.trace.clone(),
            params: self.store.to_json_value(),
        };
        serde_json::to_string(&file).map_err(|e| LinkError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| LinkError::Format(e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64());
        if found != Some(MODEL_FORMAT_VERSION as u64) {
            return Err(LinkError::Format(format!(
                "expected model version {MODEL_FORMAT_VERSION}, found {}",
                found.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| LinkError::Format(e.to_string()))?;
        let model = LinkModel {
            method: file.method,
            config: file.config,
            entities: file.entities,
            vocab: file.vocab,
            context: file.context,
            store: ParamStore::from_json_value(file.params)?,
            trace: file.trace,
        };
        model.layout()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        LinkModel::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatePolicy {
    /// Non-adjacent pairs with at least one common neighbor.
    TwoHop,
    /// Every non-adjacent pair.
    AllPairs,
}

impl FromStr for CandidatePolicy {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_hop" | "two-hop" => Ok(CandidatePolicy::TwoHop),
            "all_pairs" | "all-pairs" => Ok(CandidatePolicy::AllPairs),
            other => Err(LinkError::Input(format!("unknown candidate policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Links emitted = `round(rho · |edges|)`.
    pub rho: f64,
    pub candidates: CandidatePolicy,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            rho: 0.1,
            candidates: CandidatePolicy::TwoHop,
        }
    }
}

pub fn candidate_pairs(kg: &KnowledgeGraph, policy: CandidatePolicy) -> Vec<(usize, usize)> {
    match policy {
        CandidatePolicy::TwoHop => two_hop_counts(kg).into_keys().collect(),
        CandidatePolicy::AllPairs => {
            let n = kg.entity_count();
            (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .filter(|&(i, j)| !kg.has_edge(i, j))
                .collect()
        }
    }
}

/// Scores candidates with the trained model and keeps the top
/// `round(rho · |edges|)`.
pub fn predict_links(kg: &KnowledgeGraph, model: &LinkModel, config: &PredictConfig) -> Result<PredictedLinkSet> {
    if !(config.rho >= 0.0 && config.rho.is_finite()) {
        return Err(LinkError::Input(format!("rho must be non-negative, got {}", config.rho)));
    }
    let emb = model.embed(kg)?;
    let candidates = candidate_pairs(kg, config.candidates);
    let mut scored = candidates
        .par_iter()
        .map(|&(i, j)| Ok(ScoredLink { i, j, score: emb.score(i, j)? }))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(rank_order);
    let k = (config.rho * kg.edge_count() as f64).round() as usize;
    if k > scored.len() {
        log::warn!(
            "requested {k} links but only {} candidates exist; emitting all",
            scored.len()
        );
    }
    scored.truncate(k);
    Ok(PredictedLinkSet {
        cutoff_year: kg.cutoff_year(),
        method: model.method,
        rho_or_zeta: config.rho,
        k,
        links: scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

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

    fn square() -> KnowledgeGraph {
        graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)])
    }

    #[test]
    fn cnm_score_examples() {
        let g = square();
        assert_eq!(cnm_score(&g, 0, 2).unwrap(), 2);
        let disjoint = graph(4, &[(0, 1), (2, 3)]);
        assert_eq!(cnm_score(&disjoint, 0, 2).unwrap(), 0);
        assert!(matches!(cnm_score(&g, 1, 1), Err(LinkError::Input(_))));
    }

    #[test]
    fn cnm_predict_examples() {
        let square = cnm_predict(&square(), None).unwrap();
        assert_eq!(square.pairs().collect::<Vec<_>>(), [(0, 2), (1, 3)]);
        assert_eq!(square.rho_or_zeta, 1.0);
        let star = cnm_predict(&graph(4, &[(0, 1), (0, 2), (0, 3)]), None).unwrap();
        assert_eq!(star.pairs().collect::<Vec<_>>(), [(1, 2), (1, 3), (2, 3)]);
        let complete = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert!(cnm_predict(&complete, None).unwrap().is_empty());
        assert!(cnm_predict(&graph(1, &[]), None).unwrap().is_empty());
        assert!(cnm_predict(&complete, Some(0)).is_err());
    }

    fn emb(rows: &[&[f64]], r: &[f64]) -> Embeddings {
        let cols = rows[0].len();
        Embeddings {
            entities: Array::matrix(rows.len(), cols, rows.concat()).unwrap(),
            relation: r.to_vec(),
        }
    }

    #[test]
    fn transe_score_examples() {
        let e = emb(&[&[1.0, 2.0], &[1.5, 1.0]], &[0.5, -1.0]);
        assert_eq!(e.score(0, 1).unwrap(), 0.0);
        let same = emb(&[&[0.3, 0.4]], &[0.0, 0.0]);
        assert_eq!(same.score(0, 0).unwrap(), 0.0);
        let e = emb(&[&[0.1, -0.7, 0.25], &[0.9, 0.3, -0.4]], &[0.05, 0.6, 0.15]);
        // (0.1+0.05-0.9)^2 + (-0.7+0.6-0.3)^2 + (0.25+0.15+0.4)^2
        let want = -(0.75f64.powi(2) + 0.4f64.powi(2) + 0.8f64.powi(2));
        assert!((e.score(0, 1).unwrap() - want).abs() < 1e-12);
        assert!(e.score(0, 5).is_err());
    }

    #[test]
    fn transe_loss_examples() {
        let e = emb(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 3.0]], &[1.0, 0.0]);
        // positive distance 0, negative distance ≥ γ → inactive hinge
        assert_eq!(transe_loss(&e, &[(0, 1)], &[(0, 2)], 1.0).unwrap(), 0.0);
        assert!((transe_loss(&e, &[(0, 2)], &[(0, 2)], 0.7).unwrap() - 0.7).abs() < 1e-12);
        assert!(transe_loss(&e, &[(0, 1)], &[], 1.0).is_err());
    }

    #[test]
    fn negatives_change_exactly_one_endpoint() {
        let pos: Vec<(usize, usize)> = (0..200).map(|k| (k % 7, 7 + k % 5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = sample_negatives(12, &pos, &mut rng).unwrap();
        for (p, n) in pos.iter().zip(&neg) {
            assert_eq!((p.0 != n.0) as u8 + (p.1 != n.1) as u8, 1);
        }
        let again = sample_negatives(12, &pos, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(neg, again);
        assert!(sample_negatives(1, &pos, &mut rng).is_err());
    }

    #[test]
    fn corruption_side_is_balanced() {
        let pos = vec![(0usize, 1usize); 10_000];
        let neg = sample_negatives(50, &pos, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let heads = neg.iter().filter(|n| n.0 != 0).count() as f64;
        // Binomial(10000, 0.5): σ = 50.
        assert!((heads - 5000.0).abs() <= 150.0, "{heads}");
    }

    fn small_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            batch_size: 4,
            model: EncoderConfig::with_dims(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let m = train(Method::Transe, &g, &small_config(0, 7), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut fresh = ParamStore::new(7);
        ModelLayout::init(Method::Transe, &EncoderConfig::with_dims(8), 3, 0, &mut fresh, &mut rng).unwrap();
        assert_eq!(m.store, fresh);
        assert!(m.trace.epoch_losses.is_empty());
        assert_eq!(m.trace.initial_loss, m.trace.final_loss);
    }

    #[test]
    fn triangle_training_reduces_loss() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let m = train(Method::Transe, &g, &small_config(200, 7), None).unwrap();
        assert!(m.trace.final_loss < m.trace.initial_loss, "{:?}", m.trace);
        assert_eq!(m.trace.epoch_losses.len(), 200);
    }

    #[test]
    fn training_is_deterministic() {
        let g = graph(5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)]);
        for method in [Method::Transe, Method::Gat, Method::Cgat] {
            let a = train(method, &g, &small_config(20, 7), None).unwrap();
            let b = train(method, &g, &small_config(20, 7), None).unwrap();
            assert_eq!(a, b, "{method}");
        }
    }

    #[test]
    fn tape_loss_matches_direct_evaluation() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(11);
        let layout = ModelLayout::init(Method::Transe, &EncoderConfig::with_dims(5), 6, 0, &mut store, &mut rng).unwrap();
        let pos = [(0, 1), (1, 2), (2, 3), (4, 5)];
        let neg = sample_negatives(6, &pos, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ag = AttentionGraph::new(g.adjacency());
        let loss = layout.loss(&mut tape, &store, &ag, None, &pos, &neg, 1.0).unwrap();
        let emb = Embeddings {
            entities: store.value(layout.entity).clone(),
            relation: store.value(layout.relation).data().to_vec(),
        };
        let direct = transe_loss(&emb, &pos, &neg, 1.0).unwrap();
        assert!((tape.scalar(loss).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn cnm_has_no_model() {
        let g = square();
        assert!(train(Method::Cnm, &g, &small_config(1, 0), None).is_err());
    }

    #[test]
    fn model_round_trip() {
        let g = square();
        let m = train(Method::Cgat, &g, &small_config(3, 1), None).unwrap();
        let back = LinkModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.embed(&g).unwrap(), m.embed(&g).unwrap());
    }

    #[test]
    fn predict_links_respects_k() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (0, 3), (1, 4), (2, 5), (0, 2)]);
        let m = train(Method::Transe, &g, &small_config(5, 2), None).unwrap();
        let one = predict_links(&g, &m, &PredictConfig { rho: 0.1, ..PredictConfig::default() }).unwrap();
        assert_eq!(one.k, 1);
        let all = predict_links(&g, &m, &PredictConfig { rho: 100.0, ..PredictConfig::default() }).unwrap();
        assert_eq!(one.links[0], all.links[0]);
        all.validate(&g).unwrap();
        let complete = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let m = train(Method::Transe, &complete, &small_config(1, 2), None).unwrap();
        assert!(predict_links(&complete, &m, &PredictConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn predict_links_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let edges: Vec<(usize, usize)> = (0..14).map(|_| (rng.gen_range(0..10), rng.gen_range(0..10))).filter(|(a, b)| a != b).collect();
        let g = graph(10, &edges);
        let m = train(Method::Transe, &g, &small_config(10, 5), None).unwrap();
        let table = m.store.value(m.store.id("entity").unwrap());
        let rel = m.store.value(m.store.id("relation").unwrap()).data();
        let mut want = Vec::new();
        for i in 0..10 {
            for j in (i + 1)..10 {
                if !g.has_edge(i, j) {
                    let d: f64 = (0..8).map(|c| (table.row(i)[c] + rel[c] - table.row(j)[c]).powi(2)).sum();
                    want.push((-d, i, j));
                }
            }
        }
        want.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let config = PredictConfig { rho: 0.5, candidates: CandidatePolicy::AllPairs };
        let got = predict_links(&g, &m, &config).unwrap();
        let k = (0.5 * g.edge_count() as f64).round() as usize;
        assert_eq!(got.len(), k);
        for (l, w) in got.links.iter().zip(&want) {
            assert_eq!((l.i, l.j), (w.1, w.2));
            assert!((l.score - w.0).abs() < 1e-12);
        }
    }

    #[test]
    fn link_file_round_trip() {
        let g = square();
        let set = cnm_predict(&g, None).unwrap();
        let back = PredictedLinkSet::from_json(&set.to_json(&g).unwrap(), &g).unwrap();
        assert_eq!(back, set);
        let text = set.to_json(&g).unwrap().replace("\"e00\"", "\"nope\"");
        assert!(PredictedLinkSet::from_json(&text, &g).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_graph() -> impl Strategy<Value = KnowledgeGraph> {
            (2usize..30).prop_flat_map(|n| {
                prop::collection::vec((0..n, 0..n), 0..4 * n).prop_map(move |es| {
                    let es: Vec<(usize, usize)> = es.into_iter().filter(|(a, b)| a != b).collect();
                    graph(n, &es)
                })
            })
        }

        proptest! {
            #[test]
            fn cnm_symmetric_and_bounded(g in random_graph()) {
                let n = g.entity_count();
                for x in 0..n {
                    for y in (x + 1)..n {
                        let s = cnm_score(&g, x, y).unwrap();
                        prop_assert_eq!(s, cnm_score(&g, y, x).unwrap());
                        prop_assert!(s <= g.degree(x).min(g.degree(y)));
                    }
                }
            }

            #[test]
            fn zeta_one_is_distance_two(g in random_graph()) {
                let n = g.entity_count();
                let got: BTreeSet<(usize, usize)> = cnm_predict(&g, Some(1)).unwrap().pairs().collect();
                let mut want = BTreeSet::new();
                for x in 0..n {
                    for y in (x + 1)..n {
                        let two = g.neighbors(x).unwrap().iter().any(|k| g.has_edge(*k, y));
                        if !g.has_edge(x, y) && two {
                            want.insert((x, y));
                        }
                    }
                }
                prop_assert_eq!(got, want);
            }
        }
    }
}
