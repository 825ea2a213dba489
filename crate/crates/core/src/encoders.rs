//! Entity representation functions: neighborhood attention over the
//! knowledge graph, bilinear attention over a context sentence, and a
//! per-entity gate that mixes the two.
//!
//! Every forward pass is recorded on a [`Tape`], so the same code serves
//! inference and training.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::{sigmoid_scalar, Array, NumError, ParamId, ParamStore, Segments, Tape, Var};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("encoder config: {0}")]
    Config(String),
    #[error("encoder input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, EncodeError>;

/// Dimensions and attention settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Entity input feature size.
    #[serde(rename = "F")]
    pub f: usize,
    /// Output feature size of the attention layers.
    #[serde(rename = "F_prime")]
    pub f_prime: usize,
    /// Token embedding size of the context encoder.
    pub d: usize,
    pub leaky_slope: f64,
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            f: 64,
            f_prime: 64,
            d: 64,
            leaky_slope: 0.2,
            heads: 1,
            layers: 1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn with_dims(dim: usize) -> Self {
        EncoderConfig {
            f: dim,
            f_prime: dim,
            d: dim,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.f_prime == 0 || self.d == 0 {
            return Err(EncodeError::Config("dimensions must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(EncodeError::Config(format!(
                "leaky_slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        if self.heads == 0 || self.layers == 0 {
            return Err(EncodeError::Config("heads and layers must be at least 1".into()));
        }
        if !self.f_prime.is_multiple_of(self.heads) {
            return Err(EncodeError::Config(format!(
                "F_prime {} is not divisible by {} heads",
                self.f_prime, self.heads
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Graph attention

/// Neighbor lists with a self-loop added to every node, flattened into
/// `(center, neighbor)` pairs grouped by center.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGraph {
    nodes: usize,
    centers: Vec<usize>,
    neighbors: Vec<usize>,
    segments: Segments,
}

impl AttentionGraph {
    /// `adjacency[i]` lists the neighbors of node `i`; self-loops are added
    /// and each list is sorted.
    pub fn new(adjacency: &[Vec<usize>]) -> Self {
        let mut centers = Vec::new();
        let mut neighbors = Vec::new();
        let mut lengths = Vec::with_capacity(adjacency.len());
        for (i, list) in adjacency.iter().enumerate() {
            let mut with_self: Vec<usize> = list.iter().copied().filter(|&j| j != i).collect();
            with_self.push(i);
            with_self.sort_unstable();
            with_self.dedup();
            lengths.push(with_self.len());
            centers.extend(std::iter::repeat_n(i, with_self.len()));
            neighbors.extend(with_self);
        }
        AttentionGraph {
            nodes: adjacency.len(),
            centers,
            neighbors,
            segments: Segments::from_lengths(lengths),
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Neighborhood (including self) of node `i`.
    pub fn neighborhood(&self, i: usize) -> &[usize] {
        &self.neighbors[self.segments.range(i)]
    }

    pub fn segments(&self) -> &Segments {
        &self.segments
    }
}

/// Parameters of one attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatHead {
    /// `F_in × F_out` linear map.
    pub weight: ParamId,
    /// `2·F_out × 1` attention vector applied to `[W h_i ⊕ W h_j]`.
    pub attention: ParamId,
}

/// Result of one attention layer.
#[derive(Clone, Debug)]
pub struct GatOutput {
    pub output: Var,
    /// Per-head attention weights, aligned with the flattened neighborhoods.
    pub attention: Vec<Var>,
}

/// One attention layer. With several heads, each head produces
/// `F_out / heads` columns and the head outputs are concatenated.
pub fn gat_forward(
    tape: &mut Tape,
    store: &ParamStore,
    heads: &[GatHead],
    features: Var,
    graph: &AttentionGraph,
    slope: f64,
) -> Result<GatOutput> {
    let (n, _) = tape.value(features).dims2()?;
    if n != graph.nodes {
        return Err(EncodeError::Input(format!(
            "{n} feature rows for a graph with {} nodes",
            graph.nodes
        )));
    }
    if n == 0 || heads.is_empty() {
        return Err(EncodeError::Input("attention needs nodes and heads".into()));
    }
    let mut aggregates = Vec::with_capacity(heads.len());
    let mut attention = Vec::with_capacity(heads.len());
    for head in heads {
        let w = tape.param(store, head.weight)?;
        let a = tape.param(store, head.attention)?;
        let projected = tape.matmul(features, w)?;
        let (_, out_dim) = tape.value(projected).dims2()?;
        let (a_len, _) = tape.value(a).dims2()?;
        if a_len != 2 * out_dim {
            return Err(NumError::Shape(format!(
                "attention vector has {a_len} entries, expected {}",
                2 * out_dim
            ))
            .into());
        }
        let a_center = tape.slice_rows(a, 0, out_dim)?;
        let a_neighbor = tape.slice_rows(a, out_dim, 2 * out_dim)?;
        let center_score = tape.matmul(projected, a_center)?;
        let neighbor_score = tape.matmul(projected, a_neighbor)?;
        let per_center = tape.gather_rows(center_score, &graph.centers)?;
        let per_neighbor = tape.gather_rows(neighbor_score, &graph.neighbors)?;
        let raw = tape.add(per_center, per_neighbor)?;
        let scores = tape.leaky_relu(raw, slope)?;
        let alpha = tape.segment_softmax(scores, &graph.segments)?;
        let messages = tape.gather_rows(projected, &graph.neighbors)?;
        let agg = tape.segment_weighted_sum(alpha, messages, &graph.segments)?;
        aggregates.push(agg);
        attention.push(alpha);
    }
    let combined = if aggregates.len() == 1 {
        aggregates[0]
    } else {
        tape.concat_cols(&aggregates)?
    };
    let output = tape.sigmoid(combined)?;
    Ok(GatOutput { output, attention })
}

// ---------------------------------------------------------------------------
// Context encoder

/// Token vocabulary; id 0 is the reserved unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

impl Vocabulary {
    pub fn from_sentences<'a, I>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        let mut tokens: Vec<String> = sentences
            .into_iter()
            .flatten()
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        tokens.insert(0, UNKNOWN_TOKEN.to_string());
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map_or(0, |i| i + 1)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids for every entity's context sentence, flattened with one
/// segment per entity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    tokens: Vec<usize>,
    owners: Vec<usize>,
    segments: Segments,
}

impl TokenBatch {
    pub fn new(per_entity: &[Vec<usize>]) -> Result<Self> {
        if let Some(i) = per_entity.iter().position(Vec::is_empty) {
            return Err(EncodeError::Input(format!("entity {i} has an empty context sentence")));
        }
        let tokens = per_entity.iter().flatten().copied().collect();
        let owners = per_entity
            .iter()
            .enumerate()
            .flat_map(|(i, t)| std::iter::repeat_n(i, t.len()))
            .collect();
        Ok(TokenBatch {
            tokens,
            owners,
            segments: Segments::from_lengths(per_entity.iter().map(Vec::len)),
        })
    }

    /// Maps each entity's sentence through `vocab`. Entities without a
    /// sentence fall back to the tokens of their own id.
    pub fn from_sentences(
        entities: &[String],
        sentences: &BTreeMap<String, Vec<String>>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let per_entity: Vec<Vec<usize>> = entities
            .iter()
            .map(|e| match sentences.get(e) {
                Some(s) if !s.is_empty() => s.iter().map(|t| vocab.id(t)).collect(),
                _ => e.split(' ').map(|t| vocab.id(t)).collect(),
            })
            .collect();
        TokenBatch::new(&per_entity)
    }

    pub fn entities(&self) -> usize {
        self.segments.count()
    }

    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.tokens[self.segments.range(i)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextParams {
    /// `|vocab| × d` token table.
    pub tokens: ParamId,
    /// `F × d` bilinear map between the entity query and token states.
    pub bilinear: ParamId,
    /// `d × F'` map into the fusion space.
    pub projection: ParamId,
}

/// Bilinear attention of each entity over its sentence:
/// `μ = softmax(e W H)`, `ē = proj · Σ μ_k H_k`. Returns an `N × F'` matrix.
pub fn context_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ContextParams,
    queries: Var,
    batch: &TokenBatch,
) -> Result<(Var, Var)> {
    let (n, _) = tape.value(queries).dims2()?;
    if n != batch.entities() {
        return Err(EncodeError::Input(format!(
            "{n} queries for {} sentences",
            batch.entities()
        )));
    }
    let table = tape.param(store, params.tokens)?;
    let bilinear = tape.param(store, params.bilinear)?;
    let projection = tape.param(store, params.projection)?;
    let states = tape.gather_rows(table, &batch.tokens)?;
    let keyed = tape.matmul(queries, bilinear)?;
    let per_token = tape.gather_rows(keyed, &batch.owners)?;
    let logits = tape.row_dot(per_token, states)?;
    let weights = tape.segment_softmax(logits, &batch.segments)?;
    let pooled = tape.segment_weighted_sum(weights, states, &batch.segments)?;
    let out = tape.matmul(pooled, projection)?;
    Ok((out, weights))
}

/// Single-entity convenience wrapper around [`context_forward`].
pub fn context_forward_one(
    store: &ParamStore,
    params: &ContextParams,
    entity_vec: &[f64],
    tokens: &[usize],
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(EncodeError::Input("empty token list".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(Array::matrix(1, entity_vec.len(), entity_vec.to_vec())?)?;
    let batch = TokenBatch::new(&[tokens.to_vec()])?;
    let (out, _) = context_forward(&mut tape, store, params, q, &batch)?;
    Ok(tape.value(out).data().to_vec())
}

// ---------------------------------------------------------------------------
// Gate

/// `σ(ḡ) ⊙ graph + (1 − σ(ḡ)) ⊙ context`, elementwise.
pub fn gate_fuse(gate_logits: &[f64], graph: &[f64], context: &[f64]) -> Result<Vec<f64>> {
    if gate_logits.len() != graph.len() || graph.len() != context.len() {
        return Err(NumError::Shape(format!(
            "gate_fuse lengths {}, {}, {}",
            gate_logits.len(),
            graph.len(),
            context.len()
        ))
        .into());
    }
    Ok(gate_logits
        .iter()
        .zip(graph.iter().zip(context))
        .map(|(&g, (&h, &e))| {
            let s = sigmoid_scalar(g);
            s * h + (1.0 - s) * e
        })
        .collect())
}

/// Tape version of [`gate_fuse`] over all entities at once; `gate` holds one
/// row of logits per entity.
pub fn gate_fuse_tape(tape: &mut Tape, store: &ParamStore, gate: ParamId, graph: Var, context: Var) -> Result<Var> {
    let logits = tape.param(store, gate)?;
    let g = tape.sigmoid(logits)?;
    let diff = tape.sub(graph, context)?;
    let gated = tape.mul(g, diff)?;
    Ok(tape.add(context, gated)?)
}

// ---------------------------------------------------------------------------
// Full encoder

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Gat,
    Cgat,
}

/// Parameter handles for the stacked attention layers and, in context mode,
/// the context encoder and gate.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub mode: EncoderMode,
    pub layers: Vec<Vec<GatHead>>,
    pub context: Option<ContextParams>,
    pub gate: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct EncodedEntities {
    /// `N × F'` final representations.
    pub output: Var,
    pub graph_output: Var,
    pub context_output: Option<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<R: Rng>(
        config: &EncoderConfig,
        mode: EncoderMode,
        entities: usize,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let head_dim = config.f_prime / config.heads;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 { config.f } else { config.f_prime };
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let weight = store.add_uniform(&format!("gat{l}.head{h}.weight"), &[input, head_dim], rng)?;
                let attention = store.add_uniform(&format!("gat{l}.head{h}.attention"), &[2 * head_dim, 1], rng)?;
                heads.push(GatHead { weight, attention });
            }
            layers.push(heads);
        }
        let (context, gate) = match mode {
            EncoderMode::Gat => (None, None),
            EncoderMode::Cgat => {
                if entities == 0 || vocab_size == 0 {
                    return Err(EncodeError::Config("context encoder needs entities and a vocabulary".into()));
                }
                let tokens = store.add_uniform("context.tokens", &[vocab_size, config.d], rng)?;
                let bilinear = store.add_uniform("context.bilinear", &[config.f, config.d], rng)?;
                let projection = store.add_uniform("context.projection", &[config.d, config.f_prime], rng)?;
                let gate = store.add_uniform("gate", &[entities, config.f_prime], rng)?;
                (
                    Some(ContextParams {
                        tokens,
                        bilinear,
                        projection,
                    }),
                    Some(gate),
                )
            }
        };
        Ok(Encoder {
            config: config.clone(),
            mode,
            layers,
            context,
            gate,
        })
    }

    /// Looks up the parameter handles of an encoder previously registered
    /// under the standard names.
    pub fn attach(config: &EncoderConfig, mode: EncoderMode, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let mut heads = Vec::new();
            for h in 0..config.heads {
                heads.push(GatHead {
                    weight: store.id(&format!("gat{l}.head{h}.weight"))?,
                    attention: store.id(&format!("gat{l}.head{h}.attention"))?,
                });
            }
            layers.push(heads);
        }
        let (context, gate) = match mode {
            EncoderMode::Gat => (None, None),
            EncoderMode::Cgat => (
                Some(ContextParams {
                    tokens: store.id("context.tokens")?,
                    bilinear: store.id("context.bilinear")?,
                    projection: store.id("context.projection")?,
                }),
                Some(store.id("gate")?),
            ),
        };
        Ok(Encoder {
            config: config.clone(),
            mode,
            layers,
            context,
            gate,
        })
    }

    /// Encodes all entities from their base embeddings (`N × F`). Context
    /// mode requires `tokens`; graph mode ignores it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        base: Var,
        graph: &AttentionGraph,
        tokens: Option<&TokenBatch>,
    ) -> Result<EncodedEntities> {
        let mut h = base;
        let mut attention = Vec::with_capacity(self.layers.len());
        for heads in &self.layers {
            let out = gat_forward(tape, store, heads, h, graph, self.config.leaky_slope)?;
            h = out.output;
            attention.push(out.attention);
        }
        match (self.mode, self.context, self.gate) {
            (EncoderMode::Gat, _, _) => Ok(EncodedEntities {
                output: h,
                graph_output: h,
                context_output: None,
                attention,
            }),
            (EncoderMode::Cgat, Some(ctx), Some(gate)) => {
                let batch = tokens.ok_or_else(|| EncodeError::Input("context mode needs token batch".into()))?;
                let (e, _) = context_forward(tape, store, &ctx, base, batch)?;
                let fused = gate_fuse_tape(tape, store, gate, h, e)?;
                Ok(EncodedEntities {
                    output: fused,
                    graph_output: h,
                    context_output: Some(e),
                    attention,
                })
            }
            _ => Err(EncodeError::Config("context mode without context parameters".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::{grad_check, GradCheckConfig, TapeObjective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn leaky(x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            0.2 * x
        }
    }

    /// Scalar-by-scalar attention layer following the definition directly.
    fn gat_oracle(h: &[Vec<f64>], w: &[Vec<f64>], a: &[f64], adj: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let fo = w[0].len();
        let wh: Vec<Vec<f64>> = h
            .iter()
            .map(|row| (0..fo).map(|c| (0..row.len()).map(|r| row[r] * w[r][c]).sum()).collect())
            .collect();
        (0..h.len())
            .map(|i| {
                let mut nb: Vec<usize> = adj[i].clone();
                nb.push(i);
                nb.sort();
                nb.dedup();
                let s: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let mut acc = 0.0;
                        for c in 0..fo {
                            acc += a[c] * wh[i][c] + a[fo + c] * wh[j][c];
                        }
                        leaky(acc)
                    })
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                (0..fo)
                    .map(|c| {
                        let agg: f64 = nb.iter().zip(&s).map(|(&j, sj)| sj.exp() / z * wh[j][c]).sum();
                        sigmoid(agg)
                    })
                    .collect()
            })
            .collect()
    }

    fn rows(a: &Array) -> Vec<Vec<f64>> {
        let (r, _) = a.dims2().unwrap();
        (0..r).map(|i| a.row(i).to_vec()).collect()
    }

    fn setup(n: usize, dim: usize, mode: EncoderMode, seed: u64) -> (ParamStore, Encoder, ParamId) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        let base = store.add_uniform("entity", &[n, dim], &mut rng).unwrap();
        let cfg = EncoderConfig::with_dims(dim);
        let enc = Encoder::init(&cfg, mode, n, 6, &mut store, &mut rng).unwrap();
        (store, enc, base)
    }

    #[test]
    fn single_node_attends_to_itself() {
        let (store, enc, base) = setup(1, 3, EncoderMode::Gat, 1);
        let graph = AttentionGraph::new(&[vec![]]);
        let mut tape = Tape::new();
        let b = tape.param(&store, base).unwrap();
        let out = enc.forward(&mut tape, &store, b, &graph, None).unwrap();
        assert_eq!(tape.value(out.attention[0][0]).data(), &[1.0]);
        let h = store.value(base).row(0);
        let w = store.value(enc.layers[0][0].weight);
        for c in 0..3 {
            let wh: f64 = (0..3).map(|r| h[r] * w.row(r)[c]).sum();
            assert!((tape.value(out.output).data()[c] - sigmoid(wh)).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_features_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(3);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut data = row.clone();
        data.extend(&row);
        let base = store.add("entity", Array::matrix(2, 4, data).unwrap()).unwrap();
        let enc = Encoder::init(&EncoderConfig::with_dims(4), EncoderMode::Gat, 2, 1, &mut store, &mut rng).unwrap();
        let graph = AttentionGraph::new(&[vec![1], vec![0]]);
        let mut tape = Tape::new();
        let b = tape.param(&store, base).unwrap();
        let out = enc.forward(&mut tape, &store, b, &graph, None).unwrap();
        assert_eq!(tape.value(out.attention[0][0]).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn path_graph_matches_scalar_oracle() {
        let (store, enc, base) = setup(3, 4, EncoderMode::Gat, 7);
        let adj = vec![vec![1], vec![0, 2], vec![1]];
        let graph = AttentionGraph::new(&adj);
        let mut tape = Tape::new();
        let b = tape.param(&store, base).unwrap();
        let out = enc.forward(&mut tape, &store, b, &graph, None).unwrap();
        let expected = gat_oracle(
            &rows(store.value(base)),
            &rows(store.value(enc.layers[0][0].weight)),
            store.value(enc.layers[0][0].attention).data(),
            &adj,
        );
        for (got, want) in rows(tape.value(out.output)).iter().zip(&expected) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    /// Context attention evaluated scalar by scalar.
    fn context_oracle(store: &ParamStore, p: &ContextParams, q: &[f64], tokens: &[usize]) -> Vec<f64> {
        let table = store.value(p.tokens);
        let wf = store.value(p.bilinear);
        let proj = store.value(p.projection);
        let d = table.dims2().unwrap().1;
        let logits: Vec<f64> = tokens
            .iter()
            .map(|&t| {
                let hk = table.row(t);
                let mut acc = 0.0;
                for (r, qr) in q.iter().enumerate() {
                    for c in 0..d {
                        acc += qr * wf.row(r)[c] * hk[c];
                    }
                }
                acc
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let pooled: Vec<f64> = (0..d)
            .map(|c| tokens.iter().zip(&logits).map(|(&t, l)| (l - m).exp() / z * table.row(t)[c]).sum())
            .collect();
        let fo = proj.dims2().unwrap().1;
        (0..fo).map(|c| (0..d).map(|r| pooled[r] * proj.row(r)[c]).sum()).collect()
    }

    #[test]
    fn context_examples() {
        let (store, enc, base) = setup(2, 4, EncoderMode::Cgat, 5);
        let ctx = enc.context.unwrap();
        let q = store.value(base).row(0).to_vec();
        let one = context_forward_one(&store, &ctx, &q, &[3]).unwrap();
        let table = store.value(ctx.tokens);
        let proj = store.value(ctx.projection);
        for c in 0..4 {
            let want: f64 = (0..4).map(|r| table.row(3)[r] * proj.row(r)[c]).sum();
            assert!((one[c] - want).abs() < 1e-15);
        }
        let two = context_forward_one(&store, &ctx, &q, &[3, 3]).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-15);
        }
        let four = context_forward_one(&store, &ctx, &q, &[1, 4, 2, 5]).unwrap();
        let want = context_oracle(&store, &ctx, &q, &[1, 4, 2, 5]);
        for (a, b) in four.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(context_forward_one(&store, &ctx, &q, &[]), Err(EncodeError::Input(_))));
    }

    #[test]
    fn gate_examples() {
        let h = [0.3, -1.0, 2.0];
        let e = [1.0, 0.5, -0.2];
        assert_eq!(gate_fuse(&[4.0, -2.0, 0.1], &h, &h).unwrap(), h);
        let half = gate_fuse(&[0.0; 3], &h, &e).unwrap();
        for k in 0..3 {
            assert!((half[k] - 0.5 * (h[k] + e[k])).abs() < 1e-15);
        }
        let sat = gate_fuse(&[25.0; 3], &h, &e).unwrap();
        for k in 0..3 {
            assert!((sat[k] - h[k]).abs() < 1e-9);
        }
        assert!(gate_fuse(&[0.0; 2], &h, &e).is_err());
    }

    #[test]
    fn cgat_equals_gat_when_context_matches_graph() {
        // With the gate fused against an identical context vector the output
        // is the graph output itself.
        let (store, enc, base) = setup(4, 3, EncoderMode::Cgat, 9);
        let graph = AttentionGraph::new(&[vec![1, 2], vec![0], vec![0, 3], vec![2]]);
        let mut tape = Tape::new();
        let b = tape.param(&store, base).unwrap();
        let g = gat_forward(&mut tape, &store, &enc.layers[0], b, &graph, 0.2).unwrap();
        let fused = gate_fuse_tape(&mut tape, &store, enc.gate.unwrap(), g.output, g.output).unwrap();
        assert_eq!(tape.value(fused).data(), tape.value(g.output).data());
    }

    #[test]
    fn multi_head_and_layer_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new(2);
        let base = store.add_uniform("entity", &[5, 6], &mut rng).unwrap();
        let cfg = EncoderConfig {
            f: 6,
            f_prime: 8,
            d: 4,
            heads: 2,
            layers: 2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::init(&cfg, EncoderMode::Gat, 5, 1, &mut store, &mut rng).unwrap();
        let graph = AttentionGraph::new(&[vec![1], vec![0, 2], vec![1, 3], vec![2, 4], vec![3]]);
        let mut tape = Tape::new();
        let b = tape.param(&store, base).unwrap();
        let out = enc.forward(&mut tape, &store, b, &graph, None).unwrap();
        assert_eq!(tape.value(out.output).shape(), &[5, 8]);
        assert_eq!(out.attention.len(), 2);
        assert_eq!(out.attention[1].len(), 2);
        let attached = Encoder::attach(&cfg, EncoderMode::Gat, &store).unwrap();
        assert_eq!(attached.layers, enc.layers);
        let bad = EncoderConfig { heads: 3, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn vocabulary_reserves_unknown() {
        let sents = [vec!["b".to_string(), "a".to_string()], vec!["a".to_string()]];
        let v = Vocabulary::from_sentences(sents.iter());
        assert_eq!(v.tokens(), [UNKNOWN_TOKEN, "a", "b"]);
        assert_eq!(v.id("a"), 1);
        assert_eq!(v.id("zzz"), 0);
        let mut ctx = BTreeMap::new();
        ctx.insert("x y".to_string(), vec!["b".to_string()]);
        let batch = TokenBatch::from_sentences(&["w".into(), "x y".into()], &ctx, &v).unwrap();
        assert_eq!(batch.sentence(0), [0]);
        assert_eq!(batch.sentence(1), [2]);
    }

    #[test]
    fn encoder_gradient_passes_check() {
        for seed in 0..5 {
            let (store, enc, base) = setup(5, 3, EncoderMode::Cgat, 100 + seed);
            let graph = AttentionGraph::new(&[vec![1, 2], vec![0, 2, 3], vec![0, 1], vec![1, 4], vec![3]]);
            let batch = TokenBatch::new(&[vec![1, 2], vec![3], vec![4, 5, 1], vec![0, 2], vec![5]]).unwrap();
            let obj = TapeObjective(|tape: &mut Tape, s: &ParamStore| -> Result<Var> {
                let b = tape.param(s, base)?;
                let out = enc.forward(tape, s, b, &graph, Some(&batch))?;
                let sq = tape.mul(out.output, out.output)?;
                let weighted = tape.row_dot(sq, out.output)?;
                Ok(tape.sum(weighted)?)
            });
            let report = grad_check(&obj, &store, GradCheckConfig::with_tol(1e-4)).unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>, u64)> {
            (2usize..12).prop_flat_map(|n| {
                (
                    Just(n),
                    prop::collection::vec((0..n, 0..n), 0..3 * n),
                    any::<u64>(),
                )
            })
        }

        fn adjacency(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
            let mut adj = vec![Vec::new(); n];
            for &(a, b) in edges {
                if a != b && !adj[a].contains(&b) {
                    adj[a].push(b);
                    adj[b].push(a);
                }
            }
            adj
        }

        proptest! {
            #[test]
            fn relabeling_permutes_rows((n, edges, seed) in random_graph()) {
                let (store, enc, base) = setup(n, 3, EncoderMode::Gat, seed);
                let adj = adjacency(n, &edges);
                // reverse relabeling: node i becomes n-1-i
                let perm: Vec<usize> = (0..n).rev().collect();
                let mut padj = vec![Vec::new(); n];
                for (i, list) in adj.iter().enumerate() {
                    padj[perm[i]] = list.iter().map(|&j| perm[j]).collect();
                }
                let mut tape = Tape::new();
                let b = tape.param(&store, base).unwrap();
                let out = enc.forward(&mut tape, &store, b, &AttentionGraph::new(&adj), None).unwrap();
                let pb = tape.gather_rows(b, &perm).unwrap();
                let pout = enc.forward(&mut tape, &store, pb, &AttentionGraph::new(&padj), None).unwrap();
                for i in 0..n {
                    for (x, y) in tape.value(out.output).row(i).iter().zip(tape.value(pout.output).row(perm[i])) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn gate_output_between_inputs(
                v in prop::collection::vec((-30.0f64..30.0, -5.0f64..5.0, -5.0f64..5.0), 1..20)
            ) {
                let g: Vec<f64> = v.iter().map(|x| x.0).collect();
                let h: Vec<f64> = v.iter().map(|x| x.1).collect();
                let e: Vec<f64> = v.iter().map(|x| x.2).collect();
                let out = gate_fuse(&g, &h, &e).unwrap();
                for k in 0..out.len() {
                    prop_assert!(out[k] >= h[k].min(e[k]) - 1e-12 && out[k] <= h[k].max(e[k]) + 1e-12);
                }
            }
        }
    }
}
