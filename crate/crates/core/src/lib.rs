//! Co-occurrence knowledge graphs built from patent documents, link
//! prediction over them, and forecasting of new patents as cliques that
//! contain predicted links.
//!
//! The pipeline runs in stages:
//!
//! 1. [`corpus`] loads documents and a domain lexicon and extracts entity
//!    mentions by dictionary matching.
//! 2. [`graph`] accumulates entity co-occurrences into a knowledge graph per
//!    cutoff year.
//! 3. [`link`] predicts missing edges with a common-neighbor rule or with
//!    translation embeddings trained over attention encoders ([`encoders`],
//!    built on [`num`]).
//! 4. [`patent`] adds predicted edges back and enumerates maximal cliques
//!    that use them.
//! 5. [`eval`] scores both predictions against later years and drives full
//!    backtests, including on seeded synthetic corpora.

pub mod corpus;
pub mod encoders;
pub mod eval;
pub mod graph;
pub mod link;
pub mod num;
pub mod patent;

pub use corpus::{Document, Lexicon};
pub use graph::KnowledgeGraph;
