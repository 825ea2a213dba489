//! Accuracy metrics, the cutoff-year backtest, and a seeded synthetic corpus
//! generator for desk-scale runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{first_context_sentences, Document, Lexicon};
use crate::graph::{build_graph, KnowledgeGraph};
use crate::link::{self, candidate_pairs, CandidatePolicy, LinkError, Method, PredictConfig, PredictedLinkSet, TrainConfig};
use crate::patent::{self, PatentError, PredictedPatent, DEFAULT_CLIQUE_CAP};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Patent(#[from] PatentError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A ratio that is reported as 0 and flagged when its denominator is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub value: f64,
    pub hits: usize,
    pub total: usize,
    pub defined: bool,
}

impl Accuracy {
    fn ratio(hits: usize, total: usize) -> Self {
        Accuracy {
            value: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            hits,
            total,
            defined: total > 0,
        }
    }
}

/// Fraction of predicted links that are edges of `future`. Links are matched
/// by entity id, so `future` may contain entities the cutoff graph lacks.
pub fn link_accuracy(predicted: &PredictedLinkSet, kg: &KnowledgeGraph, future: &KnowledgeGraph) -> Result<Accuracy> {
    let mut hits = 0;
    for (i, j) in predicted.pairs() {
        let a = future.index_of(kg.entity_id(i).map_err(LinkError::from)?);
        let b = future.index_of(kg.entity_id(j).map_err(LinkError::from)?);
        if let (Some(a), Some(b)) = (a, b) {
            hits += future.has_edge(a, b) as usize;
        }
    }
    Ok(Accuracy::ratio(hits, predicted.len()))
}

/// Fraction of candidates contained in some future patent.
pub fn patent_accuracy(candidates: &[PredictedPatent], future: &BTreeMap<String, BTreeSet<String>>) -> Accuracy {
    let hits = candidates.iter().filter(|c| patent::validate_patent(c, future)).count();
    Accuracy::ratio(hits, candidates.len())
}

/// Mean link accuracy of `count` pairs drawn uniformly without replacement
/// from the candidate pool, over `seeds` seeds starting at 0.
pub fn random_baseline(
    kg: &KnowledgeGraph,
    future: &KnowledgeGraph,
    count: usize,
    policy: CandidatePolicy,
    seeds: u64,
) -> Result<f64> {
    let pool = candidate_pairs(kg, policy);
    if pool.is_empty() || count == 0 || seeds == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<_> = pool.choose_multiple(&mut rng, count.min(pool.len())).copied().collect();
        let set = PredictedLinkSet {
            cutoff_year: kg.cutoff_year(),
            method: Method::Cnm,
            rho_or_zeta: 0.0,
            k: picks.len(),
            links: picks.into_iter().map(|(i, j)| link::ScoredLink { i, j, score: 0.0 }).collect(),
        };
        total += link_accuracy(&set, kg, future)?.value;
    }
    Ok(total / seeds as f64)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub communities: usize,
    pub entities_per_community: usize,
    pub docs_per_year: usize,
    pub years: usize,
    pub start_year: i32,
    pub entities_per_doc: usize,
    /// Probability that an entity slot is filled from another community.
    pub mixing: f64,
    /// Within-community popularity falls off as `1 / (rank + 1)^exponent`.
    pub popularity_exponent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            communities: 5,
            entities_per_community: 20,
            docs_per_year: 80,
            years: 6,
            start_year: 2010,
            entities_per_doc: 5,
            mixing: 0.1,
            popularity_exponent: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("communities", self.communities),
            ("entities_per_community", self.entities_per_community),
            ("docs_per_year", self.docs_per_year),
            ("years", self.years),
            ("entities_per_doc", self.entities_per_doc),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EvalError::Config(format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(EvalError::Config(format!("mixing must lie in [0, 1], got {}", self.mixing)));
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return Err(EvalError::Config("popularity_exponent must be non-negative".into()));
        }
        let reachable = if self.mixing == 0.0 {
            self.entities_per_community
        } else {
            self.entities_per_community * self.communities
        };
        if self.entities_per_doc > reachable {
            return Err(EvalError::Config(format!(
                "{} entities per document but only {reachable} can be drawn",
                self.entities_per_doc
            )));
        }
        Ok(())
    }

    pub fn end_year(&self) -> i32 {
        self.start_year + self.years as i32 - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub lexicon: Lexicon,
    /// Entity ids planted in each document, keyed by document id.
    pub planted: BTreeMap<String, BTreeSet<String>>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ve", "ru", "sa", "ti", "bo", "ze", "da", "fe", "gu", "pi", "no", "ha", "ce",
];

fn pseudo_word(mut n: usize, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYLLABLES[n % SYLLABLES.len()]);
        n /= SYLLABLES.len();
    }
    w
}

/// Entity term for member `k` of community `c`. Term words never end in
/// `n`; filler words always do, so filler cannot complete a term.
pub fn synthetic_term(c: usize, k: usize) -> String {
    format!("{} {}", pseudo_word(c, 2), pseudo_word(k, 3))
}

fn filler_word(c: usize, j: usize) -> String {
    format!("{}n", pseudo_word(c * 64 + j, 3))
}

const FILLER_PER_COMMUNITY: usize = 24;

/// Generates documents whose entity sets follow community structure.
/// Each document picks a home community, favouring communities that already
/// have many documents, then fills its entity slots from that community by
/// popularity rank, switching to a random other community with probability
/// `mixing` per slot. Every planted entity sits in its own sentence with
/// community filler words.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terms: Vec<Vec<String>> = (0..cfg.communities)
        .map(|c| (0..cfg.entities_per_community).map(|k| synthetic_term(c, k)).collect())
        .collect();
    let popularity: Vec<f64> = (0..cfg.entities_per_community)
        .map(|k| 1.0 / ((k + 1) as f64).powf(cfg.popularity_exponent))
        .collect();
    let mut community_docs = vec![0usize; cfg.communities];
    let mut documents = Vec::new();
    let mut planted = BTreeMap::new();

    for y in 0..cfg.years {
        let year = cfg.start_year + y as i32;
        for d in 0..cfg.docs_per_year {
            let weights: Vec<usize> = community_docs.iter().map(|n| n + 1).collect();
            let home = WeightedIndex::new(&weights).expect("positive weights").sample(&mut rng);
            community_docs[home] += 1;

            let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(cfg.entities_per_doc);
            while chosen.len() < cfg.entities_per_doc {
                let mut c = home;
                if cfg.communities > 1 && rng.gen_bool(cfg.mixing) {
                    c = rng.gen_range(0..cfg.communities - 1);
                    if c >= home {
                        c += 1;
                    }
                }
                let w: Vec<f64> = popularity
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| if chosen.contains(&(c, k)) { 0.0 } else { p })
                    .collect();
                let Ok(dist) = WeightedIndex::new(&w) else {
                    continue;
                };
                chosen.push((c, dist.sample(&mut rng)));
            }

            let id = format!("syn-{year}-{d:04}");
            let mut sentences = Vec::with_capacity(chosen.len());
            for &(c, k) in &chosen {
                let f = |rng: &mut ChaCha8Rng| filler_word(c, rng.gen_range(0..FILLER_PER_COMMUNITY));
                let (a, b, z) = (f(&mut rng), f(&mut rng), f(&mut rng));
                sentences.push(format!("{a} {b} {} {z}.", terms[c][k]));
            }
            let title = format!("{} {}", filler_word(home, 0), filler_word(home, 1));
            planted.insert(id.clone(), chosen.iter().map(|&(c, k)| terms[c][k].clone()).collect());
            documents.push(Document::new(id, year, title, sentences.join(" ")));
        }
    }
    let lexicon = Lexicon::from_terms(terms.iter().flatten());
    Ok(SyntheticCorpus {
        documents,
        lexicon,
        planted,
    })
}

// ---------------------------------------------------------------------------
// Backtest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    /// Cutoff years; all corpus years except the last when empty.
    pub cutoffs: Vec<i32>,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    /// Common-neighbor threshold; `⌈M/2⌉` when unset.
    pub zeta: Option<usize>,
    /// Years after the cutoff whose patents validate candidates; all later
    /// years when unset.
    pub horizon: Option<i32>,
    pub clique_cap: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            cutoffs: Vec::new(),
            methods: vec![Method::Cnm, Method::Gat, Method::Cgat],
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            zeta: None,
            horizon: None,
            clique_cap: DEFAULT_CLIQUE_CAP,
        }
    }
}

impl BacktestConfig {
    /// 64-bit FNV-1a of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let hash = text
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
        format!("{hash:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestRow {
    pub cutoff_year: i32,
    pub method: Method,
    pub new_links: usize,
    pub link_accuracy: Accuracy,
    pub new_patents: usize,
    pub patent_accuracy: Accuracy,
    /// Reason the cell was not run.
    pub skipped: Option<String>,
    pub fingerprint: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub version: u32,
    pub reference_year: i32,
    pub config: BacktestConfig,
    pub rows: Vec<BacktestRow>,
}

pub const REPORT_HEADER: [&str; 6] = [
    "cutoff_year",
    "method",
    "new_links",
    "link_accuracy_pct",
    "new_patents",
    "patent_accuracy_pct",
];

impl BacktestReport {
    pub fn row(&self, cutoff_year: i32, method: Method) -> Option<&BacktestRow> {
        self.rows.iter().find(|r| r.cutoff_year == cutoff_year && r.method == method)
    }

    /// Percentages with two decimals; skipped cells read `NA`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER).expect("in-memory write");
        for r in &self.rows {
            let record = if r.skipped.is_some() {
                vec![r.cutoff_year.to_string(), r.method.to_string(), "NA".into(), "NA".into(), "NA".into(), "NA".into()]
            } else {
                vec![
                    r.cutoff_year.to_string(),
                    r.method.to_string(),
                    r.new_links.to_string(),
                    format!("{:.2}", 100.0 * r.link_accuracy.value),
                    r.new_patents.to_string(),
                    format!("{:.2}", 100.0 * r.patent_accuracy.value),
                ]
            };
            w.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Output of one (cutoff, method) cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub links: PredictedLinkSet,
    pub candidates: Vec<PredictedPatent>,
    pub link_accuracy: Accuracy,
    pub patent_accuracy: Accuracy,
}

/// Predicts links for `kg` with `method`, training first when needed.
pub fn predict_for_method(
    method: Method,
    kg: &KnowledgeGraph,
    context: &BTreeMap<String, Vec<String>>,
    config: &BacktestConfig,
) -> Result<PredictedLinkSet> {
    if method == Method::Cnm {
        return Ok(link::cnm_predict(kg, config.zeta)?);
    }
    let model = link::train(method, kg, &config.train, Some(context))?;
    Ok(link::predict_links(kg, &model, &config.predict)?)
}

/// Runs one cell: predict, augment, enumerate candidates and score both
/// against `reference` and its patents after the cutoff.
pub fn run_cell(
    method: Method,
    kg: &KnowledgeGraph,
    context: &BTreeMap<String, Vec<String>>,
    reference: &KnowledgeGraph,
    config: &BacktestConfig,
) -> Result<CellResult> {
    let links = predict_for_method(method, kg, context, config)?;
    let augmented = patent::augment_graph(kg, &links)?;
    let candidates = patent::enumerate_candidate_patents(&augmented, config.clique_cap)?;
    let future = patent::future_patents(reference, kg.cutoff_year(), config.horizon);
    Ok(CellResult {
        link_accuracy: link_accuracy(&links, kg, reference)?,
        patent_accuracy: patent_accuracy(&candidates, &future),
        links,
        candidates,
    })
}

/// For each cutoff and method: build the cutoff graph, predict links,
/// enumerate candidate patents, and score both against the graph of the
/// final corpus year. Cutoffs at or after the final year yield skipped rows.
pub fn backtest(docs: &[Document], lexicon: &Lexicon, config: &BacktestConfig) -> Result<BacktestReport> {
    let reference_year = docs
        .iter()
        .map(|d| d.year)
        .max()
        .ok_or_else(|| EvalError::Config("backtest needs at least one document".into()))?;
    let cutoffs: Vec<i32> = if config.cutoffs.is_empty() {
        docs.iter().map(|d| d.year).filter(|&y| y < reference_year).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        config.cutoffs.clone()
    };
    let reference = build_graph(docs, lexicon, reference_year);
    let fingerprint = config.fingerprint();

    let cells: Vec<(i32, Method)> = cutoffs
        .iter()
        .flat_map(|&c| config.methods.iter().map(move |&m| (c, m)))
        .collect();
    let graphs: BTreeMap<i32, (KnowledgeGraph, BTreeMap<String, Vec<String>>)> = cutoffs
        .iter()
        .filter(|&&c| c < reference_year)
        .map(|&c| (c, (build_graph(docs, lexicon, c), first_context_sentences(docs, lexicon, c))))
        .collect();

    let rows = cells
        .par_iter()
        .map(|&(cutoff, method)| {
            let mut row = BacktestRow {
                cutoff_year: cutoff,
                method,
                new_links: 0,
                link_accuracy: Accuracy::ratio(0, 0),
                new_patents: 0,
                patent_accuracy: Accuracy::ratio(0, 0),
                skipped: None,
                fingerprint: fingerprint.clone(),
                seed: config.train.seed,
            };
            let Some((kg, context)) = graphs.get(&cutoff) else {
                let reason = format!("cutoff {cutoff} is not before the final corpus year {reference_year}");
                log::warn!("{reason}; skipping {method}");
                row.skipped = Some(reason);
                return Ok(row);
            };
            let cell = run_cell(method, kg, context, &reference, config)?;
            log::info!(
                "cutoff {cutoff} {method}: {} links ({:.4}), {} candidates ({:.4})",
                cell.links.len(),
                cell.link_accuracy.value,
                cell.candidates.len(),
                cell.patent_accuracy.value
            );
            row.new_links = cell.links.len();
            row.link_accuracy = cell.link_accuracy;
            row.new_patents = cell.candidates.len();
            row.patent_accuracy = cell.patent_accuracy;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BacktestReport {
        version: REPORT_FORMAT_VERSION,
        reference_year,
        config: BacktestConfig {
            cutoffs,
            ..config.clone()
        },
        rows,
    })
}
