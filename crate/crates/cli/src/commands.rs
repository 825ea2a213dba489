//! Subcommand bodies. Each command merges defaults, an optional `--config`
//! file and explicit flags (in that order) into one effective config, runs,
//! and writes that config next to its output as `<out>.config.json`.

use std::path::{Path, PathBuf};

use patent_kg::corpus::{first_context_sentences, parse_csv, parse_jsonl, write_jsonl, DocFormat, Document, Lexicon};
use patent_kg::eval::{backtest, generate_synthetic_corpus, BacktestConfig, SynthConfig};
use patent_kg::graph::{build_graph, KnowledgeGraph};
use patent_kg::link::{self, LinkModel, Method, PredictConfig, PredictedLinkSet, TrainConfig};
use patent_kg::patent::{self, DEFAULT_CLIQUE_CAP};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::{
    BuildKgArgs, EvaluateArgs, PredictFlags, PredictLinksArgs, PredictPatentsArgs, SynthArgs, SynthFlags, TrainArgs,
    TrainFlags,
};

type Result<T> = std::result::Result<T, CliError>;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    serde_json::from_str(&read(path)?).map_err(|e| CliError::Data(format!("config: {}: {e}", path.display())))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_sidecar<T: Serialize>(out: &Path, config: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    write(&sidecar_path(out, ".config.json"), &text)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl SynthFlags {
    fn any(&self) -> bool {
        self.synth_seed.is_some()
            || self.communities.is_some()
            || self.entities_per_community.is_some()
            || self.docs_per_year.is_some()
            || self.years.is_some()
            || self.start_year.is_some()
            || self.entities_per_doc.is_some()
            || self.mixing.is_some()
    }

    fn apply(&self, cfg: &mut SynthConfig) {
        set(&mut cfg.seed, self.synth_seed);
        set(&mut cfg.communities, self.communities);
        set(&mut cfg.entities_per_community, self.entities_per_community);
        set(&mut cfg.docs_per_year, self.docs_per_year);
        set(&mut cfg.years, self.years);
        set(&mut cfg.start_year, self.start_year);
        set(&mut cfg.entities_per_doc, self.entities_per_doc);
        set(&mut cfg.mixing, self.mixing);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.learning_rate, self.learning_rate);
        set(&mut cfg.margin, self.margin);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.seed);
        if let Some(d) = self.dim {
            cfg.model.f = d;
            cfg.model.f_prime = d;
            cfg.model.d = d;
        }
        set(&mut cfg.model.heads, self.heads);
        set(&mut cfg.model.layers, self.layers);
        cfg.model.seed = cfg.seed;
    }
}

impl PredictFlags {
    fn apply(&self, cfg: &mut PredictConfig, zeta: &mut Option<usize>) {
        set(&mut cfg.rho, self.rho);
        set(&mut cfg.candidates, self.candidates);
        set_opt(zeta, self.zeta);
    }
}

fn doc_format(format: &Option<String>, path: &Path) -> Result<DocFormat> {
    match format {
        Some(f) => f.parse().map_err(|e: patent_kg::corpus::CorpusError| CliError::Usage(e.to_string())),
        None => Ok(DocFormat::from_path(path)),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_corpus(docs: &Path, lexicon: &Path, format: &Option<String>) -> Result<(Vec<Document>, Lexicon)> {
    let docs = match doc_format(format, docs)? {
        DocFormat::Jsonl => parse_jsonl(&read(docs)?)?,
        DocFormat::Csv => parse_csv(&read(docs)?)?,
    };
    let lexicon = Lexicon::parse(&read(lexicon)?);
    Ok((docs, lexicon))
}

fn read_graph(path: &Path) -> Result<KnowledgeGraph> {
    Ok(KnowledgeGraph::from_json(&read(path)?)?)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthRun {
    out: Option<PathBuf>,
    lexicon_out: Option<PathBuf>,
    synth: SynthConfig,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg: SynthRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.out, args.out);
    set_opt(&mut cfg.lexicon_out, args.lexicon_out);
    args.synth.apply(&mut cfg.synth);
    let out = required(&cfg.out, "out")?;
    let lexicon_out = required(&cfg.lexicon_out, "lexicon-out")?;

    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    write(out, &write_jsonl(&corpus.documents))?;
    let mut terms = corpus.lexicon.terms().join("\n");
    terms.push('\n');
    write(lexicon_out, &terms)?;
    log::info!("wrote {} documents and {} terms", corpus.documents.len(), corpus.lexicon.len());
    write_sidecar(out, &cfg)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BuildKgRun {
    docs: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    format: Option<String>,
    cutoff: Option<i32>,
    out: Option<PathBuf>,
}

pub fn build_kg(args: BuildKgArgs) -> Result<()> {
    let mut cfg: BuildKgRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.docs, args.docs);
    set_opt(&mut cfg.lexicon, args.lexicon);
    set_opt(&mut cfg.format, args.format);
    set_opt(&mut cfg.cutoff, args.cutoff);
    set_opt(&mut cfg.out, args.out);
    let out = required(&cfg.out, "out")?;
    let cutoff = cfg.cutoff.ok_or_else(|| CliError::Usage("missing required --cutoff".into()))?;
    let (docs, lexicon) = read_corpus(required(&cfg.docs, "docs")?, required(&cfg.lexicon, "lexicon")?, &cfg.format)?;

    let kg = build_graph(&docs, &lexicon, cutoff);
    log::info!("graph at {cutoff}: {} entities, {} edges", kg.entity_count(), kg.edge_count());
    write(out, &kg.to_json())?;
    write_sidecar(out, &cfg)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRun {
    graph: Option<PathBuf>,
    method: Option<Method>,
    docs: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    format: Option<String>,
    out: Option<PathBuf>,
    train: TrainConfig,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.graph, args.graph);
    set_opt(&mut cfg.method, args.method);
    set_opt(&mut cfg.docs, args.docs);
    set_opt(&mut cfg.lexicon, args.lexicon);
    set_opt(&mut cfg.format, args.format);
    set_opt(&mut cfg.out, args.out);
    args.train.apply(&mut cfg.train);
    let out = required(&cfg.out, "out")?;
    let method = cfg.method.ok_or_else(|| CliError::Usage("missing required --method".into()))?;
    if !method.is_trained() {
        return Err(CliError::Usage(format!("method {method} has no model to train")));
    }
    let kg = read_graph(required(&cfg.graph, "graph")?)?;

    let context = match (&cfg.docs, &cfg.lexicon) {
        (Some(d), Some(l)) => {
            let (docs, lexicon) = read_corpus(d, l, &cfg.format)?;
            Some(first_context_sentences(&docs, &lexicon, kg.cutoff_year()))
        }
        (None, None) => {
            if method == Method::Cgat {
                log::warn!("no corpus given; context sentences fall back to entity terms");
            }
            None
        }
        _ => return Err(CliError::Usage("--docs and --lexicon must be given together".into())),
    };
    let model = link::train(method, &kg, &cfg.train, context.as_ref())?;
    log::info!(
        "{method}: loss {:.6} -> {:.6}",
        model.trace.initial_loss,
        model.trace.final_loss
    );
    write(out, &model.to_json()?)?;
    write_sidecar(out, &cfg)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PredictLinksRun {
    graph: Option<PathBuf>,
    method: Option<Method>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    predict: PredictConfig,
    zeta: Option<usize>,
}

pub fn predict_links(args: PredictLinksArgs) -> Result<()> {
    let mut cfg: PredictLinksRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.graph, args.graph);
    set_opt(&mut cfg.method, args.method);
    set_opt(&mut cfg.model, args.model);
    set_opt(&mut cfg.out, args.out);
    args.predict.apply(&mut cfg.predict, &mut cfg.zeta);
    let out = required(&cfg.out, "out")?;
    let kg = read_graph(required(&cfg.graph, "graph")?)?;

    let links = match (cfg.method, &cfg.model) {
        (Some(Method::Cnm), None) => link::cnm_predict(&kg, cfg.zeta)?,
        (Some(Method::Cnm), Some(_)) => return Err(CliError::Usage("cnm does not use a model".into())),
        (method, Some(path)) => {
            let model = LinkModel::from_json(&read(path)?)?;
            if let Some(m) = method.filter(|m| *m != model.method) {
                return Err(CliError::Usage(format!("--method {m} but the model was trained as {}", model.method)));
            }
            link::predict_links(&kg, &model, &cfg.predict)?
        }
        (Some(m), None) => return Err(CliError::Usage(format!("method {m} needs --model"))),
        (None, None) => return Err(CliError::Usage("give --method cnm or --model".into())),
    };
    log::info!("{} predicted links", links.len());
    write(out, &links.to_json(&kg)?)?;
    write_sidecar(out, &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PredictPatentsRun {
    graph: Option<PathBuf>,
    links: Option<PathBuf>,
    out: Option<PathBuf>,
    clique_cap: usize,
    future: Option<PathBuf>,
    horizon: Option<i32>,
}

impl Default for PredictPatentsRun {
    fn default() -> Self {
        PredictPatentsRun {
            graph: None,
            links: None,
            out: None,
            clique_cap: DEFAULT_CLIQUE_CAP,
            future: None,
            horizon: None,
        }
    }
}

pub fn predict_patents(args: PredictPatentsArgs) -> Result<()> {
    let mut cfg: PredictPatentsRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.graph, args.graph);
    set_opt(&mut cfg.links, args.links);
    set_opt(&mut cfg.out, args.out);
    set(&mut cfg.clique_cap, args.clique_cap);
    set_opt(&mut cfg.future, args.future);
    set_opt(&mut cfg.horizon, args.horizon);
    let out = required(&cfg.out, "out")?;
    let kg = read_graph(required(&cfg.graph, "graph")?)?;
    let links_path = required(&cfg.links, "links")?;
    let links = PredictedLinkSet::from_json(&read(links_path)?, &kg)?;

    let augmented = patent::augment_graph(&kg, &links)?;
    let candidates = patent::enumerate_candidate_patents(&augmented, cfg.clique_cap)?;
    let flags = match &cfg.future {
        Some(path) => {
            let future = read_graph(path)?;
            let patents = patent::future_patents(&future, kg.cutoff_year(), cfg.horizon);
            Some(candidates.iter().map(|c| patent::validate_patent(c, &patents)).collect::<Vec<_>>())
        }
        None => None,
    };
    log::info!("{} candidate patents", candidates.len());
    write(
        out,
        &patent::candidates_to_json(kg.cutoff_year(), links.method, &candidates, flags.as_deref())?,
    )?;
    write_sidecar(out, &cfg)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvaluateRun {
    docs: Option<PathBuf>,
    lexicon: Option<PathBuf>,
    format: Option<String>,
    /// Generate the corpus instead of reading one.
    synth: Option<SynthConfig>,
    out: Option<PathBuf>,
    backtest: BacktestConfig,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateRun = load_config(args.config.as_deref())?;
    set_opt(&mut cfg.docs, args.docs);
    set_opt(&mut cfg.lexicon, args.lexicon);
    set_opt(&mut cfg.format, args.format);
    set_opt(&mut cfg.out, args.out);
    if args.synth.any() {
        args.synth.apply(cfg.synth.get_or_insert_with(SynthConfig::default));
    }
    let bt = &mut cfg.backtest;
    set(&mut bt.methods, args.methods);
    set(&mut bt.cutoffs, args.cutoffs);
    set_opt(&mut bt.horizon, args.horizon);
    set(&mut bt.clique_cap, args.clique_cap);
    args.train.apply(&mut bt.train);
    args.predict.apply(&mut bt.predict, &mut bt.zeta);
    let out = required(&cfg.out, "out")?;

    let (docs, lexicon) = match (&cfg.synth, &cfg.docs, &cfg.lexicon) {
        (Some(s), None, None) => {
            let corpus = generate_synthetic_corpus(s)?;
            (corpus.documents, corpus.lexicon)
        }
        (None, Some(d), Some(l)) => read_corpus(d, l, &cfg.format)?,
        (Some(_), _, _) => return Err(CliError::Usage("give either a synthetic corpus or --docs, not both".into())),
        _ => return Err(CliError::Usage("give --docs and --lexicon, or synthetic corpus settings".into())),
    };
    let report = backtest(&docs, &lexicon, &cfg.backtest)?;
    write(out, &report.to_csv())?;
    let mut json = report.to_json();
    json.push('\n');
    write(&sidecar_path(out, ".json"), &json)?;
    write_sidecar(out, &cfg)
}
