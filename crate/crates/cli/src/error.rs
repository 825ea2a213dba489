use patent_kg::corpus::CorpusError;
use patent_kg::encoders::EncodeError;
use patent_kg::eval::EvalError;
use patent_kg::graph::GraphError;
use patent_kg::link::LinkError;
use patent_kg::num::NumError;
use patent_kg::patent::PatentError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("io: {}: {e}", path.display()))
    }
}

fn num(module: &str, e: &NumError) -> CliError {
    let msg = format!("{module}: {e}");
    match e {
        NumError::NonFinite(_) => CliError::Numeric(msg),
        _ => CliError::Data(msg),
    }
}

fn encode(module: &str, e: &EncodeError) -> CliError {
    match e {
        EncodeError::Num(n) => num(module, n),
        _ => CliError::Data(format!("{module}: {e}")),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(format!("corpus: {e}"))
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(format!("graph: {e}"))
    }
}

impl From<NumError> for CliError {
    fn from(e: NumError) -> Self {
        num("numcore", &e)
    }
}

impl From<LinkError> for CliError {
    fn from(e: LinkError) -> Self {
        match &e {
            LinkError::Num(n) => num("link", n),
            LinkError::Encode(n) => encode("link", n),
            LinkError::Diverged { .. } => CliError::Numeric(format!("link: {e}")),
            _ => CliError::Data(format!("link: {e}")),
        }
    }
}

impl From<PatentError> for CliError {
    fn from(e: PatentError) -> Self {
        CliError::Data(format!("patent: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Link(l) => l.into(),
            EvalError::Patent(p) => p.into(),
            other => CliError::Data(format!("eval: {other}")),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("config: {e}"))
    }
}
