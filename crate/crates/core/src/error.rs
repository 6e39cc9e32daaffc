use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("spec document: {0}")]
    SpecSyntax(String),

    #[error("cannot parse term `{term}`: {reason}")]
    TermSyntax { term: String, reason: String },

    #[error("unknown factor `{0}`")]
    UnknownFactor(String),

    #[error("term `{0}` requires a relationship matrix reference")]
    MissingMatrixRef(String),

    #[error("term `{0}` requires a grouping factor")]
    MissingGroupFactor(String),

    #[error("term `{term}` expects {expected} variance parameter(s), found {found}")]
    ParamCount {
        term: String,
        expected: usize,
        found: usize,
    },

    #[error("variance parameter for `{term}` must be strictly positive, found {value}")]
    NonPositiveParam { term: String, value: f64 },

    #[error("permute set is empty")]
    EmptyPermute,

    #[error("permute term `{0}` is not a fixed or random model term")]
    PermuteNotInModel(String),

    #[error("objective term `{0}` is not in the permute set")]
    ObjectiveNotPermuted(String),

    #[error("term `{0}` appears more than once in the model")]
    DuplicateTerm(String),

    #[error("invalid term usage: {0}")]
    InvalidTerm(String),

    #[error("marginality violation: {}", format_pairs(.0))]
    Marginality(Vec<(String, String)>),

    #[error("level `{level}` of factor `{factor}` not found in {context}")]
    UnknownLevel {
        factor: String,
        level: String,
        context: String,
    },

    #[error("relationship matrix `{0}` was not supplied")]
    MissingMatrix(String),

    #[error("pedigree: {0}")]
    Pedigree(String),

    #[error("relationship matrix is not symmetric (max |a_ij - a_ji| = {0:e})")]
    Asymmetric(f64),

    #[error("relationship matrix is not positive definite{0}")]
    Indefinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("objective contrasts are not estimable under the current design")]
    Inestimable,

    #[error("search: {0}")]
    Search(String),

    #[error("swap between units {0} and {1} crosses swap classes")]
    CrossClassSwap(usize, usize),

    #[error("replication scheme: {0}")]
    Scheme(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("efficiency study: {0}")]
    Efficiency(String),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(p, s)| format!("static `{s}` is marginal to permute `{p}`"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }
}
