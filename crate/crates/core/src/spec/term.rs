use std::fmt;

use crate::error::{Error, Result};

/// Name of the reserved equality factor: one level per unit.
pub const UNITS: &str = "units";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceFn {
    Fixed,
    /// Scaled identity.
    Idv,
    /// `σ²_a·G + σ²_e·I` over the levels of a relationship matrix.
    Ric,
    /// `σ²·G` over the levels of a relationship matrix.
    Vm,
    /// Residual with one variance per level of a grouping factor.
    Dsum,
    /// Compound-symmetric genotype-by-environment model with relatedness.
    CsGenetic,
}

impl VarianceFn {
    /// Number of variance parameters; `None` for `Dsum` where it depends on
    /// the number of group levels.
    pub fn param_count(self) -> Option<usize> {
        match self {
            VarianceFn::Fixed => Some(0),
            VarianceFn::Idv | VarianceFn::Vm => Some(1),
            VarianceFn::Ric => Some(2),
            VarianceFn::CsGenetic => Some(4),
            VarianceFn::Dsum => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Term {
    pub factors: Vec<String>,
    pub variance: VarianceFn,
    pub matrix: Option<String>,
    pub group: Option<String>,
}

impl Term {
    pub fn factor(name: &str, variance: VarianceFn) -> Term {
        Term {
            factors: vec![name.to_owned()],
            variance,
            matrix: None,
            group: None,
        }
    }

    /// Factor label identifying the term inside a model, e.g. `Zone:Table`.
    pub fn label(&self) -> String {
        self.factors.join(":")
    }

    pub fn is_units(&self) -> bool {
        self.factors.len() == 1 && self.factors[0] == UNITS
    }

    /// Parses one term. `default` is the variance function given to bare
    /// factor terms (`Fixed` in the fixed formula, `Idv` elsewhere).
    pub fn parse(text: &str, default: VarianceFn) -> Result<Term> {
        let s = text.trim();
        let err = |reason: &str| Error::TermSyntax {
            term: text.to_owned(),
            reason: reason.to_owned(),
        };
        if s.is_empty() {
            return Err(err("empty term"));
        }
        let Some(open) = s.find('(') else {
            return Ok(Term {
                factors: parse_factors(s).map_err(|r| err(&r))?,
                variance: default,
                matrix: None,
                group: None,
            });
        };
        if !s.ends_with(')') {
            return Err(err("unbalanced parentheses"));
        }
        let func = s[..open].trim();
        let inner = &s[open + 1..s.len() - 1];
        match func {
            "idv" => Ok(Term {
                factors: parse_factors(inner).map_err(|r| err(&r))?,
                variance: VarianceFn::Idv,
                matrix: None,
                group: None,
            }),
            "ric" | "vm" | "cs" => {
                let variance = match func {
                    "ric" => VarianceFn::Ric,
                    "vm" => VarianceFn::Vm,
                    _ => VarianceFn::CsGenetic,
                };
                let mut parts = inner.splitn(2, ',');
                let factors = parse_factors(parts.next().unwrap_or("")).map_err(|r| err(&r))?;
                let matrix = parts
                    .next()
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(str::to_owned);
                let term = Term {
                    factors,
                    variance,
                    matrix,
                    group: None,
                };
                if term.matrix.is_none() {
                    return Err(Error::MissingMatrixRef(term.to_string()));
                }
                if variance == VarianceFn::CsGenetic && term.factors.len() != 2 {
                    return Err(err("cs() takes `genotype:environment`"));
                }
                if variance != VarianceFn::CsGenetic && term.factors.len() != 1 {
                    return Err(err("relationship-matrix terms take a single factor"));
                }
                Ok(term)
            }
            "dsum" => {
                let mut parts = inner.splitn(2, '|');
                let factors = parse_factors(parts.next().unwrap_or("")).map_err(|r| err(&r))?;
                let group = parts
                    .next()
                    .map(str::trim)
                    .filter(|g| !g.is_empty())
                    .map(str::to_owned);
                let term = Term {
                    factors,
                    variance: VarianceFn::Dsum,
                    matrix: None,
                    group,
                };
                match &term.group {
                    None => Err(Error::MissingGroupFactor(term.to_string())),
                    Some(g) if !is_ident(g) => Err(err("bad grouping factor name")),
                    Some(_) => Ok(term),
                }
            }
            other => Err(err(&format!("unknown variance function `{other}`"))),
        }
    }
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '.')
}

fn parse_factors(s: &str) -> std::result::Result<Vec<String>, String> {
    let factors: Vec<String> = s.split(':').map(|f| f.trim().to_owned()).collect();
    if factors.iter().any(|f| !is_ident(f)) {
        return Err(format!("bad factor list `{}`", s.trim()));
    }
    let mut sorted = factors.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != factors.len() {
        return Err("factor repeated in interaction".into());
    }
    Ok(factors)
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = self.label();
        match self.variance {
            VarianceFn::Fixed | VarianceFn::Idv => write!(f, "{label}"),
            VarianceFn::Ric => write!(f, "ric({label}, {})", self.matrix.as_deref().unwrap_or("")),
            VarianceFn::Vm => write!(f, "vm({label}, {})", self.matrix.as_deref().unwrap_or("")),
            VarianceFn::CsGenetic => {
                write!(f, "cs({label}, {})", self.matrix.as_deref().unwrap_or(""))
            }
            VarianceFn::Dsum => write!(f, "dsum({label} | {})", self.group.as_deref().unwrap_or("")),
        }
    }
}
