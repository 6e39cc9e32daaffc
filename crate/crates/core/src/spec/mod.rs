//! Design specifications: model formulae, variance functions, parameter
//! values, the permute/static partition and interchange constraints.
//!
//! A specification is a TOML document:
//!
//! ```toml
//! [fixed]
//! terms = []            # overall mean is implicit unless omit_mean = true
//!
//! [random]
//! terms = ["ric(name, Ainv)", "Run"]
//!
//! [residual]
//! term = "units"        # or "dsum(units | repF)"
//!
//! [permute]
//! terms = ["ric(name, Ainv)"]
//! swap = "swp"
//!
//! [params]
//! "ric(name, Ainv)" = [0.234, 0.039]
//! Run = [0.400]
//! units = [0.874]
//! ```
//!
//! Factor levels are always read from the accompanying [`DesignFrame`].

mod expand;
mod term;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use expand::{expand_terms, BlockIndexer, BlockPart, ColumnBlock, Component};
pub use term::{Term, VarianceFn, UNITS};

use crate::error::{Error, Result};
use crate::frame::{DesignFrame, Factor, FactorKind};

/// Which of the two equivalent compound-symmetric parameterizations to use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsForm {
    /// Common genetic factor `f_g` plus pooled site-specific effects.
    #[default]
    Total,
    /// Separate additive and non-additive factors and specific effects.
    Additive,
}

/// Objective contrasts for a compound-symmetric term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// Genotype main effects (`f_g`, or `f_a` in the additive form).
    #[default]
    Main,
    /// Genotype effects averaged over environments, `f + mean_j δ_j`.
    EnvMean,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pedigree: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grm: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
}

/// Search settings as written in a document; unset fields take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenure: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rw_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stagnation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partners: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refactor_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    List(Vec<f64>),
    ByLevel(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSection {
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub omit_mean: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSection {
    #[serde(default)]
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualSection {
    #[serde(default = "default_residual")]
    pub term: String,
}

impl Default for ResidualSection {
    fn default() -> Self {
        ResidualSection {
            term: default_residual(),
        }
    }
}

fn default_residual() -> String {
    UNITS.to_owned()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermuteSection {
    #[serde(default)]
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reorder: Vec<String>,
    /// Factors of permute terms that stay with the unit instead of moving.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anchored: Vec<String>,
    /// Factors over which each treatment must stay as evenly spread as
    /// possible (at most once per level when replication allows).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub binary: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_exclude: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cs_form: Option<CsForm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<Contrast>,
}

/// Raw specification document as read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    #[serde(default)]
    pub fixed: FixedSection,
    #[serde(default)]
    pub random: RandomSection,
    #[serde(default)]
    pub residual: ResidualSection,
    #[serde(default)]
    pub permute: PermuteSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub matrices: BTreeMap<String, MatrixSource>,
}

impl SpecDocument {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::SpecSyntax(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::SpecSyntax(e.to_string()))
    }
}

/// A validated model specification bound to a design frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub fixed: Vec<Term>,
    pub random: Vec<Term>,
    pub residual: Term,
    pub permute: Vec<Term>,
    pub objective: Vec<Term>,
    pub swap: Option<String>,
    pub reorder: Vec<String>,
    pub anchored: Vec<String>,
    pub binary: Vec<String>,
    pub objective_exclude: Vec<String>,
    pub omit_mean: bool,
    pub cs_form: CsForm,
    pub contrast: Contrast,
    /// Variance parameters keyed by term label (`units` for the residual).
    /// Grouped residuals list one value per group level in frame order.
    pub params: BTreeMap<String, Vec<f64>>,
    pub search: SearchSection,
    pub matrices: BTreeMap<String, MatrixSource>,
    pub factors: Vec<Factor>,
}

/// Parses a TOML specification and validates it against `frame`.
pub fn parse_spec(text: &str, frame: &DesignFrame) -> Result<ModelSpec> {
    ModelSpec::from_document(&SpecDocument::from_toml(text)?, frame)
}

/// Every `(permute term, static term)` pair where the static term is
/// marginal to the permute term. The overall mean is never listed.
pub fn validate_marginality(spec: &ModelSpec) -> Vec<(Term, Term)> {
    marginality_pairs(&spec.permute, &spec.static_terms())
}

fn marginality_pairs(permute: &[Term], statics: &[Term]) -> Vec<(Term, Term)> {
    let mut out = Vec::new();
    for p in permute {
        let pset: BTreeSet<&str> = p.factors.iter().map(String::as_str).collect();
        for s in statics {
            let sset: BTreeSet<&str> = s.factors.iter().map(String::as_str).collect();
            if !sset.is_empty() && sset.len() < pset.len() && sset.is_subset(&pset) {
                out.push((p.clone(), s.clone()));
            }
        }
    }
    out
}

impl ModelSpec {
    pub fn from_document(doc: &SpecDocument, frame: &DesignFrame) -> Result<ModelSpec> {
        let fixed = parse_terms(&doc.fixed.terms, VarianceFn::Fixed)?;
        for t in &fixed {
            if t.variance != VarianceFn::Fixed {
                return Err(Error::InvalidTerm(format!(
                    "fixed term `{t}` cannot carry a variance function"
                )));
            }
        }
        let random = parse_terms(&doc.random.terms, VarianceFn::Idv)?;
        for t in &random {
            if t.variance == VarianceFn::Dsum {
                return Err(Error::InvalidTerm(format!("dsum is a residual model, found `{t}`")));
            }
            if t.is_units() {
                return Err(Error::InvalidTerm("`units` is reserved for the residual".into()));
            }
        }
        let residual = Term::parse(&doc.residual.term, VarianceFn::Idv)?;
        if !residual.is_units()
            || !matches!(residual.variance, VarianceFn::Idv | VarianceFn::Dsum)
        {
            return Err(Error::InvalidTerm(format!(
                "residual must be `units` or `dsum(units | g)`, found `{residual}`"
            )));
        }

        let mut seen = BTreeSet::new();
        for t in fixed.iter().chain(&random) {
            if t.factors.iter().any(|f| f == UNITS) {
                return Err(Error::InvalidTerm("`units` is reserved for the residual".into()));
            }
            if !seen.insert(t.label()) {
                return Err(Error::DuplicateTerm(t.label()));
            }
        }

        let model_term = |text: &str| -> Result<Term> {
            let probe = Term::parse(text, VarianceFn::Idv)?;
            fixed
                .iter()
                .chain(&random)
                .find(|t| t.label() == probe.label())
                .cloned()
                .ok_or_else(|| Error::PermuteNotInModel(probe.to_string()))
        };
        let permute = doc
            .permute
            .terms
            .iter()
            .map(|s| model_term(s))
            .collect::<Result<Vec<_>>>()?;
        if permute.is_empty() {
            return Err(Error::EmptyPermute);
        }
        let objective = match &doc.permute.objective {
            None => permute.clone(),
            Some(list) => list
                .iter()
                .map(|s| {
                    let t = model_term(s)?;
                    if permute.iter().any(|p| p.label() == t.label()) {
                        Ok(t)
                    } else {
                        Err(Error::ObjectiveNotPermuted(t.to_string()))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        };

        let spec = ModelSpec {
            fixed,
            random,
            residual,
            permute,
            objective,
            swap: doc.permute.swap.clone(),
            reorder: doc.permute.reorder.clone(),
            anchored: doc.permute.anchored.clone(),
            binary: doc.permute.binary.clone(),
            objective_exclude: doc.permute.objective_exclude.clone(),
            omit_mean: doc.fixed.omit_mean,
            cs_form: doc.permute.cs_form.unwrap_or_default(),
            contrast: doc.permute.contrast.unwrap_or_default(),
            params: BTreeMap::new(),
            search: doc.search.clone(),
            matrices: doc.matrices.clone(),
            factors: Vec::new(),
        };
        let violations = validate_marginality(&spec);
        if !violations.is_empty() {
            return Err(Error::Marginality(
                violations
                    .into_iter()
                    .map(|(p, s)| (p.to_string(), s.to_string()))
                    .collect(),
            ));
        }
        let factors = spec.bind_factors(frame)?;
        let params = spec.resolve_params(&doc.params, frame)?;
        let spec = ModelSpec {
            factors,
            params,
            ..spec
        };

        Ok(spec)
    }

    /// Model terms that are not permuted (the overall mean excluded).
    pub fn static_terms(&self) -> Vec<Term> {
        self.fixed
            .iter()
            .chain(&self.random)
            .filter(|t| !self.is_permute(t))
            .cloned()
            .collect()
    }

    pub fn is_permute(&self, t: &Term) -> bool {
        self.permute.iter().any(|p| p.label() == t.label())
    }

    pub fn is_objective(&self, t: &Term) -> bool {
        self.objective.iter().any(|p| p.label() == t.label())
    }

    pub fn params_of(&self, t: &Term) -> &[f64] {
        let key = if t.is_units() { UNITS.to_owned() } else { t.label() };
        self.params.get(&key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn factor(&self, name: &str) -> Option<&Factor> {
        self.factors.iter().find(|f| f.name == name)
    }

    /// Factors whose values move with the permuted rows.
    pub fn treatment_factors(&self) -> Vec<String> {
        self.factors
            .iter()
            .filter(|f| f.kind == FactorKind::Treatment)
            .map(|f| f.name.clone())
            .collect()
    }

    fn bind_factors(&self, frame: &DesignFrame) -> Result<Vec<Factor>> {
        let known = |name: &str| -> Result<()> {
            frame.require(name).map(|_| ())
        };
        let mut treatment: Vec<String> = Vec::new();
        for t in &self.permute {
            for f in &t.factors {
                known(f)?;
                if !self.anchored.contains(f) && !treatment.contains(f) {
                    treatment.push(f.clone());
                }
            }
            if t.factors.iter().all(|f| self.anchored.contains(f)) {
                return Err(Error::InvalidTerm(format!(
                    "permute term `{t}` has no moving factor"
                )));
            }
        }
        for f in &self.reorder {
            known(f)?;
            if !treatment.contains(f) {
                treatment.push(f.clone());
            }
        }
        for f in self.anchored.iter().chain(&self.binary) {
            known(f)?;
        }
        if let Some(s) = &self.swap {
            known(s)?;
            if treatment.contains(s) {
                return Err(Error::InvalidTerm(format!("swap factor `{s}` cannot move")));
            }
        }
        if let Some(g) = &self.residual.group {
            known(g)?;
        }
        for t in self.static_terms() {
            if matches!(
                t.variance,
                VarianceFn::Ric | VarianceFn::Vm | VarianceFn::CsGenetic
            ) {
                return Err(Error::InvalidTerm(format!(
                    "relationship-matrix term `{t}` must be in the permute set"
                )));
            }
            for f in &t.factors {
                known(f)?;
                if treatment.contains(f) {
                    return Err(Error::InvalidTerm(format!(
                        "static term `{t}` uses moving factor `{f}`"
                    )));
                }
            }
        }
        for t in &self.permute {
            if t.variance == VarianceFn::CsGenetic && !self.anchored.contains(&t.factors[1]) {
                return Err(Error::InvalidTerm(format!(
                    "environment factor of `{t}` must be listed in permute.anchored"
                )));
            }
            if t.variance == VarianceFn::CsGenetic && self.anchored.contains(&t.factors[0]) {
                return Err(Error::InvalidTerm(format!("genotype factor of `{t}` must move")));
            }
        }

        Ok(frame
            .names()
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let kind = if treatment.contains(name) {
                    FactorKind::Treatment
                } else if self.swap.as_deref() == Some(name) {
                    FactorKind::Swap
                } else if self.residual.group.as_deref() == Some(name) {
                    FactorKind::Grouping
                } else {
                    FactorKind::Plot
                };
                Factor {
                    name: name.clone(),
                    levels: frame.levels(c).to_vec(),
                    kind,
                }
            })
            .collect())
    }

    fn resolve_params(
        &self,
        raw: &BTreeMap<String, ParamValue>,
        frame: &DesignFrame,
    ) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut by_label: BTreeMap<String, &ParamValue> = BTreeMap::new();
        for (key, value) in raw {
            let label = Term::parse(key, VarianceFn::Idv)?.label();
            if by_label.insert(label.clone(), value).is_some() {
                return Err(Error::DuplicateTerm(format!("params for `{label}`")));
            }
        }
        let mut out = BTreeMap::new();
        let terms: Vec<&Term> = self
            .fixed
            .iter()
            .chain(&self.random)
            .chain(std::iter::once(&self.residual))
            .collect();
        for t in terms {
            let label = if t.is_units() { UNITS.to_owned() } else { t.label() };
            let raw_value = by_label.remove(&label);
            let values: Vec<f64> = match (t.variance, raw_value) {
                (VarianceFn::Fixed, None) => continue,
                (VarianceFn::Fixed, Some(_)) => {
                    return Err(Error::ParamCount {
                        term: t.to_string(),
                        expected: 0,
                        found: 1,
                    })
                }
                (VarianceFn::Dsum, v) => {
                    let g = t.group.as_deref().unwrap_or_default();
                    let levels = frame.levels(frame.require(g)?);
                    match v {
                        Some(ParamValue::ByLevel(map)) => {
                            if map.len() != levels.len() {
                                return Err(Error::ParamCount {
                                    term: t.to_string(),
                                    expected: levels.len(),
                                    found: map.len(),
                                });
                            }
                            levels
                                .iter()
                                .map(|l| {
                                    map.get(l).copied().ok_or_else(|| Error::UnknownLevel {
                                        factor: g.to_owned(),
                                        level: l.clone(),
                                        context: format!("params of `{t}`"),
                                    })
                                })
                                .collect::<Result<_>>()?
                        }
                        other => {
                            let v = flat(t, other)?;
                            if v.len() != levels.len() {
                                return Err(Error::ParamCount {
                                    term: t.to_string(),
                                    expected: levels.len(),
                                    found: v.len(),
                                });
                            }
                            v
                        }
                    }
                }
                (vf, v) => {
                    let v = flat(t, v)?;
                    let expected = vf.param_count().unwrap_or(0);
                    if v.len() != expected {
                        return Err(Error::ParamCount {
                            term: t.to_string(),
                            expected,
                            found: v.len(),
                        });
                    }
                    v
                }
            };
            if let Some(&bad) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                return Err(Error::NonPositiveParam {
                    term: t.to_string(),
                    value: bad,
                });
            }
            out.insert(label, values);
        }
        if let Some(extra) = by_label.keys().next() {
            return Err(Error::UnknownFactor(format!("params given for unknown term `{extra}`")));
        }
        Ok(out)
    }

    /// Serializes back to a document; `from_document(to_document(s))`
    /// reproduces `s` for the same frame.
    pub fn to_document(&self) -> SpecDocument {
        let same_as_permute = self.objective.len() == self.permute.len()
            && self.objective.iter().zip(&self.permute).all(|(a, b)| a == b);
        let mut params = BTreeMap::new();
        for t in self
            .fixed
            .iter()
            .chain(&self.random)
            .chain(std::iter::once(&self.residual))
        {
            let v = self.params_of(t);
            if v.is_empty() {
                continue;
            }
            let key = if t.is_units() { UNITS.to_owned() } else { t.to_string() };
            let value = match (&t.variance, &t.group) {
                (VarianceFn::Dsum, Some(g)) => {
                    let levels = self.factor(g).map(|f| f.levels.clone()).unwrap_or_default();
                    ParamValue::ByLevel(levels.into_iter().zip(v.iter().copied()).collect())
                }
                _ => ParamValue::List(v.to_vec()),
            };
            params.insert(key, value);
        }
        SpecDocument {
            fixed: FixedSection {
                terms: self.fixed.iter().map(Term::to_string).collect(),
                omit_mean: self.omit_mean,
            },
            random: RandomSection {
                terms: self.random.iter().map(Term::to_string).collect(),
            },
            residual: ResidualSection {
                term: self.residual.to_string(),
            },
            permute: PermuteSection {
                terms: self.permute.iter().map(Term::to_string).collect(),
                objective: (!same_as_permute)
                    .then(|| self.objective.iter().map(Term::to_string).collect()),
                swap: self.swap.clone(),
                reorder: self.reorder.clone(),
                anchored: self.anchored.clone(),
                binary: self.binary.clone(),
                objective_exclude: self.objective_exclude.clone(),
                cs_form: Some(self.cs_form),
                contrast: Some(self.contrast),
            },
            search: self.search.clone(),
            params,
            matrices: self.matrices.clone(),
        }
    }
}

fn parse_terms(list: &[String], default: VarianceFn) -> Result<Vec<Term>> {
    list.iter()
        .filter(|s| !matches!(s.trim(), "1" | "mean"))
        .map(|s| Term::parse(s, default))
        .collect()
}

fn flat(t: &Term, v: Option<&ParamValue>) -> Result<Vec<f64>> {
    match v {
        None => Err(Error::ParamCount {
            term: t.to_string(),
            expected: t.variance.param_count().unwrap_or(1),
            found: 0,
        }),
        Some(ParamValue::Scalar(x)) => Ok(vec![*x]),
        Some(ParamValue::List(v)) => Ok(v.clone()),
        Some(ParamValue::ByLevel(_)) => Err(Error::SpecSyntax(format!(
            "params for `{t}` must be a list"
        ))),
    }
}
