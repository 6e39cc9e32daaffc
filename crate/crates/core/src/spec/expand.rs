//! Column planning for the design matrix `W = [W₁ | W₂]`.

use std::collections::{BTreeSet, HashMap};

use super::{Contrast, CsForm, ModelSpec, Term, VarianceFn};
use crate::error::{Error, Result};
use crate::frame::DesignFrame;
use crate::relatedness::{RelationshipMatrix, Relmats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    Mean,
    /// The whole term (factor terms, `ric`, `vm`).
    Main,
    /// `f_g` of the compound-symmetric total form.
    CsCommon,
    /// `δ_g` of the compound-symmetric total form.
    CsSpecific,
    /// `f_a` of the additive form.
    CsAdditive,
    /// `f_e` of the additive form.
    CsNonAdditive,
    /// `δ_a` of the additive form.
    CsAdditiveSpecific,
    /// `δ_e` of the additive form.
    CsNonAdditiveSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockPart {
    Objective,
    Linked,
    Static,
}

/// Maps a unit (and, for permute blocks, the frame row it currently
/// carries) to a column inside the block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockIndexer {
    Static(Vec<usize>),
    /// Column `unit_key[unit] * span + treat_key[row]`.
    Permute {
        unit_key: Vec<usize>,
        treat_key: Vec<usize>,
        span: usize,
    },
}

#[derive(Debug, Clone)]
pub struct ColumnBlock {
    /// `None` for the overall mean.
    pub term: Option<Term>,
    pub component: Component,
    pub part: BlockPart,
    pub fixed: bool,
    pub offset: usize,
    pub columns: usize,
    pub indexer: BlockIndexer,
    /// Columns reachable from levels present in the frame.
    pub present: Vec<bool>,
    /// Label of each treatment key (`span` entries; empty for static blocks).
    pub treat_labels: Vec<String>,
}

impl ColumnBlock {
    /// Column of unit `unit` when it carries frame row `row`, relative to the
    /// block offset.
    #[inline]
    pub fn column(&self, unit: usize, row: usize) -> usize {
        match &self.indexer {
            BlockIndexer::Static(c) => c[unit],
            BlockIndexer::Permute {
                unit_key,
                treat_key,
                span,
            } => unit_key[unit] * span + treat_key[row],
        }
    }

    pub fn label(&self) -> String {
        let base = self
            .term
            .as_ref()
            .map(|t| t.to_string())
            .unwrap_or_else(|| "(mean)".into());
        match self.component {
            Component::Mean | Component::Main => base,
            Component::CsCommon => format!("{base}/common"),
            Component::CsSpecific => format!("{base}/specific"),
            Component::CsAdditive => format!("{base}/additive"),
            Component::CsNonAdditive => format!("{base}/non-additive"),
            Component::CsAdditiveSpecific => format!("{base}/additive-specific"),
            Component::CsNonAdditiveSpecific => format!("{base}/non-additive-specific"),
        }
    }

    /// Treatment label of a column for permute blocks.
    pub fn treat_label(&self, col: usize) -> Option<&str> {
        match &self.indexer {
            BlockIndexer::Permute { span, .. } => {
                self.treat_labels.get(col % span).map(String::as_str)
            }
            BlockIndexer::Static(_) => None,
        }
    }

    pub fn span(&self) -> usize {
        match &self.indexer {
            BlockIndexer::Permute { span, .. } => *span,
            BlockIndexer::Static(_) => self.columns,
        }
    }
}

fn matrix_for<'a>(t: &Term, relmats: Option<&'a Relmats>) -> Result<Option<&'a RelationshipMatrix>> {
    match (&t.matrix, relmats) {
        (Some(name), Some(r)) => r
            .get(name)
            .map(Some)
            .ok_or_else(|| Error::MissingMatrix(name.clone())),
        _ => Ok(None),
    }
}

/// Plans the columns of every model term, permute blocks first (objective
/// then linked) followed by static blocks (mean, fixed, random).
///
/// Relationship-matrix terms span every individual of their matrix;
/// individuals absent from the frame get effects with no data. When
/// `relmats` is `None`, such terms fall back to the frame's levels.
pub fn expand_terms(
    spec: &ModelSpec,
    frame: &DesignFrame,
    relmats: Option<&Relmats>,
) -> Result<Vec<ColumnBlock>> {
    let n = frame.nrows();
    let mut objective = Vec::new();
    let mut linked = Vec::new();

    for t in &spec.permute {
        let is_obj = spec.is_objective(t);
        let part = if is_obj { BlockPart::Objective } else { BlockPart::Linked };
        match t.variance {
            VarianceFn::Fixed | VarianceFn::Idv => {
                let block = plain_permute_block(t, part, spec, frame)?;
                push(block, part, &mut objective, &mut linked);
            }
            VarianceFn::Ric | VarianceFn::Vm => {
                let g = frame.require(&t.factors[0])?;
                let (treat_key, treat_labels) = genotype_keys(t, frame, g, matrix_for(t, relmats)?)?;
                let span = treat_labels.len();
                let present = presence(&vec![0; n], &treat_key, span, span);
                push(
                    ColumnBlock {
                        term: Some(t.clone()),
                        component: Component::Main,
                        part,
                        fixed: false,
                        offset: 0,
                        columns: span,
                        indexer: BlockIndexer::Permute {
                            unit_key: vec![0; n],
                            treat_key,
                            span,
                        },
                        present,
                        treat_labels,
                    },
                    part,
                    &mut objective,
                    &mut linked,
                );
            }
            VarianceFn::CsGenetic => {
                let g = frame.require(&t.factors[0])?;
                let e = frame.require(&t.factors[1])?;
                let (treat_key, treat_labels) = genotype_keys(t, frame, g, matrix_for(t, relmats)?)?;
                let span = treat_labels.len();
                let env_key: Vec<usize> = (0..n).map(|u| frame.code(e, u)).collect();
                let n_env = frame.levels(e).len();
                let comps: &[(Component, bool)] = match (spec.cs_form, spec.contrast) {
                    (CsForm::Total, Contrast::Main) => {
                        &[(Component::CsCommon, true), (Component::CsSpecific, false)]
                    }
                    (CsForm::Total, Contrast::EnvMean) => {
                        &[(Component::CsCommon, true), (Component::CsSpecific, true)]
                    }
                    (CsForm::Additive, Contrast::Main) => &[
                        (Component::CsAdditive, true),
                        (Component::CsNonAdditive, false),
                        (Component::CsAdditiveSpecific, false),
                        (Component::CsNonAdditiveSpecific, false),
                    ],
                    (CsForm::Additive, Contrast::EnvMean) => &[
                        (Component::CsAdditive, true),
                        (Component::CsNonAdditive, false),
                        (Component::CsAdditiveSpecific, true),
                        (Component::CsNonAdditiveSpecific, false),
                    ],
                };
                for &(component, obj) in comps {
                    let specific = matches!(
                        component,
                        Component::CsSpecific
                            | Component::CsAdditiveSpecific
                            | Component::CsNonAdditiveSpecific
                    );
                    let unit_key = if specific { env_key.clone() } else { vec![0; n] };
                    let outer = if specific { n_env } else { 1 };
                    let present = presence(&unit_key, &treat_key, span, outer * span);
                    let p = if is_obj && obj { BlockPart::Objective } else { BlockPart::Linked };
                    push(
                        ColumnBlock {
                            term: Some(t.clone()),
                            component,
                            part: p,
                            fixed: false,
                            offset: 0,
                            columns: outer * span,
                            indexer: BlockIndexer::Permute {
                                unit_key,
                                treat_key: treat_key.clone(),
                                span,
                            },
                            present,
                            treat_labels: treat_labels.clone(),
                        },
                        p,
                        &mut objective,
                        &mut linked,
                    );
                }
            }
            VarianceFn::Dsum => unreachable!("dsum is rejected outside the residual"),
        }
    }

    let mut blocks: Vec<ColumnBlock> = objective.into_iter().chain(linked).collect();
    if !spec.omit_mean {
        blocks.push(ColumnBlock {
            term: None,
            component: Component::Mean,
            part: BlockPart::Static,
            fixed: true,
            offset: 0,
            columns: 1,
            indexer: BlockIndexer::Static(vec![0; n]),
            present: vec![true],
            treat_labels: Vec::new(),
        });
    }
    for t in spec.static_terms() {
        let cols: Vec<usize> = t
            .factors
            .iter()
            .map(|f| frame.require(f))
            .collect::<Result<_>>()?;
        let mut combos: HashMap<Vec<usize>, usize> = HashMap::new();
        let index: Vec<usize> = (0..n)
            .map(|u| {
                let key: Vec<usize> = cols.iter().map(|&c| frame.code(c, u)).collect();
                let next = combos.len();
                *combos.entry(key).or_insert(next)
            })
            .collect();
        let columns = combos.len();
        blocks.push(ColumnBlock {
            term: Some(t.clone()),
            component: Component::Main,
            part: BlockPart::Static,
            fixed: t.variance == VarianceFn::Fixed,
            offset: 0,
            columns,
            indexer: BlockIndexer::Static(index),
            present: vec![true; columns],
            treat_labels: Vec::new(),
        });
    }

    let mut offset = 0;
    for b in &mut blocks {
        b.offset = offset;
        offset += b.columns;
    }
    Ok(blocks)
}

fn push(b: ColumnBlock, part: BlockPart, obj: &mut Vec<ColumnBlock>, linked: &mut Vec<ColumnBlock>) {
    if part == BlockPart::Objective {
        obj.push(b)
    } else {
        linked.push(b)
    }
}

fn presence(unit_key: &[usize], treat_key: &[usize], span: usize, columns: usize) -> Vec<bool> {
    let units: BTreeSet<usize> = unit_key.iter().copied().collect();
    let treats: BTreeSet<usize> = treat_key.iter().copied().collect();
    let mut present = vec![false; columns];
    for &u in &units {
        for &t in &treats {
            present[u * span + t] = true;
        }
    }
    present
}

/// Matrix index of every row's genotype, and the matrix ids as labels.
fn genotype_keys(
    t: &Term,
    frame: &DesignFrame,
    col: usize,
    mat: Option<&RelationshipMatrix>,
) -> Result<(Vec<usize>, Vec<String>)> {
    match mat {
        Some(m) => {
            let map: Vec<usize> = frame
                .levels(col)
                .iter()
                .map(|l| {
                    m.index_of(l).ok_or_else(|| Error::UnknownLevel {
                        factor: t.factors[0].clone(),
                        level: l.clone(),
                        context: format!("relationship matrix `{}`", t.matrix.as_deref().unwrap_or("")),
                    })
                })
                .collect::<Result<_>>()?;
            let keys = frame.codes(col).iter().map(|&c| map[c as usize]).collect();
            Ok((keys, m.ids.clone()))
        }
        None => Ok((
            frame.codes(col).iter().map(|&c| c as usize).collect(),
            frame.levels(col).to_vec(),
        )),
    }
}

fn plain_permute_block(
    t: &Term,
    part: BlockPart,
    spec: &ModelSpec,
    frame: &DesignFrame,
) -> Result<ColumnBlock> {
    let n = frame.nrows();
    let mut anchored = Vec::new();
    let mut moving = Vec::new();
    for f in &t.factors {
        let c = frame.require(f)?;
        if spec.anchored.contains(f) {
            anchored.push(c);
        } else {
            moving.push(c);
        }
    }
    let radix = |cols: &[usize]| -> Vec<usize> { cols.iter().map(|&c| frame.levels(c).len()).collect() };
    let key = |cols: &[usize], row: usize| -> usize {
        cols.iter()
            .fold(0, |acc, &c| acc * frame.levels(c).len() + frame.code(c, row))
    };
    let span: usize = radix(&moving).iter().product();
    let outer: usize = radix(&anchored).iter().product();
    let unit_key: Vec<usize> = (0..n).map(|u| key(&anchored, u)).collect();
    let treat_key: Vec<usize> = (0..n).map(|r| key(&moving, r)).collect();
    let treat_labels: Vec<String> = (0..span)
        .map(|mut k| {
            let mut parts = Vec::with_capacity(moving.len());
            for &c in moving.iter().rev() {
                let nl = frame.levels(c).len();
                parts.push(frame.levels(c)[k % nl].clone());
                k /= nl;
            }
            parts.reverse();
            parts.join(":")
        })
        .collect();
    let present = presence(&unit_key, &treat_key, span, outer * span);
    Ok(ColumnBlock {
        term: Some(t.clone()),
        component: Component::Main,
        part,
        fixed: t.variance == VarianceFn::Fixed,
        offset: 0,
        columns: outer * span,
        indexer: BlockIndexer::Permute {
            unit_key,
            treat_key,
            span,
        },
        present,
        treat_labels,
    })
}
