//! Reading specification documents and the relationship matrices they use.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use seldesign::relatedness::{ingest_grm, read_grm, Pedigree, RelationshipMatrix, Relmats};
use seldesign::spec::{MatrixSource, SpecDocument, Term, VarianceFn};
use seldesign::stages::{SesePipeline, Stage2Section, Stage3Section};

const DEFAULT_JITTER: f64 = 1e-6;

pub enum SpecFile {
    Single(SpecDocument),
    Pipeline(SesePipeline),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineFile {
    #[serde(default)]
    matrices: BTreeMap<String, MatrixSource>,
    stage2: Stage2Section,
    stage3: Stage3Section,
}

pub fn load_spec(path: &Path) -> Result<SpecFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: toml::Table = toml::from_str(&text).with_context(|| format!("{}: not a TOML document", path.display()))?;
    if value.contains_key("stage2") || value.contains_key("stage3") {
        let p: PipelineFile = toml::from_str(&text).with_context(|| format!("{}: bad pipeline spec", path.display()))?;
        let mut stage3 = p.stage3;
        for doc in [&mut stage3.step1, &mut stage3.step2] {
            for (k, v) in &p.matrices {
                doc.matrices.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
        Ok(SpecFile::Pipeline(SesePipeline { stage2: p.stage2, stage3 }))
    } else {
        Ok(SpecFile::Single(
            SpecDocument::from_toml(&text).with_context(|| format!("{}: bad model spec", path.display()))?,
        ))
    }
}

fn referenced(doc: &SpecDocument, names: &mut Vec<String>) -> Result<()> {
    for text in doc.fixed.terms.iter().chain(&doc.random.terms) {
        let t = Term::parse(text, VarianceFn::Idv)?;
        if let Some(m) = t.matrix {
            if !names.contains(&m) {
                names.push(m);
            }
        }
    }
    Ok(())
}

pub struct LoadedMatrices {
    pub mats: Relmats,
    pub sources: Vec<PathBuf>,
}

/// Loads every matrix the spec refers to: from its `[matrices.NAME]` entry,
/// with paths relative to the spec file, or else from `--pedigree`/`--grm`.
pub fn load_matrices(
    spec: &SpecFile,
    spec_path: &Path,
    pedigree: Option<&Path>,
    grm: Option<&Path>,
) -> Result<LoadedMatrices> {
    let mut names = Vec::new();
    let mut sources: BTreeMap<String, MatrixSource> = BTreeMap::new();
    match spec {
        SpecFile::Single(doc) => {
            referenced(doc, &mut names)?;
            sources.extend(doc.matrices.clone());
        }
        SpecFile::Pipeline(p) => {
            if let Some(m) = &p.stage2.matrix {
                names.push(m.clone());
            }
            for doc in [&p.stage3.step1, &p.stage3.step2] {
                referenced(doc, &mut names)?;
                for (k, v) in &doc.matrices {
                    sources.entry(k.clone()).or_insert_with(|| v.clone());
                }
            }
        }
    }
    let base = spec_path.parent().unwrap_or(Path::new("."));
    let mut out = LoadedMatrices {
        mats: Relmats::new(),
        sources: Vec::new(),
    };
    for name in names {
        let (ped, g, jitter) = match sources.get(&name) {
            Some(s) => (
                s.pedigree.as_ref().map(|p| base.join(p)),
                s.grm.as_ref().map(|p| base.join(p)),
                s.jitter,
            ),
            None => (pedigree.map(Path::to_path_buf), grm.map(Path::to_path_buf), None),
        };
        let rel = match (ped, g) {
            (Some(p), None) => {
                let ped = Pedigree::from_csv_path(&p).with_context(|| format!("matrix `{name}`"))?;
                out.sources.push(p);
                RelationshipMatrix::from_pedigree(&ped)
            }
            (None, Some(p)) => {
                let (ids, k) = read_grm(&p).with_context(|| format!("matrix `{name}`"))?;
                let rel = ingest_grm(ids, k, jitter.unwrap_or(DEFAULT_JITTER))
                    .with_context(|| format!("{}", p.display()))?;
                if rel.jitter > 0.0 {
                    eprintln!("note: added {:e} to the diagonal of `{name}` ({})", rel.jitter, p.display());
                }
                out.sources.push(p);
                rel
            }
            (Some(_), Some(_)) => bail!("matrix `{name}` names both a pedigree and a GRM"),
            (None, None) => bail!("matrix `{name}` is used but no --pedigree, --grm or [matrices.{name}] was given"),
        };
        out.mats.insert(name, rel);
    }
    Ok(out)
}
