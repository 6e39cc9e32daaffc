//! Genetic relatedness: pedigree-based numerator relationship matrices, their
//! sparse inverses, and externally supplied genomic relationship matrices.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};

/// Individuals with optional parents, stored parents-before-offspring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pedigree {
    ids: Vec<String>,
    sire: Vec<Option<usize>>,
    dam: Vec<Option<usize>>,
    index: HashMap<String, usize>,
}

fn missing_parent(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "0" | ".")
}

impl Pedigree {
    /// Builds a pedigree from `(id, sire, dam)` records in any order; records
    /// are reordered so that parents precede their offspring.
    pub fn new(records: Vec<(String, Option<String>, Option<String>)>) -> Result<Pedigree> {
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for (i, (id, _, _)) in records.iter().enumerate() {
            if pos.insert(id.as_str(), i).is_some() {
                return Err(Error::Pedigree(format!("duplicate individual `{id}`")));
            }
        }
        let parent_of = |p: &Option<String>| -> Result<Option<usize>> {
            match p {
                None => Ok(None),
                Some(p) => pos
                    .get(p.as_str())
                    .copied()
                    .map(Some)
                    .ok_or_else(|| Error::Pedigree(format!("unknown parent `{p}`"))),
            }
        };
        let parents: Vec<[Option<usize>; 2]> = records
            .iter()
            .map(|(_, s, d)| Ok([parent_of(s)?, parent_of(d)?]))
            .collect::<Result<_>>()?;

        // Depth-first ordering keeps the input order wherever it is already valid.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let n = records.len();
        let mut mark = vec![Mark::New; n];
        let mut order = Vec::with_capacity(n);
        for root in 0..n {
            if mark[root] != Mark::New {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Active;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < 2 {
                    let k = *next;
                    *next += 1;
                    if let Some(p) = parents[v][k] {
                        match mark[p] {
                            Mark::New => {
                                mark[p] = Mark::Active;
                                stack.push((p, 0));
                            }
                            Mark::Active => {
                                return Err(Error::Pedigree(format!(
                                    "`{}` is its own ancestor",
                                    records[p].0
                                )))
                            }
                            Mark::Done => {}
                        }
                    }
                } else {
                    mark[v] = Mark::Done;
                    order.push(v);
                    stack.pop();
                }
            }
        }
        let mut new_index = vec![0usize; n];
        for (k, &old) in order.iter().enumerate() {
            new_index[old] = k;
        }
        let ids: Vec<String> = order.iter().map(|&o| records[o].0.clone()).collect();
        let sire = order.iter().map(|&o| parents[o][0].map(|p| new_index[p])).collect();
        let dam = order.iter().map(|&o| parents[o][1].map(|p| new_index[p])).collect();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Pedigree {
            ids,
            sire,
            dam,
            index,
        })
    }

    /// Reads `id, sire, dam` CSV; an empty field marks an unknown parent.
    pub fn read_csv<R: Read>(reader: R, context: &str) -> Result<Pedigree> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(context, e))?;
            if rec.len() < 3 {
                return Err(Error::Pedigree(format!(
                    "{context}: expected columns id, sire, dam"
                )));
            }
            let parent = |s: &str| (!missing_parent(s)).then(|| s.to_owned());
            records.push((rec[0].to_owned(), parent(&rec[1]), parent(&rec[2])));
        }
        Pedigree::new(records)
    }

    pub fn from_csv_path(path: &Path) -> Result<Pedigree> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Pedigree::read_csv(file, &path.display().to_string())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let ctx = "writing pedigree";
        wtr.write_record(["id", "sire", "dam"])
            .map_err(|e| Error::csv(ctx, e))?;
        for i in 0..self.len() {
            let name = |p: Option<usize>| p.map(|p| self.ids[p].as_str()).unwrap_or("");
            wtr.write_record([self.ids[i].as_str(), name(self.sire[i]), name(self.dam[i])])
                .map_err(|e| Error::csv(ctx, e))?;
        }
        wtr.flush().map_err(|e| Error::csv(ctx, csv::Error::from(e)))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn sire(&self, i: usize) -> Option<usize> {
        self.sire[i]
    }

    pub fn dam(&self, i: usize) -> Option<usize> {
        self.dam[i]
    }

    /// Inbreeding coefficients by the Meuwissen–Luo path traversal, without
    /// forming the relationship matrix.
    pub fn inbreeding(&self) -> Vec<f64> {
        let n = self.len();
        let mut f = vec![0.0; n];
        let mut d = vec![0.0; n];
        for i in 0..n {
            if i > 0 && self.sire[i].is_some() && self.sire[i] == self.sire[i - 1]
                && self.dam[i] == self.dam[i - 1]
            {
                f[i] = f[i - 1];
                d[i] = d[i - 1];
                continue;
            }
            d[i] = self.mendelian_variance(i, &f);
            let mut row: BTreeMap<usize, f64> = BTreeMap::new();
            row.insert(i, 1.0);
            let mut acc = 0.0;
            while let Some((j, lij)) = row.pop_last() {
                acc += lij * lij * d[j];
                for p in [self.sire[j], self.dam[j]].into_iter().flatten() {
                    *row.entry(p).or_insert(0.0) += 0.5 * lij;
                }
            }
            f[i] = acc - 1.0;
        }
        f
    }

    fn mendelian_variance(&self, i: usize, f: &[f64]) -> f64 {
        match (self.sire[i], self.dam[i]) {
            (Some(s), Some(d)) => 0.5 - 0.25 * (f[s] + f[d]),
            (Some(p), None) | (None, Some(p)) => 0.75 - 0.25 * f[p],
            (None, None) => 1.0,
        }
    }
}

/// Upper-triangle storage of a symmetric sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    dim: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl SparseSym {
    pub fn new(dim: usize) -> Self {
        SparseSym {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let key = if i <= j { (i, j) } else { (j, i) };
        *self.entries.entry(key).or_insert(0.0) += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let key = if i <= j { (i, j) } else { (j, i) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    /// Stored upper-triangle entries `(i, j, v)` with `i <= j`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }
}

/// Relationship matrices keyed by the name used in model terms.
pub type Relmats = BTreeMap<String, RelationshipMatrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationshipKind {
    Nrm,
    Grm,
}

#[derive(Debug, Clone)]
pub struct RelationshipMatrix {
    pub ids: Vec<String>,
    pub kind: RelationshipKind,
    pub dense: DMatrix<f64>,
    pub sparse_inverse: Option<SparseSym>,
    /// Diagonal loading added during ingestion, zero when none was needed.
    pub jitter: f64,
    index: HashMap<String, usize>,
}

impl RelationshipMatrix {
    pub fn new(
        ids: Vec<String>,
        kind: RelationshipKind,
        dense: DMatrix<f64>,
        sparse_inverse: Option<SparseSym>,
    ) -> Result<Self> {
        if dense.nrows() != ids.len() || dense.ncols() != ids.len() {
            return Err(Error::Dimension(format!(
                "relationship matrix is {}x{} for {} ids",
                dense.nrows(),
                dense.ncols(),
                ids.len()
            )));
        }
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(RelationshipMatrix {
            ids,
            kind,
            dense,
            sparse_inverse,
            jitter: 0.0,
            index,
        })
    }

    /// NRM with its sparse inverse attached.
    pub fn from_pedigree(ped: &Pedigree) -> Self {
        let mut a = nrm_from_pedigree(ped);
        a.sparse_inverse = Some(sparse_nrm_inverse(ped));
        a
    }

    pub fn identity(ids: Vec<String>) -> Self {
        let m = ids.len();
        let mut inv = SparseSym::new(m);
        for i in 0..m {
            inv.add(i, i, 1.0);
        }
        RelationshipMatrix::new(ids, RelationshipKind::Grm, DMatrix::identity(m, m), Some(inv))
            .expect("square by construction")
    }

    pub fn dim(&self) -> usize {
        self.ids.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// `Tr(G)/m`.
    pub fn mean_diagonal(&self) -> f64 {
        self.dense.trace() / self.dim() as f64
    }

    /// `max |G·G⁻¹ − I|` for the attached sparse inverse.
    pub fn inverse_residual(&self) -> Option<f64> {
        let inv = self.sparse_inverse.as_ref()?;
        let prod = &self.dense * inv.to_dense();
        let m = self.dim();
        Some(
            (prod - DMatrix::<f64>::identity(m, m))
                .iter()
                .fold(0.0_f64, |acc, v| acc.max(v.abs())),
        )
    }

    /// Dense `G⁻¹`, taken from the sparse inverse when present.
    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        if let Some(inv) = &self.sparse_inverse {
            return Ok(inv.to_dense());
        }
        Cholesky::new(self.dense.clone())
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Indefinite(String::new()))
    }
}

/// Tabular method: `a_ij = ½(a_{j,sire(i)} + a_{j,dam(i)})`,
/// `a_ii = 1 + ½·a_{sire(i),dam(i)}`.
pub fn nrm_from_pedigree(ped: &Pedigree) -> RelationshipMatrix {
    let n = ped.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let (s, d) = (ped.sire(i), ped.dam(i));
        for j in 0..i {
            let v = 0.5 * (s.map_or(0.0, |s| a[(j, s)]) + d.map_or(0.0, |d| a[(j, d)]));
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
        a[(i, i)] = 1.0 + match (s, d) {
            (Some(s), Some(d)) => 0.5 * a[(s, d)],
            _ => 0.0,
        };
    }
    RelationshipMatrix::new(ped.ids().to_vec(), RelationshipKind::Nrm, a, None)
        .expect("square by construction")
}

/// Henderson's rules with exact inbreeding: `A⁻¹ = Σ_i q_i q_iᵀ / d_i` with
/// `q_i = e_i − ½e_sire − ½e_dam`.
pub fn sparse_nrm_inverse(ped: &Pedigree) -> SparseSym {
    let f = ped.inbreeding();
    let mut inv = SparseSym::new(ped.len());
    for i in 0..ped.len() {
        let d = ped.mendelian_variance(i, &f);
        let w = 1.0 / d;
        let mut q: Vec<(usize, f64)> = vec![(i, 1.0)];
        for p in [ped.sire(i), ped.dam(i)].into_iter().flatten() {
            q.push((p, -0.5));
        }
        for &(a, va) in &q {
            for &(b, vb) in &q {
                // Upper triangle only; repeated parents (selfing) accumulate.
                if a <= b {
                    inv.add(a, b, w * va * vb);
                }
            }
        }
    }
    inv
}

/// Validates an externally supplied relationship matrix. When the Cholesky
/// factorization fails, `jitter·I` is added once and the factorization retried.
pub fn ingest_grm(ids: Vec<String>, mut k: DMatrix<f64>, jitter: f64) -> Result<RelationshipMatrix> {
    if k.nrows() != k.ncols() {
        return Err(Error::Dimension(format!("GRM is {}x{}", k.nrows(), k.ncols())));
    }
    let m = k.nrows();
    let mut asym = 0.0_f64;
    for i in 0..m {
        for j in 0..i {
            asym = asym.max((k[(i, j)] - k[(j, i)]).abs());
        }
    }
    if asym > 1e-10 {
        return Err(Error::Asymmetric(asym));
    }
    let mut applied = 0.0;
    if Cholesky::new(k.clone()).is_none() {
        for i in 0..m {
            k[(i, i)] += jitter;
        }
        if Cholesky::new(k.clone()).is_none() {
            return Err(Error::Indefinite(format!(" after adding jitter {jitter:e}")));
        }
        applied = jitter;
    }
    let mut rel = RelationshipMatrix::new(ids, RelationshipKind::Grm, k, None)?;
    rel.jitter = applied;
    Ok(rel)
}

/// Reads a relationship matrix either as a dense CSV (header `id,<ids...>`,
/// then one row per individual) or as coordinate text `id_i id_j value`.
pub fn read_grm(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grm(&text).map_err(|e| match e {
        Error::Dimension(m) => Error::Dimension(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_grm(text: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let split = |l: &str| -> Vec<String> {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect()
    };
    let bad = |l: &str| Error::Dimension(format!("cannot parse value in `{l}`"));
    let Some(first) = lines.first() else {
        return Err(Error::Dimension("empty matrix file".into()));
    };
    let head = split(first);
    let coordinate = head.len() == 3 && head[2].parse::<f64>().is_ok();
    if !coordinate {
        let ids: Vec<String> = head[1..].to_vec();
        let m = ids.len();
        if lines.len() != m + 1 {
            return Err(Error::Dimension(format!("{} ids but {} rows", m, lines.len() - 1)));
        }
        let mut k = DMatrix::zeros(m, m);
        for (i, l) in lines[1..].iter().enumerate() {
            let f = split(l);
            if f.len() != m + 1 || f[0] != ids[i] {
                return Err(Error::Dimension(format!("row {} of dense matrix is malformed", i + 1)));
            }
            for j in 0..m {
                k[(i, j)] = f[j + 1].parse().map_err(|_| bad(l))?;
            }
        }
        return Ok((ids, k));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    let mut triples = Vec::new();
    for l in &lines {
        let f = split(l);
        if f.len() != 3 {
            return Err(Error::Dimension(format!("expected `id_i id_j value`, got `{l}`")));
        }
        let mut idx = |s: &str| {
            *pos.entry(s.to_owned()).or_insert_with(|| {
                ids.push(s.to_owned());
                ids.len() - 1
            })
        };
        let (i, j) = (idx(&f[0]), idx(&f[1]));
        let v: f64 = f[2].parse().map_err(|_| bad(l))?;
        triples.push((i, j, v));
    }
    let m = ids.len();
    let mut k = DMatrix::zeros(m, m);
    let mut set = DMatrix::from_element(m, m, false);
    for (i, j, v) in triples {
        k[(i, j)] = v;
        set[(i, j)] = true;
        if !set[(j, i)] {
            k[(j, i)] = v;
        }
    }
    Ok((ids, k))
}

/// Variance model `σ²_a·G + σ²_e·I` with its inverse.
#[derive(Debug, Clone)]
pub struct RicVariance {
    pub sigma2_a: f64,
    pub sigma2_e: f64,
    /// `(σ²_a·G + σ²_e·I)⁻¹`.
    pub inverse: DMatrix<f64>,
    /// `Tr(G)/m`.
    pub mean_diagonal: f64,
}

impl RicVariance {
    /// Variance of an identity-equivalent model, `ā·σ²_a + σ²_e`.
    pub fn identity_equivalent(&self) -> f64 {
        self.mean_diagonal * self.sigma2_a + self.sigma2_e
    }

    pub fn covariance(&self, g: &RelationshipMatrix) -> DMatrix<f64> {
        let m = g.dim();
        &g.dense * self.sigma2_a + DMatrix::<f64>::identity(m, m) * self.sigma2_e
    }
}

pub fn ric_variance(g: &RelationshipMatrix, sigma2_a: f64, sigma2_e: f64) -> Result<RicVariance> {
    if !(sigma2_a > 0.0) || !(sigma2_e >= 0.0) {
        return Err(Error::NonPositiveParam {
            term: "ric".into(),
            value: if sigma2_a > 0.0 { sigma2_e } else { sigma2_a },
        });
    }
    let m = g.dim();
    let inverse = if sigma2_e == 0.0 {
        g.inverse()? / sigma2_a
    } else {
        let v = &g.dense * sigma2_a + DMatrix::<f64>::identity(m, m) * sigma2_e;
        Cholesky::new(v)
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Indefinite(" (ric combination)".into()))?
    };
    Ok(RicVariance {
        sigma2_a,
        sigma2_e,
        inverse,
        mean_diagonal: g.mean_diagonal(),
    })
}
