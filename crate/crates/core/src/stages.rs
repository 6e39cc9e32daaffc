//! Staged construction of selection experiments: allocating replication to
//! genotypes, allocating plots to genotypes in one or more steps, the
//! multi-environment compound-symmetric models, and model-based efficiency
//! of design strategies.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::DesignFrame;
use crate::mme::build_workspace;
use crate::relatedness::Relmats;
use crate::search::{derive_seed, run_design, SearchConfig, SearchReport};
use crate::spec::{
    Contrast, CsForm, ModelSpec, ParamValue, SearchSection, SpecDocument, Term, VarianceFn,
};

/// Column names added to generated frames.
pub const REP_FACTOR: &str = "repF";
pub const SWAP_FACTOR: &str = "swp";
pub const RUN_SWAP_FACTOR: &str = "swprun";

/// A genotype entering the experiment with the replicate counts it may take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub allowed: Vec<usize>,
    /// Check varieties are resolved over zones in the plot stage.
    pub check: bool,
}

/// Reads entries from CSV with columns `name`, `allowed` (replicate counts
/// separated by `;`) and optionally `check` (`1`, `true` or `yes`).
pub fn read_entries<R: Read>(reader: R, context: &str) -> Result<Vec<Entry>> {
    let frame = DesignFrame::read_csv(reader, context)?;
    let name = frame.require("name")?;
    let allowed = frame.require("allowed")?;
    let check = frame.column_index("check");
    (0..frame.nrows())
        .map(|r| {
            let allowed = frame
                .value(allowed, r)
                .split(';')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        Error::Scheme(format!("{context}: bad replicate count `{s}` in row {}", r + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Entry {
                name: frame.value(name, r).to_owned(),
                allowed,
                check: check.is_some_and(|c| {
                    matches!(frame.value(c, r).to_ascii_lowercase().as_str(), "1" | "true" | "yes")
                }),
            })
        })
        .collect()
}

pub fn read_entries_path(path: &Path) -> Result<Vec<Entry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_entries(f, &path.display().to_string())
}

/// Allocation of replicate counts to genotypes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationScheme {
    pub genotypes: Vec<String>,
    /// Distinct replicate counts, ascending.
    pub reps: Vec<usize>,
    /// Genotypes per replicate count.
    pub counts: Vec<usize>,
    /// Allowed class indices per genotype.
    pub allowed: Vec<Vec<usize>>,
    /// Class index per genotype.
    pub assignment: Vec<usize>,
    pub check: Vec<bool>,
}

impl ReplicationScheme {
    /// Scheme over `entries` with `counts[j]` genotypes receiving `reps[j]`
    /// replicates. The assignment starts empty; see [`Self::assign_random`].
    pub fn new(entries: &[Entry], reps: &[usize], counts: &[usize]) -> Result<ReplicationScheme> {
        if reps.len() != counts.len() || reps.is_empty() {
            return Err(Error::Scheme("replicate counts and class sizes differ in length".into()));
        }
        let mut order: Vec<usize> = (0..reps.len()).collect();
        order.sort_by_key(|&j| reps[j]);
        let sorted_reps: Vec<usize> = order.iter().map(|&j| reps[j]).collect();
        if sorted_reps.windows(2).any(|w| w[0] == w[1]) || sorted_reps[0] == 0 {
            return Err(Error::Scheme("replicate counts must be distinct and positive".into()));
        }
        let sorted_counts: Vec<usize> = order.iter().map(|&j| counts[j]).collect();
        let m: usize = sorted_counts.iter().sum();
        if m != entries.len() {
            return Err(Error::Scheme(format!(
                "class sizes sum to {m} but there are {} genotypes",
                entries.len()
            )));
        }
        let mut allowed = Vec::with_capacity(entries.len());
        for e in entries {
            let mut a: Vec<usize> = e
                .allowed
                .iter()
                .filter_map(|r| sorted_reps.iter().position(|x| x == r))
                .collect();
            a.sort_unstable();
            a.dedup();
            if a.is_empty() {
                return Err(Error::Scheme(format!("genotype `{}` has no allowed replicate count", e.name)));
            }
            allowed.push(a);
        }
        Ok(ReplicationScheme {
            genotypes: entries.iter().map(|e| e.name.clone()).collect(),
            reps: sorted_reps,
            counts: sorted_counts,
            allowed,
            assignment: vec![usize::MAX; entries.len()],
            check: entries.iter().map(|e| e.check).collect(),
        })
    }

    pub fn total_plots(&self) -> usize {
        self.reps.iter().zip(&self.counts).map(|(r, m)| r * m).sum()
    }

    pub fn reps_of(&self, g: usize) -> usize {
        self.reps[self.assignment[g]]
    }

    /// Replicates per genotype name.
    pub fn replication(&self) -> HashMap<String, usize> {
        (0..self.genotypes.len())
            .map(|g| (self.genotypes[g].clone(), self.reps_of(g)))
            .collect()
    }

    pub fn validate(&self, plots: usize) -> Result<()> {
        if self.total_plots() != plots {
            return Err(Error::Scheme(format!(
                "replication scheme needs {} plots, the layout has {plots}",
                self.total_plots()
            )));
        }
        let mut filled = vec![0; self.reps.len()];
        for (g, &c) in self.assignment.iter().enumerate() {
            if c >= self.reps.len() || !self.allowed[g].contains(&c) {
                return Err(Error::Scheme(format!(
                    "genotype `{}` is in a class it may not take",
                    self.genotypes[g]
                )));
            }
            filled[c] += 1;
        }
        if filled != self.counts {
            return Err(Error::Scheme("class sizes do not match the assignment".into()));
        }
        Ok(())
    }

    /// A random valid assignment: genotypes with a single allowed class are
    /// placed first, the rest are fitted by augmenting paths, and genotypes
    /// sharing an eligibility pattern are then shuffled over their classes.
    pub fn assign_random<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let m = self.genotypes.len();
        let c = self.reps.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
        let mut at = vec![usize::MAX; m];
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        order.sort_by_key(|&g| self.allowed[g].len());
        for &g in &order {
            let mut seen = vec![false; c];
            if !self.augment(g, &mut members, &mut at, &mut seen) {
                return Err(Error::Scheme("no valid allocation of replication exists".into()));
            }
        }
        let mut groups: BTreeMap<&Vec<usize>, Vec<usize>> = BTreeMap::new();
        for g in 0..m {
            groups.entry(&self.allowed[g]).or_default().push(g);
        }
        for gs in groups.values() {
            let mut classes: Vec<usize> = gs.iter().map(|&g| at[g]).collect();
            classes.shuffle(rng);
            for (&g, &k) in gs.iter().zip(&classes) {
                at[g] = k;
            }
        }
        self.assignment = at;
        Ok(())
    }

    fn augment(&self, g: usize, members: &mut [Vec<usize>], at: &mut [usize], seen: &mut [bool]) -> bool {
        for &k in &self.allowed[g] {
            if members[k].len() < self.counts[k] {
                members[k].push(g);
                at[g] = k;
                return true;
            }
        }
        for &k in &self.allowed[g] {
            if std::mem::replace(&mut seen[k], true) {
                continue;
            }
            for idx in 0..members[k].len() {
                let h = members[k][idx];
                if self.augment_from(h, k, members, at, seen) {
                    members[k].retain(|&x| x != h);
                    members[k].push(g);
                    at[g] = k;
                    return true;
                }
            }
        }
        false
    }

    fn augment_from(
        &self,
        h: usize,
        from: usize,
        members: &mut [Vec<usize>],
        at: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for &k in self.allowed[h].iter().filter(|&&k| k != from) {
            if members[k].len() < self.counts[k] {
                members[k].push(h);
                at[h] = k;
                return true;
            }
        }
        for &k in self.allowed[h].iter().filter(|&&k| k != from) {
            if std::mem::replace(&mut seen[k], true) {
                continue;
            }
            for idx in 0..members[k].len() {
                let x = members[k][idx];
                if self.augment_from(x, k, members, at, seen) {
                    members[k].retain(|&y| y != x);
                    members[k].push(h);
                    at[h] = k;
                    return true;
                }
            }
        }
        false
    }
}

/// Residual variance of a genotype mean with `r` replicates in the
/// replication-allocation model: `σ²_e + σ²/r`.
pub fn stage2_residuals(sigma2_e: f64, sigma2: f64, reps: &[usize]) -> Vec<f64> {
    reps.iter().map(|&r| sigma2_e + sigma2 / r as f64).collect()
}

/// Variance parameters of the replication-allocation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Params {
    pub sigma2_a: f64,
    pub sigma2_e: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
}

fn one() -> f64 {
    1.0
}

/// Genotype-level search problem for allocating replication.
#[derive(Debug, Clone)]
pub struct Stage2Problem {
    pub document: SpecDocument,
    pub spec: ModelSpec,
    pub frame: DesignFrame,
}

/// Builds the replication-allocation problem: one row per genotype sorted by
/// replicate class, additive effects with `σ²_a·G` (or `σ²_a·I` without a
/// matrix), a fixed mean and residual `σ²_e + σ²/r_j` per class. Genotypes
/// only exchange with genotypes sharing their eligibility pattern.
pub fn stage2_build(
    scheme: &ReplicationScheme,
    params: Stage2Params,
    matrix: Option<&str>,
    search: SearchSection,
) -> Result<Stage2Problem> {
    if scheme.assignment.iter().any(|&k| k >= scheme.reps.len()) {
        return Err(Error::Scheme("the scheme has no initial assignment".into()));
    }
    for (g, a) in scheme.allowed.iter().enumerate() {
        if a.is_empty() {
            return Err(Error::Scheme(format!("genotype `{}` has no allowed class", scheme.genotypes[g])));
        }
    }
    let mut rows: Vec<usize> = (0..scheme.genotypes.len()).collect();
    rows.sort_by_key(|&g| scheme.assignment[g]);
    let mut patterns: Vec<&Vec<usize>> = Vec::new();
    let mut swp = Vec::with_capacity(rows.len());
    for &g in &rows {
        let a = &scheme.allowed[g];
        let k = patterns.iter().position(|p| *p == a).unwrap_or_else(|| {
            patterns.push(a);
            patterns.len() - 1
        });
        swp.push(format!("P{}", k + 1));
    }
    let frame = DesignFrame::from_columns(vec![
        ("name".into(), rows.iter().map(|&g| scheme.genotypes[g].clone()).collect()),
        (
            REP_FACTOR.into(),
            rows.iter().map(|&g| scheme.reps_of(g).to_string()).collect(),
        ),
        (SWAP_FACTOR.into(), swp),
    ])?;
    let term = match matrix {
        Some(m) => format!("vm(name, {m})"),
        None => "name".to_owned(),
    };
    let residuals = stage2_residuals(params.sigma2_e, params.sigma2, &scheme.reps);
    let present = frame.levels(frame.require(REP_FACTOR)?);
    let by_level: BTreeMap<String, f64> = scheme
        .reps
        .iter()
        .zip(&residuals)
        .filter(|(r, _)| present.contains(&r.to_string()))
        .map(|(r, v)| (r.to_string(), *v))
        .collect();
    let mut doc = SpecDocument::default();
    doc.random.terms = vec![term.clone()];
    doc.residual.term = format!("dsum(units | {REP_FACTOR})");
    doc.permute.terms = vec![term.clone()];
    doc.permute.swap = Some(SWAP_FACTOR.into());
    doc.search = search;
    doc.params.insert(term, ParamValue::Scalar(params.sigma2_a));
    doc.params.insert("units".into(), ParamValue::ByLevel(by_level));
    let spec = ModelSpec::from_document(&doc, &frame)?;
    Ok(Stage2Problem {
        document: doc,
        spec,
        frame,
    })
}

/// Reads the replication allocation off a searched stage-2 design.
pub fn stage2_apply(scheme: &ReplicationScheme, design: &DesignFrame) -> Result<ReplicationScheme> {
    let name = design.require("name")?;
    let rep = design.require(REP_FACTOR)?;
    let index: HashMap<&str, usize> = scheme
        .genotypes
        .iter()
        .enumerate()
        .map(|(g, s)| (s.as_str(), g))
        .collect();
    let mut out = scheme.clone();
    for u in 0..design.nrows() {
        let g = *index.get(design.value(name, u)).ok_or_else(|| Error::UnknownLevel {
            factor: "name".into(),
            level: design.value(name, u).into(),
            context: "replication scheme".into(),
        })?;
        let r: usize = design
            .value(rep, u)
            .parse()
            .map_err(|_| Error::Scheme(format!("bad replicate count `{}`", design.value(rep, u))))?;
        out.assignment[g] = scheme
            .reps
            .iter()
            .position(|&x| x == r)
            .ok_or_else(|| Error::Scheme(format!("replicate count {r} is not in the scheme")))?;
    }
    out.validate(scheme.total_plots())?;
    Ok(out)
}

/// Plot-level layout factors for the plot-allocation stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage3Setup {
    #[serde(default = "default_genotype")]
    pub genotype: String,
    pub run: String,
    pub zone: String,
}

fn default_genotype() -> String {
    "name".into()
}

/// Distributes items with `copies[i]` replicates over levels with the given
/// capacities so that no item appears twice in a level. Items are taken in
/// decreasing replication and placed in the levels with most room left.
fn spread_over_levels<R: Rng>(copies: &[usize], capacity: &[usize], rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let mut left = capacity.to_vec();
    let mut order: Vec<usize> = (0..copies.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| std::cmp::Reverse(copies[i]));
    let mut out = vec![Vec::new(); copies.len()];
    for i in order {
        if copies[i] > left.len() {
            return Err(Error::Constraint(format!(
                "an item with {} copies cannot be spread over {} levels",
                copies[i],
                left.len()
            )));
        }
        let mut levels: Vec<usize> = (0..left.len()).collect();
        levels.shuffle(rng);
        levels.sort_by_key(|&l| std::cmp::Reverse(left[l]));
        for &l in &levels[..copies[i]] {
            if left[l] == 0 {
                return Err(Error::Constraint("levels do not have room for every copy".into()));
            }
            left[l] -= 1;
            out[i].push(l);
        }
    }
    Ok(out)
}

/// Initial plot allocation for the plot stage: each check is placed equally
/// often in every zone and test genotypes are spread so that none appears
/// twice in a run. Adds the genotype column plus swap factors `swp` (checks
/// within zone, tests anywhere) and `swprun` (checks within zone, tests
/// within run).
pub fn stage3_initial<R: Rng>(
    plots: &DesignFrame,
    setup: &Stage3Setup,
    scheme: &ReplicationScheme,
    rng: &mut R,
) -> Result<DesignFrame> {
    let n = plots.nrows();
    scheme.validate(n)?;
    let run = plots.require(&setup.run)?;
    let zone = plots.require(&setup.zone)?;
    let zones = plots.levels(zone).len();
    let runs = plots.levels(run).len();
    let mut zone_run = vec![usize::MAX; zones];
    for u in 0..n {
        let (z, r) = (plots.code(zone, u), plots.code(run, u));
        if zone_run[z] == usize::MAX {
            zone_run[z] = r;
        } else if zone_run[z] != r {
            return Err(Error::Constraint(format!(
                "zone `{}` spans more than one run",
                plots.levels(zone)[z]
            )));
        }
    }
    let mut free_in_zone: Vec<Vec<usize>> = vec![Vec::new(); zones];
    for u in 0..n {
        free_in_zone[plots.code(zone, u)].push(u);
    }
    for f in &mut free_in_zone {
        f.shuffle(rng);
    }
    let mut label: Vec<Option<usize>> = vec![None; n];
    for g in (0..scheme.genotypes.len()).filter(|&g| scheme.check[g]) {
        let r = scheme.reps_of(g);
        if r % zones != 0 {
            return Err(Error::Constraint(format!(
                "check `{}` has {r} plots, which cannot be resolved over {zones} zones",
                scheme.genotypes[g]
            )));
        }
        for (z, free) in free_in_zone.iter_mut().enumerate() {
            for _ in 0..r / zones {
                let u = free.pop().ok_or_else(|| {
                    Error::Constraint(format!("zone `{}` has no room for the checks", plots.levels(zone)[z]))
                })?;
                label[u] = Some(g);
            }
        }
    }
    let mut free_in_run: Vec<Vec<usize>> = vec![Vec::new(); runs];
    for (z, free) in free_in_zone.into_iter().enumerate() {
        free_in_run[zone_run[z]].extend(free);
    }
    let tests: Vec<usize> = (0..scheme.genotypes.len()).filter(|&g| !scheme.check[g]).collect();
    let copies: Vec<usize> = tests.iter().map(|&g| scheme.reps_of(g)).collect();
    let capacity: Vec<usize> = free_in_run.iter().map(Vec::len).collect();
    if copies.iter().sum::<usize>() != capacity.iter().sum::<usize>() {
        return Err(Error::Scheme("test plots do not match the free plots".into()));
    }
    let placed = spread_over_levels(&copies, &capacity, rng)?;
    for f in &mut free_in_run {
        f.shuffle(rng);
    }
    for (i, levels) in placed.iter().enumerate() {
        for &r in levels {
            let u = free_in_run[r].pop().expect("capacity checked");
            label[u] = Some(tests[i]);
        }
    }
    let mut out = plots.clone();
    let names: Vec<String> = label
        .iter()
        .map(|l| scheme.genotypes[l.expect("every plot filled")].clone())
        .collect();
    let is_check = |u: usize| scheme.check[label[u].expect("filled")];
    let swp: Vec<String> = (0..n)
        .map(|u| {
            if is_check(u) {
                format!("check:{}", plots.value(zone, u))
            } else {
                "test".to_owned()
            }
        })
        .collect();
    let swprun: Vec<String> = (0..n)
        .map(|u| {
            if is_check(u) {
                format!("check:{}", plots.value(zone, u))
            } else {
                format!("test:{}", plots.value(run, u))
            }
        })
        .collect();
    out.push_column(setup.genotype.clone(), names)?;
    out.push_column(SWAP_FACTOR.into(), swp)?;
    out.push_column(RUN_SWAP_FACTOR.into(), swprun)?;
    Ok(out)
}

/// Fills in the swap and spread settings of the two plot-allocation steps
/// when the documents leave them unset: step 1 moves tests across runs while
/// keeping each test at most once per run, step 2 moves tests within runs.
pub fn stage3_documents(
    step1: &SpecDocument,
    step2: &SpecDocument,
    setup: &Stage3Setup,
) -> (SpecDocument, SpecDocument) {
    let mut a = step1.clone();
    let mut b = step2.clone();
    a.permute.swap.get_or_insert_with(|| SWAP_FACTOR.into());
    b.permute.swap.get_or_insert_with(|| RUN_SWAP_FACTOR.into());
    for d in [&mut a, &mut b] {
        if !d.permute.binary.contains(&setup.run) {
            d.permute.binary.push(setup.run.clone());
        }
    }
    (a, b)
}

/// Settings for the full single-environment pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    pub reps: Vec<usize>,
    pub counts: Vec<usize>,
    pub sigma2_a: f64,
    pub sigma2_e: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
    /// Relationship matrix for the additive effects; identity when absent.
    #[serde(default)]
    pub matrix: Option<String>,
    /// Search for the allocation; when false the random valid allocation is
    /// kept.
    #[serde(default = "yes")]
    pub informed: bool,
    #[serde(default)]
    pub search: SearchSection,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Section {
    #[serde(flatten)]
    pub setup: Stage3Setup,
    pub step1: SpecDocument,
    pub step2: SpecDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesePipeline {
    pub stage2: Stage2Section,
    pub stage3: Stage3Section,
}

/// Every intermediate design and search report of a pipeline run.
#[derive(Debug, Clone)]
pub struct SeseOutcome {
    pub initial_scheme: ReplicationScheme,
    pub scheme: ReplicationScheme,
    pub stage2_initial: DesignFrame,
    pub stage2_design: DesignFrame,
    pub stage2_report: Option<SearchReport>,
    pub step1_initial: DesignFrame,
    pub step1_design: DesignFrame,
    pub step1_report: SearchReport,
    pub step2_design: DesignFrame,
    pub step2_report: SearchReport,
    pub step2_spec: ModelSpec,
}

/// Runtime options shared by pipeline searches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub maxit: Option<usize>,
    pub deterministic: bool,
}

impl RunOptions {
    pub fn config(&self, section: &SearchSection, stream: u64) -> Result<SearchConfig> {
        let mut cfg = SearchConfig::from_section(section)?;
        cfg.seed = derive_seed(self.seed, stream);
        if let Some(m) = self.maxit {
            cfg.maxit = m;
        }
        cfg.deterministic = self.deterministic;
        Ok(cfg)
    }
}

/// Runs replication allocation followed by two plot-allocation steps.
pub fn run_sese(
    pipeline: &SesePipeline,
    entries: &[Entry],
    plots: &DesignFrame,
    relmats: Option<&Relmats>,
    opts: RunOptions,
    mut progress: impl FnMut(&str, &crate::search::LoopTrace),
) -> Result<SeseOutcome> {
    let s2 = &pipeline.stage2;
    let mut scheme = ReplicationScheme::new(entries, &s2.reps, &s2.counts)?;
    if scheme.total_plots() != plots.nrows() {
        return Err(Error::Scheme(format!(
            "replication scheme needs {} plots, the layout has {}",
            scheme.total_plots(),
            plots.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 0));
    scheme.assign_random(&mut rng)?;
    let initial_scheme = scheme.clone();
    let problem = stage2_build(
        &scheme,
        Stage2Params {
            sigma2_a: s2.sigma2_a,
            sigma2_e: s2.sigma2_e,
            sigma2: s2.sigma2,
        },
        s2.matrix.as_deref(),
        s2.search.clone(),
    )?;
    let (stage2_design, stage2_report) = if s2.informed {
        let cfg = opts.config(&s2.search, 1)?;
        let (d, r) = run_design(&problem.spec, &problem.frame, relmats, &cfg, |t| progress("stage2", t))?;
        (d, Some(r))
    } else {
        (problem.frame.clone(), None)
    };
    let scheme = stage2_apply(&scheme, &stage2_design)?;
    let s3 = &pipeline.stage3;
    let step1_initial = stage3_initial(plots, &s3.setup, &scheme, &mut rng)?;
    let (doc1, doc2) = stage3_documents(&s3.step1, &s3.step2, &s3.setup);
    let spec1 = ModelSpec::from_document(&doc1, &step1_initial)?;
    let cfg1 = opts.config(&doc1.search, 2)?;
    let (step1_design, step1_report) =
        run_design(&spec1, &step1_initial, relmats, &cfg1, |t| progress("step1", t))?;
    let spec2 = ModelSpec::from_document(&doc2, &step1_design)?;
    let cfg2 = opts.config(&doc2.search, 3)?;
    let (step2_design, step2_report) =
        run_design(&spec2, &step1_design, relmats, &cfg2, |t| progress("step2", t))?;
    Ok(SeseOutcome {
        initial_scheme,
        scheme,
        stage2_initial: problem.frame,
        stage2_design,
        stage2_report,
        step1_initial,
        step1_design,
        step1_report,
        step2_design,
        step2_report,
        step2_spec: spec2,
    })
}

/// Replaces relationship-matrix genotype terms with identity terms whose
/// variance is the identity-equivalent `ā·σ²_a + σ²_e` (or `ā·σ²` for `vm`).
pub fn identity_equivalent(doc: &SpecDocument, relmats: &Relmats) -> Result<SpecDocument> {
    let mut out = doc.clone();
    let mut rename: BTreeMap<String, (String, f64)> = BTreeMap::new();
    for text in doc.random.terms.iter() {
        let t = Term::parse(text, VarianceFn::Idv)?;
        let Some(m) = &t.matrix else { continue };
        if !matches!(t.variance, VarianceFn::Ric | VarianceFn::Vm) {
            continue;
        }
        let g = relmats.get(m).ok_or_else(|| Error::MissingMatrix(m.clone()))?;
        let abar = g.mean_diagonal();
        let key = doc
            .params
            .keys()
            .find(|k| Term::parse(k, VarianceFn::Idv).map(|p| p.label()).ok() == Some(t.label()))
            .cloned()
            .ok_or_else(|| Error::ParamCount {
                term: t.to_string(),
                expected: 1,
                found: 0,
            })?;
        let values = match &doc.params[&key] {
            ParamValue::Scalar(v) => vec![*v],
            ParamValue::List(v) => v.clone(),
            ParamValue::ByLevel(_) => Vec::new(),
        };
        let v = match (t.variance, values.as_slice()) {
            (VarianceFn::Ric, [a, e]) => abar * a + e,
            (VarianceFn::Vm, [a]) => abar * a,
            _ => {
                return Err(Error::ParamCount {
                    term: t.to_string(),
                    expected: if t.variance == VarianceFn::Ric { 2 } else { 1 },
                    found: values.len(),
                })
            }
        };
        out.params.remove(&key);
        let plain = t.factors.join(":");
        out.params.insert(plain.clone(), ParamValue::Scalar(v));
        rename.insert(t.label(), (plain, v));
    }
    let swap = |list: &mut Vec<String>| -> Result<()> {
        for s in list.iter_mut() {
            let t = Term::parse(s, VarianceFn::Idv)?;
            if let Some((plain, _)) = rename.get(&t.label()) {
                *s = plain.clone();
            }
        }
        Ok(())
    };
    swap(&mut out.random.terms)?;
    swap(&mut out.permute.terms)?;
    if let Some(o) = out.permute.objective.as_mut() {
        swap(o)?;
    }
    Ok(out)
}

/// Compound-symmetric genetic variance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsGeneticModel {
    pub d_a: f64,
    pub psi_a: f64,
    pub d_e: f64,
    pub psi_e: f64,
}

impl CsGeneticModel {
    /// Between-environment matrices `G_a = d_a·J + ψ_a·I` and
    /// `G_e = d_e·J + ψ_e·I`.
    pub fn between_environment(&self, t: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let j = DMatrix::from_element(t, t, 1.0);
        let i = DMatrix::identity(t, t);
        (&j * self.d_a + &i * self.psi_a, &j * self.d_e + &i * self.psi_e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsObjective {
    Additive,
    Total,
}

/// Factor names of a multi-environment frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeseFactors {
    pub genotype: String,
    /// Plot-structure copy of the environment factor.
    pub site: String,
    /// Treatment-structure copy, aliased with `site`.
    pub environment: String,
}

/// Multi-environment model with compound-symmetric genotype-by-environment
/// effects over relationship matrix `matrix`: site means fixed, extra random
/// plot terms, residual `σ²·I`.
pub fn mese_build_cs(
    frame: &DesignFrame,
    factors: &MeseFactors,
    model: CsGeneticModel,
    objective: CsObjective,
    matrix: &str,
    residual: f64,
    extra_random: &[(String, f64)],
) -> Result<ModelSpec> {
    let t = frame.levels(frame.require(&factors.environment)?).len();
    if t < 2 {
        return Err(Error::InvalidTerm(
            "a single environment has no genotype-by-environment structure; use the single-site model".into(),
        ));
    }
    let site = frame.require(&factors.site)?;
    let env = frame.require(&factors.environment)?;
    if (0..frame.nrows()).any(|u| frame.code(site, u) != frame.code(env, u)) {
        return Err(Error::InvalidTerm(format!(
            "`{}` and `{}` must be aliased copies",
            factors.site, factors.environment
        )));
    }
    let term = format!("cs({}:{}, {matrix})", factors.genotype, factors.environment);
    let mut doc = SpecDocument::default();
    doc.fixed.terms = vec![factors.site.clone()];
    doc.random.terms = vec![term.clone()];
    doc.residual.term = "units".into();
    doc.permute.terms = vec![term.clone()];
    doc.permute.anchored = vec![factors.environment.clone()];
    doc.permute.cs_form = Some(match objective {
        CsObjective::Additive => CsForm::Additive,
        CsObjective::Total => CsForm::Total,
    });
    doc.permute.contrast = Some(Contrast::Main);
    doc.params.insert(
        term,
        ParamValue::List(vec![model.d_a, model.psi_a, model.d_e, model.psi_e]),
    );
    doc.params.insert("units".into(), ParamValue::Scalar(residual));
    for (name, v) in extra_random {
        doc.random.terms.push(name.clone());
        doc.params.insert(name.clone(), ParamValue::Scalar(*v));
    }
    ModelSpec::from_document(&doc, frame)
}

/// Working model for allocating genotypes to sites: overall and site means
/// fixed, genotype main effects as the objective (fixed, or random with
/// `σ²_a·G + σ²_e·I` when `relatedness` is given), genotype-by-site effects
/// with variance `d_g`, residual `σ²`. Genotypes appear at most once per site.
pub fn mese_stage2_site_allocation(
    frame: &DesignFrame,
    factors: &MeseFactors,
    d_g: f64,
    sigma2: f64,
    relatedness: Option<(&str, f64, f64)>,
    swap: Option<&str>,
) -> Result<SpecDocument> {
    let g = &factors.genotype;
    let main = match relatedness {
        Some((m, _, _)) => format!("ric({g}, {m})"),
        None => g.clone(),
    };
    let inter = format!("{g}:{}", factors.environment);
    let mut doc = SpecDocument::default();
    doc.fixed.terms = vec![factors.site.clone()];
    match relatedness {
        Some((_, a, e)) => {
            doc.random.terms.push(main.clone());
            doc.params.insert(main.clone(), ParamValue::List(vec![a, e]));
        }
        None => doc.fixed.terms.push(main.clone()),
    }
    doc.random.terms.push(inter.clone());
    doc.params.insert(inter.clone(), ParamValue::Scalar(d_g));
    doc.params.insert("units".into(), ParamValue::Scalar(sigma2));
    doc.residual.term = "units".into();
    doc.permute.terms = vec![main.clone(), inter];
    doc.permute.objective = Some(vec![main]);
    doc.permute.anchored = vec![factors.environment.clone()];
    doc.permute.binary = vec![factors.site.clone()];
    doc.permute.swap = swap.map(str::to_owned);
    ModelSpec::from_document(&doc, frame)?;
    Ok(doc)
}

/// Working allocation of genotypes to sites: genotype `i` is tested at
/// `sites_per_genotype[i]` distinct sites, each site holding `plots[s]`
/// plots. Returns the genotype of every plot, site by site.
pub fn mese_initial_allocation<R: Rng>(
    sites_per_genotype: &[usize],
    plots: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if sites_per_genotype.iter().sum::<usize>() != plots.iter().sum::<usize>() {
        return Err(Error::Constraint("genotype-site incidences do not fill the plots".into()));
    }
    let placed = spread_over_levels(sites_per_genotype, plots, rng)?;
    let mut out = vec![Vec::new(); plots.len()];
    for (g, sites) in placed.iter().enumerate() {
        for &s in sites {
            out[s].push(g);
        }
    }
    for s in &mut out {
        s.shuffle(rng);
    }
    Ok(out)
}

/// One design strategy of the efficiency study: searched or random
/// replication allocation, relatedness or identity model for plots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub informed: bool,
    pub plot_relatedness: bool,
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm { informed: true, plot_relatedness: true },
        Arm { informed: true, plot_relatedness: false },
        Arm { informed: false, plot_relatedness: true },
        Arm { informed: false, plot_relatedness: false },
    ];

    pub fn label(&self) -> String {
        let l = |b: bool| if b { 'A' } else { 'I' };
        format!("{}{}", l(self.informed), l(self.plot_relatedness))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub label: String,
    pub mean_a: f64,
    pub mean_e: f64,
    pub a: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyResult {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

impl EfficiencyResult {
    pub fn arm(&self, label: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,A,E\n");
        for a in &self.arms {
            for (k, seed) in self.seeds.iter().enumerate() {
                s += &format!("{},{},{:.10},{:.6}\n", a.label, seed, a.a[k], a.e[k]);
            }
            s += &format!("{},mean,{:.10},{:.6}\n", a.label, a.mean_a, a.mean_e);
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<4} {:>14} {:>8}\n", "arm", "mean A", "E");
        for a in &self.arms {
            s += &format!("{:<4} {:>14.8} {:>8.3}\n", a.label, a.mean_a, a.mean_e);
        }
        s
    }
}

/// Designs every arm with the same seeds and budgets, evaluates each final
/// design under the relatedness model of plot-allocation step 2, and rates
/// each arm by `A_best / A_arm`, where `A_best` is the smallest criterion
/// reached by any arm with the same seed.
pub fn efficiency_study(
    pipeline: &SesePipeline,
    entries: &[Entry],
    plots: &DesignFrame,
    relmats: &Relmats,
    seeds: &[u64],
    maxit: Option<usize>,
) -> Result<EfficiencyResult> {
    if seeds.is_empty() {
        return Err(Error::Efficiency("no seeds given".into()));
    }
    let s3 = &pipeline.stage3;
    let identity1 = identity_equivalent(&s3.step1, relmats)?;
    let identity2 = identity_equivalent(&s3.step2, relmats)?;
    let (_, true_doc) = stage3_documents(&s3.step1, &s3.step2, &s3.setup);
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<f64>> {
            let opts = RunOptions {
                seed,
                maxit,
                deterministic: true,
            };
            let results: Vec<Result<f64>> = Arm::ALL
                .par_iter()
                .map(|arm| {
                    let mut p = pipeline.clone();
                    p.stage2.informed = arm.informed;
                    if !arm.plot_relatedness {
                        p.stage3.step1 = identity1.clone();
                        p.stage3.step2 = identity2.clone();
                    }
                    let out = run_sese(&p, entries, plots, Some(relmats), opts, |_, _| {})?;
                    let spec = ModelSpec::from_document(&true_doc, &out.step2_design)?;
                    let ws = build_workspace(&spec, &out.step2_design, Some(relmats))?;
                    ws.criterion(&(0..ws.n).collect::<Vec<_>>())
                })
                .collect();
            results.into_iter().collect()
        })
        .collect::<Result<_>>()?;
    let arms = Arm::ALL
        .iter()
        .enumerate()
        .map(|(k, arm)| {
            let a: Vec<f64> = per_seed.iter().map(|v| v[k]).collect();
            let e: Vec<f64> = per_seed
                .iter()
                .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min) / v[k])
                .collect();
            ArmSummary {
                label: arm.label(),
                mean_a: a.iter().sum::<f64>() / a.len() as f64,
                mean_e: e.iter().sum::<f64>() / e.len() as f64,
                a,
                e,
            }
        })
        .collect();
    Ok(EfficiencyResult {
        seeds: seeds.to_vec(),
        arms,
    })
}
