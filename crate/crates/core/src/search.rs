//! Tabu search with random-walk perturbation over pairwise interchanges of
//! the rows carried by units.
//!
//! One loop visits every unit once in random order. For each anchor unit a
//! neighbourhood sweep evaluates up to `partners` interchanges with units of
//! the same swap class and keeps the best admissible one. A move is committed
//! when it improves the current design, or when it is tabu but beats the
//! best design seen so far. Committed pairs stay tabu for `tenure` sweeps.
//! After `stagnation` loops without a new best, or after a sweep in which
//! every candidate is tabu, `rw_steps` random admissible interchanges are
//! applied unconditionally.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::DesignFrame;
use crate::mme::{CriterionState, MmeWorkspace, SwapValue};
use crate::spec::{BlockIndexer, ModelSpec, SearchSection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    TabuRw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub maxit: usize,
    pub tenure: usize,
    pub rw_steps: usize,
    pub stagnation: usize,
    /// Candidate partners evaluated per anchor unit.
    pub partners: usize,
    pub refactor_every: usize,
    pub seed: u64,
    pub lower_bound: Option<f64>,
    pub mode: SearchMode,
    /// Evaluate candidates on one thread.
    pub deterministic: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            maxit: 15,
            tenure: 20,
            rw_steps: 5,
            stagnation: 3,
            partners: 20,
            refactor_every: 500,
            seed: 1,
            lower_bound: None,
            mode: SearchMode::TabuRw,
            deterministic: true,
        }
    }
}

impl SearchConfig {
    pub fn from_section(s: &SearchSection) -> Result<SearchConfig> {
        let d = SearchConfig::default();
        let mode = match s.mode.as_deref() {
            None | Some("tabu+rw") | Some("tabu_rw") => SearchMode::TabuRw,
            Some(other) => return Err(Error::Search(format!("unknown search mode `{other}`"))),
        };
        Ok(SearchConfig {
            maxit: s.maxit.unwrap_or(d.maxit),
            tenure: s.tenure.unwrap_or(d.tenure),
            rw_steps: s.rw_steps.unwrap_or(d.rw_steps),
            stagnation: s.stagnation.unwrap_or(d.stagnation).max(1),
            partners: s.partners.unwrap_or(d.partners).max(1),
            refactor_every: s.refactor_every.unwrap_or(d.refactor_every).max(1),
            seed: s.seed.unwrap_or(d.seed),
            lower_bound: s.lower_bound,
            mode,
            deterministic: d.deterministic,
        })
    }
}

/// Spread constraint: a treatment with `r` copies may occupy each level of
/// the factor at most `ceil(r / levels)` times.
#[derive(Debug, Clone)]
struct Spread {
    name: String,
    level: Vec<usize>,
    counts: HashMap<(usize, usize), u32>,
    limit: Vec<u32>,
}

impl Spread {
    fn count(&self, t: usize, l: usize) -> u32 {
        self.counts.get(&(t, l)).copied().unwrap_or(0)
    }

    fn allows(&self, ti: usize, tj: usize, i: usize, j: usize) -> bool {
        let (li, lj) = (self.level[i], self.level[j]);
        li == lj
            || (self.count(ti, lj) < self.limit[ti] && self.count(tj, li) < self.limit[tj])
    }

    fn apply(&mut self, ti: usize, tj: usize, i: usize, j: usize) {
        let (li, lj) = (self.level[i], self.level[j]);
        if li == lj {
            return;
        }
        for (t, from, to) in [(ti, li, lj), (tj, lj, li)] {
            *self.counts.entry((t, from)).or_default() -= 1;
            *self.counts.entry((t, to)).or_default() += 1;
        }
    }
}

/// A design under search: the row carried by each unit plus cached
/// criterion state and the best design seen.
#[derive(Debug, Clone)]
pub struct DesignState {
    pub perm: Vec<usize>,
    pub swap_class: Vec<usize>,
    pub criterion: CriterionState,
    pub best_perm: Vec<usize>,
    pub best_value: f64,
    /// Treatment identity of each row (equal ids give equal `W₁` rows).
    pub treatment: Vec<usize>,
    spread: Vec<Spread>,
    class_members: Vec<Vec<usize>>,
}

impl DesignState {
    /// State for the design `perm` (unit `u` carries frame row `perm[u]`).
    pub fn new(
        ws: &MmeWorkspace,
        spec: &ModelSpec,
        frame: &DesignFrame,
        perm: Vec<usize>,
    ) -> Result<DesignState> {
        let n = ws.n;
        if perm.len() != n {
            return Err(Error::Dimension(format!("design has {} units, frame {}", perm.len(), n)));
        }
        let mut seen = vec![false; n];
        for &r in &perm {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Search("design is not a permutation of the rows".into()));
            }
        }
        let treatment = treatment_ids(ws);
        let nt = treatment.iter().copied().max().map_or(0, |m| m + 1);
        let mut reps = vec![0u32; nt];
        for &t in &treatment {
            reps[t] += 1;
        }
        let mut spread = Vec::new();
        for name in &spec.binary {
            let c = frame.require(name)?;
            let nl = frame.levels(c).len() as u32;
            let level: Vec<usize> = (0..n).map(|u| frame.code(c, u)).collect();
            let mut counts = HashMap::new();
            for u in 0..n {
                *counts.entry((treatment[perm[u]], level[u])).or_default() += 1;
            }
            let limit: Vec<u32> = reps.iter().map(|&r| r.div_ceil(nl)).collect();
            let s = Spread {
                name: name.clone(),
                level,
                counts,
                limit,
            };
            if let Some((&(t, l), &k)) = s.counts.iter().find(|(&(t, _), &k)| k > s.limit[t]) {
                return Err(Error::Constraint(format!(
                    "initial design places a treatment {k} times in level {} of `{}` (limit {}, treatment row {})",
                    frame.levels(c)[l],
                    s.name,
                    s.limit[t],
                    treatment.iter().position(|&x| x == t).unwrap_or(0)
                )));
            }
            spread.push(s);
        }
        let nclass = ws.swap_class.iter().copied().max().map_or(0, |m| m + 1);
        let mut class_members = vec![Vec::new(); nclass];
        for (u, &c) in ws.swap_class.iter().enumerate() {
            class_members[c].push(u);
        }
        let criterion = CriterionState::new(ws, &perm)?;
        let best_value = criterion.value();
        Ok(DesignState {
            best_perm: perm.clone(),
            perm,
            swap_class: ws.swap_class.clone(),
            criterion,
            best_value,
            treatment,
            spread,
            class_members,
        })
    }

    pub fn value(&self) -> f64 {
        self.criterion.value()
    }

    /// Same class, different treatments and every spread constraint kept.
    pub fn admissible(&self, i: usize, j: usize) -> bool {
        if i == j || self.swap_class[i] != self.swap_class[j] {
            return false;
        }
        let (ti, tj) = (self.treatment[self.perm[i]], self.treatment[self.perm[j]]);
        ti != tj && self.spread.iter().all(|s| s.allows(ti, tj, i, j))
    }

    fn commit(&mut self, ws: &MmeWorkspace, i: usize, j: usize) -> Result<()> {
        let (ti, tj) = (self.treatment[self.perm[i]], self.treatment[self.perm[j]]);
        for s in &mut self.spread {
            s.apply(ti, tj, i, j);
        }
        self.criterion.commit(ws, &mut self.perm, i, j)?;
        if self.criterion.value() < self.best_value {
            self.best_value = self.criterion.value();
            self.best_perm.clone_from(&self.perm);
        }
        Ok(())
    }

    /// Every admissible interchange as `(i, j)` with `i < j`, in unit order.
    pub fn propose_moves(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.class_members.iter().flat_map(move |members| {
            members.iter().enumerate().flat_map(move |(a, &i)| {
                members[a + 1..]
                    .iter()
                    .filter(move |&&j| self.admissible(i, j))
                    .map(move |&j| (i, j))
            })
        })
    }
}

fn treatment_ids(ws: &MmeWorkspace) -> Vec<usize> {
    let keys: Vec<&Vec<usize>> = ws
        .permute_blocks()
        .filter_map(|b| match &b.indexer {
            BlockIndexer::Permute { treat_key, .. } => Some(treat_key),
            BlockIndexer::Static(_) => None,
        })
        .collect();
    let mut ids: HashMap<Vec<usize>, usize> = HashMap::new();
    (0..ws.n)
        .map(|r| {
            let key: Vec<usize> = keys.iter().map(|k| k[r]).collect();
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect()
}

/// Where candidate pairs come from in a sweep.
#[derive(Debug, Clone, Copy)]
pub enum Neighbourhood {
    /// Pairs `(anchor, j)` with `j` in the anchor's class.
    Anchor(usize),
    /// Pairs drawn uniformly from the whole admissible neighbourhood.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub tabu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    /// Best non-tabu move, or an aspirating tabu move.
    pub best: Option<Move>,
    pub evaluated: usize,
    /// Every admissible candidate was tabu and none aspirated.
    pub all_tabu: bool,
}

/// Tabu list keyed by unordered unit pair, expiring at a sweep count.
#[derive(Debug, Clone, Default)]
pub struct TabuList {
    until: HashMap<(usize, usize), u64>,
    now: u64,
}

impl TabuList {
    fn key(i: usize, j: usize) -> (usize, usize) {
        (i.min(j), i.max(j))
    }

    pub fn is_tabu(&self, i: usize, j: usize) -> bool {
        self.until.get(&Self::key(i, j)).is_some_and(|&t| t > self.now)
    }

    pub fn forbid(&mut self, i: usize, j: usize, tenure: usize) {
        if tenure > 0 {
            self.until.insert(Self::key(i, j), self.now + tenure as u64);
        }
    }

    pub fn tick(&mut self) {
        self.now += 1;
        if self.until.len() > 4096 {
            let now = self.now;
            self.until.retain(|_, &mut t| t > now);
        }
    }
}

fn candidates<R: Rng>(
    state: &DesignState,
    hood: Neighbourhood,
    cap: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    match hood {
        Neighbourhood::Anchor(i) => {
            let members = &state.class_members[state.swap_class[i]];
            let others = members.len().saturating_sub(1);
            let pick: Vec<usize> = if others <= cap {
                members.iter().copied().filter(|&j| j != i).collect()
            } else {
                let pos = members.iter().position(|&u| u == i).unwrap_or(0);
                sample(rng, others, cap)
                    .into_iter()
                    .map(|k| members[if k >= pos { k + 1 } else { k }])
                    .collect()
            };
            pick.into_iter()
                .filter(|&j| state.admissible(i, j))
                .map(|j| (i, j))
                .collect()
        }
        Neighbourhood::Global => {
            let all: Vec<(usize, usize)> = state.propose_moves().collect();
            if all.len() <= cap {
                all
            } else {
                sample(rng, all.len(), cap).into_iter().map(|k| all[k]).collect()
            }
        }
    }
}

fn better(a: &Move, b: &Move) -> bool {
    a.value < b.value || (a.value == b.value && (a.i, a.j) < (b.i, b.j))
}

/// Evaluates up to `cap` candidate interchanges and returns the best
/// admissible move: the best non-tabu one, or the best tabu one when it
/// beats the best design seen.
pub fn neighbourhood_sweep<R: Rng>(
    state: &DesignState,
    ws: &MmeWorkspace,
    tabu: &TabuList,
    hood: Neighbourhood,
    cap: usize,
    deterministic: bool,
    rng: &mut R,
) -> Result<SweepOutcome> {
    let cands = candidates(state, hood, cap, rng);
    let eval = |&(i, j): &(usize, usize)| -> Result<Move> {
        let v = state.criterion.swap_update(ws, &state.perm, i, j)?;
        Ok(Move {
            i,
            j,
            value: v.as_f64(state.value()),
            tabu: tabu.is_tabu(i, j),
        })
    };
    let moves: Vec<Move> = if deterministic || cands.len() < 64 {
        cands.iter().map(eval).collect::<Result<_>>()?
    } else {
        cands.par_iter().map(eval).collect::<Result<_>>()?
    };
    let mut best_free: Option<Move> = None;
    let mut best_tabu: Option<Move> = None;
    for m in moves.iter().filter(|m| m.value.is_finite()) {
        let slot = if m.tabu { &mut best_tabu } else { &mut best_free };
        if slot.as_ref().is_none_or(|b| better(m, b)) {
            *slot = Some(*m);
        }
    }
    let aspirating = best_tabu.filter(|t| {
        improves(t.value, state.best_value) && best_free.as_ref().is_none_or(|f| better(t, f))
    });
    let best = aspirating.or(best_free);
    Ok(SweepOutcome {
        best,
        evaluated: moves.len(),
        all_tabu: best.is_none() && best_tabu.is_some(),
    })
}

fn improves(candidate: f64, reference: f64) -> bool {
    candidate < reference - 1e-12 * reference.abs().max(1e-300)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    pub iteration: usize,
    pub current: f64,
    pub best: f64,
    pub committed: usize,
    pub evaluated: usize,
    pub random_walk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub config: SearchConfig,
    pub initial_value: f64,
    /// Criterion of the best design, recomputed from scratch.
    pub best_value: f64,
    pub loops: usize,
    pub stopped_at_bound: bool,
    pub evaluations: u64,
    pub trace: Vec<LoopTrace>,
    /// Every committed interchange, in order.
    pub swaps: Vec<(usize, usize)>,
    /// Number of leading `swaps` that produce the best design.
    pub best_after: usize,
    pub initial_perm: Vec<usize>,
    pub best_perm: Vec<usize>,
}

impl SearchReport {
    /// Replays the first `count` committed swaps from the initial design.
    pub fn replay(&self, count: usize) -> Vec<usize> {
        let mut p = self.initial_perm.clone();
        for &(i, j) in &self.swaps[..count] {
            p.swap(i, j);
        }
        p
    }
}

/// Runs the search from `state`, leaving the best design in
/// `state.best_perm`. `progress` receives each loop's trace.
pub fn tabu_rw_search(
    state: &mut DesignState,
    ws: &MmeWorkspace,
    cfg: &SearchConfig,
    mut progress: impl FnMut(&LoopTrace),
) -> Result<SearchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    state.criterion = state
        .criterion
        .clone()
        .with_refactor_every(cfg.refactor_every);
    let initial_perm = state.perm.clone();
    let initial_value = state.value();
    state.best_perm.clone_from(&state.perm);
    state.best_value = initial_value;
    let mut tabu = TabuList::default();
    let mut swaps: Vec<(usize, usize)> = Vec::new();
    let mut best_after = 0;
    let mut trace = Vec::new();
    let mut evaluations = 0u64;
    let mut stale = 0;
    let mut stopped_at_bound = false;
    let at_bound = |v: f64| cfg.lower_bound.is_some_and(|lb| v <= lb + 1e-10);
    let mut units: Vec<usize> = (0..ws.n).collect();
    let mut loops = 0;

    let record = |state: &DesignState, swaps: &mut Vec<(usize, usize)>, best_after: &mut usize, i, j| {
        swaps.push((i, j));
        if state.best_perm == state.perm && state.best_value == state.value() {
            *best_after = swaps.len();
        }
    };

    while loops < cfg.maxit && !stopped_at_bound {
        loops += 1;
        let best_before = state.best_value;
        let mut committed = 0;
        let mut evaluated = 0;
        let mut walk = false;
        units.shuffle(&mut rng);
        for &u in &units {
            let out = neighbourhood_sweep(
                state,
                ws,
                &tabu,
                Neighbourhood::Anchor(u),
                cfg.partners,
                cfg.deterministic,
                &mut rng,
            )?;
            evaluated += out.evaluated;
            tabu.tick();
            if out.all_tabu {
                random_walk(state, ws, &mut tabu, cfg, &mut rng, &mut |s, i, j| {
                    record(s, &mut swaps, &mut best_after, i, j)
                })?;
                walk = true;
                continue;
            }
            let Some(m) = out.best else { continue };
            if improves(m.value, state.value()) || m.tabu {
                state.commit(ws, m.i, m.j)?;
                record(state, &mut swaps, &mut best_after, m.i, m.j);
                tabu.forbid(m.i, m.j, cfg.tenure);
                committed += 1;
                if at_bound(state.best_value) {
                    stopped_at_bound = true;
                    break;
                }
            }
        }
        evaluations += evaluated as u64;
        if improves(state.best_value, best_before) {
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.stagnation && !stopped_at_bound && loops < cfg.maxit {
            random_walk(state, ws, &mut tabu, cfg, &mut rng, &mut |s, i, j| {
                record(s, &mut swaps, &mut best_after, i, j)
            })?;
            walk = true;
            stale = 0;
        }
        let t = LoopTrace {
            iteration: loops,
            current: state.value(),
            best: state.best_value,
            committed,
            evaluated,
            random_walk: walk,
        };
        progress(&t);
        trace.push(t);
    }

    let best_perm = state.best_perm.clone();
    let best_value = if swaps.is_empty() { initial_value } else { ws.criterion(&best_perm)? };
    Ok(SearchReport {
        config: cfg.clone(),
        initial_value,
        best_value,
        loops,
        stopped_at_bound,
        evaluations,
        trace,
        swaps,
        best_after,
        initial_perm,
        best_perm,
    })
}

/// Independent seed for stream `stream` of a run seeded with `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Columns that travel with the permuted rows: treatment factors plus any
/// `reorder` columns.
pub fn moving_columns(spec: &ModelSpec, frame: &DesignFrame) -> Result<Vec<usize>> {
    let mut names = spec.treatment_factors();
    for r in &spec.reorder {
        if !names.contains(r) {
            names.push(r.clone());
        }
    }
    names.iter().map(|n| frame.require(n)).collect()
}

/// Searches from the design held in `frame` and returns the best design as
/// a frame in the same row order together with the report.
pub fn run_design(
    spec: &ModelSpec,
    frame: &DesignFrame,
    relmats: Option<&crate::relatedness::Relmats>,
    cfg: &SearchConfig,
    progress: impl FnMut(&LoopTrace),
) -> Result<(DesignFrame, SearchReport)> {
    let ws = crate::mme::build_workspace(spec, frame, relmats)?;
    let mut state = DesignState::new(&ws, spec, frame, (0..ws.n).collect())?;
    let report = tabu_rw_search(&mut state, &ws, cfg, progress)?;
    let cols = moving_columns(spec, frame)?;
    Ok((frame.permute_columns(&cols, &report.best_perm), report))
}

fn random_walk(
    state: &mut DesignState,
    ws: &MmeWorkspace,
    tabu: &mut TabuList,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
    record: &mut dyn FnMut(&DesignState, usize, usize),
) -> Result<()> {
    let mut done = 0;
    let mut attempts = 0;
    while done < cfg.rw_steps && attempts < 50 * cfg.rw_steps.max(1) {
        attempts += 1;
        let i = rng.gen_range(0..ws.n);
        let members = &state.class_members[state.swap_class[i]];
        if members.len() < 2 {
            continue;
        }
        let j = members[rng.gen_range(0..members.len())];
        if !state.admissible(i, j) {
            continue;
        }
        if let SwapValue::Inestimable = state.criterion.swap_update(ws, &state.perm, i, j)? {
            continue;
        }
        state.commit(ws, i, j)?;
        record(state, i, j);
        tabu.forbid(i, j, cfg.tenure);
        done += 1;
    }
    Ok(())
}
