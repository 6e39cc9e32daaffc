//! Mixed-model equations reduced to the permute effects, and the
//! A-criterion over objective contrasts with a low-rank swap update.
//!
//! For a design in which unit `u` carries row `perm[u]`, the reduced
//! coefficient matrix is `C₁₁ = W₁ᵀP₂W₁ + G*₁` with
//! `P₂ = R⁻¹ − R⁻¹W₂(W₂ᵀR⁻¹W₂ + G*₂)⁻W₂ᵀR⁻¹`, and
//! `Λ = D C₁₁⁻ Dᵀ`. The criterion is
//! `A = 2/(l−1)·(tr Λ − 1ᵀΛ1/l)`, the mean prediction-error variance over
//! all unordered pairs of objective effects. With a single objective effect
//! `A = Λ₁₁`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, SymmetricEigen};

use crate::error::{Error, Result};
use crate::frame::DesignFrame;
use crate::relatedness::{ric_variance, RelationshipMatrix, Relmats};
use crate::spec::{
    expand_terms, BlockIndexer, BlockPart, ColumnBlock, Component, CsForm, ModelSpec, Term,
    VarianceFn,
};

/// Sparse objective contrast matrix `D` over permute columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub rows: Vec<Vec<(usize, f64)>>,
    pub labels: Vec<String>,
}

impl Objective {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self, p: usize) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows.len(), p);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                d[(r, c)] += v;
            }
        }
        d
    }

    /// `D M Dᵀ` for a dense `p × p` matrix `M`.
    pub fn sandwich(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.rows.len();
        let mut out = DMatrix::zeros(l, l);
        for a in 0..l {
            for b in a..l {
                let mut s = 0.0;
                for &(ca, va) in &self.rows[a] {
                    for &(cb, vb) in &self.rows[b] {
                        s += va * vb * m[(ca, cb)];
                    }
                }
                out[(a, b)] = s;
                out[(b, a)] = s;
            }
        }
        out
    }
}

/// Everything about a design problem that does not change while units
/// exchange rows.
#[derive(Debug, Clone)]
pub struct MmeWorkspace {
    pub blocks: Vec<ColumnBlock>,
    pub n: usize,
    /// Permute columns (objective blocks first, then linked).
    pub p: usize,
    /// Static columns.
    pub s: usize,
    pub rinv: Vec<f64>,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
    /// Static columns (relative to `p`) hit by each unit.
    pub w2: Vec<Vec<usize>>,
    pub p2: DMatrix<f64>,
    pub objective: Objective,
    pub swap_class: Vec<usize>,
    /// Candidate null directions of `C₁₁` from fixed permute blocks.
    pub null_candidates: DMatrix<f64>,
    /// Largest diagonal of `W₁ᵀR⁻¹W₁ + G*₁`, the reference for rank decisions.
    pub scale: f64,
    permute_blocks: Vec<usize>,
}

impl MmeWorkspace {
    pub fn permute_blocks(&self) -> impl Iterator<Item = &ColumnBlock> {
        self.permute_blocks.iter().map(|&b| &self.blocks[b])
    }

    /// Columns of `W₁` set in the row of `unit` when it carries `row`.
    #[inline]
    pub fn w1_row(&self, unit: usize, row: usize, out: &mut Vec<usize>) {
        out.clear();
        for &b in &self.permute_blocks {
            let blk = &self.blocks[b];
            out.push(blk.offset + blk.column(unit, row));
        }
    }

    /// True when rows `a` and `b` give identical `W₁` rows on every unit.
    pub fn same_treatment(&self, a: usize, b: usize) -> bool {
        self.permute_blocks().all(|blk| match &blk.indexer {
            BlockIndexer::Permute { treat_key, .. } => treat_key[a] == treat_key[b],
            BlockIndexer::Static(_) => true,
        })
    }

    pub fn w1_dense(&self, perm: &[usize]) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.p);
        let mut cols = Vec::new();
        for (u, &r) in perm.iter().enumerate() {
            self.w1_row(u, r, &mut cols);
            for &c in &cols {
                w[(u, c)] += 1.0;
            }
        }
        w
    }

    pub fn w2_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.s);
        for (u, cols) in self.w2.iter().enumerate() {
            for &c in cols {
                w[(u, c)] += 1.0;
            }
        }
        w
    }

    /// Columns of `W₂` belonging to fixed static terms.
    pub fn fixed_static_columns(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.part == BlockPart::Static && b.fixed)
            .flat_map(|b| (b.offset - self.p)..(b.offset - self.p + b.columns))
            .collect()
    }

    /// `B = W₁ᵀP₂` (`p × n`).
    fn w1t_p2(&self, perm: &[usize]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.p, self.n);
        let mut cols = Vec::new();
        let rows: Vec<Vec<usize>> = perm
            .iter()
            .enumerate()
            .map(|(u, &r)| {
                self.w1_row(u, r, &mut cols);
                cols.clone()
            })
            .collect();
        for v in 0..self.n {
            let p2v = self.p2.column(v);
            let mut bv = b.column_mut(v);
            for (u, cs) in rows.iter().enumerate() {
                let x = p2v[u];
                if x != 0.0 {
                    for &c in cs {
                        bv[c] += x;
                    }
                }
            }
        }
        b
    }

    /// `C₁₁ = W₁ᵀP₂W₁ + G*₁` for the design `perm`.
    pub fn absorb_static(&self, perm: &[usize]) -> DMatrix<f64> {
        let b = self.w1t_p2(perm);
        self.c11_from(&b, perm)
    }

    fn c11_from(&self, b: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
        let mut c = self.g1.clone();
        let mut cols = Vec::new();
        for (u, &r) in perm.iter().enumerate() {
            self.w1_row(u, r, &mut cols);
            for &k in &cols {
                for q in 0..self.p {
                    c[(q, k)] += b[(q, u)];
                }
            }
        }
        c.fill_lower_triangle_with_upper_triangle();
        c
    }

    /// Full (non-incremental) criterion of `perm`.
    pub fn criterion(&self, perm: &[usize]) -> Result<f64> {
        let c11 = self.absorb_static(perm);
        let g = GInverse::new(&c11, Some(&self.null_candidates), self.scale)?;
        check_estimable(&c11, &g, &self.objective)?;
        acriterion(&self.objective.sandwich(&g.inverse))
    }

    /// `Λ = D C₁₁⁻ Dᵀ`, failing when the objective contrasts are not
    /// estimable.
    pub fn lambda_from_c11(&self, c11: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let g = GInverse::new(c11, Some(&self.null_candidates), self.scale)?;
        check_estimable(c11, &g, &self.objective)?;
        Ok(self.objective.sandwich(&g.inverse))
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if self.swap_class[i] != self.swap_class[j] {
            return Err(Error::CrossClassSwap(i, j));
        }
        Ok(())
    }
}

/// Builds the workspace for `frame`, which also serves as the identity
/// design: unit `u` initially carries row `u`.
pub fn build_workspace(
    spec: &ModelSpec,
    frame: &DesignFrame,
    relmats: Option<&Relmats>,
) -> Result<MmeWorkspace> {
    let n = frame.nrows();
    let blocks = expand_terms(spec, frame, relmats)?;
    let permute_blocks: Vec<usize> = blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.part != BlockPart::Static)
        .map(|(i, _)| i)
        .collect();
    let p: usize = permute_blocks.iter().map(|&b| blocks[b].columns).sum();
    let total: usize = blocks.iter().map(|b| b.columns).sum();
    let s = total - p;

    let rinv = residual_weights(spec, frame)?;

    let mut g1 = DMatrix::zeros(p, p);
    let mut g2 = DMatrix::zeros(s, s);
    let mut fixed_candidates: Vec<DVector<f64>> = Vec::new();
    for blk in &blocks {
        let Some(term) = &blk.term else { continue };
        if blk.part == BlockPart::Static {
            if !blk.fixed {
                let v = param(spec, term, 0)?;
                for c in 0..blk.columns {
                    let k = blk.offset - p + c;
                    g2[(k, k)] = 1.0 / v;
                }
            }
            continue;
        }
        if blk.fixed {
            let mut ones = DVector::zeros(p);
            for c in 0..blk.columns {
                ones[blk.offset + c] = 1.0;
                if !blk.present[c] {
                    let mut e = DVector::zeros(p);
                    e[blk.offset + c] = 1.0;
                    fixed_candidates.push(e);
                }
            }
            fixed_candidates.push(ones);
            continue;
        }
        let penalty = block_penalty(spec, term, blk, relmats)?;
        g1.view_mut((blk.offset, blk.offset), (blk.columns, blk.columns))
            .copy_from(&penalty);
    }
    let null_candidates = if fixed_candidates.is_empty() {
        DMatrix::zeros(p, 0)
    } else {
        DMatrix::from_columns(&fixed_candidates)
    };

    let mut w2 = vec![Vec::new(); n];
    for blk in blocks.iter().filter(|b| b.part == BlockPart::Static) {
        for (u, cols) in w2.iter_mut().enumerate() {
            cols.push(blk.offset - p + blk.column(u, u));
        }
    }
    let p2 = absorption_matrix(&w2, &rinv, &g2, None);
    let mut info = g1.diagonal();
    for (u, &w) in rinv.iter().enumerate() {
        for blk in blocks.iter().filter(|b| b.part != BlockPart::Static) {
            info[blk.offset + blk.column(u, u)] += w;
        }
    }
    let scale = info.iter().fold(0.0_f64, |a, v| a.max(*v)).max(f64::MIN_POSITIVE);
    let objective = build_objective(spec, &blocks)?;
    let swap_class = match &spec.swap {
        Some(f) => {
            let c = frame.require(f)?;
            frame.codes(c).iter().map(|&x| x as usize).collect()
        }
        None => vec![0; n],
    };

    Ok(MmeWorkspace {
        blocks,
        n,
        p,
        s,
        rinv,
        g1,
        g2,
        w2,
        p2,
        objective,
        swap_class,
        null_candidates,
        scale,
        permute_blocks,
    })
}

fn param(spec: &ModelSpec, t: &Term, k: usize) -> Result<f64> {
    spec.params_of(t).get(k).copied().ok_or_else(|| Error::ParamCount {
        term: t.to_string(),
        expected: k + 1,
        found: spec.params_of(t).len(),
    })
}

fn residual_weights(spec: &ModelSpec, frame: &DesignFrame) -> Result<Vec<f64>> {
    let n = frame.nrows();
    let values = spec.params_of(&spec.residual);
    match &spec.residual.group {
        None => {
            let v = *values.first().ok_or_else(|| Error::ParamCount {
                term: spec.residual.to_string(),
                expected: 1,
                found: 0,
            })?;
            Ok(vec![1.0 / v; n])
        }
        Some(g) => {
            let c = frame.require(g)?;
            (0..n)
                .map(|u| {
                    values
                        .get(frame.code(c, u))
                        .map(|v| 1.0 / v)
                        .ok_or_else(|| Error::Dimension("residual group parameters".into()))
                })
                .collect()
        }
    }
}

fn identity_or(relmats: Option<&Relmats>, term: &Term, blk: &ColumnBlock) -> RelationshipMatrix {
    term.matrix
        .as_ref()
        .and_then(|m| relmats.and_then(|r| r.get(m)))
        .cloned()
        .unwrap_or_else(|| RelationshipMatrix::identity(blk.treat_labels.clone()))
}

fn inverse_pd(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Cholesky::new(m)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Indefinite(format!(" ({what})")))
}

/// `G*` block of a random permute term component.
fn block_penalty(
    spec: &ModelSpec,
    term: &Term,
    blk: &ColumnBlock,
    relmats: Option<&Relmats>,
) -> Result<DMatrix<f64>> {
    let scaled_identity = |v: f64, k: usize| DMatrix::<f64>::identity(k, k) / v;
    match term.variance {
        VarianceFn::Idv => Ok(scaled_identity(param(spec, term, 0)?, blk.columns)),
        VarianceFn::Ric => {
            let g = identity_or(relmats, term, blk);
            Ok(ric_variance(&g, param(spec, term, 0)?, param(spec, term, 1)?)?.inverse)
        }
        VarianceFn::Vm => {
            let g = identity_or(relmats, term, blk);
            Ok(g.inverse()? / param(spec, term, 0)?)
        }
        VarianceFn::CsGenetic => {
            let g = identity_or(relmats, term, blk);
            let m = g.dim();
            let (da, pa, de, pe) = (
                param(spec, term, 0)?,
                param(spec, term, 1)?,
                param(spec, term, 2)?,
                param(spec, term, 3)?,
            );
            let id = DMatrix::<f64>::identity(m, m);
            let per_env = |inner: DMatrix<f64>| -> DMatrix<f64> {
                let t = blk.columns / m;
                let mut out = DMatrix::zeros(blk.columns, blk.columns);
                for e in 0..t {
                    out.view_mut((e * m, e * m), (m, m)).copy_from(&inner);
                }
                out
            };
            match (spec.cs_form, blk.component) {
                (CsForm::Total, Component::CsCommon) => {
                    inverse_pd(&g.dense * da + &id * de, "common genetic variance")
                }
                (CsForm::Total, Component::CsSpecific) => Ok(per_env(inverse_pd(
                    &g.dense * pa + &id * pe,
                    "specific genetic variance",
                )?)),
                (_, Component::CsAdditive) => Ok(g.inverse()? / da),
                (_, Component::CsNonAdditive) => Ok(id / de),
                (_, Component::CsAdditiveSpecific) => Ok(per_env(g.inverse()? / pa)),
                (_, Component::CsNonAdditiveSpecific) => {
                    Ok(DMatrix::identity(blk.columns, blk.columns) / pe)
                }
                _ => Err(Error::InvalidTerm(format!("unexpected component of `{term}`"))),
            }
        }
        VarianceFn::Fixed | VarianceFn::Dsum => Err(Error::InvalidTerm(format!(
            "`{term}` has no random-effect penalty"
        ))),
    }
}

fn is_specific(c: Component) -> bool {
    matches!(
        c,
        Component::CsSpecific | Component::CsAdditiveSpecific | Component::CsNonAdditiveSpecific
    )
}

fn build_objective(spec: &ModelSpec, blocks: &[ColumnBlock]) -> Result<Objective> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for term in &spec.objective {
        let own: Vec<&ColumnBlock> = blocks
            .iter()
            .filter(|b| {
                b.part == BlockPart::Objective
                    && b.term.as_ref().map(Term::label) == Some(term.label())
            })
            .collect();
        let specific = own.iter().find(|b| is_specific(b.component));
        for main in own.iter().filter(|b| !is_specific(b.component)) {
            let span = main.span();
            for col in 0..main.columns {
                if !main.present[col] {
                    continue;
                }
                let treat = main.treat_label(col).unwrap_or_default();
                if spec.objective_exclude.iter().any(|x| x == treat) {
                    continue;
                }
                let mut row = vec![(main.offset + col, 1.0)];
                if let Some(sb) = specific {
                    let t = sb.columns / sb.span();
                    for e in 0..t {
                        row.push((sb.offset + e * sb.span() + col, 1.0 / t as f64));
                    }
                }
                rows.push(row);
                labels.push(if main.columns > span {
                    format!("{}:{}", col / span, treat)
                } else {
                    treat.to_owned()
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidTerm("objective selects no effects".into()));
    }
    Ok(Objective { rows, labels })
}

/// `P₂` from the static design, residual weights and static penalty. The
/// generalized inverse of `W₂ᵀR⁻¹W₂ + G*₂` is formed by a pivoted
/// factorization that visits columns in `order` (natural order when `None`)
/// and skips pivots that vanish.
pub fn absorption_matrix(
    w2: &[Vec<usize>],
    rinv: &[f64],
    g2: &DMatrix<f64>,
    order: Option<&[usize]>,
) -> DMatrix<f64> {
    let n = rinv.len();
    let s = g2.nrows();
    let mut p2 = DMatrix::from_diagonal(&DVector::from_column_slice(rinv));
    if s == 0 {
        return p2;
    }
    let mut x = DMatrix::zeros(n, s);
    for (u, cols) in w2.iter().enumerate() {
        for &c in cols {
            x[(u, c)] += rinv[u];
        }
    }
    let mut m = g2.clone();
    for (u, cols) in w2.iter().enumerate() {
        for &a in cols {
            for &b in cols {
                m[(a, b)] += rinv[u];
            }
        }
    }
    let natural: Vec<usize> = (0..s).collect();
    let minv = pivoted_ginverse(&m, order.unwrap_or(&natural));
    let y = &x * minv;
    p2.gemm(-1.0, &y, &x.transpose(), 1.0);
    p2
}

/// Generalized inverse of a symmetric positive semi-definite matrix: the
/// inverse of the leading non-singular principal submatrix found by visiting
/// columns in `order`, padded with zeros.
pub fn pivoted_ginverse(m: &DMatrix<f64>, order: &[usize]) -> DMatrix<f64> {
    let s = m.nrows();
    let scale = (0..s).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max).max(1e-300);
    let tol = 1e-10 * scale;
    let mut kept: Vec<usize> = Vec::new();
    // Rows of L for the kept columns, built incrementally.
    let mut l: Vec<Vec<f64>> = Vec::new();
    for &k in order {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &ka) in kept.iter().enumerate() {
            let mut v = m[(k, ka)];
            for b in 0..a {
                v -= row[b] * l[a][b];
            }
            row.push(v / l[a][a]);
        }
        let d = m[(k, k)] - row.iter().map(|v| v * v).sum::<f64>();
        if d > tol {
            row.push(d.sqrt());
            l.push(row);
            kept.push(k);
        }
    }
    let r = kept.len();
    let mut sub = DMatrix::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            sub[(a, b)] = m[(kept[a], kept[b])];
        }
    }
    let inv = Cholesky::new(sub)
        .map(|c| c.inverse())
        .expect("kept pivots are positive");
    let mut out = DMatrix::zeros(s, s);
    for a in 0..r {
        for b in 0..r {
            out[(kept[a], kept[b])] = inv[(a, b)];
        }
    }
    out
}

/// A generalized inverse of `C₁₁`, `(C₁₁ + s·NNᵀ)⁻¹`, where the orthonormal
/// columns of `N` span the null space of `C₁₁`.
#[derive(Debug, Clone)]
pub struct GInverse {
    pub inverse: DMatrix<f64>,
    pub null: DMatrix<f64>,
    pub shift: f64,
}

impl GInverse {
    /// `candidates` are directions likely to span the null space; when they
    /// do not, the null space is found from a full eigendecomposition.
    /// `scale` is the magnitude of a well-conditioned coefficient matrix for
    /// the same problem; pivots below `1e-9·scale` count as zero.
    pub fn new(c: &DMatrix<f64>, candidates: Option<&DMatrix<f64>>, scale: f64) -> Result<GInverse> {
        let p = c.nrows();
        let shift = scale;
        let null = match candidates {
            Some(v) if v.ncols() > 0 => null_combinations(c, v, scale),
            _ => DMatrix::zeros(p, 0),
        };
        let mut shifted = c.clone();
        if null.ncols() > 0 {
            shifted.gemm(shift, &null, &null.transpose(), 1.0);
        }
        if let Some(ch) = Cholesky::new(shifted.clone()) {
            let inverse = ch.inverse();
            if inverse.iter().all(|v| v.is_finite()) && pivots_ok(&ch, scale) {
                return Ok(GInverse {
                    inverse,
                    null,
                    shift,
                });
            }
        }
        Self::by_eigen(c, scale)
    }

    fn by_eigen(c: &DMatrix<f64>, scale: f64) -> Result<GInverse> {
        let p = c.nrows();
        let eig = SymmetricEigen::new(c.clone());
        let tol = 1e-9 * scale;
        if eig.eigenvalues.iter().any(|&v| v < -tol) {
            return Err(Error::Indefinite(" (reduced coefficient matrix)".into()));
        }
        let nulls: Vec<usize> = (0..p).filter(|&k| eig.eigenvalues[k] <= tol).collect();
        let null = DMatrix::from_fn(p, nulls.len(), |r, k| eig.eigenvectors[(r, nulls[k])]);
        let inv_vals = DVector::from_fn(p, |k, _| {
            let v = eig.eigenvalues[k];
            if v <= tol {
                1.0 / scale
            } else {
                1.0 / v
            }
        });
        let v = &eig.eigenvectors;
        let inverse = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
        Ok(GInverse {
            inverse,
            null,
            shift: scale,
        })
    }
}

fn pivots_ok(ch: &Cholesky<f64, nalgebra::Dyn>, scale: f64) -> bool {
    let l = ch.l_dirty();
    (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-9 * scale)
}

/// Orthonormal basis of `{v·y : C v y = 0}`.
fn null_combinations(c: &DMatrix<f64>, v: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let q = v.clone().qr().q();
    let small = q.transpose() * c * &q;
    let eig = SymmetricEigen::new(small);
    let tol = 1e-9 * scale;
    let keep: Vec<usize> = (0..q.ncols()).filter(|&k| eig.eigenvalues[k].abs() <= tol).collect();
    let y = DMatrix::from_fn(q.ncols(), keep.len(), |r, k| eig.eigenvectors[(r, keep[k])]);
    &q * y
}

/// Fails unless every objective pairwise contrast (or the single effect when
/// `l = 1`) is estimable, judged by the residual `C C⁻ Dᵀ − Dᵀ`.
fn check_estimable(c: &DMatrix<f64>, g: &GInverse, obj: &Objective) -> Result<()> {
    if g.null.ncols() == 0 {
        return Ok(());
    }
    let mut d = obj.to_dense(c.nrows());
    if d.nrows() > 1 {
        let mean = d.row_mean();
        for mut r in d.row_iter_mut() {
            r -= &mean;
        }
    }
    let rhs = d.transpose();
    let resid = c * (&g.inverse * &rhs) - &rhs;
    if resid.norm() > 1e-6 * rhs.norm().max(1e-300) {
        return Err(Error::Inestimable);
    }
    Ok(())
}

/// `2/(l−1)·(tr Λ − 1ᵀΛ1/l)`, or `Λ₁₁` when `l = 1`.
pub fn acriterion(lambda: &DMatrix<f64>) -> Result<f64> {
    let l = lambda.nrows();
    match l {
        0 => Err(Error::InvalidTerm("objective selects no effects".into())),
        1 => Ok(lambda[(0, 0)]),
        _ => {
            let lf = l as f64;
            Ok(2.0 / (lf - 1.0) * (lambda.trace() - lambda.sum() / lf))
        }
    }
}

/// Cached inverse state for a current design supporting cheap evaluation of
/// pairwise unit interchanges.
#[derive(Debug, Clone)]
pub struct CriterionState {
    /// Generalized inverse of `C₁₁` (shifted along its null space).
    cinv: DMatrix<f64>,
    /// `W₁ᵀP₂`.
    b: DMatrix<f64>,
    /// `C₁₁⁻W₁ᵀP₂`.
    f: DMatrix<f64>,
    null: DMatrix<f64>,
    value: f64,
    commits: usize,
    refactor_every: usize,
}

/// Outcome of an evaluated interchange.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwapValue {
    /// Same `W₁` rows; nothing changes.
    NoOp,
    Value(f64),
    /// The interchange would make the objective inestimable.
    Inestimable,
}

impl SwapValue {
    pub fn as_f64(self, current: f64) -> f64 {
        match self {
            SwapValue::NoOp => current,
            SwapValue::Value(v) => v,
            SwapValue::Inestimable => f64::INFINITY,
        }
    }
}

struct Update {
    /// Sparse columns of `Δ` for units `i` and `j`.
    delta: [Vec<(usize, f64)>; 2],
    k: Matrix4<f64>,
}

impl CriterionState {
    pub fn new(ws: &MmeWorkspace, perm: &[usize]) -> Result<CriterionState> {
        let b = ws.w1t_p2(perm);
        let c = ws.c11_from(&b, perm);
        let g = GInverse::new(&c, Some(&ws.null_candidates), ws.scale)?;
        check_estimable(&c, &g, &ws.objective)?;
        let f = &g.inverse * &b;
        let value = acriterion(&ws.objective.sandwich(&g.inverse))?;
        Ok(CriterionState {
            cinv: g.inverse,
            b,
            f,
            null: g.null,
            value,
            commits: 0,
            refactor_every: 500,
        })
    }

    pub fn with_refactor_every(mut self, every: usize) -> Self {
        self.refactor_every = every.max(1);
        self
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn lambda(&self, ws: &MmeWorkspace) -> DMatrix<f64> {
        ws.objective.sandwich(&self.cinv)
    }

    /// Generalized inverse of `C₁₁` currently held.
    pub fn c11_ginverse(&self) -> &DMatrix<f64> {
        &self.cinv
    }

    fn delta(ws: &MmeWorkspace, perm: &[usize], i: usize, j: usize) -> [Vec<(usize, f64)>; 2] {
        let mut old = Vec::new();
        let mut new = Vec::new();
        let mut out = [Vec::new(), Vec::new()];
        for (slot, (u, from, to)) in [(i, perm[i], perm[j]), (j, perm[j], perm[i])]
            .into_iter()
            .enumerate()
        {
            ws.w1_row(u, from, &mut old);
            ws.w1_row(u, to, &mut new);
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &c in &new {
                *acc.entry(c).or_default() += 1.0;
            }
            for &c in &old {
                *acc.entry(c).or_default() -= 1.0;
            }
            out[slot] = acc.into_iter().filter(|(_, v)| *v != 0.0).collect();
        }
        out
    }

    /// Solves the 4×4 core of the update; `None` when the post-swap
    /// coefficient matrix is singular or the null space would change.
    fn core(&self, ws: &MmeWorkspace, perm: &[usize], i: usize, j: usize) -> Option<Option<Update>> {
        let delta = Self::delta(ws, perm, i, j);
        if delta[0].is_empty() && delta[1].is_empty() {
            return Some(None);
        }
        if self.null.ncols() > 0 && !self.null_preserved(&delta, i, j) {
            return None;
        }
        let (bi, bj) = (self.b.column(i), self.b.column(j));
        let (fi, fj) = (self.f.column(i), self.f.column(j));
        let sparse_dot = |d: &[(usize, f64)], v: &nalgebra::DVectorView<f64>| -> f64 {
            d.iter().map(|&(c, x)| x * v[c]).sum()
        };
        let quad = |a: &[(usize, f64)], b: &[(usize, f64)]| -> f64 {
            let mut s = 0.0;
            for &(ca, va) in a {
                for &(cb, vb) in b {
                    s += va * vb * self.cinv[(ca, cb)];
                }
            }
            s
        };
        // UᵀC⁻U with U = [Δᵢ Δⱼ Bᵢ Bⱼ].
        let mut s = Matrix4::zeros();
        s[(0, 0)] = quad(&delta[0], &delta[0]);
        s[(0, 1)] = quad(&delta[0], &delta[1]);
        s[(1, 1)] = quad(&delta[1], &delta[1]);
        s[(0, 2)] = sparse_dot(&delta[0], &fi);
        s[(0, 3)] = sparse_dot(&delta[0], &fj);
        s[(1, 2)] = sparse_dot(&delta[1], &fi);
        s[(1, 3)] = sparse_dot(&delta[1], &fj);
        s[(2, 2)] = bi.dot(&fi);
        s[(2, 3)] = bi.dot(&fj);
        s[(3, 3)] = bj.dot(&fj);
        // M⁻¹ = [[0, I], [I, −EᵀP₂E]].
        s[(0, 2)] += 1.0;
        s[(1, 3)] += 1.0;
        s[(2, 2)] -= ws.p2[(i, i)];
        s[(2, 3)] -= ws.p2[(i, j)];
        s[(3, 3)] -= ws.p2[(j, j)];
        for a in 0..4 {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        // det(S) = det(C') / det(C) because det(M) = 1.
        let det = s.determinant();
        if !(det.abs() > 1e-11) {
            return None;
        }
        let k = s.try_inverse()?;
        Some(Some(Update { delta, k }))
    }

    fn null_preserved(&self, delta: &[Vec<(usize, f64)>; 2], i: usize, j: usize) -> bool {
        let tol = 1e-8;
        for k in 0..self.null.ncols() {
            let nk = self.null.column(k);
            for d in delta {
                let v: f64 = d.iter().map(|&(c, x)| x * nk[c]).sum();
                if v.abs() > tol {
                    return false;
                }
            }
            for u in [i, j] {
                let bu = self.b.column(u);
                if bu.dot(&nk).abs() > tol * bu.norm().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    /// `D Z` for `Z = C⁻U`, one row per objective effect.
    fn dz(&self, ws: &MmeWorkspace, up: &Update, i: usize, j: usize) -> Vec<[f64; 4]> {
        let (fi, fj) = (self.f.column(i), self.f.column(j));
        ws.objective
            .rows
            .iter()
            .map(|row| {
                let mut z = [0.0; 4];
                for &(c, w) in row {
                    for (slot, d) in up.delta.iter().enumerate() {
                        z[slot] += w * d.iter().map(|&(q, x)| x * self.cinv[(c, q)]).sum::<f64>();
                    }
                    z[2] += w * fi[c];
                    z[3] += w * fj[c];
                }
                z
            })
            .collect()
    }

    fn change(&self, ws: &MmeWorkspace, up: &Update, i: usize, j: usize) -> f64 {
        let dz = self.dz(ws, up, i, j);
        let l = dz.len();
        let mut mean = [0.0; 4];
        if l > 1 {
            for z in &dz {
                for k in 0..4 {
                    mean[k] += z[k] / l as f64;
                }
            }
        }
        let mut g = Matrix4::<f64>::zeros();
        for z in &dz {
            for a in 0..4 {
                for b in 0..4 {
                    g[(a, b)] += (z[a] - mean[a]) * (z[b] - mean[b]);
                }
            }
        }
        let kappa = if l > 1 { 2.0 / (l as f64 - 1.0) } else { 1.0 };
        -kappa * (up.k * g).trace()
    }

    /// Criterion of the design obtained by exchanging the rows carried by
    /// units `i` and `j`, without committing it.
    pub fn swap_update(&self, ws: &MmeWorkspace, perm: &[usize], i: usize, j: usize) -> Result<SwapValue> {
        ws.check_pair(i, j)?;
        Ok(match self.core(ws, perm, i, j) {
            Some(None) => SwapValue::NoOp,
            Some(Some(up)) => SwapValue::Value(self.value + self.change(ws, &up, i, j)),
            None => {
                let mut next = perm.to_vec();
                next.swap(i, j);
                match ws.criterion(&next) {
                    Ok(v) => SwapValue::Value(v),
                    Err(Error::Inestimable) | Err(Error::Indefinite(_)) => SwapValue::Inestimable,
                    Err(e) => return Err(e),
                }
            }
        })
    }

    /// Applies the interchange to `perm` and updates the cached state.
    pub fn commit(&mut self, ws: &MmeWorkspace, perm: &mut [usize], i: usize, j: usize) -> Result<()> {
        ws.check_pair(i, j)?;
        match self.core(ws, perm, i, j) {
            Some(None) => {
                perm.swap(i, j);
                Ok(())
            }
            Some(Some(up)) => {
                let change = self.change(ws, &up, i, j);
                self.apply(ws, &up, i, j);
                perm.swap(i, j);
                self.value += change;
                self.commits += 1;
                if self.commits >= self.refactor_every {
                    self.refactor(ws, perm)?;
                }
                Ok(())
            }
            None => {
                let mut next = perm.to_vec();
                next.swap(i, j);
                let fresh = CriterionState::new(ws, &next)?;
                perm.swap(i, j);
                *self = fresh.with_refactor_every(self.refactor_every);
                Ok(())
            }
        }
    }

    fn apply(&mut self, ws: &MmeWorkspace, up: &Update, i: usize, j: usize) {
        let p = ws.p;
        let n = ws.n;
        // Z = C⁻U in full.
        let mut z = DMatrix::<f64>::zeros(p, 4);
        for (slot, d) in up.delta.iter().enumerate() {
            for &(q, x) in d {
                z.column_mut(slot).axpy(x, &self.cinv.column(q), 1.0);
            }
        }
        z.column_mut(2).copy_from(&self.f.column(i));
        z.column_mut(3).copy_from(&self.f.column(j));
        // B' = B + Δ Eᵀ P₂.
        for (slot, u) in [i, j].into_iter().enumerate() {
            for &(q, x) in &up.delta[slot] {
                for v in 0..n {
                    self.b[(q, v)] += x * ws.p2[(u, v)];
                }
            }
        }
        let kdyn = DMatrix::from_fn(4, 4, |a, b| up.k[(a, b)]);
        let zk = &z * &kdyn;
        // C⁻' = C⁻ − Z K Zᵀ.
        self.cinv.gemm(-1.0, &zk, &z.transpose(), 1.0);
        // F' = F + (C⁻Δ) Eᵀ P₂ − Z K (Zᵀ B').
        for (slot, u) in [i, j].into_iter().enumerate() {
            let zc = z.column(slot).into_owned();
            let row = ws.p2.row(u).into_owned();
            self.f.ger(1.0, &zc, &row.transpose(), 1.0);
        }
        let ztb = z.transpose() * &self.b;
        self.f.gemm(-1.0, &zk, &ztb, 1.0);
        let cinv = &mut self.cinv;
        for a in 0..p {
            for b in (a + 1)..p {
                let v = 0.5 * (cinv[(a, b)] + cinv[(b, a)]);
                cinv[(a, b)] = v;
                cinv[(b, a)] = v;
            }
        }
    }

    /// Rebuilds the cache from scratch for `perm`.
    pub fn refactor(&mut self, ws: &MmeWorkspace, perm: &[usize]) -> Result<()> {
        let every = self.refactor_every;
        *self = CriterionState::new(ws, perm)?.with_refactor_every(every);
        Ok(())
    }
}

/// Writes the upper triangle of a symmetric matrix as `i j value` lines
/// (1-based), skipping zeros.
pub fn write_coordinate<W: Write>(m: &DMatrix<f64>, mut out: W) -> std::io::Result<()> {
    for j in 0..m.ncols() {
        for i in 0..=j.min(m.nrows().saturating_sub(1)) {
            let v = m[(i, j)];
            if v != 0.0 {
                writeln!(out, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
    }
    Ok(())
}
