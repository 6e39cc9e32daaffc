//! Replication-allocation oracle: genotype effects with relatedness, one
//! mean per genotype with residual variance shrinking with replication.

use nalgebra::DMatrix;
use seldesign::relatedness::{RelationshipKind, RelationshipMatrix, Relmats};
use seldesign::stages::{Entry, Stage2Params};

use super::inv;

pub fn mean_pairwise(p: &DMatrix<f64>) -> f64 {
    let l = p.nrows() as f64;
    2.0 / (l - 1.0) * (p.trace() - p.sum() / l)
}

pub fn entries(names: &[String], allowed: &[usize]) -> Vec<Entry> {
    names
        .iter()
        .map(|n| Entry {
            name: n.clone(),
            allowed: allowed.to_vec(),
            check: false,
        })
        .collect()
}

pub fn relmats_of(ids: &[String], g: DMatrix<f64>) -> Relmats {
    let mut r = Relmats::new();
    r.insert(
        "G".into(),
        RelationshipMatrix::new(ids.to_vec(), RelationshipKind::Grm, g, None).unwrap(),
    );
    r
}

/// Prediction-error variance of genotype effects for a replication
/// allocation, from `y = 1μ + u + e`, `u ~ σ²_a·G`, `e_g ~ σ²_e + σ²/r_g`.
pub fn stage2_oracle(g: &DMatrix<f64>, reps: &[usize], p: Stage2Params) -> f64 {
    let m = reps.len();
    let rinv = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0 / (p.sigma2_e + p.sigma2 / reps[i] as f64)
        } else {
            0.0
        }
    });
    let mut w = DMatrix::zeros(m, m + 1);
    for i in 0..m {
        w[(i, 0)] = 1.0;
        w[(i, i + 1)] = 1.0;
    }
    let mut pen = DMatrix::zeros(m + 1, m + 1);
    pen.view_mut((1, 1), (m, m)).copy_from(&inv(&(g * p.sigma2_a)));
    let c = w.transpose() * rinv * &w + pen;
    let cinv = inv(&c);
    mean_pairwise(&cinv.view((1, 1), (m, m)).into_owned())
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if n < k {
        return Vec::new();
    }
    let mut out = combinations(n - 1, k);
    for mut c in combinations(n - 1, k - 1) {
        c.push(n - 1);
        out.push(c);
    }
    out
}

pub const P2: Stage2Params = Stage2Params {
    sigma2_a: 0.8,
    sigma2_e: 0.2,
    sigma2: 1.0,
};

