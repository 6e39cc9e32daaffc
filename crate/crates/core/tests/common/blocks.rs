//! Treatment-by-block instances and their exhaustive optimum over incidence
//! matrices.

use nalgebra::DMatrix;
use seldesign::frame::DesignFrame;
use seldesign::mme::{build_workspace, MmeWorkspace};
use seldesign::spec::{parse_spec, ModelSpec};

pub struct Block {
    pub spec: ModelSpec,
    pub frame: DesignFrame,
    pub ws: MmeWorkspace,
}

/// `t` treatments with `r` copies each, in `b` blocks of `t * r / b` plots.
pub fn block_instance(t: usize, r: usize, b: usize, extra: &str) -> Block {
    let n = t * r;
    let name: Vec<String> = (0..n).map(|u| format!("T{}", u % t)).collect();
    let blk: Vec<String> = (0..n).map(|u| format!("B{}", u * b / n)).collect();
    let frame = DesignFrame::from_columns(vec![("name".into(), name), ("Blk".into(), blk)]).unwrap();
    let text = format!(
        "[fixed]\nterms = [\"name\", \"Blk\"]\n[residual]\nterm = \"units\"\n[permute]\nterms = [\"name\"]\n{extra}\n[params]\nunits = 1.0\n"
    );
    let spec = parse_spec(&text, &frame).unwrap();
    let ws = build_workspace(&spec, &frame, None).unwrap();
    Block { spec, frame, ws }
}

/// Mean pairwise variance of treatment differences from the incidence
/// matrix: `C = diag(r) - N diag(k)^-1 Nᵀ`.
pub fn incidence_a(n: &DMatrix<f64>) -> f64 {
    let t = n.nrows();
    let r: Vec<f64> = n.row_iter().map(|row| row.sum()).collect();
    let k: Vec<f64> = n.column_iter().map(|c| c.sum()).collect();
    let mut c = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(r));
    for i in 0..t {
        for j in 0..t {
            for (bj, &kb) in k.iter().enumerate() {
                c[(i, j)] -= n[(i, bj)] * n[(j, bj)] / kb;
            }
        }
    }
    let eig = c.clone().symmetric_eigen();
    let zeros = eig.eigenvalues.iter().filter(|&&e| e.abs() < 1e-9).count();
    if zeros > 1 {
        return f64::INFINITY;
    }
    let ci = c.pseudo_inverse(1e-9).unwrap();
    let mut s = 0.0;
    for i in 0..t {
        for j in (i + 1)..t {
            s += ci[(i, i)] + ci[(j, j)] - 2.0 * ci[(i, j)];
        }
    }
    s / (t * (t - 1) / 2) as f64
}

/// Best criterion over every incidence matrix with row sums `r` and
/// column sums `k`.
pub fn exhaustive_optimum(t: usize, r: usize, b: usize, k: usize) -> f64 {
    fn rows(r: usize, b: usize) -> Vec<Vec<usize>> {
        if b == 1 {
            return vec![vec![r]];
        }
        (0..=r)
            .flat_map(|x| {
                rows(r - x, b - 1).into_iter().map(move |mut rest| {
                    rest.insert(0, x);
                    rest
                })
            })
            .collect()
    }
    let options = rows(r, b);
    let mut best = f64::INFINITY;
    let mut chosen: Vec<usize> = Vec::new();
    fn rec(
        t: usize,
        k: usize,
        options: &[Vec<usize>],
        chosen: &mut Vec<usize>,
        cols: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if chosen.len() == t {
            if cols.iter().all(|&c| c == k) {
                let b = cols.len();
                let n = DMatrix::from_fn(t, b, |i, j| options[chosen[i]][j] as f64);
                *best = best.min(incidence_a(&n));
            }
            return;
        }
        // Rows in non-decreasing option order: treatments are exchangeable.
        let start = chosen.last().copied().unwrap_or(0);
        for o in start..options.len() {
            if options[o].iter().zip(cols.iter()).any(|(x, c)| x + c > k) {
                continue;
            }
            for (c, x) in cols.iter_mut().zip(&options[o]) {
                *c += x;
            }
            chosen.push(o);
            rec(t, k, options, chosen, cols, best);
            chosen.pop();
            for (c, x) in cols.iter_mut().zip(&options[o]) {
                *c -= x;
            }
        }
    }
    rec(t, k, &options, &mut chosen, &mut vec![0; b], &mut best);
    best
}

