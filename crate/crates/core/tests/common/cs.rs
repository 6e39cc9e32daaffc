//! Compound-symmetric genotype-by-environment cases and dense oracles in
//! the Kronecker and latent-factor parameterizations.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use seldesign::frame::DesignFrame;
use seldesign::mme::build_workspace;
use seldesign::relatedness::{RelationshipKind, RelationshipMatrix, Relmats};
use seldesign::spec::parse_spec;

use super::{inv, random_spd};

pub struct CsCase {
    pub t: usize,
    pub ids: Vec<String>,
    pub g: DMatrix<f64>,
    pub site: Vec<usize>,
    pub geno: Vec<usize>,
    pub params: [f64; 4],
    pub resid: f64,
}

pub fn random_case<R: Rng>(rng: &mut R) -> CsCase {
    let t = rng.gen_range(2..=4);
    let m = rng.gen_range(3..=(60 / t).min(8));
    let k = rng.gen_range(m.max(3)..=m + 4);
    let mut site = Vec::new();
    let mut geno = Vec::new();
    for s in 0..t {
        let mut pool: Vec<usize> = (0..m).collect();
        pool.shuffle(rng);
        for p in 0..k {
            site.push(s);
            geno.push(if p < m - 1 { pool[p] } else { pool[rng.gen_range(0..m)] });
        }
    }
    let ids: Vec<String> = (0..m).map(|i| format!("G{i}")).collect();
    let u = |rng: &mut R| rng.gen_range(0.2..2.0);
    CsCase {
        t,
        g: random_spd(rng, m),
        ids,
        site,
        geno,
        params: [u(rng), u(rng), u(rng), u(rng)],
        resid: u(rng),
    }
}

pub fn frame_of(c: &CsCase, perm: &[usize]) -> DesignFrame {
    let site: Vec<String> = c.site.iter().map(|s| format!("S{s}")).collect();
    let geno: Vec<String> = perm.iter().map(|&r| c.ids[c.geno[r]].clone()).collect();
    DesignFrame::from_columns(vec![
        ("name".into(), geno),
        ("Site".into(), site.clone()),
        ("Env".into(), site),
    ])
    .unwrap()
}

pub fn library_a(c: &CsCase, form: &str) -> f64 {
    let frame = frame_of(c, &(0..c.site.len()).collect::<Vec<_>>());
    let [da, pa, de, pe] = c.params;
    let text = format!(
        "[fixed]\nterms = [\"Site\"]\n[random]\nterms = [\"cs(name:Env, G)\"]\n[residual]\nterm = \"units\"\n\
         [permute]\nterms = [\"cs(name:Env, G)\"]\nanchored = [\"Env\"]\ncs_form = \"{form}\"\ncontrast = \"env_mean\"\n\
         [params]\n\"cs(name:Env, G)\" = [{da}, {pa}, {de}, {pe}]\nunits = {}\n",
        c.resid
    );
    let spec = parse_spec(&text, &frame).unwrap();
    let mut rel = Relmats::new();
    rel.insert(
        "G".into(),
        RelationshipMatrix::new(c.ids.clone(), RelationshipKind::Grm, c.g.clone(), None).unwrap(),
    );
    let ws = build_workspace(&spec, &frame, Some(&rel)).unwrap();
    ws.criterion(&(0..c.site.len()).collect::<Vec<_>>()).unwrap()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Dense solve with genotype-by-environment effects of full dimension `m·t`,
/// environment-major. `additive_only` splits `u_g` into additive and
/// non-additive parts and targets the additive part alone.
pub fn oracle(c: &CsCase, additive_only: bool) -> f64 {
    let (t, m, n) = (c.t, c.ids.len(), c.site.len());
    let [da, pa, de, pe] = c.params;
    let j = DMatrix::from_element(t, t, 1.0);
    let it = DMatrix::identity(t, t);
    let im = DMatrix::identity(m, m);
    let ga = &j * da + &it * pa;
    let ge = &j * de + &it * pe;
    let x = DMatrix::from_fn(n, t, |u, s| if c.site[u] == s { 1.0 } else { 0.0 });
    let z = DMatrix::from_fn(n, m * t, |u, col| if col == c.site[u] * m + c.geno[u] { 1.0 } else { 0.0 });
    let (w, pen) = if additive_only {
        let mut w = DMatrix::zeros(n, t + 2 * m * t);
        w.view_mut((0, 0), (n, t)).copy_from(&x);
        w.view_mut((0, t), (n, m * t)).copy_from(&z);
        w.view_mut((0, t + m * t), (n, m * t)).copy_from(&z);
        let mut pen = DMatrix::zeros(t + 2 * m * t, t + 2 * m * t);
        pen.view_mut((t, t), (m * t, m * t)).copy_from(&inv(&kron(&ga, &c.g)));
        pen.view_mut((t + m * t, t + m * t), (m * t, m * t)).copy_from(&inv(&kron(&ge, &im)));
        (w, pen)
    } else {
        let mut w = DMatrix::zeros(n, t + m * t);
        w.view_mut((0, 0), (n, t)).copy_from(&x);
        w.view_mut((0, t), (n, m * t)).copy_from(&z);
        let mut pen = DMatrix::zeros(t + m * t, t + m * t);
        pen.view_mut((t, t), (m * t, m * t))
            .copy_from(&inv(&(kron(&ga, &c.g) + kron(&ge, &im))));
        (w, pen)
    };
    let cmat = w.transpose() * &w / c.resid + pen;
    let dim = cmat.nrows();
    let cinv = inv(&cmat);
    // Objective: environment means of the targeted effects.
    let mut d = DMatrix::zeros(m, dim);
    for g in 0..m {
        for s in 0..t {
            d[(g, t + s * m + g)] = 1.0 / t as f64;
        }
    }
    let lam = &d * cinv * d.transpose();
    // Genotypes absent from every site carry no objective contrast.
    let present: Vec<usize> = (0..m).filter(|g| c.geno.contains(g)).collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for (x, &a) in present.iter().enumerate() {
        for &b in &present[x + 1..] {
            sum += lam[(a, a)] + lam[(b, b)] - 2.0 * lam[(a, b)];
            pairs += 1;
        }
    }
    sum / pairs as f64
}


/// Dense solve in the latent parameterization: common factor `f_g` plus
/// environment-specific `δ_g`, every genotype present.
pub fn oracle_fd(c: &CsCase) -> f64 {
    let (t, m, n) = (c.t, c.ids.len(), c.site.len());
    let [da, pa, de, pe] = c.params;
    let im = DMatrix::<f64>::identity(m, m);
    let dim = t + m + m * t;
    let mut w = DMatrix::zeros(n, dim);
    for u in 0..n {
        w[(u, c.site[u])] = 1.0;
        w[(u, t + c.geno[u])] = 1.0;
        w[(u, t + m + c.site[u] * m + c.geno[u])] = 1.0;
    }
    let mut pen = DMatrix::zeros(dim, dim);
    pen.view_mut((t, t), (m, m)).copy_from(&inv(&(&c.g * da + &im * de)));
    let sp = inv(&(&c.g * pa + &im * pe));
    for s in 0..t {
        pen.view_mut((t + m + s * m, t + m + s * m), (m, m)).copy_from(&sp);
    }
    let cinv = inv(&(w.transpose() * &w / c.resid + pen));
    let mut d = DMatrix::zeros(m, dim);
    for g in 0..m {
        d[(g, t + g)] = 1.0;
        for s in 0..t {
            d[(g, t + m + s * m + g)] = 1.0 / t as f64;
        }
    }
    let lam = &d * cinv * d.transpose();
    let mut sum = 0.0;
    for a in 0..m {
        for b in (a + 1)..m {
            sum += lam[(a, a)] + lam[(b, b)] - 2.0 * lam[(a, b)];
        }
    }
    sum / (m * (m - 1) / 2) as f64
}

