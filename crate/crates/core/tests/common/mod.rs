//! Random model instances and a dense brute-force oracle built directly from
//! the full mixed-model equations, independent of the library's assembly.
#![allow(dead_code)]

pub mod blocks;
pub mod cs;
pub mod stage2;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use seldesign::frame::DesignFrame;
use seldesign::relatedness::{RelationshipKind, RelationshipMatrix, Relmats};
use seldesign::spec::{parse_spec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenoModel {
    Fixed,
    Idv,
    Ric,
    Vm,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: ModelSpec,
    pub frame: DesignFrame,
    pub relmats: Relmats,
    pub geno: GenoModel,
    pub g: DMatrix<f64>,
    pub ids: Vec<String>,
    pub sigma_geno: Vec<f64>,
    pub sigma_fam: Option<f64>,
    pub blk_fixed: bool,
    pub sigma_blk: f64,
    pub sigma_row: f64,
    pub resid: Vec<f64>,
    pub grouped: bool,
}

/// Random symmetric positive-definite relatedness over `m` ids.
pub fn random_spd<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(m, m, |i, j| if j <= i { rng.gen_range(-0.5..0.5) } else { 0.0 });
    let mut g = &l * l.transpose() + DMatrix::identity(m, m) * 0.5;
    let scale = g.diagonal().mean();
    g /= scale;
    g
}

pub fn random_instance<R: Rng>(rng: &mut R, n_max: usize) -> Instance {
    let m = rng.gen_range(3..=7);
    let mut names = Vec::new();
    for g in 0..m {
        let reps = rng.gen_range(1..=3);
        for _ in 0..reps {
            names.push(format!("g{g}"));
        }
    }
    while names.len() < 6 {
        names.push(format!("g{}", rng.gen_range(0..m)));
    }
    names.truncate(n_max);
    names.shuffle(rng);
    let n = names.len();
    let nb = rng.gen_range(2..=3);
    let blk: Vec<String> = (0..n).map(|u| format!("b{}", u * nb / n)).collect();
    let nr = rng.gen_range(2..=4);
    let row: Vec<String> = (0..n).map(|u| format!("r{}", u % nr)).collect();
    let grp: Vec<String> = (0..n).map(|u| format!("q{}", u % 2)).collect();
    let fam_of = |g: &str| format!("f{}", g[1..].parse::<usize>().unwrap() % 2);
    let fam: Vec<String> = names.iter().map(|g| fam_of(g)).collect();
    let frame = DesignFrame::from_columns(vec![
        ("name".into(), names.clone()),
        ("Fam".into(), fam),
        ("Blk".into(), blk),
        ("Row".into(), row),
        ("grp".into(), grp),
        ("swp".into(), vec!["1".into(); n]),
    ])
    .unwrap();

    let geno = match rng.gen_range(0..4) {
        0 => GenoModel::Fixed,
        1 => GenoModel::Idv,
        2 => GenoModel::Ric,
        _ => GenoModel::Vm,
    };
    // Matrix ids include two ancestors that never appear in the frame.
    let mut ids: Vec<String> = (0..m).map(|g| format!("g{g}")).collect();
    ids.push("anc0".into());
    ids.push("anc1".into());
    ids.reverse();
    let g = random_spd(rng, ids.len());
    let mut relmats = Relmats::new();
    relmats.insert(
        "G".into(),
        RelationshipMatrix::new(ids.clone(), RelationshipKind::Grm, g.clone(), None).unwrap(),
    );

    let u = |rng: &mut R| rng.gen_range(0.1..2.0);
    let sigma_geno = match geno {
        GenoModel::Fixed => vec![],
        GenoModel::Ric => vec![u(rng), u(rng)],
        _ => vec![u(rng)],
    };
    let with_fam = geno != GenoModel::Fixed && rng.gen_bool(0.4);
    let sigma_fam = with_fam.then(|| u(rng));
    let blk_fixed = rng.gen_bool(0.5);
    let sigma_blk = u(rng);
    let sigma_row = u(rng);
    let grouped = rng.gen_bool(0.5);
    let resid = if grouped { vec![u(rng), u(rng)] } else { vec![u(rng)] };

    let geno_term = match geno {
        GenoModel::Fixed | GenoModel::Idv => "name".to_string(),
        GenoModel::Ric => "ric(name, G)".into(),
        GenoModel::Vm => "vm(name, G)".into(),
    };
    let mut fixed = vec![];
    let mut random = vec!["Row".to_string()];
    if blk_fixed {
        fixed.push("Blk".to_string());
    } else {
        random.push("Blk".into());
    }
    if geno == GenoModel::Fixed {
        fixed.push(geno_term.clone());
    } else {
        random.push(geno_term.clone());
    }
    let mut permute = vec![geno_term.clone()];
    if with_fam {
        random.push("Fam".into());
        permute.push("Fam".into());
    }
    let q = |v: &[String]| v.iter().map(|s| format!("\"{s}\"")).collect::<Vec<_>>().join(", ");
    let mut params = format!("Row = {sigma_row}\n");
    if !blk_fixed {
        params += &format!("Blk = {sigma_blk}\n");
    }
    match geno {
        GenoModel::Fixed => {}
        GenoModel::Ric => params += &format!("\"{geno_term}\" = [{}, {}]\n", sigma_geno[0], sigma_geno[1]),
        _ => params += &format!("\"{geno_term}\" = {}\n", sigma_geno[0]),
    }
    if let Some(f) = sigma_fam {
        params += &format!("Fam = {f}\n");
    }
    let residual = if grouped {
        params += &format!("units = [{}, {}]\n", resid[0], resid[1]);
        "dsum(units | grp)"
    } else {
        params += &format!("units = {}\n", resid[0]);
        "units"
    };
    let text = format!(
        "[fixed]\nterms = [{}]\n[random]\nterms = [{}]\n[residual]\nterm = \"{residual}\"\n[permute]\nterms = [{}]\nobjective = [\"{geno_term}\"]\nswap = \"swp\"\n[params]\n{params}",
        q(&fixed),
        q(&random),
        q(&permute),
    );
    let spec = parse_spec(&text, &frame).unwrap();
    Instance {
        spec,
        frame,
        relmats,
        geno,
        g,
        ids,
        sigma_geno,
        sigma_fam,
        blk_fixed,
        sigma_blk,
        sigma_row,
        resid,
        grouped,
    }
}

fn indicator(values: &[String], levels: &[String]) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), levels.len(), |u, c| {
        if values[u] == levels[c] {
            1.0
        } else {
            0.0
        }
    })
}

fn levels_of(v: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for x in v {
        if !out.contains(x) {
            out.push(x.clone());
        }
    }
    out
}

fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (n, b.ncols())).copy_from(b);
        off += b.ncols();
    }
    out
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(p, p);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.ncols();
    }
    out
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Mean pairwise prediction-error variance from the full coefficient matrix
/// `C = WᵀR⁻¹W + G*` of the design where unit `u` carries row `perm[u]`.
pub fn oracle_a(inst: &Instance, perm: &[usize]) -> f64 {
    let f = &inst.frame;
    let col = |name: &str| f.column_values(f.column_index(name).unwrap());
    let names: Vec<String> = perm.iter().map(|&r| col("name")[r].clone()).collect();
    let fams: Vec<String> = perm.iter().map(|&r| col("Fam")[r].clone()).collect();
    let blk = col("Blk");
    let row = col("Row");
    let grp = col("grp");
    let n = names.len();

    let geno_levels: Vec<String> = match inst.geno {
        GenoModel::Ric | GenoModel::Vm => inst.ids.clone(),
        _ => levels_of(&col("name")),
    };
    let zg = indicator(&names, &geno_levels);
    let mg = geno_levels.len();
    let g_pen = match inst.geno {
        GenoModel::Fixed => DMatrix::zeros(mg, mg),
        GenoModel::Idv => DMatrix::identity(mg, mg) / inst.sigma_geno[0],
        GenoModel::Vm => inv(&(inst.g.clone() * inst.sigma_geno[0])),
        GenoModel::Ric => inv(&(inst.g.clone() * inst.sigma_geno[0]
            + DMatrix::identity(mg, mg) * inst.sigma_geno[1])),
    };
    let mut w = vec![zg];
    let mut pen = vec![g_pen];
    if let Some(sf) = inst.sigma_fam {
        let fl = levels_of(&col("Fam"));
        w.push(indicator(&fams, &fl));
        pen.push(DMatrix::identity(fl.len(), fl.len()) / sf);
    }
    w.push(DMatrix::from_element(n, 1, 1.0));
    pen.push(DMatrix::zeros(1, 1));
    let bl = levels_of(&blk);
    w.push(indicator(&blk, &bl));
    pen.push(if inst.blk_fixed {
        DMatrix::zeros(bl.len(), bl.len())
    } else {
        DMatrix::identity(bl.len(), bl.len()) / inst.sigma_blk
    });
    let rl = levels_of(&row);
    w.push(indicator(&row, &rl));
    pen.push(DMatrix::identity(rl.len(), rl.len()) / inst.sigma_row);

    let w = hcat(&w);
    let gstar = block_diag(&pen);
    let gl = levels_of(&grp);
    let rinv = DMatrix::from_fn(n, n, |a, b| {
        if a != b {
            0.0
        } else if inst.grouped {
            1.0 / inst.resid[gl.iter().position(|g| *g == grp[a]).unwrap()]
        } else {
            1.0 / inst.resid[0]
        }
    });
    let c = w.transpose() * &rinv * &w + gstar;
    let cinv = c.pseudo_inverse(1e-12).unwrap();
    let present: Vec<usize> = levels_of(&col("name"))
        .iter()
        .map(|l| geno_levels.iter().position(|g| g == l).unwrap())
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for a in 0..present.len() {
        for b in (a + 1)..present.len() {
            let (i, j) = (present[a], present[b]);
            sum += cinv[(i, i)] + cinv[(j, j)] - 2.0 * cinv[(i, j)];
            pairs += 1;
        }
    }
    sum / pairs as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
