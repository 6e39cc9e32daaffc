//! Synthetic breeding pedigrees: founders, crossing generations, full-sib
//! families and optional single-seed-descent selfing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relatedness::Pedigree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedigreeConfig {
    pub founders: usize,
    /// Generation 1 holds the founders only.
    pub generations: usize,
    /// Crosses made in each generation after the first.
    pub crosses: usize,
    /// Offspring per cross.
    pub family_size: usize,
    /// Rounds of selfing applied to every offspring before it becomes a
    /// line; intermediate plants are kept in the pedigree.
    pub selfing: usize,
    pub seed: u64,
}

impl Default for PedigreeConfig {
    fn default() -> Self {
        PedigreeConfig {
            founders: 10,
            generations: 2,
            crosses: 5,
            family_size: 4,
            selfing: 0,
            seed: 1,
        }
    }
}

/// A simulated pedigree plus the lines of the final generation and the
/// family (cross) each line descends from.
#[derive(Debug, Clone)]
pub struct SimulatedPedigree {
    pub pedigree: Pedigree,
    pub lines: Vec<String>,
    pub family: Vec<String>,
}

pub fn simulate_pedigree(cfg: &PedigreeConfig) -> Result<SimulatedPedigree> {
    if cfg.founders == 0 || cfg.generations == 0 {
        return Err(Error::Pedigree("founders and generations must be at least 1".into()));
    }
    if cfg.generations > 1 && (cfg.crosses == 0 || cfg.family_size == 0) {
        return Err(Error::Pedigree("crosses and family size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records: Vec<(String, Option<String>, Option<String>)> = Vec::new();
    let mut pool: Vec<String> = Vec::new();
    let mut family: Vec<String> = Vec::new();
    for f in 0..cfg.founders {
        let mut id = format!("F{}", f + 1);
        records.push((id.clone(), None, None));
        for s in 0..cfg.selfing {
            let next = format!("F{}.S{}", f + 1, s + 1);
            records.push((next.clone(), Some(id.clone()), Some(id.clone())));
            id = next;
        }
        pool.push(id);
        family.push(format!("F{}", f + 1));
    }
    for g in 2..=cfg.generations {
        let mut next_pool = Vec::new();
        let mut next_family = Vec::new();
        for c in 0..cfg.crosses {
            let (sire, dam) = if pool.len() >= 2 {
                let pair: Vec<&String> = pool.choose_multiple(&mut rng, 2).collect();
                (pair[0].clone(), pair[1].clone())
            } else {
                (pool[0].clone(), pool[0].clone())
            };
            let fam = format!("G{g}C{}", c + 1);
            for k in 0..cfg.family_size {
                let mut id = format!("{fam}.{}", k + 1);
                records.push((id.clone(), Some(sire.clone()), Some(dam.clone())));
                for s in 0..cfg.selfing {
                    let next = format!("{fam}.{}.S{}", k + 1, s + 1);
                    records.push((next.clone(), Some(id.clone()), Some(id.clone())));
                    id = next;
                }
                next_pool.push(id);
                next_family.push(fam.clone());
            }
        }
        pool = next_pool;
        family = next_family;
    }
    Ok(SimulatedPedigree {
        pedigree: Pedigree::new(records)?,
        lines: pool,
        family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relatedness::nrm_from_pedigree;

    #[test]
    fn founders_only_give_identity() {
        let cfg = PedigreeConfig {
            founders: 10,
            generations: 1,
            ..Default::default()
        };
        let sim = simulate_pedigree(&cfg).unwrap();
        let a = nrm_from_pedigree(&sim.pedigree);
        assert_eq!(a.dense, nalgebra::DMatrix::identity(10, 10));
    }

    #[test]
    fn full_sibs_share_half() {
        let cfg = PedigreeConfig {
            founders: 2,
            generations: 2,
            crosses: 1,
            family_size: 3,
            selfing: 0,
            seed: 4,
        };
        let sim = simulate_pedigree(&cfg).unwrap();
        let a = nrm_from_pedigree(&sim.pedigree);
        let idx: Vec<usize> = sim.lines.iter().map(|l| a.index_of(l).unwrap()).collect();
        for &i in &idx {
            for &j in &idx {
                let want = if i == j { 1.0 } else { 0.5 };
                assert_eq!(a.dense[(i, j)], want);
            }
        }
    }

    #[test]
    fn selfing_raises_inbreeding() {
        let cfg = PedigreeConfig {
            founders: 1,
            generations: 1,
            selfing: 3,
            ..Default::default()
        };
        let sim = simulate_pedigree(&cfg).unwrap();
        let f = sim.pedigree.inbreeding();
        assert_eq!(f, vec![0.0, 0.5, 0.75, 0.875]);
    }

    #[test]
    fn same_seed_same_pedigree() {
        let cfg = PedigreeConfig {
            founders: 8,
            generations: 3,
            crosses: 4,
            family_size: 3,
            selfing: 1,
            seed: 9,
        };
        let a = simulate_pedigree(&cfg).unwrap();
        let b = simulate_pedigree(&cfg).unwrap();
        assert_eq!(a.pedigree, b.pedigree);
        assert_eq!(a.lines.len(), 12);
        let c = simulate_pedigree(&PedigreeConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.pedigree, c.pedigree);
    }
}
