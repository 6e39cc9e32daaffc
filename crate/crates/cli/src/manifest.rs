//! Run manifests: what went in, what came out, and how to repeat it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use seldesign::constraints::ConstraintReport;
use seldesign::relatedness::{RelationshipKind, Relmats};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub spec: PathBuf,
    /// sha256 of every input file.
    pub inputs: BTreeMap<PathBuf, String>,
    pub outputs: BTreeMap<PathBuf, String>,
    pub seed: u64,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub final_a: f64,
    pub checks: ConstraintReport,
    pub checks_passed: bool,
    /// How each relationship matrix and its inverse were obtained.
    #[serde(default)]
    pub matrices: BTreeMap<String, String>,
    /// Working directory and arguments of the run.
    pub cwd: PathBuf,
    pub args: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

impl RunManifest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        command: &str,
        spec: &Path,
        inputs: &[PathBuf],
        seed: u64,
        args: Vec<String>,
        elapsed: Duration,
        final_a: f64,
        checks: &ConstraintReport,
        outputs: &[PathBuf],
    ) -> Result<RunManifest> {
        let hash_all = |files: &[PathBuf]| -> Result<BTreeMap<PathBuf, String>> {
            files.iter().map(|p| Ok((p.clone(), sha256_file(p)?))).collect()
        };
        Ok(RunManifest {
            command: command.to_owned(),
            spec: spec.to_path_buf(),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_clock_seconds: elapsed.as_secs_f64(),
            final_a,
            checks: checks.clone(),
            checks_passed: checks.passed(),
            matrices: BTreeMap::new(),
            cwd: std::env::current_dir()?,
            args,
        })
    }

    pub fn describe_matrices(&mut self, mats: &Relmats) {
        for (name, m) in mats {
            let text = match m.kind {
                RelationshipKind::Nrm => format!("pedigree NRM, {} ids, exact sparse inverse", m.ids.len()),
                RelationshipKind::Grm => format!("GRM, {} ids, diagonal jitter {:e}, dense inverse", m.ids.len(), m.jitter),
            };
            self.matrices.insert(name.clone(), text);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: not a run manifest", path.display()))
    }

    /// Fails when an input file changed since the run; paths are relative to
    /// the recorded working directory.
    pub fn verify_inputs(&self) -> Result<()> {
        for (p, h) in &self.inputs {
            let now = sha256_file(&self.cwd.join(p))?;
            if &now != h {
                bail!("input {} changed since the recorded run", p.display());
            }
        }
        Ok(())
    }
}
