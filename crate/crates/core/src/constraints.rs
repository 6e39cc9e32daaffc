//! Design checks that read only the emitted tables: swap-class contents,
//! replication counts, resolution of checks over blocks and spread of
//! treatments over a factor.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::frame::DesignFrame;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub checks: Vec<CheckResult>,
}

impl ConstraintReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn push(&mut self, name: impl Into<String>, failures: Vec<String>) {
        let passed = failures.is_empty();
        let detail = if passed {
            "ok".to_owned()
        } else {
            let shown: Vec<&str> = failures.iter().take(5).map(String::as_str).collect();
            let more = failures.len().saturating_sub(5);
            if more > 0 {
                format!("{} (and {more} more)", shown.join("; "))
            } else {
                shown.join("; ")
            }
        };
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn extend(&mut self, other: ConstraintReport) {
        self.checks.extend(other.checks);
    }

    pub fn summary(&self) -> String {
        let bad = self.checks.iter().filter(|c| !c.passed).count();
        format!("{}/{} checks passed", self.checks.len() - bad, self.checks.len())
    }
}

fn column<'a>(frame: &'a DesignFrame, name: &str) -> Result<Vec<&'a str>> {
    let c = frame.require(name)?;
    Ok((0..frame.nrows()).map(|r| frame.value(c, r)).collect())
}

/// Within every level of `swap`, the multiset of treatment labels in
/// `after` equals that in `before`; plot columns listed in `fixed` match row
/// by row.
pub fn check_swap_classes(
    before: &DesignFrame,
    after: &DesignFrame,
    swap: Option<&str>,
    treatment: &[String],
    fixed: &[String],
) -> Result<Vec<String>> {
    let mut failures = Vec::new();
    if before.nrows() != after.nrows() {
        failures.push(format!("{} rows before, {} after", before.nrows(), after.nrows()));
        return Ok(failures);
    }
    let n = before.nrows();
    for f in fixed {
        let (a, b) = (column(before, f)?, column(after, f)?);
        if let Some(r) = (0..n).find(|&r| a[r] != b[r]) {
            failures.push(format!("plot factor `{f}` changed at row {}", r + 1));
        }
    }
    let class_of = |frame: &DesignFrame| -> Result<Vec<String>> {
        match swap {
            Some(s) => Ok(column(frame, s)?.into_iter().map(str::to_owned).collect()),
            None => Ok(vec![String::new(); n]),
        }
    };
    let (cb, ca) = (class_of(before)?, class_of(after)?);
    let key = |frame: &DesignFrame, r: usize| -> Result<String> {
        let mut parts = Vec::with_capacity(treatment.len());
        for t in treatment {
            parts.push(frame.value(frame.require(t)?, r).to_owned());
        }
        Ok(parts.join("\u{1f}"))
    };
    let mut tally: BTreeMap<(String, String), i64> = BTreeMap::new();
    for r in 0..n {
        *tally.entry((cb[r].clone(), key(before, r)?)).or_default() += 1;
        *tally.entry((ca[r].clone(), key(after, r)?)).or_default() -= 1;
    }
    for ((class, k), d) in tally {
        if d != 0 {
            failures.push(format!(
                "swap class `{class}`: treatment `{}` count changed by {}",
                k.replace('\u{1f}', ":"),
                -d
            ));
        }
    }
    Ok(failures)
}

/// Every treatment in `expected` occurs exactly that many times.
pub fn check_replication(
    frame: &DesignFrame,
    treatment: &str,
    expected: &HashMap<String, usize>,
) -> Result<Vec<String>> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for v in column(frame, treatment)? {
        *counts.entry(v).or_default() += 1;
    }
    let mut failures = Vec::new();
    let mut names: Vec<&String> = expected.keys().collect();
    names.sort();
    for name in names {
        let want = expected[name];
        let got = counts.get(name.as_str()).copied().unwrap_or(0);
        if got != want {
            failures.push(format!("`{name}` occurs {got} times, expected {want}"));
        }
    }
    let mut extra: Vec<&&str> = counts.keys().filter(|k| !expected.contains_key(**k)).collect();
    extra.sort();
    for k in extra {
        failures.push(format!("`{k}` is not in the replication scheme"));
    }
    Ok(failures)
}

/// Each listed treatment occurs exactly `per_level` times in every level of
/// `block`.
pub fn check_resolution(
    frame: &DesignFrame,
    treatment: &str,
    block: &str,
    treatments: &[String],
    per_level: usize,
) -> Result<Vec<String>> {
    let t = column(frame, treatment)?;
    let b = column(frame, block)?;
    let levels = frame.levels(frame.require(block)?);
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for r in 0..frame.nrows() {
        *counts.entry((t[r], b[r])).or_default() += 1;
    }
    let mut failures = Vec::new();
    for name in treatments {
        for l in levels {
            let got = counts.get(&(name.as_str(), l.as_str())).copied().unwrap_or(0);
            if got != per_level {
                failures.push(format!("`{name}` occurs {got} times in {block} `{l}`, expected {per_level}"));
            }
        }
    }
    Ok(failures)
}

/// No treatment with `r` copies occurs more than `ceil(r / levels)` times
/// in a level of `factor`. Treatments in `exempt` are skipped.
pub fn check_spread(
    frame: &DesignFrame,
    treatment: &str,
    factor: &str,
    exempt: &[String],
) -> Result<Vec<String>> {
    let t = column(frame, treatment)?;
    let f = column(frame, factor)?;
    let levels = frame.levels(frame.require(factor)?).len();
    let mut reps: HashMap<&str, usize> = HashMap::new();
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for r in 0..frame.nrows() {
        *reps.entry(t[r]).or_default() += 1;
        *counts.entry((t[r], f[r])).or_default() += 1;
    }
    let mut failures = Vec::new();
    for ((name, level), k) in counts {
        if exempt.iter().any(|e| e == name) {
            continue;
        }
        let limit = reps[name].div_ceil(levels);
        if k > limit {
            failures.push(format!("`{name}` occurs {k} times in {factor} `{level}` (limit {limit})"));
        }
    }
    Ok(failures)
}
