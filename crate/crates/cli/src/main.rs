mod files;
mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use seldesign::constraints::{
    check_replication, check_resolution, check_spread, check_swap_classes, ConstraintReport,
};
use seldesign::frame::DesignFrame;
use seldesign::mme::{acriterion, build_workspace};
use seldesign::search::{moving_columns, run_design, LoopTrace, SearchConfig};
use seldesign::simped::{simulate_pedigree, PedigreeConfig};
use seldesign::spec::ModelSpec;
use seldesign::stages::{
    efficiency_study, read_entries_path, run_sese, RunOptions, SeseOutcome, RUN_SWAP_FACTOR,
    SWAP_FACTOR,
};

use files::{load_matrices, load_spec, SpecFile};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "seldesign", version, about = "Model-based design of selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a design, or run the replication and plot allocation pipeline.
    Design(DesignArgs),
    /// Evaluate the criterion of a finished design.
    Evaluate(EvaluateArgs),
    /// Compare searched and random replication allocation with and without
    /// relatedness in plot allocation.
    Efficiency(EfficiencyArgs),
    /// Simulate a breeding pedigree.
    Simped(SimpedArgs),
    /// Repeat a `design` run recorded in a manifest.
    Rerun(RerunArgs),
    /// Check a finished plot allocation against its replication scheme.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Model or pipeline specification (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Design frame (CSV): plots for the pipeline, the initial design otherwise.
    #[arg(long)]
    data: PathBuf,
    /// Pedigree CSV used for relationship matrices the spec does not locate.
    #[arg(long, conflicts_with = "grm")]
    pedigree: Option<PathBuf>,
    /// Genomic relationship matrix used for matrices the spec does not locate.
    #[arg(long)]
    grm: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Overrides the loop budget of every search.
    #[arg(long)]
    maxit: Option<usize>,
    /// Evaluate candidate swaps serially (`false` allows parallel sweeps).
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct DesignArgs {
    #[command(flatten)]
    common: Common,
    /// Genotype entries (CSV: name, allowed, check); pipeline specs only.
    #[arg(long)]
    entries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loop trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Design to evaluate (CSV).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "grm")]
    pedigree: Option<PathBuf>,
    #[arg(long)]
    grm: Option<PathBuf>,
    /// Writes `C11` and `Λ` as coordinate text to `<prefix>.c11.txt` and
    /// `<prefix>.lambda.txt`.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct EfficiencyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    entries: PathBuf,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Per-seed table (CSV).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimpedArgs {
    #[arg(long, default_value_t = 10)]
    founders: usize,
    #[arg(long, default_value_t = 2)]
    generations: usize,
    #[arg(long, default_value_t = 5)]
    crosses: usize,
    #[arg(long, default_value_t = 4)]
    family_size: usize,
    /// Rounds of selfing applied to every new individual.
    #[arg(long, default_value_t = 0)]
    selfing: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Lines of the final generation with their family (CSV).
    #[arg(long)]
    lines: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Pipeline specification naming the genotype, run and zone factors.
    #[arg(long)]
    spec: PathBuf,
    /// Plot allocation to check (CSV).
    #[arg(long)]
    data: PathBuf,
    /// Replication allocation (CSV with `name` and `repF`).
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long)]
    entries: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    manifest: PathBuf,
    /// Write to a different design path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = match cli.command {
        Command::Design(a) => cmd_design(&a, argv),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|()| true),
        Command::Efficiency(a) => cmd_efficiency(&a).map(|()| true),
        Command::Simped(a) => cmd_simped(&a).map(|()| true),
        Command::Rerun(a) => cmd_rerun(&a),
        Command::Check(a) => cmd_check(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: the design failed the constraint checks");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

struct TraceSink {
    out: Option<BufWriter<File>>,
}

impl TraceSink {
    fn open(path: Option<&Path>) -> Result<TraceSink> {
        let out = match path {
            Some(p) => Some(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            )),
            None => None,
        };
        Ok(TraceSink { out })
    }

    fn record(&mut self, stage: &str, t: &LoopTrace) {
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::json!({
                "stage": stage,
                "iteration": t.iteration,
                "current": t.current,
                "best": t.best,
                "committed": t.committed,
                "evaluated": t.evaluated,
                "random_walk": t.random_walk,
            });
            // A failed trace write should not abort the search.
            let _ = writeln!(w, "{line}");
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.out {
            w.flush()?;
        }
        Ok(())
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("design");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn print_report(report: &ConstraintReport) {
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        println!("  [{mark}] {}: {}", c.name, c.detail);
    }
    println!("checks: {}", report.summary());
}

fn cmd_design(a: &DesignArgs, argv: Vec<String>) -> Result<bool> {
    let started = Instant::now();
    let c = &a.common;
    let spec_file = load_spec(&c.spec)?;
    let plots = DesignFrame::from_csv_path(&c.data).with_context(|| format!("reading {}", c.data.display()))?;
    let relmats = load_matrices(&spec_file, &c.spec, c.pedigree.as_deref(), c.grm.as_deref())?;
    let mut trace = TraceSink::open(a.trace.as_deref())?;
    let mut inputs = vec![c.spec.clone(), c.data.clone()];
    inputs.extend(relmats.sources.iter().cloned());
    let (final_a, report, outputs) = match &spec_file {
        SpecFile::Single(doc) => {
            let spec = ModelSpec::from_document(doc, &plots)
                .with_context(|| format!("{}: model does not fit {}", c.spec.display(), c.data.display()))?;
            let mut cfg = SearchConfig::from_section(&doc.search)?;
            cfg.seed = c.seed;
            cfg.deterministic = c.deterministic;
            if let Some(m) = c.maxit {
                cfg.maxit = m;
            }
            let (design, rep) = run_design(&spec, &plots, Some(&relmats.mats), &cfg, |t| trace.record("design", t))?;
            let checks = single_checks(&spec, &plots, &design)?;
            design.write_csv_path(&a.out)?;
            let report_path = sibling(&a.out, "report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&rep)?)?;
            println!("initial A: {:.10}", rep.initial_value);
            println!("best A:    {:.10}", rep.best_value);
            println!("loops: {}  evaluations: {}  committed swaps: {}", rep.loops, rep.evaluations, rep.swaps.len());
            (rep.best_value, checks, vec![a.out.clone(), report_path])
        }
        SpecFile::Pipeline(p) => {
            let entries_path = a
                .entries
                .as_ref()
                .context("a pipeline spec needs --entries")?;
            inputs.push(entries_path.clone());
            let entries = read_entries_path(entries_path)?;
            let opts = RunOptions {
                seed: c.seed,
                maxit: c.maxit,
                deterministic: c.deterministic,
            };
            let out = run_sese(p, &entries, &plots, Some(&relmats.mats), opts, |s, t| trace.record(s, t))?;
            let checks = pipeline_checks(p, &plots, &out)?;
            let stage2 = sibling(&a.out, "stage2.csv");
            let step1 = sibling(&a.out, "step1.csv");
            out.stage2_design.write_csv_path(&stage2)?;
            out.step1_design.write_csv_path(&step1)?;
            out.step2_design.write_csv_path(&a.out)?;
            if let Some(r) = &out.stage2_report {
                println!("stage 2  A: {:.10} -> {:.10}", r.initial_value, r.best_value);
            }
            for (label, r) in [("step 1", &out.step1_report), ("step 2", &out.step2_report)] {
                println!("{label}   A: {:.10} -> {:.10}", r.initial_value, r.best_value);
            }
            (out.step2_report.best_value, checks, vec![a.out.clone(), stage2, step1])
        }
    };
    trace.finish()?;
    print_report(&report);
    if let Some(t) = &a.trace {
        inputs.retain(|p| p != t);
    }
    let mut manifest = RunManifest::new("design", &c.spec, &inputs, c.seed, argv, started.elapsed(), final_a, &report, &outputs)?;
    manifest.describe_matrices(&relmats.mats);
    manifest.write(&sibling(&a.out, "manifest.json"))?;
    Ok(report.passed())
}

/// Checks that the search only exchanged treatments within swap classes and
/// kept every spread constraint.
fn single_checks(spec: &ModelSpec, before: &DesignFrame, after: &DesignFrame) -> Result<ConstraintReport> {
    let moving: Vec<String> = moving_columns(spec, before)?
        .into_iter()
        .map(|c| before.names()[c].clone())
        .collect();
    let fixed: Vec<String> = before.names().iter().filter(|n| !moving.contains(n)).cloned().collect();
    let mut report = ConstraintReport::default();
    report.push(
        "swap classes",
        check_swap_classes(before, after, spec.swap.as_deref(), &moving, &fixed)?,
    );
    let treatment = moving.join(":");
    let key_frame = |f: &DesignFrame| -> Result<DesignFrame> {
        let mut out = f.clone();
        let cols: Vec<usize> = moving.iter().map(|m| f.require(m)).collect::<seldesign::Result<_>>()?;
        let keys = (0..f.nrows())
            .map(|r| cols.iter().map(|&c| f.value(c, r)).collect::<Vec<_>>().join(":"))
            .collect();
        if out.column_index(&treatment).is_none() {
            out.push_column(treatment.clone(), keys)?;
        }
        Ok(out)
    };
    let keyed = key_frame(after)?;
    for b in &spec.binary {
        report.push(format!("spread over {b}"), check_spread(&keyed, &treatment, b, &[])?);
    }
    Ok(report)
}

fn pipeline_checks(p: &seldesign::stages::SesePipeline, plots: &DesignFrame, out: &SeseOutcome) -> Result<ConstraintReport> {
    let setup = &p.stage3.setup;
    let g = setup.genotype.clone();
    let mut report = ConstraintReport::default();
    let name = vec!["name".to_string()];
    report.push(
        "stage 2 swap classes",
        check_swap_classes(&out.stage2_initial, &out.stage2_design, Some(SWAP_FACTOR), &name, &[seldesign::stages::REP_FACTOR.into()])?,
    );
    if let Err(e) = out.scheme.validate(plots.nrows()) {
        report.push("replication scheme", vec![e.to_string()]);
    } else {
        report.push("replication scheme", Vec::new());
    }
    let plot_cols: Vec<String> = plots.names().to_vec();
    let gv = vec![g.clone()];
    report.push(
        "step 1 swap classes",
        check_swap_classes(&out.step1_initial, &out.step1_design, Some(SWAP_FACTOR), &gv, &plot_cols)?,
    );
    report.push(
        "step 2 swap classes",
        check_swap_classes(&out.step1_design, &out.step2_design, Some(RUN_SWAP_FACTOR), &gv, &plot_cols)?,
    );
    report.extend(sese_design_checks(&out.step2_design, &g, &setup.run, &setup.zone, &out.scheme.replication(), &checks_of(out))?);
    Ok(report)
}

fn checks_of(out: &SeseOutcome) -> Vec<String> {
    (0..out.scheme.genotypes.len())
        .filter(|&i| out.scheme.check[i])
        .map(|i| out.scheme.genotypes[i].clone())
        .collect()
}

/// Replication counts, check resolution over zones and test spread over runs
/// of a finished plot allocation, read from the table alone.
pub fn sese_design_checks(
    design: &DesignFrame,
    genotype: &str,
    run: &str,
    zone: &str,
    reps: &HashMap<String, usize>,
    checks: &[String],
) -> Result<ConstraintReport> {
    let mut report = ConstraintReport::default();
    report.push("replication counts", check_replication(design, genotype, reps)?);
    let zones = design.levels(design.require(zone)?).len();
    let mut by_reps: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for c in checks {
        by_reps.entry(reps.get(c).copied().unwrap_or(0)).or_default().push(c.clone());
    }
    let mut failures = Vec::new();
    for (r, cs) in by_reps {
        failures.extend(check_resolution(design, genotype, zone, &cs, r / zones.max(1))?);
    }
    report.push("check resolution over zones", failures);
    report.push("test spread over runs", check_spread(design, genotype, run, checks)?);
    Ok(report)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let spec_file = load_spec(&a.spec)?;
    let SpecFile::Single(doc) = &spec_file else {
        bail!("{}: evaluate needs a model specification, not a pipeline", a.spec.display());
    };
    let design = DesignFrame::from_csv_path(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let relmats = load_matrices(&spec_file, &a.spec, a.pedigree.as_deref(), a.grm.as_deref())?;
    let spec = ModelSpec::from_document(doc, &design)
        .with_context(|| format!("{}: model does not fit {}", a.spec.display(), a.data.display()))?;
    let ws = build_workspace(&spec, &design, Some(&relmats.mats))?;
    let perm: Vec<usize> = (0..ws.n).collect();
    let c11 = ws.absorb_static(&perm);
    let lambda = ws.lambda_from_c11(&c11)?;
    let value = acriterion(&lambda)?;
    let l = lambda.nrows();
    println!("A:          {value:.10}");
    println!("Tr(Lambda): {:.10}", lambda.trace());
    println!("mean pev:   {:.10}", lambda.trace() / l as f64);
    println!("objective effects: {l}");
    let moving: Vec<usize> = moving_columns(&spec, &design)?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in 0..design.nrows() {
        let key = moving.iter().map(|&c| design.value(c, r)).collect::<Vec<_>>().join(":");
        *counts.entry(key).or_default() += 1;
    }
    let mut table: BTreeMap<usize, usize> = BTreeMap::new();
    for r in counts.values() {
        *table.entry(*r).or_default() += 1;
    }
    println!("replicates  treatments");
    for (r, k) in table {
        println!("{r:>10}  {k:>10}");
    }
    if let Some(prefix) = &a.dump {
        write_coordinates(&sibling(prefix, "c11.txt"), &c11)?;
        write_coordinates(&sibling(prefix, "lambda.txt"), &lambda)?;
    }
    Ok(())
}

fn write_coordinates(path: &Path, m: &nalgebra::DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for j in 0..m.ncols() {
        for i in j..m.nrows() {
            if m[(i, j)] != 0.0 {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, m[(i, j)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_efficiency(a: &EfficiencyArgs) -> Result<()> {
    let c = &a.common;
    let spec_file = load_spec(&c.spec)?;
    let SpecFile::Pipeline(p) = &spec_file else {
        bail!("{}: efficiency needs a pipeline specification", c.spec.display());
    };
    let plots = DesignFrame::from_csv_path(&c.data).with_context(|| format!("reading {}", c.data.display()))?;
    let entries = read_entries_path(&a.entries)?;
    let relmats = load_matrices(&spec_file, &c.spec, c.pedigree.as_deref(), c.grm.as_deref())?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| c.seed + k).collect();
    let res = efficiency_study(p, &entries, &plots, &relmats.mats, &seeds, c.maxit)?;
    print!("{}", res.table());
    if let Some(out) = &a.out {
        std::fs::write(out, res.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn cmd_simped(a: &SimpedArgs) -> Result<()> {
    let sim = simulate_pedigree(&PedigreeConfig {
        founders: a.founders,
        generations: a.generations,
        crosses: a.crosses,
        family_size: a.family_size,
        selfing: a.selfing,
        seed: a.seed,
    })?;
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    sim.pedigree.write_csv(BufWriter::new(f))?;
    if let Some(path) = &a.lines {
        let frame = DesignFrame::from_columns(vec![
            ("name".into(), sim.lines.clone()),
            ("family".into(), sim.family.clone()),
        ])?;
        frame.write_csv_path(path)?;
    }
    println!("{} individuals, {} lines", sim.pedigree.len(), sim.lines.len());
    Ok(())
}

fn cmd_rerun(a: &RerunArgs) -> Result<bool> {
    let m = RunManifest::read(&a.manifest)?;
    m.verify_inputs()?;
    if m.command != "design" {
        bail!("{}: only design runs can be repeated", a.manifest.display());
    }
    let mut argv = m.args.clone();
    if let Some(out) = &a.out {
        let out = std::path::absolute(out)?;
        if let Some(k) = argv.iter().position(|s| s == "--out") {
            argv[k + 1] = out.display().to_string();
        }
    }
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering {}", m.cwd.display()))?;
    let cli = Cli::try_parse_from(std::iter::once("seldesign".to_owned()).chain(argv.iter().cloned()))?;
    match cli.command {
        Command::Design(d) => cmd_design(&d, argv),
        _ => bail!("{}: only design runs can be repeated", a.manifest.display()),
    }
}

fn cmd_check(a: &CheckArgs) -> Result<bool> {
    let SpecFile::Pipeline(p) = load_spec(&a.spec)? else {
        bail!("{}: check needs a pipeline specification", a.spec.display());
    };
    let design = DesignFrame::from_csv_path(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let stage2 = DesignFrame::from_csv_path(&a.stage2).with_context(|| format!("reading {}", a.stage2.display()))?;
    let entries = read_entries_path(&a.entries)?;
    let (name, rep) = (stage2.require("name")?, stage2.require(seldesign::stages::REP_FACTOR)?);
    let mut reps = HashMap::new();
    for r in 0..stage2.nrows() {
        let k: usize = stage2
            .value(rep, r)
            .parse()
            .with_context(|| format!("{}: bad replicate count in row {}", a.stage2.display(), r + 1))?;
        reps.insert(stage2.value(name, r).to_owned(), k);
    }
    let checks: Vec<String> = entries.iter().filter(|e| e.check).map(|e| e.name.clone()).collect();
    let setup = &p.stage3.setup;
    let report = sese_design_checks(&design, &setup.genotype, &setup.run, &setup.zone, &reps, &checks)?;
    print_report(&report);
    Ok(report.passed())
}
