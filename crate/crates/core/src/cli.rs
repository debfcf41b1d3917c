//! Batch front-end: resolve a family, run one analysis, write JSON and CSV reports.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 negative verdict.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::convergence::{convergence_report, trace_table, DEFAULT_THRESHOLD};
use crate::envelope::{root_of_unity_order_bound, thin_density, Subvariety, SubvarietySpec};
use crate::expr::Index;
use crate::fixtures::{catalog, find_fixture};
use crate::lattice::{find_stable_lattice, transfer_lattice, Budget, LatticeError, DEFAULT_MAX_ITER};
use crate::limit::{align_irreducible, align_multiplicity_free, irreducibility_certificate, LimitError};
use crate::padic::Val;
use crate::rep::{RepFamily, Sampling, MIN_WALK_LENGTH};

pub const OUT_DIR_ENV: &str = "PADIC_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "reports";
const MAX_RADIUS: usize = 12;
const MAX_INDICES: i64 = 4096;

#[derive(Debug, Parser)]
#[command(name = "padic-limits", version, about = "Limits of p-adic representation families")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace table and convergence diagnostics.
    Analyze(Common),
    /// Physical alignment of members to the limit.
    Align(Common),
    /// Stable lattice of the limit and its transfer to members.
    Lattice(LatticeArgs),
    /// Monte Carlo measure of tubular neighbourhoods of a subvariety.
    Density(DensityArgs),
    /// Root-of-unity order bound for a local field.
    Bound(BoundArgs),
    /// List the built-in fixtures, optionally checking their expectations.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Family spec file, or the name of a built-in fixture.
    #[arg(long)]
    pub family: String,
    /// Word-ball radius L.
    #[arg(long = "ball", default_value_t = 4)]
    pub radius: usize,
    /// Inclusive index range `a..b`.
    #[arg(long = "n", default_value = "1..10")]
    pub n: String,
    /// Working precision override, in digits of the uniformizer.
    #[arg(long)]
    pub prec: Option<u32>,
    /// Threshold Δ the last δ_n must exceed.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: i64,
    /// Report directory (default: $PADIC_OUT_DIR or ./reports).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LatticeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Largest tolerated drop of a Smith invariant below zero (default 2·d·e).
    #[arg(long)]
    pub max_drop: Option<i64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Haar,
    Walk,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Subvariety spec file; defaults to the discriminant locus.
    #[arg(long)]
    pub subvariety: Option<PathBuf>,
    /// Inclusive range of tubular depths `a..b`.
    #[arg(long, default_value = "1..4")]
    pub levels: String,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Haar)]
    pub mode: Mode,
    #[arg(long, default_value_t = MIN_WALK_LENGTH)]
    pub walk_length: usize,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub p: u64,
    #[arg(long, default_value_t = 1)]
    pub f: u32,
    #[arg(long, default_value_t = 1)]
    pub e: u32,
    #[arg(long)]
    pub d: u32,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    /// Evaluate every expectation.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A failed run: operational (`Usage`) or a mathematical verdict (`Negative`).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Negative(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Negative(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

pub fn parse_range(s: &str) -> Result<(i64, i64), Failure> {
    let (a, b) = s.split_once("..").ok_or_else(|| usage(format!("range `{s}` must look like a..b")))?;
    let lo: i64 = a.trim().parse().map_err(|_| usage(format!("bad range start `{a}`")))?;
    let hi: i64 = b.trim().parse().map_err(|_| usage(format!("bad range end `{b}`")))?;
    if lo > hi {
        return Err(usage(format!("empty range {lo}..{hi}")));
    }
    if hi - lo >= MAX_INDICES {
        return Err(usage(format!("range {lo}..{hi} has more than {MAX_INDICES} indices")));
    }
    Ok((lo, hi))
}

/// Validated settings shared by the family-based commands.
struct Run {
    fam: RepFamily,
    radius: usize,
    ns: Vec<i64>,
    threshold: i64,
    out: PathBuf,
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn resolve_family(arg: &str) -> Result<RepFamily, Failure> {
    let path = Path::new(arg);
    if path.is_file() {
        return RepFamily::load(path).map_err(usage);
    }
    match find_fixture(arg) {
        Ok(fx) => fx.family().map_err(usage),
        Err(_) => Err(usage(format!("family `{arg}` is neither a readable file nor a built-in fixture"))),
    }
}

fn prepare(c: &Common) -> Result<Run, Failure> {
    if c.radius > MAX_RADIUS {
        return Err(usage(format!("ball radius {} exceeds {MAX_RADIUS}", c.radius)));
    }
    let (lo, hi) = parse_range(&c.n)?;
    let mut fam = resolve_family(&c.family)?;
    if let Some(p) = c.prec {
        fam = fam.with_precision(p).map_err(usage)?;
    }
    fam.word_ball(c.radius).map_err(usage)?;
    Ok(Run { fam, radius: c.radius, ns: (lo..=hi).collect(), threshold: c.threshold, out: out_dir(&c.out) })
}

fn write_report(dir: &Path, stem: &str, report: &impl Serialize, csv: Option<String>) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    let mut text = serde_json::to_string_pretty(report).map_err(usage)?;
    text.push('\n');
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, text).map_err(|e| usage(format!("cannot write {}: {e}", json_path.display())))?;
    if let Some(csv) = csv {
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, csv).map_err(|e| usage(format!("cannot write {}: {e}", csv_path.display())))?;
    }
    Ok(())
}

fn val_cell(v: Val) -> String {
    match v {
        Val::Fin(k) => k.to_string(),
        Val::Inf => "inf".into(),
    }
}

fn family_header(r: &Run) -> serde_json::Value {
    json!({
        "family": r.fam.name(),
        "p": r.fam.field().p(),
        "e": r.fam.field().e(),
        "prec": r.fam.field().prec(),
        "d": r.fam.dim(),
        "radius": r.radius,
        "indices": [r.ns.first(), r.ns.last()],
        "threshold": r.threshold,
    })
}

fn analyze(c: &Common) -> Result<String, Failure> {
    let r = prepare(c)?;
    let table = trace_table(&r.fam, r.radius, &r.ns).map_err(usage)?;
    let report = convergence_report(&table, r.threshold);
    let mut csv = String::from("n,delta_n\n");
    for (n, d) in report.indices.iter().zip(&report.delta) {
        writeln!(csv, "{n},{}", val_cell(*d)).unwrap();
    }
    let verdict = report.uniform_on_ball;
    write_report(&r.out, "analyze", &json!({ "config": family_header(&r), "report": report }), Some(csv))?;
    let line = format!(
        "{}: ball {} ({} words), uniform trace convergence on ball: {}",
        r.fam.name(),
        r.radius,
        report.ball_size,
        verdict
    );
    if verdict {
        Ok(line)
    } else {
        Err(Failure::Negative(line))
    }
}

fn limit_failure(r: &Run, stem: &str, e: LimitError) -> Failure {
    if matches!(e.root(), LimitError::Rep(_) | LimitError::Linalg(_)) {
        return usage(e);
    }
    let diag = json!({
        "config": family_header(r),
        "verdict": "rejected",
        "stage": e.stage().map(|s| s.to_string()),
        "error": e.to_string(),
    });
    match write_report(&r.out, stem, &diag, None) {
        Ok(()) => Failure::Negative(e.to_string()),
        Err(f) => f,
    }
}

fn align(c: &Common) -> Result<String, Failure> {
    let r = prepare(c)?;
    let irreducible = irreducibility_certificate(&r.fam, Index::Limit, r.radius).is_ok();
    if irreducible {
        let a = align_irreducible(&r.fam, r.radius, &r.ns, r.threshold).map_err(|e| limit_failure(&r, "align", e))?;
        let mut csv = String::from("n,delta_n\n");
        for m in &a.members {
            writeln!(csv, "{},{}", m.n, val_cell(m.delta)).unwrap();
        }
        let ok = a.uniform_on_ball;
        let report = json!({ "config": family_header(&r), "method": "irreducible", "alignment": a });
        write_report(&r.out, "align", &report, Some(csv))?;
        let line = format!("{}: irreducible limit, {} aligned members, uniform on ball: {ok}", r.fam.name(), a.members.len());
        return if ok { Ok(line) } else { Err(Failure::Negative(line)) };
    }
    let a =
        align_multiplicity_free(&r.fam, r.radius, &r.ns, r.threshold).map_err(|e| limit_failure(&r, "align", e))?;
    let mut csv = String::from("n,c_n,m_n,off_diagonal_delta,diagonal_delta\n");
    for m in &a.members {
        let k = a.profile.indices.iter().position(|&n| n == m.n);
        let c_n = k.and_then(|k| a.profile.coercivity.get(k).copied()).unwrap_or(Val::Inf);
        writeln!(
            csv,
            "{},{},{},{},{}",
            m.n,
            val_cell(c_n),
            val_cell(m.margin),
            val_cell(m.off_diagonal_delta),
            val_cell(m.diagonal_delta)
        )
        .unwrap();
    }
    let ok = a.uniform_on_ball;
    let report = json!({ "config": family_header(&r), "method": "multiplicity-free", "alignment": a });
    write_report(&r.out, "align", &report, Some(csv))?;
    let line = format!(
        "{}: {} blocks, aligned from n = {}, uniform on ball: {ok}",
        r.fam.name(),
        a.blocks.s(),
        a.start_index
    );
    if ok {
        Ok(line)
    } else {
        Err(Failure::Negative(line))
    }
}

fn lattice(args: &LatticeArgs) -> Result<String, Failure> {
    let r = prepare(&args.common)?;
    let mut budget = Budget::default_for(&r.fam);
    budget.max_iter = args.max_iter;
    if let Some(d) = args.max_drop {
        budget.max_drop = d;
    }
    let limit = find_stable_lattice(&r.fam, Index::Limit, r.radius, budget);
    let negative = |e: LatticeError| -> Failure {
        if matches!(e, LatticeError::Rep(_) | LatticeError::Linalg(_)) {
            return usage(e);
        }
        let diag = json!({ "config": family_header(&r), "budget": budget, "verdict": "no-lattice", "error": e.to_string() });
        match write_report(&r.out, "lattice", &diag, None) {
            Ok(()) => Failure::Negative(e.to_string()),
            Err(f) => f,
        }
    };
    let limit = limit.map_err(negative)?;
    let transfer = if r.fam.spec.limit.is_some() || !r.fam.spec.sequences.is_empty() {
        Some(transfer_lattice(&r.fam, r.radius, &r.ns, None).map_err(negative)?)
    } else {
        None
    };
    let mut csv = String::from("n,min_valuation,integral\n");
    for m in transfer.iter().flat_map(|t| &t.members) {
        writeln!(csv, "{},{},{}", m.n, val_cell(m.min_valuation), m.integral).unwrap();
    }
    let first = transfer.as_ref().and_then(|t| t.first_index);
    let report = json!({ "config": family_header(&r), "budget": budget, "limit": limit, "transfer": transfer });
    write_report(&r.out, "lattice", &report, Some(csv))?;
    Ok(format!(
        "{}: smith {:?}, stability {}, members integral from {}",
        r.fam.name(),
        limit.smith.iter().map(|v| val_cell(*v)).collect::<Vec<_>>(),
        limit.stability,
        first.map_or("never".into(), |n| n.to_string())
    ))
}

fn density(args: &DensityArgs) -> Result<String, Failure> {
    let r = prepare(&args.common)?;
    let (lo, hi) = parse_range(&args.levels)?;
    if lo < 1 || hi > i64::from(u32::MAX) {
        return Err(usage("levels must be positive"));
    }
    if args.samples == 0 {
        return Err(usage("samples must be positive"));
    }
    let spec = match &args.subvariety {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SubvarietySpec>(&text).map_err(usage)?
        }
        None => SubvarietySpec { polys: vec!["disc".into()], m: lo as u32 },
    };
    let x = Subvariety::new(spec).map_err(usage)?;
    let mode = match args.mode {
        Mode::Haar => Sampling::ExactHaar,
        Mode::Walk => Sampling::RandomWalk { length: args.walk_length },
    };
    let levels: Vec<u32> = (lo as u32..=hi as u32).collect();
    let est = thin_density(&r.fam, &x, &levels, args.samples, args.seed, mode).map_err(usage)?;
    let mut csv = String::from("m,samples,hits,estimate,ci_lo,ci_hi\n");
    for d in &est {
        writeln!(csv, "{},{},{},{:.6},{:.6},{:.6}", d.m, d.samples, d.hits, d.estimate, d.ci_lo, d.ci_hi).unwrap();
    }
    let report = json!({ "config": family_header(&r), "subvariety": x.spec, "estimates": est });
    write_report(&r.out, "density", &report, Some(csv))?;
    let undecidable: usize = est.iter().map(|d| d.undecidable).sum();
    Ok(format!("{}: {} levels, {} samples each, {undecidable} undecidable", r.fam.name(), est.len(), args.samples))
}

fn bound(args: &BoundArgs) -> Result<String, Failure> {
    let b = root_of_unity_order_bound(args.p, args.f, args.e, args.d).map_err(usage)?;
    Ok(format!("prime-to-p {}\np-power {}\ncombined {}", b.prime_to_p, b.p_power, b.combined))
}

fn fixtures(args: &FixturesArgs) -> Result<String, Failure> {
    let mut lines = String::new();
    let mut outcomes = Vec::new();
    let mut failed = 0;
    for fx in catalog() {
        let tag = if fx.surrogate { " [inexact-surrogate]" } else { "" };
        writeln!(lines, "{:<24}{}{tag}", fx.name, fx.summary).unwrap();
        if args.check {
            let fam = fx.family().map_err(usage)?;
            for e in &fx.expectations {
                let o = e.check(&fam);
                failed += usize::from(!o.passed);
                writeln!(lines, "    {} {}", if o.passed { "ok  " } else { "FAIL" }, o.detail).unwrap();
                outcomes.push(json!({ "fixture": fx.name, "outcome": o }));
            }
        }
    }
    if args.check {
        write_report(&out_dir(&args.out), "fixtures", &outcomes, None)?;
    }
    let text = lines.trim_end().to_string();
    if failed > 0 {
        Err(Failure::Negative(format!("{text}\n{failed} expectation(s) failed")))
    } else {
        Ok(text)
    }
}

pub fn execute(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::Analyze(c) => analyze(c),
        Command::Align(c) => align(c),
        Command::Lattice(a) => lattice(a),
        Command::Density(a) => density(a),
        Command::Bound(a) => bound(a),
        Command::Fixtures(a) => fixtures(a),
    }
}

/// Parse `argv`, run, print the summary and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Negative(m) => println!("negative verdict: {m}"),
            }
            f.code()
        }
    }
}
