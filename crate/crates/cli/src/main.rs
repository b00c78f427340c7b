//! `prism`: instrument and run `.pir` programs under a tagged-pointer
//! bounds sandbox, run the bundled bug corpus, and fuzz the checker against
//! an exact-bounds oracle.

use clap::{Args, Parser, Subcommand, ValueEnum};
use prism_core::checks::{AbortReason, Mutation};
use prism_core::corpus::{run_corpus, CorpusCase, Manifest};
use prism_core::instrument::{instrument, Instrumented, OptConfig};
use prism_core::ir::{parse, print, Program};
use prism_core::oracle::{fuzz, FuzzConfig, GenMode};
use prism_core::stats::StatsReport;
use prism_core::tagging::{Mode, Scheme};
use prism_core::vm::{run, Exit, VmConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_BOUNDS: u8 = 2;
const EXIT_ESCAPE: u8 = 3;
const EXIT_INVALID: u8 = 4;

#[derive(Parser)]
#[command(name = "prism", version, about = "Tagged-pointer bounds checking sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instrument and execute a program.
    Run(RunArgs),
    /// Print the instrumented program and its check sites.
    Instrument(InstrumentArgs),
    /// Run the bundled corpus against its expectations.
    Corpus(CorpusArgs),
    /// Differential fuzzing against the exact-bounds oracle.
    Fuzz(FuzzArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Prism,
    Pow2,
    Prism32,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Prism => Scheme::Prism,
            SchemeArg::Pow2 => Scheme::Pow2,
            SchemeArg::Prism32 => Scheme::Prism32,
        }
    }
}

#[derive(Args)]
struct ModeArgs {
    /// Bounds scheme.
    #[arg(long, value_enum, default_value = "prism")]
    mode: SchemeArg,
    /// Padding bytes after each object.
    #[arg(long, default_value_t = 0)]
    qpad: u64,
    /// Comma-separated optimizations: qpad, lower, combine, hoist, all.
    #[arg(long, default_value = "all", value_parser = OptConfig::parse_list, conflicts_with = "no_opt")]
    opt: OptConfig,
    /// Disable every optimization.
    #[arg(long)]
    no_opt: bool,
}

impl ModeArgs {
    fn mode(&self) -> Mode {
        Mode::new(self.mode.into(), self.qpad)
    }

    fn opts(&self) -> OptConfig {
        if self.no_opt {
            OptConfig::NONE
        } else {
            self.opt
        }
    }
}

#[derive(Args)]
struct RunArgs {
    file: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
    /// Write a JSON statistics report.
    #[arg(long, value_name = "FILE")]
    stats: Option<PathBuf>,
    /// Print one line per dynamic check.
    #[arg(long)]
    trace: bool,
    /// Inject a predicate bug (upper-off-by-one, skip-lower).
    #[arg(long)]
    mutation: Option<Mutation>,
    /// Integer arguments for @main.
    #[arg(allow_negative_numbers = true)]
    inputs: Vec<i64>,
}

#[derive(Args)]
struct InstrumentArgs {
    file: PathBuf,
    #[command(flatten)]
    mode: ModeArgs,
    /// Print the site table as JSON instead of the program.
    #[arg(long)]
    sites: bool,
}

#[derive(Args)]
struct CorpusArgs {
    /// Case names; all cases when omitted.
    names: Vec<String>,
    /// Run every case.
    #[arg(long, conflicts_with = "names")]
    all: bool,
    /// Print every matrix point, not only mismatches.
    #[arg(long)]
    matrix: bool,
    /// Restrict the matrix to these schemes.
    #[arg(long = "mode", value_enum)]
    modes: Vec<SchemeArg>,
    /// Restrict the matrix to these padding values.
    #[arg(long = "qpad")]
    qpads: Vec<u64>,
    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: u64,
    #[arg(long, value_enum, default_value = "prism")]
    mode: SchemeArg,
    #[arg(long, default_value_t = 0)]
    qpad: u64,
    /// Program shape: mixed, in-bounds or one-oob.
    #[arg(long, default_value = "mixed")]
    gen: GenMode,
    /// Also compare optimized and unoptimized runs of each program.
    #[arg(long)]
    dual: bool,
    /// Inject a predicate bug to check that the harness notices.
    #[arg(long)]
    mutation: Option<Mutation>,
    /// Directory for .pir reproducers of failing cases.
    #[arg(long, value_name = "DIR", default_value = "fuzz-repro")]
    out: PathBuf,
    /// Write the summary as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

fn load(path: &Path) -> Result<Program, u8> {
    let src = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        EXIT_FAILURE
    })?;
    parse(&src).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_INVALID
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), u8> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    std::fs::write(path, text + "\n").map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        EXIT_FAILURE
    })
}

fn exit_code(exit: &Exit) -> u8 {
    match exit {
        Exit::Ok { .. } => EXIT_OK,
        Exit::Violation(v) if v.reason == AbortReason::EscapeInvariant => EXIT_ESCAPE,
        Exit::Violation(_) => EXIT_BOUNDS,
        Exit::Error { .. } => EXIT_FAILURE,
    }
}

fn cmd_run(a: RunArgs) -> Result<u8, u8> {
    let program = load(&a.file)?;
    let inst = instrument(&program, a.mode.mode(), a.mode.opts());
    let cfg = VmConfig { trace: a.trace, mutation: a.mutation, ..VmConfig::default() };
    let r = run(&inst, &a.inputs, &cfg);
    for line in &r.trace {
        println!("{line}");
    }
    match &r.exit {
        Exit::Ok { value } => match value {
            Some(v) => println!("ok: returned {v}"),
            None => println!("ok"),
        },
        Exit::Violation(v) => {
            eprintln!(
                "violation: {} at {}:^{}[{}] (site {})",
                v.reason,
                v.function,
                v.block,
                v.index,
                v.site.map_or("extern".to_string(), |s| s.to_string())
            );
            println!("{}", serde_json::to_string_pretty(v).expect("reports serialize"));
        }
        Exit::Error { error } => eprintln!("error: {error}"),
    }
    if let Some(path) = &a.stats {
        write_json(path, &StatsReport::new(&inst, &r))?;
    }
    Ok(exit_code(&r.exit))
}

fn cmd_instrument(a: InstrumentArgs) -> Result<u8, u8> {
    let program = load(&a.file)?;
    let inst: Instrumented = instrument(&program, a.mode.mode(), a.mode.opts());
    if a.sites {
        println!("{}", serde_json::to_string_pretty(&inst.sites).expect("sites serialize"));
    } else {
        print!("{}", print(&inst.program));
    }
    Ok(EXIT_OK)
}

fn cmd_corpus(a: CorpusArgs) -> Result<u8, u8> {
    let manifest = Manifest::bundled();
    let mut cases: Vec<CorpusCase> = if a.all || a.names.is_empty() {
        manifest.cases.clone()
    } else {
        let mut v = Vec::new();
        for n in &a.names {
            match manifest.case(n) {
                Some(c) => v.push(c.clone()),
                None => {
                    eprintln!("error: no corpus case named {n}");
                    return Err(EXIT_FAILURE);
                }
            }
        }
        v
    };
    for c in &mut cases {
        if !a.modes.is_empty() {
            let keep: Vec<Scheme> = a.modes.iter().map(|&m| m.into()).collect();
            c.modes.retain(|m| keep.contains(m));
        }
        if !a.qpads.is_empty() {
            c.q.retain(|q| a.qpads.contains(q));
        }
    }
    let refs: Vec<&CorpusCase> = cases.iter().collect();
    let report = run_corpus(&refs, OptConfig::ALL).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_INVALID
    })?;
    for r in &report.runs {
        if a.matrix || !r.met {
            let got = match &r.exit {
                Exit::Ok { .. } => "pass".to_string(),
                Exit::Violation(v) => format!("violation ({})", v.reason),
                Exit::Error { error } => format!("error ({error})"),
            };
            println!(
                "{} {:<24} {:<8} q={:<3} expected {:<28} got {got}",
                if r.met { "ok  " } else { "FAIL" },
                r.case,
                r.mode,
                r.q,
                r.expected.to_string()
            );
        }
    }
    println!("{} runs, {} mismatched", report.runs.len(), report.mismatches);
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(if report.mismatches == 0 { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_fuzz(a: FuzzArgs) -> Result<u8, u8> {
    let mut cfg = FuzzConfig::new(a.seed, a.count, Mode::new(a.mode.into(), a.qpad));
    cfg.gen.mode = a.gen;
    cfg.dual = a.dual;
    cfg.mutation = a.mutation;
    let summary = fuzz(&cfg);
    println!(
        "{} programs, {} scheme violations, {} oracle violations, {} failing",
        summary.count, summary.scheme_violations, summary.oracle_violations, summary.failing_cases
    );
    for (k, n) in &summary.allowed {
        println!("  allowed {k:?}: {n}");
    }
    for (k, n) in &summary.disallowed {
        println!("  DISALLOWED {k:?}: {n}");
    }
    if !summary.failures.is_empty() {
        std::fs::create_dir_all(&a.out).map_err(|e| {
            eprintln!("error: cannot create {}: {e}", a.out.display());
            EXIT_FAILURE
        })?;
        for f in &summary.failures {
            let path = a.out.join(format!("seed{}_case{}.pir", a.seed, f.case));
            std::fs::write(&path, &f.source).map_err(|e| {
                eprintln!("error: cannot write {}: {e}", path.display());
                EXIT_FAILURE
            })?;
            println!("  repro: {}", path.display());
        }
    }
    if let Some(path) = &a.json {
        write_json(path, &summary)?;
    }
    Ok(if summary.passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Instrument(a) => cmd_instrument(a),
        Command::Corpus(a) => cmd_corpus(a),
        Command::Fuzz(a) => cmd_fuzz(a),
    };
    ExitCode::from(r.unwrap_or_else(|code| code))
}
