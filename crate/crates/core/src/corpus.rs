//! The bundled bug and regression corpus.
//!
//! Expectations live in `corpus/manifest.toml`. Each case runs over a
//! matrix of schemes and padding values; an expectation is either a clean
//! exit or a violation, optionally with its reason. Overrides refine the
//! default expectation for particular schemes or q values.

use crate::checks::AbortReason;
use crate::instrument::{instrument, OptConfig};
use crate::ir::{parse, Program};
use crate::stats::StatsReport;
use crate::tagging::{Mode, Scheme};
use crate::vm::{run, Exit, VmConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const MANIFEST: &str = include_str!("../corpus/manifest.toml");

/// Program sources shipped with the library, by file name.
pub const FILES: &[(&str, &str)] = &[
    ("backward_traversal.pir", include_str!("../corpus/backward_traversal.pir")),
    ("combine_fields.pir", include_str!("../corpus/combine_fields.pir")),
    ("cost_compare.pir", include_str!("../corpus/cost_compare.pir")),
    ("dynamic_alloca.pir", include_str!("../corpus/dynamic_alloca.pir")),
    ("end_address_escape.pir", include_str!("../corpus/end_address_escape.pir")),
    ("end_address_ok.pir", include_str!("../corpus/end_address_ok.pir")),
    ("forward_traversal.pir", include_str!("../corpus/forward_traversal.pir")),
    ("globals.pir", include_str!("../corpus/globals.pir")),
    ("linked_list.pir", include_str!("../corpus/linked_list.pir")),
    ("loop_hoist.pir", include_str!("../corpus/loop_hoist.pir")),
    ("negative_index.pir", include_str!("../corpus/negative_index.pir")),
    ("negative_length.pir", include_str!("../corpus/negative_length.pir")),
    ("one_past_ea.pir", include_str!("../corpus/one_past_ea.pir")),
    ("partial_struct.pir", include_str!("../corpus/partial_struct.pir")),
    ("recv_negative.pir", include_str!("../corpus/recv_negative.pir")),
    ("stack_escape.pir", include_str!("../corpus/stack_escape.pir")),
];

pub fn source(file: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == file).map(|(_, s)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Violation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub expect: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<AbortReason>,
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.expect, self.reason) {
            (Outcome::Pass, _) => f.write_str("pass"),
            (Outcome::Violation, None) => f.write_str("violation"),
            (Outcome::Violation, Some(r)) => write!(f, "violation ({r})"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    #[serde(default)]
    pub modes: Option<Vec<Scheme>>,
    #[serde(default)]
    pub q: Option<Vec<u64>>,
    #[serde(flatten)]
    pub expectation: Expectation,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusCase {
    pub name: String,
    pub file: String,
    pub description: String,
    #[serde(default)]
    pub inputs: Vec<i64>,
    #[serde(default)]
    pub traversal: Option<Traversal>,
    #[serde(default = "all_modes")]
    pub modes: Vec<Scheme>,
    #[serde(default = "standard_q")]
    pub q: Vec<u64>,
    #[serde(flatten)]
    pub expectation: Expectation,
    #[serde(default, rename = "override")]
    pub overrides: Vec<Override>,
}

fn all_modes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}

fn standard_q() -> Vec<u64> {
    Mode::STANDARD_Q.to_vec()
}

impl CorpusCase {
    /// Expected outcome at one matrix point; the last matching override wins.
    pub fn expected(&self, mode: Mode) -> Expectation {
        self.overrides
            .iter()
            .rev()
            .find(|o| {
                o.modes.as_ref().is_none_or(|m| m.contains(&mode.scheme))
                    && o.q.as_ref().is_none_or(|q| q.contains(&mode.q))
            })
            .map_or(self.expectation, |o| o.expectation)
    }

    pub fn matrix(&self) -> impl Iterator<Item = Mode> + '_ {
        self.modes.iter().flat_map(|&s| self.q.iter().map(move |&q| Mode::new(s, q)))
    }

    pub fn program(&self) -> Result<Program, String> {
        let src = source(&self.file).ok_or_else(|| format!("{}: no bundled file {}", self.name, self.file))?;
        parse(src).map_err(|e| format!("{}: {e}", self.file))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    #[serde(rename = "case")]
    pub cases: Vec<CorpusCase>,
}

impl Manifest {
    pub fn bundled() -> Manifest {
        toml::from_str(MANIFEST).expect("bundled manifest is valid")
    }

    pub fn case(&self, name: &str) -> Option<&CorpusCase> {
        self.cases.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseRun {
    pub case: String,
    pub mode: Scheme,
    pub q: u64,
    pub expected: Expectation,
    pub exit: Exit,
    pub dynamic_checks: u64,
    pub sa_fetches: u64,
    pub active_sites: usize,
    pub met: bool,
}

pub fn meets(e: Expectation, exit: &Exit) -> bool {
    match (e.expect, exit) {
        (Outcome::Pass, Exit::Ok { .. }) => true,
        (Outcome::Violation, Exit::Violation(v)) => e.reason.is_none_or(|r| r == v.reason),
        _ => false,
    }
}

/// Runs one case at one matrix point with every optimization enabled.
pub fn run_case(case: &CorpusCase, program: &Program, mode: Mode, opts: OptConfig) -> CaseRun {
    let inst = instrument(program, mode, opts);
    let r = run(&inst, &case.inputs, &VmConfig::default());
    let stats = StatsReport::new(&inst, &r);
    let expected = case.expected(mode);
    CaseRun {
        case: case.name.clone(),
        mode: mode.scheme,
        q: mode.q,
        expected,
        met: meets(expected, &r.exit),
        exit: r.exit,
        dynamic_checks: stats.dynamic_checks,
        sa_fetches: stats.sa_fetches,
        active_sites: inst.active_count(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusReport {
    pub schema: u32,
    pub runs: Vec<CaseRun>,
    pub mismatches: usize,
}

/// Runs `cases` over their matrices in parallel, results in manifest order.
pub fn run_corpus(cases: &[&CorpusCase], opts: OptConfig) -> Result<CorpusReport, String> {
    let programs: Vec<Program> = cases.iter().map(|c| c.program()).collect::<Result<_, _>>()?;
    let points: Vec<(usize, Mode)> =
        cases.iter().enumerate().flat_map(|(i, c)| c.matrix().map(move |m| (i, m))).collect();
    let runs: Vec<CaseRun> = points.par_iter().map(|&(i, m)| run_case(cases[i], &programs[i], m, opts)).collect();
    let mismatches = runs.iter().filter(|r| !r.met).count();
    Ok(CorpusReport { schema: 1, runs, mismatches })
}
