//! Check instrumentation: KSA computation, access and escape checks,
//! metadata reset, pointer compare/subtract masking and check elimination.
//!
//! The pass never removes a check instruction. Elimination only changes a
//! site's status in the table; the VM consults the table and skips the
//! predicate at elided sites, which keeps elided sites observable to the
//! oracle.

mod insert;
mod ksa;
mod opt;
mod reset;

pub use ksa::{compute_ksa, KsaMap};

use crate::ir::{FuncId, Function, InstId, InstKind, Program, SiteId, ValueId};
use crate::tagging::Mode;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Largest constant, and largest window width, the combine rules accept.
pub const COMBINE_CAP: i64 = 1 << 22;
/// Windows ending at or below this may drop the lower-bound check.
pub const LOWER_BOUND_LIMIT: i64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Access,
    Escape,
    LoopHoisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteStatus {
    Active,
    ElidedByQ,
    ElidedByCombine,
    ElidedByDominance,
    LowerBoundDropped,
    ElidedByHoist,
}

impl SiteStatus {
    /// A predicate still runs here.
    pub fn is_checked(self) -> bool {
        matches!(self, SiteStatus::Active | SiteStatus::LowerBoundDropped)
    }

    pub fn is_elided(self) -> bool {
        !self.is_checked()
    }
}

/// Accessed byte range relative to the KSA, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Window {
    Const {
        lo: i64,
        hi: i64,
    },
    /// `[lo + Σ v·s, hi + Σ v·s]`.
    Var {
        terms: Vec<(ValueId, i64)>,
        lo: i64,
        hi: i64,
    },
    /// The pointer does not derive from its KSA by gep alone.
    Opaque,
}

impl Window {
    pub fn is_const(&self) -> bool {
        matches!(self, Window::Const { .. })
    }

    pub fn bounds(&self) -> Option<(i64, i64)> {
        match *self {
            Window::Const { lo, hi } | Window::Var { lo, hi, .. } => Some((lo, hi)),
            Window::Opaque => None,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Const { lo, hi } => write!(f, "[{lo},{hi}]"),
            Window::Var { lo, hi, .. } => write!(f, "[{lo}+v,{hi}+v]"),
            Window::Opaque => f.write_str("opaque"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckSite {
    pub id: SiteId,
    pub function: String,
    #[serde(skip)]
    pub func: FuncId,
    /// The `check.*` instruction.
    #[serde(skip)]
    pub inst: InstId,
    pub kind: SiteKind,
    /// KSA value; `None` when the KSA is the null constant.
    #[serde(skip)]
    pub ksa: Option<ValueId>,
    pub ksa_name: String,
    pub window: Window,
    pub size: u64,
    /// Size of an untagged stack or global object the KSA names.
    pub static_size: Option<u64>,
    pub status: SiteStatus,
    /// Widening applied by combine: the check covers
    /// `[ptr + lo_adj, ptr + size + hi_adj)`.
    pub lo_adj: i64,
    pub hi_adj: i64,
    /// Escape check skipped at runtime when the pointer equals its KSA.
    pub guarded: bool,
    pub q_used: u64,
}

impl CheckSite {
    pub fn is_widened(&self) -> bool {
        self.lo_adj != 0 || self.hi_adj != 0
    }

    /// Window after widening.
    pub fn effective_bounds(&self) -> Option<(i64, i64)> {
        self.window.bounds().map(|(lo, hi)| (lo + self.lo_adj, hi + self.hi_adj))
    }

    pub fn is_access(&self) -> bool {
        matches!(self.kind, SiteKind::Access | SiteKind::LoopHoisted)
    }
}

/// Which eliminations run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptConfig {
    pub qpad: bool,
    pub lower: bool,
    pub combine: bool,
    pub hoist: bool,
}

impl OptConfig {
    pub const ALL: OptConfig = OptConfig { qpad: true, lower: true, combine: true, hoist: true };
    pub const NONE: OptConfig = OptConfig { qpad: false, lower: false, combine: false, hoist: false };
    pub const QPAD_ONLY: OptConfig = OptConfig { qpad: true, ..Self::NONE };

    /// Parses a comma-separated list such as `qpad,combine`.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut c = Self::NONE;
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "qpad" => c.qpad = true,
                "lower" => c.lower = true,
                "combine" => c.combine = true,
                "hoist" => c.hoist = true,
                "all" => c = Self::ALL,
                _ => return Err(format!("unknown optimization '{name}' (expected qpad, lower, combine, hoist)")),
            }
        }
        Ok(c)
    }
}

impl Default for OptConfig {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for OptConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> =
            [(self.qpad, "qpad"), (self.lower, "lower"), (self.combine, "combine"), (self.hoist, "hoist")]
                .into_iter()
                .filter_map(|(on, n)| on.then_some(n))
                .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

/// An instrumented program and its site table. `sites[i].id == SiteId(i)`.
#[derive(Debug, Clone)]
pub struct Instrumented {
    pub program: Program,
    pub sites: Vec<CheckSite>,
    pub mode: Mode,
    pub opts: OptConfig,
}

impl Instrumented {
    pub fn site(&self, id: SiteId) -> &CheckSite {
        &self.sites[id.idx()]
    }

    pub fn sites_in<'a>(&'a self, function: &'a str) -> impl Iterator<Item = &'a CheckSite> + 'a {
        self.sites.iter().filter(move |s| s.function == function)
    }

    /// Access checks whose predicate still runs in `function`.
    pub fn active_access_count(&self, function: &str) -> usize {
        self.sites_in(function).filter(|s| s.is_access() && s.status.is_checked()).count()
    }

    pub fn active_count(&self) -> usize {
        self.sites.iter().filter(|s| s.status.is_checked()).count()
    }
}

/// Runs the whole pipeline. Deterministic for a given input.
pub fn instrument(p: &Program, mode: Mode, opts: OptConfig) -> Instrumented {
    let mut program = p.clone();
    insert::mark_escaping_objects(&mut program);
    let mut sites = Vec::new();
    for fi in 0..program.functions.len() {
        let fid = FuncId(fi as u32);
        let (globals, f) = split(&mut program, fi);
        let ksa = compute_ksa(f);
        insert::insert_access_checks(f, fid, &globals, &ksa, mode, &mut sites);
        insert::insert_escape_checks(f, fid, &ksa, mode, &mut sites);
        reset::instrument_ptr_cmp_sub(f, &globals);
        reset::reset_metadata(f);
    }
    if opts.qpad {
        opt::opt_qpad(&mut sites, mode.q);
    }
    if opts.lower {
        opt::opt_lower_bound(&mut sites);
    }
    for fi in 0..program.functions.len() {
        let f = &mut program.functions[fi];
        if opts.combine {
            opt::opt_combine(f, FuncId(fi as u32), &mut sites);
        }
        if opts.hoist {
            opt::opt_loop_hoist(f, FuncId(fi as u32), mode, &mut sites);
        }
    }
    Instrumented { program, sites, mode, opts }
}

/// Static size of every non-escaping global, alongside a mutable function.
fn split(p: &mut Program, fi: usize) -> (Vec<Option<u64>>, &mut Function) {
    let globals = p.globals.iter().map(|g| (!g.escapes).then_some(g.size)).collect();
    (globals, &mut p.functions[fi])
}

/// Places `id` directly before `anchor` in the anchor's block.
fn insert_before(f: &mut Function, anchor: InstId, id: InstId) {
    let (b, i) = locate(f, anchor);
    f.blocks[b].insts.insert(i, id);
}

/// Places `id` directly after `anchor`. After a phi, the new instruction
/// goes after the whole phi group unless it is a phi itself.
fn insert_after(f: &mut Function, anchor: InstId, id: InstId) {
    let (b, mut i) = locate(f, anchor);
    i += 1;
    if !matches!(f.inst(id).kind, InstKind::Phi { .. }) {
        let insts = &f.blocks[b].insts;
        while i < insts.len() && matches!(f.insts[insts[i].idx()].kind, InstKind::Phi { .. }) {
            i += 1;
        }
    }
    f.blocks[b].insts.insert(i, id);
}

/// Places `id` at the start of the entry block.
fn insert_at_entry(f: &mut Function, id: InstId) {
    f.blocks[0].insts.insert(0, id);
}

fn locate(f: &Function, inst: InstId) -> (usize, usize) {
    for (b, block) in f.blocks.iter().enumerate() {
        if let Some(i) = block.insts.iter().position(|&x| x == inst) {
            return (b, i);
        }
    }
    panic!("instruction {} is not placed", inst.0)
}
