//! Exact-bounds reference and differential harness.
//!
//! The reference executor is the VM itself with the oracle backend, so the
//! two runs share one interpreter and differ only in who decides checks.
//! During the scheme run an observer classifies every check against the
//! live allocation records and sorts each disagreement into an allowed or
//! a disallowed divergence.

mod gen;

pub use gen::{generate, GenConfig, GenMode};

use crate::checks::{AbortReason, CheckStats, Mutation};
use crate::heap::{AllocationRecord, Heap};
use crate::instrument::{instrument, CheckSite, Instrumented, OptConfig, SiteKind, SiteStatus};
use crate::ir::{parse, Program, SiteId};
use crate::tagging::{Mode, Scheme};
use crate::vm::{run_observed, Backend, CheckEvent, EventKind, Exit, Observer, VmConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccessClass {
    InBounds,
    /// Past EA but within the q padding, starting at or after SA.
    InPadding,
    Oob,
    /// An escaping pointer outside `[SA, EA]`.
    InvalidEscape,
}

/// Classifies the access `[ptr, ptr + size)` against one object.
pub fn classify(rec: &AllocationRecord, ptr: u64, size: u64) -> AccessClass {
    let end = ptr.saturating_add(size);
    if ptr < rec.sa {
        AccessClass::Oob
    } else if end <= rec.ea {
        AccessClass::InBounds
    } else if end <= rec.ea + rec.q {
        AccessClass::InPadding
    } else {
        AccessClass::Oob
    }
}

/// The live object a KSA refers to. Pow2 KSAs may sit past EA inside the
/// aligned block, so the reservation is the fallback.
pub fn owner(heap: &Heap, ksa: u64) -> Option<&AllocationRecord> {
    heap.object_at(ksa).or_else(|| heap.reservation_at(ksa))
}

pub fn classify_access(heap: &Heap, ksa: u64, ptr: u64, size: u64) -> AccessClass {
    owner(heap, ksa).map_or(AccessClass::Oob, |r| classify(r, ptr, size))
}

pub fn classify_escape(heap: &Heap, ksa: u64, p: u64) -> AccessClass {
    match owner(heap, ksa) {
        Some(r) if (r.sa..=r.ea).contains(&p) => AccessClass::InBounds,
        _ => AccessClass::InvalidEscape,
    }
}

/// Exclusive end limit a Pow2 check admits for `rec`.
pub fn pow2_limit(rec: &AllocationRecord) -> Option<u64> {
    rec.aligned_size.map(|a| rec.sa + a - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// Padding access passing at a site elided by q.
    PaddingElided,
    /// Pow2 pass inside the aligned block.
    Pow2Relaxation,
    /// Widened or hoisted check aborting before the faulty access runs.
    EarlyAbort,
    FalseAbort,
    MissedViolation,
    ExitMismatch,
    SaFetchCount,
    RuntimeError,
}

impl DivergenceKind {
    pub fn is_allowed(self) -> bool {
        matches!(self, DivergenceKind::PaddingElided | DivergenceKind::Pow2Relaxation | DivergenceKind::EarlyAbort)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub kind: DivergenceKind,
    pub site: Option<SiteId>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub prism: Exit,
    pub oracle: Exit,
    /// Both runs end the same way.
    pub agreement: bool,
    pub divergences: Vec<Divergence>,
    pub stats: CheckStats,
    /// Fetches the observer predicted from addresses and records alone.
    pub predicted_sa_fetches: u64,
}

impl Verdict {
    pub fn disallowed(&self) -> impl Iterator<Item = &Divergence> {
        self.divergences.iter().filter(|d| !d.kind.is_allowed())
    }

    pub fn is_clean(&self) -> bool {
        self.disallowed().next().is_none()
    }
}

/// Classifies every check of a scheme run.
pub struct DiffObserver<'a> {
    sites: &'a [CheckSite],
    scheme: Scheme,
    mask: u64,
    pub divergences: Vec<Divergence>,
    pub predicted_sa_fetches: u64,
    pub classes: BTreeMap<AccessClass, u64>,
}

impl<'a> DiffObserver<'a> {
    pub fn new(inst: &'a Instrumented) -> Self {
        DiffObserver {
            sites: &inst.sites,
            scheme: inst.mode.scheme,
            mask: inst.mode.scheme.addr_mask(),
            divergences: Vec::new(),
            predicted_sa_fetches: 0,
            classes: BTreeMap::new(),
        }
    }

    fn push(&mut self, kind: DivergenceKind, ev: &CheckEvent, class: AccessClass) {
        let detail = format!(
            "{:?} ksa={:#x} ptr={:#x} size={} class={class:?} status={:?}",
            ev.kind,
            ev.ksa.value(),
            ev.ptr,
            ev.size,
            ev.status
        );
        self.divergences.push(Divergence { kind, site: ev.site, detail });
    }

    /// Pass allowed by the Pow2 relaxation: inside the aligned block,
    /// extended by q at sites elided by q.
    fn pow2_allows(&self, rec: Option<&AllocationRecord>, lo: u64, hi: u64, extra: u64) -> bool {
        self.scheme == Scheme::Pow2
            && rec.and_then(|r| pow2_limit(r).map(|lim| lo >= r.sa && hi <= lim + extra)).unwrap_or(false)
    }
}

impl Observer for DiffObserver<'_> {
    fn on_check(&mut self, ev: &CheckEvent, heap: &Heap) {
        let k = ev.ksa.value() & self.mask;
        let site = ev.site.map(|s| &self.sites[s.idx()]);
        let rec = owner(heap, k);
        let (lo0, hi0) = (ev.ptr, ev.ptr.saturating_add(ev.size));
        let class = match ev.kind {
            EventKind::Escape => classify_escape(heap, k, ev.ptr),
            _ => classify_access(heap, k, ev.ptr, ev.size),
        };
        *self.classes.entry(class).or_default() += 1;

        let Some(outcome) = ev.outcome else {
            // Guarded escapes of the KSA itself and oracle-skipped ranges.
            if ev.kind != EventKind::Access || class == AccessClass::InBounds {
                return;
            }
            let by_q = ev.status == Some(SiteStatus::ElidedByQ);
            let q = rec.map_or(0, |r| r.q);
            if by_q && class == AccessClass::InPadding {
                self.push(DivergenceKind::PaddingElided, ev, class);
            } else if self.pow2_allows(rec, lo0, hi0, if by_q { q } else { 0 }) {
                self.push(DivergenceKind::Pow2Relaxation, ev, class);
            } else {
                self.push(DivergenceKind::MissedViolation, ev, class);
            }
            return;
        };
        let (lo, hi) = ev.checked.expect("a predicate ran");

        let full = site.is_none_or(|s| s.static_size.is_none() && s.status == SiteStatus::Active);
        let upper_passes = rec.is_some_and(|r| hi <= r.ea && k <= r.ea);
        if self.scheme != Scheme::Pow2 && full && lo < k && upper_passes {
            self.predicted_sa_fetches += 1;
        }

        if outcome.passed() {
            if class == AccessClass::InBounds {
                return;
            }
            if self.pow2_allows(rec, lo0, hi0, 0) {
                self.push(DivergenceKind::Pow2Relaxation, ev, class);
            } else {
                self.push(DivergenceKind::MissedViolation, ev, class);
            }
        } else {
            let checked_class = match ev.kind {
                EventKind::Escape => class,
                _ => classify_access(heap, k, lo, hi.saturating_sub(lo)),
            };
            if checked_class == AccessClass::InBounds {
                self.push(DivergenceKind::FalseAbort, ev, class);
            } else if class == AccessClass::InBounds && (lo, hi) != (lo0, hi0) {
                self.push(DivergenceKind::EarlyAbort, ev, class);
            }
        }
    }
}

fn exit_name(e: &Exit) -> &'static str {
    match e {
        Exit::Ok { .. } => "ok",
        Exit::Violation(_) => "violation",
        Exit::Error { .. } => "error",
    }
}

/// Runs `inst` under its scheme and under the oracle and compares them.
pub fn differential_instrumented(inst: &Instrumented, inputs: &[i64], mutation: Option<Mutation>) -> Verdict {
    let cfg = VmConfig { mutation, ..VmConfig::default() };
    let mut obs = DiffObserver::new(inst);
    let prism = run_observed(inst, inputs, &cfg, &mut obs);
    let oracle_cfg = VmConfig { backend: Backend::Oracle, ..VmConfig::default() };
    let oracle = run_observed(inst, inputs, &oracle_cfg, &mut ());
    let mut divergences = obs.divergences;
    let any_allowed = divergences.iter().any(|d| d.kind.is_allowed());
    let mut exit_divergence = |kind, detail: String| divergences.push(Divergence { kind, site: None, detail });
    match (&prism.exit, &oracle.exit) {
        (Exit::Error { error }, _) | (_, Exit::Error { error }) => {
            exit_divergence(DivergenceKind::RuntimeError, error.to_string());
        }
        (Exit::Violation(v), Exit::Ok { .. }) => {
            exit_divergence(DivergenceKind::ExitMismatch, format!("scheme aborted at {:?}, oracle ran clean", v.site));
        }
        (Exit::Ok { .. }, Exit::Violation(v)) if !any_allowed => {
            exit_divergence(DivergenceKind::ExitMismatch, format!("oracle aborted at {:?}, scheme ran clean", v.site));
        }
        _ => {}
    }
    if mutation.is_none() && obs.predicted_sa_fetches != prism.stats.sa_fetches {
        exit_divergence(
            DivergenceKind::SaFetchCount,
            format!("{} fetches, {} predicted", prism.stats.sa_fetches, obs.predicted_sa_fetches),
        );
    }
    Verdict {
        agreement: exit_name(&prism.exit) == exit_name(&oracle.exit),
        prism: prism.exit,
        oracle: oracle.exit,
        divergences,
        stats: prism.stats,
        predicted_sa_fetches: obs.predicted_sa_fetches,
    }
}

pub fn differential_run(p: &Program, inputs: &[i64], mode: Mode, opts: OptConfig) -> Verdict {
    differential_instrumented(&instrument(p, mode, opts), inputs, None)
}

/// Counts access sites executed, elided or not, until the run stops.
#[derive(Default)]
struct AccessCounter(u64);

impl Observer for AccessCounter {
    fn on_check(&mut self, ev: &CheckEvent, _: &Heap) {
        if ev.kind == EventKind::Access {
            self.0 += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DualVerdict {
    pub optimized: Exit,
    pub plain: Exit,
    /// Access sites reached before each run stopped.
    pub optimized_accesses: u64,
    pub plain_accesses: u64,
    pub consistent: bool,
}

/// Runs `p` with combine, lower-bound dropping and hoisting on and off,
/// keeping q padding the same. A widened or hoisted check may abort
/// earlier than the plain run; every other outcome must match exactly.
pub fn dual_run(p: &Program, inputs: &[i64], mode: Mode) -> DualVerdict {
    let on = instrument(p, mode, OptConfig::ALL);
    let off = instrument(p, mode, OptConfig::QPAD_ONLY);
    let cfg = VmConfig::default();
    let (mut a, mut b) = (AccessCounter::default(), AccessCounter::default());
    let ra = run_observed(&on, inputs, &cfg, &mut a);
    let rb = run_observed(&off, inputs, &cfg, &mut b);
    let consistent = match (&ra.exit, &rb.exit) {
        (Exit::Ok { value: x }, Exit::Ok { value: y }) => x == y,
        (Exit::Violation(x), Exit::Violation(y)) => {
            let early = x.site.map(|s| on.site(s)).is_some_and(|s| s.is_widened() || s.kind == SiteKind::LoopHoisted);
            if early {
                a.0 <= b.0
            } else {
                x.site == y.site && x.reason == y.reason && a.0 == b.0
            }
        }
        _ => false,
    };
    DualVerdict { optimized: ra.exit, plain: rb.exit, optimized_accesses: a.0, plain_accesses: b.0, consistent }
}

#[derive(Debug, Clone)]
pub struct FuzzConfig {
    pub seed: u64,
    pub count: u64,
    pub mode: Mode,
    pub gen: GenConfig,
    /// Also compare optimized and plain runs of each program.
    pub dual: bool,
    /// Injected predicate bug, for checking that the harness notices.
    pub mutation: Option<Mutation>,
}

impl FuzzConfig {
    pub fn new(seed: u64, count: u64, mode: Mode) -> Self {
        FuzzConfig { seed, count, mode, gen: GenConfig::default(), dual: false, mutation: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FuzzFailure {
    pub case: u64,
    pub divergences: Vec<Divergence>,
    pub dual: Option<DualVerdict>,
    pub source: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FuzzSummary {
    pub schema: u32,
    pub seed: u64,
    pub count: u64,
    pub mode: Scheme,
    pub q: u64,
    pub generator: GenMode,
    pub mutation: Option<String>,
    pub scheme_violations: u64,
    pub oracle_violations: u64,
    pub violation_reasons: BTreeMap<AbortReason, u64>,
    pub allowed: BTreeMap<DivergenceKind, u64>,
    pub disallowed: BTreeMap<DivergenceKind, u64>,
    pub dual_checked: u64,
    pub dual_inconsistent: u64,
    pub dynamic_checks: u64,
    pub sa_fetches: u64,
    /// Failing cases, at most [`MAX_REPORTED_FAILURES`].
    pub failures: Vec<FuzzFailure>,
    pub failing_cases: u64,
}

pub const MAX_REPORTED_FAILURES: usize = 20;

impl FuzzSummary {
    pub fn passed(&self) -> bool {
        self.failing_cases == 0
    }
}

struct CaseResult {
    verdict: Verdict,
    dual: Option<DualVerdict>,
    source: String,
}

fn run_case(cfg: &FuzzConfig, case: u64) -> CaseResult {
    let source = generate(cfg.seed, case, &cfg.gen);
    let program = parse(&source).unwrap_or_else(|e| panic!("generated program does not parse: {e}\n{source}"));
    let inst = instrument(&program, cfg.mode, OptConfig::ALL);
    let verdict = differential_instrumented(&inst, &[], cfg.mutation);
    let dual = cfg.dual.then(|| dual_run(&program, &[], cfg.mode));
    CaseResult { verdict, dual, source }
}

/// Generates and checks `count` programs in parallel. The summary does
/// not depend on thread scheduling.
pub fn fuzz(cfg: &FuzzConfig) -> FuzzSummary {
    let results: Vec<CaseResult> = (0..cfg.count).into_par_iter().map(|i| run_case(cfg, i)).collect();
    let mut s = FuzzSummary {
        schema: 1,
        seed: cfg.seed,
        count: cfg.count,
        mode: cfg.mode.scheme,
        q: cfg.mode.q,
        generator: cfg.gen.mode,
        mutation: cfg.mutation.map(|m| m.to_string()),
        scheme_violations: 0,
        oracle_violations: 0,
        violation_reasons: BTreeMap::new(),
        allowed: BTreeMap::new(),
        disallowed: BTreeMap::new(),
        dual_checked: 0,
        dual_inconsistent: 0,
        dynamic_checks: 0,
        sa_fetches: 0,
        failures: Vec::new(),
        failing_cases: 0,
    };
    for (case, r) in results.into_iter().enumerate() {
        let v = &r.verdict;
        if let Exit::Violation(rep) = &v.prism {
            s.scheme_violations += 1;
            *s.violation_reasons.entry(rep.reason).or_default() += 1;
        }
        if matches!(v.oracle, Exit::Violation(_)) {
            s.oracle_violations += 1;
        }
        s.dynamic_checks += v.stats.dynamic_checks;
        s.sa_fetches += v.stats.sa_fetches;
        for d in &v.divergences {
            let bucket = if d.kind.is_allowed() { &mut s.allowed } else { &mut s.disallowed };
            *bucket.entry(d.kind).or_default() += 1;
        }
        let mut failed = !v.is_clean();
        if let Some(d) = &r.dual {
            s.dual_checked += 1;
            if !d.consistent {
                s.dual_inconsistent += 1;
                failed = true;
            }
        }
        if failed {
            s.failing_cases += 1;
            if s.failures.len() < MAX_REPORTED_FAILURES {
                s.failures.push(FuzzFailure {
                    case: case as u64,
                    divergences: v.disallowed().cloned().collect(),
                    dual: r.dual.clone(),
                    source: r.source,
                });
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::Mode;

    fn rec(sa: u64, size: u64, q: u64) -> AllocationRecord {
        let mut h = Heap::new(Mode::prism(q));
        let t = h.alloc(size).unwrap();
        let mut r = h.record(t.raw()).unwrap().clone();
        r.sa = sa;
        r.ea = sa + size;
        r
    }

    #[test]
    fn classification_examples() {
        let r = rec(0x1000, 32, 8);
        assert_eq!(classify(&r, 0x1000, 32), AccessClass::InBounds);
        assert_eq!(classify(&r, 0x1000 + 29, 4), AccessClass::InPadding);
        assert_eq!(classify(&r, 0x1000 + 36, 4), AccessClass::InPadding);
        assert_eq!(classify(&r, 0x1000 + 37, 4), AccessClass::Oob);
        assert_eq!(classify(&r, 0xFFF, 1), AccessClass::Oob);
    }

    #[test]
    fn classes_partition_every_access() {
        let r = rec(0x1000, 16, 8);
        for ptr in 0xFF0..0x1030u64 {
            for size in 0..9 {
                let end = ptr + size;
                let c = classify(&r, ptr, size);
                let expect = if ptr >= r.sa && end <= r.ea {
                    AccessClass::InBounds
                } else if ptr >= r.sa && end <= r.ea + 8 {
                    AccessClass::InPadding
                } else {
                    AccessClass::Oob
                };
                assert_eq!(c, expect, "{ptr:#x}+{size}");
            }
        }
    }
}
