//! Per-run statistics report.

use crate::instrument::{CheckSite, Instrumented, SiteStatus};
use crate::tagging::Scheme;
use crate::vm::{Exit, RunResult, ViolationReport};
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ElidedBy {
    pub qpad: usize,
    /// Covered by a dominating or widened check.
    pub combine: usize,
    /// Only the upper half still runs; counted here rather than as active.
    pub lower_bound: usize,
    pub hoist: usize,
}

impl ElidedBy {
    pub fn total(&self) -> usize {
        self.qpad + self.combine + self.lower_bound + self.hoist
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub schema: u32,
    pub mode: Scheme,
    pub q: u64,
    pub opts: String,
    pub static_checks_inserted: usize,
    /// Sites with status active. `static_checks_inserted == active + elided_by.total()`.
    pub active: usize,
    pub elided_by: ElidedBy,
    pub dynamic_checks: u64,
    pub sa_fetches: u64,
    pub sa_fetch_fraction: f64,
    pub xor_lower_paths: u64,
    pub guarded_skips: u64,
    pub violations: u64,
    pub violation: Option<ViolationReport>,
    pub exit: Exit,
    pub sites: Vec<CheckSite>,
}

impl StatsReport {
    pub fn new(inst: &Instrumented, run: &RunResult) -> Self {
        let mut elided = ElidedBy::default();
        let mut active = 0;
        for s in &inst.sites {
            match s.status {
                SiteStatus::Active => active += 1,
                SiteStatus::ElidedByQ => elided.qpad += 1,
                SiteStatus::ElidedByCombine | SiteStatus::ElidedByDominance => elided.combine += 1,
                SiteStatus::LowerBoundDropped => elided.lower_bound += 1,
                SiteStatus::ElidedByHoist => elided.hoist += 1,
            }
        }
        let st = run.stats;
        let violation = run.exit.violation().cloned();
        StatsReport {
            schema: 1,
            mode: inst.mode.scheme,
            q: inst.mode.q,
            opts: inst.opts.to_string(),
            static_checks_inserted: inst.sites.len(),
            active,
            elided_by: elided,
            dynamic_checks: st.dynamic_checks,
            sa_fetches: st.sa_fetches,
            sa_fetch_fraction: st.sa_fetches as f64 / st.dynamic_checks.max(1) as f64,
            xor_lower_paths: st.xor_lower_paths,
            guarded_skips: st.guarded_skips,
            violations: violation.is_some() as u64,
            violation,
            exit: run.exit.clone(),
            sites: inst.sites.clone(),
        }
    }
}
