//! End-to-end acceptance gate. One test per criterion; each prints a
//! `PASS`/`FAIL` line with the numbers it measured (`--nocapture` to see).

use prism_core::checks::{bounds_check_2k, AbortReason};
use prism_core::corpus::{source, Manifest, Traversal};
use prism_core::heap::Heap;
use prism_core::instrument::{instrument, OptConfig, SiteStatus};
use prism_core::ir::parse;
use prism_core::oracle::{fuzz, generate, owner, FuzzConfig, FuzzSummary, GenConfig, GenMode};
use prism_core::tagging::{compute_ea, decode_ea32, pow2_aligned_size, FrameClass, Mode, Scheme, SMALL_FRAME_SIZE};
use prism_core::vm::{run, run_observed, CheckEvent, EventKind, Exit, Observer, VmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

const ENCODING_SAMPLES: usize = 100_000;
const SMALL_LIMIT: u64 = (1 << 16) - 8;
const BOUNDARY_SPREAD: u64 = 64;
const LARGEST_SAMPLED: u64 = 1 << 28;
const FUZZ_PROGRAMS: u64 = 10_000;
const FUZZ_Q: [u64; 3] = [0, 8, 32];
const FUZZ_SEED: u64 = 1;
const POW2_A: u64 = 32;
const POW2_Q: u64 = 8;

fn report(n: u32, name: &str, ok: bool, detail: String) {
    println!("criterion {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} {name}: {detail}");
}

fn sample_sizes() -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<u64> = (SMALL_LIMIT - BOUNDARY_SPREAD..=SMALL_LIMIT + BOUNDARY_SPREAD).collect();
    v.extend([1, 2, 3, SMALL_LIMIT, LARGEST_SAMPLED]);
    while v.len() < ENCODING_SAMPLES {
        let s = match rng.gen_range(0..3) {
            0 => rng.gen_range(1..=SMALL_LIMIT),
            // Log-uniform over the large range.
            1 => {
                let bits = rng.gen_range(16..=28);
                rng.gen_range((1u64 << (bits - 1)).max(SMALL_LIMIT)..=(1u64 << bits).min(LARGEST_SAMPLED))
            }
            _ => rng.gen_range(1..=256),
        };
        v.push(s);
    }
    v
}

fn smallest_pow2_above(size: u64) -> u64 {
    let mut a = 1;
    while a < size + 1 {
        a *= 2;
    }
    a
}

/// Checks one allocation's encoding against addresses derived from the
/// request alone. Returns a description of the first mismatch.
fn encoding_mismatch(heap: &mut Heap, size: u64) -> Option<String> {
    let t = match heap.alloc(size) {
        Ok(t) => t,
        Err(e) => return Some(format!("alloc {size}: {e}")),
    };
    let scheme = heap.mode().scheme;
    let sa = t.value() & scheme.addr_mask();
    let rec = heap.record(sa).cloned();
    let err = match (scheme, rec) {
        (_, None) => Some(format!("size {size}: no record")),
        (_, Some(r)) if r.ea - r.sa != size || r.sa != sa => Some(format!("size {size}: record {r:?}")),
        (Scheme::Prism, Some(r)) => {
            let ea = sa + size;
            let large = t.frame_class() == FrameClass::Large;
            let probes = [sa, sa + size / 2, ea - 1, ea];
            if large && !ea.is_multiple_of(SMALL_FRAME_SIZE) {
                Some(format!("size {size}: large end {ea:#x} unaligned"))
            } else if probes.iter().any(|&p| compute_ea(t.with_addr(p, scheme)) != ea) {
                Some(format!("size {size}: decoded {:#x} != {ea:#x} ({r:?})", compute_ea(t)))
            } else {
                None
            }
        }
        (Scheme::Pow2, Some(_)) => {
            let a = smallest_pow2_above(size);
            let probes = [sa, sa + size / 2, sa + size];
            if pow2_aligned_size(t) != a || !sa.is_multiple_of(a) {
                Some(format!("size {size}: A={} sa={sa:#x}", pow2_aligned_size(t)))
            } else if probes.iter().any(|&p| (p & !(a - 1)) + a != sa + a) {
                Some(format!("size {size}: block end moves"))
            } else {
                None
            }
        }
        (Scheme::Prism32, Some(_)) => {
            let ea = sa + size;
            (decode_ea32(t) != ea || ea > u32::MAX as u64)
                .then(|| format!("size {size}: decoded {:#x}", decode_ea32(t)))
        }
    };
    heap.free(t).ok();
    err
}

#[test]
fn criterion_1_encoding_roundtrip() {
    let sizes = sample_sizes();
    let mut failures = Vec::new();
    for scheme in Scheme::ALL {
        let mut heap = Heap::new(Mode::new(scheme, 0));
        let bad = sizes.iter().filter_map(|&s| encoding_mismatch(&mut heap, s)).collect::<Vec<_>>();
        failures.extend(bad.into_iter().take(3).map(|e| format!("{scheme}: {e}")));
    }
    report(
        1,
        "encoding roundtrip",
        failures.is_empty(),
        format!("{} sizes x 3 schemes, {} mismatches {:?}", sizes.len(), failures.len(), failures),
    );
}

#[test]
fn criterion_2_linked_list_counts() {
    let p = parse(source("linked_list.pir").unwrap()).unwrap();
    let counts: Vec<usize> = [0, 4, 8, 16]
        .iter()
        .map(|&q| instrument(&p, Mode::prism(q), OptConfig::ALL).active_access_count("search_and_update"))
        .collect();
    let inst = instrument(&p, Mode::prism(16), OptConfig::ALL);
    let r = run(&inst, &[], &VmConfig::default());
    report(
        2,
        "linked-list golden counts",
        counts == [3, 2, 1, 0] && r.exit.is_ok() && r.stats.dynamic_checks == 0,
        format!("active {counts:?} at q=0/4/8/16, {} dynamic checks at q=16", r.stats.dynamic_checks),
    );
}

#[test]
fn criterion_3_cost_compare_counts() {
    let p = parse(source("cost_compare.pir").unwrap()).unwrap();
    let counts: Vec<usize> = [0, 8, 24]
        .iter()
        .map(|&q| instrument(&p, Mode::prism(q), OptConfig::ALL).active_access_count("cost_compare"))
        .collect();
    report(3, "cost_compare golden counts", counts == [6, 2, 0], format!("active {counts:?} at q=0/8/24"));
}

#[test]
fn criterion_4_bug_corpus() {
    let m = Manifest::bundled();
    let exit = |name: &str, mode: Mode| {
        let c = m.case(name).unwrap();
        run(&instrument(&c.program().unwrap(), mode, OptConfig::ALL), &c.inputs, &VmConfig::default()).exit
    };
    let reason = |e: &Exit| e.violation().map(|v| v.reason);
    let mut problems = Vec::new();
    let mut expect = |what: String, ok: bool| {
        if !ok {
            problems.push(what);
        }
    };
    for q in [0, 8, 16, 32] {
        expect(
            format!("partial_struct q={q}"),
            reason(&exit("partial_struct", Mode::prism(q))) == Some(AbortReason::UpperBound),
        );
    }
    expect("partial_struct q=48".into(), exit("partial_struct", Mode::prism(48)).is_ok());
    for q in Mode::STANDARD_Q {
        expect(
            format!("negative_index q={q}"),
            reason(&exit("negative_index", Mode::prism(q))) == Some(AbortReason::LowerBound),
        );
    }
    expect("negative_length".into(), reason(&exit("negative_length", Mode::prism(0))).is_some());
    expect("recv_negative".into(), reason(&exit("recv_negative", Mode::prism(0))).is_some());
    expect(
        "end_address_escape".into(),
        reason(&exit("end_address_escape", Mode::prism(0))) == Some(AbortReason::EscapeInvariant),
    );
    expect("one_past_ea q=0".into(), reason(&exit("one_past_ea", Mode::prism(0))).is_some());
    for ok_case in ["negative_index_in_range", "negative_length_ok", "recv_ok", "end_address_ok"] {
        expect(format!("{ok_case} passes"), exit(ok_case, Mode::prism(0)).is_ok());
    }
    report(4, "bug corpus", problems.is_empty(), format!("unexpected outcomes: {problems:?}"));
}

/// One mixed campaign per scheme and q, with dual runs, shared by the
/// fuzz and optimization-soundness criteria.
fn campaigns() -> &'static [FuzzSummary] {
    static RUNS: OnceLock<Vec<FuzzSummary>> = OnceLock::new();
    RUNS.get_or_init(|| {
        Scheme::ALL
            .iter()
            .flat_map(|&s| FUZZ_Q.iter().map(move |&q| Mode::new(s, q)))
            .map(|mode| {
                let mut cfg = FuzzConfig::new(FUZZ_SEED, FUZZ_PROGRAMS, mode);
                cfg.dual = true;
                fuzz(&cfg)
            })
            .collect()
    })
}

#[test]
fn criterion_5_differential_fuzz() {
    let runs = campaigns();
    let lines: Vec<String> = runs
        .iter()
        .map(|s| {
            format!(
                "{}/q={}: {} aborts, {} disallowed",
                s.mode,
                s.q,
                s.scheme_violations,
                s.disallowed.values().sum::<u64>()
            )
        })
        .collect();
    let ok = runs.iter().all(|s| s.disallowed.is_empty() && s.count == FUZZ_PROGRAMS && s.scheme_violations > 0);
    report(5, "differential fuzz", ok, lines.join("; "));
}

/// Records every SA fetch next to the addresses that caused it.
#[derive(Default)]
struct Fetches {
    total: u64,
    below_ksa: u64,
}

impl Observer for Fetches {
    fn on_check(&mut self, ev: &CheckEvent, heap: &Heap) {
        if ev.outcome.is_some_and(|o| o.sa_fetched) {
            self.total += 1;
            let k = ev.ksa.value() & heap.mode().scheme.addr_mask();
            let lo = ev.checked.map_or(ev.ptr, |(lo, _)| lo);
            if lo < k {
                self.below_ksa += 1;
            }
        }
    }
}

#[test]
fn criterion_6_sa_fetch_rarity() {
    let m = Manifest::bundled();
    let mut forward_fetches = 0;
    let mut forward_runs = 0;
    for c in m.cases.iter().filter(|c| c.traversal == Some(Traversal::Forward)) {
        let p = c.program().unwrap();
        for mode in c.matrix() {
            let r = run(&instrument(&p, mode, OptConfig::ALL), &c.inputs, &VmConfig::default());
            forward_fetches += r.stats.sa_fetches;
            forward_runs += 1;
        }
    }
    let back = m.cases.iter().find(|c| c.traversal == Some(Traversal::Backward)).unwrap();
    let inst = instrument(&back.program().unwrap(), Mode::prism(0), OptConfig::ALL);
    let mut obs = Fetches::default();
    let r = run_observed(&inst, &back.inputs, &VmConfig::default(), &mut obs);
    let ok = forward_runs > 0
        && forward_fetches == 0
        && r.exit.is_ok()
        && obs.total > 0
        && obs.total == r.stats.sa_fetches
        && obs.below_ksa == obs.total;
    report(
        6,
        "SA-fetch rarity",
        ok,
        format!(
            "{forward_fetches} fetches over {forward_runs} forward runs; backward: {} fetches, {} with ptr < ksa",
            obs.total, obs.below_ksa
        ),
    );
}

/// Largest byte touched by a q-elided constant-offset access, as an offset
/// past the end of its aligned block.
#[derive(Default)]
struct ElidedReach {
    accesses: u64,
    over: Vec<String>,
    worst_past_block: i64,
}

impl Observer for ElidedReach {
    fn on_check(&mut self, ev: &CheckEvent, heap: &Heap) {
        if ev.kind != EventKind::Access || ev.status != Some(SiteStatus::ElidedByQ) {
            return;
        }
        let k = ev.ksa.value() & heap.mode().scheme.addr_mask();
        let Some(rec) = owner(heap, k) else { return };
        let Some(a) = rec.aligned_size else { return };
        self.accesses += 1;
        let last = ev.ptr + ev.size - 1;
        let bound = rec.sa + a + rec.q - 2;
        self.worst_past_block = self.worst_past_block.max(last as i64 - (rec.sa + a) as i64);
        if last > bound || last >= rec.reserved.1 {
            self.over.push(format!("last byte {last:#x} > {bound:#x}"));
        }
    }
}

/// An escaped pointer to the last byte of a 31-byte object (A = 32) read
/// through a constant offset that q elides.
const POW2_EDGE: &str = "fn @peek(%p: ptr) -> int {\n^entry:\n  %f = gep %p, 4\n  %v = load 4, %f\n  ret %v\n}\n\nfn @main() -> int {\n^entry:\n  %a = alloc 31\n  %e = gep %a, 31\n  %v = call @peek(%e)\n  ret %v\n}\n";

#[test]
fn criterion_7_pow2_relaxation_bound() {
    // Exhaustive predicate sweep around every object size with A = 32.
    let mut heap = Heap::new(Mode::pow2(0));
    let mut mismatches = Vec::new();
    let mut points = 0u64;
    for size in POW2_A / 2..POW2_A {
        let t = heap.alloc(size).unwrap();
        let sa = t.value() & Scheme::Pow2.addr_mask();
        assert_eq!(pow2_aligned_size(t), POW2_A);
        for ptr in sa - 2 * POW2_A..sa + 3 * POW2_A {
            for width in 1..=4 {
                points += 1;
                let expected = ptr >= sa && ptr + width < sa + POW2_A;
                if bounds_check_2k(t, ptr, width).passed() != expected {
                    mismatches.push(format!("size {size} ptr=sa{:+} width {width}", ptr as i64 - sa as i64));
                }
            }
        }
        heap.free(t).unwrap();
    }

    // Elided accesses at q=8: the crafted edge case and the fuzz corpus.
    let mode = Mode::pow2(POW2_Q);
    let mut reach = ElidedReach::default();
    let edge = instrument(&parse(POW2_EDGE).unwrap(), mode, OptConfig::ALL);
    let edge_exit = run_observed(&edge, &[], &VmConfig::default(), &mut reach).exit;
    let edge_reach = reach.worst_past_block;
    let gen = GenConfig { mode: GenMode::InBounds, ..GenConfig::default() };
    for i in 0..2000 {
        let p = parse(&generate(FUZZ_SEED, i, &gen)).unwrap();
        run_observed(&instrument(&p, mode, OptConfig::ALL), &[], &VmConfig::default(), &mut reach);
    }
    let ok = mismatches.is_empty()
        && edge_exit.is_ok()
        && edge_reach == POW2_Q as i64 - 2
        && reach.over.is_empty()
        && reach.accesses > 0;
    report(
        7,
        "Pow2 relaxation bound",
        ok,
        format!(
            "{points} sweep points, {} mismatches {:?}; {} elided accesses, furthest byte SA+A{:+}, {} over the bound",
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>(),
            reach.accesses,
            reach.worst_past_block,
            reach.over.len()
        ),
    );
}

#[test]
fn criterion_8_monotonicity() {
    let mut broken = Vec::new();
    let mut series = 0;
    for c in Manifest::bundled().cases {
        let p = c.program().unwrap();
        for scheme in Scheme::ALL {
            let counts: Vec<usize> = Mode::STANDARD_Q
                .iter()
                .map(|&q| instrument(&p, Mode::new(scheme, q), OptConfig::ALL).active_count())
                .collect();
            series += 1;
            if counts.windows(2).any(|w| w[1] > w[0]) {
                broken.push(format!("{} {scheme} {counts:?}", c.name));
            }
        }
    }
    report(
        8,
        "monotonicity",
        broken.is_empty(),
        format!("{series} series over q={:?}, broken: {broken:?}", Mode::STANDARD_Q),
    );
}

#[test]
fn criterion_9_optimization_soundness() {
    let runs = campaigns();
    let checked: u64 = runs.iter().map(|s| s.dual_checked).sum();
    let inconsistent: u64 = runs.iter().map(|s| s.dual_inconsistent).sum();
    let ok = checked == FUZZ_PROGRAMS * runs.len() as u64 && inconsistent == 0;
    report(9, "optimization soundness", ok, format!("{checked} dual runs, {inconsistent} inconsistent"));
}
