use prism_core::checks::Mutation;
use prism_core::instrument::OptConfig;
use prism_core::ir::parse;
use prism_core::oracle::{differential_run, dual_run, fuzz, DivergenceKind, FuzzConfig, GenMode};
use prism_core::tagging::{Mode, Scheme};
use prism_core::vm::Exit;

const PADDED_FIELD: &str = "fn @get(%s: ptr) -> int {\n^entry:\n  %f = gep %s, 4\n  %v = load 4, %f\n  ret %v\n}\n\nfn @main() -> int {\n^entry:\n  %s = alloc 6\n  %v = call @get(%s)\n  ret %v\n}\n";

const VAR_OOB: &str =
    "fn @main(%i: int) -> int {\n^entry:\n  %a = alloc 40\n  %p = gep %a, %i*4\n  %v = load 4, %p\n  ret %v\n}\n";

#[test]
fn in_bounds_program_agrees() {
    let v = differential_run(&parse(VAR_OOB).unwrap(), &[9], Mode::prism(0), OptConfig::ALL);
    assert!(v.agreement && v.divergences.is_empty(), "{v:?}");
    assert!(v.prism.is_ok());
}

#[test]
fn padding_access_elided_by_q_is_an_allowed_divergence() {
    let p = parse(PADDED_FIELD).unwrap();
    let v = differential_run(&p, &[], Mode::prism(8), OptConfig::ALL);
    assert!(v.is_clean(), "{v:?}");
    assert!(!v.agreement);
    assert!(matches!(v.oracle, Exit::Violation(_)));
    assert_eq!(v.divergences.len(), 1);
    assert_eq!(v.divergences[0].kind, DivergenceKind::PaddingElided);
    // At q=0 the same access is checked and both abort.
    let v0 = differential_run(&p, &[], Mode::prism(0), OptConfig::ALL);
    assert!(v0.agreement && v0.is_clean());
}

#[test]
fn variable_oob_aborts_in_both_at_every_q() {
    let p = parse(VAR_OOB).unwrap();
    for q in Mode::STANDARD_Q {
        for i in [-1, 10] {
            let v = differential_run(&p, &[i], Mode::prism(q), OptConfig::ALL);
            assert!(v.agreement && v.is_clean(), "q={q} i={i}: {v:?}");
            assert!(matches!(v.prism, Exit::Violation(_)));
        }
    }
}

#[test]
fn pow2_pass_inside_the_aligned_block_is_allowed() {
    // 40 bytes round up to A = 64.
    let v = differential_run(&parse(VAR_OOB).unwrap(), &[12], Mode::pow2(0), OptConfig::ALL);
    assert!(v.is_clean(), "{v:?}");
    assert!(v.prism.is_ok());
    assert_eq!(v.divergences[0].kind, DivergenceKind::Pow2Relaxation);
    // 60 + 4 reaches the last byte of the block and is rejected.
    let v = differential_run(&parse(VAR_OOB).unwrap(), &[15], Mode::pow2(0), OptConfig::ALL);
    assert!(matches!(v.prism, Exit::Violation(_)));
}

#[test]
fn widened_check_aborts_early_and_consistently() {
    let src = "fn @main(%i: int) -> int {\n^entry:\n  %a = alloc 64\n  %p = gep %a, %i*8\n  %v = load 8, %p\n  %q = gep %a, 8 + %i*8\n  %w = load 8, %q\n  ret %v\n}\n";
    let p = parse(src).unwrap();
    let v = differential_run(&p, &[7], Mode::prism(0), OptConfig::ALL);
    assert!(v.is_clean(), "{v:?}");
    assert_eq!(v.divergences[0].kind, DivergenceKind::EarlyAbort);
    let d = dual_run(&p, &[7], Mode::prism(0));
    assert!(d.consistent, "{d:?}");
    assert!(d.optimized_accesses < d.plain_accesses);
}

fn campaign(scheme: Scheme, q: u64, gen: GenMode, count: u64) -> prism_core::oracle::FuzzSummary {
    let mut cfg = FuzzConfig::new(1, count, Mode::new(scheme, q));
    cfg.gen.mode = gen;
    fuzz(&cfg)
}

#[test]
fn seed_one_has_no_disallowed_divergence() {
    let s = campaign(Scheme::Prism, 0, GenMode::Mixed, 1000);
    assert!(s.passed(), "{:?}", s.failures.first());
    assert!(s.scheme_violations > 0);
}

#[test]
fn in_bounds_programs_never_abort() {
    for scheme in Scheme::ALL {
        let s = campaign(scheme, 8, GenMode::InBounds, 300);
        assert!(s.passed());
        assert_eq!(s.scheme_violations, 0);
        assert_eq!(s.oracle_violations, 0);
    }
}

#[test]
fn one_oob_per_program_is_always_caught_at_q0() {
    for scheme in [Scheme::Prism, Scheme::Prism32] {
        let s = campaign(scheme, 0, GenMode::OneOob, 500);
        assert!(s.passed());
        assert_eq!(s.scheme_violations, 500);
    }
}

#[test]
fn injected_predicate_bugs_are_noticed() {
    for m in [Mutation::UpperOffByOne, Mutation::SkipLower] {
        let mut cfg = FuzzConfig::new(1, 500, Mode::prism(0));
        cfg.mutation = Some(m);
        let s = fuzz(&cfg);
        assert!(!s.passed(), "{m}");
        assert!(s.disallowed.contains_key(&DivergenceKind::MissedViolation));
    }
}

#[test]
fn campaign_is_reproducible() {
    let mut cfg = FuzzConfig::new(42, 200, Mode::pow2(8));
    cfg.dual = true;
    let a = serde_json::to_string(&fuzz(&cfg)).unwrap();
    let b = serde_json::to_string(&fuzz(&cfg)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_campaign() {
    let s = campaign(Scheme::Prism, 0, GenMode::Mixed, 0);
    assert!(s.passed());
    assert_eq!(s.scheme_violations, 0);
}
