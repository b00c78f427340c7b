use prism_core::instrument::{instrument, CheckSite, OptConfig, SiteKind, SiteStatus, Window};
use prism_core::ir::{parse, print, validate, Program};
use prism_core::tagging::Mode;

const LINKED_LIST: &str = include_str!("../corpus/linked_list.pir");
const COST_COMPARE: &str = include_str!("../corpus/cost_compare.pir");

fn sites_of<'a>(sites: &'a [CheckSite], f: &'a str) -> Vec<&'a CheckSite> {
    sites.iter().filter(|s| s.function == f).collect()
}

fn active(p: &Program, f: &str, q: u64) -> usize {
    instrument(p, Mode::prism(q), OptConfig::ALL).active_access_count(f)
}

#[test]
fn linked_list_windows() {
    let p = parse(LINKED_LIST).unwrap();
    let inst = instrument(&p, Mode::prism(0), OptConfig::NONE);
    let windows: Vec<Window> = sites_of(&inst.sites, "search_and_update").iter().map(|s| s.window.clone()).collect();
    assert_eq!(
        windows,
        vec![Window::Const { lo: 0, hi: 4 }, Window::Const { lo: 4, hi: 8 }, Window::Const { lo: 8, hi: 16 }]
    );
    assert!(validate(&inst.program).is_empty(), "{:?}", validate(&inst.program));
}

#[test]
fn linked_list_active_counts_fall_with_q() {
    let p = parse(LINKED_LIST).unwrap();
    let counts: Vec<usize> = [0, 4, 8, 16].iter().map(|&q| active(&p, "search_and_update", q)).collect();
    assert_eq!(counts, vec![3, 2, 1, 0]);
}

#[test]
fn cost_compare_active_counts() {
    let p = parse(COST_COMPARE).unwrap();
    assert_eq!(active(&p, "cost_compare", 0), 6);
    assert_eq!(active(&p, "cost_compare", 8), 2);
    assert_eq!(active(&p, "cost_compare", 24), 0);
}

#[test]
fn cost_compare_field_a_is_covered_by_abs_cost_check() {
    let p = parse(COST_COMPARE).unwrap();
    let inst = instrument(&p, Mode::prism(0), OptConfig::ALL);
    let combined: Vec<&str> = sites_of(&inst.sites, "cost_compare")
        .iter()
        .filter(|s| s.status == SiteStatus::ElidedByCombine)
        .map(|s| s.ksa_name.as_str())
        .collect();
    assert_eq!(combined, vec!["p1", "p2"]);
}

#[test]
fn shared_chain_gets_one_mask() {
    let src = "fn @main() -> int {\n^e:\n  %a = alloc 32\n  %x = gep %a, 8\n  %y = gep %a, 16\n  %u = load 8, %x\n  %v = load 8, %y\n  %w = load 8, %a\n  ret %u\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::NONE);
    let text = print(&inst.program);
    assert_eq!(text.matches(" = mask ").count(), 1, "{text}");
    assert!(validate(&inst.program).is_empty());
}

#[test]
fn escape_sites() {
    let src = "fn @f(%p: ptr) -> ptr {\n^e:\n  ret %p\n}\n\nfn @main(%n: int) -> int {\n^e:\n  %a = alloc 32\n  %r = call @f(%a)\n  %b = gep %a, %n\n  %s = call @f(%b)\n  ret 0\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    let esc: Vec<&CheckSite> = inst.sites.iter().filter(|s| s.kind == SiteKind::Escape).collect();
    assert_eq!(esc.len(), 1);
    assert!(matches!(esc[0].window, Window::Var { .. }));
    assert!(!esc[0].guarded);
}

#[test]
fn escaping_merge_is_guarded() {
    let src = "fn @main(%c: int) -> int {\n^e:\n  %a = alloc 32\n  %cell = alloc 8\n  %a8 = gep %a, 8\n  %s = select ptr %c, %a, %a8\n  store ptr, %cell, %s\n  ret 0\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    let esc: Vec<&CheckSite> = inst.sites.iter().filter(|s| s.kind == SiteKind::Escape).collect();
    assert_eq!(esc.len(), 1);
    assert!(esc[0].guarded);
    assert_eq!(esc[0].window, Window::Opaque);
}

#[test]
fn qpad_never_elides_variable_windows() {
    let src = "fn @main(%i: int) -> int {\n^e:\n  %a = alloc 64\n  %p = gep %a, %i*4\n  %v = load 4, %p\n  ret %v\n}\n";
    let p = parse(src).unwrap();
    for q in Mode::STANDARD_Q {
        let inst = instrument(&p, Mode::prism(q), OptConfig::ALL);
        assert_eq!(inst.sites[0].status, SiteStatus::Active);
    }
}

#[test]
fn lower_bound_rule() {
    let src = "fn @main() -> int {\n^e:\n  %a = alloc 64\n  %v = load 8, %a\n  %p = gep %a, 16\n  %w = load 8, %p\n  %m = gep %a, -8\n  %x = load 8, %m\n  ret %v\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig { lower: true, ..OptConfig::NONE });
    let st: Vec<SiteStatus> = inst.sites.iter().map(|s| s.status).collect();
    assert_eq!(st, vec![SiteStatus::LowerBoundDropped, SiteStatus::LowerBoundDropped, SiteStatus::Active]);
}

#[test]
fn combine_widens_co_executing_variable_windows() {
    let src = "fn @main(%i: int) -> int {\n^e:\n  %a = alloc 400\n  %p = gep %a, 40 + %i*4\n  %v = load 4, %p\n  %q = gep %a, -40 + %i*4\n  %w = load 4, %q\n  ret %v\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    assert_eq!(inst.sites[0].status, SiteStatus::Active);
    assert_eq!(inst.sites[0].effective_bounds(), Some((-40, 44)));
    assert_eq!(inst.sites[1].status, SiteStatus::ElidedByCombine);
}

#[test]
fn combine_respects_the_cap() {
    let src = "fn @main() -> int {\n^e:\n  %a = alloc 64\n  %v = load 8, %a\n  %p = gep %a, 8388608\n  %w = load 8, %p\n  ret %v\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    assert!(inst.sites.iter().all(|s| s.status.is_checked()));
}

#[test]
fn counted_loop_is_hoisted() {
    let src = "fn @main() -> int {\n^e:\n  %a = alloc 400\n  br ^h\n^h:\n  %i = phi int [0, ^e], [%i1, ^b]\n  %c = cmp lt %i, 100\n  condbr %c, ^b, ^x\n^b:\n  %p = gep %a, %i*4\n  store 4, %p, %i\n  %i1 = add %i, 1\n  br ^h\n^x:\n  ret 0\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    assert_eq!(inst.sites.len(), 2);
    assert_eq!(inst.sites[0].status, SiteStatus::ElidedByHoist);
    assert_eq!(inst.sites[1].kind, SiteKind::LoopHoisted);
    assert_eq!(inst.sites[1].window, Window::Const { lo: 0, hi: 400 });
    assert!(validate(&inst.program).is_empty(), "{:?}", validate(&inst.program));
}

#[test]
fn guarded_access_in_loop_is_not_hoisted() {
    let src = "fn @main(%n: int) -> int {\n^e:\n  %a = alloc 400\n  br ^h\n^h:\n  %i = phi int [0, ^e], [%i1, ^l]\n  %c = cmp lt %i, 100\n  condbr %c, ^b, ^x\n^b:\n  %g = cmp lt %i, %n\n  condbr %g, ^s, ^l\n^s:\n  %p = gep %a, %i*4\n  store 4, %p, %i\n  br ^l\n^l:\n  %i1 = add %i, 1\n  br ^h\n^x:\n  ret 0\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    assert_eq!(inst.sites.len(), 1);
    assert_eq!(inst.sites[0].status, SiteStatus::Active);
}

#[test]
fn non_constant_trip_count_is_not_hoisted() {
    let src = "fn @main(%n: int) -> int {\n^e:\n  %a = alloc 400\n  br ^h\n^h:\n  %i = phi int [0, ^e], [%i1, ^b]\n  %c = cmp lt %i, %n\n  condbr %c, ^b, ^x\n^b:\n  %p = gep %a, %i*4\n  store 4, %p, %i\n  %i1 = add %i, 1\n  br ^h\n^x:\n  ret 0\n}\n";
    let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
    assert_eq!(inst.sites.len(), 1);
}

#[test]
fn pipeline_is_deterministic() {
    let p = parse(COST_COMPARE).unwrap();
    let a = instrument(&p, Mode::prism(8), OptConfig::ALL);
    let b = instrument(&p, Mode::prism(8), OptConfig::ALL);
    assert_eq!(serde_json::to_string(&a.sites).unwrap(), serde_json::to_string(&b.sites).unwrap());
    assert_eq!(print(&a.program), print(&b.program));
}

#[test]
fn instrumented_text_reparses() {
    for src in [LINKED_LIST, COST_COMPARE] {
        let inst = instrument(&parse(src).unwrap(), Mode::prism(0), OptConfig::ALL);
        let text = print(&inst.program);
        let again = parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert_eq!(print(&again), text);
    }
}
