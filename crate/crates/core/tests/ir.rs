use prism_core::corpus::FILES;
use prism_core::instrument::{instrument, OptConfig};
use prism_core::ir::{parse, parse_unvalidated, print, ParseError};
use prism_core::oracle::{generate, GenConfig, GenMode};
use prism_core::tagging::{Mode, Scheme};
use proptest::prelude::*;

fn roundtrips(src: &str) {
    let p = parse(src).unwrap();
    let text = print(&p);
    let q = parse(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
    assert_eq!(p, q);
    assert_eq!(print(&q), text);
}

#[test]
fn corpus_programs_roundtrip() {
    for (name, src) in FILES {
        let p = parse(src).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse(&print(&p)).unwrap(), p, "{name}");
    }
}

#[test]
fn instrumented_programs_roundtrip() {
    // Check sites and tag instructions must survive printing.
    for (name, src) in FILES {
        let p = parse(src).unwrap();
        for scheme in Scheme::ALL {
            let inst = instrument(&p, Mode::new(scheme, 8), OptConfig::ALL);
            let text = print(&inst.program);
            let back = parse_unvalidated(&text).unwrap_or_else(|e| panic!("{name} {scheme}: {e}"));
            assert_eq!(print(&back), text, "{name} {scheme}");
        }
    }
}

#[test]
fn syntax_errors_carry_a_position() {
    let err = parse("fn @main() -> int {\n^entry:\n  %x = frobnicate 3\n  ret %x\n}\n").unwrap_err();
    match err {
        ParseError::Syntax { line, .. } => assert_eq!(line, 3),
        e => panic!("{e:?}"),
    }
}

#[test]
fn use_before_definition_is_rejected() {
    let err = parse("fn @main() -> int {\n^entry:\n  ret %x\n}\n").unwrap_err();
    assert!(matches!(err, ParseError::Syntax { .. } | ParseError::Invalid(_)), "{err:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generated_programs_roundtrip(seed in any::<u64>(), index in 0u64..1000, mode in 0usize..3) {
        let gen = GenConfig { mode: [GenMode::Mixed, GenMode::InBounds, GenMode::OneOob][mode], ..GenConfig::default() };
        roundtrips(&generate(seed, index, &gen));
    }
}
