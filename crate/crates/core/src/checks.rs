//! Bounds-check predicates.
//!
//! Every predicate takes the KSA (tagged) and the checked pointer with its
//! tag already removed. `end = ptr + size` is exclusive: an access ending
//! exactly at EA passes, one byte further aborts. The end is computed with
//! saturation, which can only turn a pass into an abort.

use crate::memory::{SimFault, SimMemory};
use crate::tagging::{compute_ea, decode_ea32, pow2_aligned_size, Mode, Scheme, TaggedAddress, ADDR_MASK_32};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    UpperBound,
    LowerBound,
    EscapeInvariant,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbortReason::UpperBound => "upper bound",
            AbortReason::LowerBound => "lower bound",
            AbortReason::EscapeInvariant => "escape invariant",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub abort: Option<AbortReason>,
    /// The SA was read from memory; only happens when `ptr < ksa`.
    pub sa_fetched: bool,
    /// Pow2 only: the second XOR for the lower bound ran.
    pub xor_lower: bool,
}

impl CheckOutcome {
    pub const PASS: CheckOutcome = CheckOutcome { abort: None, sa_fetched: false, xor_lower: false };

    fn abort(reason: AbortReason) -> Self {
        CheckOutcome { abort: Some(reason), ..Self::PASS }
    }

    pub fn passed(&self) -> bool {
        self.abort.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckStats {
    pub dynamic_checks: u64,
    pub sa_fetches: u64,
    pub xor_lower_paths: u64,
    pub aborts: u64,
    /// Escape checks skipped because the pointer equalled its KSA.
    pub guarded_skips: u64,
}

impl CheckStats {
    pub fn record(&mut self, o: &CheckOutcome) {
        self.dynamic_checks += 1;
        self.sa_fetches += o.sa_fetched as u64;
        self.xor_lower_paths += o.xor_lower as u64;
        self.aborts += o.abort.is_some() as u64;
    }
}

/// Deliberate predicate bugs, used to show the differential harness notices
/// a broken checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Accept accesses ending one byte past the bound.
    UpperOffByOne,
    /// Never check the lower bound.
    SkipLower,
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mutation::UpperOffByOne => "upper-off-by-one",
            Mutation::SkipLower => "skip-lower",
        })
    }
}

impl std::str::FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "upper-off-by-one" => Ok(Mutation::UpperOffByOne),
            "skip-lower" => Ok(Mutation::SkipLower),
            _ => Err(format!("unknown mutation '{s}' (expected upper-off-by-one or skip-lower)")),
        }
    }
}

fn end_of(ptr: u64, size: u64) -> u64 {
    ptr.saturating_add(size)
}

/// Prism predicate. The SA is fetched from `EA + q` only when `ptr < ksa`.
pub fn bounds_check(
    ksa: TaggedAddress,
    ptr: u64,
    size: u64,
    q: u64,
    mem: &SimMemory,
) -> Result<CheckOutcome, SimFault> {
    prism_like(ksa.raw(), compute_ea(ksa), ptr, size, q, mem, None, true)
}

/// Prism32 predicate: EA comes straight from the upper 32 bits.
pub fn bounds_check32(
    ksa: TaggedAddress,
    ptr: u64,
    size: u64,
    q: u64,
    mem: &SimMemory,
) -> Result<CheckOutcome, SimFault> {
    prism_like(ksa.value() & ADDR_MASK_32, decode_ea32(ksa), ptr, size, q, mem, None, true)
}

/// Pow2 predicate: both bounds by XOR against the aligned size. The second
/// XOR runs only when `ptr < ksa`.
pub fn bounds_check_2k(ksa: TaggedAddress, ptr: u64, size: u64) -> CheckOutcome {
    pow2(ksa, ptr, size, None, true)
}

#[allow(clippy::too_many_arguments)]
fn prism_like(
    k: u64,
    ea: u64,
    ptr: u64,
    size: u64,
    q: u64,
    mem: &SimMemory,
    mutation: Option<Mutation>,
    lower: bool,
) -> Result<CheckOutcome, SimFault> {
    let limit = if mutation == Some(Mutation::UpperOffByOne) { ea.saturating_add(1) } else { ea };
    // A KSA beyond its decoded EA carries no usable metadata.
    if end_of(ptr, size) > limit || k > ea {
        return Ok(CheckOutcome::abort(AbortReason::UpperBound));
    }
    if lower && ptr < k && mutation != Some(Mutation::SkipLower) {
        let sa = mem.read_u64(ea.saturating_add(q))?;
        let abort = (ptr < sa).then_some(AbortReason::LowerBound);
        return Ok(CheckOutcome { abort, sa_fetched: true, xor_lower: false });
    }
    Ok(CheckOutcome::PASS)
}

fn pow2(ksa: TaggedAddress, ptr: u64, size: u64, mutation: Option<Mutation>, lower: bool) -> CheckOutcome {
    let a = pow2_aligned_size(ksa);
    let k = ksa.raw();
    let end = end_of(ptr, size);
    let upper_fails = if mutation == Some(Mutation::UpperOffByOne) { (k ^ end) > a } else { (k ^ end) >= a };
    if upper_fails {
        return CheckOutcome::abort(AbortReason::UpperBound);
    }
    if lower && ptr < k && mutation != Some(Mutation::SkipLower) {
        let abort = ((k ^ ptr) >= a).then_some(AbortReason::LowerBound);
        return CheckOutcome { abort, sa_fetched: false, xor_lower: true };
    }
    CheckOutcome::PASS
}

/// How a site's predicate is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckForm {
    /// Both bounds, metadata from the tag.
    Full,
    /// Upper bound only; the lower bound is statically implied.
    UpperOnly,
    /// Untagged object of statically known size whose KSA is its SA.
    Static { size: u64 },
}

/// Mode-dispatching checker with counters.
#[derive(Debug, Clone)]
pub struct Checker {
    pub mode: Mode,
    pub mutation: Option<Mutation>,
    pub stats: CheckStats,
}

impl Checker {
    pub fn new(mode: Mode) -> Self {
        Checker { mode, mutation: None, stats: CheckStats::default() }
    }

    pub fn strip(&self, p: TaggedAddress) -> u64 {
        p.value() & self.mode.scheme.addr_mask()
    }

    /// Evaluates one predicate without touching the counters.
    pub fn evaluate(
        &self,
        ksa: TaggedAddress,
        ptr: u64,
        size: u64,
        form: CheckForm,
        mem: &SimMemory,
    ) -> Result<CheckOutcome, SimFault> {
        let m = self.mutation;
        let lower = form != CheckForm::UpperOnly;
        match (form, self.mode.scheme) {
            (CheckForm::Static { size: obj }, _) => {
                let k = self.strip(ksa);
                let limit = k.saturating_add(obj);
                let limit = if m == Some(Mutation::UpperOffByOne) { limit.saturating_add(1) } else { limit };
                if end_of(ptr, size) > limit {
                    Ok(CheckOutcome::abort(AbortReason::UpperBound))
                } else if ptr < k && m != Some(Mutation::SkipLower) {
                    Ok(CheckOutcome::abort(AbortReason::LowerBound))
                } else {
                    Ok(CheckOutcome::PASS)
                }
            }
            (_, Scheme::Prism) => prism_like(ksa.raw(), compute_ea(ksa), ptr, size, self.mode.q, mem, m, lower),
            (_, Scheme::Prism32) => {
                prism_like(ksa.value() & ADDR_MASK_32, decode_ea32(ksa), ptr, size, self.mode.q, mem, m, lower)
            }
            (_, Scheme::Pow2) => Ok(pow2(ksa, ptr, size, m, lower)),
        }
    }

    /// Access check; counts it.
    pub fn access(
        &mut self,
        ksa: TaggedAddress,
        ptr: TaggedAddress,
        size: u64,
        form: CheckForm,
        mem: &SimMemory,
    ) -> Result<CheckOutcome, SimFault> {
        let o = self.evaluate(ksa, self.strip(ptr), size, form, mem)?;
        self.stats.record(&o);
        Ok(o)
    }

    /// Escape check. `guarded` sites skip the check when `p` equals its KSA.
    pub fn escape(
        &mut self,
        p: TaggedAddress,
        ksa: TaggedAddress,
        guarded: bool,
        form: CheckForm,
        mem: &SimMemory,
    ) -> Result<Option<CheckOutcome>, SimFault> {
        if guarded && self.strip(p) == self.strip(ksa) {
            self.stats.guarded_skips += 1;
            return Ok(None);
        }
        let mut o = self.evaluate(ksa, self.strip(p), 0, form, mem)?;
        if o.abort.is_some() {
            o.abort = Some(AbortReason::EscapeInvariant);
        }
        self.stats.record(&o);
        Ok(Some(o))
    }

    /// Range check `[lo, hi)` over untagged addresses, for hoisted loop
    /// checks and widened sites; also aborts when the limit is below the
    /// pointer.
    pub fn range(
        &mut self,
        ksa: TaggedAddress,
        lo: u64,
        hi: u64,
        form: CheckForm,
        mem: &SimMemory,
    ) -> Result<CheckOutcome, SimFault> {
        let o = if hi < lo {
            CheckOutcome::abort(AbortReason::UpperBound)
        } else {
            self.evaluate(ksa, lo, hi - lo, form, mem)?
        };
        self.stats.record(&o);
        Ok(o)
    }
}

/// Plain escape predicate over explicit flags.
pub fn escape_check(
    p: TaggedAddress,
    ksa: TaggedAddress,
    statically_aliased: bool,
    maybe_equal_at_runtime: bool,
    mode: Mode,
    mem: &SimMemory,
) -> Result<CheckOutcome, SimFault> {
    if statically_aliased {
        return Ok(CheckOutcome::PASS);
    }
    let mut c = Checker::new(mode);
    Ok(c.escape(p, ksa, maybe_equal_at_runtime, CheckForm::Full, mem)?.unwrap_or(CheckOutcome::PASS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::Heap;
    use crate::tagging::{encode_ea32, encode_pow2, encode_prism, FrameClass};

    const SA: u64 = 0x1_0001_0000;
    const EA: u64 = 0x1_0001_0100;

    fn object(q: u64) -> (TaggedAddress, SimMemory) {
        let mut m = SimMemory::new();
        m.map(SA & !0xFFFF, 1 << 16).unwrap();
        m.write_u64(EA + q, SA).unwrap();
        (encode_prism(SA, EA, FrameClass::Small).unwrap(), m)
    }

    #[test]
    fn prism_examples() {
        let (t, m) = object(0);
        assert_eq!(bounds_check(t, SA + 0xF8, 16, 0, &m).unwrap().abort, Some(AbortReason::UpperBound));
        assert!(bounds_check(t, EA, 0, 0, &m).unwrap().passed());

        let k16 = TaggedAddress(t.value() + 16);
        let o = bounds_check(k16, SA + 8, 8, 0, &m).unwrap();
        assert!(o.passed() && o.sa_fetched);

        let o = bounds_check(t, SA - 8, 8, 0, &m).unwrap();
        assert_eq!(o.abort, Some(AbortReason::LowerBound));
        assert!(o.sa_fetched);
    }

    #[test]
    fn access_end_is_exclusive() {
        let (t, m) = object(0);
        assert!(bounds_check(t, EA - 1, 1, 0, &m).unwrap().passed());
        assert!(!bounds_check(t, EA, 1, 0, &m).unwrap().passed());
    }

    #[test]
    fn q_only_moves_the_sa_slot() {
        for q in Mode::STANDARD_Q {
            let (t, m) = object(q);
            for ptr in [SA - 16, SA - 1, SA, SA + 1, EA - 8, EA - 1, EA, EA + 1] {
                for size in [0, 1, 8] {
                    let k = TaggedAddress(t.value() + 8);
                    let reference = ptr >= SA && ptr + size <= EA;
                    assert_eq!(bounds_check(k, ptr, size, q, &m).unwrap().passed(), reference, "q={q} ptr={ptr:#x}");
                }
            }
        }
    }

    #[test]
    fn pow2_examples() {
        let sa = 0x4_0000_0010u64;
        let t = encode_pow2(sa, 4).unwrap();
        assert!(bounds_check_2k(t, sa + 14, 1).passed());
        assert!(!bounds_check_2k(t, sa + 15, 1).passed());
        assert!(bounds_check_2k(t, sa, 0).passed());
        let o = bounds_check_2k(TaggedAddress(t.value() + 4), sa + 2, 1);
        assert!(o.passed() && o.xor_lower && !o.sa_fetched);
        assert_eq!(bounds_check_2k(t, sa - 1, 1).abort, Some(AbortReason::LowerBound));
        assert_eq!(bounds_check_2k(t, sa - 2, 4).abort, Some(AbortReason::LowerBound));
        assert_eq!(bounds_check_2k(TaggedAddress(t.value() + 4), sa - 1, 0).abort, Some(AbortReason::UpperBound));
    }

    #[test]
    fn prism32_examples() {
        let mut h = Heap::new(Mode::prism32(0));
        let t = h.alloc(256).unwrap();
        let sa = t.value() & ADDR_MASK_32;
        let m = h.memory();
        assert_eq!(bounds_check32(t, sa + 250, 8, 0, m).unwrap().abort, Some(AbortReason::UpperBound));
        assert!(bounds_check32(t, sa, 256, 0, m).unwrap().passed());
        assert_eq!(bounds_check32(t, sa - 1, 1, 0, m).unwrap().abort, Some(AbortReason::LowerBound));
        assert_eq!(t, encode_ea32(sa, sa + 256).unwrap());
    }

    #[test]
    fn escape_examples() {
        let (t, m) = object(0);
        let mode = Mode::prism(0);
        assert!(escape_check(TaggedAddress(t.value() + 0x100), t, false, false, mode, &m).unwrap().passed());
        assert_eq!(
            escape_check(TaggedAddress(t.value() + 0x101), t, false, false, mode, &m).unwrap().abort,
            Some(AbortReason::EscapeInvariant)
        );
        let mut c = Checker::new(mode);
        assert_eq!(c.escape(t, t, true, CheckForm::Full, &m).unwrap(), None);
        assert_eq!(c.stats.dynamic_checks, 0);
        assert_eq!(c.stats.guarded_skips, 1);
    }

    #[test]
    fn static_form_is_exact_without_fetch() {
        let m = SimMemory::new();
        let c = Checker::new(Mode::prism(0));
        let k = TaggedAddress(0x1000_0000);
        let form = CheckForm::Static { size: 16 };
        assert!(c.evaluate(k, 0x1000_0008, 8, form, &m).unwrap().passed());
        assert!(!c.evaluate(k, 0x1000_0009, 8, form, &m).unwrap().passed());
        let o = c.evaluate(k, 0x0FFF_FFFF, 1, form, &m).unwrap();
        assert_eq!(o.abort, Some(AbortReason::LowerBound));
        assert!(!o.sa_fetched);
    }

    #[test]
    fn mutations_change_outcomes() {
        let (t, m) = object(0);
        let mut c = Checker::new(Mode::prism(0));
        c.mutation = Some(Mutation::UpperOffByOne);
        assert!(c.evaluate(t, EA, 1, CheckForm::Full, &m).unwrap().passed());
        c.mutation = Some(Mutation::SkipLower);
        assert!(c.evaluate(TaggedAddress(t.value() + 8), SA - 8, 8, CheckForm::Full, &m).unwrap().passed());
    }

    #[test]
    fn range_check_rejects_inverted_limits() {
        let (t, m) = object(0);
        let mut c = Checker::new(Mode::prism(0));
        assert!(c.range(t, SA, EA, CheckForm::Full, &m).unwrap().passed());
        assert!(!c.range(t, SA + 8, SA, CheckForm::Full, &m).unwrap().passed());
        assert!(!c.range(t, SA, EA + 1, CheckForm::Full, &m).unwrap().passed());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// No false positives and exact upper bound for heap objects in
            /// every exact scheme.
            #[test]
            fn exact_schemes_agree_with_interval_oracle(
                scheme in prop_oneof![Just(Scheme::Prism), Just(Scheme::Prism32)],
                q in prop_oneof![Just(0u64), Just(8), Just(48)],
                size in prop_oneof![1u64..300, 65_400u64..65_600, 100_000u64..140_000],
                ksa_off in any::<prop::sample::Index>(),
                ptr_delta in -64i64..64,
                at_end in any::<bool>(),
                access in 0u64..16,
            ) {
                let mut h = Heap::new(Mode::new(scheme, q));
                let t = h.alloc(size).unwrap();
                let sa = t.value() & scheme.addr_mask();
                let ea = sa + size;
                let k = ksa_off.index(size as usize + 1) as u64;
                let ksa = t.with_addr(sa + k, scheme);
                let anchor = if at_end { ea } else { sa };
                let ptr = anchor.wrapping_add_signed(ptr_delta);
                let c = Checker::new(h.mode());
                let o = c.evaluate(ksa, ptr, access, CheckForm::Full, h.memory()).unwrap();
                let inside = ptr >= sa && ptr + access <= ea;
                prop_assert_eq!(o.passed(), inside);
                prop_assert!(!o.sa_fetched || ptr < sa + k);
                prop_assert_eq!(o.sa_fetched, ptr < sa + k && ptr + access <= ea);
            }

            #[test]
            fn pow2_relaxation_is_exactly_the_aligned_block(
                size in 1u64..5000,
                k_frac in 0.0f64..1.0,
                ptr_delta in -64i64..64,
                access in 0u64..16,
            ) {
                let mut h = Heap::new(Mode::pow2(0));
                let t = h.alloc(size).unwrap();
                let sa = t.raw();
                let a = pow2_aligned_size(t);
                let k = ((size as f64) * k_frac) as u64;
                let ksa = t.with_addr(sa + k, Scheme::Pow2);
                let ptr = (sa + k).wrapping_add_signed(ptr_delta);
                let o = bounds_check_2k(ksa, ptr, access);
                let inside = ptr >= sa && ptr + access < sa + a;
                prop_assert_eq!(o.passed(), inside);
            }
        }
    }
}
