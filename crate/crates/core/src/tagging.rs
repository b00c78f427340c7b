//! Tag-area encoding for 47-bit user-space addresses.
//!
//! A [`TaggedAddress`] is a 64-bit value whose low 47 bits hold the raw
//! address and whose top 17 bits (the tag area) carry per-object metadata:
//!
//! | scheme   | bit 63      | bits 47..=62            | bits 32..=63 | raw bits |
//! |----------|-------------|-------------------------|--------------|----------|
//! | Prism    | frame class | tag-offset of EA        | -            | 0..=46   |
//! | Pow2     | log2 of the aligned size (17 bits)    | -            | 0..=46   |
//! | Prism32  | -           | -                       | EA           | 0..=31   |
//!
//! Everything here is pure arithmetic; nothing touches memory.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Mask selecting the 47 raw address bits.
pub const ADDR_MASK_47: u64 = 0x7FFF_FFFF_FFFF;
/// Mask selecting the 32 raw address bits used by the 32-bit scheme.
pub const ADDR_MASK_32: u64 = 0xFFFF_FFFF;

pub const TAG_SHIFT: u32 = 47;
pub const CLASS_BIT: u64 = 1 << 63;

pub const SMALL_FRAME_SIZE: u64 = 1 << 16;
pub const LARGE_FRAME_SIZE: u64 = 1 << 32;

const SMALL_FRAME_MASK: u64 = 0x7FFF_FFFF_0000;
const LARGE_FRAME_MASK: u64 = 0x7FFF_0000_0000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("start {sa:#x} is above end {ea:#x}")]
    Inverted { sa: u64, ea: u64 },
    #[error("address {0:#x} does not fit in the raw address bits")]
    OutOfRange(u64),
    #[error("{sa:#x}..{ea:#x} does not lie inside one {class:?} frame")]
    CrossesFrame { sa: u64, ea: u64, class: FrameClass },
    #[error("large-frame end address {0:#x} is not 64KB aligned")]
    UnalignedEnd(u64),
    #[error("start {sa:#x} is not aligned to 2^{log2}")]
    Misaligned { sa: u64, log2: u32 },
    #[error("log2 size {0} exceeds the 46-bit budget")]
    SizeTooLarge(u32),
    #[error("known start {raw:#x} lies above its decoded end {ea:#x}; the pointer carries no valid metadata")]
    NoMetadata { raw: u64, ea: u64 },
}

/// Which bounds scheme a sandbox instance runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Frame-based layout with the EA offset compressed into the tag.
    Prism,
    /// Power-of-two sizes and alignment; the tag holds log2 of the size.
    Pow2,
    /// Addresses below 4GB; the tag area holds the full 32-bit EA.
    Prism32,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Prism, Scheme::Pow2, Scheme::Prism32];

    /// Mask that removes the tag area under this scheme.
    pub fn addr_mask(self) -> u64 {
        match self {
            Scheme::Prism | Scheme::Pow2 => ADDR_MASK_47,
            Scheme::Prism32 => ADDR_MASK_32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Prism => "prism",
            Scheme::Pow2 => "pow2",
            Scheme::Prism32 => "prism32",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prism" => Ok(Scheme::Prism),
            "pow2" => Ok(Scheme::Pow2),
            "prism32" => Ok(Scheme::Prism32),
            other => Err(format!("unknown mode `{other}` (expected prism, pow2 or prism32)")),
        }
    }
}

/// A scheme plus the q-padding byte count. Fixed for the lifetime of a sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mode {
    pub scheme: Scheme,
    pub q: u64,
}

impl Mode {
    /// Padding values exercised by the corpus and golden tests.
    pub const STANDARD_Q: [u64; 7] = [0, 4, 8, 16, 24, 32, 48];

    pub fn new(scheme: Scheme, q: u64) -> Self {
        Mode { scheme, q }
    }

    pub fn prism(q: u64) -> Self {
        Mode::new(Scheme::Prism, q)
    }

    pub fn pow2(q: u64) -> Self {
        Mode::new(Scheme::Pow2, q)
    }

    pub fn prism32(q: u64) -> Self {
        Mode::new(Scheme::Prism32, q)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(q={})", self.scheme, self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameClass {
    /// 64KB frame, 64KB aligned.
    Small,
    /// 4GB frame, 4GB aligned.
    Large,
}

impl FrameClass {
    pub fn frame_size(self) -> u64 {
        match self {
            FrameClass::Small => SMALL_FRAME_SIZE,
            FrameClass::Large => LARGE_FRAME_SIZE,
        }
    }

    pub fn frame_base(self, addr: u64) -> u64 {
        addr & !(self.frame_size() - 1) & ADDR_MASK_47
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaggedAddress(pub u64);

impl TaggedAddress {
    pub const NULL: TaggedAddress = TaggedAddress(0);

    pub fn untagged(addr: u64) -> Self {
        TaggedAddress(addr)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Low 47 bits.
    pub fn raw(self) -> u64 {
        self.0 & ADDR_MASK_47
    }

    /// The 17-bit tag area.
    pub fn tag(self) -> u64 {
        self.0 >> TAG_SHIFT
    }

    pub fn frame_class(self) -> FrameClass {
        if self.0 & CLASS_BIT == 0 {
            FrameClass::Small
        } else {
            FrameClass::Large
        }
    }

    /// 16-bit tag-offset (bits 47..=62).
    pub fn tag_offset(self) -> u64 {
        (self.0 >> TAG_SHIFT) & 0xFFFF
    }

    /// Keeps this value's tag area and replaces the address bits.
    pub fn with_addr(self, addr: u64, scheme: Scheme) -> Self {
        let mask = scheme.addr_mask();
        TaggedAddress((self.0 & !mask) | (addr & mask))
    }
}

impl fmt::Debug for TaggedAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaggedAddress({:#018x})", self.0)
    }
}

impl fmt::Display for TaggedAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl From<u64> for TaggedAddress {
    fn from(v: u64) -> Self {
        TaggedAddress(v)
    }
}

/// Encodes a frame-allocated object's end address into the tag of `sa`.
pub fn encode_prism(sa: u64, ea: u64, class: FrameClass) -> Result<TaggedAddress, EncodingError> {
    if sa > ea {
        return Err(EncodingError::Inverted { sa, ea });
    }
    if ea > ADDR_MASK_47 {
        return Err(EncodingError::OutOfRange(ea));
    }
    match class {
        FrameClass::Small => {
            if sa & SMALL_FRAME_MASK != ea & SMALL_FRAME_MASK {
                return Err(EncodingError::CrossesFrame { sa, ea, class });
            }
            let offset = ea & 0xFFFF;
            Ok(TaggedAddress((offset << TAG_SHIFT) | sa))
        }
        FrameClass::Large => {
            if ea & 0xFFFF != 0 {
                return Err(EncodingError::UnalignedEnd(ea));
            }
            if sa & LARGE_FRAME_MASK != ea & LARGE_FRAME_MASK {
                return Err(EncodingError::CrossesFrame { sa, ea, class });
            }
            let offset = ((ea & 0xFFFF_FFFF) >> 16) & 0xFFFF;
            Ok(TaggedAddress(CLASS_BIT | (offset << TAG_SHIFT) | sa))
        }
    }
}

/// Reconstructs EA from any known start address carrying frame metadata.
/// Total: on a value without metadata it returns whatever the bits decode to.
pub fn compute_ea(ksa: TaggedAddress) -> u64 {
    let v = ksa.0;
    if v & CLASS_BIT == 0 {
        let tag_offset = v >> TAG_SHIFT;
        let frame_start = v & SMALL_FRAME_MASK;
        frame_start + tag_offset
    } else {
        let frame_offset = (v >> 31) & 0xFFFF_0000;
        let frame_start = v & LARGE_FRAME_MASK;
        frame_start + frame_offset
    }
}

/// Like [`compute_ea`], but rejects values whose raw address lies above the
/// decoded end, which is what a placeholder such as `(void*)-1` decodes to.
pub fn checked_compute_ea(ksa: TaggedAddress) -> Result<u64, EncodingError> {
    let ea = compute_ea(ksa);
    if ksa.raw() > ea {
        Err(EncodingError::NoMetadata { raw: ksa.raw(), ea })
    } else {
        Ok(ea)
    }
}

pub fn encode_pow2(sa: u64, log2_size: u32) -> Result<TaggedAddress, EncodingError> {
    if log2_size > 46 {
        return Err(EncodingError::SizeTooLarge(log2_size));
    }
    if sa > ADDR_MASK_47 {
        return Err(EncodingError::OutOfRange(sa));
    }
    if sa & ((1u64 << log2_size) - 1) != 0 {
        return Err(EncodingError::Misaligned { sa, log2: log2_size });
    }
    Ok(TaggedAddress(((log2_size as u64) << TAG_SHIFT) | sa))
}

/// log2 of the aligned size, as stored by [`encode_pow2`].
pub fn pow2_log2(ksa: TaggedAddress) -> u32 {
    (ksa.0 >> TAG_SHIFT) as u32
}

/// The aligned size A recovered from a Pow2 tag. Saturates for tags that
/// do not come from [`encode_pow2`].
pub fn pow2_aligned_size(ksa: TaggedAddress) -> u64 {
    1u64.checked_shl(pow2_log2(ksa)).unwrap_or(u64::MAX)
}

pub fn encode_ea32(sa: u64, ea: u64) -> Result<TaggedAddress, EncodingError> {
    if sa > ea {
        return Err(EncodingError::Inverted { sa, ea });
    }
    if ea > ADDR_MASK_32 {
        return Err(EncodingError::OutOfRange(ea));
    }
    Ok(TaggedAddress((ea << 32) | sa))
}

pub fn decode_ea32(ksa: TaggedAddress) -> u64 {
    ksa.0 >> 32
}

pub fn strip_tag(p: TaggedAddress, scheme: Scheme) -> u64 {
    p.0 & scheme.addr_mask()
}

/// Smallest power of two `>= n` (with `next_pow2(0) == 1`).
pub fn next_pow2(n: u64) -> u64 {
    n.max(1).next_power_of_two()
}
