//! Simulated allocator.
//!
//! Layout per scheme:
//!
//! * **Prism, small** (`size + q + 8 <= 64KB`): bump allocation inside 64KB
//!   frames. The object is followed by `q` padding bytes and then its SA.
//! * **Prism, large**: 4GB frames cut into fixed slots of `k * 64KB`. The
//!   object is pushed to the end of its slot so that EA lands on the slot
//!   boundary; its SA lives in the header of the following slot at `EA + q`.
//! * **Pow2**: size rounded up to `A >= size + 1`, aligned to `A`; `A` bytes
//!   are reserved (`A + q - 1` with padding). No SA is stored.
//! * **Prism32**: everything lives below 4GB; `size + q + 8` bytes are
//!   reserved and the SA is stored at `EA + q`.
//!
//! Stack and global objects are carved from two fixed static areas using
//! the same per-scheme rules.

use crate::memory::{MapError, SimFault, SimMemory, LOW_GUARD};
use crate::tagging::{
    encode_ea32, encode_pow2, encode_prism, next_pow2, EncodingError, FrameClass, Mode, Scheme, TaggedAddress,
    LARGE_FRAME_SIZE, SMALL_FRAME_SIZE,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Bytes reserved after EA (plus padding) to hold the SA.
pub const SA_SLOT: u64 = 8;
pub const MAX_OBJECT_SIZE: u64 = LARGE_FRAME_SIZE - SMALL_FRAME_SIZE;
/// Largest slot size that still leaves room for the trailing SA in a frame.
const WHOLE_FRAME_SLOT: u64 = LARGE_FRAME_SIZE - SMALL_FRAME_SIZE;

pub const SMALL_POOL: (u64, u64) = (1 << 32, 1 << 33);
pub const LARGE_POOL: (u64, u64) = (1 << 33, 1 << 47);
pub const POW2_POOL: (u64, u64) = (1 << 34, 1 << 46);
pub const LOW32_POOL: (u64, u64) = (1 << 30, 1 << 32);
pub const STACK_AREA: (u64, u64) = (1 << 28, 1 << 29);
pub const GLOBAL_AREA: (u64, u64) = (1 << 29, 1 << 30);

const _: () = assert!(STACK_AREA.0 >= LOW_GUARD);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("allocation size {0} is outside 1..={MAX_OBJECT_SIZE}")]
    SizeOutOfRange(u64),
    #[error("simulated address space exhausted while allocating {0} bytes")]
    Exhausted(u64),
    #[error("{0} area exhausted while allocating {1} bytes")]
    AreaExhausted(&'static str, u64),
    #[error("q-padding of {0} bytes is too large for this layout")]
    PaddingTooLarge(u64),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Fault(#[from] SimFault),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FreeError {
    #[error("{0:#x} is not the start of any allocation")]
    Unknown(u64),
    #[error("{0:#x} was already freed")]
    DoubleFree(u64),
    #[error("{0:#x} is a stack or global object")]
    NotHeap(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Heap,
    Stack,
    Dynamic,
    Global,
}

/// Exact bounds of one allocation, as seen by the oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub sa: u64,
    pub ea: u64,
    pub request_size: u64,
    pub q: u64,
    pub mode: Mode,
    pub live: bool,
    pub kind: ObjectKind,
    pub tagged: TaggedAddress,
    /// Aligned size A in Pow2 mode.
    pub aligned_size: Option<u64>,
    /// Bytes owned by this object, headers and padding included.
    pub reserved: (u64, u64),
}

impl AllocationRecord {
    /// Address where the SA is stored, when the scheme stores one.
    pub fn sa_slot(&self) -> Option<u64> {
        match self.mode.scheme {
            Scheme::Pow2 => None,
            _ => Some(self.ea + self.q),
        }
    }
}

/// First-fit free list over a fixed address range.
#[derive(Debug, Clone)]
struct RegionPool {
    free: BTreeMap<u64, u64>,
}

impl RegionPool {
    fn new((start, end): (u64, u64)) -> Self {
        let mut free = BTreeMap::new();
        free.insert(start, end);
        RegionPool { free }
    }

    fn alloc(&mut self, len: u64, align: u64) -> Option<u64> {
        let mut hit = None;
        for (&start, &end) in &self.free {
            let base = start.checked_next_multiple_of(align)?;
            if base.checked_add(len).is_some_and(|e| e <= end) {
                hit = Some((start, end, base));
                break;
            }
        }
        let (start, end, base) = hit?;
        self.free.remove(&start);
        if start < base {
            self.free.insert(start, base);
        }
        if base + len < end {
            self.free.insert(base + len, end);
        }
        Some(base)
    }

    fn release(&mut self, base: u64, len: u64) {
        let mut start = base;
        let mut end = base + len;
        if let Some((&s, &e)) = self.free.range(..start).next_back() {
            if e == start {
                self.free.remove(&s);
                start = s;
            }
        }
        if let Some(&e) = self.free.get(&end) {
            self.free.remove(&end);
            end = e;
        }
        self.free.insert(start, end);
    }
}

#[derive(Debug, Clone)]
struct SmallFrame {
    cursor: u64,
    live: u32,
}

#[derive(Debug, Clone)]
struct LargeFrame {
    slot_size: u64,
    next_slot: u64,
    live: u32,
}

/// Bump area for stack or global objects.
#[derive(Debug, Clone)]
struct StaticArea {
    name: &'static str,
    end: u64,
    cursor: u64,
}

impl StaticArea {
    fn new(name: &'static str, (start, end): (u64, u64)) -> Self {
        StaticArea { name, end, cursor: start }
    }

    fn place(&mut self, align: u64, lead: u64, len: u64) -> Result<u64, AllocError> {
        let base = self.cursor.next_multiple_of(align.max(1));
        let end = base + lead + len;
        if end > self.end {
            return Err(AllocError::AreaExhausted(self.name, len));
        }
        self.cursor = end;
        Ok(base)
    }
}

/// Where a dynamically sized stack object goes, decided from the first
/// bump pointer it would receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicLayout {
    /// `[ptr, ptr + size]` stays inside one 64KB frame.
    Keep,
    /// The object straddles a frame: promote to `asize` bytes at 64KB
    /// alignment and shift the start by `padding` so EA is 64KB aligned.
    Realign { asize: u64, padding: u64 },
}

pub fn dynamic_alloca_layout(ptr: u64, size: u64) -> DynamicLayout {
    if (ptr ^ (ptr + size)) >= SMALL_FRAME_SIZE {
        let asize = size.next_multiple_of(SMALL_FRAME_SIZE);
        DynamicLayout::Realign { asize, padding: asize - size }
    } else {
        DynamicLayout::Keep
    }
}

/// Opaque stack position returned by [`Heap::stack_mark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackMark(u64);

#[derive(Debug, Clone)]
pub struct Heap {
    mode: Mode,
    mem: SimMemory,
    small_pool: RegionPool,
    large_pool: RegionPool,
    pow2_pool: RegionPool,
    small_frames: BTreeMap<u64, SmallFrame>,
    current_small: Option<u64>,
    large_frames: BTreeMap<u64, LargeFrame>,
    open_large: BTreeMap<u64, u64>,
    live: BTreeMap<u64, AllocationRecord>,
    retired: BTreeMap<u64, AllocationRecord>,
    stack: StaticArea,
    globals: StaticArea,
}

impl Heap {
    pub fn new(mode: Mode) -> Self {
        let mut mem = SimMemory::new();
        mem.map(STACK_AREA.0, STACK_AREA.1 - STACK_AREA.0).expect("stack area");
        mem.map(GLOBAL_AREA.0, GLOBAL_AREA.1 - GLOBAL_AREA.0).expect("global area");
        let large = match mode.scheme {
            Scheme::Prism32 => LOW32_POOL,
            _ => LARGE_POOL,
        };
        Heap {
            mode,
            mem,
            small_pool: RegionPool::new(SMALL_POOL),
            large_pool: RegionPool::new(large),
            pow2_pool: RegionPool::new(POW2_POOL),
            small_frames: BTreeMap::new(),
            current_small: None,
            large_frames: BTreeMap::new(),
            open_large: BTreeMap::new(),
            live: BTreeMap::new(),
            retired: BTreeMap::new(),
            stack: StaticArea::new("stack", STACK_AREA),
            globals: StaticArea::new("global", GLOBAL_AREA),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn memory(&self) -> &SimMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut SimMemory {
        &mut self.mem
    }

    pub fn mem_read(&self, addr: u64, len: u64) -> Result<Vec<u8>, SimFault> {
        self.mem.read(addr, len)
    }

    pub fn mem_write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), SimFault> {
        self.mem.write(addr, bytes)
    }

    /// Whether a request of `size` bytes takes the small-frame path.
    pub fn is_small(&self, size: u64) -> bool {
        size + self.mode.q + SA_SLOT <= SMALL_FRAME_SIZE
    }

    /// Heap allocation; dispatches on the scheme.
    pub fn alloc(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        if size == 0 || size > MAX_OBJECT_SIZE {
            return Err(AllocError::SizeOutOfRange(size));
        }
        match self.mode.scheme {
            Scheme::Prism if self.is_small(size) => self.alloc_small(size),
            Scheme::Prism => self.alloc_large(size),
            Scheme::Pow2 => self.alloc_pow2(size),
            Scheme::Prism32 => self.alloc_32(size),
        }
    }

    fn encode_frame_object(&self, sa: u64, ea: u64, class: FrameClass) -> Result<TaggedAddress, EncodingError> {
        match self.mode.scheme {
            Scheme::Prism32 => encode_ea32(sa, ea),
            _ => encode_prism(sa, ea, class),
        }
    }

    /// Bump allocation from the current 64KB frame.
    pub fn alloc_small(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        let need = size + self.mode.q + SA_SLOT;
        if need > SMALL_FRAME_SIZE {
            return Err(AllocError::SizeOutOfRange(size));
        }
        let fits =
            |frame_base: u64, f: &SmallFrame| f.cursor.next_multiple_of(8) + need <= frame_base + SMALL_FRAME_SIZE;
        let base = match self.current_small {
            Some(b) if fits(b, &self.small_frames[&b]) => b,
            _ => {
                let b =
                    self.frame_pool().alloc(SMALL_FRAME_SIZE, SMALL_FRAME_SIZE).ok_or(AllocError::Exhausted(size))?;
                self.mem.map(b, SMALL_FRAME_SIZE)?;
                self.small_frames.insert(b, SmallFrame { cursor: b, live: 0 });
                // The previous frame is released once its last object dies.
                if let Some(prev) = self.current_small.replace(b) {
                    if self.small_frames[&prev].live == 0 {
                        self.release_small_frame(prev);
                    }
                }
                b
            }
        };
        let frame = self.small_frames.get_mut(&base).expect("small frame");
        let sa = frame.cursor.next_multiple_of(8);
        frame.cursor = sa + need;
        frame.live += 1;
        let ea = sa + size;
        let tagged = self.encode_frame_object(sa, ea, FrameClass::Small)?;
        self.finish(sa, ea, size, tagged, ObjectKind::Heap, None, (sa, ea + self.mode.q + SA_SLOT))
    }

    /// Slot allocation from a 4GB frame.
    pub fn alloc_large(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        if size == 0 || size > MAX_OBJECT_SIZE {
            return Err(AllocError::SizeOutOfRange(size));
        }
        let q = self.mode.q;
        let header = q + SA_SLOT;
        if header > SMALL_FRAME_SIZE {
            return Err(AllocError::PaddingTooLarge(q));
        }
        let mut slot = (size + header).next_multiple_of(SMALL_FRAME_SIZE);
        if slot + header > LARGE_FRAME_SIZE {
            // Only slot 0 fits; it has no predecessor and so needs no header.
            slot = WHOLE_FRAME_SLOT;
        }
        let usable = |f: &LargeFrame| (f.next_slot + 1) * f.slot_size + header <= LARGE_FRAME_SIZE;
        let base = match self.open_large.get(&slot) {
            Some(&b) if usable(&self.large_frames[&b]) => b,
            _ => {
                let b = self.large_pool.alloc(LARGE_FRAME_SIZE, LARGE_FRAME_SIZE).ok_or(AllocError::Exhausted(size))?;
                self.mem.map(b, LARGE_FRAME_SIZE)?;
                self.large_frames.insert(b, LargeFrame { slot_size: slot, next_slot: 0, live: 0 });
                if let Some(prev) = self.open_large.insert(slot, b) {
                    if self.large_frames[&prev].live == 0 {
                        self.release_large_frame(prev);
                    }
                }
                b
            }
        };
        let frame = self.large_frames.get_mut(&base).expect("large frame");
        let y = base + frame.next_slot * slot;
        frame.next_slot += 1;
        frame.live += 1;
        let ea = y + slot;
        let sa = ea - size;
        let tagged = self.encode_frame_object(sa, ea, FrameClass::Large)?;
        self.finish(sa, ea, size, tagged, ObjectKind::Heap, None, (sa, ea + header))
    }

    /// Power-of-two allocation: `A >= size + 1`, aligned to `A`.
    pub fn alloc_pow2(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        if size == 0 || size > MAX_OBJECT_SIZE {
            return Err(AllocError::SizeOutOfRange(size));
        }
        let (a, reserve) = self.pow2_reservation(size);
        let sa = self.pow2_pool.alloc(reserve, a).ok_or(AllocError::Exhausted(size))?;
        self.mem.map(sa, reserve)?;
        let tagged = encode_pow2(sa, a.trailing_zeros())?;
        self.finish(sa, sa + size, size, tagged, ObjectKind::Heap, Some(a), (sa, sa + reserve))
    }

    /// `(A, bytes reserved)` for a Pow2 object of `size` bytes.
    pub fn pow2_reservation(&self, size: u64) -> (u64, u64) {
        let a = next_pow2(size + 1);
        let reserve = if self.mode.q == 0 { a } else { a + self.mode.q - 1 };
        (a, reserve)
    }

    /// 32-bit allocation: `size + q + 8` bytes below 4GB.
    pub fn alloc_32(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        if size == 0 || size > MAX_OBJECT_SIZE {
            return Err(AllocError::SizeOutOfRange(size));
        }
        if self.mode.scheme != Scheme::Prism32 {
            return Err(AllocError::Encoding(EncodingError::OutOfRange(size)));
        }
        if self.is_small(size) {
            return self.alloc_small(size);
        }
        let need = size + self.mode.q + SA_SLOT;
        let span = need.next_multiple_of(SMALL_FRAME_SIZE);
        let sa = self.large_pool.alloc(span, SMALL_FRAME_SIZE).ok_or(AllocError::Exhausted(size))?;
        self.mem.map(sa, span)?;
        let ea = sa + size;
        let tagged = encode_ea32(sa, ea)?;
        self.finish(sa, ea, size, tagged, ObjectKind::Heap, None, (sa, sa + span))
    }

    /// Lays out a fixed-size object whose address escapes, in the stack area.
    pub fn alloc_stack_escaped(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        self.alloc_static(size, ObjectKind::Stack)
    }

    /// Lays out a global variable in the global area.
    pub fn alloc_global(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        self.alloc_static(size, ObjectKind::Global)
    }

    fn alloc_static(&mut self, size: u64, kind: ObjectKind) -> Result<TaggedAddress, AllocError> {
        let q = self.mode.q;
        let area = match kind {
            ObjectKind::Global => &mut self.globals,
            _ => &mut self.stack,
        };
        let (sa, ea, tagged, aligned, reserved_end) = match self.mode.scheme {
            Scheme::Prism => {
                if size + q + SA_SLOT <= SMALL_FRAME_SIZE {
                    // Aligning to z >= size + 1 keeps [SA, EA] inside one frame.
                    let z = next_pow2(size + 1);
                    let sa = area.place(z, 0, size + q + SA_SLOT)?;
                    let ea = sa + size;
                    (sa, ea, encode_prism(sa, ea, FrameClass::Small)?, None, ea + q + SA_SLOT)
                } else {
                    let asize = size.next_multiple_of(SMALL_FRAME_SIZE);
                    let base = area.place(SMALL_FRAME_SIZE, asize, q + SA_SLOT)?;
                    let ea = base + asize;
                    let sa = ea - size;
                    (sa, ea, encode_prism(sa, ea, FrameClass::Large)?, None, ea + q + SA_SLOT)
                }
            }
            Scheme::Pow2 => {
                let a = next_pow2(size + 1);
                let reserve = if q == 0 { a } else { a + q - 1 };
                let sa = area.place(a, 0, reserve)?;
                (sa, sa + size, encode_pow2(sa, a.trailing_zeros())?, Some(a), sa + reserve)
            }
            Scheme::Prism32 => {
                let sa = area.place(8, 0, size + q + SA_SLOT)?;
                let ea = sa + size;
                (sa, ea, encode_ea32(sa, ea)?, None, ea + q + SA_SLOT)
            }
        };
        self.finish(sa, ea, size, tagged, kind, aligned, (sa, reserved_end))
    }

    /// Dynamically sized stack object.
    pub fn alloc_stack_dynamic(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        let q = self.mode.q;
        match self.mode.scheme {
            Scheme::Prism => {
                let ptr = self.stack.cursor.next_multiple_of(8);
                match dynamic_alloca_layout(ptr, size) {
                    DynamicLayout::Keep => {
                        let sa = self.stack.place(8, 0, size + q + SA_SLOT)?;
                        let ea = sa + size;
                        let tagged = encode_prism(sa, ea, FrameClass::Small)?;
                        self.finish(sa, ea, size, tagged, ObjectKind::Dynamic, None, (sa, ea + q + SA_SLOT))
                    }
                    DynamicLayout::Realign { asize, padding } => {
                        let base = self.stack.place(SMALL_FRAME_SIZE, asize, q + SA_SLOT)?;
                        let sa = base + padding;
                        let ea = sa + size;
                        let tagged = encode_prism(sa, ea, FrameClass::Large)?;
                        self.finish(sa, ea, size, tagged, ObjectKind::Dynamic, None, (sa, ea + q + SA_SLOT))
                    }
                }
            }
            _ => {
                let t = self.alloc_static(size, ObjectKind::Dynamic)?;
                Ok(t)
            }
        }
    }

    pub fn stack_mark(&self) -> StackMark {
        StackMark(self.stack.cursor)
    }

    /// Pops every stack object allocated since `mark`.
    pub fn stack_release(&mut self, mark: StackMark) {
        let popped: Vec<u64> = self
            .live
            .range(mark.0..self.stack.cursor.max(mark.0))
            .filter(|(_, r)| matches!(r.kind, ObjectKind::Stack | ObjectKind::Dynamic))
            .map(|(&sa, _)| sa)
            .collect();
        for sa in popped {
            self.retire(sa);
        }
        self.stack.cursor = mark.0;
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        sa: u64,
        ea: u64,
        size: u64,
        tagged: TaggedAddress,
        kind: ObjectKind,
        aligned_size: Option<u64>,
        reserved: (u64, u64),
    ) -> Result<TaggedAddress, AllocError> {
        if self.mode.scheme != Scheme::Pow2 {
            self.mem.write_u64(ea + self.mode.q, sa)?;
        }
        self.retired.remove(&sa);
        self.live.insert(
            sa,
            AllocationRecord {
                sa,
                ea,
                request_size: size,
                q: self.mode.q,
                mode: self.mode,
                live: true,
                kind,
                tagged,
                aligned_size,
                reserved,
            },
        );
        Ok(tagged)
    }

    fn retire(&mut self, sa: u64) -> Option<AllocationRecord> {
        let mut rec = self.live.remove(&sa)?;
        rec.live = false;
        self.retired.insert(sa, rec.clone());
        Some(rec)
    }

    pub fn free(&mut self, p: TaggedAddress) -> Result<(), FreeError> {
        let sa = p.value() & self.mode.scheme.addr_mask();
        match self.live.get(&sa) {
            None if self.retired.contains_key(&sa) => return Err(FreeError::DoubleFree(sa)),
            None => return Err(FreeError::Unknown(sa)),
            Some(r) if r.kind != ObjectKind::Heap => return Err(FreeError::NotHeap(sa)),
            Some(_) => {}
        }
        let rec = self.retire(sa).expect("live record");
        let (res_start, res_end) = rec.reserved;
        match self.mode.scheme {
            Scheme::Pow2 => {
                self.mem.unmap(res_start).expect("pow2 mapping");
                self.pow2_pool.release(res_start, res_end - res_start);
            }
            Scheme::Prism32 if !self.is_small(rec.request_size) => {
                self.mem.unmap(res_start).expect("span mapping");
                self.large_pool.release(res_start, res_end - res_start);
            }
            _ if self.is_small(rec.request_size) => {
                let base = FrameClass::Small.frame_base(sa);
                let frame = self.small_frames.get_mut(&base).expect("small frame");
                frame.live -= 1;
                if frame.live == 0 {
                    if self.current_small == Some(base) {
                        frame.cursor = base;
                    } else {
                        self.release_small_frame(base);
                    }
                }
            }
            _ => {
                let base = FrameClass::Large.frame_base(sa);
                let frame = self.large_frames.get_mut(&base).expect("large frame");
                frame.live -= 1;
                if frame.live == 0 {
                    let slot = frame.slot_size;
                    if self.open_large.get(&slot) == Some(&base) {
                        self.open_large.remove(&slot);
                    }
                    self.release_large_frame(base);
                }
            }
        }
        Ok(())
    }

    /// Pool small frames come from; Prism32 shares one pool below 4GB.
    fn frame_pool(&mut self) -> &mut RegionPool {
        match self.mode.scheme {
            Scheme::Prism32 => &mut self.large_pool,
            _ => &mut self.small_pool,
        }
    }

    fn release_small_frame(&mut self, base: u64) {
        self.small_frames.remove(&base);
        self.mem.unmap(base).expect("small frame mapping");
        self.frame_pool().release(base, SMALL_FRAME_SIZE);
    }

    fn release_large_frame(&mut self, base: u64) {
        self.large_frames.remove(&base);
        self.mem.unmap(base).expect("large frame mapping");
        self.large_pool.release(base, LARGE_FRAME_SIZE);
    }

    pub fn record(&self, sa: u64) -> Option<&AllocationRecord> {
        self.live.get(&sa)
    }

    pub fn live_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.live.values()
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    /// The live object whose closed range `[SA, EA]` contains `addr`.
    pub fn object_at(&self, addr: u64) -> Option<&AllocationRecord> {
        let (_, rec) = self.live.range(..=addr).next_back()?;
        (addr <= rec.ea).then_some(rec)
    }

    /// The live object whose reserved bytes contain `addr`.
    pub fn reservation_at(&self, addr: u64) -> Option<&AllocationRecord> {
        let (_, rec) = self.live.range(..=addr).next_back()?;
        (addr < rec.reserved.1).then_some(rec)
    }

    /// Verifies every layout invariant over the live objects. Returns the
    /// first violation found.
    pub fn check_layout(&self) -> Result<(), String> {
        let mut prev: Option<&AllocationRecord> = None;
        for r in self.live.values() {
            if r.ea - r.sa != r.request_size {
                return Err(format!("{:#x}: ea - sa != size", r.sa));
            }
            if r.sa < LOW_GUARD {
                return Err(format!("{:#x}: below the 4MB guard", r.sa));
            }
            if let Some(slot) = r.sa_slot() {
                match self.mem.read_u64(slot) {
                    Ok(v) if v == r.sa => {}
                    other => return Err(format!("{:#x}: SA slot holds {other:?}", r.sa)),
                }
            }
            match r.mode.scheme {
                Scheme::Prism => {
                    let t = r.tagged;
                    match t.frame_class() {
                        FrameClass::Small => {
                            if r.sa >> 16 != r.ea >> 16 {
                                return Err(format!("{:#x}: small object straddles a frame", r.sa));
                            }
                        }
                        FrameClass::Large => {
                            if r.ea % SMALL_FRAME_SIZE != 0 {
                                return Err(format!("{:#x}: large EA not 64KB aligned", r.sa));
                            }
                        }
                    }
                    if crate::tagging::compute_ea(t) != r.ea {
                        return Err(format!("{:#x}: tag does not decode to EA", r.sa));
                    }
                }
                Scheme::Pow2 => {
                    let a = r.aligned_size.unwrap_or(0);
                    if a < r.request_size + 1 || r.sa % a != 0 {
                        return Err(format!("{:#x}: bad pow2 alignment", r.sa));
                    }
                }
                Scheme::Prism32 => {
                    if crate::tagging::decode_ea32(r.tagged) != r.ea || r.reserved.1 > 1 << 32 {
                        return Err(format!("{:#x}: bad 32-bit encoding", r.sa));
                    }
                }
            }
            if let Some(p) = prev {
                if p.reserved.1 > r.reserved.0 {
                    return Err(format!("{:#x} and {:#x} overlap", p.sa, r.sa));
                }
            }
            prev = Some(r);
        }
        for &base in self.small_frames.keys() {
            if base % SMALL_FRAME_SIZE != 0 || base < LOW_GUARD {
                return Err(format!("small frame {base:#x} misplaced"));
            }
        }
        for &base in self.large_frames.keys() {
            if base % LARGE_FRAME_SIZE != 0 || base < LOW_GUARD {
                return Err(format!("large frame {base:#x} misplaced"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::{compute_ea, decode_ea32, pow2_aligned_size, strip_tag};

    fn prism(q: u64) -> Heap {
        Heap::new(Mode::prism(q))
    }

    #[test]
    fn small_object_reserves_size_plus_sa_slot() {
        let mut h = prism(0);
        let a = h.alloc(24).unwrap();
        let b = h.alloc(8).unwrap();
        assert_eq!(a.frame_class(), FrameClass::Small);
        assert_eq!(compute_ea(a) - a.raw(), 24);
        assert_eq!(b.raw() - a.raw(), 32);
        assert_eq!(h.mem_read(compute_ea(a), 8).unwrap(), a.raw().to_le_bytes());
        assert_eq!(a.raw() % SMALL_FRAME_SIZE, 0);
        assert!(a.raw() >= SMALL_POOL.0);
    }

    #[test]
    fn small_boundary_size_stays_small() {
        let mut h = prism(0);
        let t = h.alloc(SMALL_FRAME_SIZE - 8).unwrap();
        assert_eq!(t.frame_class(), FrameClass::Small);
        assert_eq!(compute_ea(t), t.raw() + SMALL_FRAME_SIZE - 8);
        let t = h.alloc(SMALL_FRAME_SIZE - 7).unwrap();
        assert_eq!(t.frame_class(), FrameClass::Large);
    }

    #[test]
    fn q_moves_the_small_large_boundary() {
        let mut h = prism(16);
        assert_eq!(h.alloc(SMALL_FRAME_SIZE - 24).unwrap().frame_class(), FrameClass::Small);
        assert_eq!(h.alloc(SMALL_FRAME_SIZE - 23).unwrap().frame_class(), FrameClass::Large);
    }

    #[test]
    fn size_limits() {
        let mut h = prism(0);
        assert_eq!(h.alloc(0), Err(AllocError::SizeOutOfRange(0)));
        assert_eq!(h.alloc(MAX_OBJECT_SIZE + 1), Err(AllocError::SizeOutOfRange(MAX_OBJECT_SIZE + 1)));
    }

    #[test]
    fn large_slot_arithmetic() {
        let mut h = prism(0);
        let t = h.alloc(100_000).unwrap();
        let sa = t.raw();
        let base = FrameClass::Large.frame_base(sa);
        assert_eq!(base % LARGE_FRAME_SIZE, 0);
        assert!(base >= LARGE_POOL.0);
        // k = 2, slot 0 at the frame base
        assert_eq!(sa, base + 131_072 - 100_000);
        assert_eq!(compute_ea(t), base + 131_072);
        assert_eq!(h.memory().read_u64(base + 131_072).unwrap(), sa);

        let t2 = h.alloc(100_000).unwrap();
        assert_eq!(compute_ea(t2), base + 2 * 131_072);
    }

    #[test]
    fn large_object_of_exactly_64k() {
        let mut h = prism(0);
        let t = h.alloc(1 << 16).unwrap();
        let base = FrameClass::Large.frame_base(t.raw());
        assert_eq!(compute_ea(t), base + (2 << 16));
        assert_eq!(t.raw(), base + (2 << 16) - (1 << 16));
        assert_eq!(compute_ea(t) % SMALL_FRAME_SIZE, 0);
    }

    #[test]
    fn largest_object_fills_a_frame() {
        let mut h = prism(8);
        let t = h.alloc(MAX_OBJECT_SIZE).unwrap();
        let base = FrameClass::Large.frame_base(t.raw());
        assert_eq!(t.raw(), base);
        assert_eq!(compute_ea(t), base + MAX_OBJECT_SIZE);
        h.check_layout().unwrap();
    }

    #[test]
    fn mismatched_slot_sizes_use_separate_frames() {
        let mut h = prism(0);
        let a = h.alloc(100_000).unwrap();
        let b = h.alloc(300_000).unwrap();
        assert_ne!(FrameClass::Large.frame_base(a.raw()), FrameClass::Large.frame_base(b.raw()));
        h.check_layout().unwrap();
    }

    #[test]
    fn pow2_examples() {
        let mut h = Heap::new(Mode::pow2(0));
        let t = h.alloc(24).unwrap();
        assert_eq!(pow2_aligned_size(t), 32);
        assert_eq!(t.raw() % 32, 0);
        let t = h.alloc(15).unwrap();
        assert_eq!(pow2_aligned_size(t), 16);

        let h8 = Heap::new(Mode::pow2(8));
        assert_eq!(h8.pow2_reservation(24), (32, 39));
    }

    #[test]
    fn alloc_32_examples() {
        let mut h = Heap::new(Mode::prism32(0));
        let t = h.alloc_32(256).unwrap();
        assert_eq!(decode_ea32(t) - strip_tag(t, Scheme::Prism32), 256);
        assert!(decode_ea32(t) < 1 << 32);

        let mut h = Heap::new(Mode::prism32(32));
        let t = h.alloc_32(1).unwrap();
        let rec = h.record(strip_tag(t, Scheme::Prism32)).unwrap();
        assert_eq!(rec.reserved.1 - rec.reserved.0, 41);
        assert_eq!(h.memory().read_u64(decode_ea32(t) + 32).unwrap(), rec.sa);
    }

    #[test]
    fn alloc_32_exhaustion() {
        let mut h = Heap::new(Mode::prism32(0));
        // Three 1GB-ish objects fill the 3GB low pool.
        for _ in 0..2 {
            h.alloc_32(MAX_OBJECT_SIZE / 4).unwrap();
        }
        assert!(matches!(h.alloc_32(MAX_OBJECT_SIZE), Err(AllocError::Exhausted(_))));
    }

    #[test]
    fn escaped_stack_objects() {
        let mut h = prism(0);
        let t = h.alloc_stack_escaped(100).unwrap();
        assert_eq!(t.raw() % 128, 0);
        assert_eq!(t.raw() >> 16, compute_ea(t) >> 16);

        let t = h.alloc_stack_escaped(1 << 16).unwrap();
        assert_eq!(t.frame_class(), FrameClass::Large);
        assert_eq!(compute_ea(t) % SMALL_FRAME_SIZE, 0);
        assert_eq!(compute_ea(t) - t.raw(), 1 << 16);

        let t = h.alloc_stack_escaped(0).unwrap();
        assert_eq!(compute_ea(t), t.raw());
        h.check_layout().unwrap();
    }

    #[test]
    fn dynamic_layout_decisions() {
        let f = 0x1000_0000u64;
        assert_eq!(dynamic_alloca_layout(f + 0x100, 0x80), DynamicLayout::Keep);
        assert_eq!(
            dynamic_alloca_layout(f + 0xFFF8, 0x100),
            DynamicLayout::Realign { asize: 0x10000, padding: 0x10000 - 0x100 }
        );
        assert_eq!(dynamic_alloca_layout(f, 1 << 16), DynamicLayout::Realign { asize: 1 << 16, padding: 0 });
    }

    #[test]
    fn dynamic_alloca_realigns_when_straddling() {
        let mut h = prism(0);
        // Push the stack cursor close to a frame end.
        h.alloc_stack_escaped(0x8000 - 16).unwrap();
        h.alloc_stack_escaped(0x4000).unwrap();
        let before = h.stack.cursor;
        let t = h.alloc_stack_dynamic(0x6000).unwrap();
        assert!(before >> 16 != (before + 0x6000) >> 16);
        assert_eq!(t.frame_class(), FrameClass::Large);
        assert_eq!(compute_ea(t) % SMALL_FRAME_SIZE, 0);
        let t = h.alloc_stack_dynamic(0x20).unwrap();
        assert_eq!(t.frame_class(), FrameClass::Small);
        assert_eq!(compute_ea(t) - t.raw(), 0x20);
        h.check_layout().unwrap();
    }

    #[test]
    fn stack_release_pops_objects() {
        let mut h = prism(0);
        let mark = h.stack_mark();
        let t = h.alloc_stack_escaped(64).unwrap();
        assert!(h.record(t.raw()).is_some());
        h.stack_release(mark);
        assert!(h.record(t.raw()).is_none());
        assert_eq!(h.stack_mark(), mark);
    }

    #[test]
    fn free_errors() {
        let mut h = prism(0);
        let t = h.alloc(24).unwrap();
        assert_eq!(h.free(TaggedAddress(t.value() + 8)), Err(FreeError::Unknown(t.raw() + 8)));
        h.free(t).unwrap();
        assert!(h.record(t.raw()).is_none());
        assert_eq!(h.free(t), Err(FreeError::DoubleFree(t.raw())));
        let g = h.alloc_global(16).unwrap();
        assert_eq!(h.free(g), Err(FreeError::NotHeap(g.raw())));
    }

    #[test]
    fn empty_frames_are_reclaimed() {
        let mut h = prism(0);
        let a = h.alloc(40_000).unwrap();
        let b = h.alloc(40_000).unwrap();
        let fa = a.raw() >> 16;
        assert_ne!(fa, b.raw() >> 16);
        let regions = h.memory().region_count();
        h.free(a).unwrap();
        assert_eq!(h.memory().region_count(), regions - 1);
        let l = h.alloc(200_000).unwrap();
        let frames = h.memory().region_count();
        h.free(l).unwrap();
        assert_eq!(h.memory().region_count(), frames - 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn size_strategy() -> impl Strategy<Value = u64> {
            prop_oneof![
                1u64..512,
                (SMALL_FRAME_SIZE - 128)..(SMALL_FRAME_SIZE + 128),
                1u64..(1 << 16),
                (1u64 << 16)..(1 << 22),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn layout_invariants_hold_under_churn(
                scheme in prop_oneof![Just(Scheme::Prism), Just(Scheme::Pow2), Just(Scheme::Prism32)],
                q in prop_oneof![Just(0u64), Just(8), Just(24), Just(48)],
                ops in proptest::collection::vec((size_strategy(), any::<bool>()), 1..40),
            ) {
                let mut h = Heap::new(Mode::new(scheme, q));
                let mut live = Vec::new();
                for (size, free_one) in ops {
                    let t = h.alloc(size).unwrap();
                    live.push(t);
                    h.check_layout().map_err(TestCaseError::fail)?;
                    if free_one && live.len() > 1 {
                        let victim = live.remove(live.len() / 2);
                        h.free(victim).unwrap();
                        h.check_layout().map_err(TestCaseError::fail)?;
                    }
                }
            }
        }
    }
}
