//! Interpreter for instrumented programs over the simulated heap.
//!
//! Pointers are 64-bit tagged values. Address arithmetic wraps within the
//! scheme's address bits and keeps the tag; loads and stores require an
//! untagged address, which the metadata reset guarantees. A tagged address
//! reaching memory is a sandbox bug and surfaces as [`RuntimeError`].

use crate::checks::{AbortReason, CheckForm, CheckOutcome, CheckStats, Checker, Mutation};
use crate::heap::{AllocError, FreeError, Heap};
use crate::instrument::{CheckSite, Instrumented, SiteStatus};
use crate::ir::{BlockId, FuncId, Function, InstKind, MemTy, Operand, SiteId, Ty, ValueId};
use crate::memory::SimFault;
use crate::oracle::{self, AccessClass};
use crate::tagging::{compute_ea, decode_ea32, pow2_aligned_size, Scheme, TaggedAddress};
use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

pub const DEFAULT_STEP_LIMIT: u64 = 50_000_000;
pub const MAX_CALL_DEPTH: usize = 512;

/// Who decides check outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    /// The scheme's predicates at every checked site.
    Prism,
    /// Exact bounds at every site, elided or not.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Access,
    Escape,
    Range,
    /// Extern buffer argument checked at the call boundary.
    Contract,
}

/// One executed check instruction or extern boundary check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckEvent {
    pub site: Option<SiteId>,
    pub kind: EventKind,
    pub status: Option<SiteStatus>,
    pub ksa: TaggedAddress,
    /// Untagged start of the original access, before any widening.
    pub ptr: u64,
    pub size: u64,
    /// Untagged `[lo, hi)` the predicate evaluated; differs from the
    /// access at widened and hoisted sites. `None` when no predicate ran.
    pub checked: Option<(u64, u64)>,
    /// `None` when no predicate ran: elided sites and guarded escapes.
    pub outcome: Option<CheckOutcome>,
}

pub trait Observer {
    fn on_check(&mut self, ev: &CheckEvent, heap: &Heap);
}

impl Observer for () {
    fn on_check(&mut self, _: &CheckEvent, _: &Heap) {}
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationReport {
    /// `None` for extern boundary checks.
    pub site: Option<SiteId>,
    pub reason: AbortReason,
    pub ksa: u64,
    pub ptr: u64,
    pub ea: u64,
    pub access_size: u64,
    pub function: String,
    pub block: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum RuntimeError {
    #[error("memory fault at {addr:#x} ({len} bytes)")]
    Fault { addr: u64, len: u64 },
    #[error("tagged address {0:#x} reached memory")]
    NonCanonical(u64),
    #[error("allocation failed: {0}")]
    Alloc(String),
    #[error("free failed: {0}")]
    Free(String),
    #[error("step limit of {0} exceeded")]
    StepLimit(u64),
    #[error("call depth limit exceeded")]
    CallDepth,
    #[error("unknown extern @{0}")]
    UnknownExtern(String),
    #[error("no entry function @main")]
    NoEntry,
}

impl From<SimFault> for RuntimeError {
    fn from(f: SimFault) -> Self {
        RuntimeError::Fault { addr: f.addr, len: f.len }
    }
}

impl From<AllocError> for RuntimeError {
    fn from(e: AllocError) -> Self {
        RuntimeError::Alloc(e.to_string())
    }
}

impl From<FreeError> for RuntimeError {
    fn from(e: FreeError) -> Self {
        RuntimeError::Free(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Exit {
    Ok { value: Option<i64> },
    Violation(ViolationReport),
    Error { error: RuntimeError },
}

impl Exit {
    pub fn is_ok(&self) -> bool {
        matches!(self, Exit::Ok { .. })
    }

    pub fn violation(&self) -> Option<&ViolationReport> {
        match self {
            Exit::Violation(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub exit: Exit,
    pub stats: CheckStats,
    pub steps: u64,
    /// Stores and extern buffer writes performed.
    pub writes: u64,
    pub trace: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VmConfig {
    pub backend: Backend,
    pub mutation: Option<Mutation>,
    pub step_limit: u64,
    pub trace: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig { backend: Backend::Prism, mutation: None, step_limit: DEFAULT_STEP_LIMIT, trace: false }
    }
}

enum Stop {
    Violation(ViolationReport),
    Error(RuntimeError),
}

impl From<RuntimeError> for Stop {
    fn from(e: RuntimeError) -> Self {
        Stop::Error(e)
    }
}

impl From<AllocError> for Stop {
    fn from(e: AllocError) -> Self {
        Stop::Error(e.into())
    }
}

impl From<FreeError> for Stop {
    fn from(e: FreeError) -> Self {
        Stop::Error(e.into())
    }
}

impl From<SimFault> for Stop {
    fn from(e: SimFault) -> Self {
        Stop::Error(e.into())
    }
}

struct Vm<'a> {
    prog: &'a Instrumented,
    cfg: &'a VmConfig,
    heap: Heap,
    checker: Checker,
    globals: Vec<u64>,
    steps: u64,
    writes: u64,
    depth: usize,
    trace: Vec<String>,
    observer: &'a mut dyn Observer,
    mask: u64,
}

/// Runs `@main` with integer `inputs` bound to its int parameters in order.
pub fn run(prog: &Instrumented, inputs: &[i64], cfg: &VmConfig) -> RunResult {
    run_observed(prog, inputs, cfg, &mut ())
}

pub fn run_observed(prog: &Instrumented, inputs: &[i64], cfg: &VmConfig, observer: &mut dyn Observer) -> RunResult {
    let mut checker = Checker::new(prog.mode);
    checker.mutation = cfg.mutation;
    let mut vm = Vm {
        prog,
        cfg,
        heap: Heap::new(prog.mode),
        checker,
        globals: Vec::new(),
        steps: 0,
        writes: 0,
        depth: 0,
        trace: Vec::new(),
        observer,
        mask: prog.mode.scheme.addr_mask(),
    };
    let exit = match vm.start(inputs) {
        Ok(v) => Exit::Ok { value: v.map(|x| x as i64) },
        Err(Stop::Violation(r)) => Exit::Violation(r),
        Err(Stop::Error(e)) => Exit::Error { error: e },
    };
    RunResult { exit, stats: vm.checker.stats, steps: vm.steps, writes: vm.writes, trace: vm.trace }
}

fn mem_size(ty: MemTy) -> u64 {
    ty.size()
}

struct Place<'f> {
    f: &'f Function,
    block: BlockId,
    index: usize,
}

impl<'a> Vm<'a> {
    fn start(&mut self, inputs: &[i64]) -> Result<Option<u64>, Stop> {
        for g in &self.prog.program.globals {
            let t = self.heap.alloc_global(g.size)?;
            self.globals.push(if g.escapes { t.value() } else { t.value() & self.mask });
        }
        let main = self.prog.program.entry().ok_or(RuntimeError::NoEntry)?;
        let f = self.prog.program.func(main);
        let mut ints = inputs.iter();
        let args: Vec<u64> = f
            .params
            .iter()
            .map(|&p| if f.value(p).ty == Ty::Int { *ints.next().unwrap_or(&0) as u64 } else { 0 })
            .collect();
        self.call(main, &args)
    }

    fn gep(&self, base: u64, delta: i64) -> u64 {
        (base & !self.mask) | (base.wrapping_add(delta as u64) & self.mask)
    }

    fn canonical(&self, addr: u64) -> Result<u64, RuntimeError> {
        if addr & !self.mask != 0 {
            Err(RuntimeError::NonCanonical(addr))
        } else {
            Ok(addr)
        }
    }

    fn call(&mut self, fid: FuncId, args: &[u64]) -> Result<Option<u64>, Stop> {
        if self.depth >= MAX_CALL_DEPTH {
            return Err(RuntimeError::CallDepth.into());
        }
        self.depth += 1;
        let mark = self.heap.stack_mark();
        let r = self.exec(fid, args);
        self.heap.stack_release(mark);
        self.depth -= 1;
        r
    }

    fn exec(&mut self, fid: FuncId, args: &[u64]) -> Result<Option<u64>, Stop> {
        let f: &'a Function = self.prog.program.func(fid);
        let mut regs = vec![0u64; f.values.len()];
        for (&p, &a) in f.params.iter().zip(args) {
            regs[p.idx()] = a;
        }
        let val = |regs: &[u64], o: Operand| -> u64 {
            match o {
                Operand::Val(v) => regs[v.idx()],
                Operand::Imm(n) => n as u64,
                Operand::Null => 0,
            }
        };
        let mut block = BlockId(0);
        let mut prev: Option<BlockId> = None;
        loop {
            let insts = &f.block(block).insts;
            let mut idx = 0;
            let mut incoming: Vec<(ValueId, u64)> = Vec::new();
            while let Some(InstKind::Phi { incoming: inc, .. }) = insts.get(idx).map(|&i| &f.inst(i).kind) {
                let from = prev.expect("entry block has no phis");
                let (o, _) = inc.iter().find(|x| x.1 == from).expect("validated phi has an edge per predecessor");
                incoming.push((f.inst(insts[idx]).result.expect("phi result"), val(&regs, *o)));
                idx += 1;
            }
            for (v, x) in incoming {
                regs[v.idx()] = x;
            }
            let mut next = None;
            for (k, &i) in insts.iter().enumerate().skip(idx) {
                self.steps += 1;
                if self.steps > self.cfg.step_limit {
                    return Err(RuntimeError::StepLimit(self.cfg.step_limit).into());
                }
                let inst = f.inst(i);
                let place = Place { f, block, index: k };
                let out: Option<u64> = match &inst.kind {
                    InstKind::Alloc { size } => Some(self.heap.alloc(val(&regs, *size))?.value()),
                    InstKind::Alloca { size, escaped } => {
                        let t = self.heap.alloc_stack_escaped(*size)?;
                        Some(if *escaped { t.value() } else { t.value() & self.mask })
                    }
                    InstKind::AllocaDyn { size } => Some(self.heap.alloc_stack_dynamic(val(&regs, *size))?.value()),
                    InstKind::Global { global } => Some(self.globals[*global]),
                    InstKind::Gep { base, offset } => {
                        let mut d = offset.constant;
                        for &(t, s) in &offset.terms {
                            d = d.wrapping_add((regs[t.idx()] as i64).wrapping_mul(s));
                        }
                        Some(self.gep(val(&regs, *base), d))
                    }
                    InstKind::Cast { value } | InstKind::Copy { value, .. } | InstKind::PtrToInt { value } => {
                        Some(val(&regs, *value))
                    }
                    InstKind::Mask { value } => Some(val(&regs, *value) & self.mask),
                    InstKind::Load { ptr, ty } => {
                        let addr = self.canonical(val(&regs, *ptr))?;
                        let n = mem_size(*ty);
                        let mut buf = [0u8; 8];
                        self.heap.memory().read_into(addr, &mut buf[..n as usize])?;
                        let raw = u64::from_le_bytes(buf);
                        Some(match ty {
                            MemTy::Int(w) if *w < 8 => {
                                let sh = 64 - 8 * *w as u32;
                                (((raw << sh) as i64) >> sh) as u64
                            }
                            _ => raw,
                        })
                    }
                    InstKind::Store { ptr, ty, value } => {
                        let addr = self.canonical(val(&regs, *ptr))?;
                        let bytes = val(&regs, *value).to_le_bytes();
                        self.heap.mem_write(addr, &bytes[..mem_size(*ty) as usize])?;
                        self.writes += 1;
                        None
                    }
                    InstKind::Free { ptr } => {
                        let p = val(&regs, *ptr);
                        if p != 0 {
                            self.heap.free(TaggedAddress(p))?;
                        }
                        None
                    }
                    InstKind::Bin { op, a, b } => Some(op.eval(val(&regs, *a) as i64, val(&regs, *b) as i64) as u64),
                    InstKind::Cmp { pred, a, b } => {
                        Some(pred.eval(val(&regs, *a) as i64, val(&regs, *b) as i64) as u64)
                    }
                    InstKind::PCmp { pred, a, b } => Some(pred.eval(val(&regs, *a), val(&regs, *b)) as u64),
                    InstKind::PSub { a, b } => Some(val(&regs, *a).wrapping_sub(val(&regs, *b))),
                    InstKind::Phi { .. } => unreachable!("phis only head blocks"),
                    InstKind::Select { cond, a, b, .. } => {
                        Some(if val(&regs, *cond) != 0 { val(&regs, *a) } else { val(&regs, *b) })
                    }
                    InstKind::Call { func, args } => {
                        let a: Vec<u64> = args.iter().map(|&x| val(&regs, x)).collect();
                        self.call(*func, &a)?
                    }
                    InstKind::Extern { ext, args } => {
                        let a: Vec<u64> = args.iter().map(|&x| val(&regs, x)).collect();
                        self.call_extern(*ext, &a, &place)?
                    }
                    InstKind::CheckAccess { site, ksa, ptr, size } => {
                        let s = self.prog.site(*site);
                        self.access_site(s, TaggedAddress(val(&regs, *ksa)), val(&regs, *ptr), *size, &place)?;
                        None
                    }
                    InstKind::CheckEscape { site, ksa, ptr } => {
                        let s = self.prog.site(*site);
                        self.escape_site(s, TaggedAddress(val(&regs, *ksa)), val(&regs, *ptr), &place)?;
                        None
                    }
                    InstKind::CheckRange { site, ksa, lo, hi } => {
                        let s = self.prog.site(*site);
                        let (l, h) = (val(&regs, *lo) & self.mask, val(&regs, *hi) & self.mask);
                        self.range_site(s, TaggedAddress(val(&regs, *ksa)), l, h, &place)?;
                        None
                    }
                    InstKind::Br { target } => {
                        next = Some(*target);
                        None
                    }
                    InstKind::CondBr { cond, then_, else_ } => {
                        next = Some(if val(&regs, *cond) != 0 { *then_ } else { *else_ });
                        None
                    }
                    InstKind::Ret { value } => return Ok(value.map(|v| val(&regs, v))),
                };
                if let (Some(r), Some(x)) = (inst.result, out) {
                    regs[r.idx()] = x;
                }
                if next.is_some() {
                    break;
                }
            }
            prev = Some(block);
            block = next.expect("validated blocks end in a terminator");
        }
    }

    fn form(&self, s: &CheckSite) -> CheckForm {
        match (s.static_size, s.status) {
            (Some(size), _) => CheckForm::Static { size },
            (None, SiteStatus::LowerBoundDropped) => CheckForm::UpperOnly,
            _ => CheckForm::Full,
        }
    }

    /// End address a report shows for `ksa`.
    fn report_ea(&self, ksa: TaggedAddress, form: CheckForm) -> u64 {
        match (form, self.prog.mode.scheme) {
            (CheckForm::Static { size }, _) => (ksa.value() & self.mask).saturating_add(size),
            (_, Scheme::Prism) => compute_ea(ksa),
            (_, Scheme::Prism32) => decode_ea32(ksa),
            (_, Scheme::Pow2) => {
                let a = pow2_aligned_size(ksa);
                (ksa.raw() & !(a - 1)) + a - 1
            }
        }
    }

    /// Exact-bounds outcome for `[lo, hi)` against the object holding the KSA.
    fn oracle_outcome(&self, kind: EventKind, ksa: TaggedAddress, lo: u64, hi: u64) -> CheckOutcome {
        let k = ksa.value() & self.mask;
        let class = match kind {
            EventKind::Escape => oracle::classify_escape(&self.heap, k, lo),
            _ if hi < lo => AccessClass::Oob,
            _ => oracle::classify_access(&self.heap, k, lo, hi - lo),
        };
        let abort = match class {
            AccessClass::InBounds => None,
            AccessClass::InvalidEscape => Some(AbortReason::EscapeInvariant),
            _ if lo < k => Some(AbortReason::LowerBound),
            _ => Some(AbortReason::UpperBound),
        };
        CheckOutcome { abort, ..CheckOutcome::PASS }
    }

    fn finish_check(&mut self, ev: CheckEvent, ea_form: CheckForm, place: &Place) -> Result<(), Stop> {
        if self.cfg.trace {
            let mut line = String::new();
            match ev.site {
                Some(s) => write!(line, "{s}").unwrap(),
                None => line.push_str("extern"),
            }
            let outcome = match (&ev.outcome, ev.status) {
                (Some(o), _) if o.passed() => "pass".to_string(),
                (Some(o), _) => format!("abort({})", o.abort.expect("failed")),
                (None, Some(s)) if s.is_elided() => "elided".to_string(),
                (None, _) => "skipped".to_string(),
            };
            write!(line, " {:?} ksa={:#x} ptr={:#x} size={} -> {outcome}", ev.kind, ev.ksa.value(), ev.ptr, ev.size)
                .unwrap();
            self.trace.push(line.to_lowercase());
        }
        self.observer.on_check(&ev, &self.heap);
        let Some(reason) = ev.outcome.and_then(|o| o.abort) else { return Ok(()) };
        Err(Stop::Violation(ViolationReport {
            site: ev.site,
            reason,
            ksa: ev.ksa.value(),
            ptr: ev.ptr,
            ea: self.report_ea(ev.ksa, ea_form),
            access_size: ev.size,
            function: place.f.name.clone(),
            block: place.f.block(place.block).label.clone(),
            index: place.index,
        }))
    }

    /// Evaluates `[lo, hi)` with the configured backend and counts it.
    fn decide(
        &mut self,
        kind: EventKind,
        ksa: TaggedAddress,
        lo: u64,
        hi: u64,
        form: CheckForm,
    ) -> Result<CheckOutcome, SimFault> {
        match self.cfg.backend {
            Backend::Oracle => {
                let o = self.oracle_outcome(kind, ksa, lo, hi);
                self.checker.stats.record(&o);
                Ok(o)
            }
            Backend::Prism => {
                let mem = self.heap.memory();
                match kind {
                    EventKind::Escape => {
                        let mut o = self.checker.evaluate(ksa, lo, 0, form, mem)?;
                        if o.abort.is_some() {
                            o.abort = Some(AbortReason::EscapeInvariant);
                        }
                        self.checker.stats.record(&o);
                        Ok(o)
                    }
                    _ => self.checker.range(ksa, lo, hi, form, mem),
                }
            }
        }
    }

    fn access_site(
        &mut self,
        s: &CheckSite,
        ksa: TaggedAddress,
        ptr: u64,
        size: u64,
        place: &Place,
    ) -> Result<(), Stop> {
        let p = ptr & self.mask;
        let form = self.form(s);
        let run = s.status.is_checked() || self.cfg.backend == Backend::Oracle;
        let (checked, outcome) = if run {
            let (lo_adj, hi_adj) = if self.cfg.backend == Backend::Prism { (s.lo_adj, s.hi_adj) } else { (0, 0) };
            let lo = self.gep(p, lo_adj);
            let hi = self.gep(p.saturating_add(size), hi_adj);
            (Some((lo, hi)), Some(self.decide(EventKind::Access, ksa, lo, hi, form)?))
        } else {
            (None, None)
        };
        let ev = CheckEvent {
            site: Some(s.id),
            kind: EventKind::Access,
            status: Some(s.status),
            ksa,
            ptr: p,
            size,
            checked,
            outcome,
        };
        self.finish_check(ev, form, place)
    }

    fn escape_site(&mut self, s: &CheckSite, ksa: TaggedAddress, ptr: u64, place: &Place) -> Result<(), Stop> {
        let p = ptr & self.mask;
        let form = self.form(s);
        let (checked, outcome) = if s.guarded && p == ksa.value() & self.mask {
            self.checker.stats.guarded_skips += 1;
            (None, None)
        } else {
            (Some((p, p)), Some(self.decide(EventKind::Escape, ksa, p, p, form)?))
        };
        let ev = CheckEvent {
            site: Some(s.id),
            kind: EventKind::Escape,
            status: Some(s.status),
            ksa,
            ptr: p,
            size: 0,
            checked,
            outcome,
        };
        self.finish_check(ev, form, place)
    }

    fn range_site(&mut self, s: &CheckSite, ksa: TaggedAddress, lo: u64, hi: u64, place: &Place) -> Result<(), Stop> {
        let form = self.form(s);
        // The oracle checks each hoisted access where it happens instead.
        let (checked, outcome) = match self.cfg.backend {
            Backend::Prism => (Some((lo, hi)), Some(self.decide(EventKind::Range, ksa, lo, hi, form)?)),
            Backend::Oracle => (None, None),
        };
        let ev = CheckEvent {
            site: Some(s.id),
            kind: EventKind::Range,
            status: Some(s.status),
            ksa,
            ptr: lo,
            size: hi.saturating_sub(lo),
            checked,
            outcome,
        };
        self.finish_check(ev, form, place)
    }

    /// Checks a buffer argument of an extern against the pointer's own
    /// metadata, before the tag is stripped.
    fn contract_check(&mut self, p: u64, len: u64, place: &Place) -> Result<u64, Stop> {
        let t = TaggedAddress(p);
        let raw = p & self.mask;
        let outcome = self.decide(EventKind::Contract, t, raw, raw.saturating_add(len), CheckForm::Full)?;
        let ev = CheckEvent {
            site: None,
            kind: EventKind::Contract,
            status: None,
            ksa: t,
            ptr: raw,
            size: len,
            checked: Some((raw, raw.saturating_add(len))),
            outcome: Some(outcome),
        };
        self.finish_check(ev, CheckForm::Full, place)?;
        Ok(raw)
    }

    fn call_extern(&mut self, ext: usize, args: &[u64], place: &Place) -> Result<Option<u64>, Stop> {
        let decl = &self.prog.program.externs[ext];
        let k = &decl.contract;
        // Buffers named by the contract are checked, then stripped.
        let mut raw: Vec<u64> = args.to_vec();
        for &(pi, li) in k.writes.iter().chain(&k.reads) {
            raw[pi] = self.contract_check(args[pi], args[li], place)?;
        }
        for (i, t) in decl.params.iter().enumerate() {
            if *t == Ty::Ptr {
                raw[i] &= self.mask;
            }
        }
        let int = |i: usize| raw[i] as i64;
        self.writes += k.writes.len() as u64;
        let mem = self.heap.memory_mut();
        let out = match decl.name.as_str() {
            "buf_new" => Some(self.heap.alloc(raw[0])?.value()),
            "memset" => {
                mem.fill(raw[0], raw[2], raw[1] as u8)?;
                None
            }
            "memcpy" | "memmove" => {
                let bytes = mem.read(raw[1], raw[2])?;
                mem.write(raw[0], &bytes)?;
                None
            }
            "recv" => {
                let bytes: Vec<u8> = (0..raw[1]).map(|i| (i as u8).wrapping_mul(31).wrapping_add(7)).collect();
                mem.write(raw[0], &bytes)?;
                Some(raw[1])
            }
            "checksum" => {
                let bytes = mem.read(raw[0], raw[1])?;
                Some(bytes.iter().fold(0u64, |a, &b| a.wrapping_mul(31).wrapping_add(b as u64)))
            }
            "abs" => Some(int(0).wrapping_abs() as u64),
            "min" => Some(int(0).min(int(1)) as u64),
            "max" => Some(int(0).max(int(1)) as u64),
            other => return Err(RuntimeError::UnknownExtern(other.to_string()).into()),
        };
        Ok(if decl.ret.is_some() { Some(out.unwrap_or(0)) } else { None })
    }
}
