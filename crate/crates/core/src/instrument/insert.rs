//! Check insertion and stack/global escape analysis.

use super::ksa::derived_base;
use super::{insert_before, CheckSite, KsaMap, SiteKind, SiteStatus, Window};
use crate::ir::{FuncId, Function, InstId, InstKind, Operand, Program, SiteId, Ty, ValueId};
use crate::tagging::Mode;
use std::collections::{HashMap, HashSet};

/// Uses that keep a stack or global address private to its function.
fn is_private_use(kind: &InstKind, v: ValueId) -> bool {
    let me = Operand::Val(v);
    match kind {
        InstKind::Load { ptr, .. } => *ptr == me,
        InstKind::Store { ptr, value, .. } => *ptr == me && *value != me,
        InstKind::Gep { base, .. } | InstKind::Cast { value: base } => *base == me,
        InstKind::Copy { value, .. } => *value == me,
        InstKind::PCmp { .. } | InstKind::PSub { .. } => true,
        _ => false,
    }
}

/// Whether anything derived from `root` by gep/cast leaves the function.
fn escapes(f: &Function, users: &HashMap<ValueId, Vec<InstId>>, root: ValueId) -> bool {
    let mut work = vec![root];
    let mut seen = HashSet::new();
    while let Some(v) = work.pop() {
        if !seen.insert(v) {
            continue;
        }
        for &u in users.get(&v).into_iter().flatten() {
            let inst = f.inst(u);
            if !is_private_use(&inst.kind, v) {
                return true;
            }
            if let Some(r) = inst.result {
                if f.value(r).ty == Ty::Ptr {
                    work.push(r);
                }
            }
        }
    }
    false
}

fn users(f: &Function) -> HashMap<ValueId, Vec<InstId>> {
    let mut m: HashMap<ValueId, Vec<InstId>> = HashMap::new();
    for (_, i) in f.placed() {
        for o in f.inst(i).kind.operands() {
            if let Operand::Val(v) = o {
                let e = m.entry(v).or_default();
                if e.last() != Some(&i) {
                    e.push(i);
                }
            }
        }
    }
    m
}

/// Sets the escape flag on every alloca and global whose address can leave
/// its function. Those objects carry a tag from creation; the others stay
/// untagged and are checked against their static size.
pub(super) fn mark_escaping_objects(p: &mut Program) {
    let mut globals: Vec<bool> = p.globals.iter().map(|g| g.escapes).collect();
    for f in &mut p.functions {
        let users = users(f);
        let mut escaped_allocas = Vec::new();
        for (_, i) in f.placed() {
            let inst = f.inst(i);
            let Some(r) = inst.result else { continue };
            match inst.kind {
                InstKind::Alloca { escaped: false, .. } if escapes(f, &users, r) => escaped_allocas.push(i),
                InstKind::Global { global } if !globals[global] && escapes(f, &users, r) => globals[global] = true,
                _ => {}
            }
        }
        for i in escaped_allocas {
            if let InstKind::Alloca { escaped, .. } = &mut f.inst_mut(i).kind {
                *escaped = true;
            }
        }
    }
    for (g, e) in p.globals.iter_mut().zip(globals) {
        g.escapes = e;
    }
}

/// Size of the untagged object `ksa` names, if it is one. `globals[g]`
/// is the size of global `g` when it does not escape.
fn static_size(f: &Function, globals: &[Option<u64>], ksa: Operand) -> Option<u64> {
    let Operand::Val(v) = ksa else { return None };
    match f.def_inst(v)?.kind {
        InstKind::Alloca { size, escaped: false } => Some(size),
        InstKind::Global { global } => globals[global],
        _ => None,
    }
}

/// Offset of `ptr` from `ksa`, following geps and casts.
fn window_of(f: &Function, ksa: Operand, ptr: Operand, size: u64) -> Window {
    let mut constant: i64 = 0;
    let mut terms: Vec<(ValueId, i64)> = Vec::new();
    let mut cur = ptr;
    loop {
        if cur == ksa {
            break;
        }
        let Operand::Val(v) = cur else { return Window::Opaque };
        let Some(base) = derived_base(f, v) else { return Window::Opaque };
        if let InstKind::Gep { offset, .. } = &f.def_inst(v).expect("derived").kind {
            constant = match constant.checked_add(offset.constant) {
                Some(c) => c,
                None => return Window::Opaque,
            };
            for &(t, s) in &offset.terms {
                match terms.iter_mut().find(|x| x.0 == t) {
                    Some(x) => x.1 = x.1.wrapping_add(s),
                    None => terms.push((t, s)),
                }
            }
        }
        cur = base;
    }
    terms.retain(|t| t.1 != 0);
    terms.sort();
    let Some(hi) = constant.checked_add(size as i64) else { return Window::Opaque };
    if terms.is_empty() {
        Window::Const { lo: constant, hi }
    } else {
        Window::Var { terms, lo: constant, hi }
    }
}

fn operand_name(f: &Function, o: Operand) -> String {
    match o {
        Operand::Val(v) => f.value(v).name.clone(),
        Operand::Null => "null".into(),
        Operand::Imm(n) => n.to_string(),
    }
}

#[allow(clippy::too_many_arguments)]
fn new_site(
    f: &mut Function,
    fid: FuncId,
    sites: &mut Vec<CheckSite>,
    kind: SiteKind,
    ksa: Operand,
    window: Window,
    size: u64,
    static_size: Option<u64>,
    guarded: bool,
    mode: Mode,
    check: impl FnOnce(SiteId) -> InstKind,
    before: InstId,
) {
    let id = SiteId(sites.len() as u32);
    let (inst, _) = f.create_inst(check(id), None);
    insert_before(f, before, inst);
    sites.push(CheckSite {
        id,
        function: f.name.clone(),
        func: fid,
        inst,
        kind,
        ksa: ksa.value(),
        ksa_name: operand_name(f, ksa),
        window,
        size,
        static_size,
        status: SiteStatus::Active,
        lo_adj: 0,
        hi_adj: 0,
        guarded,
        q_used: mode.q,
    });
}

/// One `check.access` before every load and store.
pub(super) fn insert_access_checks(
    f: &mut Function,
    fid: FuncId,
    globals: &[Option<u64>],
    ksa: &KsaMap,
    mode: Mode,
    sites: &mut Vec<CheckSite>,
) {
    let accesses: Vec<(InstId, Operand, u64)> = f
        .placed()
        .filter_map(|(_, i)| match f.inst(i).kind {
            InstKind::Load { ptr, ty } | InstKind::Store { ptr, ty, .. } => Some((i, ptr, ty.size())),
            _ => None,
        })
        .collect();
    for (at, ptr, size) in accesses {
        let k = ksa.of(ptr);
        let window = window_of(f, k, ptr, size);
        let st = static_size(f, globals, k);
        new_site(
            f,
            fid,
            sites,
            SiteKind::Access,
            k,
            window,
            size,
            st,
            false,
            mode,
            |site| InstKind::CheckAccess { site, ksa: k, ptr, size },
            at,
        );
    }
}

/// Strips casts and zero-offset geps.
fn strip_aliases(f: &Function, mut o: Operand) -> Operand {
    while let Operand::Val(v) = o {
        match &f.def_inst(v).map(|i| &i.kind) {
            Some(InstKind::Cast { value }) => o = *value,
            Some(InstKind::Copy { ty: Ty::Ptr, value: value @ Operand::Val(_) }) => o = *value,
            Some(InstKind::Gep { base, offset }) if offset.is_zero() => o = *base,
            _ => break,
        }
    }
    o
}

fn is_merge(f: &Function, o: Operand) -> bool {
    let Operand::Val(v) = o else { return false };
    matches!(f.def_inst(v).map(|i| &i.kind), Some(InstKind::Phi { .. } | InstKind::Select { .. }))
}

/// One `check.escape` for every pointer stored, passed or returned, unless
/// it is syntactically its own KSA.
pub(super) fn insert_escape_checks(
    f: &mut Function,
    fid: FuncId,
    ksa: &KsaMap,
    mode: Mode,
    sites: &mut Vec<CheckSite>,
) {
    let mut points: Vec<(InstId, Operand)> = Vec::new();
    for (_, i) in f.placed() {
        let escaping: Vec<Operand> = match &f.inst(i).kind {
            InstKind::Store { value, .. } => vec![*value],
            InstKind::Call { args, .. } | InstKind::Extern { args, .. } => args.clone(),
            InstKind::Ret { value: Some(v) } => vec![*v],
            _ => vec![],
        };
        for o in escaping {
            if matches!(o, Operand::Val(_)) && f.operand_ty(o) == Ty::Ptr {
                points.push((i, o));
            }
        }
    }
    for (at, p) in points {
        let k = ksa.of(p);
        let stripped = strip_aliases(f, p);
        if stripped == k {
            continue;
        }
        let guarded = is_merge(f, stripped);
        let window = window_of(f, k, p, 0);
        new_site(
            f,
            fid,
            sites,
            SiteKind::Escape,
            k,
            window,
            0,
            None,
            guarded,
            mode,
            |site| InstKind::CheckEscape { site, ksa: k, ptr: p },
            at,
        );
    }
}
