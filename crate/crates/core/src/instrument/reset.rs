//! Tag removal before memory operations and pointer comparisons.
//!
//! Loads and stores must see untagged addresses. Rather than masking each
//! address, the address chain is rebuilt over masked roots: one mask per
//! root, placed right after its definition, and one clone per gep, cast
//! or merge on the way. Shared chains are rebuilt once.

use super::{insert_after, insert_at_entry, insert_before};
use crate::ir::{Function, InstId, InstKind, Operand, Ty, ValueDef, ValueId};
use std::collections::HashMap;

struct Reset<'a> {
    f: &'a mut Function,
    memo: HashMap<ValueId, ValueId>,
}

impl Reset<'_> {
    fn operand(&mut self, o: Operand) -> Operand {
        match o {
            Operand::Val(v) => Operand::Val(self.value(v)),
            other => other,
        }
    }

    fn value(&mut self, v: ValueId) -> ValueId {
        if let Some(&m) = self.memo.get(&v) {
            return m;
        }
        let def = self.f.value(v).def;
        let hint = format!("{}.m", self.f.value(v).name);
        let kind = match def {
            ValueDef::Inst(i) => Some((i, self.f.inst(i).kind.clone())),
            ValueDef::Param(_) => None,
        };
        let rebuilt = match kind {
            Some((_, InstKind::Mask { .. })) => v,
            Some((orig, mut kind @ (InstKind::Gep { .. } | InstKind::Cast { .. } | InstKind::Copy { .. }))) => {
                match &mut kind {
                    InstKind::Gep { base, .. }
                    | InstKind::Cast { value: base }
                    | InstKind::Copy { value: base, .. } => {
                        *base = self.operand(*base);
                    }
                    _ => unreachable!(),
                }
                self.place_after(orig, kind, &hint)
            }
            Some((orig, kind @ (InstKind::Phi { .. } | InstKind::Select { .. }))) => {
                // Clone first so a cycle through this merge finds the clone.
                let (id, clone) = self.f.create_inst(kind.clone(), Some((&hint, Ty::Ptr)));
                let clone = clone.expect("merge has a result");
                insert_after(self.f, orig, id);
                self.memo.insert(v, clone);
                let mut kind = kind;
                match &mut kind {
                    InstKind::Phi { incoming, .. } => {
                        for (o, _) in incoming.iter_mut() {
                            *o = self.operand(*o);
                        }
                    }
                    InstKind::Select { a, b, .. } => {
                        *a = self.operand(*a);
                        *b = self.operand(*b);
                    }
                    _ => unreachable!(),
                }
                self.f.inst_mut(id).kind = kind;
                clone
            }
            Some((orig, _)) => self.place_after(orig, InstKind::Mask { value: Operand::Val(v) }, &hint),
            None => {
                let (id, m) = self.f.create_inst(InstKind::Mask { value: Operand::Val(v) }, Some((&hint, Ty::Ptr)));
                insert_at_entry(self.f, id);
                m.expect("mask has a result")
            }
        };
        self.memo.insert(v, rebuilt);
        rebuilt
    }

    fn place_after(&mut self, orig: InstId, kind: InstKind, hint: &str) -> ValueId {
        let (id, v) = self.f.create_inst(kind, Some((hint, Ty::Ptr)));
        insert_after(self.f, orig, id);
        v.expect("has a result")
    }
}

/// Points every load and store at an untagged address.
pub(super) fn reset_metadata(f: &mut Function) {
    let accesses: Vec<InstId> = f
        .placed()
        .filter(|&(_, i)| matches!(f.inst(i).kind, InstKind::Load { .. } | InstKind::Store { .. }))
        .map(|(_, i)| i)
        .collect();
    let mut r = Reset { f, memo: HashMap::new() };
    for i in accesses {
        let ptr = match r.f.inst(i).kind {
            InstKind::Load { ptr, .. } | InstKind::Store { ptr, .. } => ptr,
            _ => unreachable!(),
        };
        let masked = r.operand(ptr);
        match &mut r.f.inst_mut(i).kind {
            InstKind::Load { ptr, .. } | InstKind::Store { ptr, .. } => *ptr = masked,
            _ => unreachable!(),
        }
    }
}

/// Whether a pointer operand may carry a tag while an equal address
/// elsewhere does not, or may come from outside the function.
fn needs_mask(f: &Function, globals: &[Option<u64>], o: Operand) -> bool {
    let Operand::Val(mut v) = o else { return false };
    loop {
        match f.def_inst(v).map(|i| &i.kind) {
            None => return true,
            Some(InstKind::Gep { base: Operand::Val(b), .. })
            | Some(InstKind::Cast { value: Operand::Val(b) })
            | Some(InstKind::Copy { value: Operand::Val(b), .. }) => v = *b,
            Some(InstKind::Alloca { escaped, .. }) => return *escaped,
            Some(InstKind::Global { global }) => return globals[*global].is_none(),
            Some(InstKind::Alloc { .. } | InstKind::AllocaDyn { .. } | InstKind::Mask { .. }) => return false,
            Some(InstKind::Gep { .. } | InstKind::Cast { .. } | InstKind::Copy { .. }) => return false,
            // Loads, calls and merges.
            Some(_) => return true,
        }
    }
}

/// Masks both operands of a pointer comparison or subtraction when either
/// may reference an escaped stack or global object.
pub(super) fn instrument_ptr_cmp_sub(f: &mut Function, globals: &[Option<u64>]) {
    let sites: Vec<InstId> = f
        .placed()
        .filter(|&(_, i)| match &f.inst(i).kind {
            InstKind::PCmp { a, b, .. } | InstKind::PSub { a, b } => {
                needs_mask(f, globals, *a) || needs_mask(f, globals, *b)
            }
            _ => false,
        })
        .map(|(_, i)| i)
        .collect();
    for at in sites {
        let mut kind = f.inst(at).kind.clone();
        let mut mask = |o: Operand| -> Operand {
            let Operand::Val(v) = o else { return o };
            let hint = format!("{}.m", f.value(v).name);
            let (id, m) = f.create_inst(InstKind::Mask { value: o }, Some((&hint, Ty::Ptr)));
            insert_before(f, at, id);
            Operand::Val(m.expect("mask has a result"))
        };
        match &mut kind {
            InstKind::PCmp { a, b, .. } | InstKind::PSub { a, b } => {
                *a = mask(*a);
                *b = mask(*b);
            }
            _ => unreachable!(),
        }
        f.inst_mut(at).kind = kind;
    }
}
