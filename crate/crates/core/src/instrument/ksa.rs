//! Known starting addresses.
//!
//! The KSA of a pointer rolls back every gep and cast to the base value.
//! A phi or select whose operands all have themselves as KSA is its own
//! KSA; any other merge gets a mirror merge over the operands' KSAs,
//! created before its operands are filled so cycles terminate.

use super::insert_after;
use crate::ir::{Function, InstKind, Operand, Ty, ValueDef, ValueId};
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct KsaMap {
    map: HashMap<ValueId, Operand>,
}

impl KsaMap {
    /// KSA of a pointer operand: a value, or `Null`.
    pub fn of(&self, o: Operand) -> Operand {
        match o {
            Operand::Val(v) => self.map.get(&v).copied().unwrap_or(o),
            other => other,
        }
    }

    pub fn get(&self, v: ValueId) -> Option<Operand> {
        self.map.get(&v).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Operand a pointer is derived from by gep, cast or copy.
pub(super) fn derived_base(f: &Function, v: ValueId) -> Option<Operand> {
    match &f.def_inst(v)?.kind {
        InstKind::Gep { base, .. } | InstKind::Cast { value: base } => Some(*base),
        InstKind::Copy { ty: Ty::Ptr, value: base @ Operand::Val(_) } => Some(*base),
        _ => None,
    }
}

fn merge_operands(f: &Function, v: ValueId) -> Option<Vec<Operand>> {
    match &f.def_inst(v)?.kind {
        InstKind::Phi { ty: Ty::Ptr, incoming } => Some(incoming.iter().map(|x| x.0).collect()),
        InstKind::Select { ty: Ty::Ptr, a, b, .. } => Some(vec![*a, *b]),
        _ => None,
    }
}

/// Merges that are their own KSA: the greatest set of ptr merges whose
/// operands are roots, null, or members of the set.
fn root_like_merges(f: &Function) -> HashMap<ValueId, bool> {
    let merges: Vec<(ValueId, Vec<Operand>)> =
        (0..f.values.len() as u32).map(ValueId).filter_map(|v| merge_operands(f, v).map(|ops| (v, ops))).collect();
    let mut root_like: HashMap<ValueId, bool> = merges.iter().map(|(v, _)| (*v, true)).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for (v, ops) in &merges {
            if !root_like[v] {
                continue;
            }
            let ok = ops.iter().all(|o| match *o {
                Operand::Val(x) if derived_base(f, x).is_some() => false,
                Operand::Val(x) => root_like.get(&x).copied().unwrap_or(true),
                _ => true,
            });
            if !ok {
                root_like.insert(*v, false);
                changed = true;
            }
        }
    }
    root_like
}

/// Computes the KSA of every pointer value, adding mirror merges to `f`.
pub fn compute_ksa(f: &mut Function) -> KsaMap {
    let root_like = root_like_merges(f);
    let mut m = KsaMap::default();
    let ptrs: Vec<ValueId> = (0..f.values.len() as u32).map(ValueId).filter(|&v| f.value(v).ty == Ty::Ptr).collect();
    for v in ptrs {
        ksa_of(f, &root_like, &mut m, Operand::Val(v));
    }
    m
}

fn ksa_of(f: &mut Function, root_like: &HashMap<ValueId, bool>, m: &mut KsaMap, o: Operand) -> Operand {
    let Operand::Val(start) = o else { return o };
    if let Some(k) = m.get(start) {
        return k;
    }
    // Roll back the gep/cast chain iteratively.
    let mut chain = vec![start];
    let mut cur = o;
    while let Operand::Val(v) = cur {
        if let Some(k) = m.get(v) {
            cur = k;
            break;
        }
        match derived_base(f, v) {
            Some(base) => {
                chain.push(v);
                cur = base;
            }
            None => {
                cur = merge_ksa(f, root_like, m, v);
                break;
            }
        }
    }
    for v in chain {
        m.map.insert(v, cur);
    }
    cur
}

fn merge_ksa(f: &mut Function, root_like: &HashMap<ValueId, bool>, m: &mut KsaMap, v: ValueId) -> Operand {
    if root_like.get(&v).copied().unwrap_or(true) {
        m.map.insert(v, Operand::Val(v));
        return Operand::Val(v);
    }
    let ValueDef::Inst(orig) = f.value(v).def else { unreachable!("merges are instructions") };
    let hint = format!("{}.ksa", f.value(v).name);
    let kind = f.inst(orig).kind.clone();
    let (mirror_inst, mirror) = f.create_inst(kind, Some((&hint, Ty::Ptr)));
    let mirror = mirror.expect("mirror has a result");
    insert_after(f, orig, mirror_inst);
    m.map.insert(v, Operand::Val(mirror));
    m.map.insert(mirror, Operand::Val(mirror));
    let mut kind = f.inst(mirror_inst).kind.clone();
    match &mut kind {
        InstKind::Phi { incoming, .. } => {
            for (op, _) in incoming.iter_mut() {
                *op = ksa_of(f, root_like, m, *op);
            }
        }
        InstKind::Select { a, b, .. } => {
            *a = ksa_of(f, root_like, m, *a);
            *b = ksa_of(f, root_like, m, *b);
        }
        _ => unreachable!("only merges are mirrored"),
    }
    f.inst_mut(mirror_inst).kind = kind;
    Operand::Val(mirror)
}
