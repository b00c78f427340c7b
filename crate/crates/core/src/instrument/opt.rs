//! Check elimination: q-padding, lower-bound dropping, combining and loop
//! hoisting. Each pass only rewrites site statuses and widenings, except
//! hoisting, which also adds the preheader range check.

use super::{insert_before, CheckSite, SiteKind, SiteStatus, Window, COMBINE_CAP, LOWER_BOUND_LIMIT};
use crate::ir::cfg::{natural_loops, Cfg, DomTree, InstOrder, Loop};
use crate::ir::{BinOp, BlockId, FuncId, Function, InstKind, Offset, Operand, Pred, SiteId, Ty, ValueDef, ValueId};
use crate::tagging::Mode;

/// Accesses within `q` bytes of their KSA need no check: the KSA is at
/// most EA and the `q` bytes after EA are allocated.
pub(super) fn opt_qpad(sites: &mut [CheckSite], q: u64) {
    for s in sites.iter_mut().filter(|s| s.kind == SiteKind::Access && s.status == SiteStatus::Active) {
        if let Window::Const { lo, hi } = s.window {
            if lo >= 0 && hi <= q as i64 {
                s.status = SiteStatus::ElidedByQ;
            }
        }
    }
}

/// Accesses at non-negative constant offsets from the KSA cannot fall below
/// SA, since the KSA itself is at least SA.
pub(super) fn opt_lower_bound(sites: &mut [CheckSite]) {
    for s in sites.iter_mut().filter(|s| s.kind == SiteKind::Access && s.status == SiteStatus::Active) {
        if let Window::Const { lo, hi } = s.window {
            if 0 <= lo && lo <= hi && hi <= LOWER_BOUND_LIMIT {
                s.status = SiteStatus::LowerBoundDropped;
            }
        }
    }
}

fn within_cap(lo: i64, hi: i64) -> bool {
    lo.abs() <= COMBINE_CAP && hi.abs() <= COMBINE_CAP && hi - lo <= COMBINE_CAP
}

fn widen(s: &mut CheckSite, lo: i64, hi: i64) {
    let (wlo, whi) = s.window.bounds().expect("widened windows are known");
    s.lo_adj = lo - wlo;
    s.hi_adj = hi - whi;
}

/// What checking site `x` already implies about later site `y`.
enum Merge {
    Subset,
    Covered,
    Widen(i64, i64),
    None,
}

fn merge_rule(x: &CheckSite, y: &CheckSite, y_postdominates_x: bool) -> Merge {
    let (Some((xl, xh)), Some((yl, yh))) = (x.effective_bounds(), y.window.bounds()) else { return Merge::None };
    match (&x.window, &y.window) {
        (Window::Const { .. }, Window::Const { .. }) => {
            if xl <= yl && yh <= xh {
                Merge::Subset
            } else if xl >= 0 && yl >= 0 && xh <= COMBINE_CAP && yh <= COMBINE_CAP {
                // The KSA lies in [SA, EA], so a check of [ksa+c1, ksa+c2]
                // with c1 >= 0 also covers [ksa, ksa+c2].
                if xh >= yh {
                    Merge::Covered
                } else if y_postdominates_x {
                    Merge::Widen(0, yh)
                } else {
                    Merge::None
                }
            } else {
                Merge::None
            }
        }
        (Window::Var { terms: tx, .. }, Window::Var { terms: ty, .. }) if tx == ty => {
            if xl <= yl && yh <= xh {
                Merge::Subset
            } else if y_postdominates_x && within_cap(xl.min(yl), xh.max(yh)) {
                Merge::Widen(xl.min(yl), xh.max(yh))
            } else {
                Merge::None
            }
        }
        _ => Merge::None,
    }
}

/// Removes checks implied by a dominating check on the same KSA, widening
/// the dominating check when the later one always follows it.
pub(super) fn opt_combine(f: &Function, fid: FuncId, sites: &mut [CheckSite]) {
    let order = InstOrder::new(f);
    let blocks = order.dom.preorder(BlockId(0));
    let mut rank = vec![usize::MAX; f.blocks.len()];
    for (r, b) in blocks.iter().enumerate() {
        rank[b.idx()] = r;
    }
    let mut cands: Vec<usize> = (0..sites.len())
        .filter(|&i| {
            let s = &sites[i];
            s.func == fid && s.kind == SiteKind::Access && s.status.is_checked() && s.window != Window::Opaque
        })
        .filter(|&i| order.position(sites[i].inst).is_some_and(|(b, _)| rank[b.idx()] != usize::MAX))
        .collect();
    cands.sort_by_key(|&i| {
        let (b, k) = order.position(sites[i].inst).expect("placed");
        (rank[b.idx()], k)
    });
    for (n, &yi) in cands.iter().enumerate() {
        for &xi in &cands[..n] {
            let (x, y) = (&sites[xi], &sites[yi]);
            if !x.status.is_checked() || x.ksa != y.ksa || !order.dominates(x.inst, y.inst) {
                continue;
            }
            match merge_rule(x, y, order.postdominates(y.inst, x.inst)) {
                Merge::Subset => sites[yi].status = SiteStatus::ElidedByDominance,
                Merge::Covered => sites[yi].status = SiteStatus::ElidedByCombine,
                Merge::Widen(lo, hi) => {
                    widen(&mut sites[xi], lo, hi);
                    sites[yi].status = SiteStatus::ElidedByCombine;
                }
                Merge::None => continue,
            }
            break;
        }
    }
}

/// A loop `for (i = start; i pred end; i += step)` recognised in the IR.
struct Induction {
    var: ValueId,
    first: i128,
    last: i128,
    preheader: BlockId,
}

fn imm(o: Operand) -> Option<i64> {
    match o {
        Operand::Imm(n) => Some(n),
        _ => None,
    }
}

/// First and last induction values of a loop that runs at least once.
fn trip_range(start: i64, step: i64, pred: Pred, end: i64) -> Option<(i128, i128)> {
    let (c0, s, e) = (start as i128, step as i128, end as i128);
    let n = match pred {
        Pred::Lt if s > 0 && c0 < e => (e - c0 + s - 1) / s,
        Pred::Le if s > 0 && c0 <= e => (e - c0) / s + 1,
        Pred::Gt if s < 0 && c0 > e => (c0 - e + (-s) - 1) / (-s),
        Pred::Ge if s < 0 && c0 >= e => (c0 - e) / (-s) + 1,
        Pred::Ne if s != 0 && (e - c0) % s == 0 && (e - c0) / s > 0 => (e - c0) / s,
        _ => return None,
    };
    let last = c0 + (n - 1) * s;
    // The final increment must not wrap.
    if n < 1 || last + s > i64::MAX as i128 || last + s < i64::MIN as i128 {
        return None;
    }
    Some((c0, last))
}

fn induction(f: &Function, cfg: &Cfg, l: &Loop) -> Option<Induction> {
    let [latch] = l.latches[..] else { return None };
    if l.exiting_blocks(f, cfg) != [l.header] {
        return None;
    }
    let [preheader] = l.entries(cfg)[..] else { return None };
    if cfg.succs[preheader.idx()].len() != 1 || !matches!(f.terminator(preheader).kind, InstKind::Br { .. }) {
        return None;
    }
    let InstKind::CondBr { cond: Operand::Val(c), then_, else_ } = f.terminator(l.header).kind else { return None };
    if !l.contains(then_) || l.contains(else_) {
        return None;
    }
    let InstKind::Cmp { pred, a: Operand::Val(var), b } = f.def_inst(c)?.kind else { return None };
    let end = imm(b)?;
    let ValueDef::Inst(phi) = f.value(var).def else { return None };
    if !f.block(l.header).insts.contains(&phi) {
        return None;
    }
    let InstKind::Phi { ty: Ty::Int, incoming } = &f.inst(phi).kind else { return None };
    let start = incoming.iter().find(|x| x.1 == preheader).and_then(|x| imm(x.0))?;
    let Operand::Val(next) = incoming.iter().find(|x| x.1 == latch)?.0 else { return None };
    if incoming.len() != 2 {
        return None;
    }
    let step = match f.def_inst(next)?.kind {
        InstKind::Bin { op: BinOp::Add, a: Operand::Val(x), b: Operand::Imm(s) }
        | InstKind::Bin { op: BinOp::Add, a: Operand::Imm(s), b: Operand::Val(x) }
            if x == var =>
        {
            s
        }
        _ => return None,
    };
    let (first, last) = trip_range(start, step, pred, end)?;
    Some(Induction { var, first, last, preheader })
}

fn defined_outside(f: &Function, pos: &[Option<(BlockId, usize)>], l: &Loop, v: ValueId) -> bool {
    match f.value(v).def {
        ValueDef::Param(_) => true,
        ValueDef::Inst(i) => pos[i.idx()].is_some_and(|(b, _)| !l.contains(b)),
    }
}

/// Replaces a variable-index check inside a counted loop with one range
/// check in the preheader covering every iteration.
pub(super) fn opt_loop_hoist(f: &mut Function, fid: FuncId, mode: Mode, sites: &mut Vec<CheckSite>) {
    let cfg = Cfg::new(f);
    let dom = DomTree::dominators(f, &cfg);
    let pos = f.positions();
    let mut plans: Vec<(usize, BlockId, i64, i64)> = Vec::new();
    for l in natural_loops(&cfg, &dom) {
        let Some(ind) = induction(f, &cfg, &l) else { continue };
        let latch = l.latches[0];
        for (si, s) in sites.iter().enumerate() {
            if s.func != fid || s.kind != SiteKind::Access || s.status != SiteStatus::Active {
                continue;
            }
            let Window::Var { terms, .. } = &s.window else { continue };
            let [(t, scale)] = terms[..] else { continue };
            let Some((b, _)) = pos[s.inst.idx()] else { continue };
            if t != ind.var || !l.contains(b) || !dom.dominates(b, latch) {
                continue;
            }
            let Some(k) = s.ksa else { continue };
            if !defined_outside(f, &pos, &l, k) {
                continue;
            }
            let (c1, c2) = s.effective_bounds().expect("var windows have bounds");
            let (a, z) = (scale as i128 * ind.first, scale as i128 * ind.last);
            let lo = c1 as i128 + a.min(z);
            let hi = c2 as i128 + a.max(z);
            let limit = 1i128 << 46;
            if lo.abs() > limit || hi.abs() > limit {
                continue;
            }
            plans.push((si, ind.preheader, lo as i64, hi as i64));
        }
    }
    for (si, pre, lo, hi) in plans {
        if sites[si].status != SiteStatus::Active {
            continue;
        }
        let k = Operand::Val(sites[si].ksa.expect("checked above"));
        let anchor = *f.block(pre).insts.last().expect("terminator");
        let kname = sites[si].ksa_name.clone();
        let place = |f: &mut Function, kind: InstKind, hint: &str| {
            let (id, v) = f.create_inst(kind, Some((hint, Ty::Ptr)));
            insert_before(f, anchor, id);
            Operand::Val(v.expect("has a result"))
        };
        let lo_v = place(f, InstKind::Gep { base: k, offset: Offset::constant(lo) }, &format!("{kname}.lo"));
        let hi_v = place(f, InstKind::Gep { base: k, offset: Offset::constant(hi) }, &format!("{kname}.hi"));
        let id = SiteId(sites.len() as u32);
        let (check, _) = f.create_inst(InstKind::CheckRange { site: id, ksa: k, lo: lo_v, hi: hi_v }, None);
        insert_before(f, anchor, check);
        let orig = sites[si].clone();
        sites[si].status = SiteStatus::ElidedByHoist;
        sites.push(CheckSite {
            id,
            inst: check,
            kind: SiteKind::LoopHoisted,
            window: Window::Const { lo, hi },
            size: (hi - lo) as u64,
            status: SiteStatus::Active,
            lo_adj: 0,
            hi_adj: 0,
            guarded: false,
            q_used: mode.q,
            ..orig
        });
    }
}
