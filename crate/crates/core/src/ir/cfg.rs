//! Control-flow analyses: predecessors, reverse postorder, dominator and
//! postdominator trees, natural loops.
//!
//! Dominators use the iterative two-finger algorithm over reverse
//! postorder. Postdominators run the same algorithm on the reversed graph
//! with a virtual exit joined to every `ret` block.

use super::{BlockId, Function, InstId, InstKind};
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct Cfg {
    pub succs: Vec<Vec<BlockId>>,
    pub preds: Vec<Vec<BlockId>>,
    /// Blocks reachable from entry, in reverse postorder.
    pub rpo: Vec<BlockId>,
    pub reachable: Vec<bool>,
}

impl Cfg {
    pub fn new(f: &Function) -> Self {
        let n = f.blocks.len();
        let succs: Vec<Vec<BlockId>> = f.block_ids().map(|b| f.successors(b)).collect();
        let mut preds = vec![Vec::new(); n];
        for b in f.block_ids() {
            for &s in &succs[b.idx()] {
                if !preds[s.idx()].contains(&b) {
                    preds[s.idx()].push(b);
                }
            }
        }
        let mut reachable = vec![false; n];
        let mut post = Vec::with_capacity(n);
        if n > 0 {
            // Iterative DFS producing postorder.
            let mut stack = vec![(BlockId(0), 0usize)];
            reachable[0] = true;
            while let Some(&mut (b, ref mut i)) = stack.last_mut() {
                if let Some(&s) = succs[b.idx()].get(*i) {
                    *i += 1;
                    if !reachable[s.idx()] {
                        reachable[s.idx()] = true;
                        stack.push((s, 0));
                    }
                } else {
                    post.push(b);
                    stack.pop();
                }
            }
        }
        post.reverse();
        Cfg { succs, preds, rpo: post, reachable }
    }
}

/// Immediate-dominator tree over blocks.
#[derive(Debug, Clone)]
pub struct DomTree {
    /// `idom[b]`; the root maps to itself, unreachable blocks to `None`.
    idom: Vec<Option<usize>>,
    /// Number of real blocks; a larger index is the virtual exit.
    blocks: usize,
}

impl DomTree {
    fn build(n: usize, root: usize, rpo: &[usize], preds: &dyn Fn(usize) -> Vec<usize>) -> Self {
        let mut order = vec![usize::MAX; n];
        for (i, &b) in rpo.iter().enumerate() {
            order[b] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; n];
        idom[root] = Some(root);
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while order[a] > order[b] {
                    a = idom[a].expect("processed");
                }
                while order[b] > order[a] {
                    b = idom[b].expect("processed");
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &b in rpo.iter().skip(1) {
                let mut new = None;
                for p in preds(b) {
                    if order[p] == usize::MAX || idom[p].is_none() {
                        continue;
                    }
                    new = Some(match new {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new.is_some() && idom[b] != new {
                    idom[b] = new;
                    changed = true;
                }
            }
        }
        DomTree { idom, blocks: n }
    }

    pub fn dominators(f: &Function, cfg: &Cfg) -> Self {
        let rpo: Vec<usize> = cfg.rpo.iter().map(|b| b.idx()).collect();
        let preds = |b: usize| cfg.preds[b].iter().map(|p| p.idx()).collect();
        Self::build(f.blocks.len(), 0, &rpo, &preds)
    }

    /// Postdominators. Node `blocks.len()` is the virtual exit; blocks that
    /// cannot reach a `ret` are postdominated by nothing.
    pub fn postdominators(f: &Function, cfg: &Cfg) -> Self {
        let n = f.blocks.len();
        let exit = n;
        let is_ret = |b: usize| matches!(f.terminator(BlockId(b as u32)).kind, InstKind::Ret { .. });
        // Reverse graph: successors of b are its CFG predecessors; the exit's
        // successors are the ret blocks.
        let rsuccs = |b: usize| -> Vec<usize> {
            if b == exit {
                (0..n).filter(|&x| cfg.reachable[x] && is_ret(x)).collect()
            } else {
                cfg.preds[b].iter().map(|p| p.idx()).filter(|&p| cfg.reachable[p]).collect()
            }
        };
        let rpreds = |b: usize| -> Vec<usize> {
            let mut v: Vec<usize> = cfg.succs[b].iter().map(|s| s.idx()).collect();
            if is_ret(b) {
                v.push(exit);
            }
            v
        };
        let mut seen = vec![false; n + 1];
        let mut post = Vec::new();
        let mut stack = vec![(exit, rsuccs(exit), 0usize)];
        seen[exit] = true;
        while let Some((b, succ, i)) = stack.last_mut() {
            if let Some(&s) = succ.get(*i) {
                *i += 1;
                if !seen[s] {
                    seen[s] = true;
                    let ss = rsuccs(s);
                    stack.push((s, ss, 0));
                }
            } else {
                post.push(*b);
                stack.pop();
            }
        }
        post.reverse();
        let mut t = Self::build(n + 1, exit, &post, &rpreds);
        t.blocks = n;
        t
    }

    pub fn idom(&self, b: BlockId) -> Option<BlockId> {
        match self.idom[b.idx()] {
            Some(d) if d != b.idx() && d < self.blocks => Some(BlockId(d as u32)),
            _ => None,
        }
    }

    pub fn is_reachable(&self, b: BlockId) -> bool {
        self.idom[b.idx()].is_some()
    }

    /// Whether `a` dominates `b` (reflexive). False if either is unreachable.
    pub fn dominates(&self, a: BlockId, b: BlockId) -> bool {
        let (a, mut b) = (a.idx(), b.idx());
        if self.idom[a].is_none() || self.idom[b].is_none() {
            return false;
        }
        loop {
            if a == b {
                return true;
            }
            let up = self.idom[b].expect("reachable");
            if up == b {
                return false;
            }
            b = up;
        }
    }

    /// Blocks in a preorder walk of the tree, children visited in block order.
    pub fn preorder(&self, root: BlockId) -> Vec<BlockId> {
        let n = self.idom.len();
        let mut children = vec![Vec::new(); n];
        for (b, d) in self.idom.iter().enumerate() {
            if let Some(d) = *d {
                if d != b {
                    children[d].push(b);
                }
            }
        }
        let mut out = Vec::new();
        let mut stack = vec![root.idx()];
        while let Some(b) = stack.pop() {
            if b < self.blocks {
                out.push(BlockId(b as u32));
            }
            for &c in children[b].iter().rev() {
                stack.push(c);
            }
        }
        out
    }
}

/// Dominance queries at instruction granularity.
#[derive(Debug, Clone)]
pub struct InstOrder {
    pos: Vec<Option<(BlockId, usize)>>,
    pub dom: DomTree,
    pub pdom: DomTree,
}

impl InstOrder {
    pub fn new(f: &Function) -> Self {
        let cfg = Cfg::new(f);
        InstOrder { pos: f.positions(), dom: DomTree::dominators(f, &cfg), pdom: DomTree::postdominators(f, &cfg) }
    }

    pub fn position(&self, i: InstId) -> Option<(BlockId, usize)> {
        self.pos[i.idx()]
    }

    /// `a` executes before `b` on every path reaching `b` (strict).
    pub fn dominates(&self, a: InstId, b: InstId) -> bool {
        match (self.pos[a.idx()], self.pos[b.idx()]) {
            (Some((ba, ia)), Some((bb, ib))) if ba == bb => ia < ib && self.dom.is_reachable(ba),
            (Some((ba, _)), Some((bb, _))) => self.dom.dominates(ba, bb),
            _ => false,
        }
    }

    /// `b` executes after `a` on every path from `a` to function exit (strict).
    pub fn postdominates(&self, b: InstId, a: InstId) -> bool {
        match (self.pos[a.idx()], self.pos[b.idx()]) {
            (Some((ba, ia)), Some((bb, ib))) if ba == bb => ib > ia && self.pdom.is_reachable(ba),
            (Some((ba, _)), Some((bb, _))) => self.pdom.dominates(bb, ba),
            _ => false,
        }
    }
}

/// A natural loop: header plus the blocks that reach a back edge without
/// passing through the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loop {
    pub header: BlockId,
    pub latches: Vec<BlockId>,
    pub body: BTreeSet<BlockId>,
}

impl Loop {
    pub fn contains(&self, b: BlockId) -> bool {
        self.body.contains(&b)
    }

    /// Blocks outside the loop that branch to the header.
    pub fn entries(&self, cfg: &Cfg) -> Vec<BlockId> {
        cfg.preds[self.header.idx()].iter().copied().filter(|p| !self.contains(*p)).collect()
    }

    /// Loop blocks with an edge leaving the loop, or ending in `ret`.
    pub fn exiting_blocks(&self, f: &Function, cfg: &Cfg) -> Vec<BlockId> {
        self.body
            .iter()
            .copied()
            .filter(|&b| {
                cfg.succs[b.idx()].iter().any(|s| !self.contains(*s))
                    || matches!(f.terminator(b).kind, InstKind::Ret { .. })
            })
            .collect()
    }
}

/// Natural loops, one per header, in header block order.
pub fn natural_loops(cfg: &Cfg, dom: &DomTree) -> Vec<Loop> {
    let mut loops: Vec<Loop> = Vec::new();
    for &b in &cfg.rpo {
        for &s in &cfg.succs[b.idx()] {
            if !dom.dominates(s, b) {
                continue;
            }
            let idx = match loops.iter().position(|l| l.header == s) {
                Some(i) => i,
                None => {
                    loops.push(Loop { header: s, latches: Vec::new(), body: BTreeSet::from([s]) });
                    loops.len() - 1
                }
            };
            let l = &mut loops[idx];
            l.latches.push(b);
            let mut work = vec![b];
            while let Some(x) = work.pop() {
                if l.body.insert(x) {
                    work.extend(cfg.preds[x.idx()].iter().copied().filter(|p| cfg.reachable[p.idx()]));
                }
            }
        }
    }
    loops.sort_by_key(|l| l.header);
    loops
}
