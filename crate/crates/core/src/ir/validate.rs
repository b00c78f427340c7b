//! Structural, type and SSA checks.

use super::cfg::{Cfg, DomTree};
use super::*;
use std::collections::HashSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub function: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.function {
            Some(name) => write!(f, "@{name}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

struct Ctx<'a> {
    p: &'a Program,
    f: &'a Function,
    out: &'a mut Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn report(&mut self, msg: String) {
        self.out.push(Diagnostic { function: Some(self.f.name.clone()), message: msg });
    }

    fn name(&self, o: Operand) -> String {
        match o {
            Operand::Val(v) => format!("%{}", self.f.value(v).name),
            Operand::Imm(n) => n.to_string(),
            Operand::Null => "null".into(),
        }
    }

    fn expect(&mut self, o: Operand, ty: Ty, what: &str) {
        let got = self.f.operand_ty(o);
        if got != ty {
            let msg = format!("{what}: {} is {got}, expected {ty}", self.name(o));
            self.report(msg);
        }
    }

    fn expect_value(&mut self, o: Operand, ty: Ty, what: &str) {
        if matches!(o, Operand::Null) {
            self.report(format!("{what}: null is not allowed here"));
        } else {
            self.expect(o, ty, what);
        }
    }

    fn args(&mut self, args: &[Operand], params: &[Ty], callee: &str) {
        if args.len() != params.len() {
            self.report(format!("call to @{callee} passes {} arguments, expected {}", args.len(), params.len()));
            return;
        }
        for (i, (&a, &t)) in args.iter().zip(params).enumerate() {
            self.expect(a, t, &format!("argument {i} of @{callee}"));
        }
    }

    fn types(&mut self, inst: &Inst) {
        use InstKind::*;
        let what = print::print_inst(self.p, self.f, inst);
        match &inst.kind {
            Alloc { size } | AllocaDyn { size } => self.expect(*size, Ty::Int, &what),
            Alloca { .. } | Br { .. } => {}
            Global { global } => {
                if *global >= self.p.globals.len() {
                    self.report(format!("{what}: unknown global"));
                }
            }
            Gep { base, offset } => {
                self.expect_value(*base, Ty::Ptr, &what);
                for &(t, _) in &offset.terms {
                    self.expect(Operand::Val(t), Ty::Int, &what);
                }
            }
            Cast { value } | PtrToInt { value } | Mask { value } => self.expect(*value, Ty::Ptr, &what),
            Load { ptr, .. } | Free { ptr } => self.expect(*ptr, Ty::Ptr, &what),
            Store { ptr, ty, value } => {
                self.expect(*ptr, Ty::Ptr, &what);
                self.expect(*value, ty.ty(), &what);
            }
            Bin { a, b, .. } | Cmp { a, b, .. } => {
                self.expect(*a, Ty::Int, &what);
                self.expect(*b, Ty::Int, &what);
            }
            PCmp { a, b, .. } | PSub { a, b } => {
                self.expect(*a, Ty::Ptr, &what);
                self.expect(*b, Ty::Ptr, &what);
            }
            Copy { ty, value } => self.expect(*value, *ty, &what),
            Phi { ty, incoming } => {
                for &(v, _) in incoming {
                    self.expect(v, *ty, &what);
                }
            }
            Select { ty, cond, a, b } => {
                self.expect(*cond, Ty::Int, &what);
                self.expect(*a, *ty, &what);
                self.expect(*b, *ty, &what);
            }
            Call { func, args } => {
                let callee = self.p.func(*func);
                let params: Vec<Ty> = callee.params.iter().map(|&v| callee.value(v).ty).collect();
                self.args(args, &params, &callee.name);
            }
            Extern { ext, args } => {
                let e = &self.p.externs[*ext];
                self.args(args, &e.params, &e.name);
            }
            CheckAccess { ksa, ptr, .. } | CheckEscape { ksa, ptr, .. } => {
                self.expect(*ksa, Ty::Ptr, &what);
                self.expect(*ptr, Ty::Ptr, &what);
            }
            CheckRange { ksa, lo, hi, .. } => {
                self.expect(*ksa, Ty::Ptr, &what);
                self.expect(*lo, Ty::Ptr, &what);
                self.expect(*hi, Ty::Ptr, &what);
            }
            CondBr { cond, .. } => self.expect(*cond, Ty::Int, &what),
            Ret { value } => match (value, self.f.ret) {
                (None, None) => {}
                (Some(v), Some(t)) => self.expect(*v, t, &what),
                (None, Some(t)) => self.report(format!("{what}: function returns {t}")),
                (Some(_), None) => self.report(format!("{what}: function returns nothing")),
            },
        }
    }
}

fn check_function(p: &Program, f: &Function, out: &mut Vec<Diagnostic>) {
    let mut cx = Ctx { p, f, out };
    if f.blocks.is_empty() {
        cx.report("function has no blocks".into());
        return;
    }
    let mut labels = HashSet::new();
    for b in &f.blocks {
        if !labels.insert(b.label.as_str()) {
            cx.report(format!("block ^{} defined twice", b.label));
        }
        match b.insts.last() {
            Some(&i) if f.inst(i).kind.is_terminator() => {}
            _ => cx.report(format!("block ^{} does not end in a terminator", b.label)),
        }
        for &i in &b.insts[..b.insts.len().saturating_sub(1)] {
            if f.inst(i).kind.is_terminator() {
                cx.report(format!("block ^{} has a terminator before its end", b.label));
            }
        }
        let mut seen_non_phi = false;
        for &i in &b.insts {
            if matches!(f.inst(i).kind, InstKind::Phi { .. }) {
                if seen_non_phi {
                    cx.report(format!("phi in ^{} follows a non-phi instruction", b.label));
                }
            } else {
                seen_non_phi = true;
            }
        }
    }
    let mut names = HashSet::new();
    for v in &f.values {
        if !names.insert(v.name.as_str()) {
            cx.report(format!("value %{} defined twice", v.name));
        }
    }
    let cfg = Cfg::new(f);
    if !cfg.preds[0].is_empty() {
        cx.report(format!("entry block ^{} has predecessors", f.blocks[0].label));
    }
    let dom = DomTree::dominators(f, &cfg);
    let pos = f.positions();

    // Every value's defining instruction must be placed exactly once.
    let mut placed = vec![0u32; f.insts.len()];
    for (_, i) in f.placed() {
        placed[i.idx()] += 1;
    }
    for (vi, v) in f.values.iter().enumerate() {
        if let ValueDef::Inst(i) = v.def {
            if placed[i.idx()] != 1 || f.inst(i).result != Some(ValueId(vi as u32)) {
                cx.report(format!("%{} has no unique defining instruction", v.name));
            }
        }
    }

    let defined_before = |v: ValueId, at_block: BlockId, at_index: usize| -> bool {
        match f.value(v).def {
            ValueDef::Param(_) => true,
            ValueDef::Inst(d) => match pos[d.idx()] {
                Some((db, di)) if db == at_block => di < at_index,
                Some((db, _)) => dom.dominates(db, at_block),
                None => false,
            },
        }
    };

    for b in f.block_ids() {
        for (idx, &i) in f.block(b).insts.iter().enumerate() {
            let inst = f.inst(i);
            cx.types(inst);
            if !cfg.reachable[b.idx()] {
                continue;
            }
            match &inst.kind {
                InstKind::Phi { incoming, .. } => {
                    let preds = &cfg.preds[b.idx()];
                    let froms: Vec<BlockId> = incoming.iter().map(|x| x.1).collect();
                    let unique: HashSet<_> = froms.iter().collect();
                    if froms.len() != preds.len()
                        || unique.len() != froms.len()
                        || !preds.iter().all(|p| unique.contains(p))
                    {
                        cx.report(format!(
                            "phi %{} in ^{} has {} incoming edges but the block has {} predecessors",
                            inst.result.map(|v| f.value(v).name.clone()).unwrap_or_default(),
                            f.block(b).label,
                            froms.len(),
                            preds.len()
                        ));
                    }
                    for &(o, from) in incoming {
                        if let Operand::Val(v) = o {
                            let end = f.block(from).insts.len();
                            if cfg.reachable[from.idx()] && !defined_before(v, from, end) {
                                cx.report(format!(
                                    "%{} does not dominate the edge from ^{}",
                                    f.value(v).name,
                                    f.block(from).label
                                ));
                            }
                        }
                    }
                }
                kind => {
                    for o in kind.operands() {
                        if let Operand::Val(v) = o {
                            if !defined_before(v, b, idx) {
                                cx.report(format!("use of %{} is not dominated by its definition", f.value(v).name));
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn validate(p: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut report = |m: String| out.push(Diagnostic { function: None, message: m });
    let mut names = HashSet::new();
    for f in &p.functions {
        if !names.insert(f.name.as_str()) {
            report(format!("function @{} defined twice", f.name));
        }
    }
    for e in &p.externs {
        if !names.insert(e.name.as_str()) {
            report(format!("@{} declared twice", e.name));
        }
        let k = &e.contract;
        let ptr_arg = |i: usize| e.params.get(i) == Some(&Ty::Ptr);
        let int_arg = |i: usize| e.params.get(i) == Some(&Ty::Int);
        for &(pi, li) in k.writes.iter().chain(&k.reads) {
            if !ptr_arg(pi) || !int_arg(li) {
                report(format!("extern @{}: buffer clause ({pi},{li}) needs a ptr and an int argument", e.name));
            }
        }
        if let Some(i) = k.fresh {
            if !int_arg(i) || e.ret != Some(Ty::Ptr) {
                report(format!("extern @{}: fresh({i}) needs an int argument and a ptr result", e.name));
            }
        }
    }
    let mut gnames = HashSet::new();
    for g in &p.globals {
        if !gnames.insert(g.name.as_str()) {
            report(format!("global @{} defined twice", g.name));
        }
    }
    match p.functions.iter().filter(|f| f.name == "main").count() {
        1 => {}
        0 => report("no entry function @main".into()),
        _ => {}
    }
    for f in &p.functions {
        check_function(p, f, &mut out);
    }
    out
}
