//! Canonical text form. `parse(print(p))` reproduces `p` up to value ids.

use super::*;
use std::fmt::Write;

fn operand(f: &Function, o: Operand) -> String {
    match o {
        Operand::Val(v) => format!("%{}", f.value(v).name),
        Operand::Imm(n) => n.to_string(),
        Operand::Null => "null".into(),
    }
}

fn offset(f: &Function, off: &Offset) -> String {
    let mut parts = Vec::new();
    if off.constant != 0 || off.terms.is_empty() {
        parts.push(off.constant.to_string());
    }
    for &(v, s) in &off.terms {
        parts.push(if s == 1 { format!("%{}", f.value(v).name) } else { format!("%{}*{}", f.value(v).name, s) });
    }
    parts.join(" + ")
}

fn mem_ty(t: MemTy) -> String {
    match t {
        MemTy::Int(n) => n.to_string(),
        MemTy::Ptr => "ptr".into(),
    }
}

fn ty_opt(t: Option<Ty>) -> String {
    t.map(|t| format!(" -> {t}")).unwrap_or_default()
}

pub fn print_inst(p: &Program, f: &Function, inst: &Inst) -> String {
    let o = |x: Operand| operand(f, x);
    let label = |b: BlockId| format!("^{}", f.block(b).label);
    let list = |xs: &[Operand]| xs.iter().map(|&x| o(x)).collect::<Vec<_>>().join(", ");
    let body = match &inst.kind {
        InstKind::Alloc { size } => format!("alloc {}", o(*size)),
        InstKind::Alloca { size, escaped } => {
            format!("alloca {size}{}", if *escaped { " escaped" } else { "" })
        }
        InstKind::AllocaDyn { size } => format!("allocadyn {}", o(*size)),
        InstKind::Global { global } => format!("global @{}", p.globals[*global].name),
        InstKind::Gep { base, offset: off } => format!("gep {}, {}", o(*base), offset(f, off)),
        InstKind::Cast { value } => format!("cast {}", o(*value)),
        InstKind::PtrToInt { value } => format!("ptrtoint {}", o(*value)),
        InstKind::Load { ptr, ty } => format!("load {}, {}", mem_ty(*ty), o(*ptr)),
        InstKind::Store { ptr, ty, value } => format!("store {}, {}, {}", mem_ty(*ty), o(*ptr), o(*value)),
        InstKind::Free { ptr } => format!("free {}", o(*ptr)),
        InstKind::Bin { op, a, b } => format!("{} {}, {}", op.name(), o(*a), o(*b)),
        InstKind::Cmp { pred, a, b } => format!("cmp {} {}, {}", pred.name(), o(*a), o(*b)),
        InstKind::PCmp { pred, a, b } => format!("pcmp {} {}, {}", pred.name(), o(*a), o(*b)),
        InstKind::PSub { a, b } => format!("psub {}, {}", o(*a), o(*b)),
        InstKind::Copy { value, .. } => format!("const {}", o(*value)),
        InstKind::Phi { ty, incoming } => {
            let inc: Vec<String> = incoming.iter().map(|&(v, b)| format!("[{}, {}]", o(v), label(b))).collect();
            format!("phi {ty} {}", inc.join(", "))
        }
        InstKind::Select { ty, cond, a, b } => format!("select {ty} {}, {}, {}", o(*cond), o(*a), o(*b)),
        InstKind::Call { func, args } => format!("call @{}({})", p.func(*func).name, list(args)),
        InstKind::Extern { ext, args } => format!("call @{}({})", p.externs[*ext].name, list(args)),
        InstKind::Mask { value } => format!("mask {}", o(*value)),
        InstKind::CheckAccess { site, ksa, ptr, size } => {
            format!("check.access {site} {}, {}, {size}", o(*ksa), o(*ptr))
        }
        InstKind::CheckEscape { site, ksa, ptr } => format!("check.escape {site} {}, {}", o(*ksa), o(*ptr)),
        InstKind::CheckRange { site, ksa, lo, hi } => {
            format!("check.range {site} {}, {}, {}", o(*ksa), o(*lo), o(*hi))
        }
        InstKind::Br { target } => format!("br {}", label(*target)),
        InstKind::CondBr { cond, then_, else_ } => {
            format!("condbr {}, {}, {}", o(*cond), label(*then_), label(*else_))
        }
        InstKind::Ret { value: None } => "ret".into(),
        InstKind::Ret { value: Some(v) } => format!("ret {}", o(*v)),
    };
    match inst.result {
        Some(v) => format!("%{} = {body}", f.value(v).name),
        None => body,
    }
}

fn contract(k: &Contract) -> String {
    let mut parts = Vec::new();
    if let Some(i) = k.fresh {
        parts.push(format!("fresh({i})"));
    }
    parts.extend(k.writes.iter().map(|(p, l)| format!("writes({p},{l})")));
    parts.extend(k.reads.iter().map(|(p, l)| format!("reads({p},{l})")));
    if parts.is_empty() {
        parts.push("pure".into());
    }
    parts.join(" ")
}

pub fn print(p: &Program) -> String {
    let mut out = String::new();
    for g in &p.globals {
        writeln!(out, "global @{} size={} escapes={}", g.name, g.size, g.escapes).unwrap();
    }
    for e in &p.externs {
        let params: Vec<String> = e.params.iter().map(|t| t.to_string()).collect();
        writeln!(out, "extern @{}({}){} {}", e.name, params.join(", "), ty_opt(e.ret), contract(&e.contract)).unwrap();
    }
    for f in &p.functions {
        if !out.is_empty() {
            out.push('\n');
        }
        let params: Vec<String> =
            f.params.iter().map(|&v| format!("%{}: {}", f.value(v).name, f.value(v).ty)).collect();
        writeln!(out, "fn @{}({}){} {{", f.name, params.join(", "), ty_opt(f.ret)).unwrap();
        for b in &f.blocks {
            writeln!(out, "^{}:", b.label).unwrap();
            for &i in &b.insts {
                writeln!(out, "  {}", print_inst(p, f, f.inst(i))).unwrap();
            }
        }
        out.push_str("}\n");
    }
    out
}
