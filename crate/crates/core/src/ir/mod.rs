//! Miniature SSA IR.
//!
//! Values, instructions and blocks live in per-function arenas and are
//! referred to by index. Instruction order is given by each block's
//! `insts` list; the last entry of every block is its terminator.

pub mod cfg;
mod parse;
mod print;
mod validate;

pub use parse::{parse, parse_unvalidated, ParseError};
pub use print::{print, print_inst};
pub use validate::{validate, Diagnostic};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ValueId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FuncId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteId(pub u32);

impl ValueId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}
impl InstId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}
impl BlockId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}
impl FuncId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}
impl SiteId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ty {
    Int,
    Ptr,
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ty::Int => "int",
            Ty::Ptr => "ptr",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Val(ValueId),
    Imm(i64),
    Null,
}

impl Operand {
    pub fn value(self) -> Option<ValueId> {
        match self {
            Operand::Val(v) => Some(v),
            _ => None,
        }
    }
}

/// Width of a load or store. Integer loads sign-extend to 64 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemTy {
    Int(u8),
    Ptr,
}

impl MemTy {
    pub fn size(self) -> u64 {
        match self {
            MemTy::Int(n) => n as u64,
            MemTy::Ptr => 8,
        }
    }

    pub fn ty(self) -> Ty {
        match self {
            MemTy::Int(_) => Ty::Int,
            MemTy::Ptr => Ty::Ptr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 8] =
        [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::And, BinOp::Or, BinOp::Xor, BinOp::Shl, BinOp::Shr];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }

    pub fn eval(self, a: i64, b: i64) -> i64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl(b as u32 & 63),
            BinOp::Shr => a.wrapping_shr(b as u32 & 63),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pred {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Pred {
    pub const ALL: [Pred; 6] = [Pred::Eq, Pred::Ne, Pred::Lt, Pred::Le, Pred::Gt, Pred::Ge];

    pub fn name(self) -> &'static str {
        match self {
            Pred::Eq => "eq",
            Pred::Ne => "ne",
            Pred::Lt => "lt",
            Pred::Le => "le",
            Pred::Gt => "gt",
            Pred::Ge => "ge",
        }
    }

    pub fn eval<T: Ord>(self, a: T, b: T) -> bool {
        match self {
            Pred::Eq => a == b,
            Pred::Ne => a != b,
            Pred::Lt => a < b,
            Pred::Le => a <= b,
            Pred::Gt => a > b,
            Pred::Ge => a >= b,
        }
    }
}

/// Byte offset of a gep: `constant + Σ index * scale`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Offset {
    pub constant: i64,
    pub terms: Vec<(ValueId, i64)>,
}

impl Offset {
    pub fn constant(c: i64) -> Self {
        Offset { constant: c, terms: Vec::new() }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0 && self.terms.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstKind {
    Alloc {
        size: Operand,
    },
    /// Fixed-size stack object. `escaped` objects carry a tag from creation;
    /// the others stay untagged and are checked against their static size.
    Alloca {
        size: u64,
        escaped: bool,
    },
    AllocaDyn {
        size: Operand,
    },
    Global {
        global: usize,
    },
    Gep {
        base: Operand,
        offset: Offset,
    },
    Cast {
        value: Operand,
    },
    PtrToInt {
        value: Operand,
    },
    Load {
        ptr: Operand,
        ty: MemTy,
    },
    Store {
        ptr: Operand,
        ty: MemTy,
        value: Operand,
    },
    Free {
        ptr: Operand,
    },
    Bin {
        op: BinOp,
        a: Operand,
        b: Operand,
    },
    Cmp {
        pred: Pred,
        a: Operand,
        b: Operand,
    },
    PCmp {
        pred: Pred,
        a: Operand,
        b: Operand,
    },
    PSub {
        a: Operand,
        b: Operand,
    },
    Copy {
        ty: Ty,
        value: Operand,
    },
    Phi {
        ty: Ty,
        incoming: Vec<(Operand, BlockId)>,
    },
    Select {
        ty: Ty,
        cond: Operand,
        a: Operand,
        b: Operand,
    },
    Call {
        func: FuncId,
        args: Vec<Operand>,
    },
    Extern {
        ext: usize,
        args: Vec<Operand>,
    },
    Mask {
        value: Operand,
    },
    CheckAccess {
        site: SiteId,
        ksa: Operand,
        ptr: Operand,
        size: u64,
    },
    CheckEscape {
        site: SiteId,
        ksa: Operand,
        ptr: Operand,
    },
    CheckRange {
        site: SiteId,
        ksa: Operand,
        lo: Operand,
        hi: Operand,
    },
    Br {
        target: BlockId,
    },
    CondBr {
        cond: Operand,
        then_: BlockId,
        else_: BlockId,
    },
    Ret {
        value: Option<Operand>,
    },
}

impl InstKind {
    pub fn is_terminator(&self) -> bool {
        matches!(self, InstKind::Br { .. } | InstKind::CondBr { .. } | InstKind::Ret { .. })
    }

    pub fn successors(&self) -> Vec<BlockId> {
        match *self {
            InstKind::Br { target } => vec![target],
            InstKind::CondBr { then_, else_, .. } if then_ == else_ => vec![then_],
            InstKind::CondBr { then_, else_, .. } => vec![then_, else_],
            _ => Vec::new(),
        }
    }

    /// Every operand, in a fixed order.
    pub fn operands(&self) -> Vec<Operand> {
        use InstKind::*;
        match self {
            Alloc { size } | AllocaDyn { size } => vec![*size],
            Alloca { .. } | Global { .. } | Br { .. } => vec![],
            Gep { base, offset } => {
                let mut v = vec![*base];
                v.extend(offset.terms.iter().map(|&(t, _)| Operand::Val(t)));
                v
            }
            Cast { value } | PtrToInt { value } | Copy { value, .. } | Mask { value } => vec![*value],
            Load { ptr, .. } | Free { ptr } => vec![*ptr],
            Store { ptr, value, .. } => vec![*ptr, *value],
            Bin { a, b, .. } | Cmp { a, b, .. } | PCmp { a, b, .. } | PSub { a, b } => vec![*a, *b],
            Phi { incoming, .. } => incoming.iter().map(|&(o, _)| o).collect(),
            Select { cond, a, b, .. } => vec![*cond, *a, *b],
            Call { args, .. } | Extern { args, .. } => args.clone(),
            CheckAccess { ksa, ptr, .. } | CheckEscape { ksa, ptr, .. } => vec![*ksa, *ptr],
            CheckRange { ksa, lo, hi, .. } => vec![*ksa, *lo, *hi],
            CondBr { cond, .. } => vec![*cond],
            Ret { value } => value.iter().copied().collect(),
        }
    }

    /// Rewrites every operand through `f`.
    pub fn map_operands(&mut self, mut f: impl FnMut(Operand) -> Operand) {
        use InstKind::*;
        let mut term = |v: &mut ValueId| {
            if let Operand::Val(n) = f(Operand::Val(*v)) {
                *v = n;
            }
        };
        match self {
            Gep { base, offset } => {
                for (t, _) in &mut offset.terms {
                    term(t);
                }
                *base = f(*base);
            }
            Alloc { size } | AllocaDyn { size } => *size = f(*size),
            Alloca { .. } | Global { .. } | Br { .. } => {}
            Cast { value } | PtrToInt { value } | Copy { value, .. } | Mask { value } => *value = f(*value),
            Load { ptr, .. } | Free { ptr } => *ptr = f(*ptr),
            Store { ptr, value, .. } => {
                *ptr = f(*ptr);
                *value = f(*value);
            }
            Bin { a, b, .. } | Cmp { a, b, .. } | PCmp { a, b, .. } | PSub { a, b } => {
                *a = f(*a);
                *b = f(*b);
            }
            Phi { incoming, .. } => {
                for (o, _) in incoming {
                    *o = f(*o);
                }
            }
            Select { cond, a, b, .. } => {
                *cond = f(*cond);
                *a = f(*a);
                *b = f(*b);
            }
            Call { args, .. } | Extern { args, .. } => {
                for a in args {
                    *a = f(*a);
                }
            }
            CheckAccess { ksa, ptr, .. } | CheckEscape { ksa, ptr, .. } => {
                *ksa = f(*ksa);
                *ptr = f(*ptr);
            }
            CheckRange { ksa, lo, hi, .. } => {
                *ksa = f(*ksa);
                *lo = f(*lo);
                *hi = f(*hi);
            }
            CondBr { cond, .. } => *cond = f(*cond),
            Ret { value } => {
                if let Some(v) = value {
                    *v = f(*v);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inst {
    pub result: Option<ValueId>,
    pub kind: InstKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueDef {
    Param(u32),
    Inst(InstId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Value {
    pub name: String,
    pub ty: Ty,
    pub def: ValueDef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    pub insts: Vec<InstId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<ValueId>,
    pub ret: Option<Ty>,
    pub values: Vec<Value>,
    pub insts: Vec<Inst>,
    /// `blocks[0]` is the entry block.
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn new(name: impl Into<String>, ret: Option<Ty>) -> Self {
        Function {
            name: name.into(),
            params: Vec::new(),
            ret,
            values: Vec::new(),
            insts: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn value(&self, v: ValueId) -> &Value {
        &self.values[v.idx()]
    }

    pub fn inst(&self, i: InstId) -> &Inst {
        &self.insts[i.idx()]
    }

    pub fn inst_mut(&mut self, i: InstId) -> &mut Inst {
        &mut self.insts[i.idx()]
    }

    pub fn block(&self, b: BlockId) -> &Block {
        &self.blocks[b.idx()]
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.blocks.len() as u32).map(BlockId)
    }

    /// Instruction defining `v`, or `None` for parameters.
    pub fn def_inst(&self, v: ValueId) -> Option<&Inst> {
        match self.values[v.idx()].def {
            ValueDef::Inst(i) => Some(self.inst(i)),
            ValueDef::Param(_) => None,
        }
    }

    pub fn operand_ty(&self, o: Operand) -> Ty {
        match o {
            Operand::Val(v) => self.value(v).ty,
            Operand::Imm(_) => Ty::Int,
            Operand::Null => Ty::Ptr,
        }
    }

    pub fn terminator(&self, b: BlockId) -> &Inst {
        let id = *self.blocks[b.idx()].insts.last().expect("block has a terminator");
        self.inst(id)
    }

    pub fn successors(&self, b: BlockId) -> Vec<BlockId> {
        self.block(b).insts.last().map(|&i| self.inst(i).kind.successors()).unwrap_or_default()
    }

    /// A name not yet used in this function, derived from `hint`.
    pub fn fresh_name(&self, hint: &str) -> String {
        let taken: HashSet<&str> = self.values.iter().map(|v| v.name.as_str()).collect();
        if !taken.contains(hint) {
            return hint.to_string();
        }
        (1..).map(|k| format!("{hint}.{k}")).find(|n| !taken.contains(n.as_str())).expect("unbounded")
    }

    pub fn add_param(&mut self, name: &str, ty: Ty) -> ValueId {
        let id = ValueId(self.values.len() as u32);
        let name = self.fresh_name(name);
        self.values.push(Value { name, ty, def: ValueDef::Param(self.params.len() as u32) });
        self.params.push(id);
        id
    }

    pub fn add_block(&mut self, label: impl Into<String>) -> BlockId {
        self.blocks.push(Block { label: label.into(), insts: Vec::new() });
        BlockId(self.blocks.len() as u32 - 1)
    }

    /// Creates an instruction without placing it in a block. A result value
    /// is created when `result` is given.
    pub fn create_inst(&mut self, kind: InstKind, result: Option<(&str, Ty)>) -> (InstId, Option<ValueId>) {
        let id = InstId(self.insts.len() as u32);
        let value = result.map(|(hint, ty)| {
            let name = self.fresh_name(hint);
            self.values.push(Value { name, ty, def: ValueDef::Inst(id) });
            ValueId(self.values.len() as u32 - 1)
        });
        self.insts.push(Inst { result: value, kind });
        (id, value)
    }

    /// Appends an instruction to `b`.
    pub fn push(&mut self, b: BlockId, kind: InstKind, result: Option<(&str, Ty)>) -> Option<ValueId> {
        let (id, v) = self.create_inst(kind, result);
        self.blocks[b.idx()].insts.push(id);
        v
    }

    /// `(block, index)` of every placed instruction.
    pub fn positions(&self) -> Vec<Option<(BlockId, usize)>> {
        let mut pos = vec![None; self.insts.len()];
        for b in self.block_ids() {
            for (i, &id) in self.block(b).insts.iter().enumerate() {
                pos[id.idx()] = Some((b, i));
            }
        }
        pos
    }

    /// Placed instructions in block order.
    pub fn placed(&self) -> impl Iterator<Item = (BlockId, InstId)> + '_ {
        self.block_ids().flat_map(move |b| self.block(b).insts.iter().map(move |&i| (b, i)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalDecl {
    pub name: String,
    pub size: u64,
    pub escapes: bool,
}

/// What an extern does with its pointer arguments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Contract {
    /// Result is a fresh allocation whose size is the given argument.
    pub fresh: Option<usize>,
    /// `(pointer arg, length arg)` pairs written through.
    pub writes: Vec<(usize, usize)>,
    /// `(pointer arg, length arg)` pairs read through.
    pub reads: Vec<(usize, usize)>,
}

impl Contract {
    pub fn is_pure(&self) -> bool {
        self.fresh.is_none() && self.writes.is_empty() && self.reads.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternDecl {
    pub name: String,
    pub params: Vec<Ty>,
    pub ret: Option<Ty>,
    pub contract: Contract,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub globals: Vec<GlobalDecl>,
    pub externs: Vec<ExternDecl>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn func(&self, f: FuncId) -> &Function {
        &self.functions[f.idx()]
    }

    pub fn func_by_name(&self, name: &str) -> Option<FuncId> {
        self.functions.iter().position(|f| f.name == name).map(|i| FuncId(i as u32))
    }

    pub fn entry(&self) -> Option<FuncId> {
        self.func_by_name("main")
    }
}

/// Where a pointer value ultimately comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AllocSite,
    Param,
    LoadedFromMemory,
    Global,
    CallResult,
    /// Phi or select.
    Merge,
    Derived(ValueId),
}

/// Provenance of every pointer-typed value; `None` for integers.
pub fn provenance(f: &Function) -> Vec<Option<Provenance>> {
    f.values
        .iter()
        .map(|v| {
            if v.ty != Ty::Ptr {
                return None;
            }
            Some(match v.def {
                ValueDef::Param(_) => Provenance::Param,
                ValueDef::Inst(i) => match &f.inst(i).kind {
                    InstKind::Alloc { .. } | InstKind::Alloca { .. } | InstKind::AllocaDyn { .. } => {
                        Provenance::AllocSite
                    }
                    InstKind::Global { .. } => Provenance::Global,
                    InstKind::Load { .. } => Provenance::LoadedFromMemory,
                    InstKind::Call { .. } | InstKind::Extern { .. } => Provenance::CallResult,
                    InstKind::Gep { base: Operand::Val(b), .. }
                    | InstKind::Cast { value: Operand::Val(b) }
                    | InstKind::Mask { value: Operand::Val(b) }
                    | InstKind::Copy { value: Operand::Val(b), .. } => Provenance::Derived(*b),
                    _ => Provenance::Merge,
                },
            })
        })
        .collect()
}

/// Follows `Derived` links to the non-derived origin.
pub fn provenance_root(prov: &[Option<Provenance>], mut v: ValueId) -> ValueId {
    while let Some(Provenance::Derived(b)) = prov[v.idx()] {
        v = b;
    }
    v
}
