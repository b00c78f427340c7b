//! Line-oriented parser for the `.pir` text format.
//!
//! ```text
//! global @table size=64 escapes=true
//! extern @memmove(ptr, ptr, int) writes(0,2) reads(1,2)
//! fn @main(%n: int) -> int {
//! ^entry:
//!   %a = alloc 32
//!   %p = gep %a, 8 + %n*4
//!   %v = load 4, %p
//!   ret %v
//! }
//! ```
//!
//! Comments start with `;`. Values may be used before their definition
//! (needed by phis); every use must be defined somewhere in the function.

use super::*;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("invalid program: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Local(String),
    Global(String),
    Label(String),
    Site(u32),
    Int(i64),
    Ident(String),
    Punct(char),
    Arrow,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tok::Local(s) => write!(f, "%{s}"),
            Tok::Global(s) => write!(f, "@{s}"),
            Tok::Label(s) => write!(f, "^{s}"),
            Tok::Site(n) => write!(f, "#{n}"),
            Tok::Int(n) => write!(f, "{n}"),
            Tok::Ident(s) => f.write_str(s),
            Tok::Punct(c) => write!(f, "{c}"),
            Tok::Arrow => f.write_str("->"),
        }
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn lex(line: &str, lineno: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let err = |col: usize, msg: String| ParseError::Syntax { line: lineno, col, msg };
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c == ';' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let take_name = |i: &mut usize| {
            let start = *i;
            while *i < chars.len() && is_name_char(chars[*i]) {
                *i += 1;
            }
            chars[start..*i].iter().collect::<String>()
        };
        match c {
            '%' | '@' | '^' => {
                i += 1;
                let name = take_name(&mut i);
                if name.is_empty() {
                    return Err(err(col, format!("expected a name after '{c}'")));
                }
                out.push((
                    match c {
                        '%' => Tok::Local(name),
                        '@' => Tok::Global(name),
                        _ => Tok::Label(name),
                    },
                    col,
                ));
            }
            '#' => {
                i += 1;
                let digits = take_name(&mut i);
                let n = digits.parse().map_err(|_| err(col, format!("bad site id '#{digits}'")))?;
                out.push((Tok::Site(n), col));
            }
            '-' if chars.get(i + 1) == Some(&'>') => {
                out.push((Tok::Arrow, col));
                i += 2;
            }
            '-' | '0'..='9' => {
                let start = i;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let (neg, body) = match text.strip_prefix('-') {
                    Some(b) => (true, b),
                    None => (false, text.as_str()),
                };
                let mag = if let Some(hex) = body.strip_prefix("0x") {
                    u64::from_str_radix(hex, 16).ok()
                } else {
                    body.parse::<u64>().ok()
                };
                let value = mag.and_then(|m| if neg { 0i64.checked_sub_unsigned(m) } else { Some(m as i64) });
                match value {
                    Some(v) => out.push((Tok::Int(v), col)),
                    None => return Err(err(col, format!("bad integer '{text}'"))),
                }
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let name = take_name(&mut i);
                out.push((Tok::Ident(name), col));
            }
            '=' | ',' | '(' | ')' | '[' | ']' | '{' | '}' | ':' | '+' | '*' => {
                out.push((Tok::Punct(c), col));
                i += 1;
            }
            _ => return Err(err(col, format!("unexpected character '{c}'"))),
        }
    }
    Ok(out)
}

/// Line number, source text and tokens with their columns.
type Line<'a> = (usize, &'a str, Vec<(Tok, usize)>);

struct Cursor<'a> {
    toks: &'a [(Tok, usize)],
    pos: usize,
    line: usize,
    eol_col: usize,
}

impl<'a> Cursor<'a> {
    fn new(toks: &'a [(Tok, usize)], line: usize, len: usize) -> Self {
        Cursor { toks, pos: 0, line, eol_col: len + 1 }
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.eol_col)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { line: self.line, col: self.col(), msg: msg.into() })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.0.clone());
        self.pos += 1;
        t
    }

    fn at_end(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn expect_end(&self) -> Result<(), ParseError> {
        match self.peek() {
            None => Ok(()),
            Some(t) => self.err(format!("unexpected '{t}' at end of line")),
        }
    }

    fn punct(&mut self, c: char) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Punct(p)) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => self.err(format!("expected '{c}', found '{t}'")),
            None => self.err(format!("expected '{c}'")),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Tok::Punct(p)) if *p == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            Some(t) => self.err(format!("expected a keyword, found '{t}'")),
            None => self.err("expected a keyword"),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.err(format!("expected '{kw}'")),
        }
    }

    fn int(&mut self) -> Result<i64, ParseError> {
        match self.peek() {
            Some(Tok::Int(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => self.err("expected an integer"),
        }
    }

    fn uint(&mut self) -> Result<u64, ParseError> {
        let n = self.int()?;
        if n < 0 {
            self.pos -= 1;
            return self.err("expected a non-negative integer");
        }
        Ok(n as u64)
    }

    fn global(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Global(s)) => Ok(s),
            _ => {
                self.pos -= 1;
                self.err("expected '@name'")
            }
        }
    }

    fn label(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Label(s)) => Ok(s),
            _ => {
                self.pos -= 1;
                self.err("expected '^label'")
            }
        }
    }

    fn site(&mut self) -> Result<SiteId, ParseError> {
        match self.next() {
            Some(Tok::Site(n)) => Ok(SiteId(n)),
            _ => {
                self.pos -= 1;
                self.err("expected '#site'")
            }
        }
    }

    fn ty(&mut self) -> Result<Ty, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == "int" => {
                self.pos += 1;
                Ok(Ty::Int)
            }
            Some(Tok::Ident(s)) if s == "ptr" => {
                self.pos += 1;
                Ok(Ty::Ptr)
            }
            _ => self.err("expected a type ('int' or 'ptr')"),
        }
    }
}

#[derive(Debug, Clone)]
struct Signature {
    ret: Option<Ty>,
}

/// Per-function name resolution. Uses may precede definitions.
struct FnBuilder {
    f: Function,
    names: HashMap<String, ValueId>,
    defined: Vec<bool>,
    first_use: Vec<(usize, usize)>,
    labels: HashMap<String, BlockId>,
    label_defined: Vec<bool>,
    label_use: Vec<(usize, usize)>,
}

impl FnBuilder {
    fn value_ref(&mut self, name: &str, line: usize, col: usize) -> ValueId {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let id = ValueId(self.f.values.len() as u32);
        // Placeholder; type and definition are filled in by `define`.
        self.f.values.push(Value { name: name.to_string(), ty: Ty::Int, def: ValueDef::Param(u32::MAX) });
        self.names.insert(name.to_string(), id);
        self.defined.push(false);
        self.first_use.push((line, col));
        id
    }

    fn define(&mut self, name: &str, ty: Ty, def: ValueDef, line: usize, col: usize) -> Result<ValueId, ParseError> {
        let id = self.value_ref(name, line, col);
        if self.defined[id.idx()] {
            return Err(ParseError::Syntax { line, col, msg: format!("%{name} is defined more than once") });
        }
        self.defined[id.idx()] = true;
        self.f.values[id.idx()].ty = ty;
        self.f.values[id.idx()].def = def;
        Ok(id)
    }

    fn block_ref(&mut self, name: &str, line: usize, col: usize) -> BlockId {
        if let Some(&b) = self.labels.get(name) {
            return b;
        }
        let b = self.f.add_block(name);
        self.labels.insert(name.to_string(), b);
        self.label_defined.push(false);
        self.label_use.push((line, col));
        b
    }
}

struct Globals {
    globals: HashMap<String, usize>,
    externs: HashMap<String, usize>,
    funcs: HashMap<String, usize>,
    sigs: Vec<Signature>,
    extern_sigs: Vec<Signature>,
}

fn operand(c: &mut Cursor, b: &mut FnBuilder) -> Result<Operand, ParseError> {
    let col = c.col();
    match c.next() {
        Some(Tok::Local(n)) => Ok(Operand::Val(b.value_ref(&n, c.line, col))),
        Some(Tok::Int(v)) => Ok(Operand::Imm(v)),
        Some(Tok::Ident(s)) if s == "null" => Ok(Operand::Null),
        _ => {
            c.pos -= 1;
            c.err("expected an operand (%value, integer or null)")
        }
    }
}

fn offset(c: &mut Cursor, b: &mut FnBuilder) -> Result<Offset, ParseError> {
    let mut off = Offset::default();
    loop {
        let col = c.col();
        match c.next() {
            Some(Tok::Int(v)) => {
                off.constant = off.constant.checked_add(v).map_or_else(|| c.err("offset overflows"), Ok)?;
            }
            Some(Tok::Local(n)) => {
                let v = b.value_ref(&n, c.line, col);
                let scale = if c.eat_punct('*') { c.int()? } else { 1 };
                off.terms.push((v, scale));
            }
            _ => {
                c.pos -= 1;
                return c.err("expected an offset term (integer or %index*scale)");
            }
        }
        if !c.eat_punct('+') {
            return Ok(off);
        }
    }
}

fn mem_ty(c: &mut Cursor) -> Result<MemTy, ParseError> {
    if matches!(c.peek(), Some(Tok::Ident(s)) if s == "ptr") {
        c.pos += 1;
        return Ok(MemTy::Ptr);
    }
    match c.int()? {
        n @ (1 | 2 | 4 | 8) => Ok(MemTy::Int(n as u8)),
        n => {
            c.pos -= 1;
            c.err(format!("access size must be 1, 2, 4, 8 or ptr, not {n}"))
        }
    }
}

fn pred(c: &mut Cursor) -> Result<Pred, ParseError> {
    let s = c.ident()?;
    match Pred::ALL.iter().find(|p| p.name() == s) {
        Some(&p) => Ok(p),
        None => {
            c.pos -= 1;
            c.err(format!("unknown predicate '{s}'"))
        }
    }
}

fn args(c: &mut Cursor, b: &mut FnBuilder) -> Result<Vec<Operand>, ParseError> {
    c.punct('(')?;
    let mut out = Vec::new();
    if c.eat_punct(')') {
        return Ok(out);
    }
    loop {
        out.push(operand(c, b)?);
        if c.eat_punct(')') {
            return Ok(out);
        }
        c.punct(',')?;
    }
}

/// Parses one instruction line (after the optional `%x =`).
fn instruction(
    c: &mut Cursor,
    b: &mut FnBuilder,
    g: &Globals,
    has_result: bool,
) -> Result<(InstKind, Option<Ty>), ParseError> {
    let op_col = c.col();
    let op = c.ident()?;
    let line = c.line;
    let kind_ty = match op.as_str() {
        "alloc" => (InstKind::Alloc { size: operand(c, b)? }, Some(Ty::Ptr)),
        "alloca" => {
            let size = c.uint()?;
            let escaped = if matches!(c.peek(), Some(Tok::Ident(s)) if s == "escaped") {
                c.pos += 1;
                true
            } else {
                false
            };
            (InstKind::Alloca { size, escaped }, Some(Ty::Ptr))
        }
        "allocadyn" => (InstKind::AllocaDyn { size: operand(c, b)? }, Some(Ty::Ptr)),
        "global" => {
            let name = c.global()?;
            match g.globals.get(&name) {
                Some(&global) => (InstKind::Global { global }, Some(Ty::Ptr)),
                None => {
                    c.pos -= 1;
                    return c.err(format!("unknown global @{name}"));
                }
            }
        }
        "gep" => {
            let base = operand(c, b)?;
            c.punct(',')?;
            (InstKind::Gep { base, offset: offset(c, b)? }, Some(Ty::Ptr))
        }
        "cast" => (InstKind::Cast { value: operand(c, b)? }, Some(Ty::Ptr)),
        "ptrtoint" => (InstKind::PtrToInt { value: operand(c, b)? }, Some(Ty::Int)),
        "mask" => (InstKind::Mask { value: operand(c, b)? }, Some(Ty::Ptr)),
        "load" => {
            let ty = mem_ty(c)?;
            c.punct(',')?;
            (InstKind::Load { ty, ptr: operand(c, b)? }, Some(ty.ty()))
        }
        "store" => {
            let ty = mem_ty(c)?;
            c.punct(',')?;
            let ptr = operand(c, b)?;
            c.punct(',')?;
            (InstKind::Store { ty, ptr, value: operand(c, b)? }, None)
        }
        "free" => (InstKind::Free { ptr: operand(c, b)? }, None),
        "cmp" | "pcmp" => {
            let p = pred(c)?;
            let a = operand(c, b)?;
            c.punct(',')?;
            let bb = operand(c, b)?;
            let kind =
                if op == "cmp" { InstKind::Cmp { pred: p, a, b: bb } } else { InstKind::PCmp { pred: p, a, b: bb } };
            (kind, Some(Ty::Int))
        }
        "psub" => {
            let a = operand(c, b)?;
            c.punct(',')?;
            (InstKind::PSub { a, b: operand(c, b)? }, Some(Ty::Int))
        }
        "const" => {
            let value = operand(c, b)?;
            let ty = match value {
                Operand::Imm(_) => Ty::Int,
                Operand::Null => Ty::Ptr,
                Operand::Val(_) => return c.err("const takes an integer or null"),
            };
            (InstKind::Copy { ty, value }, Some(ty))
        }
        "phi" => {
            let ty = c.ty()?;
            let mut incoming = Vec::new();
            loop {
                c.punct('[')?;
                let v = operand(c, b)?;
                c.punct(',')?;
                let col = c.col();
                let l = c.label()?;
                incoming.push((v, b.block_ref(&l, line, col)));
                c.punct(']')?;
                if !c.eat_punct(',') {
                    break;
                }
            }
            (InstKind::Phi { ty, incoming }, Some(ty))
        }
        "select" => {
            let ty = c.ty()?;
            let cond = operand(c, b)?;
            c.punct(',')?;
            let a = operand(c, b)?;
            c.punct(',')?;
            (InstKind::Select { ty, cond, a, b: operand(c, b)? }, Some(ty))
        }
        "call" => {
            let name = c.global()?;
            let a = args(c, b)?;
            if let Some(&fi) = g.funcs.get(&name) {
                (InstKind::Call { func: FuncId(fi as u32), args: a }, g.sigs[fi].ret)
            } else if let Some(&ei) = g.externs.get(&name) {
                (InstKind::Extern { ext: ei, args: a }, g.extern_sigs[ei].ret)
            } else {
                return Err(ParseError::Syntax { line, col: op_col, msg: format!("call to unknown function @{name}") });
            }
        }
        "check.access" => {
            let site = c.site()?;
            let ksa = operand(c, b)?;
            c.punct(',')?;
            let ptr = operand(c, b)?;
            c.punct(',')?;
            (InstKind::CheckAccess { site, ksa, ptr, size: c.uint()? }, None)
        }
        "check.escape" => {
            let site = c.site()?;
            let ksa = operand(c, b)?;
            c.punct(',')?;
            (InstKind::CheckEscape { site, ksa, ptr: operand(c, b)? }, None)
        }
        "check.range" => {
            let site = c.site()?;
            let ksa = operand(c, b)?;
            c.punct(',')?;
            let lo = operand(c, b)?;
            c.punct(',')?;
            (InstKind::CheckRange { site, ksa, lo, hi: operand(c, b)? }, None)
        }
        "br" => {
            let col = c.col();
            let l = c.label()?;
            (InstKind::Br { target: b.block_ref(&l, line, col) }, None)
        }
        "condbr" => {
            let cond = operand(c, b)?;
            c.punct(',')?;
            let col = c.col();
            let t = c.label()?;
            let then_ = b.block_ref(&t, line, col);
            c.punct(',')?;
            let col = c.col();
            let e = c.label()?;
            (InstKind::CondBr { cond, then_, else_: b.block_ref(&e, line, col) }, None)
        }
        "ret" => {
            let value = if c.at_end() { None } else { Some(operand(c, b)?) };
            (InstKind::Ret { value }, None)
        }
        other => {
            if let Some(&bop) = BinOp::ALL.iter().find(|o| o.name() == other) {
                let a = operand(c, b)?;
                c.punct(',')?;
                (InstKind::Bin { op: bop, a, b: operand(c, b)? }, Some(Ty::Int))
            } else {
                return Err(ParseError::Syntax { line, col: op_col, msg: format!("unknown instruction '{other}'") });
            }
        }
    };
    c.expect_end()?;
    match (has_result, kind_ty.1) {
        (true, None) => Err(ParseError::Syntax { line, col: op_col, msg: format!("'{op}' produces no value") }),
        (false, Some(_)) if !matches!(kind_ty.0, InstKind::Call { .. } | InstKind::Extern { .. }) => {
            Err(ParseError::Syntax { line, col: op_col, msg: format!("result of '{op}' must be named") })
        }
        _ => Ok(kind_ty),
    }
}

fn signature_params(c: &mut Cursor, named: bool) -> Result<Vec<(Option<String>, Ty)>, ParseError> {
    c.punct('(')?;
    let mut out = Vec::new();
    if c.eat_punct(')') {
        return Ok(out);
    }
    loop {
        if named {
            let name = match c.next() {
                Some(Tok::Local(n)) => n,
                _ => {
                    c.pos -= 1;
                    return c.err("expected '%name: type'");
                }
            };
            c.punct(':')?;
            out.push((Some(name), c.ty()?));
        } else {
            out.push((None, c.ty()?));
        }
        if c.eat_punct(')') {
            return Ok(out);
        }
        c.punct(',')?;
    }
}

fn ret_ty(c: &mut Cursor) -> Result<Option<Ty>, ParseError> {
    if matches!(c.peek(), Some(Tok::Arrow)) {
        c.pos += 1;
        Ok(Some(c.ty()?))
    } else {
        Ok(None)
    }
}

fn contract(c: &mut Cursor) -> Result<Contract, ParseError> {
    let mut k = Contract::default();
    while !c.at_end() {
        let word = c.ident()?;
        match word.as_str() {
            "pure" => {}
            "fresh" => {
                c.punct('(')?;
                k.fresh = Some(c.uint()? as usize);
                c.punct(')')?;
            }
            "writes" | "reads" => {
                c.punct('(')?;
                let p = c.uint()? as usize;
                c.punct(',')?;
                let l = c.uint()? as usize;
                c.punct(')')?;
                if word == "writes" {
                    k.writes.push((p, l));
                } else {
                    k.reads.push((p, l));
                }
            }
            other => {
                c.pos -= 1;
                return c.err(format!("unknown contract clause '{other}'"));
            }
        }
    }
    Ok(k)
}

/// Parses without running validation.
pub fn parse_unvalidated(text: &str) -> Result<Program, ParseError> {
    let lines: Vec<Line> =
        text.lines().enumerate().map(|(i, l)| lex(l, i + 1).map(|t| (i + 1, l, t))).collect::<Result<_, _>>()?;

    // Pass 1: top-level declarations, so calls may refer forward.
    let mut g = Globals {
        globals: HashMap::new(),
        externs: HashMap::new(),
        funcs: HashMap::new(),
        sigs: Vec::new(),
        extern_sigs: Vec::new(),
    };
    let mut prog = Program::default();
    let mut depth = 0usize;
    for (lineno, raw, toks) in &lines {
        let mut c = Cursor::new(toks, *lineno, raw.chars().count());
        let dup = |c: &Cursor, name: &str| c.err::<()>(format!("@{name} is declared more than once"));
        match c.peek() {
            Some(Tok::Ident(s)) if s == "fn" && depth == 0 => {
                c.pos += 1;
                let name = c.global()?;
                if g.funcs.contains_key(&name) || g.externs.contains_key(&name) {
                    c.pos -= 1;
                    dup(&c, &name)?;
                }
                signature_params(&mut c, true)?;
                let ret = ret_ty(&mut c)?;
                c.punct('{')?;
                c.expect_end()?;
                g.funcs.insert(name.clone(), g.sigs.len());
                g.sigs.push(Signature { ret });
                prog.functions.push(Function::new(name, ret));
                depth = 1;
            }
            Some(Tok::Punct('}')) if depth == 1 => {
                c.pos += 1;
                c.expect_end()?;
                depth = 0;
            }
            Some(Tok::Ident(s)) if s == "global" && depth == 0 => {
                c.pos += 1;
                let name = c.global()?;
                if g.globals.contains_key(&name) {
                    c.pos -= 1;
                    dup(&c, &name)?;
                }
                c.keyword("size")?;
                c.punct('=')?;
                let size = c.uint()?;
                let mut escapes = false;
                if !c.at_end() {
                    c.keyword("escapes")?;
                    c.punct('=')?;
                    escapes = match c.ident()?.as_str() {
                        "true" => true,
                        "false" => false,
                        _ => {
                            c.pos -= 1;
                            return c.err("expected true or false");
                        }
                    };
                }
                c.expect_end()?;
                g.globals.insert(name.clone(), prog.globals.len());
                prog.globals.push(GlobalDecl { name, size, escapes });
            }
            Some(Tok::Ident(s)) if s == "extern" && depth == 0 => {
                c.pos += 1;
                let name = c.global()?;
                if g.funcs.contains_key(&name) || g.externs.contains_key(&name) {
                    c.pos -= 1;
                    dup(&c, &name)?;
                }
                let params: Vec<Ty> = signature_params(&mut c, false)?.into_iter().map(|p| p.1).collect();
                let ret = ret_ty(&mut c)?;
                let contract = contract(&mut c)?;
                g.externs.insert(name.clone(), prog.externs.len());
                g.extern_sigs.push(Signature { ret });
                prog.externs.push(ExternDecl { name, params, ret, contract });
            }
            None => {}
            Some(_) if depth == 1 => {}
            Some(t) => return c.err(format!("unexpected '{t}' outside a function")),
        }
    }
    if depth != 0 {
        let last = lines.len();
        return Err(ParseError::Syntax { line: last, col: 1, msg: "missing '}' at end of function".into() });
    }

    // Pass 2: function bodies.
    let mut fidx = 0usize;
    let mut builder: Option<FnBuilder> = None;
    let mut current: Option<BlockId> = None;
    for (lineno, raw, toks) in &lines {
        let line = *lineno;
        let mut c = Cursor::new(toks, line, raw.chars().count());
        if c.at_end() {
            continue;
        }
        match (builder.as_mut(), c.peek().cloned()) {
            (None, Some(Tok::Ident(s))) if s == "fn" => {
                c.pos += 1;
                c.global()?;
                let params = signature_params(&mut c, true)?;
                let mut b = FnBuilder {
                    f: Function::new(prog.functions[fidx].name.clone(), prog.functions[fidx].ret),
                    names: HashMap::new(),
                    defined: Vec::new(),
                    first_use: Vec::new(),
                    labels: HashMap::new(),
                    label_defined: Vec::new(),
                    label_use: Vec::new(),
                };
                for (i, (name, ty)) in params.into_iter().enumerate() {
                    let id = b.define(name.as_deref().unwrap_or(""), ty, ValueDef::Param(i as u32), line, 1)?;
                    b.f.params.push(id);
                }
                builder = Some(b);
                current = None;
            }
            (None, _) => {}
            (Some(_), Some(Tok::Punct('}'))) => {
                let b = builder.take().expect("in function");
                prog.functions[fidx] = finish_function(b)?;
                fidx += 1;
            }
            (Some(b), Some(Tok::Label(l))) => {
                let col = c.col();
                c.pos += 1;
                c.punct(':')?;
                c.expect_end()?;
                let id = b.block_ref(&l, line, col);
                if b.label_defined[id.idx()] {
                    return Err(ParseError::Syntax { line, col, msg: format!("^{l} is defined more than once") });
                }
                b.label_defined[id.idx()] = true;
                b.label_use[id.idx()] = (line, col);
                current = Some(reorder_defined(b, id));
            }
            (Some(b), Some(first)) => {
                let Some(blk) = current else {
                    return c.err("instruction outside a block; add a '^label:' line first");
                };
                let result = if let Tok::Local(name) = &first {
                    if matches!(c.toks.get(1).map(|t| &t.0), Some(Tok::Punct('='))) {
                        let col = c.col();
                        c.pos += 2;
                        Some((name.clone(), col))
                    } else {
                        None
                    }
                } else {
                    None
                };
                let (kind, ty) = instruction(&mut c, b, &g, result.is_some())?;
                let iid = InstId(b.f.insts.len() as u32);
                let value = match (result, ty) {
                    (Some((name, col)), Some(ty)) => Some(b.define(&name, ty, ValueDef::Inst(iid), line, col)?),
                    _ => None,
                };
                b.f.insts.push(Inst { result: value, kind });
                b.f.blocks[blk.idx()].insts.push(iid);
            }
            (Some(_), None) => {}
        }
    }
    Ok(prog)
}

/// Blocks are created on first mention; keep definition order instead by
/// moving `id` to the end of the defined prefix. Returns its new id.
fn reorder_defined(b: &mut FnBuilder, id: BlockId) -> BlockId {
    let target = b.label_defined.iter().filter(|&&d| d).count() - 1;
    if id.idx() == target {
        return id;
    }
    // Swap block `id` with block `target` and patch every reference.
    let (x, y) = (BlockId(target as u32), id);
    b.f.blocks.swap(x.idx(), y.idx());
    b.label_defined.swap(x.idx(), y.idx());
    b.label_use.swap(x.idx(), y.idx());
    for v in b.labels.values_mut() {
        if *v == x {
            *v = y;
        } else if *v == y {
            *v = x;
        }
    }
    let swap = |blk: &mut BlockId| {
        if *blk == x {
            *blk = y;
        } else if *blk == y {
            *blk = x;
        }
    };
    for inst in &mut b.f.insts {
        match &mut inst.kind {
            InstKind::Br { target } => swap(target),
            InstKind::CondBr { then_, else_, .. } => {
                swap(then_);
                swap(else_);
            }
            InstKind::Phi { incoming, .. } => {
                for (_, blk) in incoming {
                    swap(blk);
                }
            }
            _ => {}
        }
    }
    x
}

fn finish_function(b: FnBuilder) -> Result<Function, ParseError> {
    for (i, defined) in b.defined.iter().enumerate() {
        if !defined {
            let (line, col) = b.first_use[i];
            return Err(ParseError::Syntax {
                line,
                col,
                msg: format!("use of undefined value %{}", b.f.values[i].name),
            });
        }
    }
    for (i, defined) in b.label_defined.iter().enumerate() {
        if !defined {
            let (line, col) = b.label_use[i];
            return Err(ParseError::Syntax {
                line,
                col,
                msg: format!("branch to undefined block ^{}", b.f.blocks[i].label),
            });
        }
    }
    if b.f.blocks.is_empty() {
        return Err(ParseError::Syntax { line: 0, col: 0, msg: format!("function @{} has no blocks", b.f.name) });
    }
    Ok(b.f)
}

/// Parses and validates.
pub fn parse(text: &str) -> Result<Program, ParseError> {
    let p = parse_unvalidated(text)?;
    let diags = validate(&p);
    if diags.is_empty() {
        Ok(p)
    } else {
        Err(ParseError::Invalid(diags))
    }
}
