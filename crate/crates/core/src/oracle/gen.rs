//! Random closed programs for differential fuzzing.
//!
//! Each program allocates a few objects of assorted sizes and kinds, then
//! runs a straight-line sequence of operations over them: constant and
//! variable-index accesses, counted loops, escapes through memory and
//! calls, merges, pointer comparisons and gep chains. Heap objects are
//! freed before returning. Every operation is reached, so an OOB operation
//! is always executed unless an earlier check aborts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;

const SMALL_LIMIT: u64 = (1 << 16) - 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Occasional OOB operations among in-bounds ones.
    Mixed,
    InBounds,
    /// Exactly one OOB operation per program.
    OneOob,
}

impl std::str::FromStr for GenMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mixed" => Ok(GenMode::Mixed),
            "in-bounds" => Ok(GenMode::InBounds),
            "one-oob" => Ok(GenMode::OneOob),
            _ => Err(format!("unknown generator mode '{s}' (expected mixed, in-bounds or one-oob)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: GenMode,
    pub max_ops: usize,
    /// Per-operation OOB probability in [`GenMode::Mixed`].
    pub oob_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { mode: GenMode::Mixed, max_ops: 10, oob_rate: 0.15 }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ObjKind {
    Heap,
    Stack,
    Dynamic,
    Global,
}

struct Obj {
    name: String,
    size: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Op {
    Const,
    Var,
    Loop,
    EscapeStore,
    EscapeCall,
    Select,
    Chain,
    Compare,
}

const OOB_OPS: [Op; 7] = [Op::Const, Op::Var, Op::Loop, Op::EscapeStore, Op::EscapeCall, Op::Select, Op::Chain];
const ALL_OPS: [Op; 8] =
    [Op::Const, Op::Var, Op::Loop, Op::EscapeStore, Op::EscapeCall, Op::Select, Op::Chain, Op::Compare];

struct Gen {
    rng: ChaCha8Rng,
    globals: Vec<String>,
    body: String,
    helpers: BTreeSet<u64>,
    objs: Vec<Obj>,
    heap_objs: Vec<String>,
    cell: Option<String>,
    next: usize,
    label: String,
}

fn offset_text(c: i64, var: &str, scale: i64) -> String {
    match c {
        0 => format!("{var}*{scale}"),
        _ => format!("{c} + {var}*{scale}"),
    }
}

impl Gen {
    fn fresh(&mut self, hint: &str) -> String {
        self.next += 1;
        format!("%{hint}{}", self.next)
    }

    fn emit(&mut self, line: &str) {
        self.body.push_str("  ");
        self.body.push_str(line);
        self.body.push('\n');
    }

    fn start_block(&mut self, label: String) {
        writeln!(self.body, "^{label}:").unwrap();
        self.label = label;
    }

    fn size(&mut self, large: bool) -> u64 {
        match self.rng.gen_range(0..20) {
            0..=13 => self.rng.gen_range(1..=128),
            14..=16 => self.rng.gen_range(129..=4096),
            17 if large => self.rng.gen_range(SMALL_LIMIT - 64..=SMALL_LIMIT + 64),
            18 if large => self.rng.gen_range(SMALL_LIMIT + 65..=300_000),
            _ => self.rng.gen_range(1..=16),
        }
    }

    fn object(&mut self) {
        let kind = *[ObjKind::Heap, ObjKind::Heap, ObjKind::Stack, ObjKind::Dynamic, ObjKind::Global]
            .choose(&mut self.rng)
            .expect("non-empty");
        let size = self.size(kind == ObjKind::Heap);
        let name = self.fresh("o");
        match kind {
            ObjKind::Heap => {
                self.emit(&format!("{name} = alloc {size}"));
                self.heap_objs.push(name.clone());
            }
            ObjKind::Stack => self.emit(&format!("{name} = alloca {size}")),
            ObjKind::Dynamic => {
                let n = self.fresh("n");
                self.emit(&format!("{n} = const {size}"));
                self.emit(&format!("{name} = allocadyn {n}"));
            }
            ObjKind::Global => {
                let g = format!("g{}", self.globals.len());
                self.globals.push(format!("global @{g} size={size}"));
                self.emit(&format!("{name} = global @{g}"));
            }
        }
        self.objs.push(Obj { name, size });
    }

    fn width(&mut self, size: u64) -> u64 {
        let w = *[1u64, 2, 4, 8].choose(&mut self.rng).expect("non-empty");
        if w <= size {
            w
        } else {
            1
        }
    }

    /// Start offset of a `w`-byte access into an object of `size` bytes.
    fn offset(&mut self, size: u64, w: u64, oob: bool) -> i64 {
        let (s, w) = (size as i64, w as i64);
        if !oob {
            return match self.rng.gen_range(0..4) {
                0 => 0,
                1 => s - w,
                _ => self.rng.gen_range(0..=s - w),
            };
        }
        match self.rng.gen_range(0..5) {
            0 => s - w + 1,
            1 => s,
            2 => s + self.rng.gen_range(0..=48),
            3 => -self.rng.gen_range(1..=w),
            _ => -self.rng.gen_range(1..=64),
        }
    }

    /// Valid escape offsets include one past the end.
    fn escape_offset(&mut self, size: u64, oob: bool) -> i64 {
        let s = size as i64;
        if !oob {
            return match self.rng.gen_range(0..4) {
                0 => s,
                _ => self.rng.gen_range(0..=s),
            };
        }
        if self.rng.gen_bool(0.5) {
            s + self.rng.gen_range(1..=16)
        } else {
            -self.rng.gen_range(1..=16)
        }
    }

    fn access(&mut self, ptr: &str, w: u64) {
        if self.rng.gen_bool(0.5) {
            let v = self.fresh("v");
            self.emit(&format!("{v} = load {w}, {ptr}"));
        } else {
            let x = self.rng.gen_range(0..1000);
            self.emit(&format!("store {w}, {ptr}, {x}"));
        }
    }

    fn gep_const(&mut self, base: &str, off: i64) -> String {
        if off == 0 && self.rng.gen_bool(0.5) {
            return base.to_string();
        }
        let p = self.fresh("p");
        self.emit(&format!("{p} = gep {base}, {off}"));
        p
    }

    fn op(&mut self, op: Op, obj: usize, oob: bool) {
        let (name, size) = (self.objs[obj].name.clone(), self.objs[obj].size);
        let w = self.width(size);
        match op {
            Op::Const => {
                let off = self.offset(size, w, oob);
                let p = self.gep_const(&name, off);
                self.access(&p, w);
            }
            Op::Var => {
                let off = self.offset(size, w, oob);
                let k: i64 = self.rng.gen_range(-4..=8);
                let c = off - k * w as i64;
                let i = self.fresh("i");
                self.emit(&format!("{i} = const {k}"));
                let p = self.fresh("p");
                self.emit(&format!("{p} = gep {name}, {}", offset_text(c, &i, w as i64)));
                self.access(&p, w);
            }
            Op::Loop => {
                let n = self.rng.gen_range(1..=16u64).min(size / w).max(1);
                let (s, w_, n_) = (size as i64, w as i64, n as i64);
                let c = match (oob, self.rng.gen_bool(0.5)) {
                    (false, _) => self.rng.gen_range(0..=(s - n_ * w_).max(0)),
                    (true, true) => s - n_ * w_ + w_.max(1),
                    (true, false) => -w_,
                };
                let id = self.fresh("l");
                let id = &id[2..];
                let (h, b, x) = (format!("h{id}"), format!("b{id}"), format!("x{id}"));
                let (i, j, cond, p) = (format!("%i{id}"), format!("%j{id}"), format!("%c{id}"), format!("%q{id}"));
                let from = self.label.clone();
                self.emit(&format!("br ^{h}"));
                self.start_block(h.clone());
                self.emit(&format!("{i} = phi int [0, ^{from}], [{j}, ^{b}]"));
                self.emit(&format!("{cond} = cmp lt {i}, {n}"));
                self.emit(&format!("condbr {cond}, ^{b}, ^{x}"));
                self.start_block(b.clone());
                self.emit(&format!("{p} = gep {name}, {}", offset_text(c, &i, w_)));
                if self.rng.gen_bool(0.5) {
                    self.emit(&format!("store {w}, {p}, {i}"));
                } else {
                    let v = self.fresh("v");
                    self.emit(&format!("{v} = load {w}, {p}"));
                }
                self.emit(&format!("{j} = add {i}, 1"));
                self.emit(&format!("br ^{h}"));
                self.start_block(x);
            }
            Op::EscapeStore | Op::EscapeCall => {
                let bad_escape = oob && self.rng.gen_bool(0.5);
                let e_off = self.escape_offset(size, bad_escape);
                let target = self.offset(size, w, oob && !bad_escape);
                let d = target - e_off;
                let e = self.gep_const(&name, e_off);
                if op == Op::EscapeStore {
                    let cell = match &self.cell {
                        Some(c) => c.clone(),
                        None => {
                            let c = self.fresh("cell");
                            self.emit(&format!("{c} = alloc 8"));
                            self.heap_objs.push(c.clone());
                            self.cell = Some(c.clone());
                            c
                        }
                    };
                    self.emit(&format!("store ptr, {cell}, {e}"));
                    let r = self.fresh("r");
                    self.emit(&format!("{r} = load ptr, {cell}"));
                    let x = self.gep_const(&r, d);
                    self.access(&x, w);
                } else {
                    self.helpers.insert(w);
                    let i = self.fresh("d");
                    self.emit(&format!("{i} = const {d}"));
                    let v = self.fresh("v");
                    self.emit(&format!("{v} = call @read{w}({e}, {i})"));
                }
            }
            Op::Select => {
                let other = self.escape_offset(size, false);
                let take_first = self.rng.gen_bool(0.5);
                let target = self.offset(size, w, oob);
                let chosen = if take_first { 0 } else { other };
                let k = self.fresh("k");
                self.emit(&format!("{k} = const {}", if take_first { 1 } else { 0 }));
                let e = self.fresh("p");
                self.emit(&format!("{e} = gep {name}, {other}"));
                let s = self.fresh("s");
                self.emit(&format!("{s} = select ptr {k}, {name}, {e}"));
                let x = self.gep_const(&s, target - chosen);
                self.access(&x, w);
            }
            Op::Chain => {
                let off = self.offset(size, w, oob);
                let first = self.rng.gen_range(-16..=16);
                let a = self.fresh("p");
                self.emit(&format!("{a} = gep {name}, {first}"));
                let b = self.fresh("p");
                self.emit(&format!("{b} = gep {a}, {}", off - first));
                let c = self.fresh("p");
                self.emit(&format!("{c} = cast {b}"));
                self.access(&c, w);
            }
            Op::Compare => {
                let off = self.escape_offset(size, false);
                let e = self.fresh("p");
                self.emit(&format!("{e} = gep {name}, {off}"));
                let t = self.fresh("t");
                if self.rng.gen_bool(0.5) {
                    self.emit(&format!("{t} = pcmp lt {name}, {e}"));
                } else {
                    self.emit(&format!("{t} = psub {e}, {name}"));
                }
            }
        }
    }
}

/// Program `index` of the campaign seeded with `seed`.
pub fn generate(seed: u64, index: u64, cfg: &GenConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut g = Gen {
        rng,
        globals: Vec::new(),
        body: String::new(),
        helpers: BTreeSet::new(),
        objs: Vec::new(),
        heap_objs: Vec::new(),
        cell: None,
        next: 0,
        label: String::new(),
    };
    g.start_block("entry".into());
    for _ in 0..g.rng.gen_range(1..=3) {
        g.object();
    }
    let n_ops = g.rng.gen_range(1..=cfg.max_ops.max(1));
    let oob_at = match cfg.mode {
        GenMode::OneOob => Some(g.rng.gen_range(0..n_ops)),
        _ => None,
    };
    for k in 0..n_ops {
        let oob = match cfg.mode {
            GenMode::InBounds => false,
            GenMode::OneOob => oob_at == Some(k),
            GenMode::Mixed => g.rng.gen_bool(cfg.oob_rate),
        };
        let ops: &[Op] = if oob { &OOB_OPS } else { &ALL_OPS };
        let op = *ops.choose(&mut g.rng).expect("non-empty");
        let obj = g.rng.gen_range(0..g.objs.len());
        g.op(op, obj, oob);
    }
    for o in std::mem::take(&mut g.heap_objs) {
        g.emit(&format!("free {o}"));
    }
    g.emit("ret 0");

    let mut out = String::new();
    writeln!(out, "; fuzz seed={seed} case={index}").unwrap();
    for gl in &g.globals {
        writeln!(out, "{gl}").unwrap();
    }
    if !g.globals.is_empty() {
        out.push('\n');
    }
    for w in &g.helpers {
        writeln!(out, "fn @read{w}(%p: ptr, %i: int) -> int {{\n^entry:\n  %a = gep %p, %i*1\n  %v = load {w}, %a\n  ret %v\n}}\n")
            .unwrap();
    }
    writeln!(out, "fn @main() -> int {{").unwrap();
    out.push_str(&g.body);
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse, validate};

    #[test]
    fn generated_programs_parse_and_validate() {
        for mode in [GenMode::Mixed, GenMode::InBounds, GenMode::OneOob] {
            let cfg = GenConfig { mode, ..GenConfig::default() };
            for i in 0..200 {
                let src = generate(7, i, &cfg);
                let p = parse(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
                assert!(validate(&p).is_empty(), "{src}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate(3, 9, &cfg), generate(3, 9, &cfg));
        assert_ne!(generate(3, 9, &cfg), generate(3, 10, &cfg));
    }
}
