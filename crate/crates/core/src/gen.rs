//! Random generators for well-typed modules.
//!
//! Used by differential tests, acceptance checks and benchmarks. Every
//! generated module validates under the feature set it was generated for.
//! Calls only go to functions with a higher index, so the call graph is a
//! DAG, and every loop runs a bounded number of iterations.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ast::*;
use crate::config::FeatureSet;

const STATIC_MASK: i64 = 0x3ff8;

struct Sig {
    ty: FuncType,
    type_idx: u32,
}

struct Body {
    locals: Vec<ValType>,
    nparams: usize,
    labels: Vec<usize>,
    out: Vec<Instr>,
}

struct Gen<'r, R: Rng> {
    rng: &'r mut R,
    features: FeatureSet,
    sigs: Vec<Sig>,
    nimports: u32,
    malloc: u32,
    free: u32,
    print: u32,
    table: Vec<u32>,
    current: u32,
}

/// A random module exporting `main: [] -> [i64]`.
pub fn random_module<R: Rng>(rng: &mut R, features: FeatureSet) -> Module {
    use ValType::*;
    let mut m = Module {
        memory_pages: Some(1),
        ..Module::default()
    };
    let host = [
        ("malloc", FuncType::new(vec![I64], vec![I64])),
        ("free", FuncType::new(vec![I64], vec![])),
        ("print_i64", FuncType::new(vec![I64], vec![])),
    ];
    for (name, ty) in host {
        let type_idx = m.intern_type(ty);
        m.imports.push(Import {
            module: "env".into(),
            field: name.into(),
            name: name.into(),
            type_idx,
        });
    }
    m.globals.push(Global {
        name: "g".into(),
        mutable: true,
        ty: I64,
        init: rng.gen_range(-100..100),
    });
    let nfuncs = rng.gen_range(1..=5);
    let mut sigs: Vec<Sig> = m
        .imports
        .iter()
        .map(|i| Sig {
            ty: m.types[i.type_idx as usize].ty.clone(),
            type_idx: i.type_idx,
        })
        .collect();
    for f in 0..nfuncs {
        let ty = if f == 0 {
            FuncType::new(vec![], vec![I64])
        } else {
            let params = (0..rng.gen_range(0..=2)).map(|_| valtype(rng)).collect();
            let results = if rng.gen_bool(0.7) { vec![valtype(rng)] } else { vec![] };
            FuncType::new(params, results)
        };
        let type_idx = m.intern_type(ty.clone());
        sigs.push(Sig { ty, type_idx });
    }
    let nimports = m.imports.len() as u32;
    let table: Vec<u32> = (0..rng.gen_range(0..=3))
        .map(|_| rng.gen_range(nimports..nimports + nfuncs as u32))
        .collect();
    let mut g = Gen {
        rng,
        features,
        sigs,
        nimports,
        malloc: 0,
        free: 1,
        print: 2,
        table: table.clone(),
        current: 0,
    };
    for f in 0..nfuncs {
        let idx = nimports + f as u32;
        g.current = idx;
        let func = g.function(idx);
        m.functions.push(func);
    }
    m.table = table;
    m.exports.push(Export {
        name: "main".into(),
        func: nimports,
    });
    m
}

fn valtype<R: Rng>(rng: &mut R) -> ValType {
    if rng.gen_bool(0.75) {
        ValType::I64
    } else {
        ValType::I32
    }
}

impl<R: Rng> Gen<'_, R> {
    fn function(&mut self, idx: u32) -> Function {
        let sig = &self.sigs[idx as usize];
        let params = sig.ty.params.clone();
        let result = sig.ty.results.first().copied();
        let type_idx = sig.type_idx;
        let mut b = Body {
            nparams: params.len(),
            locals: params,
            labels: Vec::new(),
            out: Vec::new(),
        };
        for _ in 0..self.rng.gen_range(0..3) {
            let t = valtype(self.rng);
            b.locals.push(t);
        }
        // Every function has at least one local of each type.
        b.locals.push(ValType::I64);
        b.locals.push(ValType::I32);
        let n = self.rng.gen_range(1..6);
        for _ in 0..n {
            self.stmt(&mut b, 3);
        }
        if let Some(t) = result {
            self.expr(&mut b, t, 3);
        }
        Function {
            name: format!("f{}", idx - self.nimports),
            type_idx,
            locals: b.locals[b.nparams..].to_vec(),
            frame_slots: Vec::new(),
            body: b.out,
        }
    }

    fn local_of(&mut self, b: &Body, t: ValType) -> u32 {
        let candidates: Vec<u32> = (0..b.locals.len() as u32)
            .filter(|&i| b.locals[i as usize] == t)
            .collect();
        *candidates.choose(self.rng).expect("one local of each type")
    }

    fn callees(&self, result: Option<ValType>) -> Vec<u32> {
        (self.current + 1..self.sigs.len() as u32)
            .filter(|&f| self.sigs[f as usize].ty.results.first().copied() == result)
            .collect()
    }

    fn call_args(&mut self, b: &mut Body, f: u32, depth: u32) {
        let params = self.sigs[f as usize].ty.params.clone();
        for p in params {
            self.expr(b, p, depth.saturating_sub(1));
        }
    }

    fn i64_const(&mut self) -> i64 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(-4..16),
            1 => self.rng.gen(),
            _ => self.rng.gen_range(0..4096),
        }
    }

    /// An address expression: mostly inside the static page, sometimes a
    /// heap pointer, sometimes anything.
    fn addr(&mut self, b: &mut Body, depth: u32) {
        match self.rng.gen_range(0..10) {
            0 => self.expr(b, ValType::I64, depth),
            1 | 2 => {
                let l = self.local_of(b, ValType::I64);
                b.out.push(Instr::LocalGet(l));
            }
            _ => {
                self.expr(b, ValType::I64, depth);
                b.out.push(Instr::I64Const(STATIC_MASK));
                b.out.push(Instr::I64Bin(BinOp::And));
            }
        }
    }

    fn expr(&mut self, b: &mut Body, t: ValType, depth: u32) {
        if depth == 0 || self.rng.gen_bool(0.25) {
            return self.leaf(b, t);
        }
        let d = depth - 1;
        match t {
            ValType::I64 => match self.rng.gen_range(0..14) {
                0..=2 => {
                    self.expr(b, t, d);
                    self.expr(b, t, d);
                    let ops = [
                        BinOp::Add,
                        BinOp::Sub,
                        BinOp::Mul,
                        BinOp::And,
                        BinOp::Or,
                        BinOp::Xor,
                        BinOp::Shl,
                        BinOp::ShrU,
                    ];
                    b.out.push(Instr::I64Bin(*ops.choose(self.rng).unwrap()));
                }
                3 => {
                    self.expr(b, ValType::I32, d);
                    b.out.push(Instr::I64ExtendI32U);
                }
                4 => {
                    self.addr(b, d);
                    let op = *[MemOp::I64Load, MemOp::I64Load8U].choose(self.rng).unwrap();
                    let offset = self.rng.gen_range(0..3) * 8;
                    b.out.push(Instr::Mem { op, offset });
                }
                5 => {
                    let cs = self.callees(Some(t));
                    match cs.choose(self.rng) {
                        Some(&f) => {
                            self.call_args(b, f, d);
                            b.out.push(Instr::Call(f));
                        }
                        None => self.leaf(b, t),
                    }
                }
                6 => self.if_expr(b, t, d),
                7 => self.block_expr(b, t, d),
                8 => {
                    self.expr(b, t, d);
                    let l = self.local_of(b, t);
                    b.out.push(Instr::LocalTee(l));
                }
                9 => {
                    self.expr(b, t, d);
                    b.out.push(Instr::I64Const(63));
                    b.out.push(Instr::I64Bin(BinOp::And));
                    b.out.push(Instr::Call(self.malloc));
                }
                10 if self.features.ptr_auth => {
                    self.expr(b, t, d);
                    b.out.push(Instr::PointerSign);
                    if self.rng.gen_bool(0.9) {
                        b.out.push(Instr::PointerAuth);
                    }
                }
                11 if self.features.segments => {
                    self.expr(b, t, d);
                    b.out.push(Instr::I64Const(0x3f0));
                    b.out.push(Instr::I64Bin(BinOp::And));
                    b.out.push(Instr::I64Const(self.rng.gen_range(0..4) * 16));
                    b.out.push(Instr::SegmentNew(self.rng.gen_range(0..2) * 16));
                }
                12 => self.indirect(b, t, d),
                _ => self.leaf(b, t),
            },
            ValType::I32 => match self.rng.gen_range(0..7) {
                0 => {
                    self.expr(b, ValType::I64, d);
                    b.out.push(Instr::I64Eqz);
                }
                1 | 2 => {
                    self.expr(b, ValType::I64, d);
                    self.expr(b, ValType::I64, d);
                    let ops = [RelOp::Eq, RelOp::Ne, RelOp::LtU, RelOp::GeU];
                    b.out.push(Instr::I64Rel(*ops.choose(self.rng).unwrap()));
                }
                3 => {
                    self.expr(b, ValType::I64, d);
                    b.out.push(Instr::I32WrapI64);
                }
                4 => {
                    self.expr(b, t, d);
                    b.out.push(Instr::I32Eqz);
                }
                5 => {
                    self.addr(b, d);
                    b.out.push(Instr::Mem {
                        op: MemOp::I32Load,
                        offset: 0,
                    });
                }
                _ => {
                    let cs = self.callees(Some(t));
                    match cs.choose(self.rng) {
                        Some(&f) => {
                            self.call_args(b, f, d);
                            b.out.push(Instr::Call(f));
                        }
                        None => self.leaf(b, t),
                    }
                }
            },
        }
    }

    fn leaf(&mut self, b: &mut Body, t: ValType) {
        match (t, self.rng.gen_range(0..3)) {
            (ValType::I64, 0) => {
                let c = self.i64_const();
                b.out.push(Instr::I64Const(c));
            }
            (ValType::I64, 1) if self.rng.gen_bool(0.3) => b.out.push(Instr::GlobalGet(0)),
            (ValType::I32, 0) => {
                let c = self.rng.gen_range(-2..8);
                b.out.push(Instr::I32Const(c));
            }
            _ => {
                let l = self.local_of(b, t);
                b.out.push(Instr::LocalGet(l));
            }
        }
    }

    fn indirect(&mut self, b: &mut Body, t: ValType, d: u32) {
        if self.table.is_empty() {
            return self.leaf(b, t);
        }
        // Usually a well-typed entry below the current function; sometimes
        // a mismatched type or an index past the table.
        let slot = self.rng.gen_range(0..self.table.len() + 1);
        let target = self.table.get(slot).copied();
        let want = match target {
            Some(f) if f > self.current && self.rng.gen_bool(0.8) => &self.sigs[f as usize].ty,
            _ => &self.sigs[self.nimports as usize].ty,
        };
        if want.results.first() != Some(&t) {
            return self.leaf(b, t);
        }
        if matches!(target, Some(f) if f <= self.current) {
            // Would allow recursion; keep the call graph acyclic.
            return self.leaf(b, t);
        }
        let params = want.params.clone();
        let ty = want.clone();
        for p in params {
            self.expr(b, p, d);
        }
        b.out.push(Instr::I32Const(slot as i32));
        let type_idx = self
            .sigs
            .iter()
            .find(|s| s.ty == ty)
            .map(|s| s.type_idx)
            .expect("interned");
        b.out.push(Instr::CallIndirect(type_idx));
    }

    fn if_expr(&mut self, b: &mut Body, t: ValType, d: u32) {
        self.expr(b, ValType::I32, d);
        b.out.push(Instr::If(BlockType(Some(t))));
        b.labels.push(1);
        self.expr(b, t, d);
        b.out.push(Instr::Else);
        self.expr(b, t, d);
        b.labels.pop();
        b.out.push(Instr::End);
    }

    fn block_expr(&mut self, b: &mut Body, t: ValType, d: u32) {
        b.out.push(Instr::Block(BlockType(Some(t))));
        b.labels.push(1);
        for _ in 0..self.rng.gen_range(0..3) {
            self.stmt(b, d);
        }
        self.expr(b, t, d);
        b.labels.pop();
        b.out.push(Instr::End);
    }

    fn stmt(&mut self, b: &mut Body, depth: u32) {
        let d = depth.saturating_sub(1);
        match self.rng.gen_range(0..16) {
            0 | 1 => {
                let t = valtype(self.rng);
                self.expr(b, t, d);
                let l = self.local_of(b, t);
                b.out.push(Instr::LocalSet(l));
            }
            2 | 3 => {
                self.addr(b, d);
                let op = *[MemOp::I64Store, MemOp::I32Store, MemOp::I64Store8]
                    .choose(self.rng)
                    .unwrap();
                self.expr(b, if op == MemOp::I32Store { ValType::I32 } else { ValType::I64 }, d);
                let offset = self.rng.gen_range(0..3) * 8;
                b.out.push(Instr::Mem { op, offset });
            }
            4 => {
                let t = valtype(self.rng);
                self.expr(b, t, d);
                b.out.push(Instr::Drop);
            }
            5 if depth > 0 => {
                self.expr(b, ValType::I32, d);
                b.out.push(Instr::If(BlockType(None)));
                b.labels.push(0);
                self.stmts(b, d);
                if self.rng.gen_bool(0.5) {
                    b.out.push(Instr::Else);
                    self.stmts(b, d);
                }
                b.labels.pop();
                b.out.push(Instr::End);
            }
            6 if depth > 0 => self.counted_loop(b, d),
            7 if depth > 0 => {
                b.out.push(Instr::Block(BlockType(None)));
                b.labels.push(0);
                self.stmts(b, d);
                self.expr(b, ValType::I32, d);
                b.out.push(Instr::BrIf(0));
                self.stmts(b, d);
                b.labels.pop();
                b.out.push(Instr::End);
            }
            8 => {
                let cs = self.callees(None);
                if let Some(&f) = cs.choose(self.rng) {
                    self.call_args(b, f, d);
                    b.out.push(Instr::Call(f));
                }
            }
            9 => {
                self.expr(b, ValType::I64, d);
                b.out.push(Instr::Call(self.print));
            }
            10 if self.rng.gen_bool(0.3) => {
                let l = self.local_of(b, ValType::I64);
                b.out.push(Instr::LocalGet(l));
                b.out.push(Instr::Call(self.free));
            }
            11 => {
                self.expr(b, ValType::I64, d);
                b.out.push(Instr::GlobalSet(0));
            }
            12 if self.features.segments => {
                let l = self.local_of(b, ValType::I64);
                b.out.push(Instr::LocalGet(l));
                if self.rng.gen_bool(0.5) {
                    b.out.push(Instr::I64Const(16));
                    b.out.push(Instr::SegmentFree(0));
                } else {
                    b.out.push(Instr::I64Const(0));
                    b.out.push(Instr::I64Const(16));
                    b.out.push(Instr::SegmentSetTag(0));
                }
            }
            13 if !b.labels.is_empty() => {
                // Conditional exit to an enclosing value-less label.
                let targets: Vec<u32> = b
                    .labels
                    .iter()
                    .rev()
                    .enumerate()
                    .filter(|(_, &a)| a == 0)
                    .map(|(i, _)| i as u32)
                    .collect();
                if let Some(&depth) = targets.choose(self.rng) {
                    self.expr(b, ValType::I32, d);
                    b.out.push(Instr::BrIf(depth));
                }
            }
            14 if self.rng.gen_bool(0.1) => {
                let result = self.sigs[self.current as usize].ty.results.first().copied();
                if let Some(t) = result {
                    self.expr(b, t, d);
                }
                b.out.push(Instr::Return);
            }
            _ => b.out.push(Instr::Nop),
        }
    }

    fn stmts(&mut self, b: &mut Body, depth: u32) {
        for _ in 0..self.rng.gen_range(0..3) {
            self.stmt(b, depth);
        }
    }

    /// `for c in (1..=n).rev() { body }` with a fresh counter local.
    fn counted_loop(&mut self, b: &mut Body, d: u32) {
        let c = b.locals.len() as u32;
        b.locals.push(ValType::I64);
        b.out.push(Instr::I64Const(self.rng.gen_range(1..5)));
        b.out.push(Instr::LocalSet(c));
        b.out.push(Instr::Loop(BlockType(None)));
        b.labels.push(0);
        self.stmts(b, d);
        b.out.extend([
            Instr::LocalGet(c),
            Instr::I64Const(1),
            Instr::I64Bin(BinOp::Sub),
            Instr::LocalTee(c),
            Instr::I64Eqz,
            Instr::I32Eqz,
            Instr::BrIf(0),
        ]);
        b.labels.pop();
        b.out.push(Instr::End);
    }
}

/// A random tree of calls whose functions declare frame slots and touch
/// them only within bounds. Some slots escape to callees, some are indexed
/// dynamically. Exports `main: [] -> [i64]`; never traps when run with or
/// without stack-safety hardening.
pub fn random_call_tree<R: Rng>(rng: &mut R) -> Module {
    use ValType::I64;
    let mut m = Module {
        memory_pages: Some(1),
        ..Module::default()
    };
    let ty = m.intern_type(FuncType::new(vec![I64, I64], vec![I64]));
    let main_ty = m.intern_type(FuncType::new(vec![], vec![I64]));
    let n = rng.gen_range(2..=7);
    // Parent of node i (i > 0) is some earlier node.
    let mut children: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 1..n {
        let p = rng.gen_range(0..i);
        children[p].push(i as u32);
    }
    for (i, kids) in children.iter().enumerate() {
        let slots: Vec<FrameSlot> = (0..rng.gen_range(0..=3))
            .map(|s| FrameSlot {
                name: format!("s{s}"),
                size_bytes: rng.gen_range(1..=48),
            })
            .collect();
        // Param 0: pointer into the caller's frame or 0; param 1: its size.
        let mut body = Vec::new();
        let acc = 2;
        let tmp = 3;
        // Touch the incoming pointer when there is one.
        body.extend([
            Instr::LocalGet(0),
            Instr::I64Eqz,
            Instr::I32Eqz,
            Instr::If(BlockType(None)),
            Instr::LocalGet(0),
            Instr::LocalGet(0),
            Instr::Mem {
                op: MemOp::I64Load8U,
                offset: 0,
            },
            Instr::I64Const(1),
            Instr::I64Bin(BinOp::Add),
            Instr::Mem {
                op: MemOp::I64Store8,
                offset: 0,
            },
            Instr::End,
        ]);
        for (s, slot) in slots.iter().enumerate() {
            let s = s as u32;
            let size = slot.size_bytes;
            match rng.gen_range(0..3) {
                0 if size >= 8 => {
                    let off = rng.gen_range(0..=(size - 8) / 8) * 8;
                    let v = rng.gen_range(0..1000);
                    body.extend([
                        Instr::FrameAddr(s),
                        Instr::I64Const(v),
                        Instr::Mem {
                            op: MemOp::I64Store,
                            offset: off,
                        },
                        Instr::FrameAddr(s),
                        Instr::Mem {
                            op: MemOp::I64Load,
                            offset: off,
                        },
                        Instr::LocalGet(acc),
                        Instr::I64Bin(BinOp::Add),
                        Instr::LocalSet(acc),
                    ]);
                }
                1 => {
                    // Dynamic index the analysis cannot bound.
                    let off = rng.gen_range(0..size) as i64;
                    body.extend([
                        Instr::I64Const(off),
                        Instr::LocalSet(tmp),
                        Instr::FrameAddr(s),
                        Instr::LocalGet(tmp),
                        Instr::I64Bin(BinOp::Add),
                        Instr::I64Const(rng.gen_range(0..256)),
                        Instr::Mem {
                            op: MemOp::I64Store8,
                            offset: 0,
                        },
                    ]);
                }
                _ => {
                    let off = rng.gen_range(0..size);
                    body.extend([
                        Instr::FrameAddr(s),
                        Instr::Mem {
                            op: MemOp::I64Load8U,
                            offset: off,
                        },
                        Instr::LocalGet(acc),
                        Instr::I64Bin(BinOp::Add),
                        Instr::LocalSet(acc),
                    ]);
                }
            }
        }
        for &k in kids {
            let callee = k;
            match slots.choose(rng) {
                Some(slot) if rng.gen_bool(0.6) => {
                    let s = slots.iter().position(|x| x == slot).unwrap() as u32;
                    body.extend([Instr::FrameAddr(s), Instr::I64Const(slot.size_bytes as i64)]);
                }
                _ => body.extend([Instr::I64Const(0), Instr::I64Const(0)]),
            }
            body.extend([
                Instr::Call(callee),
                Instr::LocalGet(acc),
                Instr::I64Bin(BinOp::Add),
                Instr::LocalSet(acc),
            ]);
        }
        body.push(Instr::LocalGet(acc));
        m.functions.push(Function {
            name: format!("n{i}"),
            type_idx: ty,
            locals: vec![I64, I64],
            frame_slots: slots,
            body,
        });
    }
    let main = m.functions.len() as u32;
    m.functions.push(Function {
        name: "main".into(),
        type_idx: main_ty,
        locals: vec![],
        frame_slots: vec![],
        body: vec![Instr::I64Const(0), Instr::I64Const(0), Instr::Call(0)],
    });
    m.exports.push(Export {
        name: "main".into(),
        func: main,
    });
    m
}
