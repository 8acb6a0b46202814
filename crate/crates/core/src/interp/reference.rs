//! Literal small-step evaluator.
//!
//! Configurations follow the usual WebAssembly presentation: each context
//! is a value stack plus a sequence of remaining administrative
//! instructions, and structured control nests as `label` and `frame` forms.
//! Every call to [`step`] applies exactly one reduction to the innermost
//! redex. Memory accesses check tags byte by byte. This is deliberately slow
//! and shares no memory-access code with the main engine; it exists to
//! cross-check the engine.

use std::rc::Rc;

use super::code::{Code, FuncCode};
use super::{ExecError, Fault, Trap, TrapKind, Value};
use crate::ast::{BlockType, Instr, MemOp};
use crate::heap;
use crate::pac;
use crate::runtime::Env;
use crate::tagmem::{ADDRESS_MASK, GRANULE, TAG_MASK, TAG_SHIFT};

#[derive(Debug)]
enum Node {
    Plain(Instr, usize),
    Block(BlockType, Rc<[Node]>),
    Loop(Rc<[Node]>),
    If(BlockType, Rc<[Node]>, Rc<[Node]>),
}

/// Rebuilds the structured tree from a flat body.
fn tree(body: &[Instr]) -> Rc<[Node]> {
    fn seq(body: &[Instr], pc: &mut usize) -> (Vec<Node>, bool) {
        let mut out = Vec::new();
        while *pc < body.len() {
            let at = *pc;
            *pc += 1;
            match &body[at] {
                Instr::End => return (out, false),
                Instr::Else => return (out, true),
                Instr::Block(bt) => {
                    let (inner, _) = seq(body, pc);
                    out.push(Node::Block(*bt, inner.into()));
                }
                Instr::Loop(_) => {
                    let (inner, _) = seq(body, pc);
                    out.push(Node::Loop(inner.into()));
                }
                Instr::If(bt) => {
                    let (then, has_else) = seq(body, pc);
                    let els = if has_else { seq(body, pc).0 } else { Vec::new() };
                    out.push(Node::If(*bt, then.into(), els.into()));
                }
                other => out.push(Node::Plain(other.clone(), at)),
            }
        }
        (out, false)
    }
    seq(body, &mut 0).0.into()
}

#[derive(Debug, Default)]
struct Ctx {
    vals: Vec<Value>,
    /// Remaining administrative instructions; the next one is last.
    code: Vec<Admin>,
}

impl Ctx {
    fn running(body: &Rc<[Node]>) -> Self {
        let mut code = Vec::new();
        if !body.is_empty() {
            code.push(Admin::Seq(body.clone(), 0));
        }
        Ctx {
            vals: Vec::new(),
            code,
        }
    }
}

#[derive(Debug)]
enum Admin {
    /// `body[i..]` still to execute.
    Seq(Rc<[Node]>, usize),
    Label {
        /// Values a branch to this label carries.
        arity: usize,
        /// Loop body to re-enter when branched to.
        cont: Option<Rc<[Node]>>,
        inner: Ctx,
    },
    Frame {
        func: usize,
        arity: usize,
        locals: Vec<Value>,
        inner: Ctx,
    },
    Br(u32),
    Return,
    Trap(Trap),
}

struct Machine<'e, 'a> {
    env: &'e mut Env<'a>,
    code: &'e Code,
    trees: Vec<Rc<[Node]>>,
    steps: u64,
}

pub(crate) fn invoke(env: &mut Env, func: u32, args: &[Value]) -> Result<Vec<Value>, ExecError> {
    let code = env.inst.code.clone();
    let nimports = code.imports.len();
    if (func as usize) < nimports {
        let name = code.module.func_name(func).unwrap_or_default().to_string();
        return heap::call_host(env, code.imports[func as usize], args)
            .map(|r| r.into_iter().collect())
            .map_err(|f| {
                ExecError::Trap(Trap {
                    kind: f.kind,
                    func: name,
                    index: 0,
                    addr: f.addr,
                })
            });
    }
    let trees = code.funcs.iter().map(|f| tree(&f.body)).collect();
    let mut m = Machine {
        env,
        code: &code,
        trees,
        steps: 0,
    };
    let def = func as usize - nimports;
    let mut top = Ctx::default();
    top.vals.extend_from_slice(args);
    m.call_defined(&mut top, def);
    loop {
        match top.code.last() {
            None => return Ok(top.vals),
            Some(Admin::Trap(t)) => return Err(ExecError::Trap(t.clone())),
            Some(_) => m.step(&mut top, &mut Vec::new(), def, 0)?,
        }
    }
}

fn trap(fc: &FuncCode, pc: usize, f: Fault) -> Trap {
    Trap {
        kind: f.kind,
        func: fc.name.clone(),
        index: fc.origin_of(pc),
        addr: f.addr,
    }
}

impl Machine<'_, '_> {
    fn call_defined(&mut self, ctx: &mut Ctx, def: usize) {
        let fc = &self.code.funcs[def];
        let at = ctx.vals.len() - fc.nparams;
        let mut locals: Vec<Value> = ctx.vals.drain(at..).collect();
        locals.extend(fc.local_types[fc.nparams..].iter().map(|&t| Value::zero(t)));
        ctx.code.push(Admin::Frame {
            func: def,
            arity: fc.result_arity,
            locals,
            inner: Ctx::running(&self.trees[def]),
        });
    }

    /// One reduction inside `ctx`, whose enclosing frame is `func` with
    /// `locals`; `depth` counts the frames enclosing `ctx`.
    fn step(
        &mut self,
        ctx: &mut Ctx,
        locals: &mut Vec<Value>,
        func: usize,
        depth: usize,
    ) -> Result<(), ExecError> {
        match ctx.code.last_mut().expect("step on a terminal context") {
            Admin::Seq(body, i) => {
                let body = body.clone();
                let at = *i;
                *i += 1;
                if *i == body.len() {
                    ctx.code.pop();
                }
                self.reduce(ctx, locals, func, depth, &body[at])
            }
            Admin::Label { inner, .. } => match inner.code.last() {
                None | Some(Admin::Br(_) | Admin::Return | Admin::Trap(_)) => {
                    self.exit_label(ctx);
                    Ok(())
                }
                Some(_) => self.step(inner, locals, func, depth),
            },
            Admin::Frame {
                inner,
                locals: frame_locals,
                func: callee,
                ..
            } => match inner.code.last() {
                None | Some(Admin::Br(_) | Admin::Return | Admin::Trap(_)) => {
                    self.exit_frame(ctx);
                    Ok(())
                }
                Some(_) => {
                    let callee = *callee;
                    self.step(inner, frame_locals, callee, depth + 1)
                }
            },
            Admin::Br(_) | Admin::Return | Admin::Trap(_) => {
                unreachable!("control administrative forms are consumed by their parent")
            }
        }
    }

    fn exit_label(&mut self, ctx: &mut Ctx) {
        let Some(Admin::Label {
            arity,
            cont,
            mut inner,
        }) = ctx.code.pop()
        else {
            unreachable!()
        };
        match inner.code.pop() {
            // label_n{..} val* end  ->  val*
            None => ctx.vals.append(&mut inner.vals),
            // label_n{cont} B[val^n br 0] end  ->  val^n cont
            Some(Admin::Br(0)) => {
                let at = inner.vals.len() - arity;
                ctx.vals.extend(inner.vals.drain(at..));
                if let Some(body) = cont {
                    // Re-entering a loop is administrative and not counted.
                    let vals = ctx.vals.split_off(ctx.vals.len() - arity);
                    let mut again = Ctx::running(&body);
                    again.vals = vals;
                    ctx.code.push(Admin::Label {
                        arity,
                        cont: Some(body),
                        inner: again,
                    });
                }
            }
            Some(Admin::Br(n)) => {
                ctx.vals.append(&mut inner.vals);
                ctx.code.push(Admin::Br(n - 1));
            }
            Some(Admin::Return) => {
                ctx.vals.append(&mut inner.vals);
                ctx.code.push(Admin::Return);
            }
            Some(Admin::Trap(t)) => ctx.code.push(Admin::Trap(t)),
            Some(_) => unreachable!(),
        }
    }

    fn exit_frame(&mut self, ctx: &mut Ctx) {
        let Some(Admin::Frame {
            arity, mut inner, ..
        }) = ctx.code.pop()
        else {
            unreachable!()
        };
        match inner.code.pop() {
            None | Some(Admin::Return) | Some(Admin::Br(_)) => {
                let at = inner.vals.len() - arity;
                ctx.vals.extend(inner.vals.drain(at..));
            }
            Some(Admin::Trap(t)) => ctx.code.push(Admin::Trap(t)),
            Some(_) => unreachable!(),
        }
    }

    fn reduce(
        &mut self,
        ctx: &mut Ctx,
        locals: &mut [Value],
        func: usize,
        depth: usize,
        node: &Node,
    ) -> Result<(), ExecError> {
        if self.env.fuel.is_some_and(|limit| self.steps >= limit) {
            return Err(ExecError::FuelExhausted);
        }
        self.steps += 1;
        self.env.stats.instructions += 1;
        let fc = &self.code.funcs[func];
        let (ins, pc) = match node {
            Node::Block(bt, body) => {
                ctx.code.push(Admin::Label {
                    arity: bt.arity(),
                    cont: None,
                    inner: Ctx::running(body),
                });
                return Ok(());
            }
            Node::Loop(body) => {
                ctx.code.push(Admin::Label {
                    arity: 0,
                    cont: Some(body.clone()),
                    inner: Ctx::running(body),
                });
                return Ok(());
            }
            Node::If(bt, then, els) => {
                let c = ctx.vals.pop().unwrap().as_u32();
                ctx.code.push(Admin::Label {
                    arity: bt.arity(),
                    cont: None,
                    inner: Ctx::running(if c != 0 { then } else { els }),
                });
                return Ok(());
            }
            Node::Plain(ins, pc) => (ins, *pc),
        };
        let vals = &mut ctx.vals;
        let mut pop = || vals.pop().expect("validated operand stack");
        let fault = |f: Fault| Admin::Trap(trap(fc, pc, f));
        let mut push = Vec::with_capacity(1);
        match ins {
            Instr::Nop => {}
            Instr::Unreachable => ctx.code.push(fault(Fault::new(TrapKind::Unreachable))),
            Instr::I32Const(c) => push.push(Value::I32(*c as u32)),
            Instr::I64Const(c) => push.push(Value::I64(*c as u64)),
            Instr::I64Bin(op) => {
                let b = pop().as_u64();
                let a = pop().as_u64();
                push.push(Value::I64(op.apply(a, b)));
            }
            Instr::I64Rel(op) => {
                let b = pop().as_u64();
                let a = pop().as_u64();
                push.push(Value::I32(u32::from(op.apply(a, b))));
            }
            Instr::I64Eqz => push.push(Value::I32(u32::from(pop().as_u64() == 0))),
            Instr::I32Eqz => push.push(Value::I32(u32::from(pop().as_u32() == 0))),
            Instr::I32WrapI64 => push.push(Value::I32(pop().as_u64() as u32)),
            Instr::I64ExtendI32U => push.push(Value::I64(u64::from(pop().as_u32()))),
            Instr::LocalGet(i) => push.push(locals[*i as usize]),
            Instr::LocalSet(i) => locals[*i as usize] = pop(),
            Instr::LocalTee(i) => {
                let v = pop();
                locals[*i as usize] = v;
                push.push(v);
            }
            Instr::GlobalGet(i) => push.push(self.env.inst.globals[*i as usize]),
            Instr::GlobalSet(i) => {
                let v = pop();
                let sp = self.env.inst.sp_global == Some(*i);
                if sp && (v.as_u64() as i64) < self.env.inst.stack_base as i64 {
                    ctx.code.push(fault(Fault::at(TrapKind::StackOverflow, v.as_u64())));
                } else {
                    self.env.inst.globals[*i as usize] = v;
                }
            }
            Instr::Drop => {
                pop();
            }
            Instr::Br(n) => ctx.code.push(Admin::Br(*n)),
            Instr::BrIf(n) => {
                if pop().as_u32() != 0 {
                    ctx.code.push(Admin::Br(*n));
                }
            }
            Instr::Return => ctx.code.push(Admin::Return),
            Instr::Call(f) => return self.call(ctx, fc, pc, depth, *f),
            Instr::CallIndirect(t) => {
                let i = pop().as_u32() as usize;
                let table = &self.code.module.table;
                if i >= table.len() {
                    ctx.code.push(fault(Fault::at(TrapKind::TableOutOfBounds, i as u64)));
                } else if self.code.func_type(table[i]) != &self.code.module.types[*t as usize].ty {
                    ctx.code.push(fault(Fault::new(TrapKind::IndirectTypeMismatch)));
                } else {
                    return self.call(ctx, fc, pc, depth, table[i]);
                }
            }
            Instr::Mem { op, offset } => {
                let n = op.width();
                let value = (!op.is_load()).then(|| pop().as_u64());
                let idx = pop().as_u64();
                match self.effective(idx, *offset, n) {
                    Err(f) => ctx.code.push(fault(f)),
                    Ok(a) => match value {
                        None => {
                            let bytes = self.env.store.read(a, n).expect("checked access");
                            let mut le = 0u64;
                            for (k, b) in bytes.iter().enumerate() {
                                le |= u64::from(*b) << (8 * k);
                            }
                            push.push(if *op == MemOp::I32Load {
                                Value::I32(le as u32)
                            } else {
                                Value::I64(le)
                            });
                        }
                        Some(v) => {
                            let bytes: Vec<u8> = (0..n).map(|k| (v >> (8 * k)) as u8).collect();
                            self.env.store.write(a, &bytes).expect("checked access");
                        }
                    },
                }
            }
            Instr::SegmentNew(o) => {
                let l = pop().as_u64();
                let k = pop().as_u64();
                match self.segment(k, l, *o) {
                    Err(f) => ctx.code.push(fault(f)),
                    Ok(a) => {
                        let pool = self.env.pool.expect("segments imply a tag pool");
                        let t = pool.draw(&mut self.env.inst.rng);
                        self.tag_region(a, l, t);
                        self.env.store.fill(a, l, 0).expect("checked segment");
                        push.push(Value::I64((k & !TAG_MASK) | (u64::from(t) << TAG_SHIFT)));
                    }
                }
            }
            Instr::SegmentSetTag(o) => {
                let l = pop().as_u64();
                let t = pop().as_u64();
                let k = pop().as_u64();
                match self.segment(k, l, *o) {
                    Err(f) => ctx.code.push(fault(f)),
                    Ok(a) => {
                        let tag = self.pointer_tag(t) | self.env.inst.base_tag;
                        self.tag_region(a, l, tag);
                    }
                }
            }
            Instr::SegmentFree(o) => {
                let l = pop().as_u64();
                let k = pop().as_u64();
                match self.segment(k, l, *o) {
                    Err(f) => ctx.code.push(fault(f)),
                    Ok(a) => {
                        let t = self.pointer_tag(k) | self.env.inst.base_tag;
                        self.env.stats.tag_checks += 1;
                        if self.s_tag(a, l, t) {
                            let pool = self.env.pool.expect("segments imply a tag pool");
                            self.tag_region(a, l, pool.next_cycle(t));
                        } else {
                            self.env.stats.tag_check_failures += 1;
                            let rel = a - self.env.inst.mem_base;
                            ctx.code.push(fault(Fault::at(TrapKind::TagMismatch, rel)));
                        }
                    }
                }
            }
            Instr::PointerSign => {
                let k = pop().as_u64();
                push.push(Value::I64(pac::sign(k, &self.env.key, self.env.inst.modifier)));
            }
            Instr::PointerAuth => {
                let k = pop().as_u64();
                let stripped = pac::strip(k);
                if pac::sign(stripped, &self.env.key, self.env.inst.modifier) == k {
                    push.push(Value::I64(stripped));
                } else {
                    ctx.code.push(fault(Fault::at(TrapKind::AuthFailure, k)));
                }
            }
            Instr::Block(_) | Instr::Loop(_) | Instr::If(_) | Instr::Else | Instr::End => {
                unreachable!("structured control is part of the tree")
            }
            Instr::FrameAddr(_) | Instr::FuncPtrMake(_) | Instr::FuncPtrCall(_) => {
                return Err(ExecError::Internal(format!(
                    "pseudo-instruction '{}' reached the reference evaluator",
                    ins.mnemonic()
                )))
            }
        }
        ctx.vals.append(&mut push);
        Ok(())
    }

    fn call(
        &mut self,
        ctx: &mut Ctx,
        fc: &FuncCode,
        pc: usize,
        depth: usize,
        f: u32,
    ) -> Result<(), ExecError> {
        let nimports = self.code.imports.len();
        if (f as usize) < nimports {
            let n = self.code.func_type(f).params.len();
            let args = ctx.vals.split_off(ctx.vals.len() - n);
            match heap::call_host(self.env, self.code.imports[f as usize], &args) {
                Ok(r) => ctx.vals.extend(r),
                Err(fault) => ctx.code.push(Admin::Trap(trap(fc, pc, fault))),
            }
            return Ok(());
        }
        if depth >= self.env.max_call_depth {
            ctx.code
                .push(Admin::Trap(trap(fc, pc, Fault::new(TrapKind::StackOverflow))));
            return Ok(());
        }
        self.call_defined(ctx, f as usize - nimports);
        Ok(())
    }

    /// Applies the guest-visible index mask of the current mode.
    fn masked(&self, i: u64) -> u64 {
        let m = self.env.mode;
        if m.external && !m.internal {
            i & !TAG_MASK
        } else if m.external {
            i & !(1 << TAG_SHIFT)
        } else {
            i
        }
    }

    fn pointer_tag(&self, i: u64) -> u8 {
        ((self.masked(i) >> TAG_SHIFT) & 0xF) as u8
    }

    /// s_tag(a, n) = t: every byte of `[a, a+n)` lies in a granule tagged `t`.
    fn s_tag(&self, a: u64, n: u64, t: u8) -> bool {
        (a..a + n).all(|b| self.env.store.granule_tag(b / GRANULE) == t)
    }

    fn tag_region(&mut self, a: u64, l: u64, t: u8) {
        let mut g = a;
        while g < a + l {
            self.env.store.granule_tags_set(g, GRANULE, t).expect("checked segment");
            g += GRANULE;
        }
    }

    /// Physical address of a load or store of `n` bytes at `idx + offset`.
    fn effective(&mut self, idx: u64, offset: u64, n: u64) -> Result<u64, Fault> {
        let mode = self.env.mode;
        let inst = &*self.env.inst;
        let arena = u128::from(self.env.store.arena_bytes());
        let oob = |a: u128| Fault::at(TrapKind::OutOfBounds, a as u64);
        if !(mode.internal || mode.external) {
            self.env.stats.bounds_checks += 1;
            let a = u128::from(idx) + u128::from(offset);
            if a + u128::from(n) > u128::from(inst.mem_len) {
                return Err(oob(a));
            }
            return Ok(inst.mem_base + a as u64);
        }
        let k = self.masked(idx);
        if k & !(ADDRESS_MASK | TAG_MASK) != 0 {
            return Err(oob(u128::from(idx) + u128::from(offset)));
        }
        let a = u128::from(k & ADDRESS_MASK) + u128::from(offset);
        if !mode.external {
            self.env.stats.bounds_checks += 1;
            if a + u128::from(n) > u128::from(inst.mem_len) {
                return Err(oob(a));
            }
        }
        let phys = u128::from(inst.mem_base) + a;
        if phys + u128::from(n) > arena {
            return Err(oob(a));
        }
        let t = self.pointer_tag(idx) | inst.base_tag;
        self.env.stats.tag_checks += 1;
        if self.s_tag(phys as u64, n, t) {
            Ok(phys as u64)
        } else {
            self.env.stats.tag_check_failures += 1;
            Err(Fault::at(TrapKind::TagMismatch, a as u64))
        }
    }

    /// Physical start of a segment operand `[k + o, k + o + l)`.
    fn segment(&self, k: u64, l: u64, o: u64) -> Result<u64, Fault> {
        let inst = &*self.env.inst;
        let km = self.masked(k);
        if km & !(ADDRESS_MASK | TAG_MASK) != 0 {
            return Err(Fault::at(TrapKind::OutOfBounds, k));
        }
        let a = u128::from(km & ADDRESS_MASK) + u128::from(o);
        if a % u128::from(GRANULE) != 0 || l % GRANULE != 0 {
            return Err(Fault::at(TrapKind::Unaligned, a as u64));
        }
        if a + u128::from(l) > u128::from(inst.mem_len) {
            return Err(Fault::at(TrapKind::OutOfBounds, a as u64));
        }
        let phys = u128::from(inst.mem_base) + a;
        if phys + u128::from(l) > u128::from(self.env.store.arena_bytes()) {
            return Err(Fault::at(TrapKind::OutOfBounds, a as u64));
        }
        Ok(phys as u64)
    }
}
