//! The main interpreter: flat instruction arrays, precomputed branch targets,
//! an explicit label stack and a frame stack.

use std::sync::Arc;

use super::code::{Code, NO_ELSE};
use super::{ExecError, Fault, Trap, TrapKind, Value};
use crate::ast::{Instr, MemOp};
use crate::heap;
use crate::pac;
use crate::runtime::Env;
use crate::tagmem::{mask_index, tag_of, TaggedPointer, ADDRESS_MASK, GRANULE, TAG_MASK};

struct Frame {
    func: usize,
    locals: usize,
    stack: usize,
    labels: usize,
    return_pc: usize,
}

struct Label {
    cont: usize,
    arity: usize,
    height: usize,
    is_loop: bool,
}

fn canonical(m: u64) -> bool {
    m & !(ADDRESS_MASK | TAG_MASK) == 0
}

/// Physical address of a checked memory access.
pub(crate) fn access(env: &mut Env, idx: u64, offset: u64, width: u64) -> Result<u64, Fault> {
    let mode = env.mode;
    let inst = &*env.inst;
    if !mode.tag_checked() {
        env.stats.bounds_checks += 1;
        let end = idx.checked_add(offset).and_then(|a| a.checked_add(width));
        return match end {
            Some(e) if e <= inst.mem_len => Ok(inst.mem_base + idx + offset),
            _ => Err(Fault::at(TrapKind::OutOfBounds, idx.wrapping_add(offset))),
        };
    }
    let m = mask_index(idx, mode);
    if !canonical(m) {
        return Err(Fault::at(TrapKind::OutOfBounds, idx.wrapping_add(offset)));
    }
    let addr = (m & ADDRESS_MASK)
        .checked_add(offset)
        .ok_or(Fault::at(TrapKind::OutOfBounds, m & ADDRESS_MASK))?;
    if mode.bounds_checked() {
        env.stats.bounds_checks += 1;
        if addr + width > inst.mem_len {
            return Err(Fault::at(TrapKind::OutOfBounds, addr));
        }
    }
    let phys = inst.mem_base + addr;
    if !env.store.in_bounds(phys, width) {
        return Err(Fault::at(TrapKind::OutOfBounds, addr));
    }
    let expected = tag_of(m) | inst.base_tag;
    env.stats.tag_checks += 1;
    match env.store.granule_tags_get(phys, width) {
        Ok(t) if t == expected => Ok(phys),
        _ => {
            env.stats.tag_check_failures += 1;
            Err(Fault::at(TrapKind::TagMismatch, addr))
        }
    }
}

/// Physical start of the segment `[k + o, k + o + l)`.
fn segment(env: &Env, k: u64, l: u64, o: u64) -> Result<u64, Fault> {
    let m = mask_index(k, env.mode);
    if !canonical(m) {
        return Err(Fault::at(TrapKind::OutOfBounds, k));
    }
    let addr = (m & ADDRESS_MASK)
        .checked_add(o)
        .ok_or(Fault::at(TrapKind::OutOfBounds, m & ADDRESS_MASK))?;
    if addr % GRANULE != 0 || l % GRANULE != 0 {
        return Err(Fault::at(TrapKind::Unaligned, addr));
    }
    if addr.checked_add(l).map_or(true, |e| e > env.inst.mem_len) {
        return Err(Fault::at(TrapKind::OutOfBounds, addr));
    }
    let phys = env.inst.mem_base + addr;
    if !env.store.in_bounds(phys, l) {
        return Err(Fault::at(TrapKind::OutOfBounds, addr));
    }
    Ok(phys)
}

// Segment instructions only validate in modes with internal tagging, which
// always have a tag pool.
const POOL: &str = "segment instructions require a tag pool";

fn segment_new(env: &mut Env, k: u64, l: u64, o: u64) -> Result<u64, Fault> {
    let phys = segment(env, k, l, o)?;
    let pool = env.pool.expect(POOL);
    let t = pool.draw(&mut env.inst.rng);
    env.store.granule_tags_set(phys, l, t).expect("checked segment");
    env.store.fill(phys, l, 0).expect("checked segment");
    Ok(TaggedPointer(k).with_tag(t).raw())
}

fn segment_set_tag(env: &mut Env, k: u64, t: u64, l: u64, o: u64) -> Result<(), Fault> {
    let phys = segment(env, k, l, o)?;
    let tag = tag_of(mask_index(t, env.mode)) | env.inst.base_tag;
    env.store.granule_tags_set(phys, l, tag).expect("checked segment");
    Ok(())
}

fn segment_free(env: &mut Env, k: u64, l: u64, o: u64) -> Result<(), Fault> {
    let phys = segment(env, k, l, o)?;
    let pool = env.pool.expect(POOL);
    let expected = tag_of(mask_index(k, env.mode)) | env.inst.base_tag;
    env.stats.tag_checks += 1;
    let ok = env.store.tags_in(phys / GRANULE..(phys + l) / GRANULE).all(|t| t == expected);
    if !ok {
        env.stats.tag_check_failures += 1;
        return Err(Fault::at(TrapKind::TagMismatch, phys - env.inst.mem_base));
    }
    env.store
        .granule_tags_set(phys, l, pool.next_cycle(expected))
        .expect("checked segment");
    Ok(())
}

struct Machine<'e, 'a> {
    env: &'e mut Env<'a>,
    code: Arc<Code>,
    stack: Vec<Value>,
    locals: Vec<Value>,
    frames: Vec<Frame>,
    labels: Vec<Label>,
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
    let mut m = Machine {
        env,
        code,
        stack: args.to_vec(),
        locals: Vec::new(),
        frames: Vec::new(),
        labels: Vec::new(),
        steps: 0,
    };
    m.enter(func as usize - nimports, 0);
    m.run()
}

impl Machine<'_, '_> {
    fn enter(&mut self, func: usize, return_pc: usize) {
        let f = &self.code.funcs[func];
        let base = self.locals.len();
        let args_at = self.stack.len() - f.nparams;
        self.locals.extend(self.stack.drain(args_at..));
        self.locals
            .extend(f.local_types[f.nparams..].iter().map(|&t| Value::zero(t)));
        self.frames.push(Frame {
            func,
            locals: base,
            stack: self.stack.len(),
            labels: self.labels.len(),
            return_pc,
        });
    }

    /// Pops the current frame. Returns the caller's function and resume pc,
    /// or `None` when the outermost frame returned.
    fn leave(&mut self) -> Option<(usize, usize)> {
        let fr = self.frames.pop().expect("frame to leave");
        let arity = self.code.funcs[fr.func].result_arity;
        let results_at = self.stack.len() - arity;
        self.stack.drain(fr.stack..results_at);
        self.labels.truncate(fr.labels);
        self.locals.truncate(fr.locals);
        self.frames.last().map(|c| (c.func, fr.return_pc))
    }

    fn trap(&self, func: usize, pc: usize, f: Fault) -> ExecError {
        let fc = &self.code.funcs[func];
        ExecError::Trap(Trap {
            kind: f.kind,
            func: fc.name.clone(),
            index: fc.origin_of(pc),
            addr: f.addr,
        })
    }

    fn pop(&mut self) -> Value {
        self.stack.pop().expect("validated operand stack")
    }

    fn pop_u64(&mut self) -> u64 {
        self.pop().as_u64()
    }

    fn pop_u32(&mut self) -> u32 {
        self.pop().as_u32()
    }

    fn run(&mut self) -> Result<Vec<Value>, ExecError> {
        let code = self.code.clone();
        let mut fi = self.frames.last().unwrap().func;
        let mut pc = 0usize;
        let mut lb = self.frames.last().unwrap().locals;
        loop {
            let f = &code.funcs[fi];
            if pc >= f.body.len() {
                match self.leave() {
                    None => return Ok(std::mem::take(&mut self.stack)),
                    Some((cf, cpc)) => {
                        fi = cf;
                        pc = cpc;
                        lb = self.frames.last().unwrap().locals;
                        continue;
                    }
                }
            }
            let ins = &f.body[pc];
            if !matches!(ins, Instr::End | Instr::Else) {
                if self.env.fuel.is_some_and(|limit| self.steps >= limit) {
                    return Err(ExecError::FuelExhausted);
                }
                self.steps += 1;
                self.env.stats.instructions += 1;
            }
            let mut next = pc + 1;
            match ins {
                Instr::Nop => {}
                Instr::Unreachable => return Err(self.trap(fi, pc, Fault::new(TrapKind::Unreachable))),
                Instr::I32Const(c) => self.stack.push(Value::I32(*c as u32)),
                Instr::I64Const(c) => self.stack.push(Value::I64(*c as u64)),
                Instr::I64Bin(op) => {
                    let b = self.pop_u64();
                    let a = self.pop_u64();
                    self.stack.push(Value::I64(op.apply(a, b)));
                }
                Instr::I64Rel(op) => {
                    let b = self.pop_u64();
                    let a = self.pop_u64();
                    self.stack.push(Value::I32(op.apply(a, b) as u32));
                }
                Instr::I64Eqz => {
                    let a = self.pop_u64();
                    self.stack.push(Value::I32((a == 0) as u32));
                }
                Instr::I32Eqz => {
                    let a = self.pop_u32();
                    self.stack.push(Value::I32((a == 0) as u32));
                }
                Instr::I32WrapI64 => {
                    let a = self.pop_u64();
                    self.stack.push(Value::I32(a as u32));
                }
                Instr::I64ExtendI32U => {
                    let a = self.pop_u32();
                    self.stack.push(Value::I64(a as u64));
                }
                Instr::LocalGet(i) => self.stack.push(self.locals[lb + *i as usize]),
                Instr::LocalSet(i) => {
                    let v = self.pop();
                    self.locals[lb + *i as usize] = v;
                }
                Instr::LocalTee(i) => {
                    let v = *self.stack.last().expect("validated operand stack");
                    self.locals[lb + *i as usize] = v;
                }
                Instr::GlobalGet(i) => self.stack.push(self.env.inst.globals[*i as usize]),
                Instr::GlobalSet(i) => {
                    let v = self.pop();
                    if self.env.inst.sp_global == Some(*i)
                        && (v.as_u64() as i64) < self.env.inst.stack_base as i64
                    {
                        return Err(self.trap(fi, pc, Fault::at(TrapKind::StackOverflow, v.as_u64())));
                    }
                    self.env.inst.globals[*i as usize] = v;
                }
                Instr::Drop => {
                    self.pop();
                }
                Instr::Block(bt) => self.labels.push(Label {
                    cont: f.end[pc] as usize + 1,
                    arity: bt.arity(),
                    height: self.stack.len(),
                    is_loop: false,
                }),
                Instr::Loop(_) => self.labels.push(Label {
                    cont: pc + 1,
                    arity: 0,
                    height: self.stack.len(),
                    is_loop: true,
                }),
                Instr::If(bt) => {
                    let c = self.pop_u32();
                    let label = Label {
                        cont: f.end[pc] as usize + 1,
                        arity: bt.arity(),
                        height: self.stack.len(),
                        is_loop: false,
                    };
                    if c != 0 {
                        self.labels.push(label);
                    } else if f.else_at[pc] != NO_ELSE {
                        self.labels.push(label);
                        next = f.else_at[pc] as usize + 1;
                    } else {
                        next = f.end[pc] as usize + 1;
                    }
                }
                Instr::Else => next = f.end[pc] as usize,
                Instr::End => {
                    self.labels.pop();
                }
                Instr::Br(d) => next = self.branch(*d),
                Instr::BrIf(d) => {
                    if self.pop_u32() != 0 {
                        next = self.branch(*d);
                    }
                }
                Instr::Return => {
                    next = usize::MAX;
                }
                Instr::Call(callee) => {
                    let callee = *callee as usize;
                    if let Some(entered) = self.call(fi, pc, callee)? {
                        fi = entered;
                        lb = self.frames.last().unwrap().locals;
                        next = 0;
                    }
                }
                Instr::CallIndirect(t) => {
                    let idx = self.pop_u32() as usize;
                    let Some(&target) = code.module.table.get(idx) else {
                        return Err(self.trap(fi, pc, Fault::at(TrapKind::TableOutOfBounds, idx as u64)));
                    };
                    if code.func_type(target) != &code.module.types[*t as usize].ty {
                        return Err(self.trap(fi, pc, Fault::new(TrapKind::IndirectTypeMismatch)));
                    }
                    if let Some(entered) = self.call(fi, pc, target as usize)? {
                        fi = entered;
                        lb = self.frames.last().unwrap().locals;
                        next = 0;
                    }
                }
                Instr::Mem { op, offset } => {
                    let width = op.width();
                    if op.is_load() {
                        let idx = self.pop_u64();
                        let phys = access(self.env, idx, *offset, width).map_err(|e| self.trap(fi, pc, e))?;
                        let raw = self.env.store.read_le(phys, width).expect("checked access");
                        self.stack.push(match op {
                            MemOp::I32Load => Value::I32(raw as u32),
                            _ => Value::I64(raw),
                        });
                    } else {
                        let v = self.pop_u64();
                        let idx = self.pop_u64();
                        let phys = access(self.env, idx, *offset, width).map_err(|e| self.trap(fi, pc, e))?;
                        self.env.store.write_le(phys, width, v).expect("checked access");
                    }
                }
                Instr::SegmentNew(o) => {
                    let l = self.pop_u64();
                    let k = self.pop_u64();
                    let r = segment_new(self.env, k, l, *o).map_err(|e| self.trap(fi, pc, e))?;
                    self.stack.push(Value::I64(r));
                }
                Instr::SegmentSetTag(o) => {
                    let l = self.pop_u64();
                    let t = self.pop_u64();
                    let k = self.pop_u64();
                    segment_set_tag(self.env, k, t, l, *o).map_err(|e| self.trap(fi, pc, e))?;
                }
                Instr::SegmentFree(o) => {
                    let l = self.pop_u64();
                    let k = self.pop_u64();
                    segment_free(self.env, k, l, *o).map_err(|e| self.trap(fi, pc, e))?;
                }
                Instr::PointerSign => {
                    let k = self.pop_u64();
                    let s = pac::sign(k, &self.env.key, self.env.inst.modifier);
                    self.stack.push(Value::I64(s));
                }
                Instr::PointerAuth => {
                    let k = self.pop_u64();
                    match pac::authenticate(k, &self.env.key, self.env.inst.modifier) {
                        Ok(v) => self.stack.push(Value::I64(v)),
                        Err(_) => return Err(self.trap(fi, pc, Fault::at(TrapKind::AuthFailure, k))),
                    }
                }
                Instr::FrameAddr(_) | Instr::FuncPtrMake(_) | Instr::FuncPtrCall(_) => {
                    return Err(ExecError::Internal(format!(
                        "pseudo-instruction '{}' reached the interpreter",
                        ins.mnemonic()
                    )))
                }
            }
            pc = next;
        }
    }

    /// Branches to label `depth`; returns the next pc. A branch past the
    /// outermost label of the function returns from it.
    fn branch(&mut self, depth: u32) -> usize {
        let fr = self.frames.last().unwrap();
        if depth as usize == self.labels.len() - fr.labels {
            return usize::MAX;
        }
        let li = self.labels.len() - 1 - depth as usize;
        let Label {
            cont,
            arity,
            height,
            is_loop,
        } = self.labels[li];
        let vals_at = self.stack.len() - arity;
        self.stack.drain(height..vals_at);
        self.labels.truncate(if is_loop { li + 1 } else { li });
        cont
    }

    /// Calls function `callee` from instruction `pc` of `fi`. Host functions
    /// run to completion and return `None`; defined functions get a frame
    /// and return their defined index.
    fn call(&mut self, fi: usize, pc: usize, callee: usize) -> Result<Option<usize>, ExecError> {
        let nimports = self.code.imports.len();
        if callee < nimports {
            let nparams = self.code.func_type(callee as u32).params.len();
            let args = self.stack.split_off(self.stack.len() - nparams);
            let r = heap::call_host(self.env, self.code.imports[callee], &args)
                .map_err(|f| self.trap(fi, pc, f))?;
            self.stack.extend(r);
            return Ok(None);
        }
        if self.frames.len() >= self.env.max_call_depth {
            return Err(self.trap(fi, pc, Fault::new(TrapKind::StackOverflow)));
        }
        self.enter(callee - nimports, pc + 1);
        Ok(Some(callee - nimports))
    }
}
