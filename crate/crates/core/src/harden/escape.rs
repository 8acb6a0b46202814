//! Intra-procedural escape analysis of frame slots.
//!
//! An abstract interpretation over the operand stack tracks which values are
//! addresses of frame slots. Locals are never tracked: storing a slot address
//! into a local counts as an escape.

use crate::ast::*;
use crate::validate::stack_effect;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Offset {
    Known(i64),
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbstractValue {
    Bottom,
    Const(i64),
    SlotAddr(u32, Offset),
    Opaque,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlotClass {
    pub escapes: bool,
    pub unsafe_gep: bool,
}

impl SlotClass {
    pub fn instrument(self) -> bool {
        self.escapes || self.unsafe_gep
    }
}

struct Label {
    height: usize,
    arity: usize,
    is_loop: bool,
    result: AbstractValue,
    unreachable: bool,
}

struct Analysis<'a> {
    f: &'a Function,
    out: Vec<SlotClass>,
    stack: Vec<AbstractValue>,
    labels: Vec<Label>,
}

impl Analysis<'_> {
    fn escape(&mut self, v: AbstractValue) {
        if let AbstractValue::SlotAddr(s, _) = v {
            self.out[s as usize].escapes = true;
        }
    }

    fn gep(&mut self, s: u32) {
        self.out[s as usize].unsafe_gep = true;
    }

    fn join(&mut self, a: AbstractValue, b: AbstractValue) -> AbstractValue {
        use AbstractValue::*;
        match (a, b) {
            (Bottom, x) | (x, Bottom) => x,
            (Const(x), Const(y)) if x == y => Const(x),
            (SlotAddr(s, o1), SlotAddr(t, o2)) if s == t => {
                SlotAddr(s, if o1 == o2 { o1 } else { Offset::Unknown })
            }
            (x, y) => {
                self.escape(x);
                self.escape(y);
                Opaque
            }
        }
    }

    fn pop(&mut self) -> AbstractValue {
        let l = self.labels.last().unwrap();
        if self.stack.len() > l.height {
            self.stack.pop().unwrap()
        } else {
            AbstractValue::Bottom
        }
    }

    fn set_unreachable(&mut self) {
        let l = self.labels.last_mut().unwrap();
        self.stack.truncate(l.height);
        l.unreachable = true;
    }

    /// Transfers the top `arity` values into branch target `depth`.
    fn branch(&mut self, depth: u32) {
        let target = self.labels.len() - 1 - depth as usize;
        if target == 0 {
            // Function-level label: the values are returned.
            for _ in 0..self.labels[0].arity {
                let v = self.pop();
                self.escape(v);
            }
            return;
        }
        if self.labels[target].is_loop || self.labels[target].arity == 0 {
            return;
        }
        let v = self.pop();
        self.stack.push(v);
        let joined = self.join(self.labels[target].result, v);
        self.labels[target].result = joined;
    }

    fn check_access(&mut self, addr: AbstractValue, imm: u64, width: u64) {
        if let AbstractValue::SlotAddr(s, off) = addr {
            let size = self.f.frame_slots[s as usize].size_bytes as i128;
            let ok = match off {
                Offset::Known(o) => o >= 0 && o as i128 + imm as i128 + width as i128 <= size,
                Offset::Unknown => false,
            };
            if !ok {
                self.gep(s);
            }
        }
    }

    fn arith(&mut self, op: BinOp, a: AbstractValue, b: AbstractValue) -> AbstractValue {
        use AbstractValue::*;
        match (op, a, b) {
            (_, Const(x), Const(y)) => Const(op.apply(x as u64, y as u64) as i64),
            (BinOp::Add, SlotAddr(s, o), Const(c)) | (BinOp::Add, Const(c), SlotAddr(s, o)) => {
                SlotAddr(s, shift(o, Some(c)))
            }
            (BinOp::Sub, SlotAddr(s, o), Const(c)) => SlotAddr(s, shift(o, c.checked_neg())),
            (BinOp::Add, SlotAddr(s, _), other) | (BinOp::Add, other, SlotAddr(s, _))
            | (BinOp::Sub, SlotAddr(s, _), other)
                if !matches!(other, SlotAddr(..)) =>
            {
                self.gep(s);
                SlotAddr(s, Offset::Unknown)
            }
            (_, x, y) => {
                self.escape(x);
                self.escape(y);
                Opaque
            }
        }
    }

    fn step(&mut self, m: &Module, ins: &Instr) {
        use AbstractValue::*;
        match ins {
            Instr::Block(bt) | Instr::Loop(bt) | Instr::If(bt) => {
                if matches!(ins, Instr::If(_)) {
                    self.pop();
                }
                self.labels.push(Label {
                    height: self.stack.len(),
                    arity: bt.arity(),
                    is_loop: matches!(ins, Instr::Loop(_)),
                    result: Bottom,
                    unreachable: false,
                });
            }
            Instr::Else => {
                self.close_arm();
                let l = self.labels.last_mut().unwrap();
                l.unreachable = false;
            }
            Instr::End => {
                self.close_arm();
                let l = self.labels.pop().unwrap();
                if l.arity == 1 {
                    self.stack.push(l.result);
                }
            }
            Instr::Br(d) => {
                self.branch(*d);
                self.set_unreachable();
            }
            Instr::BrIf(d) => {
                self.pop();
                self.branch(*d);
            }
            Instr::Return => {
                self.branch(self.labels.len() as u32 - 1);
                self.set_unreachable();
            }
            Instr::Unreachable => self.set_unreachable(),
            Instr::Drop => {
                self.pop();
            }
            Instr::I64Const(c) => self.stack.push(Const(*c)),
            Instr::FrameAddr(s) => self.stack.push(SlotAddr(*s, Offset::Known(0))),
            Instr::I64Bin(op) => {
                let b = self.pop();
                let a = self.pop();
                let r = self.arith(*op, a, b);
                self.stack.push(r);
            }
            Instr::I64Rel(_) => {
                self.pop();
                self.pop();
                self.stack.push(Opaque);
            }
            Instr::I64Eqz => {
                self.pop();
                self.stack.push(Opaque);
            }
            Instr::Mem { op, offset } => {
                if op.is_load() {
                    let addr = self.pop();
                    self.check_access(addr, *offset, op.width());
                    self.stack.push(Opaque);
                } else {
                    let value = self.pop();
                    self.escape(value);
                    let addr = self.pop();
                    self.check_access(addr, *offset, op.width());
                }
            }
            other => {
                // Every remaining operand use is a sink.
                let (pops, pushes) = stack_effect(m, self.f, other)
                    .ok()
                    .flatten()
                    .unwrap_or_default();
                for _ in 0..pops.len() {
                    let v = self.pop();
                    self.escape(v);
                }
                for _ in 0..pushes.len() {
                    self.stack.push(Opaque);
                }
            }
        }
    }

    /// Folds the fallthrough value of the current arm into its label.
    fn close_arm(&mut self) {
        let l = self.labels.last().unwrap();
        if l.arity == 1 && !(l.unreachable && self.stack.len() == l.height) {
            let v = self.pop();
            let joined = self.join(self.labels.last().unwrap().result, v);
            self.labels.last_mut().unwrap().result = joined;
        }
        let l = self.labels.last().unwrap();
        self.stack.truncate(l.height);
    }
}

fn shift(o: Offset, by: Option<i64>) -> Offset {
    match (o, by) {
        (Offset::Known(a), Some(b)) => a.checked_add(b).map_or(Offset::Unknown, Offset::Known),
        _ => Offset::Unknown,
    }
}

/// Classifies every frame slot of `f`, in declaration order.
pub fn classify_slots(m: &Module, f: &Function) -> Vec<SlotClass> {
    let arity = m
        .types
        .get(f.type_idx as usize)
        .map_or(0, |t| t.ty.results.len());
    let mut a = Analysis {
        f,
        out: vec![SlotClass::default(); f.frame_slots.len()],
        stack: Vec::new(),
        labels: vec![Label {
            height: 0,
            arity,
            is_loop: false,
            result: AbstractValue::Bottom,
            unreachable: false,
        }],
    };
    for ins in &f.body {
        a.step(m, ins);
    }
    // Values reaching the end of the function are returned.
    while a.stack.len() > a.labels[0].height {
        let v = a.stack.pop().unwrap();
        a.escape(v);
    }
    a.out
}
