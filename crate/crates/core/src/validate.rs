//! Static typing of modules.
//!
//! Standard operand-stack validation with a control-frame stack and
//! polymorphic typing after unconditional branches, plus the rules of the
//! segment and pointer-authentication instructions:
//!
//! | instruction        | type                  | needs memory |
//! |--------------------|-----------------------|--------------|
//! | `segment.new o`    | `i64 i64 -> i64`      | yes          |
//! | `segment.set_tag o`| `i64 i64 i64 -> ε`    | yes          |
//! | `segment.free o`   | `i64 i64 -> ε`        | yes          |
//! | `i64.pointer_sign` | `i64 -> i64`          | no           |
//! | `i64.pointer_auth` | `i64 -> i64`          | no           |

use std::fmt;

use crate::ast::*;
use crate::config::FeatureSet;

/// A module that passed validation, together with the optional features
/// its code actually uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidatedModule {
    module: Module,
    used: FeatureSet,
}

impl ValidatedModule {
    pub fn module(&self) -> &Module {
        &self.module
    }

    pub fn into_module(self) -> Module {
        self.module
    }

    pub fn used_features(&self) -> FeatureSet {
        self.used
    }
}

/// A gated instruction used while its feature is disabled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureViolation {
    pub func: String,
    pub index: usize,
    pub instr: &'static str,
}

impl fmt::Display for FeatureViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let needs = if self.instr.starts_with("segment.") {
            "internal memory safety"
        } else {
            "pointer authentication"
        };
        write!(
            f,
            "{}:{}: '{}' requires {needs}, which is disabled",
            self.func, self.index, self.instr
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ValidationError {
    #[error("{}", display_features(.0))]
    Feature(Vec<FeatureViolation>),
    #[error("{func}:{index}: {message}")]
    Type {
        func: String,
        index: usize,
        message: String,
    },
    #[error("{0}")]
    Module(String),
}

fn display_features(v: &[FeatureViolation]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn validate(m: &Module, features: FeatureSet) -> Result<ValidatedModule, ValidationError> {
    let mut violations = Vec::new();
    let mut used = FeatureSet::NONE;
    for f in &m.functions {
        for (index, ins) in f.body.iter().enumerate() {
            let gated_off = if ins.is_segment() {
                used.segments = true;
                !features.segments
            } else if ins.is_pointer_auth() {
                used.ptr_auth = true;
                !features.ptr_auth
            } else {
                false
            };
            if gated_off {
                violations.push(FeatureViolation {
                    func: f.name.clone(),
                    index,
                    instr: ins.mnemonic(),
                });
            }
        }
    }
    if !violations.is_empty() {
        return Err(ValidationError::Feature(violations));
    }

    check_module(m)?;
    for f in &m.functions {
        check_function(m, f)?;
    }
    Ok(ValidatedModule {
        module: m.clone(),
        used,
    })
}

fn check_module(m: &Module) -> Result<(), ValidationError> {
    let err = |s: String| Err(ValidationError::Module(s));
    for (i, t) in m.types.iter().enumerate() {
        if t.ty.results.len() > 1 {
            return err(format!("type {i} has more than one result"));
        }
    }
    for imp in &m.imports {
        if imp.type_idx as usize >= m.types.len() {
            return err(format!("import ${} has unknown type {}", imp.name, imp.type_idx));
        }
    }
    for f in &m.functions {
        if f.type_idx as usize >= m.types.len() {
            return err(format!("function ${} has unknown type {}", f.name, f.type_idx));
        }
        if !f.frame_slots.is_empty() && m.memory_pages.is_none() {
            return err(format!(
                "function ${} declares frame slots but the module has no memory",
                f.name
            ));
        }
        if f.frame_slots.iter().any(|s| s.size_bytes == 0) {
            return err(format!("function ${} has an empty frame slot", f.name));
        }
    }
    let n = m.func_count() as u32;
    for &t in &m.table {
        if t >= n {
            return err(format!("table entry {t} names no function"));
        }
    }
    for e in &m.exports {
        if e.func >= n {
            return err(format!("export \"{}\" names no function", e.name));
        }
    }
    if let Some(s) = m.start {
        match m.func_type(s) {
            Some(t) if t.params.is_empty() && t.results.is_empty() => {}
            Some(_) => return err("start function must take and return nothing".into()),
            None => return err(format!("start function {s} does not exist")),
        }
    }
    for g in &m.globals {
        if g.ty == ValType::I32 && i32::try_from(g.init).is_err() {
            return err(format!("global ${} initializer out of range", g.name));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum CtrlKind {
    Func,
    Block,
    Loop,
    If,
    Else,
}

#[derive(Debug)]
struct CtrlFrame {
    kind: CtrlKind,
    results: Vec<ValType>,
    height: usize,
    unreachable: bool,
}

impl CtrlFrame {
    fn label_types(&self) -> &[ValType] {
        if self.kind == CtrlKind::Loop {
            &[]
        } else {
            &self.results
        }
    }
}

/// Operand types popped and pushed by a non-control instruction.
pub(crate) type Effect = (Vec<ValType>, Vec<ValType>);

/// Stack effect of every instruction that does not alter control flow.
/// Returns `Ok(None)` for structured-control instructions.
pub(crate) fn stack_effect(
    m: &Module,
    f: &Function,
    ins: &Instr,
) -> Result<Option<Effect>, String> {
    use ValType::{I32, I64};
    let params = m
        .types
        .get(f.type_idx as usize)
        .map(|t| t.ty.params.as_slice())
        .unwrap_or(&[]);
    let local = |i: u32| -> Result<ValType, String> {
        params
            .iter()
            .chain(f.locals.iter())
            .nth(i as usize)
            .copied()
            .ok_or_else(|| format!("unknown local {i}"))
    };
    let global = |i: u32| -> Result<&Global, String> {
        m.globals
            .get(i as usize)
            .ok_or_else(|| format!("unknown global {i}"))
    };
    let need_memory = || -> Result<(), String> {
        if m.memory_pages.is_some() {
            Ok(())
        } else {
            Err(format!("'{}' requires a declared memory", ins.mnemonic()))
        }
    };
    let need_table = || -> Result<(), String> {
        if m.table.is_empty() {
            Err(format!("'{}' requires a table", ins.mnemonic()))
        } else {
            Ok(())
        }
    };
    let ty = |t: u32| -> Result<&FuncType, String> {
        m.types
            .get(t as usize)
            .map(|d| &d.ty)
            .ok_or_else(|| format!("unknown type {t}"))
    };
    let e = |pops: &[ValType], pushes: &[ValType]| Ok(Some((pops.to_vec(), pushes.to_vec())));
    match ins {
        Instr::Block(_)
        | Instr::Loop(_)
        | Instr::If(_)
        | Instr::Else
        | Instr::End
        | Instr::Br(_)
        | Instr::BrIf(_)
        | Instr::Return
        | Instr::Unreachable => Ok(None),
        Instr::Nop => e(&[], &[]),
        Instr::Drop => Ok(None),
        Instr::I32Const(_) => e(&[], &[I32]),
        Instr::I64Const(_) => e(&[], &[I64]),
        Instr::I64Bin(_) => e(&[I64, I64], &[I64]),
        Instr::I64Rel(_) => e(&[I64, I64], &[I32]),
        Instr::I64Eqz => e(&[I64], &[I32]),
        Instr::I32Eqz => e(&[I32], &[I32]),
        Instr::I32WrapI64 => e(&[I64], &[I32]),
        Instr::I64ExtendI32U => e(&[I32], &[I64]),
        Instr::LocalGet(i) => e(&[], &[local(*i)?]),
        Instr::LocalSet(i) => e(&[local(*i)?], &[]),
        Instr::LocalTee(i) => {
            let t = local(*i)?;
            e(&[t], &[t])
        }
        Instr::GlobalGet(i) => e(&[], &[global(*i)?.ty]),
        Instr::GlobalSet(i) => {
            let g = global(*i)?;
            if !g.mutable {
                return Err(format!("global ${} is immutable", g.name));
            }
            e(&[g.ty], &[])
        }
        Instr::Call(fi) => {
            let t = m
                .func_type(*fi)
                .ok_or_else(|| format!("unknown function {fi}"))?;
            e(&t.params, &t.results)
        }
        Instr::CallIndirect(t) => {
            need_table()?;
            let t = ty(*t)?;
            let mut pops = t.params.clone();
            pops.push(I32);
            e(&pops, &t.results)
        }
        Instr::FuncPtrCall(t) => {
            need_table()?;
            let t = ty(*t)?;
            let mut pops = t.params.clone();
            pops.push(I64);
            e(&pops, &t.results)
        }
        Instr::FuncPtrMake(fi) => {
            if !m.table.contains(fi) {
                return Err(format!("function {fi} is not in the table"));
            }
            e(&[], &[I64])
        }
        Instr::FrameAddr(s) => {
            if *s as usize >= f.frame_slots.len() {
                return Err(format!("unknown frame slot {s}"));
            }
            e(&[], &[I64])
        }
        Instr::Mem { op, .. } => {
            need_memory()?;
            if op.is_load() {
                e(&[I64], &[op.value_type()])
            } else {
                e(&[I64, op.value_type()], &[])
            }
        }
        Instr::SegmentNew(_) => {
            need_memory()?;
            e(&[I64, I64], &[I64])
        }
        Instr::SegmentSetTag(_) => {
            need_memory()?;
            e(&[I64, I64, I64], &[])
        }
        Instr::SegmentFree(_) => {
            need_memory()?;
            e(&[I64, I64], &[])
        }
        Instr::PointerSign | Instr::PointerAuth => e(&[I64], &[I64]),
    }
}

struct Checker<'a> {
    m: &'a Module,
    f: &'a Function,
    index: usize,
    stack: Vec<Option<ValType>>,
    ctrl: Vec<CtrlFrame>,
}

fn show(ts: &[Option<ValType>]) -> String {
    let parts: Vec<&str> = ts
        .iter()
        .map(|t| t.map(ValType::name).unwrap_or("_"))
        .collect();
    format!("[{}]", parts.join(" "))
}

impl Checker<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ValidationError> {
        Err(ValidationError::Type {
            func: self.f.name.clone(),
            index: self.index,
            message: message.into(),
        })
    }

    fn pop(&mut self, expected: Option<ValType>) -> Result<Option<ValType>, ValidationError> {
        let frame = self.ctrl.last().expect("control stack never empty while checking");
        if self.stack.len() == frame.height {
            if frame.unreachable {
                return Ok(expected);
            }
            return self.fail(format!(
                "'{}' expected {} but the operand stack is empty",
                self.f.body.get(self.index).map(Instr::mnemonic).unwrap_or("end"),
                expected.map(ValType::name).unwrap_or("a value")
            ));
        }
        let actual = self.stack.pop().unwrap();
        match (actual, expected) {
            (Some(a), Some(e)) if a != e => self.fail(format!(
                "'{}' expected {e} but found {a}",
                self.f.body.get(self.index).map(Instr::mnemonic).unwrap_or("end")
            )),
            (None, e) => Ok(e),
            (a, _) => Ok(a),
        }
    }

    fn pop_all(&mut self, types: &[ValType]) -> Result<(), ValidationError> {
        let height = self.ctrl.last().unwrap().height;
        let available = self.stack.len() - height;
        if available < types.len() && !self.ctrl.last().unwrap().unreachable {
            let want: Vec<Option<ValType>> = types.iter().copied().map(Some).collect();
            return self.fail(format!(
                "'{}' expected {} but found {}",
                self.f.body.get(self.index).map(Instr::mnemonic).unwrap_or("end"),
                show(&want),
                show(&self.stack[height..])
            ));
        }
        for &t in types.iter().rev() {
            self.pop(Some(t))?;
        }
        Ok(())
    }

    fn push_ctrl(&mut self, kind: CtrlKind, results: Vec<ValType>) {
        self.ctrl.push(CtrlFrame {
            kind,
            results,
            height: self.stack.len(),
            unreachable: false,
        });
    }

    fn pop_ctrl(&mut self) -> Result<CtrlFrame, ValidationError> {
        let results = self.ctrl.last().unwrap().results.clone();
        self.pop_all(&results)?;
        let frame = self.ctrl.last().unwrap();
        if self.stack.len() != frame.height {
            let extra = show(&self.stack[frame.height..]);
            return self.fail(format!("values {extra} remain at the end of a block"));
        }
        Ok(self.ctrl.pop().unwrap())
    }

    fn set_unreachable(&mut self) {
        let frame = self.ctrl.last_mut().unwrap();
        self.stack.truncate(frame.height);
        frame.unreachable = true;
    }

    fn label(&self, depth: u32) -> Result<Vec<ValType>, ValidationError> {
        let n = self.ctrl.len();
        if depth as usize >= n {
            return self.fail(format!("branch depth {depth} exceeds nesting depth {}", n - 1));
        }
        Ok(self.ctrl[n - 1 - depth as usize].label_types().to_vec())
    }

    fn block_results(bt: BlockType) -> Vec<ValType> {
        bt.0.into_iter().collect()
    }

    fn run(mut self) -> Result<(), ValidationError> {
        let results = self.m.types[self.f.type_idx as usize].ty.results.clone();
        self.push_ctrl(CtrlKind::Func, results);
        for (i, ins) in self.f.body.iter().enumerate() {
            self.index = i;
            self.step(ins)?;
        }
        self.index = self.f.body.len();
        if self.ctrl.len() != 1 {
            return self.fail("unterminated block at end of function");
        }
        self.pop_ctrl()?;
        Ok(())
    }

    fn step(&mut self, ins: &Instr) -> Result<(), ValidationError> {
        match ins {
            Instr::Unreachable => self.set_unreachable(),
            Instr::Drop => {
                self.pop(None)?;
            }
            Instr::Block(bt) => self.push_ctrl(CtrlKind::Block, Self::block_results(*bt)),
            Instr::Loop(bt) => self.push_ctrl(CtrlKind::Loop, Self::block_results(*bt)),
            Instr::If(bt) => {
                self.pop(Some(ValType::I32))?;
                self.push_ctrl(CtrlKind::If, Self::block_results(*bt));
            }
            Instr::Else => {
                if self.ctrl.last().map(|c| c.kind) != Some(CtrlKind::If) {
                    return self.fail("'else' without 'if'");
                }
                let frame = self.pop_ctrl()?;
                self.push_ctrl(CtrlKind::Else, frame.results);
            }
            Instr::End => {
                if self.ctrl.len() == 1 {
                    return self.fail("'end' without an open block");
                }
                let frame = self.pop_ctrl()?;
                if frame.kind == CtrlKind::If && !frame.results.is_empty() {
                    return self.fail("'if' with a result needs an 'else' branch");
                }
                for t in frame.results {
                    self.stack.push(Some(t));
                }
            }
            Instr::Br(d) => {
                let types = self.label(*d)?;
                self.pop_all(&types)?;
                self.set_unreachable();
            }
            Instr::BrIf(d) => {
                self.pop(Some(ValType::I32))?;
                let types = self.label(*d)?;
                self.pop_all(&types)?;
                for t in types {
                    self.stack.push(Some(t));
                }
            }
            Instr::Return => {
                let types = self.ctrl[0].results.clone();
                self.pop_all(&types)?;
                self.set_unreachable();
            }
            other => match stack_effect(self.m, self.f, other) {
                Ok(Some((pops, pushes))) => {
                    self.pop_all(&pops)?;
                    for t in pushes {
                        self.stack.push(Some(t));
                    }
                }
                Ok(None) => unreachable!("control instructions handled above"),
                Err(msg) => return self.fail(msg),
            },
        }
        Ok(())
    }
}

/// Type-checks one function body against its module.
pub fn check_function(m: &Module, f: &Function) -> Result<(), ValidationError> {
    if f.type_idx as usize >= m.types.len() {
        return Err(ValidationError::Module(format!(
            "function ${} has unknown type {}",
            f.name, f.type_idx
        )));
    }
    Checker {
        m,
        f,
        index: 0,
        stack: Vec::new(),
        ctrl: Vec::new(),
    }
    .run()
}
