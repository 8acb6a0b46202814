//! Execution of lowered modules.
//!
//! Two evaluators share the runtime state: [`engine`] is the fast
//! flat-code interpreter used by the CLI, and [`reference`] is a literal
//! small-step evaluator over structured code used for differential checking.

pub(crate) mod code;
pub(crate) mod engine;
pub(crate) mod reference;
#[cfg(test)]
mod exec_tests;

use std::fmt;

use crate::ast::ValType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    I32(u32),
    I64(u64),
}

impl Value {
    pub fn ty(self) -> ValType {
        match self {
            Value::I32(_) => ValType::I32,
            Value::I64(_) => ValType::I64,
        }
    }

    pub fn zero(ty: ValType) -> Self {
        match ty {
            ValType::I32 => Value::I32(0),
            ValType::I64 => Value::I64(0),
        }
    }

    /// Converts an integer literal, accepting both signed and unsigned
    /// spellings of the type's range.
    pub fn from_int(ty: ValType, v: i128) -> Option<Self> {
        match ty {
            ValType::I32 if (i32::MIN as i128..=u32::MAX as i128).contains(&v) => {
                Some(Value::I32(v as u32))
            }
            ValType::I64 if (i64::MIN as i128..=u64::MAX as i128).contains(&v) => {
                Some(Value::I64(v as u64))
            }
            _ => None,
        }
    }

    pub fn as_u32(self) -> u32 {
        match self {
            Value::I32(v) => v,
            Value::I64(v) => v as u32,
        }
    }

    pub fn as_u64(self) -> u64 {
        match self {
            Value::I32(v) => v as u64,
            Value::I64(v) => v,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Value::I32(v) => write!(f, "{}", v as i32),
            Value::I64(v) => write!(f, "{}", v as i64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrapKind {
    TagMismatch,
    Unaligned,
    OutOfBounds,
    AuthFailure,
    IndirectTypeMismatch,
    TableOutOfBounds,
    Unreachable,
    StackOverflow,
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A trap before it is attributed to an instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub kind: TrapKind,
    pub addr: Option<u64>,
}

impl Fault {
    pub fn new(kind: TrapKind) -> Self {
        Self { kind, addr: None }
    }

    pub fn at(kind: TrapKind, addr: u64) -> Self {
        Self {
            kind,
            addr: Some(addr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trap {
    pub kind: TrapKind,
    pub func: String,
    /// Index of the faulting instruction in the function body as written.
    pub index: u32,
    /// Instance-relative effective address, for memory faults.
    pub addr: Option<u64>,
}

impl fmt::Display for Trap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}:{}", self.kind, self.func, self.index)?;
        if let Some(a) = self.addr {
            write!(f, " (address {a:#x})")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error("trap: {0}")]
    Trap(Trap),
    #[error("step limit exhausted")]
    FuelExhausted,
    #[error("{0}")]
    Usage(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ExecError {
    pub fn trap(&self) -> Option<&Trap> {
        match self {
            ExecError::Trap(t) => Some(t),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_conversions() {
        assert_eq!(Value::from_int(ValType::I32, -1), Some(Value::I32(u32::MAX)));
        assert_eq!(Value::from_int(ValType::I32, 1 << 32), None);
        assert_eq!(Value::from_int(ValType::I64, u64::MAX as i128), Some(Value::I64(u64::MAX)));
        assert_eq!(Value::I64(u64::MAX).to_string(), "-1");
        assert_eq!(Value::I32(7).as_u64(), 7);
    }

    #[test]
    fn trap_display() {
        let t = Trap {
            kind: TrapKind::TagMismatch,
            func: "main".into(),
            index: 12,
            addr: None,
        };
        assert_eq!(t.to_string(), "TagMismatch at main:12");
    }
}
