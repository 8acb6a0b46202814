//! Line-oriented text format (`.cwat`).
//!
//! Module, function and export declarations use s-expression headers; function
//! bodies are flat with one instruction per line. Immediates must sit on the
//! same line as their opcode. `;;` starts a line comment, and a leading
//! `;;! hardened ...` comment marks modules produced by the hardening passes.

mod parse;
mod print;
mod sexpr;

use std::fmt;

pub use parse::parse;
#[cfg(test)]
use parse::parse_int;
pub use print::serialize;
pub use sexpr::Pos;

pub const FILE_EXTENSION: &str = "cwat";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl ParseError {
    pub(crate) fn at(pos: Pos, message: impl Into<String>) -> Self {
        Self {
            line: pos.line,
            col: pos.col,
            message: message.into(),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}
