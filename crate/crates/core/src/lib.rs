//! Runtime and instrumentation toolchain for a 64-bit WebAssembly-like
//! language with software memory tagging, pointer authentication and
//! tag-based sandboxing.

pub mod ast;
pub mod config;
pub mod gen;
pub mod harden;
pub mod heap;
pub mod interp;
pub mod pac;
pub mod runtime;
pub mod tagmem;
pub mod text;
pub mod validate;

pub use ast::Module;
pub use config::{FeatureSet, Mode};
pub use interp::{ExecError, Trap, TrapKind, Value};
pub use runtime::{InstanceId, RunStats, Runtime, RuntimeConfig};
pub use text::{parse, serialize, ParseError};
pub use validate::{validate, ValidatedModule, ValidationError};
