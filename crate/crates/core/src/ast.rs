//! Abstract syntax of the extended module format.
//!
//! A [`Module`] is the unit of parsing, validation, hardening and
//! instantiation. Functions live in a single index space where imported
//! host functions come first, followed by the module's own functions.

use std::fmt;

/// Operand value types. Only integers are in scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValType {
    I32,
    I64,
}

impl ValType {
    pub fn name(self) -> &'static str {
        match self {
            ValType::I32 => "i32",
            ValType::I64 => "i64",
        }
    }
}

impl fmt::Display for ValType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct FuncType {
    pub params: Vec<ValType>,
    pub results: Vec<ValType>,
}

impl FuncType {
    pub fn new(params: Vec<ValType>, results: Vec<ValType>) -> Self {
        Self { params, results }
    }
}

impl fmt::Display for FuncType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.params.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "] -> [")?;
        for (i, r) in self.results.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{r}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeDef {
    pub name: Option<String>,
    pub ty: FuncType,
}

/// A host function the module expects the runtime to provide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Import {
    pub module: String,
    pub field: String,
    pub name: String,
    pub type_idx: u32,
}

/// A named stack allocation in a function's frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSlot {
    pub name: String,
    pub size_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub type_idx: u32,
    /// Declared locals, excluding parameters.
    pub locals: Vec<ValType>,
    /// Stack slots in declaration order.
    pub frame_slots: Vec<FrameSlot>,
    /// Flat instruction sequence. The implicit function-level `end` is not
    /// stored.
    pub body: Vec<Instr>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Global {
    pub name: String,
    pub mutable: bool,
    pub ty: ValType,
    pub init: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Export {
    pub name: String,
    pub func: u32,
}

/// Records which hardening passes produced a module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hardening {
    pub stack_safety: bool,
    pub ptr_auth: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Module {
    pub types: Vec<TypeDef>,
    pub imports: Vec<Import>,
    pub functions: Vec<Function>,
    /// Function-index entries of the funcref table.
    pub table: Vec<u32>,
    /// Declared memory size in 64 KiB pages; `None` when no memory is declared.
    pub memory_pages: Option<u32>,
    pub globals: Vec<Global>,
    pub exports: Vec<Export>,
    pub start: Option<u32>,
    pub hardening: Option<Hardening>,
}

/// Reference to a function in the combined import + definition index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuncRef<'a> {
    Import(&'a Import),
    Defined(&'a Function),
}

impl Module {
    pub fn func_count(&self) -> usize {
        self.imports.len() + self.functions.len()
    }

    pub fn func(&self, idx: u32) -> Option<FuncRef<'_>> {
        let idx = idx as usize;
        if idx < self.imports.len() {
            Some(FuncRef::Import(&self.imports[idx]))
        } else {
            self.functions
                .get(idx - self.imports.len())
                .map(FuncRef::Defined)
        }
    }

    pub fn func_name(&self, idx: u32) -> Option<&str> {
        self.func(idx).map(|f| match f {
            FuncRef::Import(i) => i.name.as_str(),
            FuncRef::Defined(d) => d.name.as_str(),
        })
    }

    pub fn func_type_idx(&self, idx: u32) -> Option<u32> {
        self.func(idx).map(|f| match f {
            FuncRef::Import(i) => i.type_idx,
            FuncRef::Defined(d) => d.type_idx,
        })
    }

    pub fn func_type(&self, idx: u32) -> Option<&FuncType> {
        self.func_type_idx(idx)
            .and_then(|t| self.types.get(t as usize))
            .map(|t| &t.ty)
    }

    pub fn func_index(&self, name: &str) -> Option<u32> {
        self.imports
            .iter()
            .map(|i| i.name.as_str())
            .chain(self.functions.iter().map(|f| f.name.as_str()))
            .position(|n| n == name)
            .map(|i| i as u32)
    }

    pub fn global_index(&self, name: &str) -> Option<u32> {
        self.globals
            .iter()
            .position(|g| g.name == name)
            .map(|i| i as u32)
    }

    pub fn export(&self, name: &str) -> Option<u32> {
        self.exports.iter().find(|e| e.name == name).map(|e| e.func)
    }

    /// Index of `ty` in the type list, appending it when absent.
    pub fn intern_type(&mut self, ty: FuncType) -> u32 {
        if let Some(i) = self.types.iter().position(|t| t.ty == ty) {
            return i as u32;
        }
        self.types.push(TypeDef { name: None, ty });
        (self.types.len() - 1) as u32
    }

    /// Absolute function index of a defined function.
    pub fn defined_index(&self, def: usize) -> u32 {
        (self.imports.len() + def) as u32
    }

    pub fn uses_pseudo_instrs(&self) -> bool {
        self.functions.iter().any(|f| {
            !f.frame_slots.is_empty()
                || f.body.iter().any(|i| {
                    matches!(
                        i,
                        Instr::FrameAddr(_) | Instr::FuncPtrMake(_) | Instr::FuncPtrCall(_)
                    )
                })
        })
    }
}

/// Result type of a structured block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockType(pub Option<ValType>);

impl BlockType {
    pub fn arity(self) -> usize {
        usize::from(self.0.is_some())
    }
}

/// Memory access shapes for loads and stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemOp {
    I64Load,
    I32Load,
    I64Load8U,
    I64Store,
    I32Store,
    I64Store8,
}

impl MemOp {
    pub fn width(self) -> u64 {
        match self {
            MemOp::I64Load | MemOp::I64Store => 8,
            MemOp::I32Load | MemOp::I32Store => 4,
            MemOp::I64Load8U | MemOp::I64Store8 => 1,
        }
    }

    pub fn is_load(self) -> bool {
        matches!(self, MemOp::I64Load | MemOp::I32Load | MemOp::I64Load8U)
    }

    /// Type of the loaded or stored value.
    pub fn value_type(self) -> ValType {
        match self {
            MemOp::I32Load | MemOp::I32Store => ValType::I32,
            _ => ValType::I64,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            MemOp::I64Load => "i64.load",
            MemOp::I32Load => "i32.load",
            MemOp::I64Load8U => "i64.load8_u",
            MemOp::I64Store => "i64.store",
            MemOp::I32Store => "i32.store",
            MemOp::I64Store8 => "i64.store8",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    ShrU,
}

impl BinOp {
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl((b & 63) as u32),
            BinOp::ShrU => a.wrapping_shr((b & 63) as u32),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "i64.add",
            BinOp::Sub => "i64.sub",
            BinOp::Mul => "i64.mul",
            BinOp::And => "i64.and",
            BinOp::Or => "i64.or",
            BinOp::Xor => "i64.xor",
            BinOp::Shl => "i64.shl",
            BinOp::ShrU => "i64.shr_u",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelOp {
    Eq,
    Ne,
    LtU,
    GeU,
}

impl RelOp {
    pub fn apply(self, a: u64, b: u64) -> bool {
        match self {
            RelOp::Eq => a == b,
            RelOp::Ne => a != b,
            RelOp::LtU => a < b,
            RelOp::GeU => a >= b,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            RelOp::Eq => "i64.eq",
            RelOp::Ne => "i64.ne",
            RelOp::LtU => "i64.lt_u",
            RelOp::GeU => "i64.ge_u",
        }
    }
}

/// One instruction with its immediates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Instr {
    Nop,
    Unreachable,
    I32Const(i32),
    I64Const(i64),
    I64Bin(BinOp),
    I64Rel(RelOp),
    I64Eqz,
    I32Eqz,
    I32WrapI64,
    I64ExtendI32U,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    Drop,
    Block(BlockType),
    Loop(BlockType),
    If(BlockType),
    Else,
    End,
    Br(u32),
    BrIf(u32),
    Return,
    Call(u32),
    /// Table call; the immediate is a type index.
    CallIndirect(u32),
    Mem { op: MemOp, offset: u64 },
    /// Address of a frame slot (pseudo-instruction, lowered before execution).
    FrameAddr(u32),
    /// Function pointer of a table function (pseudo-instruction).
    FuncPtrMake(u32),
    /// Call through a 64-bit function pointer (pseudo-instruction).
    FuncPtrCall(u32),
    SegmentNew(u64),
    SegmentSetTag(u64),
    SegmentFree(u64),
    PointerSign,
    PointerAuth,
}

impl Instr {
    pub fn is_segment(&self) -> bool {
        matches!(
            self,
            Instr::SegmentNew(_) | Instr::SegmentSetTag(_) | Instr::SegmentFree(_)
        )
    }

    pub fn is_pointer_auth(&self) -> bool {
        matches!(self, Instr::PointerSign | Instr::PointerAuth)
    }

    pub fn is_pseudo(&self) -> bool {
        matches!(
            self,
            Instr::FrameAddr(_) | Instr::FuncPtrMake(_) | Instr::FuncPtrCall(_)
        )
    }

    /// Bare mnemonic, without immediates.
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Nop => "nop",
            Instr::Unreachable => "unreachable",
            Instr::I32Const(_) => "i32.const",
            Instr::I64Const(_) => "i64.const",
            Instr::I64Bin(op) => op.mnemonic(),
            Instr::I64Rel(op) => op.mnemonic(),
            Instr::I64Eqz => "i64.eqz",
            Instr::I32Eqz => "i32.eqz",
            Instr::I32WrapI64 => "i32.wrap_i64",
            Instr::I64ExtendI32U => "i64.extend_i32_u",
            Instr::LocalGet(_) => "local.get",
            Instr::LocalSet(_) => "local.set",
            Instr::LocalTee(_) => "local.tee",
            Instr::GlobalGet(_) => "global.get",
            Instr::GlobalSet(_) => "global.set",
            Instr::Drop => "drop",
            Instr::Block(_) => "block",
            Instr::Loop(_) => "loop",
            Instr::If(_) => "if",
            Instr::Else => "else",
            Instr::End => "end",
            Instr::Br(_) => "br",
            Instr::BrIf(_) => "br_if",
            Instr::Return => "return",
            Instr::Call(_) => "call",
            Instr::CallIndirect(_) => "call_indirect",
            Instr::Mem { op, .. } => op.mnemonic(),
            Instr::FrameAddr(_) => "frame.addr",
            Instr::FuncPtrMake(_) => "funcptr.make",
            Instr::FuncPtrCall(_) => "funcptr.call",
            Instr::SegmentNew(_) => "segment.new",
            Instr::SegmentSetTag(_) => "segment.set_tag",
            Instr::SegmentFree(_) => "segment.free",
            Instr::PointerSign => "i64.pointer_sign",
            Instr::PointerAuth => "i64.pointer_auth",
        }
    }
}
