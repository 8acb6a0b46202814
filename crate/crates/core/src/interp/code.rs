//! Lowered, linked code of one instance, with branch side tables.

use crate::ast::*;
use crate::harden::LoweredModule;

pub(crate) const NO_ELSE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HostFunc {
    Malloc,
    Free,
    Realloc,
    PrintI64,
}

impl HostFunc {
    pub fn resolve(module: &str, field: &str) -> Option<(Self, FuncType)> {
        use ValType::I64;
        if module != "env" {
            return None;
        }
        Some(match field {
            "malloc" => (HostFunc::Malloc, FuncType::new(vec![I64], vec![I64])),
            "free" => (HostFunc::Free, FuncType::new(vec![I64], vec![])),
            "realloc" => (HostFunc::Realloc, FuncType::new(vec![I64, I64], vec![I64])),
            "print_i64" => (HostFunc::PrintI64, FuncType::new(vec![I64], vec![])),
            _ => return None,
        })
    }
}

#[derive(Debug)]
pub(crate) struct FuncCode {
    pub name: String,
    pub nparams: usize,
    /// Parameter types followed by declared local types.
    pub local_types: Vec<ValType>,
    pub result_arity: usize,
    pub body: Vec<Instr>,
    pub origin: Vec<u32>,
    /// For `block`, `loop`, `if` and `else`: index of the matching `end`.
    pub end: Vec<u32>,
    /// For `if`: index of its `else`, or [`NO_ELSE`].
    pub else_at: Vec<u32>,
}

impl FuncCode {
    /// Source index of the instruction at `pc`; the implicit final `end`
    /// maps one past the last source instruction.
    pub fn origin_of(&self, pc: usize) -> u32 {
        self.origin
            .get(pc)
            .copied()
            .unwrap_or_else(|| self.origin.last().map_or(0, |o| o + 1))
    }
}

#[derive(Debug)]
pub(crate) struct Code {
    pub module: Module,
    pub imports: Vec<HostFunc>,
    pub funcs: Vec<FuncCode>,
}

impl Code {
    pub fn new(lowered: LoweredModule) -> Result<Self, String> {
        let LoweredModule { module, origins } = lowered;
        let mut imports = Vec::with_capacity(module.imports.len());
        for imp in &module.imports {
            let (h, ty) = HostFunc::resolve(&imp.module, &imp.field)
                .ok_or_else(|| format!("unknown import {}.{}", imp.module, imp.field))?;
            if module.types[imp.type_idx as usize].ty != ty {
                return Err(format!(
                    "import {}.{} must have type {ty}",
                    imp.module, imp.field
                ));
            }
            imports.push(h);
        }
        let funcs = module
            .functions
            .iter()
            .zip(origins)
            .map(|(f, origin)| {
                let ty = &module.types[f.type_idx as usize].ty;
                let (end, else_at) = side_tables(&f.body);
                FuncCode {
                    name: f.name.clone(),
                    nparams: ty.params.len(),
                    local_types: ty.params.iter().chain(&f.locals).copied().collect(),
                    result_arity: ty.results.len(),
                    body: f.body.clone(),
                    origin,
                    end,
                    else_at,
                }
            })
            .collect();
        Ok(Self {
            module,
            imports,
            funcs,
        })
    }

    pub fn func_type(&self, idx: u32) -> &FuncType {
        self.module.func_type(idx).expect("validated function index")
    }
}

fn side_tables(body: &[Instr]) -> (Vec<u32>, Vec<u32>) {
    let mut end = vec![0; body.len()];
    let mut else_at = vec![NO_ELSE; body.len()];
    let mut open: Vec<usize> = Vec::new();
    for (pc, ins) in body.iter().enumerate() {
        match ins {
            Instr::Block(_) | Instr::Loop(_) | Instr::If(_) => open.push(pc),
            Instr::Else => {
                let start = *open.last().expect("validated nesting");
                else_at[start] = pc as u32;
            }
            Instr::End => {
                let start = open.pop().expect("validated nesting");
                end[start] = pc as u32;
                if else_at[start] != NO_ELSE {
                    end[else_at[start] as usize] = pc as u32;
                }
            }
            _ => {}
        }
    }
    (end, else_at)
}
