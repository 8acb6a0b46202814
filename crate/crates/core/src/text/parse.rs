use std::collections::HashMap;

use super::sexpr::{self, Pos, SExpr};
use super::ParseError;
use crate::ast::*;

pub fn parse(src: &str) -> Result<Module, ParseError> {
    let doc = sexpr::read(src)?;
    let root = match doc.exprs.as_slice() {
        [root] => root,
        [] => return Err(ParseError::at(Pos { line: 1, col: 1 }, "empty document")),
        [_, extra, ..] => {
            return Err(ParseError::at(
                extra.pos(),
                "unexpected content after module",
            ))
        }
    };
    let items = match root {
        SExpr::List(items, _) if root.head() == Some("module") => &items[1..],
        other => return Err(ParseError::at(other.pos(), "expected '(module ...)'")),
    };
    let mut module = Builder::default().build(items)?;
    for (text, pos) in doc.markers {
        module.hardening = Some(parse_marker(&text, pos)?);
    }
    Ok(module)
}

fn parse_marker(text: &str, pos: Pos) -> Result<Hardening, ParseError> {
    let mut words = text.split_whitespace();
    if words.next() != Some("hardened") {
        return Err(ParseError::at(pos, "unknown marker comment"));
    }
    let mut h = Hardening::default();
    for w in words {
        match w {
            "stack-safety" => h.stack_safety = true,
            "ptr-auth" => h.ptr_auth = true,
            other => {
                return Err(ParseError::at(
                    pos,
                    format!("unknown hardening pass '{other}'"),
                ))
            }
        }
    }
    Ok(h)
}

#[derive(Default)]
struct Builder {
    module: Module,
    type_names: HashMap<String, u32>,
    func_names: HashMap<String, u32>,
    global_names: HashMap<String, u32>,
}

/// Parses an integer literal: optional sign, decimal or `0x` hex, `_`
/// separators.
pub(crate) fn parse_int(s: &str) -> Option<i128> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let cleaned: String = rest.chars().filter(|&c| c != '_').collect();
    if cleaned.is_empty() || rest.starts_with('_') {
        return None;
    }
    let v = if let Some(hex) = cleaned
        .strip_prefix("0x")
        .or_else(|| cleaned.strip_prefix("0X"))
    {
        if hex.is_empty() {
            return None;
        }
        i128::from_str_radix(hex, 16).ok()?
    } else {
        if !cleaned.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        cleaned.parse::<i128>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn expect_atom<'a>(e: &'a SExpr, what: &str) -> Result<&'a str, ParseError> {
    e.atom()
        .ok_or_else(|| ParseError::at(e.pos(), format!("expected {what}")))
}

fn expect_name(e: &SExpr) -> Result<String, ParseError> {
    match e.atom() {
        Some(a) if a.starts_with('$') && a.len() > 1 => Ok(a[1..].to_string()),
        _ => Err(ParseError::at(e.pos(), "expected a $name")),
    }
}

fn expect_str(e: &SExpr) -> Result<String, ParseError> {
    match e {
        SExpr::Str(s, _) => Ok(s.clone()),
        _ => Err(ParseError::at(e.pos(), "expected a string literal")),
    }
}

fn parse_u64(e: &SExpr, what: &str) -> Result<u64, ParseError> {
    let a = expect_atom(e, what)?;
    match parse_int(a) {
        Some(v) if (0..=u64::MAX as i128).contains(&v) => Ok(v as u64),
        Some(_) => Err(ParseError::at(
            e.pos(),
            format!("{what} must be an unsigned 64-bit integer"),
        )),
        None => Err(ParseError::at(e.pos(), format!("expected {what}"))),
    }
}

fn parse_u32(e: &SExpr, what: &str) -> Result<u32, ParseError> {
    let v = parse_u64(e, what)?;
    u32::try_from(v).map_err(|_| ParseError::at(e.pos(), format!("{what} out of range")))
}

fn parse_valtype(e: &SExpr) -> Result<ValType, ParseError> {
    match e.atom() {
        Some("i32") => Ok(ValType::I32),
        Some("i64") => Ok(ValType::I64),
        _ => Err(ParseError::at(e.pos(), "expected a value type (i32 or i64)")),
    }
}

fn list_items<'a>(e: &'a SExpr) -> &'a [SExpr] {
    match e {
        SExpr::List(items, _) => items,
        _ => &[],
    }
}

impl Builder {
    fn build(mut self, items: &[SExpr]) -> Result<Module, ParseError> {
        for it in items {
            if !matches!(it, SExpr::List(..)) {
                return Err(ParseError::at(it.pos(), "expected a module field"));
            }
            match it.head() {
                Some(
                    "memory" | "type" | "import" | "func" | "global" | "table" | "export"
                    | "start",
                ) => {}
                Some(other) => {
                    return Err(ParseError::at(
                        it.pos(),
                        format!("unknown module field '{other}'"),
                    ))
                }
                None => return Err(ParseError::at(it.pos(), "expected a module field")),
            }
        }

        // Explicit types first so inline signatures intern against them.
        for it in items.iter().filter(|i| i.head() == Some("type")) {
            self.type_decl(it)?;
        }

        // Function index space: imports, then definitions.
        let imports: Vec<&SExpr> = items.iter().filter(|i| i.head() == Some("import")).collect();
        let funcs: Vec<&SExpr> = items.iter().filter(|i| i.head() == Some("func")).collect();
        let mut next = 0u32;
        for imp in &imports {
            let f = list_items(imp)
                .get(3)
                .ok_or_else(|| ParseError::at(imp.pos(), "import needs a (func ...)"))?;
            let name_e = list_items(f)
                .get(1)
                .ok_or_else(|| ParseError::at(f.pos(), "import func needs a $name"))?;
            self.declare_func(name_e, next)?;
            next += 1;
        }
        for f in &funcs {
            let name_e = list_items(f)
                .get(1)
                .ok_or_else(|| ParseError::at(f.pos(), "func needs a $name"))?;
            self.declare_func(name_e, next)?;
            next += 1;
        }
        for (i, g) in items
            .iter()
            .filter(|i| i.head() == Some("global"))
            .enumerate()
        {
            let name_e = list_items(g)
                .get(1)
                .ok_or_else(|| ParseError::at(g.pos(), "global needs a $name"))?;
            let name = expect_name(name_e)?;
            if self.global_names.insert(name.clone(), i as u32).is_some() {
                return Err(ParseError::at(
                    name_e.pos(),
                    format!("duplicate global name ${name}"),
                ));
            }
        }

        for imp in imports {
            self.import(imp)?;
        }
        for it in items {
            match it.head() {
                Some("global") => self.global(it)?,
                Some("memory") => self.memory(it)?,
                _ => {}
            }
        }
        for f in funcs {
            self.func(f)?;
        }
        for it in items {
            match it.head() {
                Some("table") => self.table(it)?,
                Some("export") => self.export(it)?,
                Some("start") => self.start(it)?,
                _ => {}
            }
        }
        Ok(self.module)
    }

    fn declare_func(&mut self, name_e: &SExpr, idx: u32) -> Result<(), ParseError> {
        let name = expect_name(name_e)?;
        if self.func_names.insert(name.clone(), idx).is_some() {
            return Err(ParseError::at(
                name_e.pos(),
                format!("duplicate function name ${name}"),
            ));
        }
        Ok(())
    }

    fn resolve(
        map: &HashMap<String, u32>,
        e: &SExpr,
        kind: &str,
    ) -> Result<u32, ParseError> {
        let a = expect_atom(e, &format!("a {kind} reference"))?;
        if let Some(name) = a.strip_prefix('$') {
            map.get(name)
                .copied()
                .ok_or_else(|| ParseError::at(e.pos(), format!("unknown {kind} ${name}")))
        } else {
            parse_u32(e, &format!("{kind} index"))
        }
    }

    fn func_ref(&self, e: &SExpr) -> Result<u32, ParseError> {
        Self::resolve(&self.func_names, e, "function")
    }

    fn type_ref(&self, e: &SExpr) -> Result<u32, ParseError> {
        Self::resolve(&self.type_names, e, "type")
    }

    fn global_ref(&self, e: &SExpr) -> Result<u32, ParseError> {
        Self::resolve(&self.global_names, e, "global")
    }

    /// Parses `(param ...)* (result ...)*` lists from `items`, returning the
    /// signature and the number of items consumed.
    fn signature(items: &[SExpr]) -> Result<(FuncType, usize), ParseError> {
        let mut ty = FuncType::default();
        let mut used = 0;
        for it in items {
            match it.head() {
                Some("param") => {
                    if !ty.results.is_empty() {
                        return Err(ParseError::at(it.pos(), "param after result"));
                    }
                    for t in &list_items(it)[1..] {
                        ty.params.push(parse_valtype(t)?);
                    }
                }
                Some("result") => {
                    for t in &list_items(it)[1..] {
                        ty.results.push(parse_valtype(t)?);
                    }
                }
                _ => break,
            }
            used += 1;
        }
        Ok((ty, used))
    }

    fn type_decl(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = &list_items(e)[1..];
        let mut rest = items;
        let mut name = None;
        if let Some(first) = rest.first() {
            if first.atom().is_some_and(|a| a.starts_with('$')) {
                let n = expect_name(first)?;
                if self.type_names.contains_key(&n) {
                    return Err(ParseError::at(first.pos(), format!("duplicate type name ${n}")));
                }
                name = Some(n);
                rest = &rest[1..];
            }
        }
        let func = match rest {
            [f] if f.head() == Some("func") => f,
            _ => return Err(ParseError::at(e.pos(), "expected (type $name? (func ...))")),
        };
        let sig_items = &list_items(func)[1..];
        let (ty, used) = Self::signature(sig_items)?;
        if used != sig_items.len() {
            return Err(ParseError::at(sig_items[used].pos(), "unexpected item in type"));
        }
        let idx = self.module.types.len() as u32;
        if let Some(n) = &name {
            self.type_names.insert(n.clone(), idx);
        }
        self.module.types.push(TypeDef { name, ty });
        Ok(())
    }

    /// `(type X)? (param ..)* (result ..)*` shared by imports and functions.
    fn type_use(&mut self, items: &[SExpr], at: Pos) -> Result<(u32, usize), ParseError> {
        let mut used = 0;
        let mut explicit = None;
        if let Some(first) = items.first() {
            if first.head() == Some("type") {
                let r = list_items(first)
                    .get(1)
                    .ok_or_else(|| ParseError::at(first.pos(), "expected (type ref)"))?;
                explicit = Some(self.type_ref(r)?);
                used = 1;
            }
        }
        let (sig, n) = Self::signature(&items[used..])?;
        used += n;
        let idx = match explicit {
            Some(t) => {
                let declared = &self.module.types[t as usize].ty;
                if n > 0 && *declared != sig {
                    return Err(ParseError::at(at, "inline signature does not match (type ...)"));
                }
                t
            }
            None => self.module.intern_type(sig),
        };
        Ok((idx, used))
    }

    fn import(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = list_items(e);
        if items.len() != 4 {
            return Err(ParseError::at(e.pos(), "expected (import \"mod\" \"field\" (func ...))"));
        }
        let module = expect_str(&items[1])?;
        let field = expect_str(&items[2])?;
        let f = &items[3];
        if f.head() != Some("func") {
            return Err(ParseError::at(f.pos(), "only function imports are supported"));
        }
        let fitems = list_items(f);
        let name = expect_name(&fitems[1])?;
        let (type_idx, used) = self.type_use(&fitems[2..], f.pos())?;
        if used != fitems.len() - 2 {
            return Err(ParseError::at(fitems[2 + used].pos(), "unexpected item in import"));
        }
        self.module.imports.push(Import {
            module,
            field,
            name,
            type_idx,
        });
        Ok(())
    }

    fn global(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = list_items(e);
        if items.len() != 4 {
            return Err(ParseError::at(e.pos(), "expected (global $name type init)"));
        }
        let name = expect_name(&items[1])?;
        let (mutable, ty) = match &items[2] {
            l @ SExpr::List(inner, _) if l.head() == Some("mut") && inner.len() == 2 => {
                (true, parse_valtype(&inner[1])?)
            }
            other => (false, parse_valtype(other)?),
        };
        let init = const_value(&items[3], ty)?;
        self.module.globals.push(Global {
            name,
            mutable,
            ty,
            init,
        });
        Ok(())
    }

    fn memory(&mut self, e: &SExpr) -> Result<(), ParseError> {
        if self.module.memory_pages.is_some() {
            return Err(ParseError::at(e.pos(), "multiple memories are not supported"));
        }
        let items = list_items(e);
        if items.len() != 2 {
            return Err(ParseError::at(e.pos(), "expected (memory pages)"));
        }
        self.module.memory_pages = Some(parse_u32(&items[1], "page count")?);
        Ok(())
    }

    fn table(&mut self, e: &SExpr) -> Result<(), ParseError> {
        if !self.module.table.is_empty() {
            return Err(ParseError::at(e.pos(), "multiple tables are not supported"));
        }
        for r in &list_items(e)[1..] {
            let f = self.func_ref(r)?;
            self.module.table.push(f);
        }
        Ok(())
    }

    fn export(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = list_items(e);
        if items.len() != 3 {
            return Err(ParseError::at(e.pos(), "expected (export \"name\" $func)"));
        }
        let name = expect_str(&items[1])?;
        if self.module.exports.iter().any(|x| x.name == name) {
            return Err(ParseError::at(e.pos(), format!("duplicate export \"{name}\"")));
        }
        let func = self.func_ref(&items[2])?;
        self.module.exports.push(Export { name, func });
        Ok(())
    }

    fn start(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = list_items(e);
        if items.len() != 2 || self.module.start.is_some() {
            return Err(ParseError::at(e.pos(), "expected a single (start $func)"));
        }
        self.module.start = Some(self.func_ref(&items[1])?);
        Ok(())
    }

    fn func(&mut self, e: &SExpr) -> Result<(), ParseError> {
        let items = list_items(e);
        let name = expect_name(&items[1])?;
        let mut idx = 2;
        let (type_idx, used) = self.type_use(&items[idx..], e.pos())?;
        idx += used;

        let mut locals = Vec::new();
        let mut frame_slots: Vec<FrameSlot> = Vec::new();
        while let Some(it) = items.get(idx) {
            match it.head() {
                Some("local") => {
                    for t in &list_items(it)[1..] {
                        locals.push(parse_valtype(t)?);
                    }
                }
                Some("frame") => {
                    let f = list_items(it);
                    if f.len() != 3 {
                        return Err(ParseError::at(it.pos(), "expected (frame $name size)"));
                    }
                    let slot = expect_name(&f[1])?;
                    if frame_slots.iter().any(|s| s.name == slot) {
                        return Err(ParseError::at(
                            f[1].pos(),
                            format!("duplicate frame slot ${slot}"),
                        ));
                    }
                    let size = parse_u64(&f[2], "slot size")?;
                    if size == 0 {
                        return Err(ParseError::at(f[2].pos(), "slot size must be positive"));
                    }
                    frame_slots.push(FrameSlot {
                        name: slot,
                        size_bytes: size,
                    });
                }
                Some("param" | "result" | "type") => {
                    return Err(ParseError::at(it.pos(), "signature must precede locals and frames"))
                }
                _ => break,
            }
            idx += 1;
        }

        let body = BodyParser {
            builder: self,
            frame_slots: &frame_slots,
        }
        .parse(&items[idx..], e.pos())?;

        self.module.functions.push(Function {
            name,
            type_idx,
            locals,
            frame_slots,
            body,
        });
        Ok(())
    }
}

fn const_value(e: &SExpr, ty: ValType) -> Result<i64, ParseError> {
    let a = expect_atom(e, "an integer constant")?;
    let v = parse_int(a).ok_or_else(|| ParseError::at(e.pos(), "expected an integer constant"))?;
    let ok = match ty {
        ValType::I32 => (i32::MIN as i128..=u32::MAX as i128).contains(&v),
        ValType::I64 => (i64::MIN as i128..=u64::MAX as i128).contains(&v),
    };
    if !ok {
        return Err(ParseError::at(e.pos(), format!("constant out of range for {ty}")));
    }
    Ok(match ty {
        ValType::I32 => v as u32 as i32 as i64,
        ValType::I64 => v as u64 as i64,
    })
}

struct BodyParser<'a> {
    builder: &'a Builder,
    frame_slots: &'a [FrameSlot],
}

impl BodyParser<'_> {
    fn parse(&self, items: &[SExpr], func_pos: Pos) -> Result<Vec<Instr>, ParseError> {
        let mut out = Vec::new();
        // Structural nesting: true for an open `if` that has not seen `else`.
        let mut open: Vec<bool> = Vec::new();
        let mut i = 0;
        while i < items.len() {
            let head = &items[i];
            let op = match head {
                SExpr::Atom(a, _) => a.as_str(),
                SExpr::List(..) if head.head() == Some("frame") => {
                    return Err(ParseError::at(
                        head.pos(),
                        "frame slots must be declared in the function header",
                    ))
                }
                other => return Err(ParseError::at(other.pos(), "expected an instruction")),
            };
            let line = head.pos().line;
            let mut j = i + 1;
            while j < items.len() && items[j].pos().line == line {
                j += 1;
            }
            let imms = &items[i + 1..j];
            let instr = self.instr(op, head.pos(), imms)?;
            match &instr {
                Instr::Block(_) | Instr::Loop(_) => open.push(false),
                Instr::If(_) => open.push(true),
                Instr::Else => match open.last_mut() {
                    Some(is_if @ true) => *is_if = false,
                    _ => return Err(ParseError::at(head.pos(), "'else' without matching 'if'")),
                },
                Instr::End => {
                    if open.pop().is_none() {
                        return Err(ParseError::at(head.pos(), "'end' without matching block"));
                    }
                }
                _ => {}
            }
            out.push(instr);
            i = j;
        }
        if !open.is_empty() {
            return Err(ParseError::at(func_pos, "unterminated block in function body"));
        }
        Ok(out)
    }

    fn instr(&self, op: &str, pos: Pos, imms: &[SExpr]) -> Result<Instr, ParseError> {
        let arity = |n: usize| -> Result<(), ParseError> {
            if imms.len() != n {
                Err(ParseError::at(
                    pos,
                    format!("'{op}' expects {n} immediate(s), found {}", imms.len()),
                ))
            } else {
                Ok(())
            }
        };
        let offset = || -> Result<u64, ParseError> {
            match imms {
                [] => Ok(0),
                [o] => parse_u64(o, "offset"),
                _ => Err(ParseError::at(pos, format!("'{op}' takes at most one offset"))),
            }
        };
        let block_type = || -> Result<BlockType, ParseError> {
            match imms {
                [] => Ok(BlockType(None)),
                [r] if r.head() == Some("result") => match list_items(r) {
                    [_] => Ok(BlockType(None)),
                    [_, t] => Ok(BlockType(Some(parse_valtype(t)?))),
                    _ => Err(ParseError::at(r.pos(), "blocks return at most one value")),
                },
                _ => Err(ParseError::at(pos, format!("'{op}' takes an optional (result t)"))),
            }
        };
        let simple = |i: Instr| -> Result<Instr, ParseError> {
            arity(0)?;
            Ok(i)
        };
        let mem = |m: MemOp| -> Result<Instr, ParseError> {
            Ok(Instr::Mem {
                op: m,
                offset: offset()?,
            })
        };
        match op {
            "nop" => simple(Instr::Nop),
            "unreachable" => simple(Instr::Unreachable),
            "drop" => simple(Instr::Drop),
            "return" => simple(Instr::Return),
            "else" => simple(Instr::Else),
            "end" => simple(Instr::End),
            "i32.const" => {
                arity(1)?;
                Ok(Instr::I32Const(const_value(&imms[0], ValType::I32)? as i32))
            }
            "i64.const" => {
                arity(1)?;
                Ok(Instr::I64Const(const_value(&imms[0], ValType::I64)?))
            }
            "i64.add" => simple(Instr::I64Bin(BinOp::Add)),
            "i64.sub" => simple(Instr::I64Bin(BinOp::Sub)),
            "i64.mul" => simple(Instr::I64Bin(BinOp::Mul)),
            "i64.and" => simple(Instr::I64Bin(BinOp::And)),
            "i64.or" => simple(Instr::I64Bin(BinOp::Or)),
            "i64.xor" => simple(Instr::I64Bin(BinOp::Xor)),
            "i64.shl" => simple(Instr::I64Bin(BinOp::Shl)),
            "i64.shr_u" => simple(Instr::I64Bin(BinOp::ShrU)),
            "i64.eq" => simple(Instr::I64Rel(RelOp::Eq)),
            "i64.ne" => simple(Instr::I64Rel(RelOp::Ne)),
            "i64.lt_u" => simple(Instr::I64Rel(RelOp::LtU)),
            "i64.ge_u" => simple(Instr::I64Rel(RelOp::GeU)),
            "i64.eqz" => simple(Instr::I64Eqz),
            "i32.eqz" => simple(Instr::I32Eqz),
            "i32.wrap_i64" => simple(Instr::I32WrapI64),
            "i64.extend_i32_u" => simple(Instr::I64ExtendI32U),
            "local.get" | "local.set" | "local.tee" => {
                arity(1)?;
                let idx = parse_u32(&imms[0], "local index")?;
                Ok(match op {
                    "local.get" => Instr::LocalGet(idx),
                    "local.set" => Instr::LocalSet(idx),
                    _ => Instr::LocalTee(idx),
                })
            }
            "global.get" | "global.set" => {
                arity(1)?;
                let idx = self.builder.global_ref(&imms[0])?;
                Ok(if op == "global.get" {
                    Instr::GlobalGet(idx)
                } else {
                    Instr::GlobalSet(idx)
                })
            }
            "block" => Ok(Instr::Block(block_type()?)),
            "loop" => Ok(Instr::Loop(block_type()?)),
            "if" => Ok(Instr::If(block_type()?)),
            "br" | "br_if" => {
                arity(1)?;
                let depth = parse_u32(&imms[0], "label depth")?;
                Ok(if op == "br" {
                    Instr::Br(depth)
                } else {
                    Instr::BrIf(depth)
                })
            }
            "call" => {
                arity(1)?;
                Ok(Instr::Call(self.builder.func_ref(&imms[0])?))
            }
            "call_indirect" => {
                arity(1)?;
                Ok(Instr::CallIndirect(self.builder.type_ref(&imms[0])?))
            }
            "i64.load" => mem(MemOp::I64Load),
            "i32.load" => mem(MemOp::I32Load),
            "i64.load8_u" => mem(MemOp::I64Load8U),
            "i64.store" => mem(MemOp::I64Store),
            "i32.store" => mem(MemOp::I32Store),
            "i64.store8" => mem(MemOp::I64Store8),
            "frame.addr" => {
                arity(1)?;
                let a = expect_atom(&imms[0], "a frame slot")?;
                let idx = match a.strip_prefix('$') {
                    Some(n) => self
                        .frame_slots
                        .iter()
                        .position(|s| s.name == n)
                        .ok_or_else(|| {
                            ParseError::at(imms[0].pos(), format!("unknown frame slot ${n}"))
                        })? as u32,
                    None => parse_u32(&imms[0], "frame slot index")?,
                };
                Ok(Instr::FrameAddr(idx))
            }
            "funcptr.make" => {
                arity(1)?;
                Ok(Instr::FuncPtrMake(self.builder.func_ref(&imms[0])?))
            }
            "funcptr.call" => {
                arity(1)?;
                Ok(Instr::FuncPtrCall(self.builder.type_ref(&imms[0])?))
            }
            "segment.new" => Ok(Instr::SegmentNew(offset()?)),
            "segment.set_tag" => Ok(Instr::SegmentSetTag(offset()?)),
            "segment.free" => Ok(Instr::SegmentFree(offset()?)),
            "i64.pointer_sign" => simple(Instr::PointerSign),
            "i64.pointer_auth" => simple(Instr::PointerAuth),
            other => Err(ParseError::at(pos, format!("unknown opcode '{other}'"))),
        }
    }
}
