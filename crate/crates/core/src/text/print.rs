use std::fmt::Write;

use super::sexpr::MARKER_PREFIX;
use crate::ast::*;

pub fn serialize(m: &Module) -> String {
    let mut out = String::new();
    if let Some(h) = m.hardening {
        let mut line = format!("{MARKER_PREFIX} hardened");
        if h.stack_safety {
            line.push_str(" stack-safety");
        }
        if h.ptr_auth {
            line.push_str(" ptr-auth");
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("(module\n");
    for t in &m.types {
        out.push_str("  (type ");
        if let Some(n) = &t.name {
            let _ = write!(out, "${n} ");
        }
        out.push_str("(func");
        signature(&mut out, &t.ty);
        out.push_str("))\n");
    }
    for imp in &m.imports {
        let _ = write!(
            out,
            "  (import \"{}\" \"{}\" (func ${} (type {})",
            escape(&imp.module),
            escape(&imp.field),
            imp.name,
            type_ref(m, imp.type_idx)
        );
        signature(&mut out, &m.types[imp.type_idx as usize].ty);
        out.push_str("))\n");
    }
    if let Some(pages) = m.memory_pages {
        let _ = writeln!(out, "  (memory {pages})");
    }
    for g in &m.globals {
        let ty = if g.mutable {
            format!("(mut {})", g.ty)
        } else {
            g.ty.to_string()
        };
        let _ = writeln!(out, "  (global ${} {} {})", g.name, ty, int_literal(g.ty, g.init));
    }
    for f in &m.functions {
        function(&mut out, m, f);
    }
    if !m.table.is_empty() {
        out.push_str("  (table");
        for &f in &m.table {
            let _ = write!(out, " {}", func_ref(m, f));
        }
        out.push_str(")\n");
    }
    for e in &m.exports {
        let _ = writeln!(out, "  (export \"{}\" {})", escape(&e.name), func_ref(m, e.func));
    }
    if let Some(s) = m.start {
        let _ = writeln!(out, "  (start {})", func_ref(m, s));
    }
    out.push_str(")\n");
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn signature(out: &mut String, ty: &FuncType) {
    if !ty.params.is_empty() {
        out.push_str(" (param");
        for p in &ty.params {
            let _ = write!(out, " {p}");
        }
        out.push(')');
    }
    if !ty.results.is_empty() {
        out.push_str(" (result");
        for r in &ty.results {
            let _ = write!(out, " {r}");
        }
        out.push(')');
    }
}

fn type_ref(m: &Module, idx: u32) -> String {
    match m.types.get(idx as usize).and_then(|t| t.name.as_ref()) {
        Some(n) => format!("${n}"),
        None => idx.to_string(),
    }
}

fn func_ref(m: &Module, idx: u32) -> String {
    match m.func_name(idx) {
        Some(n) => format!("${n}"),
        None => idx.to_string(),
    }
}

fn global_ref(m: &Module, idx: u32) -> String {
    match m.globals.get(idx as usize) {
        Some(g) => format!("${}", g.name),
        None => idx.to_string(),
    }
}

fn int_literal(ty: ValType, v: i64) -> String {
    match ty {
        ValType::I32 => (v as i32).to_string(),
        ValType::I64 => {
            if (-(1i64 << 31)..(1i64 << 32)).contains(&v) {
                v.to_string()
            } else {
                format!("0x{:x}", v as u64)
            }
        }
    }
}

fn function(out: &mut String, m: &Module, f: &Function) {
    let _ = write!(out, "  (func ${} (type {})", f.name, type_ref(m, f.type_idx));
    if let Some(t) = m.types.get(f.type_idx as usize) {
        signature(out, &t.ty);
    }
    out.push('\n');
    if !f.locals.is_empty() {
        out.push_str("    (local");
        for l in &f.locals {
            let _ = write!(out, " {l}");
        }
        out.push_str(")\n");
    }
    for s in &f.frame_slots {
        let _ = writeln!(out, "    (frame ${} {})", s.name, s.size_bytes);
    }
    let mut depth = 0usize;
    for ins in &f.body {
        if matches!(ins, Instr::End | Instr::Else) {
            depth = depth.saturating_sub(1);
        }
        for _ in 0..depth + 2 {
            out.push_str("  ");
        }
        instr(out, m, f, ins);
        out.push('\n');
        if matches!(ins, Instr::Block(_) | Instr::Loop(_) | Instr::If(_) | Instr::Else) {
            depth += 1;
        }
    }
    out.push_str("  )\n");
}

/// Renders one instruction with its immediates.
pub fn instr(out: &mut String, m: &Module, f: &Function, ins: &Instr) {
    out.push_str(ins.mnemonic());
    match ins {
        Instr::I32Const(v) => {
            let _ = write!(out, " {v}");
        }
        Instr::I64Const(v) => {
            let _ = write!(out, " {}", int_literal(ValType::I64, *v));
        }
        Instr::LocalGet(i) | Instr::LocalSet(i) | Instr::LocalTee(i) => {
            let _ = write!(out, " {i}");
        }
        Instr::GlobalGet(g) | Instr::GlobalSet(g) => {
            let _ = write!(out, " {}", global_ref(m, *g));
        }
        Instr::Block(bt) | Instr::Loop(bt) | Instr::If(bt) => {
            if let Some(t) = bt.0 {
                let _ = write!(out, " (result {t})");
            }
        }
        Instr::Br(d) | Instr::BrIf(d) => {
            let _ = write!(out, " {d}");
        }
        Instr::Call(fi) | Instr::FuncPtrMake(fi) => {
            let _ = write!(out, " {}", func_ref(m, *fi));
        }
        Instr::CallIndirect(t) | Instr::FuncPtrCall(t) => {
            let _ = write!(out, " {}", type_ref(m, *t));
        }
        Instr::Mem { offset, .. } => {
            let _ = write!(out, " {offset}");
        }
        Instr::FrameAddr(s) => match f.frame_slots.get(*s as usize) {
            Some(slot) => {
                let _ = write!(out, " ${}", slot.name);
            }
            None => {
                let _ = write!(out, " {s}");
            }
        },
        Instr::SegmentNew(o) | Instr::SegmentSetTag(o) | Instr::SegmentFree(o) => {
            let _ = write!(out, " {o}");
        }
        _ => {}
    }
}
