//! Expansion of `frame.addr`, `funcptr.make` and `funcptr.call` into core
//! instructions.
//!
//! Frames live on a shadow stack addressed through the reserved global
//! `$__sp`, which grows downward. A function with frame slots is rewritten as
//!
//! ```text
//! prologue                  ;; reserve the frame, tag instrumented slots
//! block (result R)
//!   body                    ;; `return` becomes a branch to this block
//! end
//! epilogue                  ;; untag instrumented slots, release the frame
//! ```

use crate::ast::*;
use crate::tagmem::{GRANULE, TAG_SHIFT};

pub const SP_GLOBAL: &str = "__sp";
pub const AMBIENT_GLOBAL: &str = "__ambient";
pub const STRIDE_GLOBAL: &str = "__tag_stride";

/// Placement of one slot relative to the frame base.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub offset: u64,
    pub size: u64,
    pub instrument: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub guard: bool,
    pub slots: Vec<SlotLayout>,
    pub frame_bytes: u64,
}

fn round_up(n: u64) -> u64 {
    n.div_ceil(GRANULE) * GRANULE
}

impl FrameLayout {
    /// Declared-order layout. A 16-byte guard leads the frame when some slot
    /// is instrumented but the first one is not, so the first tagged slot
    /// never borders memory of the same tag.
    pub fn new(f: &Function, instrument: &[bool]) -> Self {
        let guard = instrument.iter().any(|&i| i) && !instrument.first().copied().unwrap_or(false);
        let mut offset = if guard { GRANULE } else { 0 };
        let mut slots = Vec::with_capacity(f.frame_slots.len());
        for (s, &inst) in f.frame_slots.iter().zip(instrument) {
            let size = round_up(s.size_bytes);
            slots.push(SlotLayout {
                offset,
                size,
                instrument: inst,
            });
            offset += size;
        }
        Self {
            guard,
            slots,
            frame_bytes: offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameLowering {
    /// Leave frame slots and `frame.addr` in place.
    Keep,
    /// Plain shadow-stack frames.
    Plain,
    /// Shadow-stack frames with the given slots tagged.
    Hardened,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuncPtrLowering {
    Keep,
    Plain,
    Authenticated,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Reserved {
    pub sp: u32,
    pub ambient: u32,
    pub stride: u32,
}

/// Indices of the reserved globals, appending any that are missing.
pub(crate) fn ensure_reserved(m: &mut Module) -> Reserved {
    let mut get = |name: &str, mutable: bool, init: i64| match m.global_index(name) {
        Some(i) => i,
        None => {
            m.globals.push(Global {
                name: name.to_string(),
                mutable,
                ty: ValType::I64,
                init,
            });
            (m.globals.len() - 1) as u32
        }
    };
    Reserved {
        sp: get(SP_GLOBAL, true, 0),
        ambient: get(AMBIENT_GLOBAL, false, 0),
        stride: get(STRIDE_GLOBAL, false, 1),
    }
}

/// A lowered function plus, for each emitted instruction, the index of the
/// source instruction it came from.
pub struct Lowered {
    pub func: Function,
    pub origin: Vec<u32>,
}

struct Emitter {
    body: Vec<Instr>,
    origin: Vec<u32>,
    at: u32,
}

impl Emitter {
    fn push(&mut self, i: Instr) {
        self.body.push(i);
        self.origin.push(self.at);
    }
}

pub(crate) fn lower_function(
    m: &Module,
    f: &Function,
    frames: FrameLowering,
    instrument: &[bool],
    funcptrs: FuncPtrLowering,
    reserved: Option<Reserved>,
) -> Lowered {
    use Instr::*;
    let lower_frames = frames != FrameLowering::Keep && !f.frame_slots.is_empty();
    let mut out = f.clone();
    let mut e = Emitter {
        body: Vec::with_capacity(f.body.len() + 16),
        origin: Vec::with_capacity(f.body.len() + 16),
        at: 0,
    };

    let nparams = m.types[f.type_idx as usize].ty.params.len() as u32;
    let new_local = |out: &mut Function| {
        out.locals.push(ValType::I64);
        nparams + out.locals.len() as u32 - 1
    };

    let mut layout = None;
    let mut slot_ptr = Vec::new();
    let mut fb = 0;
    if lower_frames {
        let r = reserved.expect("reserved globals for frame lowering");
        let hardened = frames == FrameLowering::Hardened;
        let flags: Vec<bool> = (0..f.frame_slots.len())
            .map(|i| hardened && instrument.get(i).copied().unwrap_or(false))
            .collect();
        let lay = FrameLayout::new(f, &flags);
        fb = new_local(&mut out);
        let tmp = if lay.slots.iter().filter(|s| s.instrument).count() > 1 {
            Some(new_local(&mut out))
        } else {
            None
        };
        slot_ptr = lay
            .slots
            .iter()
            .map(|s| s.instrument.then(|| new_local(&mut out)))
            .collect::<Vec<_>>();

        e.push(GlobalGet(r.sp));
        e.push(I64Const(lay.frame_bytes as i64));
        e.push(I64Bin(BinOp::Sub));
        e.push(LocalTee(fb));
        e.push(GlobalSet(r.sp));

        let mut prev: Option<u32> = None;
        for (s, p) in lay.slots.iter().zip(&slot_ptr) {
            let Some(p) = *p else { continue };
            match prev {
                None => {
                    e.push(LocalGet(fb));
                    e.push(I64Const(s.size as i64));
                    e.push(SegmentNew(s.offset));
                    e.push(I64Const(s.offset as i64));
                    e.push(I64Bin(BinOp::Add));
                    e.push(LocalSet(p));
                }
                Some(q) => {
                    let tmp = tmp.unwrap();
                    e.push(LocalGet(q));
                    e.push(I64Const(TAG_SHIFT as i64));
                    e.push(I64Bin(BinOp::ShrU));
                    e.push(I64Const(0xF));
                    e.push(I64Bin(BinOp::And));
                    e.push(GlobalGet(r.stride));
                    e.push(I64Bin(BinOp::Add));
                    e.push(LocalTee(tmp));
                    e.push(I64Const(16));
                    e.push(I64Rel(RelOp::GeU));
                    e.push(If(BlockType(Some(ValType::I64))));
                    e.push(GlobalGet(r.ambient));
                    e.push(GlobalGet(r.stride));
                    e.push(I64Bin(BinOp::Add));
                    e.push(Else);
                    e.push(LocalGet(tmp));
                    e.push(End);
                    e.push(I64Const(TAG_SHIFT as i64));
                    e.push(I64Bin(BinOp::Shl));
                    e.push(LocalGet(fb));
                    e.push(I64Const(s.offset as i64));
                    e.push(I64Bin(BinOp::Add));
                    e.push(I64Bin(BinOp::Or));
                    e.push(LocalSet(p));
                    e.push(LocalGet(fb));
                    e.push(LocalGet(p));
                    e.push(I64Const(s.size as i64));
                    e.push(SegmentSetTag(s.offset));
                }
            }
            prev = Some(p);
        }
        let result = m.types[f.type_idx as usize].ty.results.first().copied();
        e.push(Block(BlockType(result)));
        layout = Some((lay, r));
        out.frame_slots.clear();
    }

    let mut depth = 0u32;
    for (i, ins) in f.body.iter().enumerate() {
        e.at = i as u32;
        match ins {
            Block(_) | Loop(_) | If(_) => {
                depth += 1;
                e.push(ins.clone());
            }
            End => {
                depth -= 1;
                e.push(End);
            }
            Return if lower_frames => e.push(Br(depth)),
            FrameAddr(s) if lower_frames => match slot_ptr[*s as usize] {
                Some(p) => e.push(LocalGet(p)),
                None => {
                    let off = layout.as_ref().unwrap().0.slots[*s as usize].offset;
                    e.push(LocalGet(fb));
                    e.push(I64Const(off as i64));
                    e.push(I64Bin(BinOp::Add));
                }
            },
            FuncPtrMake(func) if funcptrs != FuncPtrLowering::Keep => {
                let idx = m.table.iter().position(|t| t == func).unwrap_or(0);
                e.push(I32Const(idx as i32));
                e.push(I64ExtendI32U);
                if funcptrs == FuncPtrLowering::Authenticated {
                    e.push(PointerSign);
                }
            }
            FuncPtrCall(t) if funcptrs != FuncPtrLowering::Keep => {
                if funcptrs == FuncPtrLowering::Authenticated {
                    e.push(PointerAuth);
                }
                e.push(I32WrapI64);
                e.push(CallIndirect(*t));
            }
            other => e.push(other.clone()),
        }
    }

    if let Some((lay, r)) = layout {
        e.at = f.body.len() as u32;
        e.push(End);
        for s in lay.slots.iter().filter(|s| s.instrument) {
            e.push(LocalGet(fb));
            e.push(GlobalGet(r.ambient));
            e.push(I64Const(TAG_SHIFT as i64));
            e.push(I64Bin(BinOp::Shl));
            e.push(I64Const(s.size as i64));
            e.push(SegmentSetTag(s.offset));
        }
        e.push(LocalGet(fb));
        e.push(I64Const(lay.frame_bytes as i64));
        e.push(I64Bin(BinOp::Add));
        e.push(GlobalSet(r.sp));
    }

    out.body = e.body;
    Lowered {
        func: out,
        origin: e.origin,
    }
}

/// A module free of pseudo-instructions, with per-function origin maps.
pub struct LoweredModule {
    pub module: Module,
    pub origins: Vec<Vec<u32>>,
}

/// Default lowering of whatever pseudo-instructions remain: plain frames and
/// unauthenticated function pointers.
pub fn lower_defaults(m: &Module) -> LoweredModule {
    let mut module = m.clone();
    let reserved = m
        .functions
        .iter()
        .any(|f| !f.frame_slots.is_empty())
        .then(|| ensure_reserved(&mut module));
    let mut origins = Vec::with_capacity(m.functions.len());
    for i in 0..module.functions.len() {
        let l = lower_function(
            &module,
            &module.functions[i],
            FrameLowering::Plain,
            &[],
            FuncPtrLowering::Plain,
            reserved,
        );
        module.functions[i] = l.func;
        origins.push(l.origin);
    }
    LoweredModule { module, origins }
}
