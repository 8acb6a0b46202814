//! Module-to-module hardening: stack-slot tagging driven by escape analysis,
//! and authenticated function pointers.

mod escape;
mod lower;

pub use escape::{classify_slots, AbstractValue, Offset, SlotClass};
pub use lower::{
    lower_defaults, FrameLayout, LoweredModule, SlotLayout, AMBIENT_GLOBAL, SP_GLOBAL,
    STRIDE_GLOBAL,
};

use crate::ast::{Hardening, Module};
use crate::config::FeatureSet;
use crate::validate::{validate, ValidationError};
use lower::{ensure_reserved, lower_function, FrameLowering, FuncPtrLowering};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HardenOptions {
    pub stack_safety: bool,
    pub ptr_auth: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum HardenError {
    #[error("module is already hardened")]
    AlreadyHardened,
    #[error("input does not validate: {0}")]
    Invalid(ValidationError),
    #[error("hardened output does not validate: {0}")]
    Output(ValidationError),
}

/// Frame layout the stack pass would produce for each defined function.
pub fn frame_layouts(m: &Module) -> Vec<FrameLayout> {
    m.functions
        .iter()
        .map(|f| {
            let flags: Vec<bool> = classify_slots(m, f).iter().map(|c| c.instrument()).collect();
            FrameLayout::new(f, &flags)
        })
        .collect()
}

pub fn harden(m: &Module, opts: HardenOptions) -> Result<Module, HardenError> {
    if m.hardening.is_some() {
        return Err(HardenError::AlreadyHardened);
    }
    validate(m, FeatureSet::ALL).map_err(HardenError::Invalid)?;

    let mut out = m.clone();
    let reserved = (opts.stack_safety && m.functions.iter().any(|f| !f.frame_slots.is_empty()))
        .then(|| ensure_reserved(&mut out));
    let frames = if opts.stack_safety {
        FrameLowering::Hardened
    } else {
        FrameLowering::Keep
    };
    let funcptrs = if opts.ptr_auth {
        FuncPtrLowering::Authenticated
    } else {
        FuncPtrLowering::Keep
    };
    for i in 0..out.functions.len() {
        let f = &out.functions[i];
        let flags: Vec<bool> = classify_slots(&out, f)
            .iter()
            .map(|c| c.instrument())
            .collect();
        let lowered = lower_function(&out, f, frames, &flags, funcptrs, reserved);
        out.functions[i] = lowered.func;
    }
    out.hardening = Some(Hardening {
        stack_safety: opts.stack_safety,
        ptr_auth: opts.ptr_auth,
    });
    validate(&out, FeatureSet::ALL).map_err(HardenError::Output)?;
    Ok(out)
}
