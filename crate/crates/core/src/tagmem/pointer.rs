//! 64-bit pointer layout: 48 address bits, a 4-bit memory tag in bits 56–59,
//! and a 10-bit signature split over bits 49–54 and 60–63. Bits 48 and 55
//! stay zero (user-space, low canonical half).

use std::fmt;

use crate::config::Mode;

pub const ADDRESS_BITS: u32 = 48;
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;
pub const TAG_SHIFT: u32 = 56;
pub const TAG_MASK: u64 = 0xF << TAG_SHIFT;
/// Low six signature bits live in 49–54, the high four in 60–63.
pub const PAC_LOW_SHIFT: u32 = 49;
pub const PAC_HIGH_SHIFT: u32 = 60;
pub const PAC_MASK: u64 = (0x3F << PAC_LOW_SHIFT) | (0xF << PAC_HIGH_SHIFT);
pub const SIGNATURE_BITS: u32 = 10;
pub const SIGNATURE_MASK: u16 = (1 << SIGNATURE_BITS) - 1;

/// Number of distinct memory tags.
pub const TAG_COUNT: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PointerError {
    #[error("address {0:#x} does not fit in 48 bits")]
    AddressRange(u64),
    #[error("tag {0} does not fit in 4 bits")]
    TagRange(u8),
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TaggedPointer(pub u64);

impl fmt::Debug for TaggedPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "TaggedPointer({:#018x}: addr={:#x} tag={:#x} pac={:#x})",
            self.0,
            self.address(),
            self.tag(),
            self.pac_field()
        )
    }
}

impl TaggedPointer {
    pub fn encode(address: u64, tag: u8) -> Result<Self, PointerError> {
        if address > ADDRESS_MASK {
            return Err(PointerError::AddressRange(address));
        }
        if tag >= TAG_COUNT {
            return Err(PointerError::TagRange(tag));
        }
        Ok(Self(address | (u64::from(tag) << TAG_SHIFT)))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn address(self) -> u64 {
        self.0 & ADDRESS_MASK
    }

    pub fn tag(self) -> u8 {
        tag_of(self.0)
    }

    /// The 10-bit signature field.
    pub fn pac_field(self) -> u16 {
        let low = (self.0 >> PAC_LOW_SHIFT) & 0x3F;
        let high = (self.0 >> PAC_HIGH_SHIFT) & 0xF;
        (low | (high << 6)) as u16
    }

    pub fn with_tag(self, tag: u8) -> Self {
        Self((self.0 & !TAG_MASK) | (u64::from(tag & 0xF) << TAG_SHIFT))
    }

    pub fn with_pac_field(self, sig: u16) -> Self {
        let sig = u64::from(sig & SIGNATURE_MASK);
        let bits = ((sig & 0x3F) << PAC_LOW_SHIFT) | ((sig >> 6) << PAC_HIGH_SHIFT);
        Self((self.0 & !PAC_MASK) | bits)
    }

    /// Removes the signature field.
    pub fn strip(self) -> Self {
        Self(self.0 & !PAC_MASK)
    }

    /// Only address and tag bits may be set for a pointer to reach memory.
    pub fn is_canonical(self) -> bool {
        self.0 & !(ADDRESS_MASK | TAG_MASK) == 0
    }
}

pub fn tag_of(raw: u64) -> u8 {
    ((raw >> TAG_SHIFT) & 0xF) as u8
}

/// Tag bits a guest index may not control in `mode`.
pub fn masked_bits(mode: Mode) -> u64 {
    match (mode.internal, mode.external) {
        (false, true) => TAG_MASK,
        (true, true) => 1 << TAG_SHIFT,
        _ => 0,
    }
}

/// Clears guest-controlled tag bits before address computation: all four tag
/// bits under external-only sandboxing, only the sandbox bit (bit 56) when
/// sandboxing is combined with internal safety.
pub fn mask_index(idx: u64, mode: Mode) -> u64 {
    idx & !masked_bits(mode)
}
