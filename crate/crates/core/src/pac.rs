//! Software pointer authentication.
//!
//! Signatures are 10 bits wide and occupy the signature field of the pointer
//! layout (bits 49–54 and 60–63), next to the memory tag. The keyed function
//! is a fixed SplitMix64-style finalizer chain: deterministic and
//! reproducible across implementations, but not cryptographically strong.

use rand::Rng;

use crate::tagmem::{TaggedPointer, SIGNATURE_MASK};

/// Runtime-wide secret key. Never reachable from guest code.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SigningKey {
    pub k0: u64,
    pub k1: u64,
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl SigningKey {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            k0: rng.gen(),
            k1: rng.gen(),
        }
    }
}

/// Per-instance salt mixed into every signature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Modifier(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("pointer authentication failed for {0:#018x}")]
pub struct AuthTrap(pub u64);

fn mix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Keyed 10-bit signature of `payload`.
pub fn prf(payload: u64, key: &SigningKey, modifier: Modifier) -> u16 {
    let mut v = payload ^ key.k0;
    v = mix(v);
    v ^= modifier.0.wrapping_add(key.k1);
    v = mix(v);
    (v as u16) & SIGNATURE_MASK
}

/// Replaces the signature field of `p` with the signature of its
/// signature-free payload.
pub fn sign(p: u64, key: &SigningKey, modifier: Modifier) -> u64 {
    let payload = TaggedPointer(p).strip();
    payload
        .with_pac_field(prf(payload.raw(), key, modifier))
        .raw()
}

pub fn strip(p: u64) -> u64 {
    TaggedPointer(p).strip().raw()
}

/// Checks the signature of `p` and returns it stripped.
pub fn authenticate(p: u64, key: &SigningKey, modifier: Modifier) -> Result<u64, AuthTrap> {
    let stripped = strip(p);
    if sign(stripped, key, modifier) == p {
        Ok(stripped)
    } else {
        Err(AuthTrap(p))
    }
}
