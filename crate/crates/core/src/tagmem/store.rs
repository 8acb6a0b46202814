//! Byte arena plus the packed 4-bit-per-granule tag memory.

pub const GRANULE: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TagError {
    #[error("granules in [{addr:#x}, +{len}) carry different tags")]
    HeterogeneousTags { addr: u64, len: u64 },
    #[error("range [{addr:#x}, +{len}) is outside the arena")]
    OutOfBounds { addr: u64, len: u64 },
    #[error("range [{addr:#x}, +{len}) is not granule aligned")]
    Unaligned { addr: u64, len: u64 },
    #[error("arena size {0} is not a positive multiple of 16")]
    BadArenaSize(u64),
}

#[derive(Clone, PartialEq, Eq)]
pub struct TagStore {
    mem: Vec<u8>,
    /// Two granule tags per byte, low nibble first.
    tags: Vec<u8>,
}

impl std::fmt::Debug for TagStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TagStore")
            .field("arena_bytes", &self.mem.len())
            .field("tag_storage_bytes", &self.tags.len())
            .finish()
    }
}

impl TagStore {
    /// Zero-filled arena with every granule tagged 0.
    pub fn new(arena_bytes: u64) -> Result<Self, TagError> {
        if arena_bytes == 0 || arena_bytes % GRANULE != 0 {
            return Err(TagError::BadArenaSize(arena_bytes));
        }
        let granules = arena_bytes / GRANULE;
        Ok(Self {
            mem: vec![0; arena_bytes as usize],
            tags: vec![0; granules.div_ceil(2) as usize],
        })
    }

    pub fn arena_bytes(&self) -> u64 {
        self.mem.len() as u64
    }

    pub fn granule_count(&self) -> u64 {
        self.arena_bytes() / GRANULE
    }

    /// Bytes of tag memory backing the arena (4 bits per 16-byte granule).
    pub fn tag_storage_bytes(&self) -> u64 {
        self.tags.len() as u64
    }

    pub fn granule_tag(&self, granule: u64) -> u8 {
        let byte = self.tags[(granule / 2) as usize];
        if granule % 2 == 0 {
            byte & 0xF
        } else {
            byte >> 4
        }
    }

    fn put_granule_tag(&mut self, granule: u64, tag: u8) {
        let byte = &mut self.tags[(granule / 2) as usize];
        if granule % 2 == 0 {
            *byte = (*byte & 0xF0) | (tag & 0xF);
        } else {
            *byte = (*byte & 0x0F) | ((tag & 0xF) << 4);
        }
    }

    pub fn in_bounds(&self, addr: u64, len: u64) -> bool {
        addr.checked_add(len)
            .is_some_and(|end| end <= self.arena_bytes())
    }

    fn check_bounds(&self, addr: u64, len: u64) -> Result<(), TagError> {
        if self.in_bounds(addr, len) {
            Ok(())
        } else {
            Err(TagError::OutOfBounds { addr, len })
        }
    }

    /// The single tag shared by every granule intersecting `[addr, addr+len)`.
    pub fn granule_tags_get(&self, addr: u64, len: u64) -> Result<u8, TagError> {
        let len = len.max(1);
        self.check_bounds(addr, len)?;
        let first = addr / GRANULE;
        let last = (addr + len - 1) / GRANULE;
        let tag = self.granule_tag(first);
        if (first + 1..=last).all(|g| self.granule_tag(g) == tag) {
            Ok(tag)
        } else {
            Err(TagError::HeterogeneousTags { addr, len })
        }
    }

    /// Tags every granule in `[addr, addr+len)`. Both ends must be granule
    /// aligned.
    pub fn granule_tags_set(&mut self, addr: u64, len: u64, tag: u8) -> Result<(), TagError> {
        if addr % GRANULE != 0 || len % GRANULE != 0 {
            return Err(TagError::Unaligned { addr, len });
        }
        self.check_bounds(addr, len)?;
        for g in addr / GRANULE..(addr + len) / GRANULE {
            self.put_granule_tag(g, tag);
        }
        Ok(())
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<&[u8], TagError> {
        self.check_bounds(addr, len)?;
        Ok(&self.mem[addr as usize..(addr + len) as usize])
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), TagError> {
        self.check_bounds(addr, bytes.len() as u64)?;
        self.mem[addr as usize..addr as usize + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) -> Result<(), TagError> {
        self.check_bounds(addr, len)?;
        self.mem[addr as usize..(addr + len) as usize].fill(byte);
        Ok(())
    }

    /// Little-endian load of `width` ≤ 8 bytes.
    pub fn read_le(&self, addr: u64, width: u64) -> Result<u64, TagError> {
        let bytes = self.read(addr, width)?;
        let mut buf = [0u8; 8];
        buf[..bytes.len()].copy_from_slice(bytes);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write_le(&mut self, addr: u64, width: u64, value: u64) -> Result<(), TagError> {
        let bytes = value.to_le_bytes();
        self.write(addr, &bytes[..width as usize])
    }

    /// Granule tags of the half-open granule range, in order.
    pub fn tags_in(&self, granules: std::ops::Range<u64>) -> impl Iterator<Item = u8> + '_ {
        granules.map(|g| self.granule_tag(g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fresh_store_is_zero_tagged() {
        let s = TagStore::new(1024).unwrap();
        assert_eq!(s.granule_tags_get(32, 8), Ok(0));
        assert_eq!(s.tag_storage_bytes(), 1024 / 32);
    }

    #[test]
    fn set_then_get() {
        let mut s = TagStore::new(1024).unwrap();
        s.granule_tags_set(0x20, 32, 0xB).unwrap();
        assert_eq!(s.granule_tag(1), 0);
        assert_eq!(s.granule_tag(2), 0xB);
        assert_eq!(s.granule_tag(3), 0xB);
        assert_eq!(s.granule_tag(4), 0);
        assert_eq!(s.granule_tags_get(0x20, 32), Ok(0xB));
        assert!(matches!(
            s.granule_tags_get(0x18, 16),
            Err(TagError::HeterogeneousTags { .. })
        ));
    }

    #[test]
    fn set_rejects_unaligned_and_out_of_bounds() {
        let mut s = TagStore::new(1024).unwrap();
        assert!(matches!(
            s.granule_tags_set(0x21, 16, 0xB),
            Err(TagError::Unaligned { .. })
        ));
        assert!(matches!(
            s.granule_tags_set(0x20, 8, 0xB),
            Err(TagError::Unaligned { .. })
        ));
        assert!(matches!(
            s.granule_tags_set(1024 - 16, 32, 1),
            Err(TagError::OutOfBounds { .. })
        ));
        assert!(matches!(
            s.granule_tags_get(1020, 8),
            Err(TagError::OutOfBounds { .. })
        ));
        // Nothing changed.
        assert!(s.tags_in(0..64).all(|t| t == 0));
    }

    #[test]
    fn bad_arena_size() {
        assert!(TagStore::new(0).is_err());
        assert!(TagStore::new(24).is_err());
    }

    #[test]
    fn tag_storage_is_one_thirty_second() {
        for size in [1u64 << 20, 128 << 20] {
            let s = TagStore::new(size).unwrap();
            assert_eq!(s.tag_storage_bytes() * 32, size);
        }
    }

    #[derive(Debug, Clone)]
    enum Op {
        Set { granule: u64, count: u64, tag: u8 },
        Get { addr: u64, len: u64 },
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..70, 0u64..8, 0u8..16).prop_map(|(granule, count, tag)| Op::Set {
                granule,
                count,
                tag
            }),
            (0u64..1100, 1u64..64).prop_map(|(addr, len)| Op::Get { addr, len }),
        ]
    }

    proptest! {
        // Per-byte reference map: every byte remembers its own tag.
        #[test]
        fn agrees_with_per_byte_reference(ops in prop::collection::vec(op(), 1..60)) {
            const ARENA: u64 = 1024;
            let mut store = TagStore::new(ARENA).unwrap();
            let mut bytes = vec![0u8; ARENA as usize];
            for op in ops {
                match op {
                    Op::Set { granule, count, tag } => {
                        let addr = granule * 16;
                        let len = count * 16;
                        let got = store.granule_tags_set(addr, len, tag);
                        if addr + len <= ARENA {
                            prop_assert!(got.is_ok());
                            for b in addr..addr + len {
                                bytes[b as usize] = tag;
                            }
                        } else {
                            prop_assert!(matches!(got, Err(TagError::OutOfBounds { .. })), "{:?}", got);
                        }
                    }
                    Op::Get { addr, len } => {
                        let got = store.granule_tags_get(addr, len);
                        if addr + len > ARENA {
                            prop_assert!(matches!(got, Err(TagError::OutOfBounds { .. })), "{:?}", got);
                            continue;
                        }
                        // Expand the access to granule boundaries, then compare bytes.
                        let lo = addr / 16 * 16;
                        let hi = (addr + len).div_ceil(16) * 16;
                        let first = bytes[lo as usize];
                        let uniform = (lo..hi).all(|b| bytes[b as usize] == first);
                        if uniform {
                            prop_assert_eq!(got, Ok(first));
                        } else {
                            prop_assert!(matches!(got, Err(TagError::HeterogeneousTags { .. })), "{:?}", got);
                        }
                    }
                }
            }
        }
    }
}
