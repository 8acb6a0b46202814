use rand::Rng;

use super::pointer::TaggedPointer;
use crate::config::Mode;

/// Tag value of the sandbox bit (pointer bit 56) in combined mode.
pub const SANDBOX_BIT: u8 = 0b0001;

/// Number of low tag bits reserved for sandboxing when sandboxing and
/// internal safety are combined. The remaining upper bits carry internal tags.
pub const COMBINED_SANDBOX_BITS: u32 = 1;

/// Tags a runtime may hand out for segments, plus the ambient tag of
/// untagged memory. The ambient tag is never drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagPool {
    allowed: Vec<u8>,
    ambient: u8,
}

impl TagPool {
    /// Internal safety alone: tags 1–15, tag 0 reserved for untagged memory.
    pub fn internal_only() -> Self {
        Self {
            allowed: (1..16).collect(),
            ambient: 0,
        }
    }

    /// Internal safety plus sandboxing: every tag carries the sandbox bit;
    /// the ambient tag is the bare sandbox bit, leaving seven internal tags.
    pub fn combined() -> Self {
        let step = 1u8 << COMBINED_SANDBOX_BITS;
        Self {
            allowed: (1..8u8).map(|upper| upper * step | SANDBOX_BIT).collect(),
            ambient: SANDBOX_BIT,
        }
    }

    /// Pool for a mode; `None` when internal safety is off.
    pub fn for_mode(mode: Mode) -> Option<Self> {
        match (mode.internal, mode.external) {
            (true, false) => Some(Self::internal_only()),
            (true, true) => Some(Self::combined()),
            _ => None,
        }
    }

    pub fn allowed(&self) -> &[u8] {
        &self.allowed
    }

    pub fn ambient(&self) -> u8 {
        self.ambient
    }

    /// Distance between consecutive allowed tags.
    pub fn stride(&self) -> u8 {
        self.allowed[1] - self.allowed[0]
    }

    pub fn contains(&self, tag: u8) -> bool {
        self.allowed.contains(&tag)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        self.allowed[rng.gen_range(0..self.allowed.len())]
    }

    /// `p` re-tagged with a fresh draw.
    pub fn new_tag<R: Rng + ?Sized>(&self, p: TaggedPointer, rng: &mut R) -> TaggedPointer {
        p.with_tag(self.draw(rng))
    }

    /// Successor of `tag` in the allowed list, wrapping past the end. Tags
    /// outside the pool (such as the ambient tag) map to the first entry.
    pub fn next_cycle(&self, tag: u8) -> u8 {
        match self.allowed.iter().position(|&t| t == tag) {
            Some(i) => self.allowed[(i + 1) % self.allowed.len()],
            None => self.allowed[0],
        }
    }

    /// `p` re-tagged with a tag guaranteed to differ from its current one.
    pub fn free_tag(&self, p: TaggedPointer) -> TaggedPointer {
        p.with_tag(self.next_cycle(p.tag()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pools_exclude_their_ambient_tag() {
        let i = TagPool::internal_only();
        assert_eq!(i.allowed().len(), 15);
        assert!(!i.contains(i.ambient()));
        let c = TagPool::combined();
        assert_eq!(c.allowed(), &[3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(c.ambient(), 1);
        assert!(c.allowed().iter().all(|t| t & SANDBOX_BIT != 0));
        assert_eq!(c.stride(), 2);
        assert!(TagPool::for_mode(Mode::EXTERNAL).is_none());
        assert!(TagPool::for_mode(Mode::BASELINE).is_none());
    }

    #[test]
    fn free_tag_cycles() {
        let i = TagPool::internal_only();
        let p = |t| TaggedPointer(0x40).with_tag(t);
        assert_eq!(i.free_tag(p(5)).tag(), 6);
        assert_eq!(i.free_tag(p(15)).tag(), 1);
        assert_eq!(i.free_tag(p(0)).tag(), 1);
        let c = TagPool::combined();
        assert_eq!(c.free_tag(p(15)).tag(), 3);
        assert_eq!(c.free_tag(p(9)).tag(), 11);
        for pool in [i, c] {
            for &t in pool.allowed() {
                assert_ne!(pool.next_cycle(t), t);
            }
        }
    }

    #[test]
    fn draws_stay_in_pool_and_are_deterministic() {
        for pool in [TagPool::internal_only(), TagPool::combined()] {
            let mut a = ChaCha8Rng::seed_from_u64(11);
            let mut b = ChaCha8Rng::seed_from_u64(11);
            for _ in 0..1000 {
                let p = pool.new_tag(TaggedPointer(0x1230), &mut a);
                assert!(pool.contains(p.tag()));
                assert_eq!(p.address(), 0x1230);
                assert_eq!(p, pool.new_tag(TaggedPointer(0x1230), &mut b));
            }
        }
    }

    #[test]
    fn draws_are_uniform() {
        const N: usize = 100_000;
        for pool in [TagPool::internal_only(), TagPool::combined()] {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
            let mut counts = [0usize; 16];
            for _ in 0..N {
                counts[pool.draw(&mut rng) as usize] += 1;
            }
            let expected = 1.0 / pool.allowed().len() as f64;
            for &t in pool.allowed() {
                let freq = counts[t as usize] as f64 / N as f64;
                assert!((freq - expected).abs() <= 0.01, "tag {t}: {freq}");
            }
        }
    }
}
