//! Segment-aware first-fit heap, exposed to guests as host imports.
//!
//! Every block starts with a 16-byte header granule that always keeps the
//! ambient tag; the payload behind it is a tagged segment while live. A
//! trailing sentinel granule closes the heap, so every live payload is
//! bracketed by ambient granules and a one-byte overflow in either direction
//! hits a tag mismatch.
//!
//! Block metadata is kept host-side and is authoritative. Header bytes
//! mirror it (capacity at +0, live flag at +8) for inspection only.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::interp::code::HostFunc;
use crate::interp::{Fault, TrapKind, Value};
use crate::runtime::Env;
use crate::tagmem::{mask_index, tag_of, TaggedPointer, ADDRESS_MASK, GRANULE, TAG_MASK};

/// Smallest remainder worth splitting off: a header plus one granule.
const MIN_SPLIT: u64 = 2 * GRANULE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    capacity: u64,
    requested: u64,
    live: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heap {
    start: u64,
    len: u64,
    /// Keyed by instance-relative header address.
    blocks: BTreeMap<u64, Block>,
}

/// A live allocation as seen from the host.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LiveBlock {
    pub payload: u64,
    pub requested: u64,
    pub capacity: u64,
}

impl Heap {
    pub(crate) fn new(start: u64, len: u64) -> Self {
        let mut blocks = BTreeMap::new();
        if len >= 2 * GRANULE + GRANULE {
            blocks.insert(
                start,
                Block {
                    capacity: len - 2 * GRANULE,
                    requested: 0,
                    live: false,
                },
            );
        }
        Self { start, len, blocks }
    }

    pub fn range(&self) -> Range<u64> {
        self.start..self.start + self.len
    }

    pub fn live_blocks(&self) -> impl Iterator<Item = LiveBlock> + '_ {
        self.blocks.iter().filter(|(_, b)| b.live).map(|(&h, b)| LiveBlock {
            payload: h + GRANULE,
            requested: b.requested,
            capacity: b.capacity,
        })
    }

    pub fn free_bytes(&self) -> u64 {
        self.blocks.values().filter(|b| !b.live).map(|b| b.capacity).sum()
    }
}

fn round_up(n: u64) -> u64 {
    n.div_ceil(GRANULE) * GRANULE
}

fn ambient(env: &Env) -> u8 {
    env.pool.map_or(env.inst.base_tag, |p| p.ambient())
}

fn retag(env: &mut Env, addr: u64, len: u64, tag: u8) {
    if env.pool.is_some() && len > 0 {
        let phys = env.inst.mem_base + addr;
        env.store
            .granule_tags_set(phys, len, tag)
            .expect("heap ranges are granule aligned and inside the instance");
    }
}

fn write_header(env: &mut Env, h: u64) {
    let Some(b) = env.inst.heap.blocks.get(&h).copied() else {
        return;
    };
    let phys = env.inst.mem_base + h;
    env.store.write_le(phys, 8, b.capacity).expect("header in arena");
    env.store.write_le(phys + 8, 8, b.live as u64).expect("header in arena");
}

pub(crate) fn init(env: &mut Env) {
    let headers: Vec<u64> = env.inst.heap.blocks.keys().copied().collect();
    for h in headers {
        write_header(env, h);
    }
}

pub(crate) fn malloc(env: &mut Env, size: i64) -> u64 {
    if size < 0 || size as u64 > env.inst.heap.len {
        return 0;
    }
    let need = round_up(size as u64).max(GRANULE);
    let Some((h, block)) = env
        .inst
        .heap
        .blocks
        .iter()
        .find(|(_, b)| !b.live && b.capacity >= need)
        .map(|(&h, &b)| (h, b))
    else {
        return 0;
    };

    let amb = ambient(env);
    let mut capacity = block.capacity;
    if capacity - need >= MIN_SPLIT {
        let rest = h + GRANULE + need;
        env.inst.heap.blocks.insert(
            rest,
            Block {
                capacity: capacity - need - GRANULE,
                requested: 0,
                live: false,
            },
        );
        retag(env, rest, GRANULE, amb);
        write_header(env, rest);
        capacity = need;
    }
    env.inst.heap.blocks.insert(
        h,
        Block {
            capacity,
            requested: need,
            live: true,
        },
    );
    write_header(env, h);

    let payload = h + GRANULE;
    let phys = env.inst.mem_base + payload;
    env.store.fill(phys, capacity, 0).expect("payload in arena");
    match env.pool {
        Some(pool) => {
            let tag = pool.draw(&mut env.inst.rng);
            retag(env, payload, need, tag);
            retag(env, payload + need, capacity - need, amb);
            TaggedPointer(payload).with_tag(tag).raw()
        }
        None => payload,
    }
}

/// Header address of the live block `p` points to, after checking that
/// every payload granule carries the pointer's tag.
fn live_block(env: &mut Env, p: u64) -> Result<Option<u64>, Fault> {
    let tagging = env.pool.is_some();
    let bad = |addr| {
        if tagging {
            Err(Fault::at(TrapKind::TagMismatch, addr))
        } else {
            Ok(None)
        }
    };
    let m = mask_index(p, env.mode);
    if m & !(ADDRESS_MASK | TAG_MASK) != 0 {
        return bad(p);
    }
    let payload = m & ADDRESS_MASK;
    let h = payload.wrapping_sub(GRANULE);
    let block = match env.inst.heap.blocks.get(&h) {
        Some(b) if b.live => *b,
        _ => return bad(payload),
    };
    if tagging {
        let expected = tag_of(m) | env.inst.base_tag;
        let phys = env.inst.mem_base + payload;
        env.stats.tag_checks += 1;
        let uniform = env.store.granule_tags_get(phys, block.requested);
        if uniform != Ok(expected) {
            env.stats.tag_check_failures += 1;
            return bad(payload);
        }
    }
    Ok(Some(h))
}

pub(crate) fn free(env: &mut Env, p: u64) -> Result<(), Fault> {
    if p == 0 {
        return Ok(());
    }
    let Some(h) = live_block(env, p)? else {
        return Ok(());
    };
    let amb = ambient(env);
    let mut block = env.inst.heap.blocks[&h];
    if let Some(pool) = env.pool {
        let expected = tag_of(mask_index(p, env.mode)) | env.inst.base_tag;
        retag(env, h + GRANULE, block.requested, pool.next_cycle(expected));
    }
    block.live = false;
    block.requested = 0;

    // Absorb a free successor.
    let next = h + GRANULE + block.capacity;
    if let Some(n) = env.inst.heap.blocks.get(&next).copied().filter(|n| !n.live) {
        retag(env, next, GRANULE + n.capacity, amb);
        env.inst.heap.blocks.remove(&next);
        block.capacity += GRANULE + n.capacity;
    }
    // Merge into a free predecessor.
    let prev = env
        .inst
        .heap
        .blocks
        .range(..h)
        .next_back()
        .map(|(&ph, &pb)| (ph, pb))
        .filter(|(ph, pb)| !pb.live && ph + GRANULE + pb.capacity == h);
    match prev {
        Some((ph, mut pb)) => {
            retag(env, h, GRANULE + block.capacity, amb);
            env.inst.heap.blocks.remove(&h);
            pb.capacity += GRANULE + block.capacity;
            env.inst.heap.blocks.insert(ph, pb);
            write_header(env, ph);
        }
        None => {
            env.inst.heap.blocks.insert(h, block);
            write_header(env, h);
        }
    }
    Ok(())
}

pub(crate) fn realloc(env: &mut Env, p: u64, size: i64) -> Result<u64, Fault> {
    if p == 0 {
        return Ok(malloc(env, size));
    }
    let Some(h) = live_block(env, p)? else {
        return Ok(0);
    };
    if size == 0 {
        free(env, p)?;
        return Ok(0);
    }
    let old = env.inst.heap.blocks[&h];
    let q = malloc(env, size);
    if q == 0 {
        return Ok(0);
    }
    let n = old.requested.min(size as u64);
    let from = env.inst.mem_base + h + GRANULE;
    let to = env.inst.mem_base + (q & ADDRESS_MASK);
    let bytes = env.store.read(from, n).expect("payload in arena").to_vec();
    env.store.write(to, &bytes).expect("payload in arena");
    free(env, p)?;
    Ok(q)
}

pub(crate) fn call_host(env: &mut Env, h: HostFunc, args: &[Value]) -> Result<Option<Value>, Fault> {
    let arg = |i: usize| args[i].as_u64();
    match h {
        HostFunc::Malloc => Ok(Some(Value::I64(malloc(env, arg(0) as i64)))),
        HostFunc::Free => free(env, arg(0)).map(|_| None),
        HostFunc::Realloc => realloc(env, arg(0), arg(1) as i64).map(|p| Some(Value::I64(p))),
        HostFunc::PrintI64 => {
            env.output.push(arg(0) as i64);
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FeatureSet, Mode};
    use crate::runtime::{InstanceId, Runtime, RuntimeConfig};
    use crate::tagmem::TagPool;
    use crate::text::parse;
    use crate::validate::validate;

    fn runtime(mode: Mode, seed: u64) -> (Runtime, InstanceId) {
        let m = parse("(module (memory 1))").unwrap();
        let mut rt = Runtime::new(RuntimeConfig::new(mode, seed)).unwrap();
        let id = rt.add_instance(&validate(&m, FeatureSet::ALL).unwrap()).unwrap();
        (rt, id)
    }

    /// Tag of an instance-relative granule, read straight from the store.
    fn tag(rt: &Runtime, id: InstanceId, addr: u64) -> u8 {
        rt.store().granule_tag((rt.instance(id).mem_base() + addr) / GRANULE)
    }

    #[test]
    fn malloc_tags_payload_between_ambient_granules() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 3);
        let p = rt.with_env(id, |env| malloc(env, 24));
        let ptr = TaggedPointer(p);
        let t = ptr.tag();
        assert!(TagPool::internal_only().contains(t));
        let a = ptr.address();
        assert_eq!(a % GRANULE, 0);
        assert_eq!(tag(&rt, id, a - 16), 0);
        assert_eq!(tag(&rt, id, a), t);
        assert_eq!(tag(&rt, id, a + 16), t);
        assert_eq!(tag(&rt, id, a + 32), 0);
        let q = rt.with_env(id, |env| malloc(env, 8));
        assert_eq!(TaggedPointer(q).address(), a + 48, "second header sits between");
    }

    #[test]
    fn free_retags_and_rejects_double_free() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 4);
        let p = rt.with_env(id, |env| malloc(env, 32));
        let _guard = rt.with_env(id, |env| malloc(env, 16));
        let a = TaggedPointer(p).address();
        let t = TaggedPointer(p).tag();
        rt.with_env(id, |env| free(env, p)).unwrap();
        assert_eq!(tag(&rt, id, a), TagPool::internal_only().next_cycle(t));
        let again = rt.with_env(id, |env| free(env, p));
        assert_eq!(again.map_err(|f| f.kind), Err(TrapKind::TagMismatch));
        assert_eq!(rt.with_env(id, |env| free(env, 0)), Ok(()));
    }

    #[test]
    fn wrong_tag_free_traps() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 5);
        let p = rt.with_env(id, |env| malloc(env, 32));
        let forged = TaggedPointer(p).with_tag(TagPool::internal_only().next_cycle(TaggedPointer(p).tag()));
        assert!(rt.with_env(id, |env| free(env, forged.raw())).is_err());
        assert!(rt.with_env(id, |env| free(env, p + 16)).is_err());
    }

    #[test]
    fn baseline_double_free_is_silent() {
        let (mut rt, id) = runtime(Mode::BASELINE, 5);
        let p = rt.with_env(id, |env| malloc(env, 32));
        assert_eq!(TaggedPointer(p).tag(), 0);
        assert_eq!(rt.with_env(id, |env| free(env, p)), Ok(()));
        assert_eq!(rt.with_env(id, |env| free(env, p)), Ok(()));
    }

    #[test]
    fn exhaustion_and_reuse() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 6);
        assert_eq!(rt.with_env(id, |env| malloc(env, 1 << 30)), 0);
        assert_eq!(rt.with_env(id, |env| malloc(env, -1)), 0);
        let before = rt.instance(id).heap.free_bytes();
        let ps: Vec<u64> = (0..10).map(|i| rt.with_env(id, |env| malloc(env, 16 * i + 1))).collect();
        for p in ps.iter().rev() {
            rt.with_env(id, |env| free(env, *p)).unwrap();
        }
        assert_eq!(rt.instance(id).heap.free_bytes(), before, "fully coalesced");
        // Only the lowest block, which had no free neighbour below it, keeps
        // its quarantine tag; every absorbed region is ambient again.
        let first = TaggedPointer(ps[0]).address() + rt.instance(id).mem_base();
        let runs = crate::tagmem::tag_runs(&crate::tagmem::parse_dump(&rt.dump_tags()).unwrap());
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].start_addr(), first);
    }

    #[test]
    fn realloc_copies_and_invalidates() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 7);
        let p = rt.with_env(id, |env| malloc(env, 16));
        let base = rt.instance(id).mem_base();
        let a = TaggedPointer(p).address();
        rt.with_env(id, |env| env.store.write_le(base + a, 8, 0x1122_3344).unwrap());
        let q = rt.with_env(id, |env| realloc(env, p, 64)).unwrap();
        assert_ne!(q, 0);
        let b = TaggedPointer(q).address();
        assert_eq!(rt.store().read_le(base + b, 8), Ok(0x1122_3344));
        assert!(rt.with_env(id, |env| free(env, p)).is_err());
        assert_eq!(rt.with_env(id, |env| realloc(env, q, 0)), Ok(0));
        let r = rt.with_env(id, |env| realloc(env, 0, 8)).unwrap();
        assert_ne!(r, 0);
    }

    #[test]
    fn realloc_exhaustion_keeps_original() {
        let (mut rt, id) = runtime(Mode::INTERNAL, 8);
        let p = rt.with_env(id, |env| malloc(env, 16));
        assert_eq!(rt.with_env(id, |env| realloc(env, p, 1 << 30)), Ok(0));
        assert_eq!(rt.with_env(id, |env| free(env, p)), Ok(()));
    }

    #[test]
    fn combined_mode_keeps_the_sandbox_bit() {
        let (mut rt, id) = runtime(Mode::COMBINED, 9);
        let p = rt.with_env(id, |env| malloc(env, 16));
        let t = TaggedPointer(p).tag();
        assert!(TagPool::combined().contains(t));
        let a = TaggedPointer(p).address();
        assert_eq!(tag(&rt, id, a), t);
        assert_eq!(tag(&rt, id, a - 16), 1);
        rt.with_env(id, |env| free(env, p)).unwrap();
    }
}
