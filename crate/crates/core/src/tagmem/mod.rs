//! Software memory tagging: pointer layout, granule tag storage, tag pools
//! and the tag-map dump format.

mod pointer;
mod pool;
mod store;

pub use pointer::*;
pub use pool::{TagPool, COMBINED_SANDBOX_BITS, SANDBOX_BIT};
pub use store::{TagError, TagStore, GRANULE};

use std::fmt::Write;

/// One line of a tag-map dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaggedGranule {
    pub granule: u64,
    pub tag: u8,
}

/// Renders `granule_index hex_tag` lines for every granule whose tag differs
/// from `ambient(granule)`, in ascending order.
pub fn dump_tags(store: &TagStore, ambient: impl Fn(u64) -> u8) -> String {
    let mut out = String::new();
    for g in 0..store.granule_count() {
        let t = store.granule_tag(g);
        if t != ambient(g) {
            let _ = writeln!(out, "{g} {t:x}");
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("tag dump line {line}: {message}")]
pub struct DumpParseError {
    pub line: usize,
    pub message: String,
}

pub fn parse_dump(text: &str) -> Result<Vec<TaggedGranule>, DumpParseError> {
    let mut out: Vec<TaggedGranule> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| DumpParseError {
            line: line_no,
            message: message.to_string(),
        };
        let mut parts = line.split_whitespace();
        let (Some(g), Some(t), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err("expected 'granule_index hex_tag'"));
        };
        let granule: u64 = g.parse().map_err(|_| err("bad granule index"))?;
        let tag = u8::from_str_radix(t, 16)
            .ok()
            .filter(|t| *t < 16)
            .ok_or_else(|| err("bad tag"))?;
        if out.last().is_some_and(|p| p.granule >= granule) {
            return Err(err("granules must be strictly ascending"));
        }
        out.push(TaggedGranule { granule, tag });
    }
    Ok(out)
}

/// A maximal run of consecutive granules sharing a tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagRun {
    pub first_granule: u64,
    pub granules: u64,
    pub tag: u8,
}

impl TagRun {
    pub fn start_addr(&self) -> u64 {
        self.first_granule * GRANULE
    }

    pub fn end_addr(&self) -> u64 {
        (self.first_granule + self.granules) * GRANULE
    }
}

pub fn tag_runs(entries: &[TaggedGranule]) -> Vec<TagRun> {
    let mut runs: Vec<TagRun> = Vec::new();
    for e in entries {
        match runs.last_mut() {
            Some(r) if r.tag == e.tag && r.first_granule + r.granules == e.granule => {
                r.granules += 1
            }
            _ => runs.push(TagRun {
                first_granule: e.granule,
                granules: 1,
                tag: e.tag,
            }),
        }
    }
    runs
}
