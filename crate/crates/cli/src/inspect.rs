use std::path::Path;

use segwasm::tagmem::{parse_dump, tag_runs};

use crate::{CmdResult, Failure};

/// Prints one line per run of equally tagged granules. Gaps between runs
/// hold the ambient tag of their region.
pub fn inspect(path: &Path) -> CmdResult {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("error: cannot read {}: {e}", path.display())))?;
    let entries = parse_dump(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    let runs = tag_runs(&entries);
    if runs.is_empty() {
        println!("all granules hold their ambient tag");
        return Ok(());
    }
    let mut prev_end = None;
    for r in &runs {
        if prev_end != Some(r.first_granule) {
            println!("  ... ambient");
        }
        println!(
            "{:#010x}..{:#010x} tag {:x} ({} granule{})",
            r.start_addr(),
            r.end_addr(),
            r.tag,
            r.granules,
            if r.granules == 1 { "" } else { "s" }
        );
        prev_end = Some(r.first_granule + r.granules);
    }
    println!("  ... ambient");
    Ok(())
}
