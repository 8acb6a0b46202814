//! Shared setup for the benchmarks: corpus loading and instantiation.

use std::path::Path;

use segwasm::{harden::HardenOptions, parse, validate, InstanceId, Mode, Module, Runtime, RuntimeConfig};

/// Parses a program from the repository corpus.
pub fn corpus_module(name: &str) -> Module {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Optionally hardens `m`, then instantiates it alone in a fresh runtime.
pub fn instantiate(m: &Module, mode: Mode, harden: Option<HardenOptions>) -> (Runtime, InstanceId) {
    let m = match harden {
        Some(o) => segwasm::harden::harden(m, o).expect("module hardens"),
        None => m.clone(),
    };
    let vm = validate(&m, mode.features()).expect("module validates");
    let mut rt = Runtime::new(RuntimeConfig::new(mode, 1)).expect("runtime config");
    let id = rt.add_instance(&vm).expect("instantiates");
    (rt, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_programs_instantiate_in_every_mode() {
        for mode in [Mode::BASELINE, Mode::INTERNAL, Mode::FULL] {
            let (mut rt, id) = instantiate(&corpus_module("fib.cwat"), mode, None);
            assert!(rt.invoke(id, "main", &[]).is_ok());
        }
    }
}
