#![allow(dead_code)]

use segwasm::{ExecError, Module, Runtime, RuntimeConfig, Value};

pub const STEP_LIMIT: u64 = 100_000;

/// Outcome of one invocation, reduced to what both evaluators must agree on.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Values(Vec<Value>),
    Trap(segwasm::TrapKind, String, u32),
    Fuel,
    Other(String),
}

fn outcome(r: Result<Vec<Value>, ExecError>) -> Outcome {
    match r {
        Ok(v) => Outcome::Values(v),
        Err(ExecError::Trap(t)) => Outcome::Trap(t.kind, t.func, t.index),
        Err(ExecError::FuelExhausted) => Outcome::Fuel,
        Err(e) => Outcome::Other(e.to_string()),
    }
}

/// Runs `main` on the engine and on the reference evaluator in identical
/// runtimes and returns both outcomes along with the final tag dumps.
pub fn both(cfg: &RuntimeConfig, m: &Module) -> ((Outcome, String), (Outcome, String)) {
    let vm = segwasm::validate(m, cfg.mode.features()).expect("module validates");
    let mut a = Runtime::new(cfg.clone()).unwrap();
    let mut b = Runtime::new(cfg.clone()).unwrap();
    let ia = a.add_instance(&vm).unwrap();
    let ib = b.add_instance(&vm).unwrap();
    let ra = outcome(a.invoke(ia, "main", &[]));
    let rb = outcome(b.invoke_reference(ib, "main", &[]));
    assert_eq!(a.output(), b.output(), "host output differs");
    assert_eq!(a.stats().instructions, b.stats().instructions, "step counts differ");
    ((ra, a.dump_tags()), (rb, b.dump_tags()))
}

pub fn fuelled(mode: segwasm::Mode, seed: u64) -> RuntimeConfig {
    RuntimeConfig {
        fuel: Some(STEP_LIMIT),
        ..RuntimeConfig::new(mode, seed)
    }
}
