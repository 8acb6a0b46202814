use super::*;
use crate::config::{FeatureSet, Mode};
use crate::runtime::{Runtime, RuntimeConfig};
use crate::tagmem::{TaggedPointer, TAG_MASK};
use crate::text::parse;
use crate::validate::validate;

/// Runs `name` on both evaluators in identical fresh runtimes, asserts they
/// agree on outcome, output, instruction count and final tags, and returns
/// the engine's outcome.
fn run_cfg(cfg: RuntimeConfig, src: &str, name: &str, args: &[Value]) -> Result<Vec<Value>, ExecError> {
    let vm = validate(&parse(src).unwrap(), FeatureSet::ALL).unwrap();
    let mut a = Runtime::new(cfg.clone()).unwrap();
    let mut b = Runtime::new(cfg).unwrap();
    let ia = a.add_instance(&vm).unwrap();
    let ib = b.add_instance(&vm).unwrap();
    let ra = a.invoke(ia, name, args);
    let rb = b.invoke_reference(ib, name, args);
    match (&ra, &rb) {
        (Err(ExecError::Trap(x)), Err(ExecError::Trap(y))) => {
            assert_eq!((x.kind, &x.func, x.index), (y.kind, &y.func, y.index));
        }
        _ => assert_eq!(ra, rb),
    }
    assert_eq!(a.output(), b.output());
    assert_eq!(a.stats().instructions, b.stats().instructions);
    assert_eq!(a.dump_tags(), b.dump_tags());
    ra
}

fn run(mode: Mode, src: &str, name: &str, args: &[Value]) -> Result<Vec<Value>, ExecError> {
    run_cfg(RuntimeConfig::new(mode, 7), src, name, args)
}

fn kind(r: Result<Vec<Value>, ExecError>) -> TrapKind {
    r.expect_err("expected a trap").trap().expect("expected a trap").kind
}

fn i64s(v: &[i64]) -> Vec<Value> {
    v.iter().map(|&x| Value::I64(x as u64)).collect()
}

const FACT: &str = r#"(module
  (func $fact (param i64) (result i64) (local i64)
    i64.const 1
    local.set 1
    block
      loop
        local.get 0
        i64.eqz
        br_if 1
        local.get 1
        local.get 0
        i64.mul
        local.set 1
        local.get 0
        i64.const 1
        i64.sub
        local.set 0
        br 0
      end
    end
    local.get 1)
  (func $fib (param i64) (result i64)
    local.get 0
    i64.const 2
    i64.lt_u
    if (result i64)
      local.get 0
    else
      local.get 0
      i64.const 1
      i64.sub
      call $fib
      local.get 0
      i64.const 2
      i64.sub
      call $fib
      i64.add
    end)
  (func $early (param i64) (result i64)
    loop
      local.get 0
      i64.const 10
      i64.ge_u
      if
        local.get 0
        return
      end
      local.get 0
      i64.const 3
      i64.add
      local.set 0
      br 0
    end
    i64.const 0)
  (func $nested (result i64)
    block (result i64)
      i64.const 5
      block (result i64)
        i64.const 9
        i64.const 7
        br 1
      end
      drop
    end)
  (export "fact" $fact)
  (export "fib" $fib)
  (export "early" $early)
  (export "nested" $nested))"#;

#[test]
fn control_flow_and_calls() {
    assert_eq!(run(Mode::BASELINE, FACT, "fact", &i64s(&[10])), Ok(i64s(&[3628800])));
    assert_eq!(run(Mode::BASELINE, FACT, "fib", &i64s(&[15])), Ok(i64s(&[610])));
    assert_eq!(run(Mode::BASELINE, FACT, "early", &i64s(&[1])), Ok(i64s(&[10])));
    assert_eq!(run(Mode::BASELINE, FACT, "nested", &[]), Ok(i64s(&[7])));
}

#[test]
fn instruction_count_excludes_end_and_else() {
    let src = "(module (func $f (result i64)\ni32.const 1\nif (result i64)\ni64.const 2\nelse\ni64.const 3\nend) (export \"f\" $f))";
    let vm = validate(&parse(src).unwrap(), FeatureSet::ALL).unwrap();
    let mut rt = Runtime::new(RuntimeConfig::default()).unwrap();
    let id = rt.add_instance(&vm).unwrap();
    rt.invoke(id, "f", &[]).unwrap();
    assert_eq!(rt.stats().instructions, 3);
}

const MEM: &str = r#"(module (memory 1)
  (import "env" "malloc" (func $malloc (param i64) (result i64)))
  (import "env" "free" (func $free (param i64)))
  (func $store (param i64 i64)
    local.get 0
    local.get 1
    i64.store 0)
  (func $load (param i64) (result i64)
    local.get 0
    i64.load 0)
  (func $uaf (result i64) (local i64)
    i64.const 32
    call $malloc
    local.tee 0
    i64.const 5
    i64.store 0
    local.get 0
    call $free
    local.get 0
    i64.load 0)
  (func $straddle (result i64) (local i64)
    i64.const 16
    call $malloc
    local.tee 0
    i64.const 12
    i64.add
    i64.load 0)
  (func $inside (result i64) (local i64)
    i64.const 16
    call $malloc
    local.tee 0
    i64.const 42
    i64.store 8
    local.get 0
    i64.load 8)
  (func $forged (result i64)
    i64.const 16
    call $malloc
    i64.const 0x00ffffffffffffff
    i64.and
    i64.load 0)
  (export "store" $store)
  (export "load" $load)
  (export "uaf" $uaf)
  (export "straddle" $straddle)
  (export "inside" $inside)
  (export "forged" $forged))"#;

#[test]
fn baseline_bounds() {
    let cfg = RuntimeConfig::new(Mode::BASELINE, 7);
    let len = (64 << 10) + cfg.heap_bytes + cfg.stack_bytes;
    assert_eq!(run(Mode::BASELINE, MEM, "store", &i64s(&[len as i64 - 8, 1])), Ok(vec![]));
    let t = run(Mode::BASELINE, MEM, "store", &i64s(&[len as i64 - 7, 1]));
    assert_eq!(kind(t), TrapKind::OutOfBounds);
    let t = run(Mode::BASELINE, MEM, "load", &i64s(&[-1]));
    assert_eq!(kind(t), TrapKind::OutOfBounds);
    // Use after free goes unnoticed without tagging.
    assert_eq!(run(Mode::BASELINE, MEM, "uaf", &[]), Ok(i64s(&[5])));
}

#[test]
fn internal_tag_checks() {
    let t = run(Mode::INTERNAL, MEM, "uaf", &[]).unwrap_err();
    let t = t.trap().unwrap();
    assert_eq!((t.kind, t.func.as_str(), t.index), (TrapKind::TagMismatch, "uaf", 8));
    assert_eq!(kind(run(Mode::INTERNAL, MEM, "straddle", &[])), TrapKind::TagMismatch);
    assert_eq!(run(Mode::INTERNAL, MEM, "inside", &[]), Ok(i64s(&[42])));
    assert_eq!(kind(run(Mode::INTERNAL, MEM, "forged", &[])), TrapKind::TagMismatch);
    assert_eq!(kind(run(Mode::INTERNAL, MEM, "load", &i64s(&[1 << 48]))), TrapKind::OutOfBounds);
}

#[test]
fn external_sandbox_masks_guest_tags() {
    // A guest cannot name another tag: the tag bits are cleared, so a
    // static-memory access works whatever tag the index carries.
    let r = run(Mode::EXTERNAL, MEM, "store", &i64s(&[(0xF << 56) | 64, 1]));
    assert_eq!(r, Ok(vec![]));
    // Without software bounds checks, leaving the instance hits a granule
    // with another tag.
    let cfg = RuntimeConfig::new(Mode::EXTERNAL, 7);
    let len = (64 << 10) + cfg.heap_bytes + cfg.stack_bytes;
    let t = run(Mode::EXTERNAL, MEM, "store", &i64s(&[len as i64, 1]));
    assert_eq!(kind(t), TrapKind::TagMismatch);
}

const SEG: &str = r#"(module (memory 1)
  (func $new (param i64 i64) (result i64)
    local.get 0
    local.get 1
    segment.new 0)
  (func $cycle (result i64) (local i64)
    i64.const 256
    i64.const 32
    segment.new 0
    local.tee 0
    i64.const 77
    i64.store 16
    local.get 0
    i64.const 32
    segment.free 0
    local.get 0
    i64.load 16)
  (func $retag (result i64) (local i64)
    i64.const 256
    i64.const 32
    segment.new 0
    local.tee 0
    i64.const 0
    i64.const 32
    segment.set_tag 0
    i64.const 256
    i64.load 0)
  (func $badfree
    i64.const 256
    i64.const 32
    segment.new 0
    drop
    i64.const 256
    i64.const 32
    segment.free 0)
  (export "new" $new)
  (export "cycle" $cycle)
  (export "retag" $retag)
  (export "badfree" $badfree))"#;

#[test]
fn segment_instructions() {
    let p = run(Mode::INTERNAL, SEG, "new", &i64s(&[256, 32])).unwrap()[0].as_u64();
    assert_eq!(TaggedPointer(p).address(), 256);
    assert_ne!(p & TAG_MASK, 0);
    assert_eq!(kind(run(Mode::INTERNAL, SEG, "new", &i64s(&[8, 32]))), TrapKind::Unaligned);
    assert_eq!(kind(run(Mode::INTERNAL, SEG, "new", &i64s(&[256, 24]))), TrapKind::Unaligned);
    assert_eq!(kind(run(Mode::INTERNAL, SEG, "new", &i64s(&[1 << 40, 16]))), TrapKind::OutOfBounds);
    assert_eq!(kind(run(Mode::INTERNAL, SEG, "cycle", &[])), TrapKind::TagMismatch);
    assert_eq!(run(Mode::INTERNAL, SEG, "retag", &[]), Ok(i64s(&[0])));
    assert_eq!(kind(run(Mode::INTERNAL, SEG, "badfree", &[])), TrapKind::TagMismatch);
    assert_eq!(kind(run(Mode::COMBINED, SEG, "badfree", &[])), TrapKind::TagMismatch);
    assert_eq!(kind(run(Mode::COMBINED, SEG, "cycle", &[])), TrapKind::TagMismatch);
}

const PAC: &str = r#"(module
  (func $roundtrip (param i64) (result i64)
    local.get 0
    i64.pointer_sign
    i64.pointer_auth)
  (func $flip (param i64 i64) (result i64)
    local.get 0
    i64.pointer_sign
    local.get 1
    i64.xor
    i64.pointer_auth)
  (export "roundtrip" $roundtrip)
  (export "flip" $flip))"#;

#[test]
fn pointer_authentication() {
    assert_eq!(run(Mode::PTR_AUTH, PAC, "roundtrip", &i64s(&[0x1234])), Ok(i64s(&[0x1234])));
    let t = run(Mode::PTR_AUTH, PAC, "flip", &i64s(&[0x1234, 1 << 49]));
    assert_eq!(kind(t), TrapKind::AuthFailure);
    let t = run(Mode::PTR_AUTH, PAC, "flip", &i64s(&[0x1234, 1]));
    assert_eq!(kind(t), TrapKind::AuthFailure);
}

const TABLE: &str = r#"(module
  (type $unary (func (param i64) (result i64)))
  (type $nullary (func (result i64)))
  (func $inc (param i64) (result i64)
    local.get 0
    i64.const 1
    i64.add)
  (func $go (param i64 i64) (result i64)
    local.get 1
    local.get 0
    i32.wrap_i64
    call_indirect $unary)
  (func $wrong (result i64)
    i32.const 0
    call_indirect $nullary)
  (table $inc)
  (export "go" $go)
  (export "wrong" $wrong))"#;

#[test]
fn indirect_calls() {
    assert_eq!(run(Mode::BASELINE, TABLE, "go", &i64s(&[0, 41])), Ok(i64s(&[42])));
    assert_eq!(kind(run(Mode::BASELINE, TABLE, "go", &i64s(&[1, 0]))), TrapKind::TableOutOfBounds);
    assert_eq!(kind(run(Mode::BASELINE, TABLE, "wrong", &[])), TrapKind::IndirectTypeMismatch);
}

#[test]
fn stack_overflow_and_fuel() {
    let src = "(module (func $r (param i64) (result i64)\nlocal.get 0\ncall $r) (export \"r\" $r))";
    let t = run(Mode::BASELINE, src, "r", &i64s(&[0])).unwrap_err();
    assert_eq!(t.trap().map(|t| (t.kind, t.index)), Some((TrapKind::StackOverflow, 1)));

    let big = "(module (memory 1) (func $f (frame $a 65536)\nframe.addr $a\ni64.const 1\ni64.store 0) (export \"f\" $f))";
    let t = run(Mode::BASELINE, big, "f", &[]).unwrap_err();
    assert_eq!(t.trap().map(|t| (t.kind, t.index)), Some((TrapKind::StackOverflow, 0)));

    let spin = "(module (func $s\nloop\nbr 0\nend) (export \"s\" $s))";
    let cfg = RuntimeConfig {
        fuel: Some(1000),
        ..RuntimeConfig::new(Mode::BASELINE, 1)
    };
    assert_eq!(run_cfg(cfg, spin, "s", &[]), Err(ExecError::FuelExhausted));
}

#[test]
fn frames_are_released_and_reused() {
    let src = r#"(module (memory 1)
  (func $leaf (param i64) (result i64) (frame $buf 32)
    frame.addr $buf
    local.get 0
    i64.store 8
    frame.addr $buf
    i64.load 8)
  (func $twice (result i64)
    i64.const 3
    call $leaf
    i64.const 4
    call $leaf
    i64.add)
  (export "twice" $twice))"#;
    for mode in [Mode::BASELINE, Mode::INTERNAL, Mode::EXTERNAL, Mode::COMBINED] {
        assert_eq!(run(mode, src, "twice", &[]), Ok(i64s(&[7])), "{mode}");
    }
}

#[test]
fn host_calls_print_and_trap_at_call_site() {
    let src = r#"(module
  (import "env" "print_i64" (func $p (param i64)))
  (import "env" "free" (func $free (param i64)))
  (func $main
    i64.const 3
    call $p
    i64.const 4096
    call $free)
  (export "main" $main))"#;
    let t = run(Mode::INTERNAL, src, "main", &[]).unwrap_err();
    assert_eq!(t.trap().map(|t| (t.kind, t.index)), Some((TrapKind::TagMismatch, 3)));
    assert_eq!(run(Mode::BASELINE, src, "main", &[]), Ok(vec![]));
}
