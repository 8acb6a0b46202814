//! Acceptance gate: checks each acceptance criterion and prints one
//! pass/fail line per criterion. Runs without the test harness so the report
//! is always visible; exits non-zero if any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segwasm::gen::{random_call_tree, random_module};
use segwasm::harden::{classify_slots, frame_layouts, harden, HardenOptions};
use segwasm::pac::{self, Modifier, SigningKey};
use segwasm::runtime::InstanceId;
use segwasm::tagmem::{
    mask_index, TaggedPointer, ADDRESS_MASK, GRANULE, PAC_HIGH_SHIFT, PAC_LOW_SHIFT, TAG_MASK,
};
use segwasm::{
    parse, validate, ExecError, FeatureSet, Mode, Module, Runtime, RuntimeConfig, TrapKind, Value,
};

type Verdict = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("semantics differential", semantics_differential),
        ("detection matrix", detection_matrix),
        ("deterministic guarantees", deterministic_guarantees),
        ("collision statistics", collision_statistics),
        ("sandbox isolation", sandbox_isolation),
        ("pointer authentication", pointer_authentication),
        ("overhead accounting", overhead_accounting),
        ("instrumentation structure", instrumentation_structure),
        ("frame hygiene", frame_hygiene),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let verdict = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn corpus_module(name: &str) -> Module {
    let text = std::fs::read_to_string(corpus_dir().join(name)).unwrap();
    parse(&text).unwrap()
}

fn corpus() -> Vec<(String, Module)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cwat"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let m = parse(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (name, m)
        })
        .collect()
}

/// Protection variants: hardening passes applied, then the run mode.
fn variants() -> Vec<(&'static str, Option<HardenOptions>, Mode)> {
    let stack = HardenOptions {
        stack_safety: true,
        ptr_auth: false,
    };
    let auth = HardenOptions {
        stack_safety: false,
        ptr_auth: true,
    };
    let both = HardenOptions {
        stack_safety: true,
        ptr_auth: true,
    };
    vec![
        ("baseline", None, Mode::BASELINE),
        ("internal", None, Mode::INTERNAL),
        ("external", None, Mode::EXTERNAL),
        ("ptrauth", None, Mode::PTR_AUTH),
        ("combined", None, Mode::COMBINED),
        ("hardened-internal", Some(stack), Mode::INTERNAL),
        ("hardened-ptrauth", Some(auth), Mode::PTR_AUTH),
        ("hardened-full", Some(both), Mode::FULL),
    ]
}

fn run_main(m: &Module, cfg: RuntimeConfig) -> Result<Vec<Value>, ExecError> {
    let vm = validate(m, cfg.mode.features()).expect("module validates");
    let mut rt = Runtime::new(cfg).unwrap();
    let id = rt.add_instance(&vm).unwrap();
    rt.invoke(id, "main", &[])
}

fn semantics_differential() -> Verdict {
    let mut corpus_runs = 0;
    for (name, m) in corpus() {
        for (label, opts, mode) in variants() {
            let m = match opts {
                Some(o) => harden(&m, o).map_err(|e| format!("{name}: {e}"))?,
                None => m.clone(),
            };
            if validate(&m, mode.features()).is_err() {
                continue;
            }
            let ((ra, ta), (rb, tb)) = common::both(&common::fuelled(mode, 7), &m);
            ensure(ra == rb, || format!("{name} [{label}]: engine {ra:?} vs reference {rb:?}"))?;
            ensure(ta == tb, || format!("{name} [{label}]: final tag maps differ"))?;
            corpus_runs += 1;
        }
    }
    let modes = [
        Mode::BASELINE,
        Mode::INTERNAL,
        Mode::EXTERNAL,
        Mode::PTR_AUTH,
        Mode::COMBINED,
        Mode::FULL,
    ];
    let n = 1200;
    let mut traps = 0;
    for seed in 0..n {
        let mode = modes[seed as usize % modes.len()];
        let m = random_module(&mut ChaCha8Rng::seed_from_u64(seed), mode.features());
        let ((ra, ta), (rb, tb)) = common::both(&common::fuelled(mode, seed), &m);
        ensure(ra == rb, || format!("random module {seed} ({mode}): engine {ra:?} vs reference {rb:?}"))?;
        ensure(ta == tb, || format!("random module {seed} ({mode}): final tag maps differ"))?;
        traps += usize::from(matches!(ra, common::Outcome::Trap(..)));
    }
    Ok(format!(
        "{} corpus programs in {corpus_runs} variant runs and {n} random modules agree ({traps} trapping)",
        corpus().len()
    ))
}

fn detection_matrix() -> Verdict {
    let stack = Some(HardenOptions {
        stack_safety: true,
        ptr_auth: false,
    });
    let auth = Some(HardenOptions {
        stack_safety: false,
        ptr_auth: true,
    });
    let cases = [
        ("heap_oob_read.cwat", None, Mode::INTERNAL, TrapKind::TagMismatch),
        ("heap_oob_write.cwat", None, Mode::INTERNAL, TrapKind::TagMismatch),
        ("stack_overflow.cwat", stack, Mode::INTERNAL, TrapKind::TagMismatch),
        ("uaf.cwat", None, Mode::INTERNAL, TrapKind::TagMismatch),
        ("double_free.cwat", None, Mode::INTERNAL, TrapKind::TagMismatch),
        ("use_after_return.cwat", stack, Mode::INTERNAL, TrapKind::TagMismatch),
        ("funcptr_overwrite.cwat", auth, Mode::PTR_AUTH, TrapKind::AuthFailure),
    ];
    let mut detected = 0;
    for (file, opts, mode, want) in cases {
        let m = corpus_module(file);
        let base = run_main(&m, RuntimeConfig::new(Mode::BASELINE, 7));
        ensure(base.is_ok(), || format!("{file} traps in baseline: {base:?}"))?;
        let protected = match opts {
            Some(o) => harden(&m, o).unwrap(),
            None => m,
        };
        let r = run_main(&protected, RuntimeConfig::new(mode, 7));
        let got = r.as_ref().err().and_then(|e| e.trap()).map(|t| t.kind);
        ensure(got == Some(want), || format!("{file} under {mode}: expected {want}, got {r:?}"))?;
        detected += 1;
    }
    Ok(format!("{detected}/7 classes undetected in baseline and trapped when protected"))
}

const PROBE: &str = r#"(module (memory 1)
  (func $load8 (param i64) (result i64)
    local.get 0
    i64.load8_u 0)
  (func $store8 (param i64)
    local.get 0
    i64.const 255
    i64.store8 0)
  (func $load (param i64) (result i64)
    local.get 0
    i64.load 0)
  (func $store (param i64)
    local.get 0
    i64.const -1
    i64.store 0)
  (export "load8" $load8)
  (export "store8" $store8)
  (export "load" $load)
  (export "store" $store))"#;

fn probe_runtime(mode: Mode, seed: u64, instances: usize) -> (Runtime, Vec<InstanceId>) {
    let vm = validate(&parse(PROBE).unwrap(), FeatureSet::ALL).unwrap();
    let cfg = RuntimeConfig {
        arena_bytes: 1 << 20,
        ..RuntimeConfig::new(mode, seed)
    };
    let mut rt = Runtime::new(cfg).unwrap();
    let ids = (0..instances).map(|_| rt.add_instance(&vm).unwrap()).collect();
    (rt, ids)
}

fn traps(r: Result<Vec<Value>, ExecError>, kind: TrapKind) -> bool {
    r.err().and_then(|e| e.trap().map(|t| t.kind)) == Some(kind)
}

fn deterministic_guarantees() -> Verdict {
    let trials = 10_000u64;
    for seed in 0..trials {
        let (mut rt, ids) = probe_runtime(Mode::INTERNAL, seed, 1);
        let id = ids[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before = rt.malloc(id, rng.gen_range(1..64));
        let size = rng.gen_range(1..256u64);
        let p = rt.malloc(id, size as i64);
        let after = rt.malloc(id, rng.gen_range(1..64));
        ensure(before != 0 && p != 0 && after != 0, || format!("trial {seed}: allocation failed"))?;
        let end = p + size.div_ceil(GRANULE) * GRANULE;
        let arg = |a: u64| [Value::I64(a)];
        ensure(rt.invoke(id, "load8", &arg(p)).is_ok(), || format!("trial {seed}: payload start unreadable"))?;
        ensure(rt.invoke(id, "load8", &arg(end - 1)).is_ok(), || format!("trial {seed}: payload end unreadable"))?;
        ensure(traps(rt.invoke(id, "load8", &arg(end)), TrapKind::TagMismatch), || {
            format!("trial {seed}: access at payload end of a {size}-byte block did not trap")
        })?;
        ensure(traps(rt.invoke(id, "store8", &arg(p - 1)), TrapKind::TagMismatch), || {
            format!("trial {seed}: access before payload start did not trap")
        })?;
        rt.free(id, p).map_err(|f| format!("trial {seed}: free failed: {f:?}"))?;
        ensure(traps(rt.invoke(id, "load8", &arg(p)), TrapKind::TagMismatch), || {
            format!("trial {seed}: use after free did not trap")
        })?;
    }
    Ok(format!("{trials} trials: overflow, underflow and use after free trapped in 100%"))
}

fn collision_rate(mode: Mode, pairs: u64) -> f64 {
    let (mut rt, ids) = probe_runtime(mode, 11, 1);
    let id = ids[0];
    let mut same = 0u64;
    for _ in 0..pairs {
        let a = rt.malloc(id, 16);
        let b = rt.malloc(id, 16);
        same += u64::from(TaggedPointer(a).tag() == TaggedPointer(b).tag());
        rt.free(id, b).unwrap();
        rt.free(id, a).unwrap();
    }
    same as f64 / pairs as f64
}

fn collision_statistics() -> Verdict {
    let pairs = 100_000;
    let internal = collision_rate(Mode::INTERNAL, pairs);
    let combined = collision_rate(Mode::COMBINED, pairs);
    ensure((internal - 1.0 / 15.0).abs() <= 0.01, || format!("internal-only rate {internal:.4}"))?;
    ensure((combined - 1.0 / 7.0).abs() <= 0.01, || format!("combined rate {combined:.4}"))?;
    Ok(format!(
        "P(collision) internal-only {internal:.4} (1/15 = 0.0667), combined {combined:.4} (1/7 = 0.1429)"
    ))
}

fn sandbox_isolation() -> Verdict {
    // Guests cannot inject tag bits through an index.
    let idx = 0x0F00_0000_0000_1234u64;
    ensure(mask_index(idx, Mode::EXTERNAL) & TAG_MASK == 0, || "external-only mask leaks tag bits".into())?;
    ensure(mask_index(idx, Mode::COMBINED) & TAG_MASK == 0x0E00_0000_0000_0000, || {
        "combined mask must clear exactly bit 56".into()
    })?;

    let accesses = 100_000u64;
    let (mut rt, ids) = probe_runtime(Mode::EXTERNAL, 5, 2);
    let snapshot = |rt: &Runtime, lo: u64, hi: u64| rt.store().read(lo, hi - lo).unwrap().to_vec();
    let mut stats = (0u64, 0u64);
    for (me, other) in [(ids[0], ids[1]), (ids[1], ids[0])] {
        let mine = rt.instance(me);
        let (base, len) = (mine.mem_base(), mine.mem_len());
        let theirs = rt.instance(other);
        let (obase, olen) = (theirs.mem_base(), theirs.mem_len());
        let other_before = snapshot(&rt, obase, obase + olen);
        let runtime_before = snapshot(&rt, 0, 64 << 10);
        let mut rng = ChaCha8Rng::seed_from_u64(me.0 as u64);
        for _ in 0..accesses {
            let idx: u64 = match rng.gen_range(0..4) {
                0 => rng.gen(),
                1 => rng.gen_range(0..len + (1 << 20)),
                2 => (rng.gen::<u64>() & TAG_MASK) | rng.gen_range(len - 64..len + 64),
                _ => len.wrapping_sub(base).wrapping_add(rng.gen_range(0..64 << 10)),
            };
            let masked = mask_index(idx, Mode::EXTERNAL);
            let canonical = masked & !(ADDRESS_MASK | TAG_MASK) == 0;
            let inside = canonical && (masked & ADDRESS_MASK).checked_add(8).is_some_and(|e| e <= len);
            let (name, arg) = if rng.gen_bool(0.5) { ("load", idx) } else { ("store", idx) };
            let r = rt.invoke(me, name, &[Value::I64(arg)]);
            match (inside, r.is_ok()) {
                (true, true) => stats.0 += 1,
                (false, false) => stats.1 += 1,
                (true, false) => return Err(format!("in-range access at {idx:#x} trapped: {r:?}")),
                (false, true) => return Err(format!("out-of-range access at {idx:#x} (base {base:#x}) succeeded")),
            }
        }
        ensure(snapshot(&rt, obase, obase + olen) == other_before, || "other guest memory changed".into())?;
        ensure(snapshot(&rt, 0, 64 << 10) == runtime_before, || "runtime memory changed".into())?;
    }
    Ok(format!(
        "2 guests x {accesses} accesses: {} in range, {} escapes all trapped",
        stats.0, stats.1
    ))
}

fn pointer_authentication() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let key = SigningKey::random(&mut rng);
    let n = 10_000;
    let sig_bits: Vec<u32> = (PAC_LOW_SHIFT..PAC_LOW_SHIFT + 6).chain(PAC_HIGH_SHIFT..64).collect();
    for _ in 0..n {
        let modifier = Modifier(rng.gen());
        let p = TaggedPointer::encode(rng.gen::<u64>() & ADDRESS_MASK, rng.gen_range(0..16)).unwrap().raw();
        let s = pac::sign(p, &key, modifier);
        ensure(pac::authenticate(s, &key, modifier) == Ok(p), || format!("auth(sign({p:#x})) != {p:#x}"))?;
        for &b in &sig_bits {
            ensure(pac::authenticate(s ^ (1 << b), &key, modifier).is_err(), || {
                format!("forgery flipping bit {b} of {s:#x} accepted")
            })?;
        }
    }

    // Cross-instance reuse: a pointer signed by one guest, authenticated by
    // another guest in the same runtime.
    let src = r#"(module
  (func $sign (param i64) (result i64)
    local.get 0
    i64.pointer_sign)
  (func $auth (param i64) (result i64)
    local.get 0
    i64.pointer_auth)
  (export "sign" $sign)
  (export "auth" $auth))"#;
    let vm = validate(&parse(src).unwrap(), FeatureSet::ALL).unwrap();
    let trials = 10_000u64;
    let mut accepted = 0;
    for seed in 0..trials {
        let cfg = RuntimeConfig {
            arena_bytes: 1 << 20,
            ..RuntimeConfig::new(Mode::PTR_AUTH, seed)
        };
        let mut rt = Runtime::new(cfg).unwrap();
        let a = rt.add_instance(&vm).unwrap();
        let b = rt.add_instance(&vm).unwrap();
        let p = Value::I64(rng.gen::<u64>() & ADDRESS_MASK);
        let signed = rt.invoke(a, "sign", &[p]).unwrap()[0];
        ensure(rt.invoke(a, "auth", &[signed]).is_ok(), || "same-instance auth failed".into())?;
        accepted += u64::from(rt.invoke(b, "auth", &[signed]).is_ok());
    }
    let rate = accepted as f64 / trials as f64;
    ensure(rate <= 0.005, || format!("cross-instance acceptance {rate:.4}"))?;
    Ok(format!(
        "identity on {n} values, all {} single-bit forgeries trapped, cross-instance acceptance {accepted}/{trials}",
        n * sig_bits.len()
    ))
}

fn overhead_accounting() -> Verdict {
    let mut parts = Vec::new();
    for arena in [1u64 << 20, 128 << 20] {
        let cfg = RuntimeConfig {
            arena_bytes: arena,
            ..RuntimeConfig::default()
        };
        let s = Runtime::new(cfg).unwrap().stats();
        ensure(s.tag_storage_bytes * 32 == arena, || {
            format!("arena {arena}: tag storage {}", s.tag_storage_bytes)
        })?;
        parts.push(format!("{} MiB -> {} KiB", arena >> 20, s.tag_storage_bytes >> 10));
    }
    Ok(format!("tag storage = arena/32 (3.125%): {}", parts.join(", ")))
}

fn count_segments(m: &Module) -> usize {
    m.functions
        .iter()
        .flat_map(|f| &f.body)
        .filter(|i| i.is_segment())
        .count()
}

fn instrumentation_structure() -> Verdict {
    let mut guards = 0;
    let mut modules = 0;
    for seed in 0..2000 {
        let m = random_call_tree(&mut ChaCha8Rng::seed_from_u64(seed));
        for (f, layout) in m.functions.iter().zip(frame_layouts(&m)) {
            let flags: Vec<bool> = classify_slots(&m, f).iter().map(|c| c.instrument()).collect();
            let expect = flags.iter().any(|&x| x) && !flags.first().copied().unwrap_or(false);
            ensure(layout.guard == expect, || format!("seed {seed} {}: guard {} for {flags:?}", f.name, layout.guard))?;
            guards += usize::from(layout.guard);
        }
        for opts in [(true, false), (false, true), (true, true)] {
            let opts = HardenOptions {
                stack_safety: opts.0,
                ptr_auth: opts.1,
            };
            let h = harden(&m, opts).map_err(|e| format!("seed {seed}: {e}"))?;
            validate(&h, FeatureSet::ALL).map_err(|e| format!("seed {seed}: hardened output invalid: {e}"))?;
            modules += 1;
        }
    }
    for seed in 0..500 {
        let m = random_module(&mut ChaCha8Rng::seed_from_u64(seed), FeatureSet::NONE);
        let h = harden(&m, HardenOptions { stack_safety: true, ptr_auth: true })
            .map_err(|e| format!("random module {seed}: {e}"))?;
        validate(&h, FeatureSet::ALL).map_err(|e| format!("random module {seed}: {e}"))?;
        modules += 1;
    }
    let safe = parse(
        r#"(module (memory 1)
  (func $main (result i64)
    (frame $a 16)
    (frame $b 8)
    frame.addr $a
    i64.const 5
    i64.store 8
    frame.addr $b
    i64.const 6
    i64.store 0
    frame.addr $a
    i64.load 8
    frame.addr $b
    i64.load 0
    i64.add)
  (export "main" $main))"#,
    )
    .unwrap();
    let flags: Vec<bool> = classify_slots(&safe, &safe.functions[0]).iter().map(|c| c.instrument()).collect();
    let h = harden(&safe, HardenOptions { stack_safety: true, ptr_auth: false }).unwrap();
    ensure(flags == [false, false] && count_segments(&h) == 0, || {
        format!("safe-slot program: flags {flags:?}, {} segment instructions", count_segments(&h))
    })?;
    let so = corpus_module("stack_overflow.cwat");
    let so_guards = frame_layouts(&so).iter().filter(|l| l.guard).count();
    ensure(so_guards == 1, || format!("stack_overflow.cwat: {so_guards} guard slots"))?;
    Ok(format!(
        "guard rule held on {guards} guarded frames; {modules} hardened modules revalidated; safe slots add 0 segment instructions"
    ))
}

fn frame_hygiene() -> Verdict {
    let trees = 1000;
    let mut tagged_calls = 0;
    for seed in 0..trees {
        let m = random_call_tree(&mut ChaCha8Rng::seed_from_u64(seed));
        let h = harden(&m, HardenOptions { stack_safety: true, ptr_auth: false }).unwrap();
        tagged_calls += count_segments(&h);
        for mode in [Mode::INTERNAL, Mode::COMBINED] {
            let vm = validate(&h, mode.features()).unwrap();
            let mut rt = Runtime::new(RuntimeConfig::new(mode, seed)).unwrap();
            let id = rt.add_instance(&vm).unwrap();
            let before = rt.dump_tags();
            let r = rt.invoke(id, "main", &[]);
            ensure(r.is_ok(), || format!("tree {seed} ({mode}): {r:?}"))?;
            ensure(rt.dump_tags() == before, || format!("tree {seed} ({mode}): tag map changed across the call"))?;
        }
    }
    Ok(format!(
        "{trees} random call trees ({tagged_calls} segment instructions) leave the tag map unchanged"
    ))
}
