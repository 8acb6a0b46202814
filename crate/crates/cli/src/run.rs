use std::path::PathBuf;

use clap::Args;
use segwasm::runtime::InstantiateError;
use segwasm::{ExecError, Runtime, RuntimeConfig, Value};

use crate::config::FileConfig;
use crate::{load, parse_mode, CmdResult, Failure};

pub const SEED_ENV: &str = "CAGE_SEED";

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Comma list of protections from {internal, external, ptrauth}; empty
    /// means baseline.
    #[arg(long)]
    pub mode: Option<String>,
    /// Seed for keys and tags. Falls back to the CAGE_SEED environment
    /// variable, then the config file, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file with keys mode, seed, arena_bytes, heap_bytes, stack_bytes,
    /// max_call_depth and fuel.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Export to call, followed by its integer arguments. Trailing
    /// non-integer words are taken as module files.
    #[arg(long, num_args = 1.., value_name = "NAME [ARGS]...", allow_negative_numbers = true)]
    pub invoke: Option<Vec<String>>,
    /// Print run statistics after execution.
    #[arg(long)]
    pub stats: bool,
    /// Write the final tag map to this file.
    #[arg(long, value_name = "FILE")]
    pub dump_tags: Option<PathBuf>,
    /// Instruction budget per invocation.
    #[arg(long)]
    pub fuel: Option<u64>,
    /// Execute with the small-step reference evaluator.
    #[arg(long)]
    pub reference: bool,
    /// Module files, instantiated in order.
    pub files: Vec<PathBuf>,
}

struct Invocation {
    name: String,
    args: Vec<i128>,
}

/// Splits `--invoke NAME [ARGS]... [FILES]...` into the call and any files.
fn split_invoke(words: &[String]) -> (Option<Invocation>, Vec<PathBuf>) {
    let Some((name, rest)) = words.split_first() else {
        return (None, Vec::new());
    };
    let nargs = rest.iter().take_while(|w| w.parse::<i128>().is_ok()).count();
    let args = rest[..nargs].iter().map(|w| w.parse().unwrap()).collect();
    let files = rest[nargs..].iter().map(PathBuf::from).collect();
    (
        Some(Invocation {
            name: name.clone(),
            args,
        }),
        files,
    )
}

fn runtime_config(a: &RunArgs) -> Result<RuntimeConfig, Failure> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = RuntimeConfig::default();
    if let Some(m) = a.mode.as_deref().or(file.mode.as_deref()) {
        cfg.mode = parse_mode(m)?;
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Failure::usage(format!("error: {SEED_ENV} must be an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    cfg.seed = a.seed.or(env_seed).or(file.seed).unwrap_or(0);
    if let Some(v) = file.arena_bytes {
        cfg.arena_bytes = v;
    }
    if let Some(v) = file.heap_bytes {
        cfg.heap_bytes = v;
    }
    if let Some(v) = file.stack_bytes {
        cfg.stack_bytes = v;
    }
    if let Some(v) = file.max_call_depth {
        cfg.max_call_depth = v;
    }
    cfg.fuel = a.fuel.or(file.fuel);
    Ok(cfg)
}

fn exec_failure(e: ExecError) -> Failure {
    match e {
        ExecError::Trap(t) => Failure::trap(format!("trap: {} at {}:{}", t.kind, t.func, t.index)),
        ExecError::FuelExhausted => Failure::trap("error: step limit exhausted"),
        ExecError::Usage(m) => Failure::usage(format!("error: {m}")),
        ExecError::Internal(m) => Failure::usage(format!("internal error: {m}")),
    }
}

pub fn run(a: RunArgs) -> CmdResult {
    let (call, extra) = split_invoke(a.invoke.as_deref().unwrap_or(&[]));
    let files: Vec<PathBuf> = a.files.iter().cloned().chain(extra).collect();
    if files.is_empty() {
        return Err(Failure::usage("error: no module files given"));
    }
    let cfg = runtime_config(&a)?;
    let mut rt = Runtime::new(cfg).map_err(|e| Failure::usage(format!("error: {e}")))?;
    let result = execute(&mut rt, &files, call.as_ref(), a.reference);
    for v in rt.take_output() {
        println!("{v}");
    }
    let finish = |rt: &Runtime| -> CmdResult {
        if let Some(path) = &a.dump_tags {
            std::fs::write(path, rt.dump_tags()).map_err(|e| {
                Failure::usage(format!("error: cannot write {}: {e}", path.display()))
            })?;
        }
        if a.stats {
            println!("{}", rt.stats());
        }
        Ok(())
    };
    match result {
        Ok(values) => {
            for v in values {
                println!("{v}");
            }
            finish(&rt)
        }
        Err(f) => {
            // Statistics and tags after a trap are still useful.
            if f.code == 1 {
                finish(&rt)?;
            }
            Err(f)
        }
    }
}

fn execute(
    rt: &mut Runtime,
    files: &[PathBuf],
    call: Option<&Invocation>,
    reference: bool,
) -> Result<Vec<Value>, Failure> {
    for path in files {
        let m = load(path)?;
        let vm = segwasm::validate(&m, rt.mode().features())
            .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
        rt.add_instance(&vm).map_err(|e| match e {
            InstantiateError::Features(_) | InstantiateError::Link(_) => {
                Failure::invalid(format!("{}: {e}", path.display()))
            }
            InstantiateError::Start(x) => exec_failure(x),
            other => Failure::usage(format!("error: {}: {other}", path.display())),
        })?;
    }
    let Some(call) = call else {
        return Ok(Vec::new());
    };
    let id = rt
        .find_export(&call.name)
        .ok_or_else(|| Failure::usage(format!("error: no instance exports \"{}\"", call.name)))?;
    let params = rt.instance(id).export_type(&call.name).expect("export exists").params;
    if params.len() != call.args.len() {
        return Err(Failure::usage(format!(
            "error: \"{}\" takes {} argument(s), {} given",
            call.name,
            params.len(),
            call.args.len()
        )));
    }
    let args = params
        .iter()
        .zip(&call.args)
        .map(|(&ty, &v)| {
            Value::from_int(ty, v)
                .ok_or_else(|| Failure::usage(format!("error: argument {v} does not fit {ty}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let r = if reference {
        rt.invoke_reference(id, &call.name, &args)
    } else {
        rt.invoke(id, &call.name, &args)
    };
    r.map_err(exec_failure)
}
