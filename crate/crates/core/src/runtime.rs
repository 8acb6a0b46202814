//! The runtime: one arena with its tag memory, the signing key, the mode,
//! and the registry of instances carved from the arena.
//!
//! Arena layout:
//!
//! ```text
//! [0, 64 KiB)                runtime memory, tag 0
//! [base_i, base_i + len_i)   instance i: static pages | heap | shadow stack
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::FuncType;
use crate::config::Mode;
use crate::harden::{lower_defaults, AMBIENT_GLOBAL, SP_GLOBAL, STRIDE_GLOBAL};
use crate::heap::Heap;
use crate::interp::code::Code;
use crate::interp::{engine, reference, ExecError, Fault, Value};
use crate::pac::{Modifier, SigningKey};
use crate::tagmem::{self, TagPool, TagStore, GRANULE, SANDBOX_BIT};
use crate::validate::ValidatedModule;

pub const PAGE_BYTES: u64 = 64 * 1024;
/// Bytes at the bottom of the arena owned by the runtime itself.
pub const RUNTIME_RESERVED_BYTES: u64 = 64 * 1024;
/// Sandbox tags available to instances when sandboxing alone is enabled.
pub const MAX_SANDBOXED_INSTANCES: usize = 15;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub mode: Mode,
    pub seed: u64,
    pub arena_bytes: u64,
    pub heap_bytes: u64,
    pub stack_bytes: u64,
    pub max_call_depth: usize,
    /// Instruction budget per invocation.
    pub fuel: Option<u64>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BASELINE,
            seed: 0,
            arena_bytes: 4 << 20,
            heap_bytes: 64 << 10,
            stack_bytes: 32 << 10,
            max_call_depth: 512,
            fuel: None,
        }
    }
}

impl RuntimeConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} must be a multiple of 16")]
    Unaligned(&'static str),
    #[error("arena of {0} bytes leaves no room for instances")]
    ArenaTooSmall(u64),
    #[error("max_call_depth must be positive")]
    ZeroCallDepth,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum InstantiateError {
    #[error("module uses features disabled in mode {0}")]
    Features(Mode),
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("arena exhausted: instance needs {needed} bytes, {available} left")]
    ArenaExhausted { needed: u64, available: u64 },
    #[error("link error: {0}")]
    Link(String),
    #[error("start function failed: {0}")]
    Start(ExecError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    pub instructions: u64,
    pub tag_checks: u64,
    pub tag_check_failures: u64,
    pub bounds_checks: u64,
    pub non_ambient_granules: u64,
    pub tag_storage_bytes: u64,
}

impl std::fmt::Display for RunStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "instructions={}", self.instructions)?;
        writeln!(f, "tag_checks={}", self.tag_checks)?;
        writeln!(f, "tag_check_failures={}", self.tag_check_failures)?;
        writeln!(f, "bounds_checks={}", self.bounds_checks)?;
        writeln!(f, "non_ambient_granules={}", self.non_ambient_granules)?;
        write!(f, "tag_storage_bytes={}", self.tag_storage_bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceId(pub usize);

#[derive(Clone, Debug)]
pub struct Instance {
    pub(crate) code: Arc<Code>,
    pub(crate) mem_base: u64,
    pub(crate) mem_len: u64,
    pub(crate) base_tag: u8,
    pub(crate) modifier: Modifier,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) globals: Vec<Value>,
    pub(crate) heap: Heap,
    pub(crate) sp_global: Option<u32>,
    pub(crate) stack_base: u64,
}

impl Instance {
    /// First arena byte of the instance memory.
    pub fn mem_base(&self) -> u64 {
        self.mem_base
    }

    pub fn mem_len(&self) -> u64 {
        self.mem_len
    }

    /// Tag every access from this instance must carry in addition to the
    /// pointer tag: the sandbox tag in sandboxing modes, 0 otherwise.
    pub fn base_tag(&self) -> u8 {
        self.base_tag
    }

    pub fn modifier(&self) -> Modifier {
        self.modifier
    }

    /// Instance-relative range of the allocator heap.
    pub fn heap_range(&self) -> std::ops::Range<u64> {
        self.heap.range()
    }

    /// Instance-relative range of the shadow stack.
    pub fn stack_range(&self) -> std::ops::Range<u64> {
        self.stack_base..self.mem_len
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn global(&self, name: &str) -> Option<Value> {
        self.code
            .module
            .global_index(name)
            .map(|i| self.globals[i as usize])
    }

    pub fn exports(&self) -> impl Iterator<Item = &str> {
        self.code.module.exports.iter().map(|e| e.name.as_str())
    }

    pub fn export_type(&self, name: &str) -> Option<FuncType> {
        let m = &self.code.module;
        m.export(name).and_then(|f| m.func_type(f)).cloned()
    }
}

#[derive(Clone, Debug)]
pub struct Runtime {
    config: RuntimeConfig,
    pool: Option<TagPool>,
    store: TagStore,
    key: SigningKey,
    rng: ChaCha8Rng,
    instances: Vec<Instance>,
    next_base: u64,
    stats: RunStats,
    output: Vec<i64>,
}

/// Mutable view of the runtime handed to the evaluators and host functions.
pub(crate) struct Env<'a> {
    pub mode: Mode,
    pub pool: Option<&'a TagPool>,
    pub key: SigningKey,
    pub store: &'a mut TagStore,
    pub inst: &'a mut Instance,
    pub stats: &'a mut RunStats,
    pub output: &'a mut Vec<i64>,
    pub max_call_depth: usize,
    pub fuel: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Evaluator {
    Engine,
    Reference,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Self, ConfigError> {
        for (name, v) in [
            ("arena_bytes", config.arena_bytes),
            ("heap_bytes", config.heap_bytes),
            ("stack_bytes", config.stack_bytes),
        ] {
            if v % GRANULE != 0 {
                return Err(ConfigError::Unaligned(name));
            }
        }
        if config.arena_bytes <= RUNTIME_RESERVED_BYTES {
            return Err(ConfigError::ArenaTooSmall(config.arena_bytes));
        }
        if config.max_call_depth == 0 {
            return Err(ConfigError::ZeroCallDepth);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let key = SigningKey::random(&mut rng);
        let store = TagStore::new(config.arena_bytes).map_err(|_| ConfigError::Unaligned("arena_bytes"))?;
        Ok(Self {
            pool: TagPool::for_mode(config.mode),
            store,
            key,
            rng,
            instances: Vec::new(),
            next_base: RUNTIME_RESERVED_BYTES,
            stats: RunStats::default(),
            output: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn pool(&self) -> Option<&TagPool> {
        self.pool.as_ref()
    }

    pub fn store(&self) -> &TagStore {
        &self.store
    }

    pub fn instance(&self, id: InstanceId) -> &Instance {
        &self.instances[id.0]
    }

    pub fn instances(&self) -> impl Iterator<Item = (InstanceId, &Instance)> {
        self.instances.iter().enumerate().map(|(i, x)| (InstanceId(i), x))
    }

    /// Values passed to `env.print_i64` so far.
    pub fn output(&self) -> &[i64] {
        &self.output
    }

    pub fn take_output(&mut self) -> Vec<i64> {
        std::mem::take(&mut self.output)
    }

    pub fn add_instance(&mut self, vm: &ValidatedModule) -> Result<InstanceId, InstantiateError> {
        let mode = self.config.mode;
        if !mode.features().contains(vm.used_features()) {
            return Err(InstantiateError::Features(mode));
        }
        let sandbox_tag = match (mode.internal, mode.external) {
            (false, true) => {
                if self.instances.len() >= MAX_SANDBOXED_INSTANCES {
                    return Err(InstantiateError::Capacity(format!(
                        "sandboxing supports at most {MAX_SANDBOXED_INSTANCES} instances"
                    )));
                }
                self.instances.len() as u8 + 1
            }
            (true, true) => {
                if !self.instances.is_empty() {
                    return Err(InstantiateError::Capacity(
                        "combined mode isolates a single instance".into(),
                    ));
                }
                SANDBOX_BIT
            }
            _ => 0,
        };

        let m = vm.module();
        let code = Code::new(lower_defaults(m)).map_err(InstantiateError::Link)?;
        let (static_len, mem_len) = match m.memory_pages {
            Some(p) => {
                let s = p as u64 * PAGE_BYTES;
                (s, s + self.config.heap_bytes + self.config.stack_bytes)
            }
            None => (0, 0),
        };
        let available = self.config.arena_bytes - self.next_base;
        if mem_len > available {
            return Err(InstantiateError::ArenaExhausted {
                needed: mem_len,
                available,
            });
        }
        let mem_base = self.next_base;
        if mem_len > 0 {
            self.store
                .granule_tags_set(mem_base, mem_len, sandbox_tag)
                .expect("instance range inside the arena");
        }

        let modifier = Modifier(self.rng.gen());
        let rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        let ambient = self.pool.as_ref().map_or(sandbox_tag, |p| p.ambient());
        let stride = self.pool.as_ref().map_or(1, |p| p.stride());
        let globals = code
            .module
            .globals
            .iter()
            .map(|g| {
                let v = match g.name.as_str() {
                    SP_GLOBAL => mem_len as i64,
                    AMBIENT_GLOBAL => ambient as i64,
                    STRIDE_GLOBAL => stride as i64,
                    _ => g.init,
                };
                Value::from_int(g.ty, v as i128).unwrap_or(Value::zero(g.ty))
            })
            .collect();
        let heap_bytes = if m.memory_pages.is_some() {
            self.config.heap_bytes
        } else {
            0
        };
        let heap = Heap::new(static_len, heap_bytes);
        let sp_global = code.module.global_index(SP_GLOBAL);
        let start = code.module.start;

        self.instances.push(Instance {
            code: Arc::new(code),
            mem_base,
            mem_len,
            base_tag: sandbox_tag,
            modifier,
            rng,
            globals,
            heap,
            sp_global,
            stack_base: mem_len - mem_len.min(self.config.stack_bytes),
        });
        let id = InstanceId(self.instances.len() - 1);
        self.next_base += mem_len;
        crate::heap::init(&mut self.env(id));
        if let Some(s) = start {
            if let Err(e) = self.call(id, s, &[], Evaluator::Engine) {
                return Err(InstantiateError::Start(e));
            }
        }
        Ok(id)
    }

    fn env(&mut self, id: InstanceId) -> Env<'_> {
        Env {
            mode: self.config.mode,
            pool: self.pool.as_ref(),
            key: self.key,
            store: &mut self.store,
            inst: &mut self.instances[id.0],
            stats: &mut self.stats,
            output: &mut self.output,
            max_call_depth: self.config.max_call_depth,
            fuel: self.config.fuel,
        }
    }

    pub(crate) fn with_env<R>(&mut self, id: InstanceId, f: impl FnOnce(&mut Env) -> R) -> R {
        f(&mut self.env(id))
    }

    /// Host-side `malloc` into an instance's heap, as `env.malloc` would.
    pub fn malloc(&mut self, id: InstanceId, size: i64) -> u64 {
        self.with_env(id, |env| crate::heap::malloc(env, size))
    }

    /// Host-side `free`, as `env.free` would.
    pub fn free(&mut self, id: InstanceId, p: u64) -> Result<(), Fault> {
        self.with_env(id, |env| crate::heap::free(env, p))
    }

    pub fn realloc(&mut self, id: InstanceId, p: u64, size: i64) -> Result<u64, Fault> {
        self.with_env(id, |env| crate::heap::realloc(env, p, size))
    }

    fn resolve(&self, id: InstanceId, name: &str, args: &[Value]) -> Result<u32, ExecError> {
        let inst = self
            .instances
            .get(id.0)
            .ok_or_else(|| ExecError::Usage(format!("no instance {}", id.0)))?;
        let m = &inst.code.module;
        let func = m
            .export(name)
            .ok_or_else(|| ExecError::Usage(format!("no export named \"{name}\"")))?;
        let ty = m.func_type(func).expect("validated export");
        let arg_types: Vec<_> = args.iter().map(|a| a.ty()).collect();
        if arg_types != ty.params {
            return Err(ExecError::Usage(format!(
                "\"{name}\" has type {ty}, called with {} argument(s) of types {:?}",
                args.len(),
                arg_types
            )));
        }
        Ok(func)
    }

    fn call(
        &mut self,
        id: InstanceId,
        func: u32,
        args: &[Value],
        which: Evaluator,
    ) -> Result<Vec<Value>, ExecError> {
        let mut env = self.env(id);
        match which {
            Evaluator::Engine => engine::invoke(&mut env, func, args),
            Evaluator::Reference => reference::invoke(&mut env, func, args),
        }
    }

    /// Runs an export with the main interpreter.
    pub fn invoke(&mut self, id: InstanceId, name: &str, args: &[Value]) -> Result<Vec<Value>, ExecError> {
        let func = self.resolve(id, name, args)?;
        self.call(id, func, args, Evaluator::Engine)
    }

    /// Runs an export with the small-step reference evaluator.
    pub fn invoke_reference(
        &mut self,
        id: InstanceId,
        name: &str,
        args: &[Value],
    ) -> Result<Vec<Value>, ExecError> {
        let func = self.resolve(id, name, args)?;
        self.call(id, func, args, Evaluator::Reference)
    }

    /// First instance exporting `name`.
    pub fn find_export(&self, name: &str) -> Option<InstanceId> {
        self.instances
            .iter()
            .position(|i| i.code.module.export(name).is_some())
            .map(InstanceId)
    }

    /// Ambient tag of the region owning `granule`.
    pub fn ambient_tag(&self, granule: u64) -> u8 {
        let addr = granule * GRANULE;
        self.instances
            .iter()
            .find(|i| (i.mem_base..i.mem_base + i.mem_len).contains(&addr))
            .map_or(0, |i| i.base_tag)
    }

    /// Granules whose tag differs from their region's ambient tag.
    pub fn dump_tags(&self) -> String {
        tagmem::dump_tags(&self.store, |g| self.ambient_tag(g))
    }

    pub fn stats(&self) -> RunStats {
        let mut s = self.stats;
        s.tag_storage_bytes = self.store.tag_storage_bytes();
        s.non_ambient_granules = (0..self.store.granule_count())
            .filter(|&g| self.store.granule_tag(g) != self.ambient_tag(g))
            .count() as u64;
        s
    }
}
