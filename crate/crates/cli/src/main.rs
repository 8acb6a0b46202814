//! `segwasm`: validate, harden, run and inspect tagged modules.
//!
//! Exit codes: 0 success, 1 trap or step limit, 2 parse, validation or link
//! error, 3 usage error.

mod config;
mod inspect;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segwasm::harden::{frame_layouts, harden, HardenError, HardenOptions};
use segwasm::{FeatureSet, Mode, Module};

#[derive(Parser)]
#[command(name = "segwasm", version, about = "Tag-checked WebAssembly-like runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and type-check modules.
    Validate {
        /// Protection modes whose features the modules may use; all
        /// features when omitted.
        #[arg(long)]
        mode: Option<String>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Instrument a module with stack tagging and/or pointer authentication.
    Harden {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Tag unsafe stack slots. With neither pass selected, both run.
        #[arg(long)]
        stack_safety: bool,
        /// Sign function pointers and authenticate them before calls.
        #[arg(long)]
        ptr_auth: bool,
    },
    /// Instantiate modules and optionally invoke an export.
    Run(run::RunArgs),
    /// Pretty-print a tag dump written by `run --dump-tags`.
    InspectTags { dump: PathBuf },
}

/// A failure with its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn trap(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
    pub fn invalid(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Validate { mode, files } => validate(mode.as_deref(), &files),
        Command::Harden {
            input,
            output,
            stack_safety,
            ptr_auth,
        } => harden_cmd(&input, &output, stack_safety, ptr_auth),
        Command::Run(args) => run::run(args),
        Command::InspectTags { dump } => inspect::inspect(&dump),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("{}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

pub fn parse_mode(s: &str) -> Result<Mode, Failure> {
    s.parse().map_err(|e| Failure::usage(format!("error: {e}")))
}

pub fn load(path: &Path) -> Result<Module, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("error: cannot read {}: {e}", path.display())))?;
    segwasm::parse(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

fn validate(mode: Option<&str>, files: &[PathBuf]) -> CmdResult {
    let features = match mode {
        Some(m) => parse_mode(m)?.features(),
        None => FeatureSet::ALL,
    };
    let mut failed = false;
    for path in files {
        let m = match load(path) {
            Ok(m) => m,
            Err(f) if f.code == 2 => {
                eprintln!("{}", f.message);
                failed = true;
                continue;
            }
            Err(f) => return Err(f),
        };
        match segwasm::validate(&m, features) {
            Ok(_) => println!("{}: ok", path.display()),
            Err(e) => {
                failed = true;
                eprintln!("{}: {e}", path.display());
            }
        }
    }
    if failed {
        Err(Failure::invalid(""))
    } else {
        Ok(())
    }
}

fn harden_cmd(input: &Path, output: &Path, stack_safety: bool, ptr_auth: bool) -> CmdResult {
    let m = load(input)?;
    let both = !stack_safety && !ptr_auth;
    let opts = HardenOptions {
        stack_safety: stack_safety || both,
        ptr_auth: ptr_auth || both,
    };
    let (guards, tagged) = if opts.stack_safety {
        frame_layouts(&m).iter().fold((0, 0), |(g, t), l| {
            (
                g + usize::from(l.guard),
                t + l.slots.iter().filter(|s| s.instrument).count(),
            )
        })
    } else {
        (0, 0)
    };
    let h = harden(&m, opts).map_err(|e| match e {
        HardenError::AlreadyHardened => {
            Failure::invalid(format!("{}: module is already hardened", input.display()))
        }
        other => Failure::invalid(format!("{}: {other}", input.display())),
    })?;
    fs::write(output, segwasm::serialize(&h))
        .map_err(|e| Failure::usage(format!("error: cannot write {}: {e}", output.display())))?;
    println!("tagged_slots={tagged}");
    println!("guard_slots={guards}");
    Ok(())
}
