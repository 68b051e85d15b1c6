//! A bundled target packaged as a standalone instrumented executable.
//!
//! `bfz-toy-target <input_file>` runs the target named by `BFZ_TOY_TARGET`
//! (default `magic4`) on the file's contents, writes the hit counts to the
//! file named by `TRACE_OUT`, and aborts if the target crashed.

use std::process::ExitCode;

use bfz_core::executor::{find_bundled, TargetContext, TargetOutcome};

fn main() -> ExitCode {
    let Some(input_path) = std::env::args_os().nth(1) else {
        eprintln!("usage: bfz-toy-target <input_file>");
        return ExitCode::from(64);
    };
    let name = std::env::var("BFZ_TOY_TARGET").unwrap_or_else(|_| "magic4".into());
    let Some(target) = find_bundled(&name) else {
        eprintln!("unknown target {name}");
        return ExitCode::from(64);
    };
    let input = match std::fs::read(&input_path) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("cannot read input: {e}");
            return ExitCode::from(66);
        }
    };

    let mut ctx = TargetContext::unlimited();
    let outcome = target.call(&mut ctx, &input);
    if let Some(path) = std::env::var_os("TRACE_OUT") {
        if let Err(e) = std::fs::write(path, ctx.into_trace().as_bytes()) {
            eprintln!("cannot write trace: {e}");
            return ExitCode::from(74);
        }
    }
    if outcome == TargetOutcome::Crash {
        std::process::abort();
    }
    ExitCode::SUCCESS
}
