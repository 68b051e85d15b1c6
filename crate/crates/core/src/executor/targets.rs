//! Bundled in-process targets.
//!
//! Each target is a plain function instrumented by hand: it calls
//! [`TargetContext::hit`] with a fixed edge id wherever a compiled target
//! would have an instrumented branch. Edge ids are disjoint across targets.
//!
//! | target    | edges                                                                 |
//! |-----------|-----------------------------------------------------------------------|
//! | `magic4`  | 0x100 entry, 0x110+i byte i matched, 0x120+i byte i missed, 0x140 crash |
//! | `chain16` | 0x200 entry, 0x210+i byte i matched, 0x220+i byte i missed, 0x240 crash |
//! | `spinner` | 0x300 entry, 0x301 spin branch, 0x302 spin loop body, 0x310+(b&7) byte class |
//!
//! Long-running targets must poll [`TargetContext::should_stop`]; the
//! executor reports a hang once it returns true.

use std::time::Instant;

use super::{AdapterRun, ExecError, ExecLimit, TargetAdapter, Verdict};
use crate::coverage::RawTrace;

pub const MAGIC4: [u8; 4] = *b"MAG4";
pub const CHAIN16: [u8; 16] = *b"c0ntextual-b4nd!";
pub const SPIN_TRIGGER: &[u8] = b"SPIN";
pub const SPINNER_BYTE_CLASS_BASE: u16 = 0x310;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetOutcome {
    Ok,
    Crash,
}

enum Budget {
    Unlimited,
    Deadline(Instant),
    Steps(u64),
}

/// The instrumentation runtime handed to an in-process target.
pub struct TargetContext {
    trace: RawTrace,
    steps: u64,
    budget: Budget,
    timed_out: bool,
}

impl TargetContext {
    fn new(trace: RawTrace, budget: Budget) -> Self {
        Self { trace, steps: 0, budget, timed_out: false }
    }

    /// A context with no time limit, for running targets outside an executor.
    pub fn unlimited() -> Self {
        Self::new(RawTrace::new(), Budget::Unlimited)
    }

    #[inline]
    pub fn hit(&mut self, edge: u16) {
        self.steps += 1;
        self.trace.hit(edge);
    }

    /// True once the execution budget is spent; the run then counts as a hang.
    pub fn should_stop(&mut self) -> bool {
        if self.timed_out {
            return true;
        }
        self.timed_out = match self.budget {
            Budget::Unlimited => false,
            Budget::Steps(max) => self.steps >= max,
            // Reading the clock costs more than a step; poll it every 1024.
            Budget::Deadline(deadline) => self.steps % 1024 == 0 && Instant::now() >= deadline,
        };
        self.timed_out
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn into_trace(self) -> RawTrace {
        self.trace
    }
}

type TargetFn = fn(&mut TargetContext, &[u8]) -> TargetOutcome;

#[derive(Clone, Copy)]
pub struct InProcessTarget {
    name: &'static str,
    description: &'static str,
    entry: TargetFn,
}

impl InProcessTarget {
    pub fn description(&self) -> &'static str {
        self.description
    }

    /// Runs the target directly, outside any executor.
    pub fn call(&self, ctx: &mut TargetContext, input: &[u8]) -> TargetOutcome {
        (self.entry)(ctx, input)
    }
}

impl std::fmt::Debug for InProcessTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InProcessTarget").field("name", &self.name).finish()
    }
}

impl TargetAdapter for InProcessTarget {
    fn name(&self) -> &str {
        self.name
    }

    fn run(&mut self, input: &[u8], trace: RawTrace, limit: ExecLimit) -> Result<AdapterRun, ExecError> {
        let budget = match limit {
            ExecLimit::Wall(d) => Budget::Deadline(Instant::now() + d),
            ExecLimit::Steps(n) => Budget::Steps(n),
        };
        let mut ctx = TargetContext::new(trace, budget);
        let outcome = (self.entry)(&mut ctx, input);
        let verdict = if ctx.timed_out {
            Verdict::Hang
        } else {
            match outcome {
                TargetOutcome::Ok => Verdict::Ok,
                TargetOutcome::Crash => Verdict::Crash,
            }
        };
        let steps = ctx.steps;
        Ok(AdapterRun { verdict, raw_trace: ctx.into_trace(), steps: Some(steps) })
    }

    fn supports_step_limit(&self) -> bool {
        true
    }
}

fn byte_chain(ctx: &mut TargetContext, input: &[u8], key: &[u8], base: u16) -> TargetOutcome {
    ctx.hit(base);
    for (i, &want) in key.iter().enumerate() {
        if input.get(i) != Some(&want) {
            ctx.hit(base + 0x20 + i as u16);
            return TargetOutcome::Ok;
        }
        ctx.hit(base + 0x10 + i as u16);
    }
    ctx.hit(base + 0x40);
    TargetOutcome::Crash
}

fn magic4(ctx: &mut TargetContext, input: &[u8]) -> TargetOutcome {
    byte_chain(ctx, input, &MAGIC4, 0x100)
}

fn chain16(ctx: &mut TargetContext, input: &[u8]) -> TargetOutcome {
    byte_chain(ctx, input, &CHAIN16, 0x200)
}

fn spinner(ctx: &mut TargetContext, input: &[u8]) -> TargetOutcome {
    ctx.hit(0x300);
    for &b in input {
        ctx.hit(SPINNER_BYTE_CLASS_BASE + (b & 7) as u16);
    }
    if input.starts_with(SPIN_TRIGGER) {
        ctx.hit(0x301);
        while !ctx.should_stop() {
            ctx.hit(0x302);
        }
    }
    TargetOutcome::Ok
}

pub fn bundled_targets() -> Vec<InProcessTarget> {
    vec![
        InProcessTarget {
            name: "magic4",
            description: "byte-at-a-time check of a 4-byte magic; crashes on a full match",
            entry: magic4,
        },
        InProcessTarget {
            name: "chain16",
            description: "16 sequential byte comparisons; crashes when all match",
            entry: chain16,
        },
        InProcessTarget {
            name: "spinner",
            description: "counts byte classes; spins forever on inputs starting with SPIN",
            entry: spinner,
        },
    ]
}

pub fn find_bundled(name: &str) -> Option<InProcessTarget> {
    bundled_targets().into_iter().find(|t| t.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_least_three_named_targets() {
        let names: Vec<_> = bundled_targets().iter().map(|t| t.name).collect();
        assert_eq!(names, ["magic4", "chain16", "spinner"]);
        assert!(find_bundled("nope").is_none());
    }

    #[test]
    fn chain16_each_matched_byte_is_a_new_edge() {
        let t = find_bundled("chain16").unwrap();
        let mut prev = 0;
        for k in 0..16 {
            let mut input = [0u8; 16];
            input[..k].copy_from_slice(&CHAIN16[..k]);
            let mut ctx = TargetContext::unlimited();
            assert_eq!(t.call(&mut ctx, &input), TargetOutcome::Ok);
            let n = ctx.into_trace().classify().count_bytes();
            assert!(n > prev || k == 0);
            prev = n;
        }
    }
}
