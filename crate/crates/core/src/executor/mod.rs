//! Target execution.
//!
//! An [`Executor`] runs one input through a [`TargetAdapter`] and reports a
//! [`Verdict`], the raw hit counts, and the execution time. Time comes from a
//! [`Clock`]: either the wall clock, or a virtual clock in which an in-process
//! execution costs a fixed overhead plus one microsecond per target step.
//! The virtual clock makes a whole campaign reproducible from its rng seed.

mod subprocess;
pub mod targets;

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::coverage::RawTrace;

pub use subprocess::SubprocessTarget;
pub use targets::{bundled_targets, find_bundled, InProcessTarget, TargetContext, TargetOutcome};

pub const DEFAULT_TIMEOUT_MS: u64 = 1000;

/// Virtual cost of one in-process execution on top of its step count.
pub const VIRTUAL_EXEC_OVERHEAD_US: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Ok,
    Crash,
    Hang,
}

#[derive(Debug)]
pub struct ExecResult {
    pub verdict: Verdict,
    pub raw_trace: RawTrace,
    /// Always at least 1.
    pub exec_us: u64,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("failed to launch target {path}: {source}")]
    Spawn {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("target I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace file has {0} bytes, expected 65536")]
    TraceSize(usize),
    #[error("target {0} cannot run under the virtual clock")]
    VirtualClockUnsupported(String),
    #[error("timeout must be positive")]
    ZeroTimeout,
}

/// How long a single execution may run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecLimit {
    /// Real time, measured from launch.
    Wall(Duration),
    /// Target steps, for the virtual clock.
    Steps(u64),
}

/// What an adapter reports for one run.
#[derive(Debug)]
pub struct AdapterRun {
    pub verdict: Verdict,
    pub raw_trace: RawTrace,
    /// Steps executed, for adapters that count them.
    pub steps: Option<u64>,
}

/// A deterministic target: the same input always gives the same verdict and
/// the same raw trace. Each executed edge increments one trace byte,
/// saturating at 255.
pub trait TargetAdapter {
    fn name(&self) -> &str;

    /// Runs `input` starting from the all-zero `trace`.
    fn run(&mut self, input: &[u8], trace: RawTrace, limit: ExecLimit) -> Result<AdapterRun, ExecError>;

    fn supports_step_limit(&self) -> bool {
        false
    }
}

/// Campaign time source.
#[derive(Clone, Debug)]
pub enum Clock {
    Wall { started: Instant, started_unix_ms: u64 },
    Virtual { now_us: u64 },
}

impl Clock {
    pub fn wall() -> Self {
        let started_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Clock::Wall { started: Instant::now(), started_unix_ms }
    }

    /// A virtual clock starting at the unix epoch.
    pub fn virtual_clock() -> Self {
        Clock::Virtual { now_us: 0 }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual { .. })
    }

    pub fn elapsed_us(&self) -> u64 {
        match self {
            Clock::Wall { started, .. } => started.elapsed().as_micros() as u64,
            Clock::Virtual { now_us } => *now_us,
        }
    }

    pub fn unix_ms(&self) -> u64 {
        match self {
            Clock::Wall { started_unix_ms, .. } => started_unix_ms + self.elapsed_us() / 1000,
            Clock::Virtual { now_us } => now_us / 1000,
        }
    }

    fn advance(&mut self, us: u64) {
        if let Clock::Virtual { now_us } = self {
            *now_us += us;
        }
    }
}

pub struct Executor {
    adapter: Box<dyn TargetAdapter>,
    clock: Clock,
    timeout: Duration,
    execs: u64,
}

impl Executor {
    pub fn new(adapter: Box<dyn TargetAdapter>, clock: Clock, timeout: Duration) -> Result<Self, ExecError> {
        if timeout.is_zero() {
            return Err(ExecError::ZeroTimeout);
        }
        if clock.is_virtual() && !adapter.supports_step_limit() {
            return Err(ExecError::VirtualClockUnsupported(adapter.name().to_string()));
        }
        Ok(Self { adapter, clock, timeout, execs: 0 })
    }

    pub fn target_name(&self) -> &str {
        self.adapter.name()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn execs(&self) -> u64 {
        self.execs
    }

    /// Runs `input` once on a freshly zeroed trace region.
    pub fn run_target(&mut self, input: &[u8]) -> Result<ExecResult, ExecError> {
        let timeout_us = self.timeout.as_micros() as u64;
        let limit = match self.clock {
            Clock::Wall { .. } => ExecLimit::Wall(self.timeout),
            Clock::Virtual { .. } => ExecLimit::Steps(timeout_us.saturating_sub(VIRTUAL_EXEC_OVERHEAD_US)),
        };
        let started = Instant::now();
        let run = self.adapter.run(input, RawTrace::new(), limit)?;
        let exec_us = match self.clock {
            Clock::Wall { .. } => started.elapsed().as_micros() as u64,
            Clock::Virtual { .. } => {
                let steps = run.steps.unwrap_or(0);
                (VIRTUAL_EXEC_OVERHEAD_US + steps).min(timeout_us)
            }
        }
        .max(1);
        self.clock.advance(exec_us);
        self.execs += 1;
        Ok(ExecResult { verdict: run.verdict, raw_trace: run.raw_trace, exec_us })
    }
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("target", &self.adapter.name())
            .field("clock", &self.clock)
            .field("timeout", &self.timeout)
            .field("execs", &self.execs)
            .finish()
    }
}

/// Resolves a target argument: a bundled target name, or else a path to an
/// instrumented executable.
pub fn resolve_target(target: &str, work_dir: &std::path::Path) -> Box<dyn TargetAdapter> {
    match find_bundled(target) {
        Some(t) => Box::new(t),
        None => Box::new(SubprocessTarget::new(target, work_dir)),
    }
}
