//! Adapter for an external instrumented executable.
//!
//! Wire contract: the target is launched as `<target> <input_file>` with the
//! environment variable `TRACE_OUT` naming a file it must fill with exactly
//! 65536 raw hit-count bytes. Termination by a signal is a crash; running
//! past the timeout is a hang. A target that exits without writing the trace
//! file contributes an all-zero trace.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};

use wait_timeout::ChildExt;

use super::{AdapterRun, ExecError, ExecLimit, TargetAdapter, Verdict};
use crate::coverage::{RawTrace, MAP_SIZE};

pub const TRACE_ENV: &str = "TRACE_OUT";

#[derive(Debug)]
pub struct SubprocessTarget {
    path: String,
    input_file: PathBuf,
    trace_file: PathBuf,
}

impl SubprocessTarget {
    /// `work_dir` holds the current input and trace files.
    pub fn new(path: impl Into<String>, work_dir: &Path) -> Self {
        Self {
            path: path.into(),
            input_file: work_dir.join(".cur_input"),
            trace_file: work_dir.join(".cur_trace"),
        }
    }
}

#[cfg(unix)]
fn killed_by_signal(status: &ExitStatus) -> bool {
    use std::os::unix::process::ExitStatusExt;
    status.signal().is_some()
}

#[cfg(not(unix))]
fn killed_by_signal(status: &ExitStatus) -> bool {
    // No signals; treat any abnormal exit code as a crash.
    status.code().map_or(true, |c| c < 0)
}

impl TargetAdapter for SubprocessTarget {
    fn name(&self) -> &str {
        &self.path
    }

    fn run(&mut self, input: &[u8], _trace: RawTrace, limit: ExecLimit) -> Result<AdapterRun, ExecError> {
        let timeout = match limit {
            ExecLimit::Wall(d) => d,
            ExecLimit::Steps(_) => return Err(ExecError::VirtualClockUnsupported(self.path.clone())),
        };
        fs::write(&self.input_file, input)?;
        match fs::remove_file(&self.trace_file) {
            Err(e) if e.kind() != ErrorKind::NotFound => return Err(e.into()),
            _ => {}
        }

        let mut child = Command::new(&self.path)
            .arg(&self.input_file)
            .env(TRACE_ENV, &self.trace_file)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| ExecError::Spawn { path: self.path.clone(), source })?;

        let verdict = match child.wait_timeout(timeout)? {
            Some(status) if killed_by_signal(&status) => Verdict::Crash,
            Some(_) => Verdict::Ok,
            None => {
                // Already-exited races are fine; the verdict stays a hang.
                let _ = child.kill();
                child.wait()?;
                Verdict::Hang
            }
        };

        let raw_trace = match fs::read(&self.trace_file) {
            Ok(bytes) if bytes.len() == MAP_SIZE => RawTrace::from_bytes(&bytes).expect("length checked"),
            Ok(bytes) if verdict == Verdict::Ok => return Err(ExecError::TraceSize(bytes.len())),
            // A crashed or killed target may leave a partial file behind.
            Ok(_) => RawTrace::new(),
            Err(e) if e.kind() == ErrorKind::NotFound => RawTrace::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(AdapterRun { verdict, raw_trace, steps: None })
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::executor::{Clock, Executor};
    use std::os::unix::fs::PermissionsExt;
    use std::time::Duration;

    fn script(dir: &Path, body: &str) -> String {
        let path = dir.join("target.sh");
        fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn executor(dir: &Path, body: &str, timeout_ms: u64) -> Executor {
        let target = SubprocessTarget::new(script(dir, body), dir);
        Executor::new(Box::new(target), Clock::wall(), Duration::from_millis(timeout_ms)).unwrap()
    }

    #[test]
    fn reads_trace_file_and_passes_input_path() {
        let dir = tempfile::tempdir().unwrap();
        // Copy the input into the first bytes of the trace, pad to 65536.
        let body = r#"{ cat "$1"; head -c $((65536 - $(wc -c < "$1"))) /dev/zero; } > "$TRACE_OUT""#;
        let mut e = executor(dir.path(), body, 2000);
        let r = e.run_target(&[3, 0, 1]).unwrap();
        assert_eq!(r.verdict, Verdict::Ok);
        assert_eq!(&r.raw_trace.as_bytes()[..4], &[3, 0, 1, 0]);
    }

    #[test]
    fn signal_is_crash() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = executor(dir.path(), "kill -SEGV $$", 2000);
        assert_eq!(e.run_target(b"x").unwrap().verdict, Verdict::Crash);
    }

    #[test]
    fn overrunning_timeout_is_hang() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = executor(dir.path(), "sleep 5", 100);
        let r = e.run_target(b"x").unwrap();
        assert_eq!(r.verdict, Verdict::Hang);
        assert!(r.raw_trace.is_zero());
    }

    #[test]
    fn short_trace_file_is_an_adapter_fault() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = executor(dir.path(), r#"printf abc > "$TRACE_OUT""#, 2000);
        assert!(matches!(e.run_target(b"x"), Err(ExecError::TraceSize(3))));
    }

    #[test]
    fn missing_executable_is_an_adapter_fault() {
        let dir = tempfile::tempdir().unwrap();
        let target = SubprocessTarget::new("/nonexistent/target", dir.path());
        let mut e = Executor::new(Box::new(target), Clock::wall(), Duration::from_millis(100)).unwrap();
        assert!(matches!(e.run_target(b"x"), Err(ExecError::Spawn { .. })));
    }

    #[test]
    fn virtual_clock_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let target = SubprocessTarget::new("/bin/true", dir.path());
        assert!(Executor::new(Box::new(target), Clock::virtual_clock(), Duration::from_millis(100)).is_err());
    }
}
