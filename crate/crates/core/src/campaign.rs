//! A whole fuzzing campaign: seed loading, dry run, the main queue loop,
//! stats output and the policy model's lifecycle.
//!
//! Output directory layout:
//!
//! ```text
//! queue/id:NNNNNN      every enqueued input, seeds first
//! crashes/id:NNNNNN    crashing inputs, one per distinct trace
//! hangs/id:NNNNNN      hanging inputs, one per distinct trace
//! plot_data.csv        progress rows, at least one per second
//! reward_log.csv       one row per bandit decision (train mode)
//! fuzzer_stats         final summary
//! ```

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{FindingStore, Queue, QueueAverages, TestCase};
use crate::coverage::VirginMap;
use crate::executor::{resolve_target, Clock, ExecError, Executor, Verdict, DEFAULT_TIMEOUT_MS};
use crate::policy::{PolicyError, PolicyModel, DEFAULT_LEARNING_RATE};
use crate::scheduler::{
    fuzz_one, EnergyDecision, Feedback, FuzzError, FuzzHost, Mode, SchedulerConfig, DEFAULT_EPSILON,
    DEFAULT_FUZZING_PROB,
};

pub const PLOT_HEADER: [&str; 7] = [
    "unix_ms",
    "execs",
    "paths_total",
    "virgin_bytes_covered",
    "crashes_unique",
    "hangs_unique",
    "pending_favored",
];

pub const REWARD_HEADER: [&str; 9] = [
    "decision_index",
    "action_index",
    "multiplier",
    "base_energy",
    "final_energy",
    "interesting",
    "total",
    "reward",
    "explored",
];

const STATS_INTERVAL_US: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct CampaignConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Bundled target name or path to an instrumented executable.
    pub target: String,
    pub mode: Mode,
    pub skip_deterministic: bool,
    pub duration: Duration,
    pub fuzzing_prob: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub model_path: Option<PathBuf>,
    pub timeout_ms: u64,
    pub rng_seed: u64,
    /// Measure time in target steps instead of wall time (in-process
    /// targets only). Makes the whole campaign a function of its config.
    pub virtual_clock: bool,
    /// End the campaign once this many unique crashes were found.
    pub stop_after_crashes: Option<u64>,
}

impl CampaignConfig {
    pub fn new(input_dir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, target: impl Into<String>) -> Self {
        Self {
            input_dir: input_dir.into(),
            output_dir: output_dir.into(),
            target: target.into(),
            mode: Mode::Baseline,
            skip_deterministic: false,
            duration: Duration::from_secs(60),
            fuzzing_prob: DEFAULT_FUZZING_PROB,
            epsilon: DEFAULT_EPSILON,
            learning_rate: DEFAULT_LEARNING_RATE,
            model_path: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            rng_seed: 0,
            virtual_clock: false,
            stop_after_crashes: None,
        }
    }

    fn validate(&self) -> Result<(), CampaignError> {
        let bad = |msg: String| Err(CampaignError::Config(msg));
        for (name, v) in [("fuzzing_prob", self.fuzzing_prob), ("epsilon", self.epsilon)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.timeout_ms == 0 {
            return bad("timeout must be positive".into());
        }
        match (self.mode, &self.model_path) {
            (Mode::Train, None) => bad("train mode needs --model".into()),
            (Mode::Test, None) => bad("test mode needs --model".into()),
            (Mode::Test, Some(p)) if !p.is_file() => bad(format!("model file {} does not exist", p.display())),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CampaignSummary {
    pub execs: u64,
    pub paths_total: usize,
    pub crashes_unique: usize,
    pub hangs_unique: usize,
    pub virgin_bytes_covered: u32,
    pub elapsed_us: u64,
    /// Campaign time of the first crash.
    pub first_crash_us: Option<u64>,
    pub decisions: u64,
    pub policy_updates: u64,
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read seeds from {path}: {source}")]
    Seeds {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no seed files in {0}")]
    NoSeeds(PathBuf),
    #[error("output directory {0} is not empty")]
    OutputNotEmpty(PathBuf),
    #[error("cannot set up output directory {path}: {source}")]
    OutputSetup {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("model {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: PolicyError,
    },
    #[error("target cannot be used: {0}")]
    Target(#[source] ExecError),
    #[error("seed {name} gave {verdict:?} in the dry run")]
    BadSeed { name: String, verdict: Verdict },
    #[error("dry run failed: {0}")]
    DryRun(#[source] FuzzError),
    #[error(transparent)]
    Runtime(#[from] FuzzError),
}

impl CampaignError {
    /// Errors raised before fuzzing starts.
    pub fn is_startup(&self) -> bool {
        !matches!(self, CampaignError::Runtime(_))
    }
}

struct StatsWriter {
    plot: csv::Writer<fs::File>,
    rewards: Option<csv::Writer<fs::File>>,
    last_row_us: Option<u64>,
    decisions: u64,
}

impl StatsWriter {
    fn create(out: &Path, with_rewards: bool) -> io::Result<Self> {
        let mut plot = csv::Writer::from_path(out.join("plot_data.csv"))?;
        plot.write_record(PLOT_HEADER)?;
        plot.flush()?;
        let rewards = if with_rewards {
            let mut w = csv::Writer::from_path(out.join("reward_log.csv"))?;
            w.write_record(REWARD_HEADER)?;
            w.flush()?;
            Some(w)
        } else {
            None
        };
        Ok(Self { plot, rewards, last_row_us: None, decisions: 0 })
    }

    fn reward_row(&mut self, d: &EnergyDecision) -> io::Result<()> {
        if let Some(w) = &mut self.rewards {
            w.write_record([
                self.decisions.to_string(),
                d.action_index.to_string(),
                d.multiplier().to_string(),
                d.base_energy.to_string(),
                d.final_energy.to_string(),
                d.interesting.to_string(),
                d.total.to_string(),
                d.reward.to_string(),
                d.explored.to_string(),
            ])?;
            w.flush()?;
        }
        self.decisions += 1;
        Ok(())
    }
}

/// Everything `fuzz_one` reaches through [`FuzzHost`].
struct Engine {
    executor: Executor,
    queue: Queue,
    virgin: VirginMap,
    crashes: FindingStore,
    hangs: FindingStore,
    stats: StatsWriter,
    duration_us: u64,
    stop_after_crashes: Option<u64>,
    first_crash_us: Option<u64>,
}

impl Engine {
    fn elapsed_us(&self) -> u64 {
        self.executor.clock().elapsed_us()
    }

    fn emit_stats(&mut self) -> io::Result<()> {
        let clock = self.executor.clock();
        let row = [
            clock.unix_ms(),
            self.executor.execs(),
            self.queue.len() as u64,
            self.virgin.covered_bytes() as u64,
            self.crashes.unique() as u64,
            self.hangs.unique() as u64,
            self.queue.pending_favored() as u64,
        ];
        self.stats.last_row_us = Some(clock.elapsed_us());
        self.stats.plot.write_record(row.iter().map(|v| v.to_string()))?;
        self.stats.plot.flush()
    }

    fn maybe_emit_stats(&mut self) -> io::Result<()> {
        match self.stats.last_row_us {
            Some(t) if self.elapsed_us() < t + STATS_INTERVAL_US => Ok(()),
            _ => self.emit_stats(),
        }
    }

    fn summary(&self) -> CampaignSummary {
        CampaignSummary {
            execs: self.executor.execs(),
            paths_total: self.queue.len(),
            crashes_unique: self.crashes.unique(),
            hangs_unique: self.hangs.unique(),
            virgin_bytes_covered: self.virgin.covered_bytes(),
            elapsed_us: self.elapsed_us(),
            first_crash_us: self.first_crash_us,
            decisions: self.stats.decisions,
            policy_updates: 0,
        }
    }
}

impl FuzzHost for Engine {
    fn execute(&mut self, input: &[u8], parent: &TestCase) -> Result<Feedback, FuzzError> {
        let run = self.executor.run_target(input)?;
        let trace = run.raw_trace.classify();
        let mut fb = Feedback::default();
        match run.verdict {
            Verdict::Ok => {
                let new_bits = self.virgin.has_new_bits(&trace);
                let id = self.queue.add_if_interesting(input, new_bits, &trace, run.exec_us, parent.depth)?;
                if let Some(id) = id {
                    log::debug!("new path {id} ({new_bits:?}, {} bytes)", input.len());
                    fb.interesting = true;
                }
            }
            Verdict::Crash => {
                if self.crashes.record(input, trace.checksum())? {
                    log::info!("unique crash #{} at {} execs", self.crashes.unique(), self.executor.execs());
                    self.first_crash_us.get_or_insert(self.elapsed_us());
                }
            }
            Verdict::Hang => {
                if self.hangs.record(input, trace.checksum())? {
                    log::info!("unique hang #{}", self.hangs.unique());
                }
            }
        }
        self.maybe_emit_stats()?;
        Ok(fb)
    }

    fn queue_averages(&self) -> QueueAverages {
        self.queue.averages().expect("queue holds the seeds")
    }

    fn splice_partner(&mut self, exclude: usize, rng: &mut dyn RngCore) -> Option<Vec<u8>> {
        let n = self.queue.len();
        if n < 2 {
            return None;
        }
        let mut id = rng.gen_range(0..n - 1);
        if id >= exclude {
            id += 1;
        }
        self.queue.get(id).map(|tc| tc.data.clone())
    }

    fn should_stop(&self) -> bool {
        self.elapsed_us() >= self.duration_us
            || self.stop_after_crashes.is_some_and(|n| self.crashes.unique() as u64 >= n)
    }
}

/// Seed files in `dir`, sorted by file name.
fn read_seeds(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, CampaignError> {
    let err = |source| CampaignError::Seeds { path: dir.to_path_buf(), source };
    let mut seeds = Vec::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let entry = entry.map_err(err)?;
        if !entry.file_type().map_err(err)?.is_file() {
            continue;
        }
        let data = fs::read(entry.path()).map_err(err)?;
        seeds.push((entry.file_name().to_string_lossy().into_owned(), data));
    }
    if seeds.is_empty() {
        return Err(CampaignError::NoSeeds(dir.to_path_buf()));
    }
    seeds.sort();
    Ok(seeds)
}

fn prepare_output(dir: &Path) -> Result<(), CampaignError> {
    let err = |source| CampaignError::OutputSetup { path: dir.to_path_buf(), source };
    if dir.exists() && fs::read_dir(dir).map_err(err)?.next().is_some() {
        return Err(CampaignError::OutputNotEmpty(dir.to_path_buf()));
    }
    for sub in ["queue", "crashes", "hangs"] {
        fs::create_dir_all(dir.join(sub)).map_err(err)?;
    }
    Ok(())
}

fn setup_model(config: &CampaignConfig, rng: &mut ChaCha8Rng) -> Result<Option<PolicyModel>, CampaignError> {
    let path = match (config.mode, &config.model_path) {
        (Mode::Baseline, _) | (_, None) => return Ok(None),
        (_, Some(p)) => p,
    };
    let model_err = |source| CampaignError::Model { path: path.clone(), source };
    let mut model = if path.exists() {
        let m = PolicyModel::load(path).map_err(model_err)?;
        log::info!("loaded model {} ({} updates)", path.display(), m.update_count());
        m
    } else {
        let m = PolicyModel::init(rng);
        m.save(path).map_err(model_err)?;
        log::info!("initialized model {}", path.display());
        m
    };
    model.learning_rate = config.learning_rate;
    Ok(Some(model))
}

/// Runs a campaign to completion and writes its summary.
pub fn run_campaign(config: &CampaignConfig) -> Result<CampaignSummary, CampaignError> {
    config.validate()?;
    let seeds = read_seeds(&config.input_dir)?;
    prepare_output(&config.output_dir)?;
    let out = &config.output_dir;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let clock = if config.virtual_clock { Clock::virtual_clock() } else { Clock::wall() };
    let adapter = resolve_target(&config.target, out);
    let executor = Executor::new(adapter, clock, Duration::from_millis(config.timeout_ms))
        .map_err(CampaignError::Target)?;
    let stats = StatsWriter::create(out, config.mode == Mode::Train)
        .map_err(|source| CampaignError::OutputSetup { path: out.clone(), source })?;

    let mut engine = Engine {
        executor,
        queue: Queue::new(Some(out.join("queue"))),
        virgin: VirginMap::new(),
        crashes: FindingStore::new(Some(out.join("crashes"))),
        hangs: FindingStore::new(Some(out.join("hangs"))),
        stats,
        duration_us: config.duration.as_micros() as u64,
        stop_after_crashes: config.stop_after_crashes,
        first_crash_us: None,
    };

    let mut seeds = seeds;
    seeds.shuffle(&mut rng);
    for (name, data) in &seeds {
        let run = match engine.executor.run_target(data) {
            Ok(run) => run,
            Err(e @ ExecError::Spawn { .. }) => return Err(CampaignError::Target(e)),
            Err(e) => return Err(CampaignError::DryRun(e.into())),
        };
        if run.verdict != Verdict::Ok {
            return Err(CampaignError::BadSeed { name: name.clone(), verdict: run.verdict });
        }
        let trace = run.raw_trace.classify();
        engine.virgin.has_new_bits(&trace);
        engine.queue.add_seed(data, &trace, run.exec_us).map_err(|e| CampaignError::DryRun(e.into()))?;
    }
    log::info!(
        "dry run: {} seeds, {} map bytes covered",
        engine.queue.len(),
        engine.virgin.covered_bytes()
    );
    engine.emit_stats().map_err(|e| CampaignError::DryRun(e.into()))?;

    let mut model = setup_model(config, &mut rng)?;
    let sched = SchedulerConfig {
        mode: config.mode,
        fuzzing_prob: config.fuzzing_prob,
        epsilon: config.epsilon,
        skip_deterministic: config.skip_deterministic || config.mode.is_bandit(),
    };

    let result = fuzz_loop(&mut engine, &sched, model.as_mut(), &mut rng);

    // Save what was learned even if the loop failed.
    if let (Mode::Train, Some(m), Some(path)) = (config.mode, &model, &config.model_path) {
        m.save(path).map_err(FuzzError::from)?;
    }
    result?;

    engine.emit_stats().map_err(FuzzError::from)?;
    let mut summary = engine.summary();
    summary.policy_updates = model.as_ref().map_or(0, |m| m.update_count());
    write_summary(out, config, &summary).map_err(FuzzError::from)?;
    log::info!(
        "done: {} execs, {} paths, {} unique crashes, {} unique hangs",
        summary.execs,
        summary.paths_total,
        summary.crashes_unique,
        summary.hangs_unique
    );
    Ok(summary)
}

fn fuzz_loop(
    engine: &mut Engine,
    sched: &SchedulerConfig,
    mut model: Option<&mut PolicyModel>,
    rng: &mut ChaCha8Rng,
) -> Result<(), FuzzError> {
    let mut cycle = 0u64;
    while !engine.should_stop() {
        engine.queue.cull();
        log::debug!("cycle {cycle}: {} paths, {} favored pending", engine.queue.len(), engine.queue.pending_favored());
        let mut id = 0;
        // Entries added during the pass are visited in the same pass.
        while id < engine.queue.len() && !engine.should_stop() {
            if engine.queue.should_skip(id, rng) {
                id += 1;
                continue;
            }
            let tc = engine.queue.entries()[id].clone();
            let decision = fuzz_one(&tc, sched, model.as_deref_mut(), engine, rng)?;
            engine.queue.mark_fuzzed(id);
            if let Some(d) = decision {
                if sched.mode == Mode::Train && d.total > 0 {
                    engine.stats.reward_row(&d)?;
                } else {
                    engine.stats.decisions += 1;
                }
            }
            id += 1;
        }
        cycle += 1;
    }
    Ok(())
}

fn write_summary(out: &Path, config: &CampaignConfig, s: &CampaignSummary) -> io::Result<()> {
    let mode = format!("{:?}", config.mode).to_lowercase();
    let first_crash = s.first_crash_us.map_or("none".to_string(), |us| format!("{}", us / 1000));
    let text = format!(
        "target               : {}\n\
         mode                 : {mode}\n\
         rng_seed             : {}\n\
         elapsed_ms           : {}\n\
         execs                : {}\n\
         paths_total          : {}\n\
         crashes_unique       : {}\n\
         hangs_unique         : {}\n\
         virgin_bytes_covered : {}\n\
         first_crash_ms       : {first_crash}\n\
         bandit_decisions     : {}\n\
         policy_updates       : {}\n",
        config.target,
        config.rng_seed,
        s.elapsed_us / 1000,
        s.execs,
        s.paths_total,
        s.crashes_unique,
        s.hangs_unique,
        s.virgin_bytes_covered,
        s.decisions,
        s.policy_updates,
    );
    fs::write(out.join("fuzzer_stats"), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds(dir: &Path, files: &[(&str, &[u8])]) {
        for (name, data) in files {
            fs::write(dir.join(name), data).unwrap();
        }
    }

    fn config(tmp: &Path, target: &str) -> CampaignConfig {
        let input = tmp.join("in");
        fs::create_dir_all(&input).unwrap();
        let mut c = CampaignConfig::new(input, tmp.join("out"), target);
        c.virtual_clock = true;
        c.duration = Duration::from_secs(2);
        c
    }

    #[test]
    fn baseline_magic4_finds_new_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let c = config(tmp.path(), "magic4");
        seeds(&c.input_dir, &[("a", b"AAAA")]);
        let s = run_campaign(&c).unwrap();
        assert!(s.paths_total > 1, "{s:?}");
        assert_eq!(fs::read_dir(c.output_dir.join("queue")).unwrap().count(), s.paths_total);
        assert!(!c.output_dir.join("reward_log.csv").exists());
        let stats = fs::read_to_string(c.output_dir.join("fuzzer_stats")).unwrap();
        assert!(stats.contains(&format!("paths_total          : {}", s.paths_total)));
    }

    #[test]
    fn plot_rows_are_well_formed_and_monotone() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = config(tmp.path(), "magic4");
        c.duration = Duration::from_secs(5);
        seeds(&c.input_dir, &[("a", b"AAAA"), ("b", b"xyz")]);
        run_campaign(&c).unwrap();
        let mut r = csv::Reader::from_path(c.output_dir.join("plot_data.csv")).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), PLOT_HEADER);
        let rows: Vec<Vec<u64>> =
            r.records().map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
        assert!(rows.len() >= 5, "{} rows", rows.len());
        for w in rows.windows(2) {
            assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1] && w[1][2] >= w[0][2]);
            // at least one row per (virtual) second
            assert!(w[1][0] - w[0][0] <= 1000 + 1);
        }
    }

    #[test]
    fn train_mode_writes_model_and_reward_log() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = config(tmp.path(), "magic4");
        c.mode = Mode::Train;
        c.model_path = Some(tmp.path().join("model.bin"));
        seeds(&c.input_dir, &[("a", b"AAAA")]);
        let s = run_campaign(&c).unwrap();
        let model = PolicyModel::load(c.model_path.as_ref().unwrap()).unwrap();
        assert_eq!(model.update_count(), s.policy_updates);
        assert!(s.policy_updates > 0);
        let mut r = csv::Reader::from_path(c.output_dir.join("reward_log.csv")).unwrap();
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), REWARD_HEADER);
        let mut n = 0;
        for rec in r.records() {
            let rec = rec.unwrap();
            assert_eq!(rec.len(), REWARD_HEADER.len());
            let reward: f64 = rec[7].parse().unwrap();
            assert!((0.0..=1.0).contains(&reward));
            n += 1;
        }
        assert_eq!(n, s.policy_updates);
    }

    #[test]
    fn test_mode_leaves_model_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let model_path = tmp.path().join("model.bin");
        PolicyModel::init(&mut ChaCha8Rng::seed_from_u64(1)).save(&model_path).unwrap();
        let before = fs::read(&model_path).unwrap();
        let mut c = config(tmp.path(), "magic4");
        c.mode = Mode::Test;
        c.model_path = Some(model_path.clone());
        seeds(&c.input_dir, &[("a", b"AAAA")]);
        let s = run_campaign(&c).unwrap();
        assert!(s.decisions > 0);
        assert_eq!(fs::read(&model_path).unwrap(), before);
    }

    #[test]
    fn startup_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = config(tmp.path(), "magic4");
        assert!(matches!(run_campaign(&c), Err(CampaignError::NoSeeds(_))));

        seeds(&c.input_dir, &[("a", b"AAAA")]);
        c.mode = Mode::Test;
        let e = run_campaign(&c).unwrap_err();
        assert!(e.is_startup() && e.to_string().contains("--model"), "{e}");
        c.model_path = Some(tmp.path().join("missing.bin"));
        assert!(matches!(run_campaign(&c), Err(CampaignError::Config(_))));

        c.mode = Mode::Baseline;
        seeds(&c.input_dir, &[("crash", b"MAG4")]);
        let e = run_campaign(&c).unwrap_err();
        assert!(matches!(e, CampaignError::BadSeed { verdict: Verdict::Crash, .. }), "{e}");

        fs::remove_file(c.input_dir.join("crash")).unwrap();
        // the failed run left files behind
        assert!(matches!(run_campaign(&c), Err(CampaignError::OutputNotEmpty(_))));
    }

    #[test]
    fn stops_after_first_crash() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = config(tmp.path(), "magic4");
        c.duration = Duration::from_secs(3600);
        c.stop_after_crashes = Some(1);
        seeds(&c.input_dir, &[("a", b"MAGx")]);
        let s = run_campaign(&c).unwrap();
        assert_eq!(s.crashes_unique, 1);
        assert!(s.first_crash_us.is_some());
        assert_eq!(fs::read_dir(c.output_dir.join("crashes")).unwrap().count(), 1);
    }
}
