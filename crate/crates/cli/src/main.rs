//! `fuzz`: runs one fuzzing campaign.
//!
//! Exit status: 0 on normal completion, 1 if the campaign could not start,
//! 2 if it failed while running.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use bfz_core::campaign::{run_campaign, CampaignConfig, CampaignError, CampaignSummary};
use bfz_core::executor::{bundled_targets, DEFAULT_TIMEOUT_MS};
use bfz_core::policy::DEFAULT_LEARNING_RATE;
use bfz_core::scheduler::{Mode, DEFAULT_EPSILON, DEFAULT_FUZZING_PROB};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Baseline,
    Train,
    Test,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Train => Mode::Train,
            ModeArg::Test => Mode::Test,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fuzz", version, about = "Coverage-guided fuzzer with a learned energy schedule")]
struct Cli {
    /// Directory of seed inputs
    #[arg(short = 'i', value_name = "DIR")]
    input_dir: PathBuf,

    /// Output directory (must be absent or empty)
    #[arg(short = 'o', value_name = "DIR")]
    output_dir: PathBuf,

    /// Bundled target name or path to an instrumented executable
    #[arg(short = 't', value_name = "TARGET", long_help = target_help())]
    target: String,

    #[arg(long, value_enum, default_value = "baseline")]
    mode: ModeArg,

    /// Skip the deterministic stage (implied by train and test modes)
    #[arg(short = 'd')]
    skip_deterministic: bool,

    /// Campaign length in seconds
    #[arg(long, value_name = "SECS")]
    duration: u64,

    /// Probability of fuzzing the whole test case instead of a bandit window
    #[arg(long, default_value_t = DEFAULT_FUZZING_PROB)]
    fuzzing_prob: f64,

    /// Exploration rate of the bandit
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,

    /// Policy learning rate
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,

    /// Policy model file (train: loaded or created; test: required)
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,

    /// Per-execution timeout
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,

    /// Seed for all random choices
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Measure time in target steps instead of wall time (bundled targets
    /// only); the whole run then depends only on the arguments
    #[arg(long)]
    virtual_clock: bool,

    /// Stop once this many unique crashes were found
    #[arg(long, value_name = "N")]
    stop_after_crashes: Option<u64>,
}

fn target_help() -> String {
    let mut s = String::from("Bundled target name or path to an instrumented executable.\n\nBundled targets:");
    for t in bundled_targets() {
        s.push_str(&format!("\n  {:<10} {}", bfz_core::executor::TargetAdapter::name(&t), t.description()));
    }
    s
}

impl Cli {
    fn config(&self) -> CampaignConfig {
        let mut c = CampaignConfig::new(&self.input_dir, &self.output_dir, &self.target);
        c.mode = self.mode.into();
        c.skip_deterministic = self.skip_deterministic;
        c.duration = Duration::from_secs(self.duration);
        c.fuzzing_prob = self.fuzzing_prob;
        c.epsilon = self.epsilon;
        c.learning_rate = self.lr;
        c.model_path = self.model.clone();
        c.timeout_ms = self.timeout_ms;
        c.rng_seed = self.seed;
        c.virtual_clock = self.virtual_clock;
        c.stop_after_crashes = self.stop_after_crashes;
        c
    }
}

fn run(cli: &Cli) -> anyhow::Result<CampaignSummary> {
    let config = cli.config();
    log::info!("fuzzing {} in {:?} mode for {}s", config.target, config.mode, cli.duration);
    run_campaign(&config).with_context(|| format!("campaign in {} failed", config.output_dir.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(s) => {
            println!(
                "execs {} | paths {} | crashes {} | hangs {} | map bytes {}",
                s.execs, s.paths_total, s.crashes_unique, s.hangs_unique, s.virgin_bytes_covered
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e:#}");
            let startup = e.downcast_ref::<CampaignError>().map_or(true, CampaignError::is_startup);
            ExitCode::from(if startup { 1 } else { 2 })
        }
    }
}
