//! Energy scheduling.
//!
//! Baseline mode gives each queue entry `performance_score` havoc
//! iterations (after the deterministic stage, unless disabled). The bandit
//! modes instead, with probability `1 - fuzzing_prob`, pick a 128-byte
//! window of the entry, let the policy choose an energy multiplier for it,
//! and confine havoc to that window. In train mode the fraction of mutants
//! that were enqueued becomes the reward for one policy update.

use rand::Rng;
use thiserror::Error;

use crate::corpus::{CorpusError, QueueAverages, TestCase};
use crate::executor::ExecError;
use crate::mutators::{deterministic_stage, havoc_step, splice, Window, WINDOW_LEN};
use crate::policy::{argmax, PolicyError, PolicyModel, StateMatrix, NUM_ACTIONS};

pub const MULTIPLIERS: [f64; NUM_ACTIONS] = [0.50, 0.75, 1.0, 1.25, 1.50];
pub const DEFAULT_FUZZING_PROB: f64 = 0.4;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const MIN_ENERGY: u32 = 16;
pub const MAX_ENERGY: u32 = 16384;

/// One in this many whole-case havoc iterations starts from a splice.
pub const SPLICE_ONE_IN: u32 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Baseline,
    Train,
    Test,
}

impl Mode {
    pub fn is_bandit(self) -> bool {
        self != Mode::Baseline
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub mode: Mode,
    pub fuzzing_prob: f64,
    pub epsilon: f64,
    /// Skip the deterministic stage (baseline mode only; the bandit modes
    /// never run it).
    pub skip_deterministic: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            fuzzing_prob: DEFAULT_FUZZING_PROB,
            epsilon: DEFAULT_EPSILON,
            skip_deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BanditState {
    pub bytes: [u8; WINDOW_LEN],
    pub source_id: usize,
    pub offset: usize,
}

impl BanditState {
    pub fn matrix(&self) -> StateMatrix {
        StateMatrix::encode(&self.bytes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyDecision {
    pub state: BanditState,
    pub action_index: usize,
    pub base_energy: u32,
    pub final_energy: u32,
    pub interesting: u64,
    pub total: u64,
    pub reward: f64,
    pub explored: bool,
}

impl EnergyDecision {
    pub fn multiplier(&self) -> f64 {
        MULTIPLIERS[self.action_index]
    }
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("writing campaign output failed: {0}")]
    Output(#[from] std::io::Error),
}

/// What the host reports about one executed mutant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Feedback {
    /// The mutant was added to the queue.
    pub interesting: bool,
}

/// The campaign side of `fuzz_one`: runs mutants and owns the queue.
pub trait FuzzHost {
    fn execute(&mut self, input: &[u8], parent: &TestCase) -> Result<Feedback, FuzzError>;

    fn queue_averages(&self) -> QueueAverages;

    /// Data of a random queue entry other than `exclude`, if there is one.
    fn splice_partner(&mut self, exclude: usize, rng: &mut dyn rand::RngCore) -> Option<Vec<u8>>;

    /// True once the campaign should stop; `fuzz_one` then returns early.
    fn should_stop(&self) -> bool {
        false
    }
}

fn speed_factor(exec_us: f64, avg: f64) -> f64 {
    if exec_us <= avg / 4.0 {
        3.0
    } else if exec_us <= avg / 2.0 {
        2.0
    } else if exec_us <= avg {
        1.5
    } else if exec_us <= 2.0 * avg {
        1.0
    } else if exec_us <= 5.0 * avg {
        0.5
    } else {
        0.1
    }
}

fn bitmap_factor(size: f64, avg: f64) -> f64 {
    if size >= 2.0 * avg {
        3.0
    } else if size >= 1.5 * avg {
        2.0
    } else if size >= avg {
        1.5
    } else {
        1.0
    }
}

fn depth_factor(depth: u32) -> f64 {
    match depth {
        0..=3 => 1.0,
        4..=7 => 2.0,
        8..=13 => 3.0,
        14..=25 => 4.0,
        _ => 5.0,
    }
}

/// Havoc iterations for one pass over `tc`, from its speed, coverage and
/// depth relative to the queue averages.
pub fn performance_score(tc: &TestCase, avg: &QueueAverages) -> u32 {
    assert!(avg.exec_us > 0.0 && avg.bitmap_size >= 0.0, "queue averages not available");
    let score = 100.0
        * speed_factor(tc.exec_us as f64, avg.exec_us)
        * bitmap_factor(tc.bitmap_size as f64, avg.bitmap_size)
        * depth_factor(tc.depth);
    (score.round() as u32).clamp(MIN_ENERGY, MAX_ENERGY)
}

/// The window of `data` starting at `offset`, zero-padded to 128 bytes.
pub fn extract_state_at(tc: &TestCase, offset: usize) -> BanditState {
    let mut bytes = [0u8; WINDOW_LEN];
    let src = tc.data.get(offset..).unwrap_or(&[]);
    let n = src.len().min(WINDOW_LEN);
    bytes[..n].copy_from_slice(&src[..n]);
    BanditState { bytes, source_id: tc.id, offset }
}

/// A window at an offset uniform over the case's bytes. An empty case gives
/// an all-zero state at offset 0 and draws nothing from `rng`.
pub fn extract_state<R: Rng + ?Sized>(tc: &TestCase, rng: &mut R) -> BanditState {
    let offset = if tc.data.is_empty() { 0 } else { rng.gen_range(0..tc.data.len()) };
    extract_state_at(tc, offset)
}

/// Epsilon-greedy: a uniform action with probability `epsilon`, else the
/// policy's most probable action. The model is only queried when exploiting.
pub fn select_action<R: Rng + ?Sized>(
    state: &BanditState,
    model: &PolicyModel,
    epsilon: f64,
    rng: &mut R,
) -> Result<(usize, bool), PolicyError> {
    if rng.gen::<f64>() < epsilon {
        return Ok((rng.gen_range(0..NUM_ACTIONS), true));
    }
    let probs = model.probabilities(&state.matrix())?;
    Ok((argmax(&probs), false))
}

/// `max(1, round(base * multiplier))`, rounding halves away from zero.
pub fn final_energy(base_energy: u32, action_index: usize) -> u32 {
    ((base_energy as f64 * MULTIPLIERS[action_index]).round() as u32).max(1)
}

pub fn reward(interesting: u64, total: u64) -> f64 {
    assert!(total >= 1 && interesting <= total, "bad reward counters {interesting}/{total}");
    interesting as f64 / total as f64
}

/// Fuzzes one queue entry for one pass. Returns the bandit decision when
/// the windowed branch was taken.
///
/// `model` is required in the bandit modes and ignored in baseline mode.
pub fn fuzz_one<H, R>(
    tc: &TestCase,
    config: &SchedulerConfig,
    model: Option<&mut PolicyModel>,
    host: &mut H,
    rng: &mut R,
) -> Result<Option<EnergyDecision>, FuzzError>
where
    H: FuzzHost + ?Sized,
    R: Rng,
{
    let base_energy = performance_score(tc, &host.queue_averages());

    if config.mode == Mode::Baseline {
        if !config.skip_deterministic && !tc.was_fuzzed {
            let stage = deterministic_stage(&tc.data, |mutant| {
                if host.should_stop() {
                    return Err(None);
                }
                host.execute(mutant, tc).map(|_| ()).map_err(Some)
            });
            match stage {
                Ok(()) => {}
                Err(None) => return Ok(None),
                Err(Some(e)) => return Err(e),
            }
        }
        whole_havoc(tc, base_energy, host, rng)?;
        return Ok(None);
    }

    if rng.gen::<f64>() < config.fuzzing_prob {
        whole_havoc(tc, base_energy, host, rng)?;
        return Ok(None);
    }

    let model = model.expect("bandit mode without a policy model");
    let state = extract_state(tc, rng);
    let (action_index, explored) = select_action(&state, model, config.epsilon, rng)?;
    let final_energy = final_energy(base_energy, action_index);

    let window = Window::clamped(state.offset, tc.data.len());
    let (mut interesting, mut total) = (0u64, 0u64);
    for _ in 0..final_energy {
        if host.should_stop() {
            break;
        }
        let mut mutant = tc.data.clone();
        havoc_step(&mut mutant, Some(window), rng);
        let fb = host.execute(&mutant, tc)?;
        total += 1;
        interesting += fb.interesting as u64;
    }

    let mut decision = EnergyDecision {
        state,
        action_index,
        base_energy,
        final_energy,
        interesting: 0,
        total: 0,
        reward: 0.0,
        explored,
    };
    // An interrupted pass has no meaningful reward.
    if config.mode == Mode::Train && total > 0 {
        decision.interesting = interesting;
        decision.total = total;
        decision.reward = reward(interesting, total);
        match model.update(&decision.state.matrix(), action_index, decision.reward) {
            Ok(_) => {}
            Err(e @ PolicyError::NonFiniteGradient { .. }) => log::warn!("{e}"),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(decision))
}

fn whole_havoc<H, R>(tc: &TestCase, energy: u32, host: &mut H, rng: &mut R) -> Result<(), FuzzError>
where
    H: FuzzHost + ?Sized,
    R: Rng,
{
    for _ in 0..energy {
        if host.should_stop() {
            break;
        }
        let mut mutant = None;
        if rng.gen_ratio(1, SPLICE_ONE_IN) {
            if let Some(partner) = host.splice_partner(tc.id, rng) {
                mutant = splice(&tc.data, &partner, rng);
            }
        }
        let mut mutant = mutant.unwrap_or_else(|| tc.data.clone());
        havoc_step(&mut mutant, None, rng);
        host.execute(&mutant, tc)?;
    }
    Ok(())
}
