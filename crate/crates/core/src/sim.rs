//! The round engine.
//!
//! Each round samples a participant set, a stale model version and a local
//! epoch count per participant, runs the local computations, averages the
//! normalized deltas and applies one server step. Server-centric baselines
//! are the degenerate settings `tau = 0`, fixed `K` and exact-`m` sampling.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::client::{cc_local, FixedSteps, LocalConfig, LocalUpdate, StepPolicy, UniformSteps};
use crate::error::{Error, Result};
use crate::linalg::ParamVector;
use crate::metrics::{MetricsRecorder, MetricsRow};
use crate::objectives::Objective;
use crate::rng::{Stream, Streams};
use crate::server::{aggregate_over, init_state, ServerHyper, ServerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Participation {
    /// Uniform subset of exactly `m` clients.
    #[default]
    ExactM,
    /// Each client independently with probability `m/n`; empty draws are redrawn.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    /// Buffer size `m`.
    pub m: usize,
    /// Number of rounds `T`.
    pub rounds: usize,
    /// Maximum delay `τ`.
    pub tau: usize,
    pub hyper: ServerHyper,
    pub local: LocalConfig,
    pub participation: Participation,
    pub seed: u64,
    /// Pin every client to exactly `K` local epochs.
    pub fixed_k: bool,
    /// Clients that never participate.
    pub excluded: BTreeSet<usize>,
    /// Run the clients of a round on the rayon pool.
    pub parallel: bool,
    /// Starting model; zeros when absent.
    pub x0: Option<ParamVector>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.n {
            return Err(Error::invalid(format!(
                "need 1 <= m <= n, got m={} n={}",
                self.m, self.n
            )));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        self.hyper.validate()?;
        self.local.validate()?;
        forced_participation_mask(self, &self.excluded).map(|_| ())
    }

    fn policy(&self) -> &'static dyn StepPolicy {
        if self.fixed_k {
            &FixedSteps
        } else {
            &UniformSteps
        }
    }
}

/// Clients eligible for sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipationMask {
    allowed: Vec<usize>,
}

impl ParticipationMask {
    pub fn all(n: usize) -> Self {
        Self {
            allowed: (0..n).collect(),
        }
    }

    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }
}

/// Restricts sampling to clients outside `excluded`.
pub fn forced_participation_mask(config: &SimConfig, excluded: &BTreeSet<usize>) -> Result<ParticipationMask> {
    if let Some(&bad) = excluded.iter().find(|&&c| c >= config.n) {
        return Err(Error::InvalidClient {
            client: bad,
            n: config.n,
        });
    }
    let allowed: Vec<usize> = (0..config.n).filter(|c| !excluded.contains(c)).collect();
    if allowed.len() < config.m {
        return Err(Error::invalid(format!(
            "only {} clients remain after exclusion, need m = {}",
            allowed.len(),
            config.m
        )));
    }
    Ok(ParticipationMask { allowed })
}

/// Participant ids in ascending order.
pub fn sample_participants(n: usize, m: usize, mode: Participation, rng: &mut Stream) -> Result<Vec<usize>> {
    sample_from(&ParticipationMask::all(n), m, mode, rng)
}

pub fn sample_from(mask: &ParticipationMask, m: usize, mode: Participation, rng: &mut Stream) -> Result<Vec<usize>> {
    let pool = &mask.allowed;
    if m == 0 || m > pool.len() {
        return Err(Error::invalid(format!(
            "cannot sample m = {m} from {} clients",
            pool.len()
        )));
    }
    let mut picked = match mode {
        Participation::ExactM => index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect(),
        Participation::Bernoulli => {
            let p = m as f64 / pool.len() as f64;
            loop {
                let s: Vec<usize> = pool.iter().copied().filter(|_| rng.random::<f64>() < p).collect();
                if !s.is_empty() {
                    break s;
                }
            }
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform on `0..=min(t, tau)`.
pub fn sample_delay(t: usize, tau: usize, rng: &mut Stream) -> usize {
    rng.random_range(0..=t.min(tau))
}

/// The last `tau + 1` global models, oldest first.
#[derive(Debug, Clone)]
pub struct ModelHistory {
    capacity: usize,
    entries: VecDeque<(usize, ParamVector)>,
}

impl ModelHistory {
    pub fn new(tau: usize, x0: ParamVector) -> Self {
        let mut entries = VecDeque::with_capacity(tau + 1);
        entries.push_back((0, x0));
        Self {
            capacity: tau + 1,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest_version(&self) -> usize {
        self.entries.back().map_or(0, |e| e.0)
    }

    pub fn versions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Appends the model for the next version, evicting the oldest if full.
    pub fn push(&mut self, x: ParamVector) {
        let version = self.entries.back().map_or(0, |e| e.0 + 1);
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((version, x));
    }

    pub fn get(&self, version: usize) -> Option<&ParamVector> {
        let first = self.entries.front()?.0;
        self.entries.get(version.checked_sub(first)?).map(|e| &e.1)
    }
}

/// What happens in one round, drawn before any client runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSchedule {
    pub round: usize,
    /// Ascending client ids.
    pub participants: Vec<usize>,
    /// `τ_{t,i}` per participant.
    pub delays: Vec<usize>,
    /// `K_{t,i}` in local epochs, within `[1, K·R]`.
    pub epochs: Vec<usize>,
    /// SGD steps actually run: epochs times the client's steps per epoch.
    pub steps: Vec<usize>,
}

fn draw_schedule<F: Objective + ?Sized>(
    config: &SimConfig,
    family: &F,
    mask: &ParticipationMask,
    policy: &dyn StepPolicy,
    round: usize,
    streams: &Streams,
) -> Result<RoundSchedule> {
    let mut rng = streams.scheduler(round);
    let participants = sample_from(mask, config.m, config.participation, &mut rng)?;
    let mut delays = Vec::with_capacity(participants.len());
    let mut epochs = Vec::with_capacity(participants.len());
    let mut steps = Vec::with_capacity(participants.len());
    for &c in &participants {
        delays.push(sample_delay(round, config.tau, &mut rng));
        let k = policy.local_epochs(c, round, &config.local, &mut rng);
        epochs.push(k);
        steps.push(k * family.steps_per_epoch(c, config.local.batch));
    }
    Ok(RoundSchedule {
        round,
        participants,
        delays,
        epochs,
        steps,
    })
}

/// Passed to observers after each round.
#[derive(Debug)]
pub struct RoundEvent<'a> {
    pub schedule: &'a RoundSchedule,
    pub updates: &'a [LocalUpdate],
    /// Row for the model the round started from.
    pub row: &'a MetricsRow,
    pub before: &'a ServerState,
    pub after: &'a ServerState,
}

pub trait RoundObserver {
    fn on_round(&mut self, event: &RoundEvent<'_>);
}

impl<T: FnMut(&RoundEvent<'_>)> RoundObserver for T {
    fn on_round(&mut self, event: &RoundEvent<'_>) {
        self(event)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// `(1/T) Σ_t ‖∇f(x_t)‖²`.
    pub avg_grad_norm_sq: f64,
    pub final_train_loss: f64,
    /// `‖∇f(x_T)‖²` at the returned model.
    pub final_grad_norm_sq: f64,
    /// Round mean of the per-round mean step count.
    pub phi1: f64,
    /// Round mean of the per-round mean squared step count.
    pub phi2: f64,
    /// Round mean of `(1/m) Σ 1/K`.
    pub phi3: f64,
    /// Largest stochastic gradient norm seen by any client.
    pub max_grad_norm: f64,
    pub max_delay: usize,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub final_state: ServerState,
    pub summary: RunSummary,
}

pub fn run<F: Objective + ?Sized>(config: &SimConfig, family: &F) -> Result<RunResult> {
    run_with(config, family, config.policy(), &mut |_: &RoundEvent<'_>| {})
}

pub fn run_observed<F: Objective + ?Sized>(
    config: &SimConfig,
    family: &F,
    observer: &mut dyn RoundObserver,
) -> Result<RunResult> {
    run_with(config, family, config.policy(), observer)
}

/// Full training loop with an explicit epoch policy. Rows describe `x_t`
/// before round `t`'s update; the final model is in `final_state`.
pub fn run_with<F: Objective + ?Sized>(
    config: &SimConfig,
    family: &F,
    policy: &dyn StepPolicy,
    observer: &mut dyn RoundObserver,
) -> Result<RunResult> {
    config.validate()?;
    if family.num_clients() != config.n {
        return Err(Error::invalid(format!(
            "objective has {} clients, config says n = {}",
            family.num_clients(),
            config.n
        )));
    }
    let x0 = match &config.x0 {
        Some(x) if x.len() != family.dim() => {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: family.dim(),
            })
        }
        Some(x) => x.clone(),
        None => ParamVector::zeros(family.dim()),
    };
    let mask = forced_participation_mask(config, &config.excluded)?;
    let streams = Streams::new(config.seed);
    let mut state = init_state(x0.clone(), &config.hyper)?;
    let mut history = ModelHistory::new(config.tau, x0);
    let mut recorder = MetricsRecorder::new();
    let (mut phi1, mut phi2, mut phi3) = (0.0, 0.0, 0.0);
    let mut max_grad_norm: f64 = 0.0;
    let mut max_delay = 0;

    for t in 0..config.rounds {
        let schedule = draw_schedule(config, family, &mask, policy, t, &streams)?;
        let work = |j: usize| -> Result<LocalUpdate> {
            let client = schedule.participants[j];
            let version = t - schedule.delays[j];
            let x_base = history.get(version).expect("delay is within the history window");
            let mut rng = streams.client(client, t);
            cc_local(
                family,
                client,
                x_base,
                version,
                schedule.steps[j],
                config.local.eta_l,
                config.local.batch,
                &mut rng,
            )
            .map_err(|e| Error::Client {
                round: t,
                client,
                source: Box::new(e),
            })
        };
        let jobs = 0..schedule.participants.len();
        let updates: Vec<LocalUpdate> = if config.parallel {
            jobs.into_par_iter().map(work).collect::<Result<_>>()?
        } else {
            jobs.map(work).collect::<Result<_>>()?
        };

        let row = recorder.record(&state, family, &schedule)?.clone();
        let wrap = |e: Error| Error::Round {
            round: t,
            source: Box::new(e),
        };
        let delta = aggregate_over(&updates, config.m).map_err(wrap)?;
        let before = state.clone();
        state.step(&delta, &config.hyper).map_err(wrap)?;
        history.push(state.x.clone());

        let inv_k: Vec<f64> = schedule.steps.iter().map(|&k| k as f64).collect();
        let cnt = inv_k.len() as f64;
        phi1 += inv_k.iter().sum::<f64>() / cnt;
        phi2 += inv_k.iter().map(|k| k * k).sum::<f64>() / cnt;
        phi3 += inv_k.iter().map(|k| 1.0 / k).sum::<f64>() / config.m as f64;
        max_delay = max_delay.max(schedule.delays.iter().copied().max().unwrap_or(0));
        max_grad_norm = updates.iter().map(|u| u.max_grad_norm).fold(max_grad_norm, f64::max);

        observer.on_round(&RoundEvent {
            schedule: &schedule,
            updates: &updates,
            row: &row,
            before: &before,
            after: &state,
        });
    }

    let rows = recorder.into_rows();
    let t = config.rounds as f64;
    let final_grad = crate::linalg::norm_sq(&family.global_grad(&state.x)?);
    let summary = RunSummary {
        avg_grad_norm_sq: rows.last().map_or(0.0, |r| r.running_avg_grad_norm_sq),
        final_train_loss: family.global_value(&state.x)?,
        final_grad_norm_sq: final_grad,
        phi1: phi1 / t,
        phi2: phi2 / t,
        phi3: phi3 / t,
        max_grad_norm,
        max_delay,
    };
    Ok(RunResult {
        rows,
        final_state: state,
        summary,
    })
}
