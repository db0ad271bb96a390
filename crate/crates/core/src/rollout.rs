//! Running policies in the environment and collecting scored outcomes.

use crate::config::EnvConfig;
use crate::env::{Action7, EnvState};
use crate::error::Result;
use crate::metrics::{self, EpisodeOutcome, GroupKey, OutcomeFlags};
use crate::policies::{ObsKind, Observation, Policy};
use crate::rng;
use crate::task::{EpisodeSetup, TaskConfig};

/// One recorded step: the proprioceptive state before the action, and the action.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub state15: [f32; 15],
    pub action: Action7,
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub index: u64,
    pub setup: EpisodeSetup,
    pub frames: Vec<Frame>,
    pub final_state: EnvState,
    pub flags: OutcomeFlags,
}

pub fn observe(state: &EnvState, setup: &EpisodeSetup, kind: ObsKind) -> Result<Observation> {
    Ok(match kind {
        ObsKind::Privileged => Observation::Privileged(state.observe_privileged()),
        ObsKind::Blind => Observation::Blind(state.observe_identity_blind(&setup.permutation)?),
    })
}

pub fn run_episode<P: Policy + ?Sized>(
    env: &EnvConfig,
    setup: &EpisodeSetup,
    index: u64,
    policy: &mut P,
) -> Result<EpisodeRun> {
    let mut state = setup.reset(env)?;
    policy.reset(setup.seed);
    let kind = policy.observation_kind();
    let mut frames = Vec::with_capacity(env.workspace.horizon as usize);
    while !state.is_done() {
        let obs = observe(&state, setup, kind)?;
        let action = policy.act(&obs);
        frames.push(Frame { state15: state.encode_state15(), action });
        state.step(&action)?;
    }
    let flags = metrics::episode_outcome(&state)?;
    Ok(EpisodeRun { index, setup: setup.clone(), frames, final_state: state, flags })
}

/// Re-executes recorded actions from the episode's seed.
pub fn replay(env: &EnvConfig, task: &TaskConfig, seed: u64, actions: &[Action7]) -> Result<(EpisodeSetup, Vec<EnvState>)> {
    let setup = EpisodeSetup::generate(env, task, seed)?;
    let mut state = setup.reset(env)?;
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(state.clone());
    for a in actions {
        state.step(a)?;
        states.push(state.clone());
    }
    Ok((setup, states))
}

/// Evaluation protocol: episodes `start..start+n` of `base_seed` on `task`.
#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub env: EnvConfig,
    pub task: TaskConfig,
    pub base_seed: u64,
    pub start_index: u64,
    pub episodes: u64,
    pub dataset_size: Option<u64>,
    pub workers: usize,
}

impl EvalProtocol {
    pub fn new(env: EnvConfig, task: TaskConfig, base_seed: u64, episodes: u64) -> Self {
        Self { env, task, base_seed, start_index: 0, episodes, dataset_size: None, workers: 1 }
    }

    pub fn key(&self, policy: &str) -> GroupKey {
        GroupKey {
            regime: self.task.regime,
            policy: policy.to_string(),
            dataset_size: self.dataset_size,
            object_count: self.task.object_count,
            phase: self.task.phase(),
        }
    }

    fn run_range<P: Policy + ?Sized>(&self, policy: &mut P, range: std::ops::Range<u64>) -> Result<Vec<EpisodeOutcome>> {
        let key = self.key(&policy.name());
        range
            .map(|index| {
                let seed = rng::episode_seed(self.base_seed, index);
                let setup = EpisodeSetup::generate(&self.env, &self.task, seed)?;
                let run = run_episode(&self.env, &setup, index, policy)?;
                Ok(EpisodeOutcome {
                    episode_index: index,
                    episode_seed: seed,
                    instruction: setup.instruction.text.clone(),
                    success: run.flags.success,
                    grasp_any: run.flags.grasp_any,
                    reach: run.flags.reach,
                    key: key.clone(),
                })
            })
            .collect()
    }

    /// Sequential evaluation with one policy instance.
    pub fn evaluate<P: Policy + ?Sized>(&self, policy: &mut P) -> Result<Vec<EpisodeOutcome>> {
        self.run_range(policy, self.start_index..self.start_index + self.episodes)
    }

    /// Parallel evaluation; each worker builds its own policy. Output order and
    /// content match [`EvalProtocol::evaluate`] for any worker count.
    pub fn evaluate_parallel<P, F>(&self, make_policy: F) -> Result<Vec<EpisodeOutcome>>
    where
        P: Policy,
        F: Fn() -> P + Sync,
    {
        let workers = self.workers.max(1) as u64;
        let per = self.episodes.div_ceil(workers);
        let chunks: Vec<std::ops::Range<u64>> = (0..workers)
            .map(|w| {
                let lo = self.start_index + (w * per).min(self.episodes);
                let hi = self.start_index + ((w + 1) * per).min(self.episodes);
                lo..hi
            })
            .filter(|r| !r.is_empty())
            .collect();
        let results: Vec<Result<Vec<EpisodeOutcome>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|range| {
                    let make = &make_policy;
                    scope.spawn(move || {
                        let mut p = make();
                        self.run_range(&mut p, range)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(self.episodes as usize);
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}
