//! Per-episode scenario generation: which objects are present, where they sit,
//! which one is instructed, and the slot shuffle used by identity-blind views.

use rand::seq::{IteratorRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, ObjectSpec};
use crate::env::{self, EnvState, Instruction};
use crate::error::{Error, Result};
use crate::placement::{self, PairingSplit, Phase, PlacementContext, PlacementSample, Regime};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionalTask {
    pub split: PairingSplit,
    pub phase: Phase,
}

/// What kind of episodes to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub regime: Regime,
    #[serde(default = "default_object_count")]
    pub object_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compositional: Option<CompositionalTask>,
}

fn default_object_count() -> usize {
    5
}

impl TaskConfig {
    pub fn new(regime: Regime) -> Self {
        Self { regime, object_count: 5, compositional: None }
    }

    pub fn with_objects(mut self, object_count: usize) -> Self {
        self.object_count = object_count;
        self
    }

    pub fn compositional(split: PairingSplit, phase: Phase) -> Self {
        Self { regime: Regime::SmallJitter, object_count: 5, compositional: Some(CompositionalTask { split, phase }) }
    }

    pub fn phase(&self) -> Option<Phase> {
        self.compositional.as_ref().map(|c| c.phase)
    }

    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if self.object_count == 0 || self.object_count > env.objects.len() {
            return Err(Error::InvalidConfig(format!(
                "object_count {} outside 1..={}",
                self.object_count,
                env.objects.len()
            )));
        }
        if let Some(c) = &self.compositional {
            c.split.validate()?;
            if !self.regime.is_jitter() {
                return Err(Error::InvalidConfig("compositional episodes need a jitter regime".into()));
            }
            if self.object_count != c.split.object_count() {
                return Err(Error::InvalidConfig("compositional split must cover every object".into()));
            }
        }
        Ok(())
    }
}

/// Everything needed to reset the environment for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub seed: u64,
    pub specs: Vec<ObjectSpec>,
    pub placement: PlacementSample,
    pub instruction: Instruction,
    pub permutation: Vec<usize>,
}

impl EpisodeSetup {
    /// Deterministic in `(env, task, seed)`.
    pub fn generate(env: &EnvConfig, task: &TaskConfig, seed: u64) -> Result<Self> {
        task.validate(env)?;
        let n = task.object_count;
        let specs: Vec<ObjectSpec> = if n == env.objects.len() {
            env.objects.clone()
        } else {
            let mut chosen = (0..env.objects.len()).choose_multiple(&mut rng::stream(seed, Domain::Subset), n);
            chosen.sort_unstable();
            chosen.into_iter().map(|i| env.objects[i].clone()).collect()
        };
        let target = (0..n).choose(&mut rng::stream(seed, Domain::Instruction)).expect("n >= 1");
        let instruction = Instruction::for_object(&specs[target]);

        let ctx = PlacementContext::new(&env.workspace, &specs);
        let placement = match &task.compositional {
            Some(c) => placement::sample_compositional(&ctx, &c.split, c.phase, task.regime, target, seed)?,
            None => placement::sample_regime(&ctx, task.regime, seed)?,
        };

        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut rng::stream(seed, Domain::Permutation));
        Ok(Self { seed, specs, placement, instruction, permutation })
    }

    pub fn reset(&self, env: &EnvConfig) -> Result<EnvState> {
        env::reset(&env.workspace, &self.specs, &self.placement, &self.instruction, self.seed)
    }

    /// Scene index of the instructed object.
    pub fn target_index(&self) -> usize {
        self.specs.iter().position(|s| s.object_id == self.instruction.target_id).expect("instructed object present")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let env = EnvConfig::default();
        let task = TaskConfig::new(Regime::FullRandom);
        let a = EpisodeSetup::generate(&env, &task, 11).unwrap();
        let b = EpisodeSetup::generate(&env, &task, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reset(&env).unwrap(), b.reset(&env).unwrap());
        let c = EpisodeSetup::generate(&env, &task, 12).unwrap();
        assert_ne!(a.placement.positions, c.placement.positions);
    }

    #[test]
    fn subsets_and_instructions() {
        let env = EnvConfig::default();
        let task = TaskConfig::new(Regime::FullRandom).with_objects(2);
        let mut targets = std::collections::HashSet::new();
        for seed in 0..200 {
            let s = EpisodeSetup::generate(&env, &task, seed).unwrap();
            assert_eq!(s.specs.len(), 2);
            assert!(s.specs[0].object_id < s.specs[1].object_id);
            targets.insert(s.instruction.target_id);
            let mut p = s.permutation.clone();
            p.sort_unstable();
            assert_eq!(p, [0, 1]);
        }
        assert_eq!(targets.len(), 5);
    }

    #[test]
    fn compositional_eval_places_target_in_held_out_region() {
        let env = EnvConfig::default();
        let split = PairingSplit::circulant();
        let task = TaskConfig::compositional(split.clone(), Phase::Eval);
        for seed in 0..100 {
            let s = EpisodeSetup::generate(&env, &task, seed).unwrap();
            let t = s.target_index();
            let region = s.placement.region_assignment.as_ref().unwrap()[t];
            assert!(split.eval_regions[t].contains(&region));
        }
    }

    #[test]
    fn rejects_bad_counts() {
        let env = EnvConfig::default();
        assert!(EpisodeSetup::generate(&env, &TaskConfig::new(Regime::FullRandom).with_objects(0), 0).is_err());
        assert!(EpisodeSetup::generate(&env, &TaskConfig::new(Regime::FullRandom).with_objects(6), 0).is_err());
    }
}
