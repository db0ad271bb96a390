//! Policy interface and the scripted reference policies.
//!
//! The scripted policies share one reach-and-grasp controller and differ only
//! in how they pick the point to grasp, which makes their expected metrics
//! derivable by symmetry or geometry.

use rand::Rng as _;

use crate::config::WorkspaceConfig;
use crate::env::{Action7, BlindObs, PrivilegedObs, Vec3};
use crate::placement::{self, PairingSplit, Region, REGION_CENTERS};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsKind {
    Privileged,
    Blind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Privileged(PrivilegedObs),
    Blind(BlindObs),
}

impl Observation {
    pub fn gripper_position(&self) -> Vec3 {
        match self {
            Observation::Privileged(o) => o.gripper_position,
            Observation::Blind(o) => o.gripper_position,
        }
    }

    fn privileged(&self, who: &str) -> &PrivilegedObs {
        match self {
            Observation::Privileged(o) => o,
            Observation::Blind(_) => panic!("{who} requires privileged observations"),
        }
    }

    fn blind(&self, who: &str) -> &BlindObs {
        match self {
            Observation::Blind(o) => o,
            Observation::Privileged(_) => panic!("{who} requires identity-blind observations"),
        }
    }
}

/// A closed-loop controller. `act` must be deterministic given the
/// observation history since the last `reset` and the episode seed.
pub trait Policy {
    fn name(&self) -> String;
    fn observation_kind(&self) -> ObsKind;
    fn reset(&mut self, episode_seed: u64);
    fn act(&mut self, obs: &Observation) -> Action7;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn observation_kind(&self) -> ObsKind {
        (**self).observation_kind()
    }
    fn reset(&mut self, episode_seed: u64) {
        (**self).reset(episode_seed)
    }
    fn act(&mut self, obs: &Observation) -> Action7 {
        (**self).act(obs)
    }
}

/// Gains and thresholds of the shared reach-and-grasp controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachGrasp {
    pub clamp: f64,
    pub table_z: f64,
    pub cruise_z: f64,
    pub grasp_z: f64,
    /// Planar distance at which the gripper starts to descend.
    pub descend_radius: f64,
    /// Planar distance at which the gripper closes.
    pub close_radius: f64,
    pub capture_height: f64,
}

impl ReachGrasp {
    pub fn for_workspace(ws: &WorkspaceConfig) -> Self {
        Self {
            clamp: ws.translation_clamp,
            table_z: ws.table_z,
            cruise_z: ws.gripper_home[2],
            grasp_z: ws.table_z + 0.01,
            descend_radius: 0.03,
            close_radius: 0.02,
            capture_height: ws.capture_height,
        }
    }

    /// Proportional step toward `target`, clamped to the translation limit.
    pub fn toward(&self, gripper: Vec3, target: [f64; 2]) -> Action7 {
        let ex = target[0] - gripper[0];
        let ey = target[1] - gripper[1];
        let planar = ex.hypot(ey);
        let z_goal = if planar <= self.descend_radius { self.grasp_z } else { self.cruise_z };
        let mut d = [ex, ey, z_goal - gripper[2]];
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.clamp {
            d.iter_mut().for_each(|v| *v *= self.clamp / norm);
        }
        let low = (gripper[2] - self.table_z).abs() <= self.capture_height;
        let grip = if planar <= self.close_radius && low { -1.0 } else { 1.0 };
        Action7::new([d[0] as f32, d[1] as f32, d[2] as f32], grip)
    }
}

/// Privileged expert: grasps the instructed object.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    pub controller: ReachGrasp,
}

impl OraclePolicy {
    pub fn new(ws: &WorkspaceConfig) -> Self {
        Self { controller: ReachGrasp::for_workspace(ws) }
    }
}

pub fn oracle_act(controller: &ReachGrasp, obs: &PrivilegedObs) -> Action7 {
    controller.toward(obs.gripper_position, obs.positions[obs.target_slot()])
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Privileged
    }
    fn reset(&mut self, _: u64) {}
    fn act(&mut self, obs: &Observation) -> Action7 {
        oracle_act(&self.controller, obs.privileged("oracle"))
    }
}

/// Identity-blind policy that trusts a memorized object-to-region association:
/// it heads for the region the instructed object occupied during training and
/// grasps whatever observed object sits closest to that region's centroid.
#[derive(Debug, Clone)]
pub struct ShortcutPolicy {
    pub controller: ReachGrasp,
    /// Memorized centroid per object id.
    pub centroids: Vec<[f64; 2]>,
    locked: Option<usize>,
}

impl ShortcutPolicy {
    pub fn new(ws: &WorkspaceConfig, centroids: Vec<[f64; 2]>) -> Self {
        Self { controller: ReachGrasp::for_workspace(ws), centroids, locked: None }
    }

    /// Association learned from the canonical layout.
    pub fn canonical(env: &crate::config::EnvConfig) -> Self {
        let ws = &env.workspace;
        let centroids = env.objects.iter().map(|s| REGION_CENTERS[placement::canonical_region(s.name)]).collect();
        Self::new(ws, centroids)
    }

    /// Association learned from the dominant training pairing of a split.
    pub fn from_split(ws: &WorkspaceConfig, split: &PairingSplit) -> Self {
        let centroids = (0..split.object_count()).map(|o| REGION_CENTERS[split.primary_region(o)]).collect();
        Self::new(ws, centroids)
    }

    pub fn from_regions(ws: &WorkspaceConfig, regions: &[Region]) -> Self {
        Self::new(ws, regions.iter().map(|r| r.center).collect())
    }
}

pub fn shortcut_act(controller: &ReachGrasp, obs: &BlindObs, centroid: [f64; 2], locked: &mut Option<usize>) -> Action7 {
    let slot = *locked.get_or_insert_with(|| nearest_slot(&obs.slots, centroid));
    controller.toward(obs.gripper_position, obs.slots[slot])
}

impl Policy for ShortcutPolicy {
    fn name(&self) -> String {
        "shortcut".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Blind
    }
    fn reset(&mut self, _: u64) {
        self.locked = None;
    }
    fn act(&mut self, obs: &Observation) -> Action7 {
        let obs = obs.blind("shortcut");
        let centroid = self.centroids[obs.instructed_id()];
        shortcut_act(&self.controller, obs, centroid, &mut self.locked)
    }
}

fn nearest_slot(slots: &[[f64; 2]], point: [f64; 2]) -> usize {
    slots
        .iter()
        .enumerate()
        .min_by(|a, b| {
            placement::planar_distance(*a.1, point).total_cmp(&placement::planar_distance(*b.1, point))
        })
        .map(|(i, _)| i)
        .expect("at least one slot")
}

/// Grasps whichever object is currently closest to the gripper.
#[derive(Debug, Clone)]
pub struct NearestPolicy {
    pub controller: ReachGrasp,
}

impl NearestPolicy {
    pub fn new(ws: &WorkspaceConfig) -> Self {
        Self { controller: ReachGrasp::for_workspace(ws) }
    }
}

pub fn nearest_act(controller: &ReachGrasp, obs: &BlindObs) -> Action7 {
    let g = obs.gripper_position;
    let slot = nearest_slot(&obs.slots, [g[0], g[1]]);
    controller.toward(g, obs.slots[slot])
}

impl Policy for NearestPolicy {
    fn name(&self) -> String {
        "nearest".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Blind
    }
    fn reset(&mut self, _: u64) {}
    fn act(&mut self, obs: &Observation) -> Action7 {
        nearest_act(&self.controller, obs.blind("nearest"))
    }
}

/// Uniform random actions; the floor baseline.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    pub clamp: f64,
    rng: rng::Rng,
}

impl RandomPolicy {
    pub fn new(ws: &WorkspaceConfig) -> Self {
        Self { clamp: ws.translation_clamp, rng: rng::stream(0, Domain::Policy) }
    }
}

pub fn random_act(rng: &mut rng::Rng, clamp: f64) -> Action7 {
    let d = loop {
        let v: [f64; 3] = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            break v;
        }
    };
    let grip: f64 = rng.gen_range(-1.0..=1.0);
    Action7::new([(d[0] * clamp) as f32, (d[1] * clamp) as f32, (d[2] * clamp) as f32], grip as f32)
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Blind
    }
    fn reset(&mut self, episode_seed: u64) {
        self.rng = rng::stream(episode_seed, Domain::Policy);
    }
    fn act(&mut self, _: &Observation) -> Action7 {
        random_act(&mut self.rng, self.clamp)
    }
}
