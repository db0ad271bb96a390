//! Behavior cloning with action chunking and execution horizons.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::{EnvConfig, WorkspaceConfig};
use crate::env::{Action7, BlindObs, PrivilegedObs, Vec3};
use crate::error::{Error, Result};
use crate::metrics::EpisodeOutcome;
use crate::nn::{self, AdamW, Mlp};
use crate::policies::{ObsKind, Observation, Policy};
use crate::rng::{self, Domain};
use crate::rollout::{self, EvalProtocol};
use crate::task::TaskConfig;

pub const MAX_OBJECTS: usize = 5;
pub const SLOT_FEATURES: usize = 5;
pub const OBS_DIM: usize = MAX_OBJECTS * SLOT_FEATURES + 5 + MAX_OBJECTS;
pub const ACTION_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// Object slots in a per-episode shuffled order with no identity labels.
    IdentityBlind,
    /// Instructed object first, then the others by id.
    Grounded,
}

impl ObsMode {
    pub fn name(self) -> &'static str {
        match self {
            ObsMode::IdentityBlind => "identity_blind",
            ObsMode::Grounded => "grounded",
        }
    }

    pub fn obs_kind(self) -> ObsKind {
        match self {
            ObsMode::IdentityBlind => ObsKind::Blind,
            ObsMode::Grounded => ObsKind::Privileged,
        }
    }
}

impl fmt::Display for ObsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "identity_blind" | "blind" => Ok(ObsMode::IdentityBlind),
            "grounded" => Ok(ObsMode::Grounded),
            _ => Err(Error::InvalidConfig(format!("unknown observation mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BCConfig {
    pub chunk_size: usize,
    pub execution_horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub obs_mode: ObsMode,
    pub seed: u64,
}

impl Default for BCConfig {
    fn default() -> Self {
        Self {
            chunk_size: 8,
            execution_horizon: 4,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            hidden: 256,
            obs_mode: ObsMode::IdentityBlind,
            seed: 0,
        }
    }
}

impl BCConfig {
    pub const CHUNK_SIZES: [usize; 3] = [8, 16, 32];
    pub const EXECUTION_HORIZONS: [usize; 4] = [1, 4, 8, 16];
    pub const BATCH_SIZES: [usize; 2] = [64, 128];

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 || self.execution_horizon == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("chunk, horizon, batch and hidden sizes must be positive".into()));
        }
        if self.execution_horizon > self.chunk_size {
            return Err(Error::InvalidConfig(format!(
                "execution horizon {} exceeds chunk size {}",
                self.execution_horizon, self.chunk_size
            )));
        }
        Ok(())
    }

    /// Every valid combination of the standard grid.
    pub fn grid(base: &BCConfig) -> Vec<BCConfig> {
        let mut out = Vec::new();
        for &chunk_size in &Self::CHUNK_SIZES {
            for &execution_horizon in Self::EXECUTION_HORIZONS.iter().filter(|&&h| h <= chunk_size) {
                for &batch_size in &Self::BATCH_SIZES {
                    out.push(BCConfig { chunk_size, execution_horizon, batch_size, ..base.clone() });
                }
            }
        }
        out
    }
}

/// A demonstration: the episode is regenerated from `(task, seed)` and the
/// recorded actions are replayed to recover every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub task: TaskConfig,
    pub seed: u64,
    pub actions: Vec<Action7>,
}

/// Observation features shared by training and deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcEncoder {
    pub mode: ObsMode,
    pub table_z: f64,
    pub max_width: f64,
    pub translation_clamp: f64,
}

impl BcEncoder {
    pub fn new(mode: ObsMode, ws: &WorkspaceConfig) -> Self {
        Self { mode, table_z: ws.table_z, max_width: ws.max_width, translation_clamp: ws.translation_clamp }
    }

    fn fill(
        &self,
        slots: impl Iterator<Item = [f64; 2]>,
        gripper: Vec3,
        width: f64,
        step: u32,
        horizon: u32,
        instructed_id: usize,
    ) -> [f32; OBS_DIM] {
        let mut x = [0.0f32; OBS_DIM];
        for (k, p) in slots.take(MAX_OBJECTS).enumerate() {
            let o = k * SLOT_FEATURES;
            x[o] = (5.0 * p[0]) as f32;
            x[o + 1] = (5.0 * p[1]) as f32;
            x[o + 2] = (10.0 * (p[0] - gripper[0])) as f32;
            x[o + 3] = (10.0 * (p[1] - gripper[1])) as f32;
            x[o + 4] = 1.0;
        }
        let o = MAX_OBJECTS * SLOT_FEATURES;
        x[o] = (5.0 * gripper[0]) as f32;
        x[o + 1] = (5.0 * gripper[1]) as f32;
        x[o + 2] = (10.0 * (gripper[2] - self.table_z)) as f32;
        x[o + 3] = (width / self.max_width) as f32;
        x[o + 4] = (f64::from(step) / f64::from(horizon.max(1))) as f32;
        if instructed_id < MAX_OBJECTS {
            x[o + 5 + instructed_id] = 1.0;
        }
        x
    }

    pub fn encode_blind(&self, obs: &BlindObs) -> [f32; OBS_DIM] {
        self.fill(obs.slots.iter().copied(), obs.gripper_position, obs.gripper_width, obs.step, obs.horizon, obs.instructed_id())
    }

    pub fn encode_grounded(&self, obs: &PrivilegedObs) -> [f32; OBS_DIM] {
        let t = obs.target_slot();
        let order = std::iter::once(t).chain((0..obs.positions.len()).filter(move |&i| i != t));
        self.fill(
            order.map(|i| obs.positions[i]),
            obs.gripper_position,
            obs.gripper_width,
            obs.step,
            obs.horizon,
            obs.object_ids[t],
        )
    }

    pub fn encode(&self, obs: &Observation) -> [f32; OBS_DIM] {
        match (self.mode, obs) {
            (ObsMode::IdentityBlind, Observation::Blind(o)) => self.encode_blind(o),
            (ObsMode::Grounded, Observation::Privileged(o)) => self.encode_grounded(o),
            (mode, _) => panic!("{mode} encoder given the wrong observation kind"),
        }
    }

    /// Action in network units: translation divided by the clamp.
    pub fn action_to_target(&self, a: &Action7) -> [f32; ACTION_DIM] {
        let c = self.translation_clamp as f32;
        [a.d_pos[0] / c, a.d_pos[1] / c, a.d_pos[2] / c, a.d_rot[0], a.d_rot[1], a.d_rot[2], a.grip]
    }

    pub fn target_to_action(&self, v: &[f32]) -> Action7 {
        let c = self.translation_clamp as f32;
        Action7 { d_pos: [v[0] * c, v[1] * c, v[2] * c], d_rot: [v[3], v[4], v[5]], grip: v[6].clamp(-1.0, 1.0) }
    }
}

/// Observation at time `t` with the next `C` actions; steps past the episode
/// end repeat the last action and are masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSample {
    pub obs: [f32; OBS_DIM],
    /// `chunk_size x 7`, row-major.
    pub target: Vec<f32>,
    pub mask: Vec<bool>,
}

/// Chunk samples for every `(episode, t)`, materialized on demand.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub chunk_size: usize,
    pub encoder: BcEncoder,
    pub obs: Array2<f32>,
    /// `(episode, t)` per row of `obs`.
    pub index: Vec<(usize, usize)>,
    pub episode_actions: Vec<Vec<[f32; ACTION_DIM]>>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn with_chunk_size(&self, chunk_size: usize) -> Self {
        Self { chunk_size, ..self.clone() }
    }

    fn write_chunk(&self, row: usize, target: &mut [f32], mask: &mut [f32]) {
        let (e, t) = self.index[row];
        let acts = &self.episode_actions[e];
        let last = acts.len() - 1;
        for k in 0..self.chunk_size {
            let src = (t + k).min(last);
            target[k * ACTION_DIM..(k + 1) * ACTION_DIM].copy_from_slice(&acts[src]);
            mask[k] = if t + k <= last { 1.0 } else { 0.0 };
        }
    }

    pub fn sample(&self, row: usize) -> ChunkSample {
        let mut target = vec![0.0; self.chunk_size * ACTION_DIM];
        let mut mask = vec![0.0; self.chunk_size];
        self.write_chunk(row, &mut target, &mut mask);
        let mut obs = [0.0; OBS_DIM];
        obs.copy_from_slice(self.obs.row(row).as_slice().expect("standard layout"));
        ChunkSample { obs, target, mask: mask.iter().map(|&m| m > 0.5).collect() }
    }

    fn batch(&self, rows: &[usize]) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let obs = self.obs.select(Axis(0), rows);
        let mut target = Array2::zeros((rows.len(), self.chunk_size * ACTION_DIM));
        let mut mask = Array2::zeros((rows.len(), self.chunk_size));
        for (i, &r) in rows.iter().enumerate() {
            let mut t = target.row_mut(i);
            let mut m = mask.row_mut(i);
            self.write_chunk(r, t.as_slice_mut().expect("standard layout"), m.as_slice_mut().expect("standard layout"));
        }
        (obs, target, mask)
    }
}

/// Replays every demonstration and encodes one sample per step.
pub fn build_training_set(env: &EnvConfig, demos: &[Demo], mode: ObsMode, chunk_size: usize) -> Result<TrainingSet> {
    if demos.is_empty() || demos.iter().all(|d| d.actions.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let encoder = BcEncoder::new(mode, &env.workspace);
    let total: usize = demos.iter().map(|d| d.actions.len()).sum();
    let mut obs = Array2::zeros((total, OBS_DIM));
    let mut index = Vec::with_capacity(total);
    let mut episode_actions = Vec::with_capacity(demos.len());
    let mut row = 0;
    for (e, demo) in demos.iter().enumerate() {
        if demo.actions.is_empty() {
            episode_actions.push(Vec::new());
            continue;
        }
        let (setup, states) = rollout::replay(env, &demo.task, demo.seed, &demo.actions)?;
        for (t, state) in states[..demo.actions.len()].iter().enumerate() {
            let x = encoder.encode(&rollout::observe(state, &setup, mode.obs_kind())?);
            obs.row_mut(row).iter_mut().zip(x).for_each(|(o, v)| *o = v);
            index.push((e, t));
            row += 1;
        }
        episode_actions.push(demo.actions.iter().map(|a| encoder.action_to_target(a)).collect());
    }
    Ok(TrainingSet { chunk_size, encoder, obs, index, episode_actions })
}

/// Masked mean-squared error over unpadded chunk steps and its gradient with
/// respect to the prediction.
pub fn masked_mse<F: nn::Scalar>(pred: ArrayView2<'_, F>, target: ArrayView2<'_, F>, mask: ArrayView2<'_, F>) -> (f64, Array2<F>) {
    let dim = pred.ncols() / mask.ncols();
    let count = mask.iter().map(|m| m.to_f64().unwrap_or(0.0)).sum::<f64>() * dim as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    if count == 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for ((i, j), g) in grad.indexed_iter_mut() {
        let m = mask[[i, j / dim]].to_f64().unwrap_or(0.0);
        if m == 0.0 {
            continue;
        }
        let e = pred[[i, j]].to_f64().unwrap_or(f64::NAN) - target[[i, j]].to_f64().unwrap_or(f64::NAN);
        loss += e * e;
        *g = nn::cast(2.0 * e / count);
    }
    (loss / count, grad)
}

#[derive(Debug, Clone)]
pub struct BcModel {
    pub config: BCConfig,
    pub encoder: BcEncoder,
    pub net: Mlp<f32>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

pub fn init_network(cfg: &BCConfig) -> Mlp<f32> {
    Mlp::new(&[OBS_DIM, cfg.hidden, cfg.hidden, cfg.chunk_size * ACTION_DIM], 1.0, &mut rng::stream(cfg.seed, Domain::Init))
}

pub fn bc_train(cfg: &BCConfig, set: &TrainingSet) -> Result<BcModel> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if set.chunk_size != cfg.chunk_size {
        return Err(Error::InvalidConfig(format!(
            "training set built for chunk {} but config uses {}",
            set.chunk_size, cfg.chunk_size
        )));
    }
    let mut net = init_network(cfg);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut rng = rng::stream(cfg.seed, Domain::Shuffle);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let (obs, target, mask) = set.batch(rows);
            let (pred, cache) = net.forward_cached(obs.view());
            let (loss, grad) = masked_mse(pred.view(), target.view(), mask.view());
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("BC loss {loss} in epoch {epoch}")));
            }
            let grads = net.backward(&cache, grad.view());
            opt.step(&mut net, &grads);
            sum += loss;
            batches += 1.0;
        }
        let mean = sum / batches;
        log::debug!("bc epoch {epoch} loss {mean:.6}");
        loss_curve.push(mean);
    }
    Ok(BcModel { config: cfg.clone(), encoder: set.encoder.clone(), net, loss_curve })
}

impl BcModel {
    pub fn predict_chunk(&self, x: &[f32; OBS_DIM]) -> Vec<Action7> {
        let input = ArrayView2::from_shape((1, OBS_DIM), x).expect("observation width");
        let out = self.net.forward(input);
        out.row(0)
            .as_slice()
            .expect("standard layout")
            .chunks(ACTION_DIM)
            .map(|c| self.encoder.target_to_action(c))
            .collect()
    }

    pub fn policy(&self) -> BcPolicy {
        BcPolicy::new(self.clone())
    }

    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        let extra = serde_json::json!({ "bc": self.config, "encoder": self.encoder, "loss_curve": self.loss_curve });
        nn::save_checkpoint(dir, "bc", config_hash, &nn::mlp_tensors("policy", &self.net), extra)
    }

    pub fn load(dir: &Path, config_hash: &str) -> Result<Self> {
        let (manifest, tensors) = nn::load_checkpoint(dir)?;
        if manifest.kind != "bc" {
            return Err(Error::Checkpoint(format!("expected a bc checkpoint, found {}", manifest.kind)));
        }
        if manifest.config_hash != config_hash {
            return Err(Error::HashMismatch { expected: config_hash.into(), found: manifest.config_hash });
        }
        Ok(Self {
            config: serde_json::from_value(manifest.extra["bc"].clone())?,
            encoder: serde_json::from_value(manifest.extra["encoder"].clone())?,
            net: nn::mlp_from_tensors("policy", &tensors)?,
            loss_curve: serde_json::from_value(manifest.extra["loss_curve"].clone())?,
        })
    }
}

/// Executes predicted chunks, re-predicting after `execution_horizon` steps.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    pub model: BcModel,
    queue: VecDeque<Action7>,
    executed: usize,
    pub predictions: usize,
}

impl BcPolicy {
    pub fn new(model: BcModel) -> Self {
        Self { model, queue: VecDeque::new(), executed: 0, predictions: 0 }
    }
}

pub fn bc_act(policy: &mut BcPolicy, obs: &Observation) -> Action7 {
    if policy.queue.is_empty() || policy.executed >= policy.model.config.execution_horizon {
        let x = policy.model.encoder.encode(obs);
        policy.queue = policy.model.predict_chunk(&x).into();
        policy.executed = 0;
        policy.predictions += 1;
    }
    policy.executed += 1;
    policy.queue.pop_front().expect("non-empty chunk")
}

impl Policy for BcPolicy {
    fn name(&self) -> String {
        format!("bc_{}", self.model.encoder.mode)
    }
    fn observation_kind(&self) -> ObsKind {
        self.model.encoder.mode.obs_kind()
    }
    fn reset(&mut self, _: u64) {
        self.queue.clear();
        self.executed = 0;
        self.predictions = 0;
    }
    fn act(&mut self, obs: &Observation) -> Action7 {
        bc_act(self, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub config: BCConfig,
    pub success: f64,
    pub grasp_any: f64,
    pub reach: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: usize,
    pub rows: Vec<GridRow>,
    pub best_model: BcModel,
}

impl GridResult {
    pub fn best_config(&self) -> &BCConfig {
        &self.rows[self.best].config
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("chunk_size,execution_horizon,batch_size,learning_rate,epochs,obs_mode,success,grasp_any,reach,final_loss,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            let c = &r.config;
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.6},{}\n",
                c.chunk_size,
                c.execution_horizon,
                c.batch_size,
                c.learning_rate,
                c.epochs,
                c.obs_mode,
                r.success,
                r.grasp_any,
                r.reach,
                r.final_loss,
                u8::from(i == self.best)
            ));
        }
        out
    }
}

/// Index of the best row: highest success, ties to the smaller chunk and then
/// the smaller execution horizon, then the earlier row.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    (0..rows.len()).min_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        rb.success
            .total_cmp(&ra.success)
            .then(ra.config.chunk_size.cmp(&rb.config.chunk_size))
            .then(ra.config.execution_horizon.cmp(&rb.config.execution_horizon))
            .then(a.cmp(&b))
    })
}

fn rate(outcomes: &[EpisodeOutcome], f: impl Fn(&EpisodeOutcome) -> bool) -> f64 {
    outcomes.iter().filter(|o| f(o)).count() as f64 / outcomes.len().max(1) as f64
}

/// Trains and evaluates every config. Configs differing only in execution
/// horizon share one trained network.
pub fn grid_search(env: &EnvConfig, demos: &[Demo], cfgs: &[BCConfig], protocol: &EvalProtocol) -> Result<GridResult> {
    if cfgs.is_empty() {
        return Err(Error::InvalidConfig("grid search needs at least one config".into()));
    }
    let mut sets: BTreeMap<(ObsMode, usize), TrainingSet> = BTreeMap::new();
    let mut models: Vec<(BCConfig, BcModel)> = Vec::new();
    let mut rows = Vec::with_capacity(cfgs.len());
    let mut row_models = Vec::with_capacity(cfgs.len());
    for cfg in cfgs {
        cfg.validate()?;
        let key = (cfg.obs_mode, cfg.chunk_size);
        if !sets.contains_key(&key) {
            let set = match sets.values().find(|s| s.encoder.mode == cfg.obs_mode) {
                Some(s) => s.with_chunk_size(cfg.chunk_size),
                None => build_training_set(env, demos, cfg.obs_mode, cfg.chunk_size)?,
            };
            sets.insert(key, set);
        }
        let train_key = BCConfig { execution_horizon: 1, ..cfg.clone() };
        let idx = match models.iter().position(|(k, _)| *k == train_key) {
            Some(i) => i,
            None => {
                models.push((train_key, bc_train(&BCConfig { execution_horizon: 1, ..cfg.clone() }, &sets[&key])?));
                models.len() - 1
            }
        };
        let mut model = models[idx].1.clone();
        model.config.execution_horizon = cfg.execution_horizon;
        let outcomes = protocol.evaluate(&mut model.policy())?;
        rows.push(GridRow {
            config: cfg.clone(),
            success: rate(&outcomes, |o| o.success),
            grasp_any: rate(&outcomes, |o| o.grasp_any),
            reach: rate(&outcomes, |o| o.reach),
            final_loss: model.loss_curve.last().copied().unwrap_or(f64::NAN),
        });
        row_models.push(model);
    }
    let best = select_best(&rows).expect("non-empty grid");
    let best_model = row_models.swap_remove(best);
    Ok(GridResult { best, rows, best_model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameters;
    use crate::placement::Regime;
    use crate::policies::OraclePolicy;
    use crate::rollout::run_episode;
    use crate::task::EpisodeSetup;
    use rand::Rng as _;

    fn oracle_demos(env: &EnvConfig, task: &TaskConfig, n: u64) -> Vec<Demo> {
        (0..n)
            .map(|i| {
                let seed = rng::episode_seed(1, i);
                let setup = EpisodeSetup::generate(env, task, seed).unwrap();
                let run = run_episode(env, &setup, i, &mut OraclePolicy::new(&env.workspace)).unwrap();
                Demo { task: task.clone(), seed, actions: run.frames.iter().map(|f| f.action).collect() }
            })
            .collect()
    }

    #[test]
    fn chunk_padding_and_count() {
        let env = EnvConfig::default();
        let task = TaskConfig::new(Regime::SmallJitter);
        let demos = oracle_demos(&env, &task, 1);
        let set = build_training_set(&env, &demos, ObsMode::IdentityBlind, 16).unwrap();
        assert_eq!(set.len(), 50);
        let s = set.sample(40);
        assert_eq!(s.mask.iter().filter(|m| !**m).count(), 6);
        let last = set.episode_actions[0][49];
        assert_eq!(&s.target[15 * 7..], &last[..]);
        let s0 = set.with_chunk_size(8).sample(0);
        assert!(s0.mask.iter().all(|m| *m));
        assert_eq!(&s0.target[7..14], &set.episode_actions[0][1][..]);
    }

    #[test]
    fn encoders_share_targets_but_not_layout() {
        let env = EnvConfig::default();
        let task = TaskConfig::new(Regime::FullRandom);
        let demos = oracle_demos(&env, &task, 3);
        let blind = build_training_set(&env, &demos, ObsMode::IdentityBlind, 8).unwrap();
        let grounded = build_training_set(&env, &demos, ObsMode::Grounded, 8).unwrap();
        assert_eq!(blind.episode_actions, grounded.episode_actions);
        assert_ne!(blind.obs, grounded.obs);
        assert!(build_training_set(&env, &[], ObsMode::Grounded, 8).is_err());
    }

    #[test]
    fn padding_does_not_change_loss() {
        let mut rng = rng::stream(3, Domain::Rollout);
        let pred = Array2::from_shape_fn((4, 14), |_| rng.gen_range(-1.0..1.0f64));
        let target = Array2::from_shape_fn((4, 14), |_| rng.gen_range(-1.0..1.0f64));
        let mask = Array2::from_elem((4, 2), 1.0);
        let (l, _) = masked_mse(pred.view(), target.view(), mask.view());
        let mut pred3 = Array2::zeros((4, 21));
        let mut target3 = Array2::zeros((4, 21));
        pred3.slice_mut(ndarray::s![.., ..14]).assign(&pred);
        target3.slice_mut(ndarray::s![.., ..14]).assign(&target);
        pred3.slice_mut(ndarray::s![.., 14..]).fill(5.0);
        let mut mask3 = Array2::zeros((4, 3));
        mask3.slice_mut(ndarray::s![.., ..2]).fill(1.0);
        let (l3, g3) = masked_mse(pred3.view(), target3.view(), mask3.view());
        assert!((l - l3).abs() < 1e-15);
        assert!(g3.slice(ndarray::s![.., 14..]).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let mut rng = rng::stream(4, Domain::Rollout);
        let mut net = Mlp::<f64>::new(&[4, 6, 6, 14], 1.0, &mut rng::stream(4, Domain::Init));
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((5, 14), |_| rng.gen_range(-1.0..1.0));
        let m = Array2::from_shape_fn((5, 2), |(i, j)| if i + j == 5 { 0.0 } else { 1.0 });
        let loss = |n: &Mlp<f64>| masked_mse(n.forward(x.view()).view(), y.view(), m.view()).0;
        let (out, cache) = net.forward_cached(x.view());
        let analytic = net.backward(&cache, masked_mse(out.view(), y.view(), m.view()).1.view()).flatten();
        let base = net.flatten();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-4;
            net.load_flat(&p).unwrap();
            let lp = loss(&net);
            p[i] -= 2e-4;
            net.load_flat(&p).unwrap();
            let lm = loss(&net);
            let numeric = (lp - lm) / 2e-4;
            let scale = numeric.abs().max(analytic[i].abs());
            if scale > 1e-8 {
                worst = worst.max((numeric - analytic[i]).abs() / scale);
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    fn constant_set(chunk: usize) -> TrainingSet {
        let encoder = BcEncoder::new(ObsMode::IdentityBlind, &WorkspaceConfig::default());
        let mut rng = rng::stream(5, Domain::Rollout);
        let obs = Array2::from_shape_fn((200, OBS_DIM), |_| rng.gen_range(-1.0f32..1.0));
        let action = [0.5, -0.25, 0.1, 0.0, 0.0, 0.0, -1.0];
        TrainingSet {
            chunk_size: chunk,
            encoder,
            obs,
            index: (0..200).map(|r| (r / 50, r % 50)).collect(),
            episode_actions: vec![vec![action; 50]; 4],
        }
    }

    #[test]
    fn learns_constant_actions() {
        let cfg = BCConfig { chunk_size: 8, epochs: 500, hidden: 32, batch_size: 64, learning_rate: 3e-3, ..BCConfig::default() };
        let model = bc_train(&cfg, &constant_set(8)).unwrap();
        assert!(*model.loss_curve.last().unwrap() < 1e-4, "{:?}", model.loss_curve.last());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = BCConfig { epochs: 0, hidden: 16, ..BCConfig::default() };
        let model = bc_train(&cfg, &constant_set(cfg.chunk_size)).unwrap();
        assert_eq!(model.net, init_network(&cfg));
    }

    fn dummy_model(chunk: usize, horizon: usize) -> BcModel {
        let cfg = BCConfig { chunk_size: chunk, execution_horizon: horizon, hidden: 8, ..BCConfig::default() };
        BcModel {
            encoder: BcEncoder::new(ObsMode::IdentityBlind, &WorkspaceConfig::default()),
            net: init_network(&cfg),
            config: cfg,
            loss_curve: vec![],
        }
    }

    #[test]
    fn prediction_counts_follow_execution_horizon() {
        let env = EnvConfig::default();
        let setup = EpisodeSetup::generate(&env, &TaskConfig::new(Regime::SmallJitter), 0).unwrap();
        for (chunk, horizon, expected) in [(16, 4, 13), (8, 8, 7), (8, 1, 50), (16, 16, 4)] {
            let mut p = dummy_model(chunk, horizon).policy();
            run_episode(&env, &setup, 0, &mut p).unwrap();
            assert_eq!(p.predictions, expected, "chunk {chunk} horizon {horizon}");
        }
    }

    fn row(chunk: usize, horizon: usize, success: f64) -> GridRow {
        GridRow {
            config: BCConfig { chunk_size: chunk, execution_horizon: horizon, ..BCConfig::default() },
            success,
            grasp_any: 0.0,
            reach: 0.0,
            final_loss: 0.0,
        }
    }

    #[test]
    fn best_config_selection() {
        assert_eq!(select_best(&[row(8, 4, 0.4)]), Some(0));
        assert_eq!(select_best(&[row(8, 4, 0.4), row(8, 4, 0.1)]), Some(0));
        assert_eq!(select_best(&[row(16, 4, 0.4), row(8, 4, 0.4)]), Some(1));
        assert_eq!(select_best(&[row(8, 8, 0.4), row(8, 4, 0.4)]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = dummy_model(8, 4);
        model.save(dir.path(), "h").unwrap();
        let back = BcModel::load(dir.path(), "h").unwrap();
        assert_eq!(back.net, model.net);
        assert_eq!(back.config, model.config);
        assert!(BcModel::load(dir.path(), "x").is_err());
    }
}
