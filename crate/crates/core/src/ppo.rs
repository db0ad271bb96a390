//! State-based PPO expert: actor-critic networks, GAE, the clipped-surrogate
//! update and a vectorized training loop.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::config::{EnvConfig, WorkspaceConfig};
use crate::env::{Action7, EnvState, PrivilegedObs};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, cast, AdamW, Mlp, Parameters, Scalar};
use crate::policies::{ObsKind, Observation, Policy};
use crate::rng::{self, Domain};
use crate::rollout::EvalProtocol;
use crate::task::{EpisodeSetup, TaskConfig};

pub const ACTION_DIM: usize = 7;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub total_timesteps: u64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub minibatches: usize,
    pub update_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_coef: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_episode_steps: u32,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub log_std_init: f64,
    pub seed: u64,
    /// Evaluate every this many updates (and after the last one).
    pub eval_interval: usize,
    pub eval_episodes: u64,
    /// Stop as soon as an evaluation reaches this success rate.
    pub stop_at_success: Option<f64>,
}

impl Default for PPOConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 30_000_000,
            num_envs: 1024,
            rollout_steps: 50,
            minibatches: 2,
            update_epochs: 4,
            gamma: 0.8,
            gae_lambda: 0.9,
            clip_coef: 0.2,
            entropy_coef: 0.1,
            value_coef: 0.5,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            max_episode_steps: 50,
            max_grad_norm: 0.5,
            hidden: 256,
            log_std_init: -0.5,
            seed: 0,
            eval_interval: 100,
            eval_episodes: 100,
            stop_at_success: None,
        }
    }
}

impl PPOConfig {
    /// Budget that fits on a desktop CPU.
    pub fn desk() -> Self {
        Self { total_timesteps: 2_000_000, num_envs: 64, ..Self::default() }
    }

    pub fn batch_size(&self) -> usize {
        self.num_envs * self.rollout_steps
    }

    pub fn num_updates(&self) -> usize {
        (self.total_timesteps / self.batch_size().max(1) as u64) as usize
    }

    pub fn validate(&self, ws: &WorkspaceConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_envs == 0 || self.minibatches == 0 || self.hidden == 0 {
            return bad("num_envs, minibatches and hidden must be positive");
        }
        if self.rollout_steps != ws.horizon as usize || self.max_episode_steps != ws.horizon {
            return bad("rollout_steps and max_episode_steps must equal the environment horizon");
        }
        if self.batch_size() % self.minibatches != 0 {
            return bad("batch size must split evenly into minibatches");
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one trajectory segment.
/// `values[t]` estimates state `t`; `bootstrap` estimates the state after the
/// last step. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::LengthMismatch(format!(
            "rewards {}, values {}, dones {}",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("gamma {gamma} / lambda {lambda} outside [0, 1]")));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        next_adv = delta + gamma * lambda * not_done * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = if std > 1e-12 { std } else { 1.0 };
    adv.iter_mut().for_each(|a| *a = (*a - mean) / denom);
}

/// Shaped reward: distance penalty, grasp bonuses and a wrong-object penalty.
pub fn reward_fn(prev: &EnvState, _action: &Action7, next: &EnvState) -> f64 {
    let target = next.instructed_index();
    let mut r = -0.1 * next.instructed_distance();
    if next.instructed_latch && !prev.instructed_latch {
        r += 2.0;
    }
    if let Some(h) = next.held() {
        if prev.held() != Some(h) && h != target {
            r -= 1.0;
        }
    }
    if next.is_done() && next.held() == Some(target) {
        r += 5.0;
    }
    r
}

/// Maps privileged observations to the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlEncoder {
    pub table_z: f64,
    pub max_width: f64,
    pub translation_clamp: f64,
}

impl RlEncoder {
    pub const DIM: usize = 12;

    pub fn new(ws: &WorkspaceConfig) -> Self {
        Self { table_z: ws.table_z, max_width: ws.max_width, translation_clamp: ws.translation_clamp }
    }

    pub fn encode(&self, obs: &PrivilegedObs) -> [f64; Self::DIM] {
        let g = obs.gripper_position;
        let t = obs.target_slot();
        let target = obs.positions[t];
        let distractor = (0..obs.positions.len())
            .filter(|&i| i != t)
            .map(|i| obs.positions[i])
            .min_by(|a, b| {
                let da = (a[0] - g[0]).hypot(a[1] - g[1]);
                let db = (b[0] - g[0]).hypot(b[1] - g[1]);
                da.total_cmp(&db)
            });
        let (dx, dy, present) = match distractor {
            Some(p) => (p[0] - g[0], p[1] - g[1], 1.0),
            None => (0.0, 0.0, 0.0),
        };
        let holding_target = obs.holding == Some(t);
        [
            10.0 * (target[0] - g[0]),
            10.0 * (target[1] - g[1]),
            10.0 * (g[2] - self.table_z),
            5.0 * g[0],
            5.0 * g[1],
            obs.gripper_width / self.max_width,
            f64::from(u8::from(holding_target)),
            f64::from(u8::from(obs.holding.is_some() && !holding_target)),
            f64::from(obs.step) / f64::from(obs.horizon.max(1)),
            10.0 * dx,
            10.0 * dy,
            present,
        ]
    }

    /// Network output to environment action; translation is in units of the clamp.
    pub fn to_action<F: Scalar>(&self, a: &[F]) -> Action7 {
        let v = |i: usize| a[i].to_f64().unwrap_or(0.0);
        let c = self.translation_clamp;
        Action7 {
            d_pos: [(v(0) * c) as f32, (v(1) * c) as f32, (v(2) * c) as f32],
            d_rot: [v(3) as f32, v(4) as f32, v(5) as f32],
            grip: v(6).clamp(-1.0, 1.0) as f32,
        }
    }
}

/// Gaussian policy with a state-independent log-std, plus a value network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic<F> {
    pub actor: Mlp<F>,
    pub log_std: Array1<F>,
    pub critic: Mlp<F>,
}

impl<F: Scalar> ActorCritic<F> {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: usize, log_std_init: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Init);
        let actor = Mlp::new(&[obs_dim, hidden, hidden, act_dim], 0.01, &mut rng);
        let critic = Mlp::new(&[obs_dim, hidden, hidden, 1], 1.0, &mut rng);
        Self { actor, log_std: Array1::from_elem(act_dim, cast(log_std_init)), critic }
    }

    pub fn zeros_like(&self) -> Self {
        Self { actor: self.actor.zeros_like(), log_std: Array1::zeros(self.log_std.len()), critic: self.critic.zeros_like() }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn clamped_log_std(&self) -> Array1<F> {
        let (lo, hi) = (cast::<F>(LOG_STD_MIN), cast::<F>(LOG_STD_MAX));
        self.log_std.mapv(|v| v.max(lo).min(hi))
    }

    /// Entropy of the diagonal Gaussian, `sum(log sigma + 0.5 log(2 pi e))`.
    pub fn entropy(&self) -> f64 {
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        self.clamped_log_std().iter().map(|v| v.to_f64().unwrap_or(f64::NAN) + c).sum()
    }

    pub fn value(&self, obs: ArrayView2<'_, F>) -> Array1<F> {
        self.critic.forward(obs).index_axis_move(Axis(1), 0)
    }

    pub fn mean(&self, obs: ArrayView2<'_, F>) -> Array2<F> {
        self.actor.forward(obs)
    }

    pub fn cast<G: Scalar>(&self) -> ActorCritic<G> {
        ActorCritic {
            actor: self.actor.cast(),
            log_std: self.log_std.mapv(|v| cast::<G>(v.to_f64().unwrap_or(0.0))),
            critic: self.critic.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<F> Parameters<F> for ActorCritic<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut t = self.actor.tensors();
        t.push(self.log_std.as_slice().expect("standard layout"));
        t.extend(self.critic.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.actor.tensors_mut();
        t.push(self.log_std.as_slice_mut().expect("standard layout"));
        t.extend(self.critic.tensors_mut());
        t
    }
}

/// Gaussian log-density of `actions` under mean `mean` and log-std `log_std`.
pub fn log_prob<F: Scalar>(mean: ArrayView2<'_, F>, log_std: &Array1<F>, actions: ArrayView2<'_, F>) -> Vec<f64> {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    mean.outer_iter()
        .zip(actions.outer_iter())
        .map(|(m, a)| {
            m.iter()
                .zip(a.iter())
                .zip(log_std.iter())
                .map(|((m, a), ls)| {
                    let ls = ls.to_f64().unwrap_or(f64::NAN);
                    let z = (a.to_f64().unwrap_or(f64::NAN) - m.to_f64().unwrap_or(f64::NAN)) / ls.exp();
                    -0.5 * z * z - ls - half_log_2pi
                })
                .sum()
        })
        .collect()
}

/// One minibatch of the update.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub obs: Array2<F>,
    pub actions: Array2<F>,
    pub old_log_prob: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped-surrogate loss (to be minimized) and its gradient:
/// `-mean(min(rA, clip(r) A)) - c_e H + c_v mean((V - R)^2)`.
pub fn ppo_loss<F: Scalar>(net: &ActorCritic<F>, batch: &Batch<F>, cfg: &PPOConfig) -> (LossStats, ActorCritic<F>) {
    let n = batch.obs.nrows();
    let nf = n as f64;
    let (mean, actor_cache) = net.actor.forward_cached(batch.obs.view());
    let (values, critic_cache) = net.critic.forward_cached(batch.obs.view());
    let log_std = net.clamped_log_std();
    let logp = log_prob(mean.view(), &log_std, batch.actions.view());

    let mut stats = LossStats { entropy: net.entropy(), ..Default::default() };
    let act_dim = net.act_dim();
    let mut d_mean = Array2::<F>::zeros((n, act_dim));
    let mut d_log_std = vec![0.0f64; act_dim];
    let mut d_value = Array2::<F>::zeros((n, 1));
    let (lo, hi) = (1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef);
    for i in 0..n {
        let log_ratio = logp[i] - batch.old_log_prob[i];
        let ratio = log_ratio.exp();
        let a = batch.advantages[i];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        stats.policy_loss -= unclipped.min(clipped) / nf;
        stats.approx_kl += ((ratio - 1.0) - log_ratio) / nf;
        if (ratio - 1.0).abs() > cfg.clip_coef {
            stats.clip_fraction += 1.0 / nf;
        }
        // d surrogate / d logp is r A on the active unclipped branch, else 0
        let g = if unclipped <= clipped { unclipped } else { 0.0 };
        if g != 0.0 {
            for j in 0..act_dim {
                let ls = log_std[j].to_f64().unwrap_or(f64::NAN);
                let sigma = ls.exp();
                let z = (batch.actions[[i, j]].to_f64().unwrap_or(f64::NAN) - mean[[i, j]].to_f64().unwrap_or(f64::NAN)) / sigma;
                d_mean[[i, j]] = cast(-g * z / sigma / nf);
                d_log_std[j] -= g * (z * z - 1.0) / nf;
            }
        }
        let err = values[[i, 0]].to_f64().unwrap_or(f64::NAN) - batch.returns[i];
        stats.value_loss += err * err / nf;
        d_value[[i, 0]] = cast(2.0 * cfg.value_coef * err / nf);
    }
    stats.loss = stats.policy_loss - cfg.entropy_coef * stats.entropy + cfg.value_coef * stats.value_loss;

    let mut grads = net.zeros_like();
    grads.actor = net.actor.backward(&actor_cache, d_mean.view());
    grads.critic = net.critic.backward(&critic_cache, d_value.view());
    for j in 0..act_dim {
        let raw = net.log_std[j].to_f64().unwrap_or(f64::NAN);
        let inside = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw);
        grads.log_std[j] = if inside { cast(d_log_std[j] - cfg.entropy_coef) } else { F::zero() };
    }
    (stats, grads)
}

/// Per-step storage for `num_envs` environments, step-major.
#[derive(Debug, Clone)]
pub struct RolloutBuffer<F> {
    pub num_envs: usize,
    pub steps: usize,
    pub obs: Array2<F>,
    pub actions: Array2<F>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
}

impl<F: Scalar> RolloutBuffer<F> {
    pub fn new(num_envs: usize, steps: usize, obs_dim: usize, act_dim: usize) -> Self {
        let cap = num_envs * steps;
        Self {
            num_envs,
            steps,
            obs: Array2::zeros((cap, obs_dim)),
            actions: Array2::zeros((cap, act_dim)),
            log_probs: vec![0.0; cap],
            rewards: vec![0.0; cap],
            values: vec![0.0; cap],
            dones: vec![false; cap],
        }
    }

    pub fn capacity(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn index(&self, step: usize, env: usize) -> usize {
        step * self.num_envs + env
    }

    /// Advantages and returns for every entry; episodes end with the segment.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let cap = self.capacity();
        let (mut adv, mut ret) = (vec![0.0; cap], vec![0.0; cap]);
        for e in 0..self.num_envs {
            let idx: Vec<usize> = (0..self.steps).map(|t| self.index(t, e)).collect();
            let r: Vec<f64> = idx.iter().map(|&i| self.rewards[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| self.values[i]).collect();
            let d: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, rt) = compute_gae(&r, &v, 0.0, &d, gamma, lambda)?;
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = rt[k];
            }
        }
        Ok((adv, ret))
    }
}

/// Runs `update_epochs` passes of shuffled minibatch AdamW steps over a full buffer.
pub fn ppo_update<F: Scalar>(
    net: &mut ActorCritic<F>,
    opt: &mut AdamW<F>,
    buffer: &RolloutBuffer<F>,
    cfg: &PPOConfig,
    shuffle_seed: u64,
) -> Result<LossStats> {
    let (mut adv, returns) = buffer.advantages(cfg.gamma, cfg.gae_lambda)?;
    normalize_advantages(&mut adv);
    let cap = buffer.capacity();
    let mb = cap / cfg.minibatches;
    let mut rng = rng::stream(shuffle_seed, Domain::Shuffle);
    let mut order: Vec<usize> = (0..cap).collect();
    let mut total = LossStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.update_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(mb) {
            let batch = Batch {
                obs: buffer.obs.select(Axis(0), chunk),
                actions: buffer.actions.select(Axis(0), chunk),
                old_log_prob: chunk.iter().map(|&i| buffer.log_probs[i]).collect(),
                advantages: chunk.iter().map(|&i| adv[i]).collect(),
                returns: chunk.iter().map(|&i| returns[i]).collect(),
            };
            let (stats, mut grads) = ppo_loss(net, &batch, cfg);
            if !stats.loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("PPO loss {stats:?}")));
            }
            nn::clip_global_norm(&mut grads, cfg.max_grad_norm);
            opt.step(net, &grads);
            total.loss += stats.loss;
            total.policy_loss += stats.policy_loss;
            total.value_loss += stats.value_loss;
            total.entropy += stats.entropy;
            total.approx_kl += stats.approx_kl;
            total.clip_fraction += stats.clip_fraction;
            count += 1.0;
        }
    }
    if count > 0.0 {
        for v in [
            &mut total.loss,
            &mut total.policy_loss,
            &mut total.value_loss,
            &mut total.entropy,
            &mut total.approx_kl,
            &mut total.clip_fraction,
        ] {
            *v /= count;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub update: usize,
    pub timesteps: u64,
    pub train_success: f64,
    pub mean_return: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub eval_success: Option<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(
        "update,timesteps,train_success,mean_return,policy_loss,value_loss,entropy,approx_kl,clip_fraction,eval_success\n",
    );
    for p in curve {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            p.update,
            p.timesteps,
            p.train_success,
            p.mean_return,
            p.policy_loss,
            p.value_loss,
            p.entropy,
            p.approx_kl,
            p.clip_fraction,
            p.eval_success.map(|v| format!("{v:.6}")).unwrap_or_default()
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: ActorCritic<f32>,
    pub encoder: RlEncoder,
    pub curve: Vec<CurvePoint>,
    pub timesteps: u64,
}

impl TrainResult {
    pub fn final_eval_success(&self) -> Option<f64> {
        self.curve.iter().rev().find_map(|p| p.eval_success)
    }

    pub fn policy(&self) -> PpoPolicy {
        PpoPolicy::new(self.net.clone(), self.encoder.clone())
    }
}

/// Seed offset for the held-out evaluation episodes of a training run.
const EVAL_STREAM: u64 = 0xE7A1;

/// Trains an expert on `task`. Deterministic in `(env, task, cfg)`.
pub fn train(env: &EnvConfig, task: &TaskConfig, cfg: &PPOConfig) -> Result<TrainResult> {
    cfg.validate(&env.workspace)?;
    task.validate(env)?;
    let encoder = RlEncoder::new(&env.workspace);
    let mut net = ActorCritic::<f32>::new(RlEncoder::DIM, ACTION_DIM, cfg.hidden, cfg.log_std_init, cfg.seed);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut buffer = RolloutBuffer::<f32>::new(cfg.num_envs, cfg.rollout_steps, RlEncoder::DIM, ACTION_DIM);
    let mut curve = Vec::new();
    let updates = cfg.num_updates();
    let floor = 1.0 / task.object_count as f64 * 0.1;
    let mut timesteps = 0u64;
    let eval = {
        let mut p = EvalProtocol::new(env.clone(), task.clone(), rng::derive_seed(cfg.seed, EVAL_STREAM), cfg.eval_episodes);
        p.start_index = 0;
        p
    };

    for update in 0..updates {
        let (train_success, mean_return) = collect(env, task, cfg, &encoder, &net, &mut buffer, update)?;
        let stats = ppo_update(&mut net, &mut opt, &buffer, cfg, rng::derive_seed(cfg.seed, update as u64))?;
        if !net.is_finite() {
            return Err(Error::NonFiniteLoss(format!("parameters became non-finite at update {update}")));
        }
        timesteps += buffer.capacity() as u64;
        let last = update + 1 == updates;
        let eval_success = if (update + 1) % cfg.eval_interval.max(1) == 0 || last {
            let outcomes = eval.evaluate(&mut PpoPolicy::new(net.clone(), encoder.clone()))?;
            Some(outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len().max(1) as f64)
        } else {
            None
        };
        curve.push(CurvePoint {
            update,
            timesteps,
            train_success,
            mean_return,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            eval_success,
        });
        if let Some(s) = eval_success {
            log::info!("update {update} timesteps {timesteps} eval success {s:.3} train success {train_success:.3}");
            if 2 * (update + 1) >= updates && s <= floor {
                log::warn!("eval success {s:.3} at update {update} is at the random floor; training may have diverged");
            }
            if cfg.stop_at_success.is_some_and(|target| s >= target) {
                break;
            }
        }
    }
    Ok(TrainResult { net, encoder, curve, timesteps })
}

/// Fills the buffer with one episode per environment. Returns the fraction of
/// successful episodes and the mean undiscounted return.
fn collect(
    env: &EnvConfig,
    task: &TaskConfig,
    cfg: &PPOConfig,
    encoder: &RlEncoder,
    net: &ActorCritic<f32>,
    buffer: &mut RolloutBuffer<f32>,
    update: usize,
) -> Result<(f64, f64)> {
    let e = cfg.num_envs;
    let mut states: Vec<EnvState> = (0..e)
        .map(|i| {
            let seed = rng::episode_seed(cfg.seed, (update * e + i) as u64);
            EpisodeSetup::generate(env, task, seed)?.reset(env)
        })
        .collect::<Result<_>>()?;
    let mut rng = rng::stream(rng::derive_seed(cfg.seed, update as u64), Domain::Rollout);
    let std: Vec<f32> = net.clamped_log_std().iter().map(|v| v.exp()).collect();
    let mut returns = vec![0.0; e];
    let mut obs = Array2::<f32>::zeros((e, RlEncoder::DIM));
    for t in 0..cfg.rollout_steps {
        for (i, s) in states.iter().enumerate() {
            let enc = encoder.encode(&s.observe_privileged());
            obs.row_mut(i).iter_mut().zip(enc).for_each(|(o, v)| *o = v as f32);
        }
        let mean = net.mean(obs.view());
        let values = net.value(obs.view());
        let mut actions = mean.clone();
        for a in actions.iter_mut().zip(std.iter().cycle()) {
            let z: f32 = StandardNormal.sample(&mut rng);
            *a.0 += a.1 * z;
        }
        let logp = log_prob(mean.view(), &net.clamped_log_std(), actions.view());
        let rows = t * e..(t + 1) * e;
        buffer.obs.slice_mut(s![rows.clone(), ..]).assign(&obs);
        buffer.actions.slice_mut(s![rows.clone(), ..]).assign(&actions);
        for i in 0..e {
            let k = buffer.index(t, i);
            let action = encoder.to_action(actions.row(i).as_slice().expect("standard layout"));
            let prev = states[i].clone();
            states[i].step(&action)?;
            let r = reward_fn(&prev, &action, &states[i]);
            returns[i] += r;
            buffer.log_probs[k] = logp[i];
            buffer.values[k] = f64::from(values[i]);
            buffer.rewards[k] = r;
            buffer.dones[k] = states[i].is_done();
        }
    }
    let mut successes = 0usize;
    for s in &states {
        if metrics::episode_outcome(s)?.success {
            successes += 1;
        }
    }
    Ok((successes as f64 / e as f64, returns.iter().sum::<f64>() / e as f64))
}

/// Deterministic (mean-action) policy backed by a trained actor.
#[derive(Debug, Clone)]
pub struct PpoPolicy {
    pub net: ActorCritic<f32>,
    pub encoder: RlEncoder,
}

impl PpoPolicy {
    pub fn new(net: ActorCritic<f32>, encoder: RlEncoder) -> Self {
        Self { net, encoder }
    }

    pub fn save(&self, dir: &Path, config_hash: &str, cfg: &PPOConfig) -> Result<()> {
        let mut tensors = nn::mlp_tensors("actor", &self.net.actor);
        tensors.push(nn::NamedTensor {
            name: "log_std".into(),
            shape: vec![self.net.act_dim()],
            data: self.net.log_std.to_vec(),
        });
        tensors.extend(nn::mlp_tensors("critic", &self.net.critic));
        let extra = serde_json::json!({ "encoder": self.encoder, "ppo": cfg });
        nn::save_checkpoint(dir, "ppo", config_hash, &tensors, extra)
    }

    /// Loads a checkpoint, refusing one trained under a different environment.
    pub fn load(dir: &Path, config_hash: &str) -> Result<Self> {
        let (manifest, tensors) = nn::load_checkpoint(dir)?;
        if manifest.kind != "ppo" {
            return Err(Error::Checkpoint(format!("expected a ppo checkpoint, found {}", manifest.kind)));
        }
        if manifest.config_hash != config_hash {
            return Err(Error::HashMismatch { expected: config_hash.into(), found: manifest.config_hash });
        }
        let log_std = tensors
            .iter()
            .find(|t| t.name == "log_std")
            .ok_or_else(|| Error::Checkpoint("missing log_std".into()))?;
        let encoder: RlEncoder = serde_json::from_value(manifest.extra["encoder"].clone())?;
        let net = ActorCritic {
            actor: nn::mlp_from_tensors("actor", &tensors)?,
            log_std: Array1::from_vec(log_std.data.clone()),
            critic: nn::mlp_from_tensors("critic", &tensors)?,
        };
        Ok(Self::new(net, encoder))
    }
}

impl Policy for PpoPolicy {
    fn name(&self) -> String {
        "ppo".into()
    }
    fn observation_kind(&self) -> ObsKind {
        ObsKind::Privileged
    }
    fn reset(&mut self, _: u64) {}
    fn act(&mut self, obs: &Observation) -> Action7 {
        let Observation::Privileged(o) = obs else { panic!("ppo requires privileged observations") };
        let x = Array2::from_shape_vec((1, RlEncoder::DIM), self.encoder.encode(o).iter().map(|&v| v as f32).collect())
            .expect("encoder width");
        let mean = self.net.mean(x.view());
        self.encoder.to_action(mean.row(0).as_slice().expect("standard layout"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placement::Regime;
    use rand::Rng as _;

    fn brute_force_gae(r: &[f64], v: &[f64], boot: f64, d: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..n).map(|t| r[t] + g * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t]).collect();
        (0..n)
            .map(|t| {
                let mut sum = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    sum += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                sum
            })
            .collect()
    }

    #[test]
    fn gae_worked_example() {
        let (a, ret) = compute_gae(&[1.0, 0.0, 1.0], &[0.5; 3], 0.0, &[false; 3], 0.8, 0.9).unwrap();
        for (x, y) in a.iter().zip([1.0872, 0.26, 0.5]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((ret[0] - 1.5872).abs() < 1e-12);
    }

    #[test]
    fn gae_matches_brute_force() {
        let mut rng = rng::stream(11, Domain::Rollout);
        for _ in 0..200 {
            let n = rng.gen_range(1..=20);
            let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
            let (g, l, b) = (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0), rng.gen_range(-1.0..1.0));
            let (a, _) = compute_gae(&r, &v, b, &d, g, l).unwrap();
            for (x, y) in a.iter().zip(brute_force_gae(&r, &v, b, &d, g, l)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_lambda_zero_and_done_masking() {
        let r = [0.3, -0.2, 1.0];
        let v = [0.1, 0.4, -0.3];
        let (a, _) = compute_gae(&r, &v, 2.0, &[false; 3], 0.9, 0.0).unwrap();
        assert!((a[0] - (0.3 + 0.9 * 0.4 - 0.1)).abs() < 1e-12);
        let (a, _) = compute_gae(&r, &v, 2.0, &[false, true, false], 0.9, 0.95).unwrap();
        assert!((a[1] - (-0.2 - 0.4)).abs() < 1e-12);
        assert!(compute_gae(&r, &v[..2], 0.0, &[false; 3], 0.9, 0.9).is_err());
    }

    #[test]
    fn advantage_normalization() {
        let mut a: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        normalize_advantages(&mut a);
        let m = a.iter().sum::<f64>() / 100.0;
        let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
    }

    fn toy_batch(net: &ActorCritic<f64>, n: usize, seed: u64, perturb: bool) -> Batch<f64> {
        let mut rng = rng::stream(seed, Domain::Rollout);
        let d = net.actor.input_dim();
        let obs = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let actions = Array2::from_shape_fn((n, net.act_dim()), |_| rng.gen_range(-1.0..1.0));
        let mut old = log_prob(net.mean(obs.view()).view(), &net.clamped_log_std(), actions.view());
        if perturb {
            old.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
        Batch {
            obs,
            actions,
            old_log_prob: old,
            advantages: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            returns: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn identity_ratio_surrogate_is_mean_advantage() {
        let net = ActorCritic::<f64>::new(3, 2, 8, -0.5, 1);
        let batch = toy_batch(&net, 16, 2, false);
        let (stats, _) = ppo_loss(&net, &batch, &PPOConfig::default());
        let mean_adv = batch.advantages.iter().sum::<f64>() / 16.0;
        assert!((stats.policy_loss + mean_adv).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn zero_advantage_gives_no_policy_gradient() {
        let net = ActorCritic::<f64>::new(3, 2, 8, -0.5, 1);
        let mut batch = toy_batch(&net, 16, 3, true);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (_, g) = ppo_loss(&net, &batch, &PPOConfig::default());
        assert!(g.actor.flatten().iter().all(|v| *v == 0.0));
        // only the entropy bonus acts on the log-std
        assert!(g.log_std.iter().all(|v| (*v + 0.1).abs() < 1e-12));
    }

    #[test]
    fn entropy_closed_form() {
        let mut net = ActorCritic::<f64>::new(2, 3, 4, 0.0, 1);
        net.log_std = Array1::from_vec(vec![-1.0, 0.5, 9.0]);
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        assert!((net.entropy() - (-1.0 + 0.5 + LOG_STD_MAX + 3.0 * c)).abs() < 1e-12);
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let mut net = ActorCritic::<f64>::new(3, 2, 5, -0.3, 4);
        // larger output scale so the actor is not near-constant
        net.actor = Mlp::new(&[3, 5, 5, 2], 1.0, &mut rng::stream(5, Domain::Init));
        let batch = toy_batch(&net, 12, 6, true);
        let cfg = PPOConfig::default();
        let (_, grads) = ppo_loss(&net, &batch, &cfg);
        let analytic = grads.flatten();
        let base = net.flatten();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            net.load_flat(&p).unwrap();
            let lp = ppo_loss(&net, &batch, &cfg).0.loss;
            p[i] -= 2.0 * eps;
            net.load_flat(&p).unwrap();
            let lm = ppo_loss(&net, &batch, &cfg).0.loss;
            let numeric = (lp - lm) / (2.0 * eps);
            let scale = numeric.abs().max(analytic[i].abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - analytic[i]).abs() / scale);
            }
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    fn state(positions: Vec<[f64; 2]>) -> EnvState {
        let env = EnvConfig::default();
        let specs = env.objects[..positions.len()].to_vec();
        let placement = crate::placement::PlacementSample {
            positions,
            regime: Regime::FullRandom,
            region_assignment: None,
            seed: 0,
        };
        crate::env::reset(&env.workspace, &specs, &placement, &crate::env::Instruction::for_object(&specs[0]), 0).unwrap()
    }

    #[test]
    fn reward_terms() {
        let home = EnvConfig::default().workspace.gripper_home;
        let s = state(vec![[home[0], home[1]], [0.2, 0.2]]);
        let stay = Action7::new([0.0; 3], 1.0);
        let mut next = s.clone();
        next.step(&stay).unwrap();
        assert_eq!(reward_fn(&s, &stay, &next), 0.0);

        // grasp the wrong object
        let mut s = state(vec![[0.2, 0.2], [home[0], home[1]]]);
        s.gripper.position[2] = s.workspace.table_z;
        let close = Action7::new([0.0; 3], -1.0);
        let mut next = s.clone();
        next.step(&close).unwrap();
        assert_eq!(next.held(), Some(1));
        let r = reward_fn(&s, &close, &next);
        assert!((r - (-1.0 - 0.1 * next.instructed_distance())).abs() < 1e-12);

        // terminal success on the first attachment
        let mut s = state(vec![[home[0], home[1]]]);
        s.gripper.position[2] = s.workspace.table_z;
        s.step = s.workspace.horizon - 1;
        let mut next = s.clone();
        next.step(&close).unwrap();
        assert!((reward_fn(&s, &close, &next) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let env = EnvConfig::default();
        let cfg = PPOConfig { total_timesteps: 0, num_envs: 4, hidden: 16, ..PPOConfig::desk() };
        let res = train(&env, &TaskConfig::new(Regime::SmallJitter).with_objects(1), &cfg).unwrap();
        assert_eq!(res.net, ActorCritic::new(RlEncoder::DIM, ACTION_DIM, 16, cfg.log_std_init, cfg.seed));
        assert!(res.curve.is_empty());
    }

    #[test]
    fn short_training_is_deterministic() {
        let env = EnvConfig::default();
        let cfg = PPOConfig {
            total_timesteps: 4 * 50 * 3,
            num_envs: 4,
            hidden: 16,
            eval_interval: 2,
            eval_episodes: 3,
            ..PPOConfig::desk()
        };
        let task = TaskConfig::new(Regime::SmallJitter).with_objects(1);
        let a = train(&env, &task, &cfg).unwrap();
        let b = train(&env, &task, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve.len(), 3);
        assert!(a.curve[1].eval_success.is_some() && a.curve[2].eval_success.is_some());
        assert!(a.curve.iter().all(|p| (0.0..=1.0).contains(&p.clip_fraction)));

        let dir = tempfile::tempdir().unwrap();
        let policy = a.policy();
        policy.save(dir.path(), &env.hash(), &cfg).unwrap();
        let back = PpoPolicy::load(dir.path(), &env.hash()).unwrap();
        assert_eq!(back.net, policy.net);
        assert!(PpoPolicy::load(dir.path(), "other").is_err());
    }
}
