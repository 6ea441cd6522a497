//! Multi-agent PPO: decentralised rollouts, per-agent GAE, clipped actor
//! updates with an entropy bonus, and a Huber-loss centralised critic trained
//! on randomly shuffled ego graphs.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{MlpCritic, MlpCriticCache};
use crate::env::{Env, EnvError, Observation, ENTITY_DIM, NUM_ACTIONS};
use crate::metrics::StepMetrics;
use crate::nn::{
    load_checkpoint, log_softmax_rows, ros_shuffle, save_checkpoint, Actor, EgoGraph, EgoGraphBatch, GatCache,
    GatCritic, GatDims, Manifest, Mlp, NnError, ParameterSet,
};
use crate::rng::{derive_seed, stream_rng, SimRng, Stream};
use crate::world::ScenarioConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at episode {episode}, epoch {epoch}: actor {actor_loss}, critic {critic_loss}")]
    NonFiniteLoss {
        episode: usize,
        epoch: usize,
        actor_loss: f64,
        critic_loss: f64,
    },
    #[error("controller {0} has no trainable parameters")]
    NotTrainable(Controller),
    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    TagMappo,
    MlpMappo,
    Kmeans,
}

impl Controller {
    pub fn as_str(self) -> &'static str {
        match self {
            Controller::TagMappo => "tag_mappo",
            Controller::MlpMappo => "mlp_mappo",
            Controller::Kmeans => "kmeans",
        }
    }
}

impl std::fmt::Display for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Controller {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tag_mappo" => Ok(Controller::TagMappo),
            "mlp_mappo" => Ok(Controller::MlpMappo),
            "kmeans" => Ok(Controller::Kmeans),
            other => Err(format!("unknown controller {other:?} (expected tag_mappo, mlp_mappo or kmeans)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub gae_tau: f64,
    pub ppo_epochs: usize,
    pub batch: usize,
    pub clip: f64,
    pub huber_delta: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    /// Learning rates decay linearly to this fraction of their initial value.
    pub lr_final_frac: f64,
    pub grad_clip: f64,
    pub episodes: usize,
    /// Parallel environments per episode.
    pub num_envs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub actor_hidden: Vec<usize>,
    /// Regress the critic on running-normalised value targets.
    pub value_norm: bool,
    /// Save a checkpoint every N episodes (0 disables periodic saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            actor_lr: 1e-4,
            critic_lr: 5e-4,
            gamma: 0.99,
            gae_tau: 0.95,
            ppo_epochs: 10,
            batch: 256,
            clip: 0.2,
            huber_delta: 2.0,
            entropy_start: 0.10,
            entropy_end: 0.01,
            lr_final_frac: 0.1,
            grad_clip: 0.5,
            episodes: 300,
            num_envs: 1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            actor_hidden: vec![128, 128],
            value_norm: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.gae_tau) {
            return err("gamma and gae_tau must lie in [0, 1)");
        }
        if !(self.clip > 0.0) || !(self.huber_delta > 0.0) {
            return err("clip and huber_delta must be positive");
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0 && self.grad_clip > 0.0) {
            return err("learning rates must be non-negative and grad_clip positive");
        }
        if self.batch == 0 || self.num_envs == 0 || self.ppo_epochs == 0 {
            return err("batch, num_envs and ppo_epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return err("lr_final_frac must lie in [0, 1]");
        }
        if self.actor_hidden.is_empty() || self.actor_hidden.contains(&0) {
            return err("actor_hidden needs at least one non-empty layer");
        }
        Ok(())
    }
}

/// Entropy coefficient and learning rates at `episode`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub beta_ent: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

pub fn anneal(cfg: &TrainConfig, episode: usize) -> Schedule {
    let frac = if cfg.episodes == 0 {
        0.0
    } else {
        (episode as f64 / cfg.episodes as f64).clamp(0.0, 1.0)
    };
    let lr_scale = 1.0 - (1.0 - cfg.lr_final_frac) * frac;
    Schedule {
        beta_ent: cfg.entropy_start + (cfg.entropy_end - cfg.entropy_start) * frac,
        actor_lr: cfg.actor_lr * lr_scale,
        critic_lr: cfg.critic_lr * lr_scale,
    }
}

pub fn huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(e: f64, delta: f64) -> f64 {
    e.clamp(-delta, delta)
}

/// GAE over one agent stream. `bootstrap` is the value after the last step
/// (zero when the agent died). Returns advantages and value targets `Â + V`.
pub fn compute_gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "one value per reward");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * tau * next_adv;
        adv[t] = next_adv;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// One alive agent's decision at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSample {
    pub env: usize,
    pub t: usize,
    pub agent: usize,
    pub obs: Vec<f64>,
    pub ego: EgoGraph,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// The agent died during this step; its stream ends without bootstrap.
    pub terminal: bool,
    pub advantage: f64,
    pub ret: f64,
}

/// Everything gathered from one environment episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvRollout {
    pub samples: Vec<AgentSample>,
    pub rewards: Vec<f64>,
    pub metrics: Vec<StepMetrics>,
    pub alive_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
}

impl RolloutBuffer {
    pub fn samples(&self) -> impl Iterator<Item = &AgentSample> {
        self.envs.iter().flat_map(|e| e.samples.iter())
    }

    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.envs.clear();
    }
}

/// Centralised value function used by MAPPO.
#[derive(Debug, Clone, PartialEq)]
pub enum Critic {
    Gat(GatCritic),
    Mlp(MlpCritic),
}

pub enum CriticCache {
    Gat(GatCache),
    Mlp(MlpCriticCache),
}

impl Critic {
    pub fn new(controller: Controller, num_uavs: usize, rng: &mut SimRng) -> Result<Critic, TrainError> {
        match controller {
            Controller::TagMappo => Ok(Critic::Gat(GatCritic::new(GatDims::standard(ENTITY_DIM), rng))),
            Controller::MlpMappo => Ok(Critic::Mlp(MlpCritic::new(num_uavs, ENTITY_DIM, &[256, 128], rng))),
            Controller::Kmeans => Err(TrainError::NotTrainable(controller)),
        }
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            Critic::Gat(c) => &c.params,
            Critic::Mlp(c) => &c.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Critic::Gat(c) => &mut c.params,
            Critic::Mlp(c) => &mut c.params,
        }
    }

    /// Neighbor shuffling during updates; the flat MLP critic relies on order.
    pub fn uses_ros(&self) -> bool {
        matches!(self, Critic::Gat(_))
    }

    pub fn forward(&self, batch: &EgoGraphBatch) -> Result<(Array1<f64>, CriticCache), NnError> {
        match self {
            Critic::Gat(c) => c.forward(batch).map(|(v, k)| (v, CriticCache::Gat(k))),
            Critic::Mlp(c) => c.forward(batch).map(|(v, k)| (v, CriticCache::Mlp(k))),
        }
    }

    pub fn values(&self, batch: &EgoGraphBatch) -> Result<Array1<f64>, NnError> {
        Ok(self.forward(batch)?.0)
    }

    pub fn backward(&self, batch: &EgoGraphBatch, cache: &CriticCache, grad: &Array1<f64>) -> ParameterSet {
        match (self, cache) {
            (Critic::Gat(c), CriticCache::Gat(k)) => c.backward(batch, k, grad),
            (Critic::Mlp(c), CriticCache::Mlp(k)) => c.backward(k, grad),
            _ => panic!("critic cache from a different critic type"),
        }
    }
}

/// Running mean and variance of value targets. The critic regresses
/// normalised targets; values handed to GAE are de-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNorm {
    pub enabled: bool,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ValueNorm {
    pub fn new(enabled: bool) -> ValueNorm {
        ValueNorm {
            enabled,
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.enabled {
            self.mean
        } else {
            0.0
        }
    }

    pub fn std(&self) -> f64 {
        if self.enabled && self.count > 1.0 {
            (self.m2 / self.count).sqrt().max(1e-6)
        } else {
            1.0
        }
    }

    /// Chan et al. parallel update with a batch of targets.
    pub fn update(&mut self, xs: &[f64]) {
        if !self.enabled || xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.m2 += m2 + delta * delta * self.count * n / total;
        self.count = total;
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean()) / self.std()
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std() + self.mean()
    }
}

fn obs_matrix(rows: &[&[f64]]) -> Result<Array2<f64>, NnError> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(NnError::Shape("ragged observation batch".into()));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), d), flat).map_err(|e| NnError::Shape(e.to_string()))
}

/// Runs one environment to its horizon with actions sampled from `actor`,
/// then attaches critic values and per-agent GAE.
pub fn rollout_env(
    env: &mut Env,
    env_index: usize,
    actor: &Actor,
    critic: &Critic,
    value_norm: &ValueNorm,
    rng: &mut SimRng,
    gamma: f64,
    tau: f64,
) -> Result<EnvRollout, TrainError> {
    let k_count = env.state().num_uavs();
    let mut streams: Vec<Vec<AgentSample>> = vec![Vec::new(); k_count];
    let mut rewards = Vec::new();
    let mut metrics = Vec::new();
    let mut alive_counts = Vec::new();
    let mut obs: Vec<Option<Observation>> = env.observations();
    while !env.is_done() {
        let t = env.t();
        let egos = env.ego_graphs();
        let alive: Vec<usize> = (0..k_count).filter(|&k| obs[k].is_some()).collect();
        let obs_vecs: Vec<Vec<f64>> = alive.iter().map(|&k| obs[k].as_ref().expect("alive").to_vec()).collect();
        let refs: Vec<&[f64]> = obs_vecs.iter().map(|v| v.as_slice()).collect();
        let mut actions = vec![None; k_count];
        let mut picks = Vec::new();
        if !alive.is_empty() {
            picks = actor.sample_batch(&obs_matrix(&refs)?, rng)?;
            for (&k, &(a, _)) in alive.iter().zip(&picks) {
                actions[k] = Some(a);
            }
        }
        alive_counts.push(alive.len());
        let out = env.step(&actions)?;
        for (i, &k) in alive.iter().enumerate() {
            streams[k].push(AgentSample {
                env: env_index,
                t,
                agent: k,
                obs: obs_vecs[i].clone(),
                ego: egos[k].clone().expect("alive agent has an ego graph"),
                action: picks[i].0,
                log_prob: picks[i].1,
                reward: out.reward,
                value: 0.0,
                terminal: !env.state().alive[k],
                advantage: 0.0,
                ret: 0.0,
            });
        }
        rewards.push(out.reward);
        metrics.push(out.metrics);
        obs = out.observations;
    }
    let final_graphs = env.ego_graphs();
    let mut samples = Vec::new();
    for mut stream in streams {
        let Some(last) = stream.last() else { continue };
        let mut graphs: Vec<&EgoGraph> = stream.iter().map(|s| &s.ego).collect();
        // Survivors at the horizon are truncated, not terminated: bootstrap
        // from the value of their final ego graph.
        let truncated = !last.terminal;
        if truncated {
            graphs.push(final_graphs[last.agent].as_ref().expect("survivor has an ego graph"));
        }
        let raw = critic.values(&EgoGraphBatch::from_graphs(&graphs)?)?;
        let mut values: Vec<f64> = raw.iter().map(|&v| value_norm.denormalize(v)).collect();
        let bootstrap = if truncated { values.pop().expect("bootstrap value") } else { 0.0 };
        let r: Vec<f64> = stream.iter().map(|s| s.reward).collect();
        let (adv, ret) = compute_gae(&r, &values, bootstrap, gamma, tau);
        for (i, s) in stream.iter_mut().enumerate() {
            s.value = values[i];
            s.advantage = adv[i];
            s.ret = ret[i];
        }
        samples.extend(stream);
    }
    Ok(EnvRollout {
        samples,
        rewards,
        metrics,
        alive_counts,
    })
}

/// Collects one episode from every environment in parallel. Environment `i`
/// draws its actions from `rngs[i]`, so results do not depend on scheduling.
pub fn collect_rollout(
    envs: &mut [Env],
    actor: &Actor,
    critic: &Critic,
    value_norm: &ValueNorm,
    rngs: &mut [SimRng],
    cfg: &TrainConfig,
) -> Result<RolloutBuffer, TrainError> {
    assert_eq!(envs.len(), rngs.len(), "one policy stream per environment");
    let envs: Result<Vec<EnvRollout>, TrainError> = envs
        .par_iter_mut()
        .zip(rngs.par_iter_mut())
        .enumerate()
        .map(|(i, (env, rng))| rollout_env(env, i, actor, critic, value_norm, rng, cfg.gamma, cfg.gae_tau))
        .collect();
    Ok(RolloutBuffer { envs: envs? })
}

/// PPO-clip objective with entropy bonus, averaged over samples with weight
/// > 0. Returns (loss, mean entropy, gradients).
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    actor: &Actor,
    obs: &Array2<f64>,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    weights: &[f64],
    clip: f64,
    beta_ent: f64,
) -> Result<(f64, f64, ParameterSet), TrainError> {
    let cache = actor.forward(obs)?;
    let logp = log_softmax_rows(&cache.output);
    let total_w: f64 = weights.iter().sum();
    let mut grads = actor.params.zeros_like();
    if total_w <= 0.0 {
        return Ok((0.0, 0.0, grads));
    }
    let mut g_logits = Array2::zeros(logp.raw_dim());
    let mut loss = 0.0;
    let mut entropy = 0.0;
    for i in 0..obs.nrows() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let row = logp.row(i);
        let p: Vec<f64> = row.iter().map(|l| l.exp()).collect();
        let h: f64 = -p.iter().zip(row.iter()).map(|(p, l)| p * l).sum::<f64>();
        let a = actions[i];
        let ratio = (row[a] - old_log_probs[i]).exp();
        let adv = advantages[i];
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        let obj = surr1.min(surr2);
        let d_logp_a = if surr1 <= surr2 { surr1 } else { 0.0 };
        let scale = w / total_w;
        loss -= scale * (obj + beta_ent * h);
        entropy += scale * h;
        let mut g = g_logits.row_mut(i);
        for j in 0..p.len() {
            let onehot = if j == a { 1.0 } else { 0.0 };
            let d_obj = d_logp_a * (onehot - p[j]);
            let d_h = -p[j] * (row[j] + h);
            g[j] = -scale * (d_obj + beta_ent * d_h);
        }
    }
    actor.net.backward(&actor.params, &cache, &g_logits, &mut grads);
    Ok((loss, entropy, grads))
}

/// Weighted mean Huber loss between value targets and critic outputs.
pub fn critic_loss(
    critic: &Critic,
    batch: &EgoGraphBatch,
    targets: &[f64],
    weights: &[f64],
    delta: f64,
) -> Result<(f64, ParameterSet), TrainError> {
    let (values, cache) = critic.forward(batch)?;
    let total_w: f64 = weights.iter().sum();
    if total_w <= 0.0 {
        return Ok((0.0, critic.params().zeros_like()));
    }
    let mut loss = 0.0;
    let mut g = Array1::zeros(values.len());
    for i in 0..values.len() {
        if weights[i] == 0.0 {
            continue;
        }
        let e = targets[i] - values[i];
        let scale = weights[i] / total_w;
        loss += scale * huber(e, delta);
        g[i] = -scale * huber_grad(e, delta);
    }
    Ok((loss, critic.backward(batch, &cache, &g)))
}

pub fn clip_grad_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: ParameterSet,
    v: ParameterSet,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParameterSet) -> Optimizer {
        Optimizer {
            kind,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -lr),
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for i in 0..params.len() {
                    let g = grads.get(i);
                    let m = self.m.get_mut(i);
                    m.zip_mut_with(g, |m, &g| *m = B1 * *m + (1.0 - B1) * g);
                    let v = self.v.get_mut(i);
                    v.zip_mut_with(g, |v, &g| *v = B2 * *v + (1.0 - B2) * g * g);
                    let (m, v) = (self.m.get(i).clone(), self.v.get(i));
                    let p = params.get_mut(i);
                    ndarray::Zip::from(p).and(&m).and(v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}

/// Mean losses over the minibatches of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

/// Training-time view of one sample; `weight = 0` masks it out entirely.
#[derive(Debug, Clone, Copy)]
pub struct UpdateSample<'a> {
    pub obs: &'a [f64],
    pub ego: &'a EgoGraph,
    pub action: usize,
    pub log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
    pub weight: f64,
}

impl<'a> From<&'a AgentSample> for UpdateSample<'a> {
    fn from(s: &'a AgentSample) -> Self {
        UpdateSample {
            obs: &s.obs,
            ego: &s.ego,
            action: s.action,
            log_prob: s.log_prob,
            advantage: s.advantage,
            ret: s.ret,
            weight: 1.0,
        }
    }
}

/// Normalises advantages over the weighted samples (mean 0, std 1).
pub fn normalize_advantages(samples: &mut [UpdateSample<'_>]) {
    let w: f64 = samples.iter().map(|s| s.weight).sum();
    if w <= 0.0 {
        return;
    }
    let mean = samples.iter().map(|s| s.weight * s.advantage).sum::<f64>() / w;
    let var = samples.iter().map(|s| s.weight * (s.advantage - mean).powi(2)).sum::<f64>() / w;
    let std = var.sqrt() + 1e-8;
    for s in samples.iter_mut() {
        if s.weight != 0.0 {
            s.advantage = (s.advantage - mean) / std;
        }
    }
}

pub struct UpdateContext<'a> {
    pub cfg: &'a TrainConfig,
    pub value_norm: &'a ValueNorm,
    pub schedule: Schedule,
    pub episode: usize,
}

/// Runs `ppo_epochs` passes of shuffled minibatch updates over `samples`.
pub fn ppo_update(
    actor: &mut Actor,
    critic: &mut Critic,
    actor_opt: &mut Optimizer,
    critic_opt: &mut Optimizer,
    mut samples: Vec<UpdateSample<'_>>,
    ctx: &UpdateContext<'_>,
    minibatch_rng: &mut SimRng,
    shuffle_rng: &mut SimRng,
) -> Result<LossStats, TrainError> {
    let cfg = ctx.cfg;
    normalize_advantages(&mut samples);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = LossStats::default();
    let mut batches = 0usize;
    for epoch in 0..cfg.ppo_epochs {
        order.shuffle(minibatch_rng);
        for chunk in order.chunks(cfg.batch) {
            let mb: Vec<&UpdateSample<'_>> = chunk.iter().map(|&i| &samples[i]).collect();
            let obs_rows: Vec<&[f64]> = mb.iter().map(|s| s.obs).collect();
            let obs = obs_matrix(&obs_rows)?;
            let actions: Vec<usize> = mb.iter().map(|s| s.action).collect();
            let old: Vec<f64> = mb.iter().map(|s| s.log_prob).collect();
            let adv: Vec<f64> = mb.iter().map(|s| s.advantage).collect();
            let weights: Vec<f64> = mb.iter().map(|s| s.weight).collect();
            let targets: Vec<f64> = mb.iter().map(|s| ctx.value_norm.normalize(s.ret)).collect();
            let graphs: Vec<EgoGraph> = if critic.uses_ros() {
                mb.iter().map(|s| ros_shuffle(s.ego, shuffle_rng)).collect()
            } else {
                mb.iter().map(|s| s.ego.clone()).collect()
            };
            let graph_refs: Vec<&EgoGraph> = graphs.iter().collect();
            let batch = EgoGraphBatch::from_graphs(&graph_refs)?;

            let (a_loss, entropy, mut a_grads) =
                actor_loss(actor, &obs, &actions, &old, &adv, &weights, cfg.clip, ctx.schedule.beta_ent)?;
            let (c_loss, mut c_grads) = critic_loss(critic, &batch, &targets, &weights, cfg.huber_delta)?;
            if !a_loss.is_finite() || !c_loss.is_finite() || !a_grads.is_finite() || !c_grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    episode: ctx.episode,
                    epoch,
                    actor_loss: a_loss,
                    critic_loss: c_loss,
                });
            }
            clip_grad_norm(&mut a_grads, cfg.grad_clip);
            clip_grad_norm(&mut c_grads, cfg.grad_clip);
            actor_opt.step(&mut actor.params, &a_grads, ctx.schedule.actor_lr);
            critic_opt.step(critic.params_mut(), &c_grads, ctx.schedule.critic_lr);
            stats.actor_loss += a_loss;
            stats.critic_loss += c_loss;
            stats.entropy += entropy;
            batches += 1;
        }
    }
    if batches > 0 {
        let n = batches as f64;
        stats.actor_loss /= n;
        stats.critic_loss /= n;
        stats.entropy /= n;
    }
    Ok(stats)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    pub c_cov: f64,
    pub handoffs: f64,
    pub e_eff: f64,
    pub jfi_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub beta_ent: f64,
}

pub const TRAIN_COLUMNS: [&str; 10] = [
    "episode",
    "mean_reward",
    "c_cov",
    "handoffs",
    "e_eff",
    "jfi_rate",
    "actor_loss",
    "critic_loss",
    "entropy",
    "beta_ent",
];

pub fn write_train_csv<W: Write>(out: W, logs: &[EpisodeLog]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for log in logs {
        w.serialize(log)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds an actor from saved tensors, inferring layer sizes from shapes.
pub fn actor_from_params(params: ParameterSet) -> Result<Actor, TrainError> {
    if params.is_empty() || params.len() % 2 != 0 {
        return Err(TrainError::CheckpointMismatch("actor tensors missing".into()));
    }
    let mut sizes = vec![params.get(0).nrows()];
    for l in 0..params.len() / 2 {
        let (w, b) = (params.get(2 * l), params.get(2 * l + 1));
        let expect_w = format!("actor.l{l}.w");
        if params.name(2 * l) != expect_w || w.nrows() != *sizes.last().expect("non-empty") || b.dim() != (1, w.ncols()) {
            return Err(TrainError::CheckpointMismatch(format!("unexpected actor layer {l}")));
        }
        sizes.push(w.ncols());
    }
    if *sizes.last().expect("non-empty") != NUM_ACTIONS {
        return Err(TrainError::CheckpointMismatch("actor output width is not the action count".into()));
    }
    let net = Mlp {
        sizes,
        tanh_output: false,
        first: 0,
    };
    Ok(Actor { params, net })
}

/// Loads the policy of a checkpoint after checking it was trained for this
/// scenario model and controller.
pub fn load_policy(path: &Path, scenario: &ScenarioConfig, controller: Controller) -> Result<(Actor, Manifest), TrainError> {
    let (manifest, params) = load_checkpoint(path)?;
    if manifest.controller != controller.as_str() {
        return Err(TrainError::CheckpointMismatch(format!(
            "checkpoint controller {} differs from {}",
            manifest.controller, controller
        )));
    }
    let hash = scenario.model_hash();
    if manifest.config_hash != hash {
        return Err(TrainError::CheckpointMismatch(format!(
            "scenario hash {} differs from checkpoint {}",
            hash, manifest.config_hash
        )));
    }
    let actor = actor_from_params(params.subset("actor."))?;
    if actor.obs_dim() != Observation::dim(scenario.num_uavs) {
        return Err(TrainError::CheckpointMismatch("observation width differs".into()));
    }
    Ok((actor, manifest))
}

/// Owns networks and optimizer state for one training seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub scenario: ScenarioConfig,
    pub cfg: TrainConfig,
    pub controller: Controller,
    pub actor: Actor,
    pub critic: Critic,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    value_norm: ValueNorm,
    episode: usize,
}

impl Trainer {
    pub fn new(scenario: &ScenarioConfig, cfg: &TrainConfig, controller: Controller) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        scenario.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut rng = stream_rng(cfg.seed, Stream::WeightInit);
        let actor = Actor::new(Observation::dim(scenario.num_uavs), &cfg.actor_hidden, NUM_ACTIONS, &mut rng);
        let critic = Critic::new(controller, scenario.num_uavs, &mut rng)?;
        Ok(Trainer {
            scenario: scenario.clone(),
            cfg: cfg.clone(),
            controller,
            actor_opt: Optimizer::new(cfg.optimizer, &actor.params),
            critic_opt: Optimizer::new(cfg.optimizer, critic.params()),
            actor,
            critic,
            value_norm: ValueNorm::new(cfg.value_norm),
            episode: 0,
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn env_seed(&self, episode: usize, env: usize) -> u64 {
        derive_seed(self.cfg.seed, &[episode as u64, env as u64])
    }

    /// Collects one episode per parallel environment and applies one PPO update.
    pub fn train_episode(&mut self) -> Result<EpisodeLog, TrainError> {
        let e = self.episode;
        let schedule = anneal(&self.cfg, e);
        let mut envs = Vec::with_capacity(self.cfg.num_envs);
        let mut rngs = Vec::with_capacity(self.cfg.num_envs);
        for j in 0..self.cfg.num_envs {
            let seed = self.env_seed(e, j);
            envs.push(Env::reset(&self.scenario, seed)?.0);
            rngs.push(stream_rng(seed, Stream::Policy));
        }
        let buffer = collect_rollout(&mut envs, &self.actor, &self.critic, &self.value_norm, &mut rngs, &self.cfg)?;
        let returns: Vec<f64> = buffer.samples().map(|s| s.ret).collect();
        self.value_norm.update(&returns);
        let samples: Vec<UpdateSample<'_>> = buffer.samples().map(UpdateSample::from).collect();
        let update_seed = derive_seed(self.cfg.seed, &[e as u64]);
        let ctx = UpdateContext {
            cfg: &self.cfg,
            value_norm: &self.value_norm,
            schedule,
            episode: e,
        };
        let stats = ppo_update(
            &mut self.actor,
            &mut self.critic,
            &mut self.actor_opt,
            &mut self.critic_opt,
            samples,
            &ctx,
            &mut stream_rng(update_seed, Stream::Minibatch),
            &mut stream_rng(update_seed, Stream::Shuffle),
        )?;
        self.episode += 1;
        let all: Vec<&StepMetrics> = buffer.envs.iter().flat_map(|r| r.metrics.iter()).collect();
        let n = all.len().max(1) as f64;
        let mean = |f: fn(&StepMetrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
        Ok(EpisodeLog {
            episode: e,
            mean_reward: mean(|m| m.utility),
            c_cov: mean(|m| m.c_cov),
            handoffs: mean(|m| m.handoffs as f64),
            e_eff: mean(|m| m.e_eff),
            jfi_rate: mean(|m| m.jfi_rate),
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            entropy: stats.entropy,
            beta_ent: schedule.beta_ent,
        })
    }

    /// Trains for the configured number of episodes; `on_episode` sees every
    /// log row as it is produced.
    pub fn run(&mut self, mut on_episode: impl FnMut(&Trainer, &EpisodeLog) -> Result<(), TrainError>) -> Result<Vec<EpisodeLog>, TrainError> {
        let mut logs = Vec::with_capacity(self.cfg.episodes);
        while self.episode < self.cfg.episodes {
            let log = self.train_episode()?;
            on_episode(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn parameters(&self) -> ParameterSet {
        let mut all = self.actor.params.clone();
        all.extend(self.critic.params());
        all
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(
            path,
            &self.parameters(),
            self.cfg.seed,
            &self.scenario.model_hash(),
            self.controller.as_str(),
            self.episode,
        )?;
        Ok(())
    }

    /// Restores actor and critic weights from a checkpoint of the same shape.
    pub fn load_weights(&mut self, path: &Path) -> Result<Manifest, TrainError> {
        let (manifest, params) = load_checkpoint(path)?;
        if manifest.config_hash != self.scenario.model_hash() || manifest.controller != self.controller.as_str() {
            return Err(TrainError::CheckpointMismatch("scenario or controller differs".into()));
        }
        self.actor.params.assign_from(&params.subset("actor."))?;
        self.critic.params_mut().assign_from(&params.subset("critic."))?;
        Ok(manifest)
    }
}
