//! Multi-agent environment: observations, discrete velocity actions with
//! inertia, hard flight constraints, scheduled failures and the shared reward.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{associate_and_rate, draw_shadowing, LinkTable};
use crate::metrics::{step_metrics, StepMetrics};
use crate::mobility::{init_uavs, init_users, step_users, MobilityError};
use crate::nn::EgoGraph;
use crate::power::{total_power, PowerError};
use crate::rng::{stream_rng, SimRng, Stream};
use crate::world::{
    apply_failure, pick_random_alive, FailureError, FailureTarget, NodeId, ScenarioConfig, Vec2, Vec3, WorldState,
};

pub const NUM_ACTIONS: usize = 27;
pub const HOVER_ACTION: usize = 13;

pub const SELF_DIM: usize = 4;
pub const GBS_DIM: usize = 3;
/// Relative position (3), velocity (3), presence bit.
pub const NEIGHBOR_DIM: usize = 7;
pub const USER_DIM: usize = 6;
/// Critic entity row: relative position (3), velocity (3), altitude, GBS flag,
/// user summary (6).
pub const ENTITY_DIM: usize = 8 + USER_DIM;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("expected {expected} action slots, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("UAV {0} is alive but no action was supplied")]
    MissingAction(usize),
    #[error("UAV {0} has failed and cannot act")]
    ActionForDeadAgent(usize),
    #[error("action index {0} outside 0..27")]
    InvalidAction(usize),
    #[error("episode already finished at t = {0}")]
    EpisodeOver(usize),
    #[error("agent {0} is not alive")]
    DeadAgent(usize),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Failure(#[from] FailureError),
    #[error(transparent)]
    Power(#[from] PowerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Velocity inertia in [0, 1].
    pub beta: f64,
    /// Mechanical noise std-dev per axis (m/s).
    pub noise_std: f64,
    /// Vertical component of climb/descend targets (m/s).
    pub v_z_max: f64,
    /// Radius of the user-sensing footprint (m).
    pub r_sense: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            beta: 0.6,
            noise_std: 0.1,
            v_z_max: 5.0,
            r_sense: 500.0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err("dynamics.beta must lie in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0 && self.v_z_max >= 0.0 && self.r_sense > 0.0) {
            return Err("dynamics noise/v_z_max must be non-negative and r_sense positive".into());
        }
        Ok(())
    }
}

/// Unit direction of action `a` on the {-1, 0, 1}³ grid.
pub fn action_direction(a: usize) -> [i8; 3] {
    [(a / 9) as i8 - 1, ((a / 3) % 3) as i8 - 1, (a % 3) as i8 - 1]
}

/// Target velocity of action `a`, norm-limited to the UAV speed cap.
pub fn action_target(a: usize, config: &ScenarioConfig) -> Vec3 {
    let [dx, dy, dz] = action_direction(a);
    let v = Vec3::new(
        dx as f64 * config.v_max_uav,
        dy as f64 * config.v_max_uav,
        dz as f64 * config.dynamics.v_z_max,
    );
    let n = v.norm();
    if n > config.v_max_uav {
        v * (config.v_max_uav / n)
    } else {
        v
    }
}

/// Local observation of one agent. Every component lies in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Altitude mapped from the corridor to [-1, 1], then velocity / V_max.
    pub x_self: [f64; SELF_DIM],
    /// (p_GBS - p_k) / area side.
    pub x_gbs: [f64; GBS_DIM],
    /// One slot per other UAV in index order; masked slots are all zero.
    pub x_neigh: Vec<[f64; NEIGHBOR_DIM]>,
    /// Served share, served centroid offset (2), in-range centroid offset (2),
    /// uncovered in-range fraction.
    pub x_user: [f64; USER_DIM],
}

impl Observation {
    pub fn dim(num_uavs: usize) -> usize {
        SELF_DIM + GBS_DIM + NEIGHBOR_DIM * num_uavs.saturating_sub(1) + USER_DIM
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dim(self.x_neigh.len() + 1));
        v.extend_from_slice(&self.x_self);
        v.extend_from_slice(&self.x_gbs);
        for slot in &self.x_neigh {
            v.extend_from_slice(slot);
        }
        v.extend_from_slice(&self.x_user);
        v
    }

    pub fn neighbor_mask(&self) -> Vec<bool> {
        self.x_neigh.iter().map(|s| s[NEIGHBOR_DIM - 1] == 1.0).collect()
    }
}

fn unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

fn altitude_norm(z: f64, config: &ScenarioConfig) -> f64 {
    unit(2.0 * (z - config.h_min()) / (config.h_max() - config.h_min()) - 1.0)
}

fn xy(p: &Vec3) -> Vec2 {
    Vec2::new(p.x, p.y)
}

/// Alive UAVs other than `k` within communication range.
fn is_neighbor(state: &WorldState, config: &ScenarioConfig, k: usize, j: usize) -> bool {
    j != k && state.alive[j] && (state.uav_pos[j] - state.uav_pos[k]).norm() <= config.r_comm
}

/// Summary of the users a node serves and the users it can sense.
pub fn user_summary(
    state: &WorldState,
    links: &LinkTable,
    node: NodeId,
    config: &ScenarioConfig,
) -> [f64; USER_DIM] {
    let centre = xy(&state.node_position(node));
    let side = config.area_side_m;
    let m_total = state.num_users() as f64;
    let mut served = 0usize;
    let mut served_sum = Vec2::zeros();
    let mut in_range = 0usize;
    let mut in_range_sum = Vec2::zeros();
    let mut uncovered = 0usize;
    for (m, q) in state.user_pos.iter().enumerate() {
        if links.serving[m] == node {
            served += 1;
            served_sum += q;
        }
        if (q - centre).norm() <= config.dynamics.r_sense {
            in_range += 1;
            in_range_sum += q;
            if links.rate[m] < config.r_th {
                uncovered += 1;
            }
        }
    }
    let served_off = if served > 0 {
        (served_sum / served as f64 - centre) / side
    } else {
        Vec2::zeros()
    };
    let range_off = if in_range > 0 {
        (in_range_sum / in_range as f64 - centre) / side
    } else {
        Vec2::zeros()
    };
    let uncovered_frac = if in_range > 0 {
        uncovered as f64 / in_range as f64
    } else {
        0.0
    };
    [
        served as f64 / m_total,
        unit(served_off.x),
        unit(served_off.y),
        unit(range_off.x),
        unit(range_off.y),
        uncovered_frac,
    ]
}

pub fn build_observation(
    state: &WorldState,
    links: &LinkTable,
    k: usize,
    config: &ScenarioConfig,
) -> Result<Observation, EnvError> {
    if k >= state.num_uavs() || !state.alive[k] {
        return Err(EnvError::DeadAgent(k));
    }
    let side = config.area_side_m;
    let vmax = config.v_max_uav;
    let p = state.uav_pos[k];
    let v = state.uav_vel[k];
    let x_self = [altitude_norm(p.z, config), unit(v.x / vmax), unit(v.y / vmax), unit(v.z / vmax)];
    let g = (state.gbs_pos - p) / side;
    let x_gbs = [unit(g.x), unit(g.y), unit(g.z)];
    let x_neigh = (0..state.num_uavs())
        .filter(|&j| j != k)
        .map(|j| {
            if is_neighbor(state, config, k, j) {
                let d = (state.uav_pos[j] - p) / side;
                let vj = state.uav_vel[j] / vmax;
                [unit(d.x), unit(d.y), unit(d.z), unit(vj.x), unit(vj.y), unit(vj.z), 1.0]
            } else {
                [0.0; NEIGHBOR_DIM]
            }
        })
        .collect();
    Ok(Observation {
        x_self,
        x_gbs,
        x_neigh,
        x_user: user_summary(state, links, NodeId::Uav(k), config),
    })
}

fn entity_row(state: &WorldState, links: &LinkTable, ego: usize, node: NodeId, config: &ScenarioConfig) -> Vec<f64> {
    let side = config.area_side_m;
    let vmax = config.v_max_uav;
    let rel = (state.node_position(node) - state.uav_pos[ego]) / side;
    let mut row = Vec::with_capacity(ENTITY_DIM);
    row.extend([unit(rel.x), unit(rel.y), unit(rel.z)]);
    match node {
        NodeId::Uav(j) => {
            let v = state.uav_vel[j] / vmax;
            row.extend([unit(v.x), unit(v.y), unit(v.z), altitude_norm(state.uav_pos[j].z, config), 0.0]);
        }
        NodeId::Gbs => row.extend([0.0, 0.0, 0.0, 0.0, 1.0]),
    }
    row.extend(user_summary(state, links, node, config));
    row
}

/// Centralised-critic view of agent `k`: its own entity, one row per other UAV
/// (zeroed and masked when failed or out of range) and the GBS anchor.
pub fn build_ego_graph(
    state: &WorldState,
    links: &LinkTable,
    k: usize,
    config: &ScenarioConfig,
) -> Result<EgoGraph, EnvError> {
    if k >= state.num_uavs() || !state.alive[k] {
        return Err(EnvError::DeadAgent(k));
    }
    let mut neighbors = Vec::with_capacity(state.num_uavs().saturating_sub(1));
    let mut mask = Vec::with_capacity(neighbors.capacity());
    for j in (0..state.num_uavs()).filter(|&j| j != k) {
        if is_neighbor(state, config, k, j) {
            neighbors.push(entity_row(state, links, k, NodeId::Uav(j), config));
            mask.push(true);
        } else {
            neighbors.push(vec![0.0; ENTITY_DIM]);
            mask.push(false);
        }
    }
    Ok(EgoGraph {
        ego: entity_row(state, links, k, NodeId::Uav(k), config),
        neighbors,
        mask,
        anchor: entity_row(state, links, k, NodeId::Gbs, config),
    })
}

/// Σ γ^t r_t
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observations: Vec<Option<Observation>>,
    pub reward: f64,
    pub metrics: StepMetrics,
    pub done: bool,
    /// UAVs that failed during this step.
    pub failed: Vec<usize>,
}

/// One environment instance. Owns its state and random streams.
#[derive(Debug, Clone)]
pub struct Env {
    config: ScenarioConfig,
    seed: u64,
    state: WorldState,
    links: LinkTable,
    metrics: StepMetrics,
    dynamics_rng: SimRng,
    users_rng: SimRng,
    failure_rng: SimRng,
}

impl Env {
    /// Starts a fresh episode. Identical `(config, seed)` give identical
    /// episodes.
    pub fn reset(config: &ScenarioConfig, seed: u64) -> Result<(Env, Vec<Option<Observation>>), EnvError> {
        let mut init_rng = stream_rng(seed, Stream::UserInit);
        let users = init_users(config, &mut init_rng)?;
        let mut uav_pos = init_uavs(config, users.groups.as_ref());
        separate(&mut uav_pos, config);
        let k = config.num_uavs;
        let m = config.num_users;
        let shadowing_db = draw_shadowing(m, &config.channel_profile, &mut stream_rng(seed, Stream::Shadowing));
        let state = WorldState {
            t: 0,
            uav_pos,
            uav_vel: vec![Vec3::zeros(); k],
            alive: vec![true; k],
            gbs_pos: config.gbs_pos(),
            user_pos: users.positions,
            user_vel: users.velocities,
            user_mean_vel: users.mean_velocities,
            groups: users.groups,
            association: vec![NodeId::Gbs; m],
            prev_association: vec![NodeId::Gbs; m],
            shadowing_db,
        };
        Self::from_state(config, state, seed)
    }

    /// Starts an episode from a hand-built state (t is kept as given).
    /// Failures scheduled at the state's step are applied first.
    pub fn from_state(
        config: &ScenarioConfig,
        mut state: WorldState,
        seed: u64,
    ) -> Result<(Env, Vec<Option<Observation>>), EnvError> {
        let mut failure_rng = stream_rng(seed, Stream::Failure);
        apply_scheduled_failures(&mut state, config, &mut failure_rng)?;
        let links = associate_and_rate(&state, config);
        state.association = links.serving.clone();
        state.prev_association = links.serving.clone();
        let power = total_power(&state, config)?;
        let metrics = step_metrics(&links, &state, power, &config.reward, config);
        let env = Env {
            config: config.clone(),
            seed,
            state,
            links,
            metrics,
            dynamics_rng: stream_rng(seed, Stream::Dynamics),
            users_rng: stream_rng(seed, Stream::UserMobility),
            failure_rng,
        };
        let obs = env.observations();
        Ok((env, obs))
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn links(&self) -> &LinkTable {
        &self.links
    }

    pub fn metrics(&self) -> &StepMetrics {
        &self.metrics
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    pub fn is_done(&self) -> bool {
        self.state.t >= self.config.episode_len
    }

    pub fn observations(&self) -> Vec<Option<Observation>> {
        (0..self.state.num_uavs())
            .map(|k| build_observation(&self.state, &self.links, k, &self.config).ok())
            .collect()
    }

    pub fn ego_graphs(&self) -> Vec<Option<EgoGraph>> {
        (0..self.state.num_uavs())
            .map(|k| build_ego_graph(&self.state, &self.links, k, &self.config).ok())
            .collect()
    }

    pub fn step(&mut self, actions: &[Option<usize>]) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeOver(self.state.t));
        }
        let k_count = self.state.num_uavs();
        if actions.len() != k_count {
            return Err(EnvError::ActionCount {
                expected: k_count,
                got: actions.len(),
            });
        }
        for (k, a) in actions.iter().enumerate() {
            match (self.state.alive[k], a) {
                (true, None) => return Err(EnvError::MissingAction(k)),
                (false, Some(_)) => return Err(EnvError::ActionForDeadAgent(k)),
                (true, Some(a)) if *a >= NUM_ACTIONS => return Err(EnvError::InvalidAction(*a)),
                _ => {}
            }
        }
        let cfg = &self.config;
        let dyn_cfg = &cfg.dynamics;
        let old = self.state.uav_pos.clone();
        let mut proposed = old.clone();
        for k in 0..k_count {
            let Some(a) = actions[k] else { continue };
            let noise = Vec3::new(
                self.dynamics_rng.sample::<f64, _>(StandardNormal),
                self.dynamics_rng.sample::<f64, _>(StandardNormal),
                self.dynamics_rng.sample::<f64, _>(StandardNormal),
            ) * dyn_cfg.noise_std;
            let mut v = dyn_cfg.beta * self.state.uav_vel[k] + (1.0 - dyn_cfg.beta) * action_target(a, cfg) + noise;
            let speed = v.norm();
            if speed > cfg.v_max_uav {
                v *= cfg.v_max_uav / speed;
            }
            proposed[k] = clamp_to_airspace(old[k] + v * cfg.dt, cfg);
        }
        enforce_separation(&mut proposed, &old, &self.state.alive, &self.state.gbs_pos, cfg.d_safe);
        for k in 0..k_count {
            if self.state.alive[k] {
                self.state.uav_vel[k] = (proposed[k] - old[k]) / cfg.dt;
                self.state.uav_pos[k] = proposed[k];
            }
        }
        self.state.t += 1;
        let failed = apply_scheduled_failures(&mut self.state, cfg, &mut self.failure_rng)?;
        step_users(&mut self.state, cfg, &mut self.users_rng);
        self.state.prev_association = std::mem::take(&mut self.state.association);
        self.links = associate_and_rate(&self.state, cfg);
        self.state.association = self.links.serving.clone();
        let power = total_power(&self.state, cfg)?;
        self.metrics = step_metrics(&self.links, &self.state, power, &cfg.reward, cfg);
        Ok(StepOutcome {
            observations: self.observations(),
            reward: self.metrics.utility,
            metrics: self.metrics,
            done: self.is_done(),
            failed,
        })
    }
}

fn clamp_to_airspace(p: Vec3, cfg: &ScenarioConfig) -> Vec3 {
    Vec3::new(
        p.x.clamp(0.0, cfg.area_side_m),
        p.y.clamp(0.0, cfg.area_side_m),
        p.z.clamp(cfg.h_min(), cfg.h_max()),
    )
}

/// Any pair that would end closer than `d_safe` holds its higher-indexed
/// mover at its previous position (the lower-indexed one if the higher is
/// already holding). GBS conflicts always hold the UAV.
pub fn enforce_separation(proposed: &mut [Vec3], old: &[Vec3], alive: &[bool], gbs: &Vec3, d_safe: f64) {
    let n = proposed.len();
    let mut held = vec![false; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            if !held[i] && (proposed[i] - gbs).norm() < d_safe {
                held[i] = true;
                proposed[i] = old[i];
                changed = true;
            }
            for j in (i + 1)..n {
                if !alive[j] || (proposed[i] - proposed[j]).norm() >= d_safe {
                    continue;
                }
                let hold = if !held[j] {
                    j
                } else if !held[i] {
                    i
                } else {
                    continue;
                };
                held[hold] = true;
                proposed[hold] = old[hold];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Pushes initial UAV positions apart so the separation constraint holds at t = 0.
fn separate(pos: &mut [Vec3], cfg: &ScenarioConfig) {
    for j in 1..pos.len() {
        for _ in 0..64 {
            let clash = (0..j).find(|&i| (pos[i] - pos[j]).norm() < cfg.d_safe);
            let Some(i) = clash else { break };
            let mut dir = Vec3::new(pos[j].x - pos[i].x, pos[j].y - pos[i].y, 0.0);
            if dir.norm() < 1e-9 {
                dir = Vec3::new(1.0, 0.0, 0.0);
            }
            let shifted = pos[i] + dir.normalize() * cfg.d_safe * 1.5;
            pos[j] = clamp_to_airspace(
                if shifted == clamp_to_airspace(shifted, cfg) {
                    shifted
                } else {
                    pos[i] - dir.normalize() * cfg.d_safe * 1.5
                },
                cfg,
            );
        }
    }
}

fn apply_scheduled_failures(
    state: &mut WorldState,
    config: &ScenarioConfig,
    rng: &mut SimRng,
) -> Result<Vec<usize>, EnvError> {
    let mut failed = Vec::new();
    let t = state.t;
    for ev in config.failure_schedule.iter().filter(|e| e.step == t) {
        let target = match ev.uav {
            FailureTarget::Index(k) => k,
            FailureTarget::Random(_) => match pick_random_alive(state, rng) {
                Ok(k) => k,
                Err(FailureError::NoneAlive) => continue,
                Err(e) => return Err(e.into()),
            },
        };
        apply_failure(state, target)?;
        failed.push(target);
    }
    Ok(failed)
}

/// One recorded environment transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub observations: Vec<Option<Vec<f64>>>,
    pub actions: Vec<Option<usize>>,
    pub log_probs: Vec<Option<f64>>,
    pub reward: f64,
    pub alive: Vec<bool>,
    pub state: WorldState,
    pub done: bool,
}

/// Writes transitions as JSON lines.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter { out }
    }

    pub fn write(&mut self, tr: &Transition) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, tr)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::fixtures::state_with;
    use crate::world::{FailureEvent, ScenarioName};

    fn quiet(name: ScenarioName) -> ScenarioConfig {
        let mut c = ScenarioConfig::defaults(name);
        c.failure_schedule.clear();
        c
    }

    #[test]
    fn action_grid_properties() {
        let cfg = quiet(ScenarioName::Suburban);
        assert_eq!(action_direction(HOVER_ACTION), [0, 0, 0]);
        assert_eq!(action_target(HOVER_ACTION, &cfg), Vec3::zeros());
        let mut dirs = std::collections::HashSet::new();
        for a in 0..NUM_ACTIONS {
            assert!(action_target(a, &cfg).norm() <= cfg.v_max_uav + 1e-12);
            dirs.insert(action_direction(a));
        }
        assert_eq!(dirs.len(), 27);
        assert!((action_target(26, &cfg).norm() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic_and_shaped() {
        let cfg = quiet(ScenarioName::CrowdedUrban);
        let (a, oa) = Env::reset(&cfg, 17).unwrap();
        let (b, ob) = Env::reset(&cfg, 17).unwrap();
        assert_eq!(a.state(), b.state());
        assert_eq!(oa, ob);
        assert_eq!(oa.len(), 4);
        for o in &oa {
            let o = o.as_ref().unwrap();
            assert_eq!(o.x_neigh.len(), 3);
            assert_eq!(o.to_vec().len(), Observation::dim(4));
        }
        let (c, _) = Env::reset(&cfg, 18).unwrap();
        assert_ne!(a.state().user_pos, c.state().user_pos);
        assert_eq!(a.metrics().handoffs, 0);
    }

    #[test]
    fn gbs_anchor_normalization() {
        let cfg = quiet(ScenarioName::Suburban);
        let s = state_with(&[[500.0, 500.0, 100.0], [100.0, 100.0, 100.0]], &[[10.0, 10.0]], [500.0, 500.0, 0.0]);
        let (env, obs) = Env::from_state(&cfg, s, 0).unwrap();
        let o = obs[0].as_ref().unwrap();
        assert_eq!(o.x_gbs, [0.0, 0.0, -0.1]);
        assert_eq!(o.x_self[0], 0.0);
        assert!(build_observation(env.state(), env.links(), 5, &cfg).is_err());
    }

    #[test]
    fn neighbor_range_cut_and_failure_masking() {
        let mut cfg = quiet(ScenarioName::Suburban);
        cfg.r_comm = 300.0;
        let s = state_with(
            &[[100.0, 100.0, 100.0], [399.0, 100.0, 100.0], [401.0, 100.0, 100.0]],
            &[[10.0, 10.0]],
            [500.0, 500.0, 0.0],
        );
        let (env, obs) = Env::from_state(&cfg, s.clone(), 0).unwrap();
        assert_eq!(obs[0].as_ref().unwrap().neighbor_mask(), vec![true, false]);
        assert_eq!(obs[0].as_ref().unwrap().x_neigh[1], [0.0; NEIGHBOR_DIM]);
        let eg = env.ego_graphs()[0].clone().unwrap();
        assert_eq!(eg.mask, vec![true, false]);
        assert!(eg.neighbors[1].iter().all(|&x| x == 0.0));
        assert_eq!(eg.anchor[7], 1.0);

        let mut cfg = quiet(ScenarioName::Suburban);
        cfg.failure_schedule = vec![FailureEvent::index_at(1, 2)];
        let (mut env, obs) = Env::from_state(&cfg, s, 0).unwrap();
        assert_eq!(obs[0].as_ref().unwrap().neighbor_mask(), vec![true, true]);
        let out = env.step(&[Some(HOVER_ACTION); 3]).unwrap();
        assert_eq!(out.failed, vec![2]);
        assert!(out.observations[2].is_none());
        assert_eq!(out.observations[0].as_ref().unwrap().neighbor_mask(), vec![true, false]);
        assert_eq!(out.observations[1].as_ref().unwrap().neighbor_mask(), vec![true, false]);
        assert!(matches!(
            env.step(&[Some(HOVER_ACTION); 3]),
            Err(EnvError::ActionForDeadAgent(2))
        ));
    }

    #[test]
    fn corner_uav_sees_users_toward_center() {
        let mut cfg = quiet(ScenarioName::Rural);
        cfg.num_users = 2000;
        let (mut env, _) = Env::reset(&cfg, 3).unwrap();
        let mut st = env.state().clone();
        st.uav_pos[0] = Vec3::new(0.0, 0.0, 100.0);
        let (env2, obs) = Env::from_state(&cfg, st, 3).unwrap();
        let u = obs[0].as_ref().unwrap().x_user;
        // Uniform users in the quarter disc of radius 500: centroid at 4r/(3π) per axis.
        let expect = 4.0 * 500.0 / (3.0 * std::f64::consts::PI) / 1000.0;
        assert!((u[3] - expect).abs() < 0.02 && (u[4] - expect).abs() < 0.02, "{u:?}");
        drop(env2);
        env.step(&[Some(HOVER_ACTION); 4]).unwrap();
    }

    #[test]
    fn full_inertia_keeps_velocity() {
        let mut cfg = quiet(ScenarioName::Suburban);
        cfg.dynamics.beta = 1.0;
        cfg.dynamics.noise_std = 0.0;
        let mut s = state_with(&[[300.0, 300.0, 100.0]], &[[10.0, 10.0]], [500.0, 500.0, 0.0]);
        s.uav_vel[0] = Vec3::new(3.0, -2.0, 0.5);
        let (mut env, _) = Env::from_state(&cfg, s, 0).unwrap();
        for a in [0, 13, 26] {
            env.step(&[Some(a)]).unwrap();
            assert!((env.state().uav_vel[0] - Vec3::new(3.0, -2.0, 0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn hover_from_rest_is_stationary() {
        let mut cfg = quiet(ScenarioName::Suburban);
        cfg.dynamics.noise_std = 0.0;
        let s = state_with(&[[300.0, 300.0, 100.0]], &[[10.0, 10.0]], [500.0, 500.0, 0.0]);
        let (mut env, _) = Env::from_state(&cfg, s, 0).unwrap();
        for _ in 0..5 {
            env.step(&[Some(HOVER_ACTION)]).unwrap();
        }
        assert_eq!(env.state().uav_pos[0], Vec3::new(300.0, 300.0, 100.0));
    }

    #[test]
    fn converging_pair_holds_higher_index() {
        let mut cfg = quiet(ScenarioName::Suburban);
        cfg.dynamics.noise_std = 0.0;
        cfg.dynamics.beta = 0.0;
        // U0 flies +x to 330, U1 flies -x to 322: they would end 8 m apart.
        let s = state_with(&[[300.0, 300.0, 100.0], [352.0, 300.0, 100.0]], &[[10.0, 10.0]], [500.0, 500.0, 0.0]);
        let (mut env, _) = Env::from_state(&cfg, s, 0).unwrap();
        let east = 22;
        let west = 4;
        assert_eq!(action_direction(east), [1, 0, 0]);
        assert_eq!(action_direction(west), [-1, 0, 0]);
        env.step(&[Some(east), Some(west)]).unwrap();
        let st = env.state();
        assert_eq!(st.uav_pos[0], Vec3::new(330.0, 300.0, 100.0));
        assert_eq!(st.uav_pos[1], Vec3::new(352.0, 300.0, 100.0));
        assert!((st.uav_pos[0] - st.uav_pos[1]).norm() >= cfg.d_safe);
        assert_eq!(st.uav_vel[1], Vec3::zeros());
    }

    #[test]
    fn separation_falls_back_to_lower_index_when_needed() {
        // U1 hovers; U0 would land 5 m from it, so U0 ends up holding as well.
        let old = [Vec3::new(300.0, 0.0, 100.0), Vec3::new(335.0, 0.0, 100.0)];
        let mut proposed = [Vec3::new(330.0, 0.0, 100.0), old[1]];
        enforce_separation(&mut proposed, &old, &[true, true], &Vec3::new(0.0, 500.0, 0.0), 10.0);
        assert_eq!(proposed, old);
        // Dead UAVs are not obstacles.
        let mut proposed = [Vec3::new(330.0, 0.0, 100.0), old[1]];
        enforce_separation(&mut proposed, &old, &[true, false], &Vec3::new(0.0, 500.0, 0.0), 10.0);
        assert_eq!(proposed[0], Vec3::new(330.0, 0.0, 100.0));
    }

    #[test]
    fn episode_ends_at_horizon_and_rejects_bad_actions() {
        let mut cfg = quiet(ScenarioName::Rural);
        cfg.episode_len = 3;
        cfg.num_users = 10;
        let (mut env, _) = Env::reset(&cfg, 1).unwrap();
        assert!(matches!(env.step(&[Some(1); 3]), Err(EnvError::ActionCount { .. })));
        assert!(matches!(
            env.step(&[Some(1), Some(2), None, Some(3)]),
            Err(EnvError::MissingAction(2))
        ));
        assert!(matches!(env.step(&[Some(27); 4]), Err(EnvError::InvalidAction(27))));
        let mut done = false;
        for _ in 0..3 {
            done = env.step(&[Some(HOVER_ACTION); 4]).unwrap().done;
        }
        assert!(done);
        assert!(matches!(env.step(&[Some(HOVER_ACTION); 4]), Err(EnvError::EpisodeOver(3))));
    }

    #[test]
    fn discounted_return_examples() {
        assert!((discounted_return(&[1.0, 2.0, 3.0], 0.5) - 2.75).abs() < 1e-15);
        assert_eq!(discounted_return(&[4.0, 9.0], 0.0), 4.0);
        let n = 500;
        let g: f64 = 0.99;
        let expect = (1.0 - g.powi(n)) / (1.0 - g);
        assert!((discounted_return(&vec![1.0; n as usize], g) - expect).abs() < 1e-9);
        assert!((expect - 100.0).abs() < 1.0);
    }

    #[test]
    fn trace_writer_emits_json_lines() {
        let cfg = quiet(ScenarioName::Rural);
        let (env, obs) = Env::reset(&cfg, 1).unwrap();
        let tr = Transition {
            t: 0,
            observations: obs.iter().map(|o| o.as_ref().map(Observation::to_vec)).collect(),
            actions: vec![Some(HOVER_ACTION); 4],
            log_probs: vec![Some(-3.29); 4],
            reward: 1.0,
            alive: env.state().alive.clone(),
            state: env.state().clone(),
            done: false,
        };
        let mut w = TraceWriter::new(Vec::new());
        w.write(&tr).unwrap();
        w.write(&tr).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: Transition = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.actions, tr.actions);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["t", "observations", "actions", "log_probs", "reward", "alive", "state", "done"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
