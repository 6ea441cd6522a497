//! Comparison controllers: MAPPO with a flat MLP critic, and a geometric
//! K-Means placement policy.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::env::{action_target, HOVER_ACTION, NUM_ACTIONS};
use crate::mobility::kmeans;
use crate::nn::{EgoGraphBatch, Mlp, MlpCache, NnError, ParameterSet};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::world::{ScenarioConfig, Vec3, WorldState};

/// Value network over the ego graph flattened in fixed agent order
/// (`[ego, neighbor slots…, anchor]`, dead slots zero).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCritic {
    pub params: ParameterSet,
    pub net: Mlp,
    pub entity_dim: usize,
    /// Neighbor slots plus the anchor.
    pub slots: usize,
}

#[derive(Debug, Clone)]
pub struct MlpCriticCache {
    pub net: MlpCache,
}

impl MlpCritic {
    pub fn new<R: Rng + ?Sized>(num_uavs: usize, entity_dim: usize, hidden: &[usize], rng: &mut R) -> MlpCritic {
        let slots = num_uavs;
        let mut sizes = vec![(slots + 1) * entity_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut params = ParameterSet::new();
        let net = Mlp::init(&mut params, "critic.mlp", &sizes, false, rng);
        MlpCritic {
            params,
            net,
            entity_dim,
            slots,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Row `i` is sample `i`'s ego row followed by its `slots` other rows.
    pub fn flatten(&self, batch: &EgoGraphBatch) -> Result<Array2<f64>, NnError> {
        if batch.slots != self.slots || batch.entity_dim() != self.entity_dim {
            return Err(NnError::Shape(format!(
                "MLP critic expects {} slots of width {}, got {} of width {}",
                self.slots,
                self.entity_dim,
                batch.slots,
                batch.entity_dim()
            )));
        }
        let e = self.entity_dim;
        let mut x = Array2::zeros((batch.len(), self.input_dim()));
        for i in 0..batch.len() {
            let mut row = x.row_mut(i);
            row.slice_mut(ndarray::s![..e]).assign(&batch.ego.row(i));
            for s in 0..self.slots {
                row.slice_mut(ndarray::s![(s + 1) * e..(s + 2) * e])
                    .assign(&batch.others.row(i * self.slots + s));
            }
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &EgoGraphBatch) -> Result<(Array1<f64>, MlpCriticCache), NnError> {
        let x = self.flatten(batch)?;
        let cache = self.net.forward(&self.params, &x)?;
        let values = cache.output.column(0).to_owned();
        Ok((values, MlpCriticCache { net: cache }))
    }

    pub fn values(&self, batch: &EgoGraphBatch) -> Result<Array1<f64>, NnError> {
        Ok(self.forward(batch)?.0)
    }

    pub fn backward(&self, cache: &MlpCriticCache, grad_values: &Array1<f64>) -> ParameterSet {
        let mut grads = self.params.zeros_like();
        let g = grad_values.clone().insert_axis(ndarray::Axis(1));
        self.net.backward(&self.params, &cache.net, &g, &mut grads);
        grads
    }
}

/// Value of a flat feature matrix (one sample per row).
pub fn mlp_critic_forward(critic: &MlpCritic, features: &Array2<f64>) -> Result<Array1<f64>, NnError> {
    Ok(critic.net.forward(&critic.params, features)?.output.column(0).to_owned())
}

/// Predicted next position under the inertial dynamics without noise.
fn predict(p: &Vec3, v: &Vec3, a: usize, config: &ScenarioConfig) -> Vec3 {
    let beta = config.dynamics.beta;
    let mut vel = beta * v + (1.0 - beta) * action_target(a, config);
    let speed = vel.norm();
    if speed > config.v_max_uav {
        vel *= config.v_max_uav / speed;
    }
    let q = p + vel * config.dt;
    Vec3::new(
        q.x.clamp(0.0, config.area_side_m),
        q.y.clamp(0.0, config.area_side_m),
        q.z.clamp(config.h_min(), config.h_max()),
    )
}

/// The action whose noise-free successor lands closest to `goal`. Hover wins ties.
pub fn steer_towards(p: &Vec3, v: &Vec3, goal: &Vec3, config: &ScenarioConfig) -> usize {
    let mut best = HOVER_ACTION;
    let mut best_d = (predict(p, v, HOVER_ACTION, config) - goal).norm();
    for a in 0..NUM_ACTIONS {
        let d = (predict(p, v, a, config) - goal).norm();
        if d < best_d {
            best_d = d;
            best = a;
        }
    }
    best
}

/// Goal positions per UAV (None for dead ones): K-Means over user positions
/// with K = alive count, matched greedily by ascending UAV–centroid distance.
pub fn kmeans_targets(state: &WorldState, config: &ScenarioConfig, seed: u64) -> Vec<Option<Vec3>> {
    let alive: Vec<usize> = state.alive_uavs().collect();
    let mut goals = vec![None; state.num_uavs()];
    if alive.is_empty() {
        return goals;
    }
    let k = alive.len().min(state.num_users());
    let mut rng = stream_rng(derive_seed(seed, &[state.t as u64]), Stream::KMeans);
    let centroids = match kmeans(
        &state.user_pos,
        k,
        config.mobility.kmeans_iters,
        config.mobility.kmeans_reseeds,
        &mut rng,
    ) {
        Ok(km) => km.centroids,
        Err(_) => Vec::new(),
    };
    let z = config.cruise_altitude();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * centroids.len());
    for &u in &alive {
        for (c, cen) in centroids.iter().enumerate() {
            let goal = Vec3::new(cen.x, cen.y, z);
            pairs.push(((state.uav_pos[u] - goal).norm(), u, c));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; centroids.len()];
    for (_, u, c) in pairs {
        if goals[u].is_none() && !used[c] {
            used[c] = true;
            goals[u] = Some(Vec3::new(centroids[c].x, centroids[c].y, z));
        }
    }
    for &u in &alive {
        if goals[u].is_none() {
            goals[u] = Some(state.uav_pos[u]);
        }
    }
    goals
}

/// Per-UAV action of the K-Means controller. Deterministic given `(state, seed)`.
pub fn kmeans_policy(state: &WorldState, config: &ScenarioConfig, seed: u64) -> Vec<Option<usize>> {
    kmeans_targets(state, config, seed)
        .iter()
        .enumerate()
        .map(|(k, goal)| goal.map(|g| steer_towards(&state.uav_pos[k], &state.uav_vel[k], &g, config)))
        .collect()
}
