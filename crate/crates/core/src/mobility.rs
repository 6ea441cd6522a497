//! Ground-user placement and motion (RPGM platoons or Gauss-Markov walkers),
//! plus initial UAV placement.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{GroupState, ScenarioConfig, Vec2, Vec3, WorldState};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MobilityError {
    #[error("k-means needs at least {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("k-means kept producing empty clusters after {0} re-seeds")]
    Degenerate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityKind {
    Rpgm,
    GaussMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilityParams {
    /// Gauss-Markov memory in [0, 1].
    pub alpha_gm: f64,
    /// Std-dev of the Gauss-Markov innovation per axis (m/s).
    pub noise_scale: f64,
    /// Spread of users around their cluster centroid at t = 0 (m).
    pub sigma_c: f64,
    /// Maximum distance of a user from its group centre (m).
    pub deviation_radius: f64,
    /// Largest per-step offset random-walk speed (m/s).
    pub offset_step: f64,
    pub waypoint_tolerance: f64,
    pub kmeans_iters: usize,
    pub kmeans_reseeds: usize,
}

impl Default for MobilityParams {
    fn default() -> Self {
        MobilityParams {
            alpha_gm: 0.8,
            noise_scale: 1.5,
            sigma_c: 80.0,
            deviation_radius: 50.0,
            offset_step: 1.5,
            waypoint_tolerance: 1.0,
            kmeans_iters: 50,
            kmeans_reseeds: 16,
        }
    }
}

impl MobilityParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.alpha_gm) {
            return Err(format!("mobility.alpha_gm must lie in [0, 1], got {}", self.alpha_gm));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("sigma_c", self.sigma_c),
            ("deviation_radius", self.deviation_radius),
            ("offset_step", self.offset_step),
            ("waypoint_tolerance", self.waypoint_tolerance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("mobility.{name} must be non-negative, got {v}"));
            }
        }
        if self.kmeans_iters == 0 {
            return Err("mobility.kmeans_iters must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec2>,
    pub labels: Vec<usize>,
}

fn nearest(p: &Vec2, centroids: &[Vec2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Lloyd's algorithm with seeded initial centroids drawn from the points.
/// Nearest-centroid ties go to the lowest index; an empty cluster re-seeds its
/// centroid on a random point, up to `max_reseeds` times in total.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[Vec2],
    k: usize,
    max_iters: usize,
    max_reseeds: usize,
    rng: &mut R,
) -> Result<KMeans, MobilityError> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(MobilityError::TooFewPoints { k, n });
    }
    let mut centroids: Vec<Vec2> = rand::seq::index::sample(rng, n, k)
        .into_iter()
        .map(|i| points[i])
        .collect();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut reseeds = 0;
    let mut iter = 0;
    while iter < max_iters {
        let mut sums = vec![Vec2::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        let mut reseeded = false;
        for j in 0..k {
            if counts[j] == 0 {
                if reseeds == max_reseeds {
                    return Err(MobilityError::Degenerate(reseeds));
                }
                reseeds += 1;
                reseeded = true;
                centroids[j] = points[rng.random_range(0..n)];
            } else {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let converged = next == labels && !reseeded;
        labels = next;
        iter += 1;
        if converged {
            break;
        }
    }
    if (0..k).any(|j| !labels.contains(&j)) {
        return Err(MobilityError::Degenerate(reseeds));
    }
    Ok(KMeans { centroids, labels })
}

/// Initial user layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UserInit {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub mean_velocities: Vec<Vec2>,
    pub groups: Option<GroupState>,
}

pub fn clamp_to_area(p: Vec2, side: f64) -> Vec2 {
    Vec2::new(p.x.clamp(0.0, side), p.y.clamp(0.0, side))
}

fn uniform_point<R: Rng + ?Sized>(side: f64, rng: &mut R) -> Vec2 {
    Vec2::new(rng.random_range(0.0..=side), rng.random_range(0.0..=side))
}

fn limit_norm(v: Vec2, max: f64) -> Vec2 {
    let n = v.norm();
    if n > max && n > 0.0 {
        v * (max / n)
    } else {
        v
    }
}

/// Gaussian offset restricted to the deviation disc by rejection, falling back
/// to a radial clamp.
fn sample_offset<R: Rng + ?Sized>(sigma: f64, radius: f64, rng: &mut R) -> Vec2 {
    if sigma == 0.0 || radius == 0.0 {
        return Vec2::zeros();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut d = Vec2::zeros();
    for _ in 0..64 {
        d = Vec2::new(normal.sample(rng), normal.sample(rng));
        if d.norm() <= radius {
            return d;
        }
    }
    limit_norm(d, radius)
}

pub fn init_users<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<UserInit, MobilityError> {
    let m = config.num_users;
    let side = config.area_side_m;
    let params = &config.mobility;
    match config.mobility_kind {
        MobilityKind::GaussMarkov => {
            let positions: Vec<Vec2> = (0..m).map(|_| uniform_point(side, rng)).collect();
            let mean_velocities: Vec<Vec2> = (0..m)
                .map(|_| {
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    let speed = rng.random_range(0.0..=config.v_max_user);
                    Vec2::new(heading.cos(), heading.sin()) * speed
                })
                .collect();
            Ok(UserInit {
                positions,
                velocities: mean_velocities.clone(),
                mean_velocities,
                groups: None,
            })
        }
        MobilityKind::Rpgm => {
            let k = config.num_uavs + 1;
            let provisional: Vec<Vec2> = (0..m.max(k)).map(|_| uniform_point(side, rng)).collect();
            let km = kmeans(&provisional, k, params.kmeans_iters, params.kmeans_reseeds, rng)?;
            let gbs = Vec2::new(config.gbs_position[0], config.gbs_position[1]);
            let gbs_group = nearest(&gbs, &km.centroids);
            let membership: Vec<usize> = km.labels[..m].to_vec();
            let offsets: Vec<Vec2> = (0..m)
                .map(|_| sample_offset(params.sigma_c, params.deviation_radius, rng))
                .collect();
            let positions: Vec<Vec2> = membership
                .iter()
                .zip(&offsets)
                .map(|(&j, d)| clamp_to_area(km.centroids[j] + d, side))
                .collect();
            let waypoints = (0..k).map(|_| uniform_point(side, rng)).collect();
            Ok(UserInit {
                positions,
                velocities: vec![Vec2::zeros(); m],
                mean_velocities: Vec::new(),
                groups: Some(GroupState {
                    centers: km.centroids,
                    waypoints,
                    membership,
                    offsets,
                    gbs_group,
                }),
            })
        }
    }
}

/// One Gauss-Markov velocity update with innovation `eps` (unclamped).
pub fn gauss_markov_velocity(v: Vec2, mean: Vec2, alpha: f64, eps: Vec2) -> Vec2 {
    alpha * v + (1.0 - alpha) * mean + (1.0 - alpha * alpha).max(0.0).sqrt() * eps
}

fn reflect_axis(pos: &mut f64, vel: &mut f64, mean: &mut f64, side: f64) {
    if *pos < 0.0 {
        *pos = -*pos;
        *vel = -*vel;
        *mean = -*mean;
    } else if *pos > side {
        *pos = 2.0 * side - *pos;
        *vel = -*vel;
        *mean = -*mean;
    }
    *pos = pos.clamp(0.0, side);
}

pub fn step_gauss_markov<R: Rng + ?Sized>(state: &mut WorldState, config: &ScenarioConfig, rng: &mut R) {
    let p = &config.mobility;
    let side = config.area_side_m;
    for m in 0..state.num_users() {
        let eps = Vec2::new(
            p.noise_scale * rng.sample::<f64, _>(StandardNormal),
            p.noise_scale * rng.sample::<f64, _>(StandardNormal),
        );
        let mut mean = state.user_mean_vel[m];
        let mut v = limit_norm(gauss_markov_velocity(state.user_vel[m], mean, p.alpha_gm, eps), config.v_max_user);
        let mut q = state.user_pos[m] + v * config.dt;
        reflect_axis(&mut q.x, &mut v.x, &mut mean.x, side);
        reflect_axis(&mut q.y, &mut v.y, &mut mean.y, side);
        state.user_pos[m] = q;
        state.user_vel[m] = v;
        state.user_mean_vel[m] = mean;
    }
}

fn inside(p: &Vec2, side: f64) -> bool {
    (0.0..=side).contains(&p.x) && (0.0..=side).contains(&p.y)
}

pub fn step_rpgm<R: Rng + ?Sized>(state: &mut WorldState, config: &ScenarioConfig, rng: &mut R) {
    let p = &config.mobility;
    let side = config.area_side_m;
    let dt = config.dt;
    let Some(groups) = state.groups.as_mut() else {
        return;
    };
    let stride = config.group_speed * dt;
    for j in 0..groups.centers.len() {
        if !inside(&groups.waypoints[j], side) {
            groups.waypoints[j] = uniform_point(side, rng);
        }
        let to = groups.waypoints[j] - groups.centers[j];
        let dist = to.norm();
        if dist <= stride.max(p.waypoint_tolerance) {
            groups.centers[j] = groups.waypoints[j];
            groups.waypoints[j] = uniform_point(side, rng);
        } else {
            groups.centers[j] += to * (stride / dist);
        }
    }
    let max_step = p.offset_step * dt;
    for m in 0..state.user_pos.len() {
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(0.0..=1.0) * max_step;
        let d = groups.offsets[m] + Vec2::new(heading.cos(), heading.sin()) * len;
        let d = limit_norm(d, p.deviation_radius);
        groups.offsets[m] = d;
        let q = clamp_to_area(groups.centers[groups.membership[m]] + d, side);
        state.user_vel[m] = (q - state.user_pos[m]) / dt;
        state.user_pos[m] = q;
    }
}

/// Steps the user layer according to the configured model.
pub fn step_users<R: Rng + ?Sized>(state: &mut WorldState, config: &ScenarioConfig, rng: &mut R) {
    match config.mobility_kind {
        MobilityKind::GaussMarkov => step_gauss_markov(state, config, rng),
        MobilityKind::Rpgm => step_rpgm(state, config, rng),
    }
}

/// UAV start positions at cruise altitude: over the non-GBS cluster centroids
/// when users are clustered, otherwise on a centred square grid.
pub fn init_uavs(config: &ScenarioConfig, groups: Option<&GroupState>) -> Vec<Vec3> {
    let z = config.cruise_altitude();
    let k = config.num_uavs;
    match groups {
        Some(g) => (0..g.centers.len())
            .filter(|&j| j != g.gbs_group)
            .take(k)
            .map(|j| Vec3::new(g.centers[j].x, g.centers[j].y, z))
            .collect(),
        None => {
            let n = (k as f64).sqrt().ceil() as usize;
            let spacing = config.area_side_m / (n as f64 + 1.0);
            (0..k)
                .map(|i| {
                    let (row, col) = (i / n, i % n);
                    Vec3::new((row as f64 + 1.0) * spacing, (col as f64 + 1.0) * spacing, z)
                })
                .collect()
        }
    }
}
