//! Propagation, antenna gain, max-RSSI association, SINR and rate.
//!
//! All power arithmetic is in the linear domain (watts); dB helpers convert at
//! the edges.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{active_set, NodeId, ScenarioConfig, ScenarioName, Vec2, Vec3, WorldState};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("transmitter and receiver are co-located")]
    CoLocated,
}

/// Air-to-ground LoS sigmoid parameters plus the terrestrial macro-cell model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelProfile {
    pub a: f64,
    pub b: f64,
    /// Excess loss under LoS (dB).
    pub eta_los: f64,
    /// Excess loss under NLoS (dB).
    pub eta_nlos: f64,
    /// Terrestrial path-loss exponent.
    pub kappa: f64,
    /// Terrestrial path loss at the reference distance (dB).
    pub pl_d0: f64,
    pub d0: f64,
    /// Log-normal shadowing std-dev (dB).
    pub shadow_sigma: f64,
}

impl ChannelProfile {
    pub fn for_scenario(name: ScenarioName) -> Self {
        let (a, b, eta_los, eta_nlos) = match name {
            ScenarioName::CrowdedUrban => (12.08, 0.11, 1.0, 23.0),
            ScenarioName::Suburban => (9.61, 0.16, 0.5, 21.0),
            ScenarioName::Rural => (4.88, 0.43, 0.1, 15.0),
        };
        ChannelProfile {
            a,
            b,
            eta_los,
            eta_nlos,
            kappa: 3.5,
            pl_d0: 38.46,
            d0: 1.0,
            shadow_sigma: 8.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.a.is_finite() && self.a > 0.0 && self.b.is_finite() && self.b >= 0.0) {
            return Err(format!("channel_profile (a, b) must be positive, got ({}, {})", self.a, self.b));
        }
        if !(self.eta_los >= 0.0 && self.eta_nlos >= self.eta_los) {
            return Err("channel_profile requires eta_nlos >= eta_los >= 0".into());
        }
        if !(self.kappa >= 2.0) {
            return Err(format!("channel_profile.kappa must be >= 2, got {}", self.kappa));
        }
        if !(self.d0 > 0.0 && self.pl_d0.is_finite()) {
            return Err("channel_profile requires d0 > 0 and finite pl_d0".into());
        }
        if !(self.shadow_sigma >= 0.0) {
            return Err("channel_profile.shadow_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Flat-top UAV antenna, gains in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AntennaConfig {
    /// Half-beamwidth measured from nadir (degrees).
    pub beamwidth_deg: f64,
    pub g_main_db: f64,
    pub g_side_db: f64,
}

impl Default for AntennaConfig {
    fn default() -> Self {
        AntennaConfig {
            beamwidth_deg: 45.0,
            g_main_db: 10.0,
            g_side_db: -10.0,
        }
    }
}

impl AntennaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=180.0).contains(&self.beamwidth_deg) {
            return Err("antenna.beamwidth_deg must lie in [0, 180]".into());
        }
        if !(self.g_main_db.is_finite() && self.g_side_db.is_finite()) {
            return Err("antenna gains must be finite".into());
        }
        Ok(())
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    linear_to_db(w) + 30.0
}

/// Thermal noise over the whole band, in watts.
pub fn noise_power_w(config: &ScenarioConfig) -> f64 {
    dbm_to_watts(config.noise_psd) * config.bandwidth
}

/// Sigmoid LoS probability for an elevation angle in degrees.
pub fn los_probability(elevation_deg: f64, a: f64, b: f64) -> f64 {
    (1.0 / (1.0 + a * (-b * (elevation_deg - a)).exp())).clamp(0.0, 1.0)
}

pub fn free_space_path_loss(distance_m: f64, carrier_hz: f64) -> f64 {
    20.0 * (4.0 * std::f64::consts::PI * carrier_hz * distance_m / SPEED_OF_LIGHT).log10()
}

/// Elevation of `tx` seen from a ground point, in degrees.
pub fn elevation_deg(tx: &Vec3, ground: &Vec2) -> f64 {
    let horizontal = (Vec2::new(tx.x, tx.y) - ground).norm();
    tx.z.atan2(horizontal).to_degrees()
}

/// Angle between the downward boresight of `tx` and the ground point, in degrees.
pub fn off_axis_deg(tx: &Vec3, ground: &Vec2) -> f64 {
    let horizontal = (Vec2::new(tx.x, tx.y) - ground).norm();
    horizontal.atan2(tx.z).to_degrees()
}

fn ground_distance(tx: &Vec3, ground: &Vec2) -> f64 {
    (tx - Vec3::new(ground.x, ground.y, 0.0)).norm()
}

/// Path loss with an explicit LoS probability: FSPL plus the expected excess loss.
pub fn a2g_path_loss_with_los(distance_m: f64, p_los: f64, profile: &ChannelProfile, carrier_hz: f64) -> f64 {
    p_los * profile.eta_los + (1.0 - p_los) * profile.eta_nlos + free_space_path_loss(distance_m, carrier_hz)
}

/// Mean air-to-ground path loss in dB between a UAV and a ground user.
pub fn a2g_path_loss(
    uav_pos: &Vec3,
    user_pos: &Vec2,
    profile: &ChannelProfile,
    carrier_hz: f64,
) -> Result<f64, ChannelError> {
    let d = ground_distance(uav_pos, user_pos);
    if d <= 0.0 {
        return Err(ChannelError::CoLocated);
    }
    let p_los = los_probability(elevation_deg(uav_pos, user_pos), profile.a, profile.b);
    Ok(a2g_path_loss_with_los(d, p_los, profile, carrier_hz))
}

/// Log-distance terrestrial path loss in dB plus a given shadowing sample.
/// Distances below the reference distance are clamped to it.
pub fn terrestrial_path_loss(gbs_pos: &Vec3, user_pos: &Vec2, profile: &ChannelProfile, shadow_db: f64) -> f64 {
    let d = ground_distance(gbs_pos, user_pos).max(profile.d0);
    profile.pl_d0 + 10.0 * profile.kappa * (d / profile.d0).log10() + shadow_db
}

/// One slow-fading shadowing sample per user, N(0, shadow_sigma²) in dB.
pub fn draw_shadowing<R: Rng + ?Sized>(count: usize, profile: &ChannelProfile, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| profile.shadow_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Flat-top pattern: main-lobe gain inside the beam (boundary inclusive).
pub fn antenna_gain(off_axis_deg: f64, beamwidth_deg: f64, g_main: f64, g_side: f64) -> f64 {
    if off_axis_deg.abs() <= beamwidth_deg {
        g_main
    } else {
        g_side
    }
}

/// Effective linear channel gain of `node` towards user `m`.
pub fn effective_gain(state: &WorldState, config: &ScenarioConfig, node: NodeId, m: usize) -> f64 {
    let q = &state.user_pos[m];
    match node {
        NodeId::Gbs => {
            let pl = terrestrial_path_loss(&state.gbs_pos, q, &config.channel_profile, state.shadowing_db[m]);
            db_to_linear(-pl)
        }
        NodeId::Uav(k) => {
            let p = &state.uav_pos[k];
            let pl = a2g_path_loss(p, q, &config.channel_profile, config.carrier_freq)
                .expect("UAV altitude keeps links non-degenerate");
            let ant = &config.antenna;
            let g = antenna_gain(
                off_axis_deg(p, q),
                ant.beamwidth_deg,
                db_to_linear(ant.g_main_db),
                db_to_linear(ant.g_side_db),
            );
            g * db_to_linear(-pl)
        }
    }
}

pub fn tx_power_w(config: &ScenarioConfig, node: NodeId) -> f64 {
    match node {
        NodeId::Gbs => dbm_to_watts(config.p_tx_gbs),
        NodeId::Uav(_) => dbm_to_watts(config.p_tx),
    }
}

/// Per-step link state for every active node and user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTable {
    /// Active nodes, UAVs ascending then the GBS.
    pub nodes: Vec<NodeId>,
    /// `gain[i][m]`: linear effective gain of `nodes[i]` towards user `m`.
    pub gain: Vec<Vec<f64>>,
    /// `rx_power[i][m]` in watts.
    pub rx_power: Vec<Vec<f64>>,
    pub serving: Vec<NodeId>,
    /// Index into `nodes` of each user's server.
    pub serving_idx: Vec<usize>,
    pub sinr: Vec<f64>,
    /// bit/s
    pub rate: Vec<f64>,
    /// Users per node, parallel to `nodes`.
    pub load: Vec<usize>,
}

impl LinkTable {
    pub fn load_of(&self, node: NodeId) -> usize {
        self.nodes
            .iter()
            .position(|&n| n == node)
            .map_or(0, |i| self.load[i])
    }

    pub fn sum_rate(&self) -> f64 {
        self.rate.iter().sum()
    }
}

/// Max-RSSI association, SINR and equal-share rates from a received-power
/// matrix. Ties go to the lowest node index.
pub fn links_from_rx_power(
    nodes: Vec<NodeId>,
    gain: Vec<Vec<f64>>,
    rx_power: Vec<Vec<f64>>,
    noise_w: f64,
    bandwidth: f64,
) -> LinkTable {
    assert!(!nodes.is_empty(), "at least one active node");
    let m_count = rx_power[0].len();
    let mut serving_idx = Vec::with_capacity(m_count);
    let mut sinr = Vec::with_capacity(m_count);
    for m in 0..m_count {
        let mut best = 0;
        for i in 1..nodes.len() {
            if rx_power[i][m] > rx_power[best][m] {
                best = i;
            }
        }
        let interference: f64 = (0..nodes.len())
            .filter(|&i| i != best)
            .map(|i| rx_power[i][m])
            .sum();
        serving_idx.push(best);
        sinr.push(rx_power[best][m] / (noise_w + interference));
    }
    let mut load = vec![0usize; nodes.len()];
    for &i in &serving_idx {
        load[i] += 1;
    }
    let rate = serving_idx
        .iter()
        .zip(&sinr)
        .map(|(&i, &g)| bandwidth / load[i] as f64 * (1.0 + g).log2())
        .collect();
    LinkTable {
        serving: serving_idx.iter().map(|&i| nodes[i]).collect(),
        nodes,
        gain,
        rx_power,
        serving_idx,
        sinr,
        rate,
        load,
    }
}

pub fn associate_and_rate(state: &WorldState, config: &ScenarioConfig) -> LinkTable {
    let nodes = active_set(state);
    let m_count = state.num_users();
    let gain: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&n| (0..m_count).map(|m| effective_gain(state, config, n, m)).collect())
        .collect();
    let rx_power = nodes
        .iter()
        .zip(&gain)
        .map(|(&n, g)| {
            let p = tx_power_w(config, n);
            g.iter().map(|h| p * h).collect()
        })
        .collect();
    links_from_rx_power(nodes, gain, rx_power, noise_power_w(config), config.bandwidth)
}
