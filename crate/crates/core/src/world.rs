//! Scenario configuration and the shared network state.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{AntennaConfig, ChannelProfile};
use crate::env::DynamicsConfig;
use crate::metrics::RewardWeights;
use crate::mobility::{MobilityKind, MobilityParams};
use crate::power::RotorcraftParams;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown scenario `{0}` (expected crowded_urban, suburban or rural)")]
    UnknownScenario(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("malformed configuration: {0}")]
    Parse(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FailureError {
    #[error("UAV index {index} out of range (num_uavs = {num_uavs})")]
    OutOfRange { index: usize, num_uavs: usize },
    #[error("UAV {0} has already failed")]
    AlreadyFailed(usize),
    #[error("no alive UAV left to fail")]
    NoneAlive,
}

/// A serving node: one of the UAVs or the ground base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Uav(usize),
    Gbs,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Uav(k) => write!(f, "U{k}"),
            NodeId::Gbs => f.write_str("GBS"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    CrowdedUrban,
    Suburban,
    Rural,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [
        ScenarioName::CrowdedUrban,
        ScenarioName::Suburban,
        ScenarioName::Rural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::CrowdedUrban => "crowded_urban",
            ScenarioName::Suburban => "suburban",
            ScenarioName::Rural => "rural",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crowded_urban" => Ok(ScenarioName::CrowdedUrban),
            "suburban" => Ok(ScenarioName::Suburban),
            "rural" => Ok(ScenarioName::Rural),
            other => Err(ConfigError::UnknownScenario(other.to_string())),
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomTarget {
    Random,
}

/// Which UAV a scheduled failure hits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FailureTarget {
    Index(usize),
    Random(RandomTarget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureEvent {
    pub step: usize,
    pub uav: FailureTarget,
}

impl FailureEvent {
    pub fn random_at(step: usize) -> Self {
        FailureEvent {
            step,
            uav: FailureTarget::Random(RandomTarget::Random),
        }
    }

    pub fn index_at(step: usize, uav: usize) -> Self {
        FailureEvent {
            step,
            uav: FailureTarget::Index(uav),
        }
    }
}

/// Everything that defines one simulated deployment.
///
/// Units: lengths in metres, speeds in m/s, frequencies and bandwidth in Hz,
/// `p_tx`/`p_tx_gbs` in dBm, `p_gbs`/`p_comm` in W, `noise_psd` in dBm/Hz,
/// `r_th` in bit/s, `dt` in seconds, `episode_len` in steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub area_side_m: f64,
    pub num_uavs: usize,
    pub num_users: usize,
    pub gbs_position: [f64; 3],
    pub altitude_corridor: [f64; 2],
    pub v_max_uav: f64,
    pub v_max_user: f64,
    pub group_speed: f64,
    pub d_safe: f64,
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub p_tx: f64,
    pub p_tx_gbs: f64,
    pub p_gbs: f64,
    pub p_comm: f64,
    pub noise_psd: f64,
    pub r_comm: f64,
    pub r_th: f64,
    pub dt: f64,
    pub episode_len: usize,
    pub rng_seed: u64,
    pub mobility_kind: MobilityKind,
    pub failure_schedule: Vec<FailureEvent>,
    pub channel_profile: ChannelProfile,
    pub antenna: AntennaConfig,
    pub mobility: MobilityParams,
    pub rotorcraft: RotorcraftParams,
    pub dynamics: DynamicsConfig,
    pub reward: RewardWeights,
}

impl ScenarioConfig {
    /// Table defaults for the named scenario, before overrides.
    pub fn defaults(name: ScenarioName) -> Self {
        let side = 1000.0;
        ScenarioConfig {
            area_side_m: side,
            num_uavs: 4,
            num_users: 140,
            gbs_position: [side / 2.0, side / 2.0, 0.0],
            altitude_corridor: [80.0, 120.0],
            v_max_uav: 30.0,
            v_max_user: 15.0,
            group_speed: 10.0,
            d_safe: 10.0,
            carrier_freq: 2.0e9,
            bandwidth: 20.0e6,
            p_tx: 23.0,
            p_tx_gbs: 40.0,
            p_gbs: 20.0,
            p_comm: 5.0,
            noise_psd: -174.0,
            r_comm: 1500.0,
            r_th: 0.5e6,
            dt: 1.0,
            episode_len: 200,
            rng_seed: 0,
            mobility_kind: match name {
                ScenarioName::Rural => MobilityKind::GaussMarkov,
                _ => MobilityKind::Rpgm,
            },
            failure_schedule: vec![FailureEvent::random_at(100)],
            channel_profile: ChannelProfile::for_scenario(name),
            antenna: AntennaConfig::default(),
            mobility: MobilityParams::default(),
            rotorcraft: RotorcraftParams::default(),
            dynamics: DynamicsConfig::default(),
            reward: RewardWeights::default(),
        }
    }

    pub fn gbs_pos(&self) -> Vec3 {
        Vec3::from(self.gbs_position)
    }

    pub fn h_min(&self) -> f64 {
        self.altitude_corridor[0]
    }

    pub fn h_max(&self) -> f64 {
        self.altitude_corridor[1]
    }

    pub fn cruise_altitude(&self) -> f64 {
        0.5 * (self.h_min() + self.h_max())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let [h_min, h_max] = self.altitude_corridor;
        if !(h_min < h_max) || h_min < 0.0 {
            return bad(format!("altitude_corridor must satisfy 0 <= H_min < H_max, got [{h_min}, {h_max}]"));
        }
        let positive = [
            ("area_side_m", self.area_side_m),
            ("v_max_uav", self.v_max_uav),
            ("v_max_user", self.v_max_user),
            ("group_speed", self.group_speed),
            ("d_safe", self.d_safe),
            ("carrier_freq", self.carrier_freq),
            ("bandwidth", self.bandwidth),
            ("p_gbs", self.p_gbs),
            ("p_comm", self.p_comm),
            ("r_comm", self.r_comm),
            ("r_th", self.r_th),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be strictly positive and finite, got {v}"));
            }
        }
        for (name, v) in [("p_tx", self.p_tx), ("p_tx_gbs", self.p_tx_gbs), ("noise_psd", self.noise_psd)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.num_uavs == 0 {
            return bad("num_uavs must be at least 1".into());
        }
        if self.num_users == 0 {
            return bad("num_users must be at least 1".into());
        }
        if self.episode_len == 0 {
            return bad("episode_len must be at least 1".into());
        }
        let g = self.gbs_position;
        if g.iter().any(|c| !c.is_finite())
            || g[0] < 0.0
            || g[0] > self.area_side_m
            || g[1] < 0.0
            || g[1] > self.area_side_m
        {
            return bad(format!("gbs_position {g:?} lies outside the target area"));
        }
        for ev in &self.failure_schedule {
            if ev.step >= self.episode_len {
                return bad(format!(
                    "failure step {} outside [0, {})",
                    ev.step, self.episode_len
                ));
            }
            if let FailureTarget::Index(k) = ev.uav {
                if k >= self.num_uavs {
                    return bad(format!("failure targets UAV {k} but num_uavs = {}", self.num_uavs));
                }
            }
        }
        self.channel_profile.validate().map_err(ConfigError::Invalid)?;
        self.antenna.validate().map_err(ConfigError::Invalid)?;
        self.mobility.validate().map_err(ConfigError::Invalid)?;
        self.rotorcraft.validate().map_err(ConfigError::Invalid)?;
        self.dynamics.validate().map_err(ConfigError::Invalid)?;
        self.reward.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("scenario config is always representable as TOML")
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over every field that shapes the learned networks or the
    /// physics they were trained on. Seeds, horizon and failure schedule are
    /// evaluation choices and are excluded.
    pub fn model_hash(&self) -> String {
        let mut c = self.clone();
        c.rng_seed = 0;
        c.episode_len = 1;
        c.failure_schedule.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Table defaults for `name`, merged with `overrides` (same keys as the
/// configuration file; nested tables merge key by key).
pub fn make_scenario(name: &str, overrides: &toml::Table) -> Result<ScenarioConfig, ConfigError> {
    let name: ScenarioName = name.parse()?;
    let mut table = ScenarioConfig::defaults(name).to_table();
    merge_tables(&mut table, overrides);
    ScenarioConfig::from_table(table)
}

/// Recursively overlays `overrides` onto `base`.
pub fn merge_tables(base: &mut toml::Table, overrides: &toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Applies a `dotted.key=value` assignment to a table. The value is parsed as
/// a TOML literal, falling back to a bare string.
pub fn apply_assignment(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("expected key=value, got `{assignment}`")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::Parse(format!("empty key in `{assignment}`")));
    }
    let raw = raw.trim();
    let value = parse_literal(raw);
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().expect("split yields at least one key");
    let mut cursor = table;
    for key in keys {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Parse(format!("`{key}` in `{path}` is not a table"))),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// RPGM bookkeeping: moving group centres and each user's offset from its centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub centers: Vec<Vec2>,
    pub waypoints: Vec<Vec2>,
    pub membership: Vec<usize>,
    pub offsets: Vec<Vec2>,
    /// Index of the cluster assigned to the ground base station.
    pub gbs_group: usize,
}

/// The complete mutable state of one network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t: usize,
    pub uav_pos: Vec<Vec3>,
    pub uav_vel: Vec<Vec3>,
    pub alive: Vec<bool>,
    pub gbs_pos: Vec3,
    pub user_pos: Vec<Vec2>,
    pub user_vel: Vec<Vec2>,
    /// Gauss-Markov asymptotic mean velocities (empty under RPGM).
    pub user_mean_vel: Vec<Vec2>,
    pub groups: Option<GroupState>,
    pub association: Vec<NodeId>,
    pub prev_association: Vec<NodeId>,
    /// Terrestrial shadowing per user in dB, frozen for the episode.
    pub shadowing_db: Vec<f64>,
}

impl WorldState {
    pub fn num_uavs(&self) -> usize {
        self.uav_pos.len()
    }

    pub fn num_users(&self) -> usize {
        self.user_pos.len()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn alive_uavs(&self) -> impl Iterator<Item = usize> + '_ {
        self.alive.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k)
    }

    pub fn is_active(&self, node: NodeId) -> bool {
        match node {
            NodeId::Gbs => true,
            NodeId::Uav(k) => self.alive.get(k).copied().unwrap_or(false),
        }
    }

    pub fn node_position(&self, node: NodeId) -> Vec3 {
        match node {
            NodeId::Gbs => self.gbs_pos,
            NodeId::Uav(k) => self.uav_pos[k],
        }
    }
}

/// Alive UAVs in ascending index order, then the GBS.
pub fn active_set(state: &WorldState) -> Vec<NodeId> {
    state
        .alive_uavs()
        .map(NodeId::Uav)
        .chain(std::iter::once(NodeId::Gbs))
        .collect()
}

/// Marks a UAV as failed. It stops moving immediately; its users are
/// reassigned at the next association pass.
pub fn apply_failure(state: &mut WorldState, uav: usize) -> Result<(), FailureError> {
    let n = state.num_uavs();
    if uav >= n {
        return Err(FailureError::OutOfRange { index: uav, num_uavs: n });
    }
    if !state.alive[uav] {
        return Err(FailureError::AlreadyFailed(uav));
    }
    state.alive[uav] = false;
    state.uav_vel[uav] = Vec3::zeros();
    Ok(())
}

/// Uniform choice among alive UAVs.
pub fn pick_random_alive<R: Rng + ?Sized>(state: &WorldState, rng: &mut R) -> Result<usize, FailureError> {
    let alive: Vec<usize> = state.alive_uavs().collect();
    if alive.is_empty() {
        return Err(FailureError::NoneAlive);
    }
    Ok(alive[rng.random_range(0..alive.len())])
}


#[cfg(test)]
mod tests {
    use super::fixtures::state_with;
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn four_uavs() -> WorldState {
        state_with(
            &[[100.0, 100.0, 100.0], [300.0, 100.0, 100.0], [500.0, 100.0, 100.0], [700.0, 100.0, 100.0]],
            &[[10.0, 10.0]],
            [500.0, 500.0, 0.0],
        )
    }

    #[test]
    fn scenario_profiles_match_table() {
        let urban = make_scenario("crowded_urban", &toml::Table::new()).unwrap();
        assert_eq!(urban.channel_profile.a, 12.08);
        assert_eq!(urban.channel_profile.b, 0.11);
        assert_eq!(urban.channel_profile.eta_nlos, 23.0);
        assert_eq!(urban.num_uavs, 4);
        assert_eq!(urban.num_users, 140);
        assert_eq!(urban.altitude_corridor, [80.0, 120.0]);

        let mut ov = toml::Table::new();
        ov.insert("num_uavs".into(), 2.into());
        ov.insert("num_users".into(), 30.into());
        let sub = make_scenario("suburban", &ov).unwrap();
        assert_eq!(sub.channel_profile.a, 9.61);
        assert_eq!(sub.channel_profile.b, 0.16);
        assert_eq!((sub.num_uavs, sub.num_users), (2, 30));

        let rural = make_scenario("rural", &toml::Table::new()).unwrap();
        assert_eq!((rural.channel_profile.a, rural.channel_profile.b), (4.88, 0.43));
        assert_eq!(rural.mobility_kind, MobilityKind::GaussMarkov);
    }

    #[test]
    fn unknown_scenario_and_bad_overrides_fail() {
        assert!(matches!(
            make_scenario("downtown", &toml::Table::new()),
            Err(ConfigError::UnknownScenario(_))
        ));
        let mut ov = toml::Table::new();
        ov.insert("altitude_corridor".into(), toml::Value::try_from([120.0, 80.0]).unwrap());
        assert!(matches!(make_scenario("rural", &ov), Err(ConfigError::Invalid(_))));
        let mut ov = toml::Table::new();
        ov.insert("bandwidth".into(), (-1.0).into());
        assert!(make_scenario("rural", &ov).is_err());
        let mut ov = toml::Table::new();
        ov.insert("not_a_key".into(), 1.into());
        assert!(matches!(make_scenario("rural", &ov), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn failure_times_must_lie_in_horizon() {
        let mut cfg = ScenarioConfig::defaults(ScenarioName::Rural);
        cfg.failure_schedule = vec![FailureEvent::random_at(cfg.episode_len)];
        assert!(cfg.validate().is_err());
        cfg.failure_schedule = vec![FailureEvent::index_at(0, 9)];
        assert!(cfg.validate().is_err());
        cfg.failure_schedule = vec![FailureEvent::index_at(0, 3)];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = make_scenario("crowded_urban", &toml::Table::new()).unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("area_side_m"));
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
        let broken = format!("{text}\nbogus = 3\n");
        assert!(ScenarioConfig::from_toml_str(&broken).is_err());
    }

    #[test]
    fn failure_target_parses_index_or_random() {
        let t: toml::Table = "failure_schedule = [{ step = 100, uav = 1 }, { step = 120, uav = \"random\" }]"
            .parse()
            .unwrap();
        let cfg = make_scenario("suburban", &t).unwrap();
        assert_eq!(cfg.failure_schedule[0], FailureEvent::index_at(100, 1));
        assert_eq!(cfg.failure_schedule[1], FailureEvent::random_at(120));
    }

    #[test]
    fn assignments_parse_literals_and_paths() {
        let mut t = toml::Table::new();
        apply_assignment(&mut t, "num_uavs=2").unwrap();
        apply_assignment(&mut t, "mobility.alpha_gm = 0.5").unwrap();
        apply_assignment(&mut t, "mobility_kind=gauss_markov").unwrap();
        assert_eq!(t["num_uavs"].as_integer(), Some(2));
        assert_eq!(t["mobility"]["alpha_gm"].as_float(), Some(0.5));
        assert_eq!(t["mobility_kind"].as_str(), Some("gauss_markov"));
        let cfg = make_scenario("suburban", &t).unwrap();
        assert_eq!(cfg.mobility.alpha_gm, 0.5);
        assert_eq!(cfg.mobility_kind, MobilityKind::GaussMarkov);
        assert!(apply_assignment(&mut t, "novalue").is_err());
    }

    #[test]
    fn model_hash_ignores_seed_and_schedule() {
        let a = ScenarioConfig::defaults(ScenarioName::Suburban);
        let mut b = a.clone();
        b.rng_seed = 99;
        b.failure_schedule = vec![FailureEvent::index_at(5, 0)];
        b.episode_len = 50;
        assert_eq!(a.model_hash(), b.model_hash());
        b.num_uavs = 3;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn active_set_orders_uavs_then_gbs() {
        let mut s = four_uavs();
        assert_eq!(
            active_set(&s),
            vec![NodeId::Uav(0), NodeId::Uav(1), NodeId::Uav(2), NodeId::Uav(3), NodeId::Gbs]
        );
        apply_failure(&mut s, 2).unwrap();
        assert_eq!(active_set(&s), vec![NodeId::Uav(0), NodeId::Uav(1), NodeId::Uav(3), NodeId::Gbs]);
        for k in [0, 1, 3] {
            apply_failure(&mut s, k).unwrap();
        }
        assert_eq!(active_set(&s), vec![NodeId::Gbs]);
        assert!(s.is_active(NodeId::Gbs));
    }

    #[test]
    fn failure_zeroes_velocity_and_rejects_repeats() {
        let mut s = four_uavs();
        s.uav_vel[1] = Vec3::new(3.0, 4.0, 0.0);
        apply_failure(&mut s, 1).unwrap();
        assert_eq!(s.uav_vel[1], Vec3::zeros());
        assert!(!s.alive[1]);
        assert_eq!(apply_failure(&mut s, 1), Err(FailureError::AlreadyFailed(1)));
        assert_eq!(
            apply_failure(&mut s, 4),
            Err(FailureError::OutOfRange { index: 4, num_uavs: 4 })
        );
    }

    #[test]
    fn random_failure_is_uniform_over_alive() {
        let mut s = four_uavs();
        apply_failure(&mut s, 0).unwrap();
        let mut rng = stream_rng(11, Stream::Failure);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[pick_random_alive(&s, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 2 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn random_failure_with_none_alive_errors() {
        let mut s = four_uavs();
        for k in 0..4 {
            apply_failure(&mut s, k).unwrap();
        }
        let mut rng = stream_rng(1, Stream::Failure);
        assert_eq!(pick_random_alive(&s, &mut rng), Err(FailureError::NoneAlive));
    }
}
