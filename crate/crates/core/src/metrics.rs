//! Per-step KPIs and the composite utility used as the shared reward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::LinkTable;
use crate::power::energy_efficiency;
use crate::world::{NodeId, ScenarioConfig, WorldState};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("Jain's index of an empty set is undefined")]
    Empty,
    #[error("association vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub cov: f64,
    pub ee: f64,
    pub jr: f64,
    pub jl: f64,
    pub min: f64,
    pub ho: f64,
    /// Energy-efficiency normaliser (bit/J).
    pub e_ref: f64,
    pub eps: f64,
    /// Penalise the fraction of users handed off rather than the raw count.
    pub normalize_handoffs: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            cov: 2.0,
            ee: 0.1,
            jr: 0.5,
            jl: 0.8,
            min: 0.5,
            ho: 0.1,
            e_ref: 1.5e5,
            eps: 1e-9,
            normalize_handoffs: true,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        let w = [self.cov, self.ee, self.jr, self.jl, self.min, self.ho, self.eps];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err("reward weights must be non-negative".into());
        }
        if !(self.e_ref > 0.0) {
            return Err("reward.e_ref must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub r_sum: f64,
    pub e_eff: f64,
    pub c_cov: f64,
    pub r_min: f64,
    pub jfi_rate: f64,
    pub jfi_load: f64,
    pub handoffs: usize,
    pub utility: f64,
    pub u_qos: f64,
    pub total_power: f64,
}

/// Jain's fairness index with `eps` guarding the denominator.
pub fn jain_index(values: &[f64], eps: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    Ok(sum * sum / (values.len() as f64 * sq + eps))
}

pub fn handoff_count(prev: &[NodeId], curr: &[NodeId]) -> Result<usize, MetricsError> {
    if prev.len() != curr.len() {
        return Err(MetricsError::LengthMismatch(prev.len(), curr.len()));
    }
    Ok(prev.iter().zip(curr).filter(|(a, b)| a != b).count())
}

/// Computes every KPI for the current step. `state.association` must already
/// reflect `links`; handoffs compare it with `state.prev_association` (zero at
/// t = 0).
pub fn step_metrics(
    links: &LinkTable,
    state: &WorldState,
    total_power_w: f64,
    weights: &RewardWeights,
    config: &ScenarioConfig,
) -> StepMetrics {
    let m = links.rate.len();
    let r_sum = links.sum_rate();
    let e_eff = energy_efficiency(r_sum, total_power_w).unwrap_or(0.0);
    let covered = links.rate.iter().filter(|&&r| r >= config.r_th).count();
    let c_cov = covered as f64 / m as f64;
    let r_min = links.rate.iter().copied().fold(f64::INFINITY, f64::min);
    let jfi_rate = jain_index(&links.rate, weights.eps).unwrap_or(0.0);
    let uav_loads: Vec<f64> = links
        .nodes
        .iter()
        .zip(&links.load)
        .filter(|(n, _)| matches!(n, NodeId::Uav(_)))
        .map(|(_, &l)| l as f64)
        .collect();
    let jfi_load = jain_index(&uav_loads, weights.eps).unwrap_or(0.0);
    let handoffs = if state.t == 0 {
        0
    } else {
        handoff_count(&state.prev_association, &state.association).expect("association vectors share length")
    };
    let ee_norm = (e_eff / weights.e_ref).min(1.0);
    let rmin_norm = (r_min / config.r_th).min(1.0);
    let u_qos = weights.ee * ee_norm
        + weights.jr * jfi_rate
        + weights.jl * jfi_load
        + weights.cov * c_cov
        + weights.min * rmin_norm;
    let ho = if weights.normalize_handoffs {
        handoffs as f64 / m as f64
    } else {
        handoffs as f64
    };
    StepMetrics {
        r_sum,
        e_eff,
        c_cov,
        r_min,
        jfi_rate,
        jfi_load,
        handoffs,
        utility: u_qos - weights.ho * ho,
        u_qos,
        total_power: total_power_w,
    }
}

/// One metrics CSV row; column order is part of the file format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub t: usize,
    pub r_sum: f64,
    pub e_eff: f64,
    pub c_cov: f64,
    pub r_min: f64,
    pub jfi_rate: f64,
    pub jfi_load: f64,
    pub handoffs: usize,
    pub utility: f64,
    pub active_uav_count: usize,
}

impl MetricsRow {
    pub fn new(t: usize, m: &StepMetrics, active_uav_count: usize) -> Self {
        MetricsRow {
            t,
            r_sum: m.r_sum,
            e_eff: m.e_eff,
            c_cov: m.c_cov,
            r_min: m.r_min,
            jfi_rate: m.jfi_rate,
            jfi_load: m.jfi_load,
            handoffs: m.handoffs,
            utility: m.utility,
            active_uav_count,
        }
    }
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "t",
    "r_sum",
    "e_eff",
    "c_cov",
    "r_min",
    "jfi_rate",
    "jfi_load",
    "handoffs",
    "utility",
    "active_uav_count",
];
