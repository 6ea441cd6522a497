//! Rotary-wing propulsion power, network power budget and energy efficiency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{ScenarioConfig, WorldState};

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("speed must be non-negative and finite, got {0}")]
    InvalidSpeed(f64),
    #[error("UAV {uav} flies at {speed} m/s, above the {v_max} m/s limit")]
    OverSpeed { uav: usize, speed: f64, v_max: f64 },
    #[error("total power must be positive, got {0} W")]
    NonPositivePower(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotorcraftParams {
    /// Blade profile power in hover (W).
    pub p0: f64,
    /// Induced power in hover (W).
    pub pi: f64,
    /// Rotor tip speed (m/s).
    pub u_tip: f64,
    /// Mean rotor induced velocity in hover (m/s).
    pub v0: f64,
    pub d_fuse: f64,
    /// Air density (kg/m³).
    pub rho: f64,
    /// Rotor solidity.
    pub s: f64,
    /// Rotor disc area (m²).
    pub area: f64,
}

impl Default for RotorcraftParams {
    fn default() -> Self {
        RotorcraftParams {
            p0: 79.86,
            pi: 88.63,
            u_tip: 120.0,
            v0: 4.03,
            d_fuse: 0.6,
            rho: 1.225,
            s: 0.05,
            area: 0.503,
        }
    }
}

impl RotorcraftParams {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.p0, self.pi, self.u_tip, self.v0, self.d_fuse, self.rho, self.s, self.area];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err("rotorcraft parameters must all be strictly positive".into())
        }
    }

    pub fn hover_power(&self) -> f64 {
        self.p0 + self.pi
    }
}

/// Blade-profile + induced + parasite power at horizontal speed `speed` (m/s).
pub fn propulsion_power(speed: f64, p: &RotorcraftParams) -> Result<f64, PowerError> {
    if !(speed.is_finite() && speed >= 0.0) {
        return Err(PowerError::InvalidSpeed(speed));
    }
    let v2 = speed * speed;
    let v4 = v2 * v2;
    let v0_2 = p.v0 * p.v0;
    let blade = p.p0 * (1.0 + 3.0 * v2 / (p.u_tip * p.u_tip));
    let inner = ((1.0 + v4 / (4.0 * v0_2 * v0_2)).sqrt() - v2 / (2.0 * v0_2)).max(0.0);
    let induced = p.pi * inner.sqrt();
    let parasite = 0.5 * p.d_fuse * p.rho * p.s * p.area * v2 * speed;
    Ok(blade + induced + parasite)
}

/// Propulsion plus communication power of alive UAVs, plus the GBS budget.
pub fn total_power(state: &WorldState, config: &ScenarioConfig) -> Result<f64, PowerError> {
    let mut total = config.p_gbs;
    for k in state.alive_uavs() {
        let speed = state.uav_vel[k].norm();
        if speed > config.v_max_uav * (1.0 + 1e-9) {
            return Err(PowerError::OverSpeed {
                uav: k,
                speed,
                v_max: config.v_max_uav,
            });
        }
        total += propulsion_power(speed, &config.rotorcraft)? + config.p_comm;
    }
    Ok(total)
}

/// Delivered bits per joule.
pub fn energy_efficiency(sum_rate_bps: f64, total_power_w: f64) -> Result<f64, PowerError> {
    if !(total_power_w > 0.0) {
        return Err(PowerError::NonPositivePower(total_power_w));
    }
    Ok(sum_rate_bps / total_power_w)
}
