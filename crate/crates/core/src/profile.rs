//! Power-law vertical extrapolation of wind speed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::StationObs;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerLawParams {
    /// Shear exponent; 1/7 is the neutral-stability textbook value.
    pub alpha: f64,
}

impl Default for PowerLawParams {
    fn default() -> Self {
        Self { alpha: 1.0 / 7.0 }
    }
}

/// `u_ref · (z_target / z_ref)^alpha`.
pub fn power_law(u_ref: f64, z_ref: f64, z_target: f64, params: PowerLawParams) -> Result<f64> {
    for z in [z_ref, z_target] {
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::NonPositiveHeight(z));
        }
    }
    if !(u_ref.is_finite() && u_ref >= 0.0) {
        return Err(Error::InvalidStation(format!("reference speed {u_ref} m/s")));
    }
    if !params.alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("shear exponent {}", params.alpha)));
    }
    if z_ref == z_target {
        return Ok(u_ref);
    }
    Ok(u_ref * (z_target / z_ref).powf(params.alpha))
}

/// Moves every station to `z_target`; stations already there are untouched.
pub fn lift_stations(
    stations: &[StationObs],
    z_target: f64,
    params: PowerLawParams,
) -> Result<Vec<StationObs>> {
    stations
        .iter()
        .map(|s| {
            Ok(StationObs {
                speed_mps: power_law(s.speed_mps, s.height_m, z_target, params)?,
                height_m: z_target,
                ..s.clone()
            })
        })
        .collect()
}
