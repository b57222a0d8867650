use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARM_RANGE_MM: (f64, f64) = (10.0, 0.0);
pub const ROTATION_RANGE_DEG: (f64, f64) = (230.0, 280.0);

/// One bend state of the fiber.
///
/// `bend` is the scalar bend parameter `t`: 0 at the calibrated
/// configuration `C_10`, 1 at `C_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberConfiguration {
    pub id: String,
    pub arm_position: f64,
    pub rotation: f64,
    pub bend: f64,
}

impl FiberConfiguration {
    /// Builds a configuration and derives `bend` from the arm position.
    pub fn new(arm_position: f64, rotation: f64) -> Result<Self> {
        if !(0.0..=10.0).contains(&arm_position) {
            return Err(Error::invalid(format!(
                "arm position {arm_position} mm outside [0, 10]"
            )));
        }
        if !(230.0..=280.0).contains(&rotation) {
            return Err(Error::invalid(format!("rotation {rotation}° outside [230, 280]")));
        }
        let (start, end) = ARM_RANGE_MM;
        Ok(Self {
            id: config_id(arm_position),
            arm_position,
            rotation,
            bend: (start - arm_position) / (start - end),
        })
    }
}

/// `C_x` label where `x` is the arm position in mm.
pub fn config_id(arm_position: f64) -> String {
    if (arm_position - arm_position.round()).abs() < 1e-9 {
        format!("C_{}", arm_position.round() as i64)
    } else {
        format!("C_{}", format!("{arm_position:.3}").trim_end_matches('0'))
    }
}

/// Evenly spaced configurations from `(arm.0, rotation.0)` to
/// `(arm.1, rotation.1)`.
pub fn make_config_grid(count: usize, arm: (f64, f64), rotation: (f64, f64)) -> Result<Vec<FiberConfiguration>> {
    if count < 2 {
        return Err(Error::invalid(format!(
            "configuration grid needs count >= 2, got {count}"
        )));
    }
    (0..count)
        .map(|i| {
            let frac = i as f64 / (count - 1) as f64;
            let a = arm.0 + frac * (arm.1 - arm.0);
            let r = rotation.0 + frac * (rotation.1 - rotation.0);
            // Snap accumulated rounding so the default grid lands on whole mm.
            let a = if (a - a.round()).abs() < 1e-9 { a.round() } else { a };
            let r = if (r - r.round()).abs() < 1e-9 { r.round() } else { r };
            FiberConfiguration::new(a, r)
        })
        .collect()
}

/// The 11-point grid C_10 … C_0.
pub fn default_grid() -> Vec<FiberConfiguration> {
    make_config_grid(11, ARM_RANGE_MM, ROTATION_RANGE_DEG).expect("default grid is valid")
}
