//! Press-slide kinematics and motion during a camera exposure.
//!
//! The slide follows an ideal crank: `x(θ) = (L/2)(1 - cos θ)` with `θ = 0`
//! at top dead center. All quantities are SI (metres, seconds, radians).

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_STROKE_RATE: f64 = 100.0;
pub const MAX_STROKE_RATE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressKinematics {
    pub stroke_length: f64,
    /// Strokes per minute.
    pub stroke_rate: f64,
    pub exposure: f64,
    /// Crank angle at which the exposure starts.
    pub trigger_offset: f64,
}

impl Default for PressKinematics {
    fn default() -> Self {
        PressKinematics {
            stroke_length: 35e-3,
            stroke_rate: 600.0,
            exposure: 50e-6,
            trigger_offset: 0.0,
        }
    }
}

impl PressKinematics {
    pub fn validate(&self) -> Result<()> {
        if !(self.stroke_length > 0.0) {
            return Err(Error::config("stroke length must be positive"));
        }
        if !(MIN_STROKE_RATE..=MAX_STROKE_RATE).contains(&self.stroke_rate) {
            return Err(Error::config(format!(
                "stroke rate {} spm outside [{MIN_STROKE_RATE}, {MAX_STROKE_RATE}]",
                self.stroke_rate
            )));
        }
        if !(self.exposure > 0.0) {
            return Err(Error::config("exposure must be positive"));
        }
        Ok(())
    }

    /// Crank angular velocity in rad/s.
    pub fn omega(&self) -> f64 {
        2.0 * PI * self.stroke_rate / 60.0
    }

    /// Crank angle swept during one exposure.
    pub fn exposure_angle(&self) -> f64 {
        self.omega() * self.exposure
    }

    pub fn with_trigger_offset(self, theta: f64) -> Self {
        PressKinematics {
            trigger_offset: theta,
            ..self
        }
    }
}

/// Slide position below top dead center and its speed at crank angle `theta`.
pub fn slide_position(k: &PressKinematics, theta: f64) -> (f64, f64) {
    let half = k.stroke_length / 2.0;
    (half * (1.0 - theta.cos()), half * k.omega() * theta.sin())
}

fn displacement_at(k: &PressKinematics, theta0: f64) -> f64 {
    let half = k.stroke_length / 2.0;
    let dtheta = k.exposure_angle();
    // cos a - cos b written as a product to avoid cancellation near TDC.
    (2.0 * half * (theta0 + dtheta / 2.0).sin() * (dtheta / 2.0).sin()).abs()
}

/// Distance the slide travels while the shutter is open.
pub fn exposure_displacement(k: &PressKinematics) -> f64 {
    displacement_at(k, k.trigger_offset)
}

/// Smallest crank angle in `[0, π/2]` whose exposure displacement equals
/// `target`. Targets below the displacement at TDC map to 0.
pub fn solve_trigger_offset(k: &PressKinematics, target: f64) -> Result<f64> {
    const TOL: f64 = 1e-9;
    if !(target >= 0.0) {
        return Err(Error::Range(format!("target displacement {target} m is negative")));
    }
    let f = |t: f64| displacement_at(k, t) - target;
    if f(0.0) >= 0.0 {
        return Ok(0.0);
    }
    let hi_val = f(FRAC_PI_2);
    if hi_val < -TOL {
        return Err(Error::Range(format!(
            "target {:.3} µm exceeds the maximum {:.3} µm reachable for trigger offsets in [0, π/2]",
            target * 1e6,
            displacement_at(k, FRAC_PI_2) * 1e6
        )));
    }
    let (mut lo, mut hi) = (0.0, FRAC_PI_2);
    let mut mid = hi;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < TOL || hi - lo < 1e-15 {
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Motion blur in pixels for a camera imaging `fov_width` metres onto
/// `image_width` pixels.
pub fn blur_in_pixels(k: &PressKinematics, fov_width: f64, image_width: usize) -> Result<f64> {
    if !(fov_width > 0.0) || image_width == 0 {
        return Err(Error::config("field of view and image width must be positive"));
    }
    Ok(exposure_displacement(k) / (fov_width / image_width as f64))
}
