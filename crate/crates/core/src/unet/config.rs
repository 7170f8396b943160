use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default per-level dropout schedule (four encoder levels, then bottleneck).
pub const DEFAULT_BASE_DROPOUT: [f64; 5] = [0.1, 0.1, 0.2, 0.2, 0.3];

/// Architecture knobs of the filter-scaled U-Net.
///
/// Every convolution width is `phi * base_filters * 2^level`; `delta`
/// multiplies the per-level dropout schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub phi: f64,
    pub delta: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    /// Number of encoder steps; the bottleneck sits below the last one.
    pub depth: usize,
    /// One rate per resolution level, `depth + 1` entries.
    pub base_dropout: Vec<f64>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            phi: 1.0,
            delta: 0.48,
            in_channels: 1,
            num_classes: 6,
            base_filters: 64,
            depth: 4,
            base_dropout: DEFAULT_BASE_DROPOUT.to_vec(),
        }
    }
}

impl UNetConfig {
    pub fn with_phi(phi: f64) -> Self {
        UNetConfig {
            phi,
            ..Default::default()
        }
    }

    /// Channel width at `level` (0 = full resolution, `depth` = bottleneck).
    pub fn width(&self, level: usize) -> Result<usize> {
        let raw = self.phi * (self.base_filters << level) as f64;
        let rounded = raw.round();
        if !(raw > 0.0) || (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(Error::config(format!(
                "phi = {} gives non-integer channel width {raw} at level {level}",
                self.phi
            )));
        }
        Ok(rounded as usize)
    }

    pub fn widths(&self) -> Result<Vec<usize>> {
        (0..=self.depth).map(|l| self.width(l)).collect()
    }

    /// Effective dropout rate `delta * base_dropout[level]`.
    pub fn dropout_rate(&self, level: usize) -> f64 {
        self.delta * self.base_dropout[level]
    }

    /// Spatial extents must be a multiple of this value.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.base_filters == 0 {
            return Err(Error::config(
                "in_channels, num_classes and base_filters must be positive",
            ));
        }
        if self.num_classes > u8::MAX as usize + 1 {
            return Err(Error::config("at most 256 classes are supported"));
        }
        if self.base_dropout.len() != self.depth + 1 {
            return Err(Error::config(format!(
                "base_dropout needs {} entries (one per level), got {}",
                self.depth + 1,
                self.base_dropout.len()
            )));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::config(format!("delta = {} must be >= 0", self.delta)));
        }
        for level in 0..=self.depth {
            let rate = self.dropout_rate(level);
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(format!(
                    "effective dropout {rate} at level {level} must lie in [0, 1)"
                )));
            }
        }
        self.widths()?;
        Ok(())
    }
}
