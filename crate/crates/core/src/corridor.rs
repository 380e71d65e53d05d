//! Static corridor description and the km/h <-> cell unit bridge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

const EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorridorError {
    #[error("speed {0} km/h is not a multiple of the cell speed unit {1} km/h")]
    NonIntegralSpeed(f64, f64),
    #[error("position {0} km outside corridor [0, {1}] km")]
    OutOfCorridor(f64, f64),
    #[error("invalid corridor: {0}")]
    Invalid(String),
}

/// Corridor geometry. Cell indices grow downstream; lane 0 is the slow lane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorConfig {
    pub version: u32,
    pub length_km: f64,
    pub n_lanes: usize,
    pub cell_length_m: f64,
    pub step_s: f64,
    /// Base speed limit per lane index, km/h.
    pub base_limit_kmh: Vec<f64>,
    pub bottleneck_position_km: f64,
    pub bottleneck_length_cells: usize,
    /// Speed limit inside the bottleneck span, cells/step, all lanes.
    pub bottleneck_limit_cells: u32,
    pub vsl_zone_km: [f64; 2],
    pub segment_length_m: f64,
    pub patch_duration_s: f64,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            length_km: 8.0,
            n_lanes: 2,
            cell_length_m: 10.0,
            step_s: 1.8,
            base_limit_kmh: vec![80.0, 100.0],
            bottleneck_position_km: 7.1,
            bottleneck_length_cells: 3,
            bottleneck_limit_cells: 1,
            vsl_zone_km: [0.0, 7.1],
            segment_length_m: 500.0,
            patch_duration_s: 60.0,
        }
    }
}

fn exact_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let n = r.round();
    if n >= 0.0 && (r - n).abs() < EPS * r.abs().max(1.0) {
        Some(n as usize)
    } else {
        None
    }
}

impl CorridorConfig {
    pub fn validate(&self) -> Result<(), CorridorError> {
        let bad = |m: &str| Err(CorridorError::Invalid(m.to_string()));
        if self.version != CONFIG_VERSION {
            return bad("unsupported config version");
        }
        if !(self.length_km > 0.0) || !(self.cell_length_m > 0.0) || !(self.step_s > 0.0) {
            return bad("length, cell length and step must be positive");
        }
        if exact_ratio(self.length_km * 1000.0, self.cell_length_m).is_none() {
            return bad("length is not a whole number of cells");
        }
        if !(self.segment_length_m > 0.0)
            || exact_ratio(self.segment_length_m, self.cell_length_m).is_none()
            || exact_ratio(self.length_km * 1000.0, self.segment_length_m).is_none()
        {
            return bad("segment length must tile the corridor in whole cells");
        }
        if !(self.patch_duration_s > 0.0) {
            return bad("patch duration must be positive");
        }
        if self.n_lanes == 0 || self.base_limit_kmh.len() != self.n_lanes {
            return bad("need one base limit per lane and at least one lane");
        }
        for &v in &self.base_limit_kmh {
            if kmh_to_cells(v, self)? == 0 {
                return bad("base limits must be positive");
            }
        }
        if !(0.0..=self.length_km).contains(&self.bottleneck_position_km) {
            return bad("bottleneck outside corridor");
        }
        let [a, b] = self.vsl_zone_km;
        if !(0.0 <= a && a <= b && b <= self.length_km) {
            return bad("VSL zone must lie inside the corridor");
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        (self.length_km * 1000.0 / self.cell_length_m).round() as usize
    }

    pub fn cells_per_segment(&self) -> usize {
        (self.segment_length_m / self.cell_length_m).round() as usize
    }

    pub fn n_segments(&self) -> usize {
        (self.length_km * 1000.0 / self.segment_length_m).round() as usize
    }

    pub fn speed_unit(&self) -> SpeedUnit {
        SpeedUnit::new(self.cell_length_m, self.step_s)
    }

    /// Steps covering `minutes` of simulated time.
    pub fn steps_for_minutes(&self, minutes: f64) -> u64 {
        (minutes * 60.0 / self.step_s).round() as u64
    }

    /// Index of the patch (minute) a step falls in, by its start time.
    pub fn patch_of_step(&self, step: u64) -> usize {
        // Small epsilon so that e.g. step 100 * 1.8 s = 180 s lands in patch 3.
        ((step as f64 * self.step_s + 1e-9) / self.patch_duration_s).floor() as usize
    }

    pub fn base_limit_cells(&self, lane: usize) -> Result<u32, CorridorError> {
        kmh_to_cells(self.base_limit_kmh[lane], self)
    }

    /// First bottleneck cell and one past the last.
    pub fn bottleneck_cells(&self) -> (usize, usize) {
        let n = self.n_cells();
        let start = km_to_cell(self.bottleneck_position_km, self).unwrap_or(n).min(n);
        (start, (start + self.bottleneck_length_cells).min(n))
    }

    /// VSL cell span `[start, end)`.
    pub fn vsl_cells(&self) -> (usize, usize) {
        let n = self.n_cells();
        let s = km_to_cell(self.vsl_zone_km[0], self).unwrap_or(0).min(n);
        let e = km_to_cell(self.vsl_zone_km[1], self).unwrap_or(n).min(n);
        (s, e)
    }
}

/// One cell per step expressed in km/h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedUnit {
    pub km_per_h: f64,
}

impl SpeedUnit {
    pub fn new(cell_length_m: f64, step_s: f64) -> Self {
        Self { km_per_h: cell_length_m / step_s * 3.6 }
    }

    pub fn to_kmh(&self, cells_per_step: f64) -> f64 {
        cells_per_step * self.km_per_h
    }
}

pub fn kmh_to_cells(v: f64, cfg: &CorridorConfig) -> Result<u32, CorridorError> {
    let unit = cfg.speed_unit().km_per_h;
    if !(v >= 0.0) {
        return Err(CorridorError::NonIntegralSpeed(v, unit));
    }
    let r = v / unit;
    let n = r.round();
    if (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(CorridorError::NonIntegralSpeed(v, unit));
    }
    Ok(n as u32)
}

/// Nearest whole cells/step for an arbitrary speed; used for estimated states.
pub fn kmh_to_nearest_cells(v: f64, cfg: &CorridorConfig) -> u32 {
    (v.max(0.0) / cfg.speed_unit().km_per_h).round() as u32
}

pub fn km_to_cell(pos: f64, cfg: &CorridorConfig) -> Result<usize, CorridorError> {
    if !(0.0..=cfg.length_km).contains(&pos) {
        return Err(CorridorError::OutOfCorridor(pos, cfg.length_km));
    }
    // 7.1 km * 1000 / 10 is 709.999.. in binary; snap before flooring.
    let x = pos * 1000.0 / cfg.cell_length_m;
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.floor() };
    Ok(snapped as usize)
}

/// Upstream edge of a cell, km.
pub fn cell_to_km(cell: usize, cfg: &CorridorConfig) -> f64 {
    cell as f64 * cfg.cell_length_m / 1000.0
}
