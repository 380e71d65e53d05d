//! Edie's generalized flow and space-mean speed over space-time regions,
//! plus scaling against standard values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::CorridorConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("region has zero area")]
    EmptyRegion,
    #[error("no vehicle time inside region")]
    NoOccupancy,
    #[error("standards must be positive")]
    BadStandards,
}

/// Space-time box: cells `[cell_start, cell_end)`, steps `[step_start, step_end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub cell_start: usize,
    pub cell_end: usize,
    pub step_start: u64,
    pub step_end: u64,
    pub lanes: Vec<usize>,
}

impl Region {
    pub fn new(cells: (usize, usize), steps: (u64, u64), lanes: Vec<usize>) -> Self {
        Self { cell_start: cells.0, cell_end: cells.1, step_start: steps.0, step_end: steps.1, lanes }
    }

    pub fn cells(&self) -> usize {
        self.cell_end.saturating_sub(self.cell_start)
    }

    pub fn steps(&self) -> u64 {
        self.step_end.saturating_sub(self.step_start)
    }

    /// Whole corridor over minutes `[from, to)` of a run.
    pub fn objective_window(cfg: &CorridorConfig, minutes: [f64; 2]) -> Self {
        Self::new(
            (0, cfg.n_cells()),
            (cfg.steps_for_minutes(minutes[0]), cfg.steps_for_minutes(minutes[1])),
            (0..cfg.n_lanes).collect(),
        )
    }
}

/// Time is counted in ticks of `1 / TICKS_PER_STEP` step so that a move of
/// `d` cells at speed `v <= 10` contributes exactly `d / v` steps.
pub const TICKS_PER_STEP: u64 = 2520;

/// Total vehicle distance (cells) and time spent inside a region. Integer
/// accumulators make sums over a partition of the region exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdieTally {
    pub region: Region,
    pub distance_cells: u64,
    pub time_ticks: u64,
}

impl EdieTally {
    pub fn new(region: Region) -> Self {
        Self { region, distance_cells: 0, time_ticks: 0 }
    }

    pub fn total_distance(&self) -> f64 {
        self.distance_cells as f64
    }

    /// Steps.
    pub fn total_time(&self) -> f64 {
        self.time_ticks as f64 / TICKS_PER_STEP as f64
    }

    /// Adds one vehicle-step. `ring_len` unwraps moves across the seam of a
    /// closed road.
    #[inline]
    pub fn record(&mut self, step: u64, lane: usize, cell: usize, speed: u32, ring_len: Option<usize>) {
        let r = &self.region;
        if step < r.step_start || step >= r.step_end || !r.lanes.contains(&lane) {
            return;
        }
        let (c0, c1) = (r.cell_start, r.cell_end);
        if speed == 0 {
            if (c0..c1).contains(&cell) {
                self.time_ticks += TICKS_PER_STEP;
            }
            return;
        }
        let v = speed as usize;
        let per_cell = (TICKS_PER_STEP as f64 / v as f64).round() as u64;
        let mut piece = |a: usize, b: usize| {
            let lo = a.max(c0);
            let hi = b.min(c1);
            if hi > lo {
                let d = (hi - lo) as u64;
                self.distance_cells += d;
                self.time_ticks += d * per_cell;
            }
        };
        match ring_len {
            Some(l) if cell + v > l => {
                piece(cell, l);
                piece(0, cell + v - l);
            }
            _ => piece(cell, cell + v),
        }
    }

    pub fn merge(&mut self, other: &EdieTally) {
        self.distance_cells += other.distance_cells;
        self.time_ticks += other.time_ticks;
    }
}

/// Edie flow, veh/min, lanes summed.
pub fn edie_throughput(tally: &EdieTally, cfg: &CorridorConfig) -> Result<f64, ObjectiveError> {
    let area = tally.region.cells() as f64 * tally.region.steps() as f64;
    if area <= 0.0 {
        return Err(ObjectiveError::EmptyRegion);
    }
    Ok(tally.total_distance() / area * 60.0 / cfg.step_s)
}

/// Edie space-mean speed, km/h.
pub fn edie_mean_speed(tally: &EdieTally, cfg: &CorridorConfig) -> Result<f64, ObjectiveError> {
    if tally.time_ticks == 0 {
        return Err(ObjectiveError::NoOccupancy);
    }
    Ok(cfg.speed_unit().to_kmh(tally.total_distance() / tally.total_time()))
}

/// Reference values used to make objectives dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standards {
    /// veh/min.
    pub q_max: f64,
    /// km/h.
    pub v_free: f64,
}

impl Default for Standards {
    fn default() -> Self {
        Self { q_max: 44.14, v_free: 90.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValues {
    pub throughput: f64,
    pub mean_speed: f64,
    pub scaled_throughput: f64,
    pub scaled_speed: f64,
}

impl ObjectiveValues {
    pub fn new(throughput: f64, mean_speed: f64, standards: Standards) -> Result<Self, ObjectiveError> {
        let (q, v) = scale((throughput, mean_speed), standards)?;
        Ok(Self { throughput, mean_speed, scaled_throughput: q, scaled_speed: v })
    }

    pub fn point(&self) -> (f64, f64) {
        (self.scaled_throughput, self.scaled_speed)
    }
}

/// Elementwise division by the standards, no clamping.
pub fn scale(raw: (f64, f64), standards: Standards) -> Result<(f64, f64), ObjectiveError> {
    if !(standards.q_max > 0.0 && standards.v_free > 0.0) {
        return Err(ObjectiveError::BadStandards);
    }
    Ok((raw.0 / standards.q_max, raw.1 / standards.v_free))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorridorConfig {
        CorridorConfig::default()
    }

    #[test]
    fn region_of_one_minute() {
        // two vehicles covering 60 cells in 100 cells x 33.33 steps give
        // 0.036 veh/step = 1.2 veh/min; here three such minutes back to back
        let tally = EdieTally {
            region: Region::new((0, 100), (0, 100), vec![0]),
            distance_cells: 360,
            time_ticks: 90 * TICKS_PER_STEP,
        };
        let q = edie_throughput(&tally, &cfg()).unwrap();
        assert!((q - 360.0 / 10_000.0 * 60.0 / 1.8).abs() < 1e-12);
        assert!((q - 1.2).abs() < 1e-12);
    }

    #[test]
    fn empty_cases() {
        let t = EdieTally::new(Region::new((0, 100), (0, 10), vec![0]));
        assert_eq!(edie_throughput(&t, &cfg()), Ok(0.0));
        assert_eq!(edie_mean_speed(&t, &cfg()), Err(ObjectiveError::NoOccupancy));
        let z = EdieTally::new(Region::new((5, 5), (0, 10), vec![0]));
        assert_eq!(edie_throughput(&z, &cfg()), Err(ObjectiveError::EmptyRegion));
    }

    #[test]
    fn mean_speed_examples() {
        let mut t = EdieTally::new(Region::new((0, 800), (0, 100), vec![0, 1]));
        for k in 0..50u64 {
            t.record(k, 0, 4 * k as usize, 4, None);
        }
        assert!((edie_mean_speed(&t, &cfg()).unwrap() - 80.0).abs() < 1e-9);

        let mut t = EdieTally::new(Region::new((0, 800), (0, 100), vec![0, 1]));
        for k in 0..20u64 {
            t.record(k, 0, 2 * k as usize, 2, None);
            t.record(k, 1, 4 * k as usize, 4, None);
        }
        assert!((edie_mean_speed(&t, &cfg()).unwrap() - 60.0).abs() < 1e-9);
    }

    #[test]
    fn record_clips_to_region() {
        let mut t = EdieTally::new(Region::new((10, 20), (0, 5), vec![0]));
        t.record(0, 0, 8, 4, None); // path 8..12, 2 cells inside
        assert_eq!(t.total_distance(), 2.0);
        assert_eq!(t.total_time(), 0.5);
        t.record(0, 1, 8, 4, None); // wrong lane
        t.record(5, 0, 8, 4, None); // outside steps
        t.record(1, 0, 15, 0, None); // stopped inside
        assert_eq!(t.total_time(), 1.5);
    }

    #[test]
    fn ring_seam_is_split() {
        let mut t = EdieTally::new(Region::new((0, 100), (0, 1), vec![0]));
        t.record(0, 0, 98, 5, Some(100));
        assert_eq!(t.total_distance(), 5.0);
        assert_eq!(t.total_time(), 1.0);
    }

    #[test]
    fn scaling() {
        let s = Standards::default();
        assert_eq!(scale((44.14, 90.0), s), Ok((1.0, 1.0)));
        assert_eq!(scale((0.0, 0.0), s), Ok((0.0, 0.0)));
        let (q, v) = scale((22.07, 45.0), s).unwrap();
        assert!((q - 0.5).abs() < 1e-15 && (v - 0.5).abs() < 1e-15);
        assert!(scale((1.0, 1.0), Standards { q_max: 0.0, v_free: 90.0 }).is_err());
    }
}
