//! Observation bundles on disk and the synthetic twin generator.
//!
//! A dataset directory holds `speeds.csv`, `counters.csv`, `dataset.json`
//! and, for synthetic data, `truth.json`. An optional
//! `long_term_inflow.csv` (`minute_iso8601,flow_veh_per_min`) feeds the
//! long-term inflow predictor.

use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corridor::{km_to_cell, CorridorConfig, CorridorError};
use crate::fundamental_diagram::{read_counter_csv, write_counter_csv, CounterSample, FdError};
use crate::sim::{run, BehaviorParams, MicroState, RecordOptions, Road, SimRun, DEFAULT_LANE_CHANGE_PROB};
use crate::speed_field::{detect_congestion, format_timestamp, parse_timestamp, read_speed_csv, CongestionEvent, FieldError, MeanSpeedField};

pub const SPEEDS_FILE: &str = "speeds.csv";
pub const COUNTERS_FILE: &str = "counters.csv";
pub const MANIFEST_FILE: &str = "dataset.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const LONG_TERM_FILE: &str = "long_term_inflow.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Corridor(#[from] CorridorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Describes how the minutes of a dataset are used. The first
/// `history_min` minutes are lead-in for assimilation and prediction;
/// replay cycles are issued over the following `replay_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub t0: String,
    pub history_min: usize,
    pub replay_min: usize,
    pub corridor: CorridorConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub speeds: MeanSpeedField,
    pub counters: Vec<CounterSample>,
    pub long_term_inflow: Option<Vec<f64>>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        manifest.corridor.validate()?;
        let speeds = read_speed_csv(std::fs::File::open(dir.join(SPEEDS_FILE))?, &manifest.corridor)?;
        let counters = read_counter_csv(std::fs::File::open(dir.join(COUNTERS_FILE))?)?;
        let lt = dir.join(LONG_TERM_FILE);
        let long_term_inflow = if lt.exists() { Some(read_series_csv(std::fs::File::open(lt)?)?) } else { None };
        let ds = Self { manifest, speeds, counters, long_term_inflow };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<(), DatasetError> {
        let need = self.manifest.history_min + self.manifest.replay_min;
        if self.speeds.n_minutes < need {
            return Err(DatasetError::Invalid(format!("{} speed minutes, manifest needs {need}", self.speeds.n_minutes)));
        }
        if self.counters.is_empty() {
            return Err(DatasetError::Invalid("no counter samples".into()));
        }
        Ok(())
    }

    pub fn t0(&self) -> Option<NaiveDateTime> {
        self.speeds.t0.or_else(|| parse_timestamp(&self.manifest.t0))
    }

    /// Minute index of a timestamp relative to the speed field.
    pub fn minute_of(&self, t: NaiveDateTime) -> Option<i64> {
        self.t0().map(|t0| (t - t0).num_minutes())
    }

    /// Counter samples stamped before `minute`.
    pub fn counters_before(&self, minute: usize) -> Vec<CounterSample> {
        self.counters
            .iter()
            .filter(|c| self.minute_of(c.minute).is_some_and(|m| m >= 0 && (m as usize) < minute))
            .copied()
            .collect()
    }

    /// Per-minute flow at the most upstream station, aligned with the speed
    /// field; gaps repeat the previous value.
    pub fn inflow_series(&self) -> Vec<f64> {
        let upstream = self.counters.iter().map(|c| c.station_km).fold(f64::INFINITY, f64::min);
        let mut out: Vec<Option<f64>> = vec![None; self.speeds.n_minutes];
        for c in self.counters.iter().filter(|c| c.station_km == upstream) {
            if let Some(m) = self.minute_of(c.minute) {
                if m >= 0 && (m as usize) < out.len() {
                    out[m as usize] = Some(c.flow);
                }
            }
        }
        let first = out.iter().flatten().next().copied().unwrap_or(0.0);
        let mut last = first;
        out.into_iter()
            .map(|v| {
                if let Some(v) = v {
                    last = v;
                }
                last
            })
            .collect()
    }

    /// Writes every file of the bundle.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        self.speeds.write_csv(&dir.join(SPEEDS_FILE))?;
        write_counter_csv(std::fs::File::create(dir.join(COUNTERS_FILE))?, &self.counters)?;
        if let (Some(lt), Some(t0)) = (&self.long_term_inflow, self.t0()) {
            let start = t0 - Duration::minutes(lt.len() as i64);
            write_series_csv(std::fs::File::create(dir.join(LONG_TERM_FILE))?, start, lt)?;
        }
        Ok(())
    }
}

fn read_series_csv<R: std::io::Read>(r: R) -> Result<Vec<f64>, DatasetError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let v: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Invalid("bad long-term inflow row".into()))?;
        out.push(v);
    }
    Ok(out)
}

fn write_series_csv<W: std::io::Write>(w: W, start: NaiveDateTime, values: &[f64]) -> Result<(), DatasetError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["minute_iso8601", "flow_veh_per_min"])?;
    for (i, v) in values.iter().enumerate() {
        wr.write_record([format_timestamp(start + Duration::minutes(i as i64)), format!("{v:.2}")])?;
    }
    wr.flush()?;
    Ok(())
}

/// Demand profile and hidden parameters of a twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub truth: BehaviorParams,
    /// Simulated but not emitted; fills the empty road.
    pub spinup_min: usize,
    pub history_min: usize,
    pub replay_min: usize,
    /// veh/min during spin-up and history.
    pub base_demand: f64,
    /// veh/min reached at the end of the replay period (linear ramp).
    pub peak_demand: f64,
    pub n_stations: usize,
    pub t0: String,
    pub lane_change_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 20240115,
            truth: BehaviorParams { p_keep: 0.9, q_anticipate: 0.8, r_slow: 0.2, depth: 2 },
            spinup_min: 15,
            history_min: 30,
            replay_min: 60,
            base_demand: 20.0,
            peak_demand: 40.0,
            n_stations: 8,
            t0: "2024-01-15T07:00:00".into(),
            lane_change_prob: DEFAULT_LANE_CHANGE_PROB,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Spec(m.into()));
        if !self.truth.is_valid() {
            return bad("truth parameters out of range");
        }
        if self.replay_min == 0 || self.n_stations == 0 {
            return bad("replay_min and n_stations must be positive");
        }
        if !(self.base_demand >= 0.0 && self.peak_demand >= 0.0) {
            return bad("demand must be non-negative");
        }
        if parse_timestamp(&self.t0).is_none() {
            return bad("t0 is not a minute timestamp");
        }
        if !(0.0..=1.0).contains(&self.lane_change_prob) {
            return bad("lane_change_prob outside [0, 1]");
        }
        Ok(())
    }

    /// Demand per simulated minute, spin-up included.
    pub fn demand(&self) -> Vec<f64> {
        let flat = self.spinup_min + self.history_min;
        let ramp = self.replay_min;
        (0..flat + ramp)
            .map(|m| {
                if m < flat {
                    self.base_demand
                } else {
                    let f = (m - flat + 1) as f64 / ramp as f64;
                    self.base_demand + (self.peak_demand - self.base_demand) * f
                }
            })
            .collect()
    }

    /// Evenly spaced station positions, km.
    pub fn stations(&self, cfg: &CorridorConfig) -> Vec<f64> {
        let n = self.n_stations as f64;
        (0..self.n_stations).map(|i| (cfg.length_km * (i as f64 + 0.5) / n * 1000.0).round() / 1000.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub spec: SyntheticSpec,
    /// Demand per emitted minute.
    pub demand: Vec<f64>,
    pub congestion: Vec<CongestionEvent>,
    pub speeds_sha256: String,
    pub counters_sha256: String,
}

/// Simulates the corridor with known parameters and returns the emitted
/// observations (already round-tripped through their CSV form) plus the
/// truth manifest.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, cfg: &CorridorConfig) -> Result<(Dataset, TruthManifest), DatasetError> {
    spec.validate()?;
    cfg.validate()?;
    let t0 = parse_timestamp(&spec.t0).expect("validated");
    let demand = spec.demand();
    let total = demand.len();
    let road = Road::corridor(cfg, None)?;
    let stations = spec.stations(cfg);
    let detector_cells = stations.iter().map(|&km| km_to_cell(km, cfg)).collect::<Result<Vec<_>, _>>()?;
    let sim = SimRun {
        seed: spec.seed,
        params: spec.truth,
        horizon_steps: cfg.steps_for_minutes(total as f64),
        demand: demand.clone(),
        initial: MicroState::empty(cfg.n_lanes),
        lane_change_prob: spec.lane_change_prob,
        record: RecordOptions { field_minutes: Some(total), detector_cells, ..Default::default() },
    };
    let out = run(&sim, &road, cfg);
    let skip = spec.spinup_min;
    let emitted = total - skip;
    let mut field = out.field.expect("field requested").window(skip, total);
    field.t0 = Some(t0);

    let unit = cfg.speed_unit().km_per_h;
    let mut counters = Vec::with_capacity(emitted * stations.len());
    for m in 0..emitted {
        for (d, &km) in out.detectors.iter().zip(&stations) {
            let n = d.counts[m + skip];
            let speed = if n > 0 { d.speed_sums[m + skip] / n as f64 * unit } else { 0.0 };
            counters.push(CounterSample { station_km: km, minute: t0 + Duration::minutes(m as i64), flow: n as f64, speed });
        }
    }

    let mut speeds_csv = Vec::new();
    field.to_csv_writer(&mut speeds_csv)?;
    let mut counters_csv = Vec::new();
    write_counter_csv(&mut counters_csv, &counters)?;
    let speeds = read_speed_csv(&speeds_csv[..], cfg)?;
    let counters = read_counter_csv(&counters_csv[..])?;

    let truth = TruthManifest {
        spec: spec.clone(),
        demand: demand[skip..].to_vec(),
        congestion: detect_congestion(&speeds),
        speeds_sha256: hex::encode(Sha256::digest(&speeds_csv)),
        counters_sha256: hex::encode(Sha256::digest(&counters_csv)),
    };
    let manifest = DatasetManifest {
        version: 1,
        t0: spec.t0.clone(),
        history_min: spec.history_min,
        replay_min: spec.replay_min,
        corridor: cfg.clone(),
    };
    Ok((Dataset { manifest, speeds, counters, long_term_inflow: None }, truth))
}

/// Generates and writes a bundle including `truth.json`.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, cfg: &CorridorConfig, dir: &Path) -> Result<TruthManifest, DatasetError> {
    let (ds, truth) = generate_synthetic_dataset(spec, cfg)?;
    ds.save(dir)?;
    std::fs::write(dir.join(TRUTH_FILE), serde_json::to_vec_pretty(&truth)?)?;
    Ok(truth)
}
