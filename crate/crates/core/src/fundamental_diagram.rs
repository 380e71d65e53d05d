//! Speed-density-flow calibration from traffic counters.
//!
//! Samples are binned along density, each bin contributes the median speed,
//! and the knots are repaired into a strictly decreasing sequence by
//! pool-adjacent-violators. Between knots the speed-density curve is linear;
//! flow follows as `q = k v / 60`.

use std::io::Read;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speed_field::parse_timestamp;

/// Bins with fewer samples are merged into the nearest populated bin.
pub const MIN_BIN_SAMPLES: usize = 5;

#[derive(Debug, Error)]
pub enum FdError {
    #[error("need at least two populated density bins, got {0}")]
    InsufficientData(usize),
    #[error("speed-density curve collapsed to a single level after monotone repair")]
    DegenerateCurve,
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("counter csv: {0}")]
    Schema(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterSample {
    pub station_km: f64,
    pub minute: NaiveDateTime,
    /// Vehicles per minute, all lanes.
    pub flow: f64,
    /// km/h; zero when nothing passed.
    pub speed: f64,
}

impl CounterSample {
    /// veh/km over all lanes.
    pub fn density(&self) -> Option<f64> {
        (self.speed > 0.0).then(|| self.flow * 60.0 / self.speed)
    }
}

pub fn read_counter_csv<R: Read>(r: R) -> Result<Vec<CounterSample>, FdError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != ["minute_iso8601", "station_km", "flow_veh_per_min", "speed_kmh"] {
        return Err(FdError::Schema(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, FdError> {
            rec[i].parse::<f64>().map_err(|_| FdError::Schema(format!("bad number {:?} at row {row}", &rec[i])))
        };
        let minute = parse_timestamp(&rec[0]).ok_or_else(|| FdError::Schema(format!("bad timestamp at row {row}")))?;
        let sample = CounterSample { station_km: num(1)?, minute, flow: num(2)?, speed: num(3)? };
        if sample.flow < 0.0 || sample.speed < 0.0 {
            return Err(FdError::Schema(format!("negative flow or speed at row {row}")));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_counter_csv(path: &Path) -> Result<Vec<CounterSample>, FdError> {
    read_counter_csv(std::fs::File::open(path)?)
}

pub fn write_counter_csv<W: std::io::Write>(w: W, samples: &[CounterSample]) -> Result<(), FdError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["minute_iso8601", "station_km", "flow_veh_per_min", "speed_kmh"])?;
    for s in samples {
        wr.write_record([
            crate::speed_field::format_timestamp(s.minute),
            format!("{:.3}", s.station_km),
            format!("{:.2}", s.flow),
            format!("{:.2}", s.speed),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    pub bin_width: f64,
    /// `(density veh/km, speed km/h)`, density ascending, speed strictly descending.
    pub knots: Vec<(f64, f64)>,
    pub v_free: f64,
    /// veh/min.
    pub q_max: f64,
    /// Density at which `q_max` is attained.
    pub k_critical: f64,
    /// Number of lanes the densities are aggregated over. Knot densities are
    /// divided by this to get per-lane densities.
    #[serde(default = "one")]
    pub lane_basis: u32,
}

fn one() -> u32 {
    1
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Weighted pool-adjacent-violators for a non-increasing fit. Returns blocks
/// of `(weighted density, value, weight)`; adjacent blocks strictly decrease.
fn pava_decreasing(points: &[(f64, f64, f64)]) -> Vec<(f64, f64, f64)> {
    // (sum w*k, sum w*v, sum w)
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    for &(k, v, w) in points {
        blocks.push((w * k, w * v, w));
        while blocks.len() >= 2 {
            let b = blocks[blocks.len() - 1];
            let a = blocks[blocks.len() - 2];
            if a.1 / a.2 <= b.1 / b.2 {
                blocks.pop();
                let last = blocks.last_mut().unwrap();
                *last = (a.0 + b.0, a.1 + b.1, a.2 + b.2);
            } else {
                break;
            }
        }
    }
    blocks.into_iter().map(|(wk, wv, w)| (wk / w, wv / w, w)).collect()
}

pub fn fit_fd(samples: &[CounterSample], bin_width: f64) -> Result<FundamentalDiagram, FdError> {
    if !(bin_width > 0.0) {
        return Err(FdError::BadBinWidth);
    }
    let mut bins: std::collections::BTreeMap<i64, Vec<f64>> = Default::default();
    for s in samples {
        if let Some(k) = s.density() {
            bins.entry((k / bin_width).floor() as i64).or_default().push(s.speed);
        }
    }
    if bins.len() < 2 {
        return Err(FdError::InsufficientData(bins.len()));
    }
    let populated: Vec<i64> = bins.iter().filter(|(_, v)| v.len() >= MIN_BIN_SAMPLES).map(|(&i, _)| i).collect();
    if !populated.is_empty() {
        let sparse: Vec<i64> = bins.keys().copied().filter(|i| !populated.contains(i)).collect();
        for i in sparse {
            let target = *populated.iter().min_by_key(|&&p| ((p - i).abs(), p)).unwrap();
            let moved = bins.remove(&i).unwrap();
            bins.get_mut(&target).unwrap().extend(moved);
        }
    }
    if bins.len() < 2 {
        return Err(FdError::InsufficientData(bins.len()));
    }
    let raw: Vec<(f64, f64, f64)> = bins
        .into_iter()
        .map(|(i, mut speeds)| ((i as f64 + 0.5) * bin_width, median(&mut speeds), speeds.len() as f64))
        .collect();
    let knots: Vec<(f64, f64)> = pava_decreasing(&raw).into_iter().map(|(k, v, _)| (k, v)).collect();
    if knots.len() < 2 {
        return Err(FdError::DegenerateCurve);
    }
    Ok(FundamentalDiagram::from_knots(bin_width, knots))
}

impl FundamentalDiagram {
    /// Builds a diagram from strictly monotone knots; derives `v_free` and `q_max`.
    pub fn from_knots(bin_width: f64, knots: Vec<(f64, f64)>) -> Self {
        assert!(knots.len() >= 2, "need at least two knots");
        let v_free = knots[0].1;
        let (q_max, k_critical) = curve_max_flow(&knots);
        Self { bin_width, knots, v_free, q_max, k_critical, lane_basis: 1 }
    }

    pub fn with_lane_basis(mut self, lanes: u32) -> Self {
        self.lane_basis = lanes.max(1);
        self
    }

    /// Speed at density `k`, held flat outside the knot range.
    pub fn speed_at(&self, k: f64) -> f64 {
        let ks = &self.knots;
        if k <= ks[0].0 {
            return ks[0].1;
        }
        if k >= ks[ks.len() - 1].0 {
            return ks[ks.len() - 1].1;
        }
        let i = ks.partition_point(|&(kk, _)| kk <= k) - 1;
        let (k0, v0) = ks[i];
        let (k1, v1) = ks[i + 1];
        v0 + (v1 - v0) * (k - k0) / (k1 - k0)
    }

    pub fn min_speed(&self) -> f64 {
        self.knots[self.knots.len() - 1].1
    }

    /// Inverse of the speed-density curve, clamped to the knot range.
    pub fn density_from_speed(&self, v: f64) -> f64 {
        let ks = &self.knots;
        if v >= ks[0].1 {
            return ks[0].0;
        }
        if v <= self.min_speed() {
            return ks[ks.len() - 1].0;
        }
        // speeds strictly decreasing: first knot with speed <= v
        let j = ks.partition_point(|&(_, vv)| vv > v);
        let (k0, v0) = ks[j - 1];
        let (k1, v1) = ks[j];
        k0 + (k1 - k0) * (v - v0) / (v1 - v0)
    }

    /// Per-lane density at speed `v`.
    pub fn lane_density_from_speed(&self, v: f64) -> f64 {
        self.density_from_speed(v) / self.lane_basis as f64
    }

    /// veh/min at speed `v`.
    pub fn flow_from_speed(&self, v: f64) -> f64 {
        self.density_from_speed(v) * v / 60.0
    }
}

/// Maximum of `k v(k) / 60` over the piecewise-linear curve.
fn curve_max_flow(knots: &[(f64, f64)]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, knots[0].0);
    let mut consider = |k: f64, v: f64| {
        let q = k * v / 60.0;
        if q > best.0 {
            best = (q, k);
        }
    };
    for w in knots.windows(2) {
        let (k0, v0) = w[0];
        let (k1, v1) = w[1];
        consider(k0, v0);
        consider(k1, v1);
        // v = a + b k, q ∝ a k + b k^2, vertex at k = -a / (2b)
        let b = (v1 - v0) / (k1 - k0);
        if b < 0.0 {
            let a = v0 - b * k0;
            let kv = -a / (2.0 * b);
            if kv > k0 && kv < k1 {
                consider(kv, a + b * kv);
            }
        }
    }
    best
}
