//! Spatiotemporal mean-speed fields (segment x minute patches).

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::CorridorConfig;

/// Upper sanity bound for a patch speed, km/h.
pub const MAX_SPEED_KMH: f64 = 150.0;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("non-contiguous minutes at row {row}: expected {expected}, found {found}")]
    Gap { row: usize, expected: String, found: String },
    #[error("speed {value} km/h at row {row}, segment {segment} outside [0, {MAX_SPEED_KMH}]")]
    Range { row: usize, segment: usize, value: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Row-major grid `[minute][segment]` of km/h; `None` marks a missing patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSpeedField {
    pub t0: Option<NaiveDateTime>,
    pub n_minutes: usize,
    pub n_segments: usize,
    pub values: Vec<Option<f64>>,
}

impl MeanSpeedField {
    pub fn new_missing(n_minutes: usize, n_segments: usize) -> Self {
        Self { t0: None, n_minutes, n_segments, values: vec![None; n_minutes * n_segments] }
    }

    pub fn from_fn(n_minutes: usize, n_segments: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut values = Vec::with_capacity(n_minutes * n_segments);
        for m in 0..n_minutes {
            for s in 0..n_segments {
                values.push(f(m, s));
            }
        }
        Self { t0: None, n_minutes, n_segments, values }
    }

    #[inline]
    pub fn get(&self, minute: usize, segment: usize) -> Option<f64> {
        self.values[minute * self.n_segments + segment]
    }

    pub fn set(&mut self, minute: usize, segment: usize, v: Option<f64>) {
        self.values[minute * self.n_segments + segment] = v;
    }

    pub fn row(&self, minute: usize) -> &[Option<f64>] {
        &self.values[minute * self.n_segments..(minute + 1) * self.n_segments]
    }

    /// Minutes `[start, end)` as a new field; `t0` shifts accordingly.
    pub fn window(&self, start: usize, end: usize) -> MeanSpeedField {
        let end = end.min(self.n_minutes);
        let start = start.min(end);
        MeanSpeedField {
            t0: self.t0.map(|t| t + Duration::minutes(start as i64)),
            n_minutes: end - start,
            n_segments: self.n_segments,
            values: self.values[start * self.n_segments..end * self.n_segments].to_vec(),
        }
    }

    pub fn timestamp(&self, minute: usize) -> Option<NaiveDateTime> {
        self.t0.map(|t| t + Duration::minutes(minute as i64))
    }

    /// Speeds of one minute with missing segments filled from the nearest
    /// present neighbour (downstream wins ties). `None` if the row is empty.
    pub fn filled_row(&self, minute: usize) -> Option<Vec<f64>> {
        let row = self.row(minute);
        if row.iter().all(Option::is_none) {
            return None;
        }
        let n = row.len();
        Some(
            (0..n)
                .map(|s| {
                    (0..n)
                        .flat_map(|d| [s + d, s.wrapping_sub(d)])
                        .filter(|&i| i < n)
                        .find_map(|i| row[i])
                        .unwrap()
                })
                .collect(),
        )
    }

    /// Mean and population standard deviation over present patches.
    pub fn mean_and_std(&self) -> Option<(f64, f64)> {
        let present: Vec<f64> = self.values.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }

    pub fn to_csv_writer<W: Write>(&self, w: W) -> Result<(), FieldError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["minute_iso8601".to_string()];
        header.extend((0..self.n_segments).map(|s| format!("seg_{s:03}")));
        wr.write_record(&header)?;
        let t0 = self.t0.unwrap_or_default();
        for m in 0..self.n_minutes {
            let mut rec = vec![format_timestamp(t0 + Duration::minutes(m as i64))];
            rec.extend(self.row(m).iter().map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_default()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }
}

/// Read a speed CSV. The segment count must match the corridor.
pub fn ingest_speed_csv(path: &Path, cfg: &CorridorConfig) -> Result<MeanSpeedField, FieldError> {
    read_speed_csv(std::fs::File::open(path)?, cfg)
}

pub fn read_speed_csv<R: Read>(r: R, cfg: &CorridorConfig) -> Result<MeanSpeedField, FieldError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let header = rd.headers()?.clone();
    let n_segments = cfg.n_segments();
    if header.len() != n_segments + 1 || &header[0] != "minute_iso8601" {
        return Err(FieldError::Schema(format!(
            "expected minute_iso8601 + {n_segments} segment columns, got {} columns",
            header.len()
        )));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h != format!("seg_{i:03}") {
            return Err(FieldError::Schema(format!("column {} should be seg_{i:03}, got {h}", i + 1)));
        }
    }
    let mut t0 = None;
    let mut prev: Option<NaiveDateTime> = None;
    let mut values = Vec::new();
    let mut n_minutes = 0;
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != n_segments + 1 {
            return Err(FieldError::Schema(format!("row {row} has {} fields", rec.len())));
        }
        let t = parse_timestamp(&rec[0])
            .ok_or_else(|| FieldError::Schema(format!("bad timestamp {:?} at row {row}", &rec[0])))?;
        if let Some(p) = prev {
            let expected = p + Duration::minutes(1);
            if t != expected {
                return Err(FieldError::Gap {
                    row,
                    expected: format_timestamp(expected),
                    found: format_timestamp(t),
                });
            }
        } else {
            t0 = Some(t);
        }
        prev = Some(t);
        for s in 0..n_segments {
            let cell = &rec[s + 1];
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| FieldError::Schema(format!("bad speed {cell:?} at row {row}")))?;
            if !(0.0..=MAX_SPEED_KMH).contains(&v) {
                return Err(FieldError::Range { row, segment: s, value: v });
            }
            values.push(Some(v));
        }
        n_minutes += 1;
    }
    Ok(MeanSpeedField { t0, n_minutes, n_segments, values })
}

/// Congestion definition: some segment below `threshold_kmh` for
/// `persistence_min` consecutive minutes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CongestionRule {
    pub threshold_kmh: f64,
    pub persistence_min: usize,
}

impl Default for CongestionRule {
    fn default() -> Self {
        Self { threshold_kmh: 40.0, persistence_min: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CongestionEvent {
    pub onset_minute: usize,
    /// Inclusive `[first, last]` segments that met the persistence rule.
    pub segment_range: [usize; 2],
    pub cleared_minute: Option<usize>,
}

pub fn detect_congestion(field: &MeanSpeedField) -> Vec<CongestionEvent> {
    detect_congestion_with(field, CongestionRule::default())
}

pub fn detect_congestion_with(field: &MeanSpeedField, rule: CongestionRule) -> Vec<CongestionEvent> {
    let mut runs = vec![0usize; field.n_segments];
    let mut events = Vec::new();
    let mut open: Option<CongestionEvent> = None;
    for m in 0..field.n_minutes {
        let mut any_below = false;
        for (s, run) in runs.iter_mut().enumerate() {
            match field.get(m, s) {
                Some(v) if v < rule.threshold_kmh => {
                    *run += 1;
                    any_below = true;
                }
                _ => *run = 0,
            }
        }
        let qualifying = runs.iter().enumerate().filter(|(_, &r)| r >= rule.persistence_min).map(|(s, _)| s);
        match open.as_mut() {
            None => {
                let segs: Vec<usize> = qualifying.collect();
                if let (Some(&first), Some(&last)) = (segs.first(), segs.last()) {
                    open = Some(CongestionEvent { onset_minute: m, segment_range: [first, last], cleared_minute: None });
                }
            }
            Some(ev) => {
                if !any_below {
                    ev.cleared_minute = Some(m);
                    events.push(open.take().unwrap());
                } else {
                    for s in qualifying {
                        ev.segment_range[0] = ev.segment_range[0].min(s);
                        ev.segment_range[1] = ev.segment_range[1].max(s);
                    }
                }
            }
        }
    }
    events.extend(open);
    events
}

/// One simulated vehicle-step: the vehicle sat at `cell` at the start of
/// `step` and advanced `speed` cells during it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub vehicle_id: u64,
    pub lane: usize,
    pub cell: usize,
    pub speed: u32,
}

/// Spreads a move from `cell` by `speed` cells over spans of `span` cells,
/// calling `f(span_index, distance, time)` with distance in cells and time in
/// steps. The part of the move beyond `n_cells` is dropped (vehicle left).
#[inline]
pub(crate) fn split_move(cell: usize, speed: u32, span: usize, n_cells: usize, mut f: impl FnMut(usize, f64, f64)) {
    if speed == 0 {
        if cell < n_cells {
            f(cell / span, 0.0, 1.0);
        }
        return;
    }
    let v = speed as usize;
    let end = (cell + v).min(n_cells);
    let mut x = cell;
    while x < end {
        let seg = x / span;
        let seg_end = ((seg + 1) * span).min(end);
        let d = (seg_end - x) as f64;
        f(seg, d, d / v as f64);
        x = seg_end;
    }
}

/// Accumulates Edie distance/time per (minute, segment) patch.
#[derive(Debug, Clone)]
pub struct PatchAccumulator {
    n_minutes: usize,
    n_segments: usize,
    cells_per_segment: usize,
    n_cells: usize,
    step_s: f64,
    patch_s: f64,
    speed_unit_kmh: f64,
    distance: Vec<f64>,
    time: Vec<f64>,
}

impl PatchAccumulator {
    pub fn new(cfg: &CorridorConfig, n_minutes: usize) -> Self {
        let n_segments = cfg.n_segments();
        Self {
            n_minutes,
            n_segments,
            cells_per_segment: cfg.cells_per_segment(),
            n_cells: cfg.n_cells(),
            step_s: cfg.step_s,
            patch_s: cfg.patch_duration_s,
            speed_unit_kmh: cfg.speed_unit().km_per_h,
            distance: vec![0.0; n_minutes * n_segments],
            time: vec![0.0; n_minutes * n_segments],
        }
    }

    /// `step` is relative to the field start.
    #[inline]
    pub fn record(&mut self, step: u64, cell: usize, speed: u32) {
        let minute = ((step as f64 * self.step_s + 1e-9) / self.patch_s).floor() as usize;
        if minute >= self.n_minutes {
            return;
        }
        let base = minute * self.n_segments;
        let (dist, time) = (&mut self.distance, &mut self.time);
        split_move(cell, speed, self.cells_per_segment, self.n_cells, |seg, d, t| {
            dist[base + seg] += d;
            time[base + seg] += t;
        });
    }

    pub fn finish(self, t0: Option<NaiveDateTime>) -> MeanSpeedField {
        let values = self
            .distance
            .iter()
            .zip(&self.time)
            .map(|(&d, &t)| if t > 0.0 { Some(d / t * self.speed_unit_kmh) } else { None })
            .collect();
        MeanSpeedField { t0, n_minutes: self.n_minutes, n_segments: self.n_segments, values }
    }
}

/// Edie space-mean speed per patch from raw traces. Steps are taken relative
/// to `first_step`; the field spans `n_minutes`.
pub fn aggregate_sim_to_field(
    traces: &[TraceRecord],
    cfg: &CorridorConfig,
    first_step: u64,
    n_minutes: usize,
) -> MeanSpeedField {
    let mut acc = PatchAccumulator::new(cfg, n_minutes);
    for t in traces.iter().filter(|t| t.step >= first_step) {
        acc.record(t.step - first_step, t.cell, t.speed);
    }
    acc.finish(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_with(n_minutes: usize, f: impl Fn(usize, usize) -> Option<f64>) -> MeanSpeedField {
        MeanSpeedField::from_fn(n_minutes, 16, f)
    }

    #[test]
    fn fifteen_minutes_fires_at_the_fifteenth() {
        let f = field_with(30, |m, s| Some(if s == 5 && m < 15 { 35.0 } else { 80.0 }));
        let ev = detect_congestion(&f);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].onset_minute, 14);
        assert_eq!(ev[0].segment_range, [5, 5]);
        assert_eq!(ev[0].cleared_minute, Some(15));
    }

    #[test]
    fn fourteen_minutes_is_not_congestion() {
        let f = field_with(30, |m, s| Some(if s == 5 && m < 14 { 39.0 } else { 80.0 }));
        assert!(detect_congestion(&f).is_empty());
        let free = field_with(30, |_, _| Some(80.0));
        assert!(detect_congestion(&free).is_empty());
    }

    #[test]
    fn threshold_is_strict() {
        let f = field_with(30, |_, s| Some(if s == 2 { 40.0 } else { 80.0 }));
        assert!(detect_congestion(&f).is_empty());
    }

    #[test]
    fn missing_value_breaks_the_run() {
        let f = field_with(30, |m, s| {
            if s != 3 {
                Some(80.0)
            } else if m == 7 {
                None
            } else {
                Some(30.0)
            }
        });
        let ev = detect_congestion(&f);
        assert_eq!(ev.len(), 1);
        // run restarts at minute 8, so 15 minutes end at 22
        assert_eq!(ev[0].onset_minute, 22);
        assert_eq!(ev[0].cleared_minute, None);
    }

    #[test]
    fn segment_range_grows_while_open() {
        let f = field_with(40, |m, s| match s {
            4 => Some(30.0),
            5 if m >= 10 => Some(30.0),
            _ => Some(90.0),
        });
        let ev = detect_congestion(&f);
        assert_eq!(ev[0].onset_minute, 14);
        assert_eq!(ev[0].segment_range, [4, 5]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let cfg = CorridorConfig::default();
        let mut f = field_with(60, |m, s| Some(((m * 7 + s * 3) % 120) as f64 + 0.25));
        f.set(3, 4, None);
        f.t0 = parse_timestamp("2024-05-01T07:00:00");
        let mut buf = Vec::new();
        f.to_csv_writer(&mut buf).unwrap();
        let g = read_speed_csv(&buf[..], &cfg).unwrap();
        assert_eq!(g.n_minutes, 60);
        assert_eq!(g.n_segments, 16);
        assert_eq!(g.get(3, 4), None);
        assert_eq!(g, f);

        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(11); // minute 10 missing -> jump 9 -> 11
        let gap = read_speed_csv(lines.join("\n").as_bytes(), &cfg);
        assert!(matches!(gap, Err(FieldError::Gap { .. })), "{gap:?}");

        let bad_header = text.replacen("seg_000", "segment0", 1);
        assert!(matches!(read_speed_csv(bad_header.as_bytes(), &cfg), Err(FieldError::Schema(_))));

        let out_of_range = text.replacen(",0.25,", ",151.00,", 1);
        assert!(matches!(read_speed_csv(out_of_range.as_bytes(), &cfg), Err(FieldError::Range { .. })));
    }

    #[test]
    fn constant_speed_vehicle_gives_its_speed() {
        let cfg = CorridorConfig::default();
        // crosses segment 0 (cells 0..50) at 4 cells/step
        let traces: Vec<TraceRecord> = (0..13)
            .map(|k| TraceRecord { step: k, vehicle_id: 1, lane: 0, cell: 4 * k as usize, speed: 4 })
            .collect();
        let f = aggregate_sim_to_field(&traces, &cfg, 0, 1);
        assert!((f.get(0, 0).unwrap() - 80.0).abs() < 1e-9);
        assert!((f.get(0, 1).unwrap() - 80.0).abs() < 1e-9);
        assert_eq!(f.get(0, 2), None);
    }

    #[test]
    fn two_speeds_equal_time_is_sixty() {
        let cfg = CorridorConfig::default();
        let mut traces = Vec::new();
        for k in 0..10u64 {
            traces.push(TraceRecord { step: k, vehicle_id: 1, lane: 0, cell: 100 + 2 * k as usize, speed: 2 });
            traces.push(TraceRecord { step: k, vehicle_id: 2, lane: 1, cell: 105 + 4 * k as usize, speed: 4 });
        }
        let f = aggregate_sim_to_field(&traces, &cfg, 0, 1);
        assert!((f.get(0, 2).unwrap() - 60.0).abs() < 1e-9);
    }

    #[test]
    fn filled_row_takes_nearest() {
        let mut f = field_with(1, |_, s| Some(s as f64));
        f.set(0, 0, None);
        f.set(0, 7, None);
        let r = f.filled_row(0).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r[7], 8.0);
        assert!(MeanSpeedField::new_missing(1, 16).filled_row(0).is_none());
    }
}
