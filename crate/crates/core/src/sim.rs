//! Multi-lane stochastic cellular-automaton traffic engine.
//!
//! Per step, in order: lane changes from a frozen snapshot, the longitudinal
//! update of every lane (parallel update against time-t positions), then
//! boundary handling (exits during the move, arrivals from a virtual origin
//! queue afterwards).
//!
//! Longitudinal rules for a vehicle at `x` with speed `v`:
//!
//! 1. accelerate: `v = min(v + 1, limit)` where the limit is checked along
//!    the whole path so nobody jumps over a slower zone;
//! 2. anticipation: with probability `q` look `S` leaders ahead, otherwise
//!    one, and cap `v` at `x[i+s] - x[i] - s`;
//! 3. slow-to-start: with probability `r` cap `v` at the previous-step gap;
//! 4. random braking: with probability `1 - p_keep`, `v = max(0, v - 1)`;
//! 5. collision guard: cap `v` at `x[i+1] - x[i] - 1 + v[i+1]'`, the room up
//!    to the leader's updated position (lanes are swept front to back).
//!
//! With `q = r = 0` this is exactly the Nagel-Schreckenberg rule set.

use serde::{Deserialize, Serialize};

use crate::corridor::{kmh_to_cells, CorridorConfig, CorridorError};
use crate::objectives::{EdieTally, Region};
use crate::rng::{CounterRng, Slot};
use crate::speed_field::{MeanSpeedField, PatchAccumulator, TraceRecord};

/// Effectively infinite headway (leader beyond the exit).
pub const INF_GAP: u32 = u32::MAX / 4;

/// Default lane-change acceptance probability.
pub const DEFAULT_LANE_CHANGE_PROB: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorParams {
    /// 1 - random braking probability.
    pub p_keep: f64,
    /// Probability of looking `depth` leaders ahead.
    pub q_anticipate: f64,
    /// Probability that the slow-to-start rule applies.
    pub r_slow: f64,
    /// Anticipation depth `S`.
    pub depth: u32,
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self { p_keep: 0.9, q_anticipate: 0.5, r_slow: 0.5, depth: 2 }
    }
}

impl BehaviorParams {
    pub fn nasch(p_keep: f64) -> Self {
        Self { p_keep, q_anticipate: 0.0, r_slow: 0.0, depth: 1 }
    }

    pub fn is_valid(&self) -> bool {
        [self.p_keep, self.q_anticipate, self.r_slow].iter().all(|p| (0.0..=1.0).contains(p)) && self.depth >= 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u64,
    pub cell: usize,
    pub speed: u32,
    /// Gap to the immediate leader at the previous step (slow-to-start memory).
    pub last_gap: u32,
}

/// Vehicle snapshot. `lanes[l]` is sorted by ascending cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroState {
    pub time: u64,
    pub lanes: Vec<Vec<Vehicle>>,
}

/// Flat form used for dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleRow {
    pub id: u64,
    pub lane: usize,
    pub cell: usize,
    pub speed: u32,
}

impl MicroState {
    pub fn empty(n_lanes: usize) -> Self {
        Self { time: 0, lanes: vec![Vec::new(); n_lanes] }
    }

    /// Builds a state from flat rows, sorting each lane. `last_gap` starts as
    /// the current gap.
    pub fn from_rows(n_lanes: usize, rows: &[VehicleRow]) -> Self {
        let mut s = Self::empty(n_lanes);
        for r in rows {
            s.lanes[r.lane].push(Vehicle { id: r.id, cell: r.cell, speed: r.speed, last_gap: INF_GAP });
        }
        for lane in &mut s.lanes {
            lane.sort_by_key(|v| v.cell);
            for i in 0..lane.len() {
                let gap = lane.get(i + 1).map(|l| (l.cell - lane[i].cell - 1) as u32).unwrap_or(INF_GAP);
                lane[i].last_gap = gap;
            }
        }
        s
    }

    pub fn rows(&self) -> Vec<VehicleRow> {
        self.lanes
            .iter()
            .enumerate()
            .flat_map(|(lane, vs)| vs.iter().map(move |v| VehicleRow { id: v.id, lane, cell: v.cell, speed: v.speed }))
            .collect()
    }

    pub fn vehicle_count(&self) -> usize {
        self.lanes.iter().map(Vec::len).sum()
    }

    pub fn max_id(&self) -> Option<u64> {
        self.lanes.iter().flatten().map(|v| v.id).max()
    }

    /// Checks sortedness, distinct cells, and `0 <= speed <= limit`.
    pub fn check(&self, road: &Road) -> Result<(), String> {
        if self.lanes.len() != road.n_lanes() {
            return Err("lane count mismatch".into());
        }
        for (l, lane) in self.lanes.iter().enumerate() {
            for w in lane.windows(2) {
                if w[0].cell >= w[1].cell {
                    return Err(format!("lane {l}: cells {} and {} out of order or shared", w[0].cell, w[1].cell));
                }
            }
            for v in lane {
                if v.cell >= road.n_cells {
                    return Err(format!("vehicle {} beyond road end", v.id));
                }
                if v.speed > road.limit(l, v.cell) {
                    return Err(format!(
                        "vehicle {} at lane {l} cell {} speed {} over limit {}",
                        v.id,
                        v.cell,
                        v.speed,
                        road.limit(l, v.cell)
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Open,
    Ring,
}

/// Per-(lane, cell) speed limits in cells/step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub n_cells: usize,
    pub boundary: Boundary,
    limits: Vec<Vec<u32>>,
}

impl Road {
    pub fn uniform(n_cells: usize, lane_limits: &[u32], boundary: Boundary) -> Self {
        Self { n_cells, boundary, limits: lane_limits.iter().map(|&v| vec![v; n_cells]).collect() }
    }

    /// Open corridor with base limits, the bottleneck span, and optional
    /// per-lane limits (km/h) inside the VSL zone.
    pub fn corridor(cfg: &CorridorConfig, vsl_kmh: Option<&[f64]>) -> Result<Self, CorridorError> {
        let n = cfg.n_cells();
        let mut limits = Vec::with_capacity(cfg.n_lanes);
        let (vs, ve) = cfg.vsl_cells();
        let (bs, be) = cfg.bottleneck_cells();
        for lane in 0..cfg.n_lanes {
            let mut row = vec![cfg.base_limit_cells(lane)?; n];
            if let Some(z) = vsl_kmh {
                let v = kmh_to_cells(z[lane], cfg)?;
                row[vs..ve].iter_mut().for_each(|c| *c = v);
            }
            row[bs..be].iter_mut().for_each(|c| *c = (*c).min(cfg.bottleneck_limit_cells));
            limits.push(row);
        }
        Ok(Self { n_cells: n, boundary: Boundary::Open, limits })
    }

    pub fn n_lanes(&self) -> usize {
        self.limits.len()
    }

    #[inline]
    pub fn limit(&self, lane: usize, cell: usize) -> u32 {
        let row = &self.limits[lane];
        match self.boundary {
            Boundary::Ring => row[cell % self.n_cells],
            Boundary::Open => row[cell.min(self.n_cells - 1)],
        }
    }

    pub fn max_limit(&self) -> u32 {
        self.limits.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Largest `u <= cap` such that every cell on `[x, x + u]` allows `u`.
    #[inline]
    pub fn path_cap(&self, lane: usize, x: usize, cap: u32) -> u32 {
        let mut m = self.limit(lane, x);
        let mut best = 0;
        for u in 1..=cap {
            m = m.min(self.limit(lane, x + u as usize));
            if m < u {
                break;
            }
            best = u;
        }
        best
    }
}

/// Position of the `s`-th leader of `lane[i]`, unwrapped on a ring.
#[inline]
fn leader_pos(lane: &[Vehicle], i: usize, s: usize, road: &Road) -> Option<usize> {
    let j = i + s;
    match road.boundary {
        Boundary::Open => lane.get(j).map(|v| v.cell),
        Boundary::Ring => {
            let n = lane.len();
            Some(lane[j % n].cell + road.n_cells * (j / n))
        }
    }
}

#[inline]
fn gap_to(lane: &[Vehicle], i: usize, s: usize, road: &Road) -> u32 {
    match leader_pos(lane, i, s, road) {
        Some(p) => (p - lane[i].cell - s) as u32,
        None => INF_GAP,
    }
}

/// Empty-cell check and neighbours of `x` in a lane: (rear index, front index).
fn neighbours(lane: &[Vehicle], x: usize) -> (bool, Option<usize>, Option<usize>) {
    let k = lane.partition_point(|v| v.cell < x);
    let occupied = lane.get(k).is_some_and(|v| v.cell == x);
    let front = if occupied { k + 1 } else { k };
    (!occupied, k.checked_sub(1), (front < lane.len()).then_some(front))
}

/// Speed a vehicle could reach next step in `lane` from `x`, ignoring the
/// stochastic rules.
fn achievable(road: &Road, lane: usize, x: usize, v: u32, gap: u32) -> u32 {
    road.path_cap(lane, x, v + 1).min(gap)
}

/// Lateral moves from a frozen snapshot. Returns the number of changes.
pub fn lane_change_phase(state: &mut MicroState, road: &Road, rng: &CounterRng, p_lc: f64) -> usize {
    let n_lanes = state.lanes.len();
    if n_lanes < 2 || p_lc <= 0.0 {
        return 0;
    }
    let ring = road.boundary == Boundary::Ring;
    let l_cells = road.n_cells;
    // (target lane, cell, source lane, index in source lane)
    let mut moves: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (l, lane) in state.lanes.iter().enumerate() {
        for (i, veh) in lane.iter().enumerate() {
            let own = achievable(road, l, veh.cell, veh.speed, gap_to(lane, i, 1, road));
            let mut best: Option<(u32, usize)> = None;
            for m in [l.wrapping_sub(1), l + 1] {
                if m >= n_lanes {
                    continue;
                }
                let target = &state.lanes[m];
                let (free, rear, front) = neighbours(target, veh.cell);
                if !free {
                    continue;
                }
                let front_gap = match front {
                    Some(f) => (target[f].cell - veh.cell - 1) as u32,
                    None if ring && !target.is_empty() => (target[0].cell + l_cells - veh.cell - 1) as u32,
                    None => INF_GAP,
                };
                let rear_ok = match rear {
                    Some(r) => veh.cell - target[r].cell - 1 >= target[r].speed as usize,
                    None if ring && !target.is_empty() => {
                        let r = &target[target.len() - 1];
                        veh.cell + l_cells - r.cell - 1 >= r.speed as usize
                    }
                    None => true,
                };
                if !rear_ok {
                    continue;
                }
                let adj = achievable(road, m, veh.cell, veh.speed, front_gap);
                if adj > own && best.is_none_or(|(b, _)| adj > b) {
                    best = Some((adj, m));
                }
            }
            if let Some((_, m)) = best {
                if rng.chance(p_lc, veh.id, state.time, Slot::LaneChange) {
                    moves.push((m, veh.cell, l, i));
                }
            }
        }
    }
    if moves.is_empty() {
        return 0;
    }
    // one winner per target cell; candidates share the cell, lowest source lane wins
    moves.sort_unstable();
    moves.dedup_by(|b, a| a.0 == b.0 && a.1 == b.1);
    let mut removed: Vec<Vec<bool>> = state.lanes.iter().map(|l| vec![false; l.len()]).collect();
    let mut incoming: Vec<Vec<Vehicle>> = vec![Vec::new(); n_lanes];
    for &(m, cell, l, i) in &moves {
        removed[l][i] = true;
        let mut veh = state.lanes[l][i];
        veh.speed = veh.speed.min(road.limit(m, cell));
        incoming[m].push(veh);
    }
    for (l, lane) in state.lanes.iter_mut().enumerate() {
        let mut k = 0;
        lane.retain(|_| {
            let keep = !removed[l][k];
            k += 1;
            keep
        });
        if !incoming[l].is_empty() {
            lane.append(&mut incoming[l]);
            lane.sort_unstable_by_key(|v| v.cell);
        }
    }
    moves.len()
}

/// Records emitted for each vehicle-step.
pub trait StepObserver {
    fn observe(&mut self, step: u64, lane: usize, veh: &Vehicle, new_speed: u32);
    fn exited(&mut self, _step: u64, _veh: &Vehicle) {}
}

impl StepObserver for () {
    fn observe(&mut self, _: u64, _: usize, _: &Vehicle, _: u32) {}
}

/// Longitudinal update of every lane. Vehicles passing the last cell of an
/// open road are removed; returns how many left.
pub fn step(
    state: &mut MicroState,
    road: &Road,
    params: &BehaviorParams,
    rng: &CounterRng,
    obs: &mut impl StepObserver,
) -> usize {
    let t = state.time;
    let mut exited = 0;
    let mut pre: Vec<u32> = Vec::new();
    let mut new_speed: Vec<u32> = Vec::new();
    for (l, lane) in state.lanes.iter_mut().enumerate() {
        let n = lane.len();
        if n == 0 {
            continue;
        }
        // rules 1-4 only read time-t state
        pre.clear();
        for i in 0..n {
            let veh = &lane[i];
            let mut v = road.path_cap(l, veh.cell, veh.speed + 1);
            let s = if params.depth > 1 && rng.chance(params.q_anticipate, veh.id, t, Slot::Anticipation) {
                params.depth as usize
            } else {
                1
            };
            v = v.min(gap_to(lane, i, s, road));
            if rng.chance(params.r_slow, veh.id, t, Slot::SlowToStart) {
                v = v.min(veh.last_gap);
            }
            if rng.chance(1.0 - params.p_keep, veh.id, t, Slot::RandomBrake) {
                v = v.saturating_sub(1);
            }
            pre.push(v);
        }
        // rule 5, front to back: never reach the leader's new position. On a
        // ring the most downstream vehicle's leader is not updated yet and is
        // taken as standing still.
        new_speed.clear();
        new_speed.resize(n, 0);
        for i in (0..n).rev() {
            let g1 = gap_to(lane, i, 1, road);
            let leader_v = if i + 1 < n { new_speed[i + 1] } else { 0 };
            let cap = if g1 >= INF_GAP { INF_GAP } else { g1 + leader_v };
            new_speed[i] = pre[i].min(cap);
        }
        for i in 0..n {
            let g1 = gap_to(lane, i, 1, road);
            obs.observe(t, l, &lane[i], new_speed[i]);
            let veh = &mut lane[i];
            veh.speed = new_speed[i];
            veh.last_gap = g1;
            veh.cell += new_speed[i] as usize;
        }
        match road.boundary {
            Boundary::Open => {
                let before = lane.len();
                while lane.last().is_some_and(|v| v.cell >= road.n_cells) {
                    let v = lane.pop().unwrap();
                    obs.exited(t, &v);
                }
                exited += before - lane.len();
            }
            Boundary::Ring => {
                if lane.iter().any(|v| v.cell >= road.n_cells) {
                    lane.iter_mut().for_each(|v| v.cell %= road.n_cells);
                    lane.sort_unstable_by_key(|v| v.cell);
                }
            }
        }
    }
    state.time += 1;
    exited
}

/// Virtual origin queues and vehicle ids for an open road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub queues: Vec<u64>,
    pub next_id: u64,
    pub arrivals: u64,
    pub entered: u64,
}

impl Origin {
    pub fn new(n_lanes: usize, next_id: u64) -> Self {
        Self { queues: vec![0; n_lanes], next_id, arrivals: 0, entered: 0 }
    }

    pub fn queued(&self) -> u64 {
        self.queues.iter().sum()
    }
}

/// Draws arrivals for this step (expected `demand_per_step` vehicles across
/// all lanes, split evenly) and lets each lane's queue head enter cell 0.
/// `step` is the time index used for the arrival dice.
pub fn apply_boundaries(
    state: &mut MicroState,
    origin: &mut Origin,
    road: &Road,
    demand_per_step: f64,
    rng: &CounterRng,
    step: u64,
) {
    if road.boundary == Boundary::Ring {
        return;
    }
    let n_lanes = state.lanes.len();
    let per_lane = demand_per_step.max(0.0) / n_lanes as f64;
    let whole = per_lane.floor();
    let frac = per_lane - whole;
    for (l, lane) in state.lanes.iter_mut().enumerate() {
        let mut k = whole as u64;
        if rng.chance(frac, l as u64, step, Slot::Arrival) {
            k += 1;
        }
        origin.queues[l] += k;
        origin.arrivals += k;
        if origin.queues[l] > 0 && lane.first().is_none_or(|v| v.cell > 0) {
            let gap = lane.first().map(|v| (v.cell - 1) as u32).unwrap_or(INF_GAP);
            let speed = road.path_cap(l, 0, road.limit(l, 0)).min(gap);
            lane.insert(0, Vehicle { id: origin.next_id, cell: 0, speed, last_gap: gap });
            origin.next_id += 1;
            origin.queues[l] -= 1;
            origin.entered += 1;
        }
    }
}

/// What a run should record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Patch field covering this many minutes from the run start.
    pub field_minutes: Option<usize>,
    /// Edie regions; steps relative to the run start.
    pub regions: Vec<Region>,
    /// Keep every n-th step of per-vehicle traces.
    pub trajectory_stride: Option<u64>,
    /// Point detectors at these cells: vehicles crossing the cell's
    /// upstream edge are counted per minute.
    pub detector_cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub seed: u64,
    pub params: BehaviorParams,
    pub horizon_steps: u64,
    /// veh/min per minute of the run; the last value holds beyond the end.
    pub demand: Vec<f64>,
    pub initial: MicroState,
    pub lane_change_prob: f64,
    pub record: RecordOptions,
}

/// Per-minute counts and summed speeds (cells/step) at one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSeries {
    pub cell: usize,
    pub counts: Vec<u32>,
    pub speed_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutputs {
    pub final_state: MicroState,
    pub field: Option<MeanSpeedField>,
    pub tallies: Vec<EdieTally>,
    pub traces: Vec<TraceRecord>,
    pub detectors: Vec<DetectorSeries>,
    pub exits: u64,
    pub entered: u64,
    pub max_queue: u64,
    pub final_queue: u64,
    pub lane_changes: u64,
    /// Vehicle-steps per lane (lane usage).
    pub lane_occupancy: Vec<u64>,
    /// Running hash of every vehicle-step, hex.
    pub trajectory_hash: String,
}

struct Recorder {
    start: u64,
    ring: Option<usize>,
    minutes: usize,
    step_s: f64,
    field: Option<PatchAccumulator>,
    tallies: Vec<EdieTally>,
    stride: Option<u64>,
    traces: Vec<TraceRecord>,
    detectors: Vec<DetectorSeries>,
    occupancy: Vec<u64>,
    hash: u64,
}

impl StepObserver for Recorder {
    #[inline]
    fn observe(&mut self, step: u64, lane: usize, veh: &Vehicle, new_speed: u32) {
        let rel = step - self.start;
        self.hash = (self.hash ^ veh.id.wrapping_mul(0x100_0000_01b3))
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(((veh.cell as u64) << 20) ^ ((lane as u64) << 8) ^ new_speed as u64);
        self.occupancy[lane] += 1;
        if let Some(acc) = self.field.as_mut() {
            acc.record(rel, veh.cell, new_speed);
        }
        for t in &mut self.tallies {
            t.record(rel, lane, veh.cell, new_speed, self.ring);
        }
        if let Some(s) = self.stride {
            if rel % s == 0 {
                self.traces.push(TraceRecord { step: rel, vehicle_id: veh.id, lane, cell: veh.cell, speed: new_speed });
            }
        }
        if !self.detectors.is_empty() {
            let minute = ((rel as f64 * self.step_s + 1e-9) / 60.0).floor() as usize;
            if minute < self.minutes {
                let end = veh.cell + new_speed as usize;
                for d in &mut self.detectors {
                    if veh.cell < d.cell && d.cell <= end {
                        d.counts[minute] += 1;
                        d.speed_sums[minute] += new_speed as f64;
                    }
                }
            }
        }
    }
}

/// Runs a simulation on `road` for `horizon_steps`.
pub fn run(sim: &SimRun, road: &Road, cfg: &CorridorConfig) -> SimOutputs {
    let rng = CounterRng::new(sim.seed);
    let mut state = sim.initial.clone();
    let start = state.time;
    let minutes = ((sim.horizon_steps as f64 * cfg.step_s) / 60.0).ceil() as usize;
    let mut origin = Origin::new(road.n_lanes(), state.max_id().map_or(0, |m| m + 1));
    let mut rec = Recorder {
        start,
        ring: (road.boundary == Boundary::Ring).then_some(road.n_cells),
        minutes,
        step_s: cfg.step_s,
        field: sim.record.field_minutes.map(|m| PatchAccumulator::new(cfg, m)),
        tallies: sim.record.regions.iter().cloned().map(EdieTally::new).collect(),
        stride: sim.record.trajectory_stride.filter(|&s| s > 0),
        traces: Vec::new(),
        detectors: sim
            .record
            .detector_cells
            .iter()
            .map(|&cell| DetectorSeries { cell, counts: vec![0; minutes], speed_sums: vec![0.0; minutes] })
            .collect(),
        occupancy: vec![0; road.n_lanes()],
        hash: 0xcbf2_9ce4_8422_2325,
    };
    let mut exits = 0u64;
    let mut max_queue = 0u64;
    let mut lane_changes = 0u64;
    for k in 0..sim.horizon_steps {
        lane_changes += lane_change_phase(&mut state, road, &rng, sim.lane_change_prob) as u64;
        exits += step(&mut state, road, &sim.params, &rng, &mut rec) as u64;
        let minute = ((k as f64 * cfg.step_s + 1e-9) / 60.0).floor() as usize;
        let demand = sim.demand.get(minute).or(sim.demand.last()).copied().unwrap_or(0.0);
        let now = state.time;
        apply_boundaries(&mut state, &mut origin, road, demand / 60.0 * cfg.step_s, &rng, now);
        max_queue = max_queue.max(origin.queued());
    }
    SimOutputs {
        final_state: state,
        field: rec.field.map(|a| a.finish(None)),
        tallies: rec.tallies,
        traces: rec.traces,
        detectors: rec.detectors,
        exits,
        entered: origin.entered,
        max_queue,
        final_queue: origin.queued(),
        lane_changes,
        lane_occupancy: rec.occupancy,
        trajectory_hash: format!("{:016x}", rec.hash),
    }
}

/// Trajectory dump `step,vehicle_id,lane,cell,speed_cells`.
pub fn write_trajectory_csv<W: std::io::Write>(w: W, traces: &[TraceRecord]) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["step", "vehicle_id", "lane", "cell", "speed_cells"])?;
    for t in traces {
        wr.write_record([
            t.step.to_string(),
            t.vehicle_id.to_string(),
            t.lane.to_string(),
            t.cell.to_string(),
            t.speed.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
