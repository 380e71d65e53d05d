//! The recommendation cycle: assimilate, build the catalog, simulate every
//! scenario over a seed ensemble, score, filter and select. Also scheduled
//! replay and run persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Duration;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::assimilation::{assimilate, AssimilationError, AssimilationResult, FilterSettings, Observations, Posterior, WindowReport};
use crate::corridor::{CorridorConfig, CorridorError};
use crate::dataset::Dataset;
use crate::fundamental_diagram::{fit_fd, FdError, FundamentalDiagram};
use crate::objectives::{edie_mean_speed, edie_throughput, ObjectiveError, ObjectiveValues, Region, Standards};
use crate::pareto::{pareto_front, select_on_front, Candidate, Orientation, ParetoError, Selection};
use crate::rng::combine_seed;
use crate::scenarios::{build_catalog, predict_inflow, ControlScenario, ScenarioError, VslId};
use crate::sim::{run, BehaviorParams, MicroState, RecordOptions, Road, SimRun};
use crate::speed_field::{detect_congestion, format_timestamp, MeanSpeedField};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("run {run_id} failed during {stage}: {message}")]
    Stage { run_id: String, stage: String, message: String },
    #[error(transparent)]
    Corridor(#[from] CorridorError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error(transparent)]
    Assimilation(#[from] AssimilationError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogMode {
    VslOnly,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corridor: CorridorConfig,
    pub assimilation: FilterSettings,
    pub catalog: CatalogMode,
    pub orientations: Vec<Orientation>,
    pub horizon_min: usize,
    pub objective_window_min: [f64; 2],
    pub cadence_min: usize,
    /// Simulations per scenario; objectives are averaged over them.
    pub seeds: usize,
    pub standards: Standards,
    /// Master seed; every derived seed is a hash of it.
    pub seed: u64,
    pub fd_bin_width: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corridor: CorridorConfig::default(),
            assimilation: FilterSettings::default(),
            catalog: CatalogMode::VslOnly,
            orientations: Orientation::presets(),
            horizon_min: 30,
            objective_window_min: [20.0, 30.0],
            cadence_min: 5,
            seeds: 5,
            standards: Standards::default(),
            seed: 7,
            fd_bin_width: 10.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.corridor.validate()?;
        let [a, b] = self.objective_window_min;
        if !(0.0 <= a && a < b && b <= self.horizon_min as f64) {
            return Err(PipelineError::Config(format!("objective window [{a}, {b}] outside the {} min horizon", self.horizon_min)));
        }
        if self.cadence_min == 0 {
            return Err(PipelineError::Config("cadence must be positive".into()));
        }
        if self.seeds == 0 {
            return Err(PipelineError::Config("at least one seed per scenario".into()));
        }
        if self.orientations.is_empty() {
            return Err(PipelineError::Config("no orientations".into()));
        }
        for o in &self.orientations {
            Orientation::new(o.w, o.p)?;
        }
        if !(self.standards.q_max > 0.0 && self.standards.v_free > 0.0) {
            return Err(PipelineError::Config("standards must be positive".into()));
        }
        Ok(())
    }
}

/// Relative change against the uncontrolled baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub throughput: f64,
    pub mean_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedScenario {
    pub scenario_id: String,
    pub vsl: VslId,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub raw: ObjectiveValues,
    pub point: (f64, f64),
    pub pareto: bool,
    pub selected_for: Vec<String>,
    pub improvement: Option<Improvement>,
    /// Std of predicted patch speeds over the horizon, averaged over seeds.
    pub speed_std: f64,
    /// Fraction of vehicle-steps per lane.
    pub lane_usage: Vec<f64>,
    /// Per-seed (throughput veh/min, mean speed km/h, speed std km/h).
    pub per_seed: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationSummary {
    pub map_params: BehaviorParams,
    pub posterior: Posterior,
    pub windows: Vec<WindowReport>,
    pub vehicles_reconstructed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub assimilation_ms: u64,
    pub simulation_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub issued_at: String,
    /// Minutes of observation used, counted from the dataset start.
    pub now_minute: usize,
    pub inputs_digest: String,
    pub status: RunStatus,
    pub failure: Option<String>,
    pub catalog: CatalogMode,
    pub fd_q_max: Option<f64>,
    pub assimilation: Option<AssimilationSummary>,
    pub baseline_inflow: Vec<f64>,
    pub inflow_fallback: bool,
    pub scenarios: Vec<EvaluatedScenario>,
    pub selections: Vec<Selection>,
    /// Onset seen in observations up to `now_minute`.
    pub congestion_onset_minute: Option<usize>,
    /// Minutes relative to the congestion onset of the replayed stream.
    pub delta_t_min: Option<i64>,
    pub timing: Timing,
    /// Averaged predicted fields, persisted separately.
    #[serde(skip)]
    pub predicted_fields: BTreeMap<String, MeanSpeedField>,
}

/// The deterministic part of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub inputs_digest: String,
    pub now_minute: usize,
    pub selections: Vec<Selection>,
    pub front: Vec<Candidate>,
}

impl RunRecord {
    pub fn candidates(&self) -> Vec<Candidate> {
        self.scenarios.iter().map(|s| Candidate { id: s.scenario_id.clone(), point: s.point }).collect()
    }

    pub fn front(&self) -> Vec<Candidate> {
        self.scenarios
            .iter()
            .filter(|s| s.pareto)
            .map(|s| Candidate { id: s.scenario_id.clone(), point: s.point })
            .collect()
    }

    pub fn selection_report(&self) -> SelectionReport {
        SelectionReport {
            inputs_digest: self.inputs_digest.clone(),
            now_minute: self.now_minute,
            selections: self.selections.clone(),
            front: self.front(),
        }
    }

    /// Server-side selection for an arbitrary orientation.
    pub fn recommend(&self, o: &Orientation) -> Result<Selection, ParetoError> {
        let flags: Vec<bool> = self.scenarios.iter().map(|s| s.pareto).collect();
        select_on_front(&self.candidates(), &flags, o)
    }

    pub fn scenario(&self, id: &str) -> Option<&EvaluatedScenario> {
        self.scenarios.iter().find(|s| s.scenario_id == id)
    }
}

/// Hash of everything that determines a cycle's rows.
pub fn inputs_digest(ds: &Dataset, cfg: &PipelineConfig, now: usize) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    h.update(now.to_le_bytes());
    let mut speeds = Vec::new();
    ds.speeds.window(0, now).to_csv_writer(&mut speeds).map_err(|e| PipelineError::Other(e.to_string()))?;
    h.update(&speeds);
    for c in ds.counters_before(now) {
        h.update(format!("{}|{}|{}|{}\n", format_timestamp(c.minute), c.station_km, c.flow, c.speed));
    }
    if let Some(lt) = &ds.long_term_inflow {
        for v in lt {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Calibrated diagram with per-lane scaling for reconstruction.
pub fn calibrate(ds: &Dataset, cfg: &PipelineConfig, now: usize) -> Result<FundamentalDiagram, PipelineError> {
    Ok(fit_fd(&ds.counters_before(now), cfg.fd_bin_width)?.with_lane_basis(cfg.corridor.n_lanes as u32))
}

struct SeedOutcome {
    throughput: f64,
    mean_speed: f64,
    field: MeanSpeedField,
    lane_occupancy: Vec<u64>,
}

fn simulate_scenario(
    sc: &ControlScenario,
    seed: u64,
    params: BehaviorParams,
    initial: &MicroState,
    baseline: &[f64],
    cfg: &PipelineConfig,
) -> Result<SeedOutcome, PipelineError> {
    let c = &cfg.corridor;
    let road = Road::corridor(c, sc.vsl.zone_limits())?;
    let region = Region::objective_window(c, cfg.objective_window_min);
    let sim = SimRun {
        seed,
        params,
        horizon_steps: c.steps_for_minutes(cfg.horizon_min as f64),
        demand: sc.demand(baseline),
        initial: initial.clone(),
        lane_change_prob: cfg.assimilation.lane_change_prob,
        record: RecordOptions { field_minutes: Some(cfg.horizon_min), regions: vec![region], ..Default::default() },
    };
    let out = run(&sim, &road, c);
    let tally = &out.tallies[0];
    Ok(SeedOutcome {
        throughput: edie_throughput(tally, c)?,
        mean_speed: edie_mean_speed(tally, c).unwrap_or(0.0),
        field: out.field.expect("field requested"),
        lane_occupancy: out.lane_occupancy,
    })
}

fn mean_field(fields: &[MeanSpeedField]) -> MeanSpeedField {
    let f0 = &fields[0];
    MeanSpeedField::from_fn(f0.n_minutes, f0.n_segments, |m, s| {
        let vs: Vec<f64> = fields.iter().filter_map(|f| f.get(m, s)).collect();
        (!vs.is_empty()).then(|| vs.iter().sum::<f64>() / vs.len() as f64)
    })
}

/// Scores a catalog from a known state and parameters. Seeds are shared
/// across scenarios (common random numbers).
pub fn evaluate_catalog(
    catalog: &[ControlScenario],
    params: BehaviorParams,
    initial: &MicroState,
    baseline: &[f64],
    cfg: &PipelineConfig,
    cycle_seed: u64,
) -> Result<(Vec<EvaluatedScenario>, BTreeMap<String, MeanSpeedField>), PipelineError> {
    let jobs: Vec<(usize, usize)> = (0..catalog.len()).flat_map(|i| (0..cfg.seeds).map(move |k| (i, k))).collect();
    let work = |&(i, k): &(usize, usize)| {
        simulate_scenario(&catalog[i], combine_seed(&[cycle_seed, k as u64]), params, initial, baseline, cfg)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<SeedOutcome, PipelineError>> = jobs.par_iter().map(work).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<SeedOutcome, PipelineError>> = jobs.iter().map(work).collect();
    let mut results = results.into_iter();

    let mut rows = Vec::with_capacity(catalog.len());
    let mut fields = BTreeMap::new();
    for sc in catalog {
        let outs: Vec<SeedOutcome> = (0..cfg.seeds).map(|_| results.next().expect("one result per job")).collect::<Result<_, _>>()?;
        let n = outs.len() as f64;
        let per_seed: Vec<[f64; 3]> = outs
            .iter()
            .map(|o| [o.throughput, o.mean_speed, o.field.mean_and_std().map_or(0.0, |x| x.1)])
            .collect();
        let q = per_seed.iter().map(|r| r[0]).sum::<f64>() / n;
        let v = per_seed.iter().map(|r| r[1]).sum::<f64>() / n;
        let sd = per_seed.iter().map(|r| r[2]).sum::<f64>() / n;
        let lanes = cfg.corridor.n_lanes;
        let mut occ = vec![0u64; lanes];
        for o in &outs {
            for (a, b) in occ.iter_mut().zip(&o.lane_occupancy) {
                *a += b;
            }
        }
        let tot = occ.iter().sum::<u64>().max(1) as f64;
        let raw = ObjectiveValues::new(q, v, cfg.standards)?;
        let fs: Vec<MeanSpeedField> = outs.into_iter().map(|o| o.field).collect();
        fields.insert(sc.id.clone(), mean_field(&fs));
        rows.push(EvaluatedScenario {
            scenario_id: sc.id.clone(),
            vsl: sc.vsl.id,
            a: sc.inflow.map(|g| g.a),
            b: sc.inflow.map(|g| g.b),
            point: raw.point(),
            raw,
            pareto: false,
            selected_for: Vec::new(),
            improvement: None,
            speed_std: sd,
            lane_usage: occ.iter().map(|&c| c as f64 / tot).collect(),
            per_seed,
        });
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| r.point).collect();
    for (r, f) in rows.iter_mut().zip(pareto_front(&pts)) {
        r.pareto = f;
    }
    if let Some(base) = rows.iter().find(|r| r.scenario_id == VslId::NoControl.as_str()).map(|r| r.raw) {
        let rel = |x: f64, b: f64| if b != 0.0 { (x - b) / b } else { 0.0 };
        for r in &mut rows {
            r.improvement = Some(Improvement {
                throughput: rel(r.raw.throughput, base.throughput),
                mean_speed: rel(r.raw.mean_speed, base.mean_speed),
            });
        }
    }
    Ok((rows, fields))
}

/// Selections for every configured orientation; marks `selected_for`.
pub fn select_all(rows: &mut [EvaluatedScenario], orientations: &[Orientation]) -> Result<Vec<Selection>, ParetoError> {
    let cands: Vec<Candidate> = rows.iter().map(|s| Candidate { id: s.scenario_id.clone(), point: s.point }).collect();
    let flags: Vec<bool> = rows.iter().map(|s| s.pareto).collect();
    let mut out = Vec::with_capacity(orientations.len());
    for o in orientations {
        let sel = select_on_front(&cands, &flags, o)?;
        if let Some(r) = rows.iter_mut().find(|r| r.scenario_id == sel.scenario_id) {
            r.selected_for.push(o.label());
        }
        out.push(sel);
    }
    Ok(out)
}

fn stage<T, E: std::fmt::Display>(r: Result<T, E>, name: &str, rec: &mut RunRecord) -> Result<T, PipelineError> {
    r.map_err(|e| {
        rec.status = RunStatus::Failed;
        rec.failure = Some(format!("{name}: {e}"));
        PipelineError::Stage { run_id: rec.run_id.clone(), stage: name.into(), message: e.to_string() }
    })
}

/// Assimilation over the windows ending at `now`, capped to the available
/// history.
pub fn assimilate_at(ds: &Dataset, cfg: &PipelineConfig, now: usize, fd: &FundamentalDiagram) -> Result<AssimilationResult, PipelineError> {
    let c = &cfg.corridor;
    let inflow = ds.inflow_series();
    let road = Road::corridor(c, None)?;
    let mut settings = cfg.assimilation.clone();
    settings.n_windows = settings.n_windows.min(now.saturating_sub(1) / settings.window_min.max(1));
    if settings.n_windows == 0 {
        return Err(PipelineError::Other("not enough history for one window".into()));
    }
    let obs = Observations { field: &ds.speeds, inflow: &inflow, fd, now };
    let mut rng = ChaCha8Rng::seed_from_u64(combine_seed(&[cfg.seed, now as u64, 1]));
    Ok(assimilate(&obs, c, &road, &settings, combine_seed(&[cfg.seed, 2]), &mut rng)?)
}

/// One cycle at minute `now` of the dataset. On error the partial record,
/// marked failed, is returned alongside the error.
pub fn run_cycle(ds: &Dataset, cfg: &PipelineConfig, now: usize, run_id: &str) -> Result<RunRecord, (Box<RunRecord>, PipelineError)> {
    let started = Instant::now();
    let issued_at = ds.t0().map(|t| format_timestamp(t + Duration::minutes(now as i64))).unwrap_or_default();
    let mut rec = RunRecord {
        run_id: run_id.to_string(),
        issued_at,
        now_minute: now,
        inputs_digest: String::new(),
        status: RunStatus::Complete,
        failure: None,
        catalog: cfg.catalog,
        fd_q_max: None,
        assimilation: None,
        baseline_inflow: Vec::new(),
        inflow_fallback: false,
        scenarios: Vec::new(),
        selections: Vec::new(),
        congestion_onset_minute: None,
        delta_t_min: None,
        timing: Timing::default(),
        predicted_fields: BTreeMap::new(),
    };
    match cycle_body(ds, cfg, now, &mut rec, started) {
        Ok(()) => Ok(rec),
        Err(e) => {
            if rec.status != RunStatus::Failed {
                rec.status = RunStatus::Failed;
                rec.failure = Some(e.to_string());
            }
            rec.timing.total_ms = started.elapsed().as_millis() as u64;
            Err((Box::new(rec), e))
        }
    }
}

fn cycle_body(ds: &Dataset, cfg: &PipelineConfig, now: usize, rec: &mut RunRecord, started: Instant) -> Result<(), PipelineError> {
    stage(cfg.validate(), "config", rec)?;
    if now == 0 || now > ds.speeds.n_minutes {
        let e = format!("minute {now} outside the {}-minute observation", ds.speeds.n_minutes);
        return stage(Err::<(), _>(e), "config", rec);
    }
    rec.inputs_digest = stage(inputs_digest(ds, cfg, now), "digest", rec)?;
    rec.congestion_onset_minute = detect_congestion(&ds.speeds.window(0, now)).first().map(|e| e.onset_minute);
    let c = &cfg.corridor;

    let fd = stage(calibrate(ds, cfg, now), "calibrate", rec)?;
    rec.fd_q_max = Some(fd.q_max);

    let t = Instant::now();
    let inflow = ds.inflow_series();
    let assim = stage(assimilate_at(ds, cfg, now, &fd), "assimilate", rec)?;
    rec.assimilation = Some(AssimilationSummary {
        map_params: assim.map_params,
        posterior: assim.posterior.clone(),
        windows: assim.windows.clone(),
        vehicles_reconstructed: assim.initial_state.vehicle_count(),
    });
    rec.timing.assimilation_ms = t.elapsed().as_millis() as u64;

    let pred = stage(predict_inflow(&inflow[..now], ds.long_term_inflow.as_deref(), cfg.horizon_min), "predict", rec)?;
    rec.baseline_inflow = pred.baseline.clone();
    rec.inflow_fallback = pred.fallback;
    let catalog = stage(build_catalog(c, cfg.catalog == CatalogMode::VslOnly), "catalog", rec)?;

    let t = Instant::now();
    let cycle_seed = combine_seed(&[cfg.seed, now as u64, 3]);
    let (mut rows, fields) =
        stage(evaluate_catalog(&catalog, assim.map_params, &assim.initial_state, &pred.baseline, cfg, cycle_seed), "simulate", rec)?;
    rec.timing.simulation_ms = t.elapsed().as_millis() as u64;
    rec.selections = stage(select_all(&mut rows, &cfg.orientations), "select", rec)?;
    rec.scenarios = rows;
    rec.predicted_fields = fields;
    rec.timing.total_ms = started.elapsed().as_millis() as u64;
    Ok(())
}

/// Cycle minutes of a replay: the end of every cadence block after the
/// dataset's lead-in.
pub fn replay_minutes(history_min: usize, replay_min: usize, cadence_min: usize) -> Vec<usize> {
    (1..=replay_min / cadence_min).map(|k| history_min + k * cadence_min).collect()
}

/// Fills `delta_t_min` from the first onset in the observed stream.
pub fn tag_delta_t(records: &mut [RunRecord], field: &MeanSpeedField) -> Option<usize> {
    let onset = detect_congestion(field).first().map(|e| e.onset_minute);
    for r in records.iter_mut() {
        r.delta_t_min = onset.map(|o| r.now_minute as i64 - o as i64);
    }
    onset
}

/// Runs cycles sequentially at each replay minute. Failed cycles are kept
/// as failed records.
pub fn schedule(
    ds: &Dataset,
    cfg: &PipelineConfig,
    store: Option<&RunStore>,
    mut on_record: impl FnMut(&RunRecord),
) -> Result<Vec<RunRecord>, PipelineError> {
    let minutes = replay_minutes(ds.manifest.history_min, ds.manifest.replay_min, cfg.cadence_min);
    let mut records = Vec::with_capacity(minutes.len());
    for now in minutes {
        let id = match store {
            Some(s) => s.next_id(now)?,
            None => format!("m{now:03}"),
        };
        let rec = match run_cycle(ds, cfg, now, &id) {
            Ok(r) => r,
            Err((r, _)) => *r,
        };
        on_record(&rec);
        records.push(rec);
    }
    tag_delta_t(&mut records, &ds.speeds);
    if let Some(s) = store {
        for r in &records {
            s.save(r)?;
        }
    }
    Ok(records)
}

/// Append-only directory of runs: `<root>/<run_id>/record.json`,
/// `selection.json` and `speedfields/<scenario>.csv`.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `r0001-m045`, numbered after the existing runs.
    pub fn next_id(&self, now: usize) -> Result<String, PipelineError> {
        let n = self.list_ids()?.len() + 1;
        let mut k = n;
        loop {
            let id = format!("r{k:04}-m{now:03}");
            if !self.root.join(&id).exists() {
                return Ok(id);
            }
            k += 1;
        }
    }

    pub fn list_ids(&self) -> Result<Vec<String>, PipelineError> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("record.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn save(&self, rec: &RunRecord) -> Result<PathBuf, PipelineError> {
        let dir = self.root.join(&rec.run_id);
        write_record_dir(rec, &dir)?;
        Ok(dir)
    }

    fn run_dir(&self, id: &str) -> Result<PathBuf, PipelineError> {
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(PipelineError::Other(format!("bad run id {id:?}")));
        }
        Ok(self.root.join(id))
    }

    /// The record without its predicted fields.
    pub fn load(&self, id: &str) -> Result<RunRecord, PipelineError> {
        let dir = self.run_dir(id)?;
        Ok(serde_json::from_slice(&std::fs::read(dir.join("record.json"))?)?)
    }

    /// One scenario's averaged predicted field.
    pub fn load_field(&self, id: &str, scenario: &str) -> Result<MeanSpeedField, PipelineError> {
        let dir = self.run_dir(id)?;
        if scenario.is_empty() || scenario.contains(['/', '\\']) || scenario.starts_with('.') {
            return Err(PipelineError::Other(format!("bad scenario id {scenario:?}")));
        }
        let cfg: CorridorConfig = std::fs::read(self.root.join("corridor.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        crate::speed_field::ingest_speed_csv(&dir.join("speedfields").join(format!("{scenario}.csv")), &cfg)
            .map_err(|e| PipelineError::Other(e.to_string()))
    }

    /// Records the corridor so persisted fields can be re-read.
    pub fn set_corridor(&self, cfg: &CorridorConfig) -> Result<(), PipelineError> {
        std::fs::write(self.root.join("corridor.json"), serde_json::to_vec_pretty(cfg)?)?;
        Ok(())
    }
}

/// Writes `record.json`, `selection.json` and the predicted fields.
pub fn write_record_dir(rec: &RunRecord, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("selection.json"), selection_json(rec)?)?;
    if !rec.predicted_fields.is_empty() {
        let fdir = dir.join("speedfields");
        std::fs::create_dir_all(&fdir)?;
        for (id, f) in &rec.predicted_fields {
            f.write_csv(&fdir.join(format!("{id}.csv"))).map_err(|e| PipelineError::Other(e.to_string()))?;
        }
    }
    // record.json last and atomically: its presence marks a complete run dir
    let tmp = dir.join("record.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(rec)?)?;
    std::fs::rename(tmp, dir.join("record.json"))?;
    Ok(())
}

pub fn selection_json(rec: &RunRecord) -> Result<String, PipelineError> {
    Ok(serde_json::to_string_pretty(&rec.selection_report())?)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    use rand::Rng;
    if xs.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Some((at(alpha), at(1.0 - alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_grid() {
        let m = replay_minutes(30, 60, 5);
        assert_eq!(m.len(), 12);
        assert_eq!(m[0], 35);
        assert_eq!(m[11], 90);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let c = PipelineConfig { objective_window_min: [20.0, 40.0], ..Default::default() };
        assert!(c.validate().is_err());
        let c = PipelineConfig { seeds: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = PipelineConfig { cadence_min: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let j = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, PipelineConfig::default());
        let partial: PipelineConfig = serde_json::from_str(r#"{"catalog":"combined","seeds":2}"#).unwrap();
        assert_eq!(partial.catalog, CatalogMode::Combined);
        assert_eq!(partial.horizon_min, 30);
    }

    #[test]
    fn delta_t_tags() {
        let field = MeanSpeedField::from_fn(60, 16, |m, s| Some(if s == 3 && (16..40).contains(&m) { 30.0 } else { 80.0 }));
        let mk = |now| RunRecord {
            run_id: format!("m{now}"),
            issued_at: String::new(),
            now_minute: now,
            inputs_digest: String::new(),
            status: RunStatus::Complete,
            failure: None,
            catalog: CatalogMode::VslOnly,
            fd_q_max: None,
            assimilation: None,
            baseline_inflow: vec![],
            inflow_fallback: false,
            scenarios: vec![],
            selections: vec![],
            congestion_onset_minute: None,
            delta_t_min: None,
            timing: Timing::default(),
            predicted_fields: BTreeMap::new(),
        };
        let mut recs = vec![mk(15), mk(30), mk(45)];
        assert_eq!(tag_delta_t(&mut recs, &field), Some(30));
        let tags: Vec<_> = recs.iter().map(|r| r.delta_t_min).collect();
        assert_eq!(tags, vec![Some(-15), Some(0), Some(15)]);
        let calm = MeanSpeedField::from_fn(60, 16, |_, _| Some(80.0));
        tag_delta_t(&mut recs, &calm);
        assert!(recs.iter().all(|r| r.delta_t_min.is_none()));
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let xs: Vec<f64> = (0..20).map(|i| 1.0 + (i % 5) as f64 * 0.1).collect();
        let (lo, hi) = bootstrap_mean_ci(&xs, 2000, 0.95, 1).unwrap();
        assert!(lo > 1.0 && hi < 1.4 && lo < hi);
    }
}
