//! Browser bindings for the demo page in `www/`:
//!
//! - `pareto_explore`: front flags and the d(w, p) selection for a point set
//! - `inflow_curve`: a baseline inflow and its controlled version for (a, b)
//! - `simulate`: a short corridor run returned as a speed heatmap
//!
//! All functions take and return JSON strings.

use atdm_core::corridor::CorridorConfig;
use atdm_core::objectives::{edie_mean_speed, edie_throughput, Region};
use atdm_core::pareto::{distance, pareto_front, select_optimal, Candidate, Norm, Orientation};
use atdm_core::scenarios::{vsl_catalog, InflowScenario, VslId};
use atdm_core::sim::{run, BehaviorParams, MicroState, RecordOptions, Road, SimRun, DEFAULT_LANE_CHANGE_PROB};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

#[derive(Debug, Deserialize)]
struct PointIn {
    id: String,
    point: (f64, f64),
}

pub fn pareto_explore_json(points_json: &str, w: f64, p: &str) -> Result<String, String> {
    let pts: Vec<PointIn> = serde_json::from_str(points_json).map_err(|e| e.to_string())?;
    let o = Orientation::new(w, Norm::parse(p).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let cands: Vec<Candidate> = pts.into_iter().map(|p| Candidate { id: p.id, point: p.point }).collect();
    let flags = pareto_front(&cands.iter().map(|c| c.point).collect::<Vec<_>>());
    let dists: Vec<f64> = cands.iter().map(|c| distance(c.point, &o)).collect();
    let sel = select_optimal(&cands, &o).map_err(|e| e.to_string())?;
    Ok(json!({ "front": flags, "distances": dists, "selection": sel }).to_string())
}

/// `points_json`: `[{"id": .., "point": [q, v]}, ..]` with scaled objectives.
#[wasm_bindgen]
pub fn pareto_explore(points_json: &str, w: f64, p: &str) -> Result<String, JsValue> {
    pareto_explore_json(points_json, w, p).map_err(js_err)
}

pub fn inflow_curve_json(base: f64, slope: f64, a: f64, b: f64, horizon_min: usize) -> Result<String, String> {
    if !(base.is_finite() && slope.is_finite() && a.is_finite() && b.is_finite()) || horizon_min == 0 || horizon_min > 240 {
        return Err("inputs must be finite and the horizon in 1..=240".into());
    }
    let baseline: Vec<f64> = (0..horizon_min).map(|t| (base + slope * t as f64).max(0.0)).collect();
    let controlled = InflowScenario { a, b }.apply(&baseline);
    let removed: f64 = baseline.iter().zip(&controlled).map(|(x, y)| x - y).sum();
    Ok(json!({ "baseline": baseline, "controlled": controlled, "vehicles_held": removed }).to_string())
}

/// Linear baseline `base + slope t`, controlled by `Q = max(0, base + a t + b t^2)`.
#[wasm_bindgen]
pub fn inflow_curve(base: f64, slope: f64, a: f64, b: f64, horizon_min: usize) -> Result<String, JsValue> {
    inflow_curve_json(base, slope, a, b, horizon_min).map_err(js_err)
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct SimRequest {
    p_keep: f64,
    q_anticipate: f64,
    r_slow: f64,
    demand: f64,
    minutes: usize,
    vsl: String,
    seed: u64,
}

impl Default for SimRequest {
    fn default() -> Self {
        Self { p_keep: 0.9, q_anticipate: 0.8, r_slow: 0.2, demand: 32.0, minutes: 30, vsl: "NoControl".into(), seed: 1 }
    }
}

#[derive(Serialize)]
struct SimResponse {
    n_minutes: usize,
    n_segments: usize,
    speeds_kmh: Vec<Option<f64>>,
    throughput: f64,
    mean_speed: Option<f64>,
    vehicles_entered: u64,
}

pub fn simulate_json(request_json: &str) -> Result<String, String> {
    let req: SimRequest = serde_json::from_str(request_json).map_err(|e| e.to_string())?;
    let params = BehaviorParams { p_keep: req.p_keep, q_anticipate: req.q_anticipate, r_slow: req.r_slow, depth: 2 };
    if !params.is_valid() {
        return Err("probabilities must lie in [0, 1]".into());
    }
    if req.minutes == 0 || req.minutes > 60 || !(0.0..=60.0).contains(&req.demand) {
        return Err("minutes in 1..=60 and demand in 0..=60 veh/min".into());
    }
    let cfg = CorridorConfig::default();
    let vsl = VslId::ALL.into_iter().find(|v| v.as_str() == req.vsl).ok_or_else(|| format!("unknown VSL {:?}", req.vsl))?;
    let profile = vsl_catalog(&cfg).map_err(|e| e.to_string())?.into_iter().find(|p| p.id == vsl).expect("catalog has every id");
    let road = Road::corridor(&cfg, profile.zone_limits()).map_err(|e| e.to_string())?;
    let steps = cfg.steps_for_minutes(req.minutes as f64);
    let sim = SimRun {
        seed: req.seed,
        params,
        horizon_steps: steps,
        demand: vec![req.demand],
        initial: MicroState::empty(cfg.n_lanes),
        lane_change_prob: DEFAULT_LANE_CHANGE_PROB,
        record: RecordOptions {
            field_minutes: Some(req.minutes),
            regions: vec![Region::new((0, cfg.n_cells()), (0, steps), (0..cfg.n_lanes).collect())],
            ..Default::default()
        },
    };
    let out = run(&sim, &road, &cfg);
    let field = out.field.expect("field requested");
    let tally = &out.tallies[0];
    let resp = SimResponse {
        n_minutes: field.n_minutes,
        n_segments: field.n_segments,
        speeds_kmh: field.values,
        throughput: edie_throughput(tally, &cfg).map_err(|e| e.to_string())?,
        mean_speed: edie_mean_speed(tally, &cfg).ok(),
        vehicles_entered: out.entered,
    };
    serde_json::to_string(&resp).map_err(|e| e.to_string())
}

/// Empty corridor fed at a constant demand; see `SimRequest` for fields.
#[wasm_bindgen]
pub fn simulate(request_json: &str) -> Result<String, JsValue> {
    simulate_json(request_json).map_err(js_err)
}
