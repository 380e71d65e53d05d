//! Control scenarios: VSL lane-limit profiles, inflow prediction and the
//! quadratic inflow-reduction grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{kmh_to_cells, CorridorConfig, CorridorError};

/// Minutes of recent history needed for the short-term trend.
pub const SHORT_TERM_MINUTES: usize = 30;
/// Samples (1-minute) needed before the ARIMA component is attempted.
pub const LONG_TERM_MINUTES: usize = 14 * 24 * 60;

pub const A_STEPS: usize = 13;
pub const B_STEPS: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("need at least {need} minutes of recent inflow history, got {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("scenario {0} needs a baseline inflow series")]
    MissingBaseline(String),
    #[error(transparent)]
    Corridor(#[from] CorridorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VslId {
    NoControl,
    PlVsl,
    AlsVsl,
    AlsVsl2,
}

impl VslId {
    pub const ALL: [VslId; 4] = [VslId::NoControl, VslId::PlVsl, VslId::AlsVsl, VslId::AlsVsl2];

    pub fn as_str(self) -> &'static str {
        match self {
            VslId::NoControl => "NoControl",
            VslId::PlVsl => "PlVsl",
            VslId::AlsVsl => "AlsVsl",
            VslId::AlsVsl2 => "AlsVsl2",
        }
    }
}

impl std::fmt::Display for VslId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-lane limits inside the VSL zone, slow lane first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VslProfile {
    pub id: VslId,
    pub limits_kmh: Vec<f64>,
}

impl VslProfile {
    /// `None` for the uncontrolled profile, which leaves base limits alone.
    pub fn zone_limits(&self) -> Option<&[f64]> {
        match self.id {
            VslId::NoControl => None,
            _ => Some(&self.limits_kmh),
        }
    }
}

/// The four profiles. Two-lane values; extra lanes take the passing-lane value.
pub fn vsl_catalog(cfg: &CorridorConfig) -> Result<Vec<VslProfile>, ScenarioError> {
    let table = [
        (VslId::NoControl, [80.0, 100.0]),
        (VslId::PlVsl, [80.0, 80.0]),
        (VslId::AlsVsl, [60.0, 80.0]),
        (VslId::AlsVsl2, [60.0, 60.0]),
    ];
    let mut out = Vec::with_capacity(4);
    for (id, pair) in table {
        let limits_kmh: Vec<f64> = (0..cfg.n_lanes)
            .map(|l| if l == 0 { pair[0] } else { pair[1] })
            .collect();
        for &v in &limits_kmh {
            kmh_to_cells(v, cfg)?;
        }
        out.push(VslProfile { id, limits_kmh });
    }
    Ok(out)
}

/// ARIMA(1,1,1) coefficients from conditional least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArimaFit {
    pub phi: f64,
    pub theta: f64,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowPrediction {
    /// veh/min for minutes `0..horizon` from now.
    pub baseline: Vec<f64>,
    pub short_term: Vec<f64>,
    pub long_term: Option<Vec<f64>>,
    pub arima: Option<ArimaFit>,
    /// Set when only the short-term trend was used.
    pub fallback: bool,
}

/// Least-squares line through the last 30 minutes, extrapolated so that
/// `t = 0` is the most recent minute.
pub fn short_term_trend(recent: &[f64], horizon_min: usize) -> Result<Vec<f64>, ScenarioError> {
    if recent.len() < SHORT_TERM_MINUTES {
        return Err(ScenarioError::InsufficientHistory { need: SHORT_TERM_MINUTES, got: recent.len() });
    }
    let ys = &recent[recent.len() - SHORT_TERM_MINUTES..];
    let n = ys.len() as f64;
    let xs = (0..ys.len()).map(|i| i as f64 - (ys.len() - 1) as f64);
    let mx = xs.clone().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, &y) in xs.zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    let at0 = my - slope * mx;
    Ok((0..horizon_min).map(|t| at0 + slope * t as f64).collect())
}

fn arima_sse(d: &[f64], phi: f64, theta: f64) -> f64 {
    let mut e_prev = 0.0;
    let mut sse = 0.0;
    for t in 1..d.len() {
        let e = d[t] - phi * d[t - 1] - theta * e_prev;
        sse += e * e;
        e_prev = e;
    }
    sse
}

/// Conditional least squares over the invertible, stationary square,
/// coarse grid followed by two refinement passes.
pub fn fit_arima_111(series: &[f64]) -> Option<ArimaFit> {
    if series.len() < 4 || series.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let d: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let mut best = (0.0, 0.0, arima_sse(&d, 0.0, 0.0));
    let mut step = 0.1;
    let mut centre = (0.0, 0.0);
    for _ in 0..3 {
        for i in -9..=9 {
            for j in -9..=9 {
                let phi = (centre.0 + i as f64 * step).clamp(-0.99, 0.99);
                let theta = (centre.1 + j as f64 * step).clamp(-0.99, 0.99);
                let sse = arima_sse(&d, phi, theta);
                if sse < best.2 {
                    best = (phi, theta, sse);
                }
            }
        }
        centre = (best.0, best.1);
        step /= 10.0;
    }
    best.2.is_finite().then_some(ArimaFit { phi: best.0, theta: best.1, sse: best.2 })
}

/// Forecast levels for `t = 0..horizon`, `t = 0` being the last observation.
pub fn arima_forecast(series: &[f64], fit: ArimaFit, horizon_min: usize) -> Vec<f64> {
    let d: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let mut e_prev = 0.0;
    for t in 1..d.len() {
        e_prev = d[t] - fit.phi * d[t - 1] - fit.theta * e_prev;
    }
    let mut level = *series.last().unwrap_or(&0.0);
    let mut d_prev = d.last().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(horizon_min);
    for h in 0..horizon_min {
        if h > 0 {
            let dn = fit.phi * d_prev + if h == 1 { fit.theta * e_prev } else { 0.0 };
            level += dn;
            d_prev = dn;
        }
        out.push(level);
    }
    out
}

/// Average of short- and long-term predictions, floored at zero. Falls back
/// to the short-term trend when the long series is missing, short or unfit.
pub fn predict_inflow(recent: &[f64], long_term: Option<&[f64]>, horizon_min: usize) -> Result<InflowPrediction, ScenarioError> {
    let short = short_term_trend(recent, horizon_min)?;
    let fit = long_term.filter(|s| s.len() >= LONG_TERM_MINUTES).and_then(|s| fit_arima_111(s).map(|f| (s, f)));
    let (long, arima) = match fit {
        Some((s, f)) => {
            let fc = arima_forecast(s, f, horizon_min);
            if fc.iter().all(|v| v.is_finite()) {
                (Some(fc), Some(f))
            } else {
                (None, None)
            }
        }
        None => (None, None),
    };
    let baseline = match &long {
        Some(l) => short.iter().zip(l).map(|(a, b)| ((a + b) / 2.0).max(0.0)).collect(),
        None => short.iter().map(|a| a.max(0.0)).collect(),
    };
    Ok(InflowPrediction { fallback: long.is_none(), baseline, short_term: short, long_term: long, arima })
}

/// One point of the inflow-control grid: `Q(t) = max(0, base(t) + a t + b t^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InflowScenario {
    /// veh/min^2
    pub a: f64,
    /// veh/min^3
    pub b: f64,
}

impl InflowScenario {
    pub fn at(&self, base: f64, t: f64) -> f64 {
        (base + self.a * t + self.b * t * t).max(0.0)
    }

    pub fn apply(&self, baseline: &[f64]) -> Vec<f64> {
        baseline.iter().enumerate().map(|(t, &q)| self.at(q, t as f64)).collect()
    }
}

/// Grid coefficient `i` of `a` (0..13) and `j` of `b` (0..7).
pub fn grid_coefficients(i: usize, j: usize) -> InflowScenario {
    InflowScenario { a: -(i as f64) / 40.0, b: -(j as f64) / 200.0 }
}

/// All 91 combinations, `a` major.
pub fn inflow_grid() -> Vec<InflowScenario> {
    let mut out = Vec::with_capacity(A_STEPS * B_STEPS);
    for i in 0..A_STEPS {
        for j in 0..B_STEPS {
            out.push(grid_coefficients(i, j));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlScenario {
    pub id: String,
    pub vsl: VslProfile,
    /// `None` runs the predicted demand unchanged.
    pub inflow: Option<InflowScenario>,
}

impl ControlScenario {
    pub fn demand(&self, baseline: &[f64]) -> Vec<f64> {
        match &self.inflow {
            Some(s) => s.apply(baseline),
            None => baseline.to_vec(),
        }
    }
}

pub fn scenario_id(vsl: VslId, inflow: Option<&InflowScenario>) -> String {
    match inflow {
        None => vsl.to_string(),
        Some(s) => format!("{vsl}_a{:.3}_b{:.3}", s.a + 0.0, s.b + 0.0),
    }
}

/// The 4 VSL anchors, followed in combined mode by every VSL x inflow pair.
pub fn build_catalog(cfg: &CorridorConfig, vsl_only: bool) -> Result<Vec<ControlScenario>, ScenarioError> {
    let profiles = vsl_catalog(cfg)?;
    let mut out: Vec<ControlScenario> = profiles
        .iter()
        .map(|p| ControlScenario { id: scenario_id(p.id, None), vsl: p.clone(), inflow: None })
        .collect();
    if !vsl_only {
        let grid = inflow_grid();
        for p in &profiles {
            for g in &grid {
                out.push(ControlScenario { id: scenario_id(p.id, Some(g)), vsl: p.clone(), inflow: Some(*g) });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub vsl: VslId,
    pub limits_kmh: Vec<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub inflow: Vec<f64>,
}

pub fn catalog_entries(catalog: &[ControlScenario], baseline: &[f64]) -> Vec<CatalogEntry> {
    catalog
        .iter()
        .map(|s| CatalogEntry {
            id: s.id.clone(),
            vsl: s.vsl.id,
            limits_kmh: s.vsl.limits_kmh.clone(),
            a: s.inflow.map(|g| g.a),
            b: s.inflow.map(|g| g.b),
            inflow: s.demand(baseline),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn vsl_profiles() {
        let cfg = CorridorConfig::default();
        let cat = vsl_catalog(&cfg).unwrap();
        assert_eq!(cat.len(), 4);
        let lim: Vec<_> = cat.iter().map(|p| (p.limits_kmh[0], p.limits_kmh[1])).collect();
        assert_eq!(lim, vec![(80.0, 100.0), (80.0, 80.0), (60.0, 80.0), (60.0, 60.0)]);
        assert_eq!(cat[0].zone_limits(), None);
        assert_eq!(cat[2].zone_limits(), Some(&[60.0, 80.0][..]));
    }

    #[test]
    fn constant_history_is_a_fixpoint() {
        let recent = vec![40.0; 45];
        let long = vec![40.0; LONG_TERM_MINUTES];
        let p = predict_inflow(&recent, Some(&long), 30).unwrap();
        assert!(!p.fallback);
        for v in &p.baseline {
            assert!((v - 40.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn slope_plus_flat_long_term() {
        let recent: Vec<f64> = (0..30).map(|i| 40.0 + (i as f64 - 29.0)).collect();
        let long = vec![40.0; LONG_TERM_MINUTES];
        let p = predict_inflow(&recent, Some(&long), 30).unwrap();
        for (t, v) in p.baseline.iter().enumerate() {
            assert!((v - (40.0 + t as f64 / 2.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn short_history_is_rejected() {
        assert_eq!(
            predict_inflow(&[30.0; 10], None, 30),
            Err(ScenarioError::InsufficientHistory { need: 30, got: 10 })
        );
    }

    #[test]
    fn short_long_term_falls_back() {
        let p = predict_inflow(&[30.0; 30], Some(&[30.0; 100]), 5).unwrap();
        assert!(p.fallback);
        assert_eq!(p.baseline, vec![30.0; 5]);
    }

    #[test]
    fn baseline_is_floored() {
        let recent: Vec<f64> = (0..30).map(|i| 29.0 - i as f64).collect();
        let p = predict_inflow(&recent, None, 30).unwrap();
        assert!(p.baseline.iter().all(|&v| v >= 0.0));
        assert_eq!(p.baseline[29], 0.0);
    }

    #[test]
    fn arima_recovers_ar_coefficient() {
        // differences follow d_t = 0.6 d_{t-1} + e_t with a deterministic shock sequence
        let mut x = vec![100.0];
        let mut d = 0.0;
        let mut s: u64 = 7;
        for _ in 0..5000 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let e = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            d = 0.6 * d + e;
            x.push(x.last().unwrap() + d);
        }
        let fit = fit_arima_111(&x).unwrap();
        assert!((fit.phi - 0.6).abs() < 0.05, "{fit:?}");
        assert!(fit.theta.abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn grid_shape() {
        let g = inflow_grid();
        assert_eq!(g.len(), 91);
        let a_min = g.iter().map(|s| s.a).fold(f64::INFINITY, f64::min);
        let b_min = g.iter().map(|s| s.b).fold(f64::INFINITY, f64::min);
        assert_eq!(a_min, -0.3);
        assert_eq!(b_min, -0.03);
        assert_eq!(g[0], InflowScenario { a: 0.0, b: 0.0 });
    }

    #[test]
    fn spot_value() {
        let s = InflowScenario { a: -0.15, b: -0.005 };
        assert_eq!(s.at(40.0, 10.0), 38.0);
        assert_eq!(grid_coefficients(6, 1), s);
        // the boundary pair would go negative on a 35 veh/min baseline
        let edge = grid_coefficients(12, 6);
        assert_eq!(edge.at(35.0, 30.0), 0.0);
    }

    #[test]
    fn catalogs() {
        let cfg = CorridorConfig::default();
        assert_eq!(build_catalog(&cfg, true).unwrap().len(), 4);
        let full = build_catalog(&cfg, false).unwrap();
        assert_eq!(full.len(), 368);
        let ids: HashSet<_> = full.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids.len(), 368);
        assert!(ids.contains("AlsVsl_a-0.150_b-0.005"));
        assert!(ids.contains("NoControl_a0.000_b0.000"));
        let base = vec![35.0; 30];
        for e in catalog_entries(&full, &base) {
            assert_eq!(e.inflow.len(), 30);
            assert!(e.inflow.iter().zip(&base).all(|(q, b)| *q >= 0.0 && q <= b));
        }
    }
}
