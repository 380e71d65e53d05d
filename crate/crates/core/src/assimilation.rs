//! Particle filter over behaviour parameters, and microstate reconstruction
//! from a row of mean speeds plus a fundamental diagram.
//!
//! All particles in a window start from the same reconstructed state and
//! share the simulation seed, so weights differ only through parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corridor::{kmh_to_nearest_cells, CorridorConfig};
use crate::fundamental_diagram::FundamentalDiagram;
use crate::rng::combine_seed;
pub use crate::sim::BehaviorParams;
use crate::sim::{run, MicroState, RecordOptions, Road, SimRun, Vehicle, INF_GAP};
use crate::speed_field::MeanSpeedField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssimilationError {
    #[error("bad prior: {0}")]
    BadRange(String),
    #[error("fields have different shapes")]
    Shape,
    #[error("no patch is present in both fields")]
    NoOverlap,
    #[error("sigma must be positive")]
    BadSigma,
    #[error("all particle likelihoods underflowed in window starting at minute {0}")]
    Collapse(usize),
    #[error("segment {segment} needs {need} vehicles in lane {lane}, more than fit")]
    OverCapacity { segment: usize, lane: usize, need: usize },
    #[error("no speed observed at minute {0}")]
    NoObservation(usize),
    #[error("observation too short: need minutes up to {need}, have {have}")]
    TooShort { need: usize, have: usize },
}

/// Uniform prior box. `depth` is not filtered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorRanges {
    pub p_keep: [f64; 2],
    pub q_anticipate: [f64; 2],
    pub r_slow: [f64; 2],
    pub depth: u32,
}

impl Default for PriorRanges {
    fn default() -> Self {
        Self { p_keep: [0.5, 1.0], q_anticipate: [0.0, 1.0], r_slow: [0.0, 1.0], depth: 2 }
    }
}

impl PriorRanges {
    fn dims(&self) -> [[f64; 2]; 3] {
        [self.p_keep, self.q_anticipate, self.r_slow]
    }

    pub fn validate(&self) -> Result<(), AssimilationError> {
        for (name, [lo, hi]) in ["p_keep", "q_anticipate", "r_slow"].into_iter().zip(self.dims()) {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(AssimilationError::BadRange(format!("{name} [{lo}, {hi}]")));
            }
        }
        if self.depth < 1 {
            return Err(AssimilationError::BadRange("depth must be >= 1".into()));
        }
        Ok(())
    }

    fn params(&self, x: [f64; 3]) -> BehaviorParams {
        BehaviorParams { p_keep: x[0], q_anticipate: x[1], r_slow: x[2], depth: self.depth }
    }
}

fn coords(p: &BehaviorParams) -> [f64; 3] {
    [p.p_keep, p.q_anticipate, p.r_slow]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub params: BehaviorParams,
    pub weight: f64,
    #[serde(skip)]
    pub last_sim_field: Option<MeanSpeedField>,
}

pub fn sample_prior<R: Rng>(n: usize, ranges: &PriorRanges, rng: &mut R) -> Result<Vec<Particle>, AssimilationError> {
    if n < 2 {
        return Err(AssimilationError::BadRange(format!("ensemble of {n}")));
    }
    ranges.validate()?;
    let w = 1.0 / n as f64;
    Ok((0..n)
        .map(|_| {
            let x = ranges.dims().map(|[lo, hi]| if hi > lo { rng.random_range(lo..=hi) } else { lo });
            Particle { params: ranges.params(x), weight: w, last_sim_field: None }
        })
        .collect())
}

/// `exp(-sum r^2 / (2 sigma^2 N))` over the patches present in both fields.
pub fn likelihood(observed: &MeanSpeedField, simulated: &MeanSpeedField, sigma: f64) -> Result<f64, AssimilationError> {
    if !(sigma > 0.0) {
        return Err(AssimilationError::BadSigma);
    }
    let (sq, n) = residuals(observed, simulated)?;
    Ok((-sq / (2.0 * sigma * sigma * n as f64)).exp())
}

fn residuals(a: &MeanSpeedField, b: &MeanSpeedField) -> Result<(f64, usize), AssimilationError> {
    if a.n_minutes != b.n_minutes || a.n_segments != b.n_segments {
        return Err(AssimilationError::Shape);
    }
    let mut sq = 0.0;
    let mut n = 0;
    for (x, y) in a.values.iter().zip(&b.values) {
        if let (Some(x), Some(y)) = (x, y) {
            sq += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(AssimilationError::NoOverlap);
    }
    Ok((sq, n))
}

/// Mean absolute percentage error of `simulated` against `observed`.
pub fn mean_percentage_error(observed: &MeanSpeedField, simulated: &MeanSpeedField) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0;
    for (o, x) in observed.values.iter().zip(&simulated.values) {
        if let (Some(o), Some(x)) = (o, x) {
            if *o > 0.0 {
                s += (x - o).abs() / o;
                n += 1;
            }
        }
    }
    (n > 0).then(|| 100.0 * s / n as f64)
}

pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    1.0 / particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
}

/// Maximum-weight particle; lowest index on ties.
pub fn estimate_map(particles: &[Particle]) -> BehaviorParams {
    let mut best = 0;
    for (i, p) in particles.iter().enumerate() {
        if p.weight > particles[best].weight {
            best = i;
        }
    }
    particles[best].params
}

/// Systematic resampling followed by clamped Gaussian jitter.
pub fn resample<R: Rng>(particles: &[Particle], ranges: &PriorRanges, jitter_frac: f64, rng: &mut R) -> Vec<Particle> {
    let n = particles.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = particles[0].weight;
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += particles[i].weight;
        }
        let mut x = coords(&particles[i].params);
        for (xd, [lo, hi]) in x.iter_mut().zip(ranges.dims()) {
            let sd = jitter_frac * (hi - lo);
            if sd > 0.0 {
                let d = Normal::new(0.0, sd).expect("positive sd");
                *xd = (*xd + d.sample(rng)).clamp(lo, hi);
            }
        }
        out.push(Particle { params: ranges.params(x), weight: 1.0 / n as f64, last_sim_field: None });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    pub n_particles: usize,
    /// km/h.
    pub sigma: f64,
    pub window_min: usize,
    pub n_windows: usize,
    /// Resample when ESS falls below this fraction of the ensemble.
    pub resample_below: f64,
    /// Jitter std as a fraction of each prior range.
    pub jitter_frac: f64,
    pub lane_change_prob: f64,
    pub prior: PriorRanges,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            n_particles: 256,
            sigma: 10.0,
            window_min: 5,
            n_windows: 6,
            resample_below: 0.5,
            jitter_frac: 0.02,
            lane_change_prob: crate::sim::DEFAULT_LANE_CHANGE_PROB,
            prior: PriorRanges::default(),
        }
    }
}

/// Everything one window needs besides the particles.
pub struct WindowInput<'a> {
    pub observed: &'a MeanSpeedField,
    pub initial: &'a MicroState,
    /// veh/min at the upstream end, one per window minute.
    pub demand: &'a [f64],
    pub road: &'a Road,
    pub cfg: &'a CorridorConfig,
    pub seed: u64,
    /// Window start, for error reporting.
    pub start_minute: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub start_minute: usize,
    pub resampled: bool,
    pub ess: f64,
    pub map_params: BehaviorParams,
    pub mpe: Option<f64>,
}

fn simulate(params: BehaviorParams, input: &WindowInput<'_>, settings: &FilterSettings) -> MeanSpeedField {
    let sim = SimRun {
        seed: input.seed,
        params,
        horizon_steps: input.cfg.steps_for_minutes(input.observed.n_minutes as f64),
        demand: input.demand.to_vec(),
        initial: input.initial.clone(),
        lane_change_prob: settings.lane_change_prob,
        record: RecordOptions { field_minutes: Some(input.observed.n_minutes), ..Default::default() },
    };
    run(&sim, input.road, input.cfg).field.expect("field requested")
}

/// One assimilation window. Resampling, when the previous update left the
/// ensemble degenerate, happens first so the returned weights are the
/// posterior of this window.
pub fn filter_step<R: Rng>(
    particles: &mut Vec<Particle>,
    input: &WindowInput<'_>,
    settings: &FilterSettings,
    rng: &mut R,
) -> Result<WindowReport, AssimilationError> {
    let n = particles.len();
    let resampled = effective_sample_size(particles) < settings.resample_below * n as f64;
    if resampled {
        *particles = resample(particles, &settings.prior, settings.jitter_frac, rng);
    }
    let sims: Vec<MeanSpeedField> = {
        #[cfg(feature = "parallel")]
        let it = particles.par_iter();
        #[cfg(not(feature = "parallel"))]
        let it = particles.iter();
        it.map(|p| simulate(p.params, input, settings)).collect()
    };
    let mut logs = Vec::with_capacity(n);
    for (p, f) in particles.iter().zip(&sims) {
        let l = likelihood(input.observed, f, settings.sigma)?;
        logs.push(p.weight * l);
    }
    let total: f64 = logs.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(AssimilationError::Collapse(input.start_minute));
    }
    for ((p, w), f) in particles.iter_mut().zip(logs).zip(sims) {
        p.weight = w / total;
        p.last_sim_field = Some(f);
    }
    let best = (0..n).fold(0, |b, i| if particles[i].weight > particles[b].weight { i } else { b });
    let mpe = particles[best].last_sim_field.as_ref().and_then(|f| mean_percentage_error(input.observed, f));
    Ok(WindowReport {
        start_minute: input.start_minute,
        resampled,
        ess: effective_sample_size(particles),
        map_params: particles[best].params,
        mpe,
    })
}

/// Splits `total` over `shares` by largest remainder; ties go to the lower index.
pub fn largest_remainder(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

/// Places vehicles per segment at the density the diagram assigns to the
/// segment speed. Missing segments take the nearest present value.
pub fn reconstruct_microstate(
    latest_speeds: &[Option<f64>],
    fd: &FundamentalDiagram,
    cfg: &CorridorConfig,
    road: &Road,
    usage_split: Option<&[f64]>,
    time: u64,
) -> Result<MicroState, AssimilationError> {
    let n_lanes = cfg.n_lanes;
    let even = vec![1.0; n_lanes];
    let split = usage_split.unwrap_or(&even);
    if split.len() != n_lanes || split.iter().any(|s| !(*s >= 0.0)) || split.iter().sum::<f64>() <= 0.0 {
        return Err(AssimilationError::BadRange("usage split".into()));
    }
    let field = MeanSpeedField::from_fn(1, latest_speeds.len(), |_, s| latest_speeds[s]);
    let speeds = field.filled_row(0).ok_or(AssimilationError::NoObservation(0))?;
    let cps = cfg.cells_per_segment();
    let seg_km = cfg.segment_length_m / 1000.0;
    // desired cells per lane, each with its speed
    let mut wanted: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); n_lanes];
    for (s, &v) in speeds.iter().enumerate() {
        let k = fd.lane_density_from_speed(v);
        let count = (k * seg_km * n_lanes as f64).round_ties_even().max(0.0) as usize;
        let s0 = s * cps;
        let cells = cps.min(cfg.n_cells().saturating_sub(s0));
        for (lane, m) in largest_remainder(count, split).into_iter().enumerate() {
            if m > cfg.n_cells() {
                return Err(AssimilationError::OverCapacity { segment: s, lane, need: m });
            }
            for j in 0..m {
                wanted[lane].push((s0 + (2 * j + 1) * cells / (2 * m), v, s));
            }
        }
    }
    let mut state = MicroState::empty(n_lanes);
    state.time = time;
    let mut next_id = 0u64;
    for (lane, mut w) in wanted.into_iter().enumerate() {
        w.sort_by(|a, b| b.0.cmp(&a.0));
        let mut placed: Vec<Vehicle> = Vec::with_capacity(w.len());
        let mut prev: Option<usize> = None;
        for (cell, v, seg) in w {
            // shift upstream past the vehicle placed just downstream
            let c = match prev {
                None => cell,
                Some(0) => return Err(AssimilationError::OverCapacity { segment: seg, lane, need: 1 }),
                Some(p) => cell.min(p - 1),
            };
            let speed = kmh_to_nearest_cells(v, cfg).min(road.limit(lane, c));
            placed.push(Vehicle { id: 0, cell: c, speed, last_gap: INF_GAP });
            prev = Some(c);
        }
        placed.reverse();
        for i in 0..placed.len() {
            placed[i].last_gap = placed.get(i + 1).map_or(INF_GAP, |l| (l.cell - placed[i].cell - 1) as u32);
        }
        for v in &mut placed {
            v.id = next_id;
            next_id += 1;
        }
        state.lanes[lane] = placed;
    }
    Ok(state)
}

/// Weighted histogram of one parameter over its prior range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub weights: Vec<f64>,
}

impl Histogram {
    pub fn build(values: impl Iterator<Item = (f64, f64)>, lo: f64, hi: f64, bins: usize) -> Self {
        let mut weights = vec![0.0; bins];
        for (x, w) in values {
            let i = if hi > lo { (((x - lo) / (hi - lo)) * bins as f64).floor() as isize } else { 0 };
            weights[i.clamp(0, bins as isize - 1) as usize] += w;
        }
        Self { lo, hi, weights }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub p_keep: Histogram,
    pub q_anticipate: Histogram,
    pub r_slow: Histogram,
    /// Weighted means, same order.
    pub mean: [f64; 3],
}

pub fn posterior(particles: &[Particle], ranges: &PriorRanges, bins: usize) -> Posterior {
    let dims = ranges.dims();
    let h = |d: usize| {
        Histogram::build(particles.iter().map(|p| (coords(&p.params)[d], p.weight)), dims[d][0], dims[d][1], bins)
    };
    let mut mean = [0.0; 3];
    for p in particles {
        for (m, x) in mean.iter_mut().zip(coords(&p.params)) {
            *m += p.weight * x;
        }
    }
    Posterior { p_keep: h(0), q_anticipate: h(1), r_slow: h(2), mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationResult {
    pub map_params: BehaviorParams,
    pub posterior: Posterior,
    /// Reconstructed from the latest observed minute.
    pub initial_state: MicroState,
    pub windows: Vec<WindowReport>,
}

impl AssimilationResult {
    pub fn ess_series(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.ess).collect()
    }
}

/// Observation-side inputs of a full assimilation.
pub struct Observations<'a> {
    pub field: &'a MeanSpeedField,
    /// Upstream inflow, veh/min, aligned with the field's minutes.
    pub inflow: &'a [f64],
    pub fd: &'a FundamentalDiagram,
    /// Minutes `[0, now)` are usable.
    pub now: usize,
}

/// Runs `n_windows` consecutive windows ending at `obs.now`, then
/// reconstructs the state at `now`.
pub fn assimilate<R: Rng>(
    obs: &Observations<'_>,
    cfg: &CorridorConfig,
    road: &Road,
    settings: &FilterSettings,
    seed: u64,
    rng: &mut R,
) -> Result<AssimilationResult, AssimilationError> {
    let span = settings.n_windows * settings.window_min;
    if obs.now > obs.field.n_minutes || obs.now < span + 1 {
        return Err(AssimilationError::TooShort { need: span + 1, have: obs.now.min(obs.field.n_minutes) });
    }
    let mut particles = sample_prior(settings.n_particles, &settings.prior, rng)?;
    let mut windows = Vec::with_capacity(settings.n_windows);
    for w in 0..settings.n_windows {
        let start = obs.now - span + w * settings.window_min;
        let end = start + settings.window_min;
        let initial = state_at(obs, cfg, road, start)?;
        let observed = obs.field.window(start, end);
        let demand = inflow_slice(obs.inflow, start, end);
        let input = WindowInput {
            observed: &observed,
            initial: &initial,
            demand: &demand,
            road,
            cfg,
            seed: combine_seed(&[seed, start as u64]),
            start_minute: start,
        };
        windows.push(filter_step(&mut particles, &input, settings, rng)?);
    }
    Ok(AssimilationResult {
        map_params: estimate_map(&particles),
        posterior: posterior(&particles, &settings.prior, 10),
        initial_state: state_at(obs, cfg, road, obs.now)?,
        windows,
    })
}

/// State at the start of `minute`, from the speeds of the minute before.
pub fn state_at(obs: &Observations<'_>, cfg: &CorridorConfig, road: &Road, minute: usize) -> Result<MicroState, AssimilationError> {
    let m = minute.saturating_sub(1);
    reconstruct_microstate(obs.field.row(m), obs.fd, cfg, road, None, cfg.steps_for_minutes(minute as f64))
        .map_err(|e| match e {
            AssimilationError::NoObservation(_) => AssimilationError::NoObservation(m),
            e => e,
        })
}

fn inflow_slice(inflow: &[f64], start: usize, end: usize) -> Vec<f64> {
    let last = inflow.last().copied().unwrap_or(0.0);
    (start..end).map(|m| inflow.get(m).copied().unwrap_or(last)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Boundary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(vals: &[Option<f64>]) -> MeanSpeedField {
        MeanSpeedField::from_fn(1, vals.len(), |_, s| vals[s])
    }

    #[test]
    fn prior_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = sample_prior(256, &PriorRanges::default(), &mut rng).unwrap();
        assert_eq!(ps.len(), 256);
        assert!(ps.iter().all(|p| p.weight == 1.0 / 256.0 && p.params.is_valid()));
        assert!(matches!(sample_prior(1, &PriorRanges::default(), &mut rng), Err(AssimilationError::BadRange(_))));
        let point = PriorRanges { p_keep: [0.6, 0.6], ..Default::default() };
        let ps = sample_prior(16, &point, &mut rng).unwrap();
        assert!(ps.iter().all(|p| p.params.p_keep == 0.6));
        let bad = PriorRanges { r_slow: [0.8, 0.2], ..Default::default() };
        assert!(sample_prior(16, &bad, &mut rng).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let a = field(&[Some(50.0), Some(60.0), None]);
        assert_eq!(likelihood(&a, &a, 10.0), Ok(1.0));
        let b = field(&[Some(60.0), Some(70.0), Some(1.0)]);
        assert!((likelihood(&a, &b, 10.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(likelihood(&a, &b, 10.0), likelihood(&b, &a, 10.0));
        let c = field(&[None, None, Some(3.0)]);
        assert_eq!(likelihood(&a, &c, 10.0), Err(AssimilationError::NoOverlap));
        assert_eq!(likelihood(&a, &b, 0.0), Err(AssimilationError::BadSigma));
        assert_eq!(likelihood(&a, &field(&[Some(1.0)]), 1.0), Err(AssimilationError::Shape));
    }

    #[test]
    fn likelihood_decreases_in_residual() {
        let a = field(&[Some(50.0), Some(60.0)]);
        let mut last = 1.1;
        for d in 0..20 {
            let l = likelihood(&a, &field(&[Some(50.0 + d as f64), Some(60.0)]), 5.0).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    fn ps(ws: &[f64]) -> Vec<Particle> {
        ws.iter()
            .enumerate()
            .map(|(i, &w)| Particle { params: BehaviorParams { p_keep: i as f64 / 10.0, ..Default::default() }, weight: w, last_sim_field: None })
            .collect()
    }

    #[test]
    fn map_examples() {
        assert_eq!(estimate_map(&ps(&[0.1, 0.7, 0.2])).p_keep, 0.1);
        assert_eq!(estimate_map(&ps(&[0.25; 4])).p_keep, 0.0);
        assert_eq!(estimate_map(&ps(&[1.0])).p_keep, 0.0);
    }

    #[test]
    fn systematic_resampling_follows_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = resample(&ps(&[0.0, 0.75, 0.25, 0.0]), &PriorRanges::default(), 0.0, &mut rng);
        let ones = out.iter().filter(|p| p.params.p_keep == 0.1).count();
        assert_eq!(ones, 3);
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|p| p.weight == 0.25));
    }

    #[test]
    fn lane_split() {
        assert_eq!(largest_remainder(90, &[1.0, 1.0]), vec![45, 45]);
        assert_eq!(largest_remainder(7, &[1.0, 1.0]), vec![4, 3]);
        assert_eq!(largest_remainder(10, &[0.65, 0.35]), vec![7, 3]);
        assert_eq!(largest_remainder(0, &[1.0, 1.0]), vec![0, 0]);
    }

    fn greenshields() -> FundamentalDiagram {
        // v = 90 (1 - k / 180), knots every 10 veh/km
        let knots = (0..=17).map(|i| (i as f64 * 10.0, 90.0 * (1.0 - i as f64 * 10.0 / 180.0))).collect();
        FundamentalDiagram::from_knots(10.0, knots)
    }

    #[test]
    fn greenshields_segment_count() {
        let cfg = CorridorConfig::default();
        let road = Road::corridor(&cfg, None).unwrap();
        let mut speeds = vec![Some(90.0); cfg.n_segments()];
        speeds[3] = Some(45.0);
        let s = reconstruct_microstate(&speeds, &greenshields(), &cfg, &road, None, 0).unwrap();
        s.check(&road).unwrap();
        let in_seg = s.lanes.iter().flatten().filter(|v| (150..200).contains(&v.cell)).count();
        assert_eq!(in_seg, 90);
        assert_eq!(s.vehicle_count(), 90);
        assert!(s.lanes.iter().flatten().filter(|v| (150..200).contains(&v.cell)).all(|v| v.speed == 2));
    }

    #[test]
    fn saturated_segment_shifts_upstream() {
        let cfg = CorridorConfig::default();
        let road = Road::corridor(&cfg, None).unwrap();
        // 240 veh/km at 0 km/h: 120 per lane in a 50-cell segment
        let fd = FundamentalDiagram::from_knots(10.0, vec![(0.0, 90.0), (240.0, 0.0)]);
        let mut speeds = vec![Some(90.0); cfg.n_segments()];
        speeds[5] = Some(0.0);
        let s = reconstruct_microstate(&speeds, &fd, &cfg, &road, None, 0).unwrap();
        s.check(&road).unwrap();
        assert_eq!(s.vehicle_count(), 240);
        assert_eq!(s.lanes[0].first().unwrap().cell, 250 - 70);
        let speeds: Vec<_> = vec![Some(0.0)];
        let one = CorridorConfig { length_km: 0.5, vsl_zone_km: [0.0, 0.5], bottleneck_position_km: 0.4, ..cfg };
        let road = Road::corridor(&one, None).unwrap();
        assert!(matches!(
            reconstruct_microstate(&speeds, &fd, &one, &road, None, 0),
            Err(AssimilationError::OverCapacity { .. })
        ));
    }

    #[test]
    fn missing_segments_take_neighbours() {
        let cfg = CorridorConfig::default();
        let road = Road::corridor(&cfg, None).unwrap();
        let mut speeds = vec![None; cfg.n_segments()];
        speeds[0] = Some(45.0);
        let s = reconstruct_microstate(&speeds, &greenshields(), &cfg, &road, None, 0).unwrap();
        assert_eq!(s.vehicle_count(), 90 * cfg.n_segments());
        assert!(matches!(
            reconstruct_microstate(&vec![None; 16], &greenshields(), &cfg, &road, None, 0),
            Err(AssimilationError::NoObservation(_))
        ));
    }

    #[test]
    fn identical_particles_keep_uniform_weights() {
        let cfg = CorridorConfig { length_km: 2.0, vsl_zone_km: [0.0, 1.0], bottleneck_position_km: 1.5, ..Default::default() };
        let road = Road::corridor(&cfg, None).unwrap();
        let settings = FilterSettings { n_particles: 8, ..Default::default() };
        let point = PriorRanges { p_keep: [0.8, 0.8], q_anticipate: [0.5, 0.5], r_slow: [0.2, 0.2], depth: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut particles = sample_prior(8, &point, &mut rng).unwrap();
        let observed = MeanSpeedField::from_fn(5, cfg.n_segments(), |_, _| Some(70.0));
        let initial = MicroState::empty(2);
        let input = WindowInput {
            observed: &observed,
            initial: &initial,
            demand: &[20.0; 5],
            road: &road,
            cfg: &cfg,
            seed: 11,
            start_minute: 0,
        };
        let rep = filter_step(&mut particles, &input, &settings, &mut rng).unwrap();
        assert!(particles.iter().all(|p| (p.weight - 0.125).abs() < 1e-15));
        assert!((rep.ess - 8.0).abs() < 1e-9);
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_sigma_is_flat_and_tiny_sigma_collapses() {
        let cfg = CorridorConfig { length_km: 2.0, vsl_zone_km: [0.0, 1.0], bottleneck_position_km: 1.5, ..Default::default() };
        let road = Road::uniform(cfg.n_cells(), &[4, 5], Boundary::Open);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let observed = MeanSpeedField::from_fn(5, cfg.n_segments(), |_, _| Some(30.0));
        let initial = MicroState::empty(2);
        let input = WindowInput {
            observed: &observed,
            initial: &initial,
            demand: &[20.0; 5],
            road: &road,
            cfg: &cfg,
            seed: 11,
            start_minute: 0,
        };
        let flat = FilterSettings { n_particles: 6, sigma: 1e9, ..Default::default() };
        let mut particles = sample_prior(6, &flat.prior, &mut rng).unwrap();
        filter_step(&mut particles, &input, &flat, &mut rng).unwrap();
        assert!(particles.iter().all(|p| (p.weight - 1.0 / 6.0).abs() < 1e-12));
        let sharp = FilterSettings { n_particles: 6, sigma: 1e-3, ..Default::default() };
        assert_eq!(filter_step(&mut particles, &input, &sharp, &mut rng), Err(AssimilationError::Collapse(0)));
    }

    #[test]
    fn histogram_mass() {
        let ps = sample_prior(50, &PriorRanges::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let post = posterior(&ps, &PriorRanges::default(), 10);
        assert!((post.p_keep.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(post.mean[0] >= 0.5 && post.mean[0] <= 1.0);
    }
}
