//! Pareto filtering and selection by weighted generalized distance to an
//! ideal point. Both objectives are maximized.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParetoError {
    #[error("weight {0} outside [0, 1]")]
    BadWeight(f64),
    #[error("norm degree {0} below 1")]
    BadDegree(f64),
    #[error("no candidate points")]
    Empty,
    #[error("weights and point have different lengths")]
    Dimension,
}

/// Norm degree: finite `p >= 1` or the max norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Norm {
    P(f64),
    Chebyshev,
}

impl Norm {
    /// Accepts `inf`, `infinity` and `max` for the max norm.
    pub fn parse(s: &str) -> Result<Self, ParetoError> {
        let t = s.trim().to_ascii_lowercase();
        if matches!(t.as_str(), "inf" | "infinity" | "max" | "∞") {
            return Ok(Norm::Chebyshev);
        }
        let p: f64 = t.parse().map_err(|_| ParetoError::BadDegree(f64::NAN))?;
        Norm::from_f64(p)
    }

    pub fn from_f64(p: f64) -> Result<Self, ParetoError> {
        if p.is_infinite() && p > 0.0 {
            Ok(Norm::Chebyshev)
        } else if p >= 1.0 {
            Ok(Norm::P(p))
        } else {
            Err(ParetoError::BadDegree(p))
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::P(p) => write!(f, "{p}"),
            Norm::Chebyshev => f.write_str("inf"),
        }
    }
}

impl Serialize for Norm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Norm::P(p) => s.serialize_f64(*p),
            Norm::Chebyshev => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Norm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        let r = match Raw::deserialize(d)? {
            Raw::N(p) => Norm::from_f64(p),
            Raw::S(s) => Norm::parse(&s),
        };
        r.map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub w: f64,
    pub p: Norm,
    #[serde(default = "unit_ideal")]
    pub ideal: (f64, f64),
}

fn unit_ideal() -> (f64, f64) {
    (1.0, 1.0)
}

impl Orientation {
    pub fn new(w: f64, p: Norm) -> Result<Self, ParetoError> {
        if !(0.0..=1.0).contains(&w) {
            return Err(ParetoError::BadWeight(w));
        }
        if let Norm::P(x) = p {
            if !(x >= 1.0) {
                return Err(ParetoError::BadDegree(x));
            }
        }
        Ok(Self { w, p, ideal: unit_ideal() })
    }

    /// Short label such as `w0.7_p1`.
    pub fn label(&self) -> String {
        format!("w{}_p{}", self.w, self.p)
    }

    /// Throughput-oriented, speed-oriented and balanced presets.
    pub fn presets() -> Vec<Orientation> {
        vec![
            Orientation::new(0.7, Norm::P(1.0)).unwrap(),
            Orientation::new(0.3, Norm::P(1.0)).unwrap(),
            Orientation::new(0.5, Norm::P(2.0)).unwrap(),
        ]
    }
}

/// Weighted Lp norm of non-negative terms without overflow for large `p`.
fn lp(terms: &[f64], p: Norm) -> f64 {
    let m = terms.iter().copied().fold(0.0, f64::max);
    match p {
        Norm::Chebyshev => m,
        _ if m == 0.0 => 0.0,
        Norm::P(p) if p == 1.0 => terms.iter().sum(),
        Norm::P(p) => m * terms.iter().map(|t| (t / m).powf(p)).sum::<f64>().powf(1.0 / p),
    }
}

/// Two-objective distance to the orientation's ideal point.
pub fn distance(point: (f64, f64), o: &Orientation) -> f64 {
    let t = [o.w * (point.0 - o.ideal.0).abs(), (1.0 - o.w) * (point.1 - o.ideal.1).abs()];
    lp(&t, o.p)
}

/// n-objective form; weights should sum to 1.
pub fn distance_n(point: &[f64], ideal: &[f64], weights: &[f64], p: Norm) -> Result<f64, ParetoError> {
    if point.len() != ideal.len() || point.len() != weights.len() {
        return Err(ParetoError::Dimension);
    }
    let t: Vec<f64> = point.iter().zip(ideal).zip(weights).map(|((x, i), w)| w * (x - i).abs()).collect();
    Ok(lp(&t, p))
}

fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Pareto flags. Sort by first objective descending, sweep the running
/// maximum of the second. Equal points share their flag.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pb.0.total_cmp(&pa.0).then(pb.1.total_cmp(&pa.1))
    });
    let mut flags = vec![false; points.len()];
    let mut best_v = f64::NEG_INFINITY;
    let mut k = 0;
    while k < idx.len() {
        // group of identical first-objective values, already sorted by v desc
        let q = points[idx[k]].0;
        let mut end = k;
        while end < idx.len() && points[idx[end]].0 == q {
            end += 1;
        }
        let top = points[idx[k]].1;
        for &i in &idx[k..end] {
            flags[i] = points[i].1 == top && top > best_v;
        }
        best_v = best_v.max(top);
        k = end;
    }
    flags
}

/// O(n^2) reference implementation.
pub fn pareto_front_naive(points: &[(f64, f64)]) -> Vec<bool> {
    points.iter().map(|&x| !points.iter().any(|&y| dominates(y, x))).collect()
}

/// A scored candidate: id and scaled point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub point: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub w: f64,
    pub p: Norm,
    pub scenario_id: String,
    pub distance: f64,
    pub point: (f64, f64),
}

/// Smaller distance first, then higher first objective, higher second, id.
fn rank(a: &(f64, &Candidate), b: &(f64, &Candidate)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(b.1.point.0.total_cmp(&a.1.point.0))
        .then(b.1.point.1.total_cmp(&a.1.point.1))
        .then(a.1.id.cmp(&b.1.id))
}

/// Minimum-distance candidate among the Pareto points.
pub fn select_optimal(candidates: &[Candidate], o: &Orientation) -> Result<Selection, ParetoError> {
    let pts: Vec<(f64, f64)> = candidates.iter().map(|c| c.point).collect();
    let flags = pareto_front(&pts);
    select_on_front(candidates, &flags, o)
}

/// As [`select_optimal`] with precomputed flags.
pub fn select_on_front(candidates: &[Candidate], flags: &[bool], o: &Orientation) -> Result<Selection, ParetoError> {
    let best = candidates
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(c, _)| (distance(c.point, o), c))
        .min_by(rank)
        .ok_or(ParetoError::Empty)?;
    Ok(Selection { w: o.w, p: o.p, scenario_id: best.1.id.clone(), distance: best.0, point: best.1.point })
}

/// Selection for each weight on a fixed norm.
pub fn weight_sweep(candidates: &[Candidate], p: Norm, weights: &[f64]) -> Result<Vec<Selection>, ParetoError> {
    let pts: Vec<(f64, f64)> = candidates.iter().map(|c| c.point).collect();
    let flags = pareto_front(&pts);
    weights
        .iter()
        .map(|&w| select_on_front(candidates, &flags, &Orientation::new(w, p)?))
        .collect()
}

/// `{0, 0.1, ..., 1}` built from integers.
pub fn tenth_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cands(pts: &[(f64, f64)]) -> Vec<Candidate> {
        pts.iter().enumerate().map(|(i, &p)| Candidate { id: format!("s{i:03}"), point: p }).collect()
    }

    #[test]
    fn front_example() {
        let pts = [(0.9, 0.3), (0.6, 0.6), (0.3, 0.9), (0.5, 0.5)];
        assert_eq!(pareto_front(&pts), vec![true, true, true, false]);
        assert_eq!(pareto_front(&[(0.2, 0.2)]), vec![true]);
        assert_eq!(pareto_front(&[(0.4, 0.4), (0.4, 0.4)]), vec![true, true]);
        assert_eq!(pareto_front(&[(0.4, 0.4), (0.4, 0.3), (0.3, 0.4)]), vec![true, false, false]);
    }

    #[test]
    fn hand_distances() {
        let o = Orientation::new(0.7, Norm::P(1.0)).unwrap();
        assert!((distance((0.8, 0.5), &o) - 0.29).abs() < 1e-12);
        let o = Orientation::new(0.5, Norm::P(2.0)).unwrap();
        assert!((distance((0.6, 0.6), &o) - 0.08f64.sqrt()).abs() < 1e-12);
        assert!((distance((0.6, 0.6), &o) - 0.28284).abs() < 1e-5);
        for p in [Norm::P(1.0), Norm::P(3.0), Norm::Chebyshev] {
            assert_eq!(distance((1.0, 1.0), &Orientation::new(0.4, p).unwrap()), 0.0);
        }
    }

    #[test]
    fn selection_examples() {
        let c = cands(&[(0.9, 0.3), (0.3, 0.9)]);
        let s = select_optimal(&c, &Orientation::new(0.7, Norm::P(1.0)).unwrap()).unwrap();
        assert_eq!(s.scenario_id, "s000");
        assert!((s.distance - 0.28).abs() < 1e-12);
        // the dominated point is closer than either front point for w = 0.5, p = inf
        let c = cands(&[(1.0, 0.0), (0.0, 1.0), (0.0, 0.0)]);
        let s = select_optimal(&c, &Orientation::new(0.5, Norm::Chebyshev).unwrap()).unwrap();
        assert_ne!(s.scenario_id, "s002");
        let c = cands(&[(0.5, 0.5)]);
        for w in tenth_grid() {
            assert_eq!(select_optimal(&c, &Orientation::new(w, Norm::P(2.0)).unwrap()).unwrap().scenario_id, "s000");
        }
    }

    #[test]
    fn ties_prefer_throughput_then_speed_then_id() {
        let o = Orientation::new(0.5, Norm::P(1.0)).unwrap();
        let c = cands(&[(0.4, 0.6), (0.6, 0.4)]);
        assert_eq!(select_optimal(&c, &o).unwrap().scenario_id, "s001");
        let c = vec![
            Candidate { id: "b".into(), point: (0.5, 0.5) },
            Candidate { id: "a".into(), point: (0.5, 0.5) },
        ];
        assert_eq!(select_optimal(&c, &o).unwrap().scenario_id, "a");
    }

    #[test]
    fn sweep_endpoints() {
        let c = cands(&[(0.9, 0.3), (0.6, 0.6), (0.3, 0.9), (0.5, 0.5)]);
        let s = weight_sweep(&c, Norm::P(1.0), &[0.0, 1.0]).unwrap();
        assert_eq!(s[0].scenario_id, "s002");
        assert_eq!(s[1].scenario_id, "s000");
    }

    #[test]
    fn bad_orientations() {
        assert!(Orientation::new(1.2, Norm::P(1.0)).is_err());
        assert!(Orientation::new(0.5, Norm::P(0.5)).is_err());
        assert_eq!(Norm::parse("inf"), Ok(Norm::Chebyshev));
        assert_eq!(Norm::parse("2"), Ok(Norm::P(2.0)));
        assert!(Norm::parse("x").is_err());
        let j = serde_json::to_string(&Orientation::new(0.5, Norm::Chebyshev).unwrap()).unwrap();
        let back: Orientation = serde_json::from_str(&j).unwrap();
        assert_eq!(back.p, Norm::Chebyshev);
    }

    #[test]
    fn n_objective_form_matches_two_objective() {
        let o = Orientation::new(0.3, Norm::P(2.0)).unwrap();
        let d2 = distance((0.4, 0.7), &o);
        let dn = distance_n(&[0.4, 0.7], &[1.0, 1.0], &[0.3, 0.7], Norm::P(2.0)).unwrap();
        assert!((d2 - dn).abs() < 1e-15);
        assert_eq!(distance_n(&[0.1], &[1.0, 1.0], &[1.0], Norm::P(1.0)), Err(ParetoError::Dimension));
    }

    fn unit() -> impl Strategy<Value = f64> {
        (0u32..=1000).prop_map(|i| i as f64 / 1000.0)
    }

    proptest! {
        #[test]
        fn front_matches_naive(pts in prop::collection::vec((unit(), unit()), 1..200)) {
            prop_assert_eq!(pareto_front(&pts), pareto_front_naive(&pts));
        }

        #[test]
        fn p1_is_weighted_sum(pts in prop::collection::vec((unit(), unit()), 1..60), w in unit()) {
            let c = cands(&pts);
            let s = select_optimal(&c, &Orientation::new(w, Norm::P(1.0)).unwrap()).unwrap();
            let flags = pareto_front(&pts);
            let best = pts.iter().zip(&flags).filter(|(_, f)| **f)
                .map(|(p, _)| w * p.0 + (1.0 - w) * p.1).fold(f64::NEG_INFINITY, f64::max);
            let got = w * s.point.0 + (1.0 - w) * s.point.1;
            prop_assert!((got - best).abs() < 1e-12);
        }

        #[test]
        fn sweep_is_monotone(pts in prop::collection::vec((unit(), unit()), 1..60)) {
            let s = weight_sweep(&cands(&pts), Norm::P(1.0), &tenth_grid()).unwrap();
            for w in s.windows(2) {
                prop_assert!(w[1].point.0 >= w[0].point.0);
                prop_assert!(w[1].point.1 <= w[0].point.1);
            }
        }

        #[test]
        fn large_p_approaches_max_norm(x in unit(), y in unit(), w in unit()) {
            let a = distance((x, y), &Orientation::new(w, Norm::P(1e6)).unwrap());
            let b = distance((x, y), &Orientation::new(w, Norm::Chebyshev).unwrap());
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn selection_is_on_front(pts in prop::collection::vec((unit(), unit()), 1..60), w in unit(), p in 1.0f64..5.0) {
            let s = select_optimal(&cands(&pts), &Orientation::new(w, Norm::P(p)).unwrap()).unwrap();
            prop_assert!(!pts.iter().any(|&q| dominates(q, s.point)));
        }
    }
}
