use atdm_core::dataset::{generate_synthetic_dataset, SyntheticSpec};
use atdm_core::pareto::{pareto_front, Norm, Orientation};
use atdm_core::pipeline::*;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig { seeds: 2, ..Default::default() };
    cfg.assimilation.n_particles = 24;
    cfg.assimilation.n_windows = 2;
    cfg
}

#[test]
fn cycle_is_reproducible_and_consistent() {
    let cfg = small_config();
    let (ds, _) = generate_synthetic_dataset(&SyntheticSpec::default(), &cfg.corridor).unwrap();
    let a = run_cycle(&ds, &cfg, 60, "a").unwrap();
    let b = run_cycle(&ds, &cfg, 60, "b").unwrap();
    assert_eq!(selection_json(&a).unwrap(), selection_json(&b).unwrap());
    assert_eq!(a.status, RunStatus::Complete);
    assert_eq!(a.scenarios.len(), 4);
    assert_eq!(a.selections.len(), 3);
    assert_eq!(a.baseline_inflow.len(), cfg.horizon_min);
    assert!(a.inflow_fallback);
    assert_eq!(a.issued_at, "2024-01-15T08:00:00");

    let points: Vec<(f64, f64)> = a.scenarios.iter().map(|s| s.point).collect();
    let flags = pareto_front(&points);
    for (s, f) in a.scenarios.iter().zip(&flags) {
        assert_eq!(s.pareto, *f);
        assert_eq!(s.per_seed.len(), 2);
        assert!((s.lane_usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for sel in &a.selections {
        assert!(a.scenario(&sel.scenario_id).unwrap().pareto);
    }
    let nc = a.scenario("NoControl").unwrap();
    assert_eq!(nc.improvement.unwrap().throughput, 0.0);
    let o = Orientation::new(0.7, Norm::P(1.0)).unwrap();
    assert_eq!(a.recommend(&o).unwrap(), a.selections[0]);
    assert_eq!(a.predicted_fields.len(), 4);
}

#[test]
fn store_round_trips_and_rejects_bad_ids() {
    let cfg = small_config();
    let (ds, _) = generate_synthetic_dataset(&SyntheticSpec::default(), &cfg.corridor).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    store.set_corridor(&cfg.corridor).unwrap();
    let id = store.next_id(40).unwrap();
    assert_eq!(id, "r0001-m040");
    let rec = run_cycle(&ds, &cfg, 40, &id).unwrap();
    store.save(&rec).unwrap();
    assert_eq!(store.list_ids().unwrap(), vec![id.clone()]);
    assert_eq!(store.next_id(45).unwrap(), "r0002-m045");
    let back = store.load(&id).unwrap();
    assert_eq!(back.selections, rec.selections);
    assert_eq!(back.scenarios, rec.scenarios);
    let f = store.load_field(&id, "AlsVsl").unwrap();
    assert_eq!((f.n_minutes, f.n_segments), (30, 16));
    assert!(store.load_field(&id, "Nope").is_err());
    assert!(store.load_field(&id, "../x").is_err());
    assert!(store.load("../etc").is_err());
    assert!(store.load("missing").is_err());
}

#[test]
fn failed_cycle_keeps_a_marked_record() {
    let cfg = small_config();
    let (ds, _) = generate_synthetic_dataset(&SyntheticSpec::default(), &cfg.corridor).unwrap();
    let (rec, err) = run_cycle(&ds, &cfg, 500, "x").unwrap_err();
    assert_eq!(rec.status, RunStatus::Failed);
    assert!(rec.failure.as_deref().unwrap().starts_with("config"));
    assert!(err.to_string().contains("config"));
    let (rec, _) = run_cycle(&ds, &cfg, 1, "y").unwrap_err();
    assert_eq!(rec.status, RunStatus::Failed);
    assert!(!rec.failure.unwrap().starts_with("config"));
}
