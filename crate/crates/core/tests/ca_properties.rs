use atdm_core::corridor::CorridorConfig;
use atdm_core::rng::CounterRng;
use atdm_core::sim::*;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_ring(n_cells: usize, limits: &[u32], density: f64, seed: u64) -> MicroState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_lane = ((n_cells as f64) * density).round() as usize;
    let mut rows = Vec::new();
    for (lane, &lim) in limits.iter().enumerate() {
        for (k, cell) in sample(&mut rng, n_cells, per_lane).into_iter().enumerate() {
            rows.push(VehicleRow { id: (lane * n_cells + k) as u64, lane, cell, speed: lim.min(1) });
        }
    }
    MicroState::from_rows(limits.len(), &rows)
}

fn ids(s: &MicroState) -> Vec<u64> {
    let mut v: Vec<u64> = s.lanes.iter().flatten().map(|v| v.id).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ring_stays_safe_and_conserves(
        seed in any::<u64>(),
        density in 0.05f64..0.6,
        p_keep in 0.0f64..=1.0,
        q in 0.0f64..=1.0,
        r in 0.0f64..=1.0,
        depth in 1u32..=3,
    ) {
        let road = Road::uniform(300, &[4, 5], Boundary::Ring);
        let mut state = random_ring(300, &[4, 5], density, seed);
        let before = ids(&state);
        let params = BehaviorParams { p_keep, q_anticipate: q, r_slow: r, depth };
        let rng = CounterRng::new(seed);
        for _ in 0..400 {
            lane_change_phase(&mut state, &road, &rng, DEFAULT_LANE_CHANGE_PROB);
            prop_assert!(state.check(&road).is_ok(), "{:?}", state.check(&road));
            prop_assert_eq!(step(&mut state, &road, &params, &rng, &mut ()), 0);
            prop_assert!(state.check(&road).is_ok(), "{:?}", state.check(&road));
        }
        prop_assert_eq!(ids(&state), before);
    }

    #[test]
    fn open_corridor_respects_vsl_zone(seed in any::<u64>(), zone in prop::sample::select(vec![40.0, 60.0, 80.0])) {
        let cfg = CorridorConfig::default();
        let road = Road::corridor(&cfg, Some(&[zone, zone])).unwrap();
        let (vs, ve) = cfg.vsl_cells();
        let cap = (zone / 20.0) as u32;
        let mut state = MicroState::empty(2);
        let mut origin = Origin::new(2, 0);
        let rng = CounterRng::new(seed);
        let params = BehaviorParams::default();
        for k in 0..600 {
            lane_change_phase(&mut state, &road, &rng, DEFAULT_LANE_CHANGE_PROB);
            step(&mut state, &road, &params, &rng, &mut ());
            apply_boundaries(&mut state, &mut origin, &road, 0.8, &rng, k);
            prop_assert!(state.check(&road).is_ok());
            for v in state.lanes.iter().flatten() {
                if (vs..ve).contains(&v.cell) {
                    prop_assert!(v.speed <= cap);
                }
            }
        }
    }
}

#[test]
fn nasch_free_flow_runs_at_the_limit() {
    // one vehicle per 60 cells never interacts at Vmax = 4 or 5
    let road = Road::uniform(600, &[4, 5], Boundary::Ring);
    let rows: Vec<VehicleRow> =
        (0..2).flat_map(|lane| (0..10).map(move |k| VehicleRow { id: lane * 10 + k, lane: lane as usize, cell: 60 * k as usize, speed: 0 }))
            .collect();
    let mut state = MicroState::from_rows(2, &rows);
    let params = BehaviorParams { p_keep: 1.0, q_anticipate: 0.0, r_slow: 0.0, depth: 1 };
    let rng = CounterRng::new(5);
    for _ in 0..10 {
        step(&mut state, &road, &params, &rng, &mut ());
    }
    for _ in 0..200 {
        step(&mut state, &road, &params, &rng, &mut ());
        assert!(state.lanes[0].iter().all(|v| v.speed == 4));
        assert!(state.lanes[1].iter().all(|v| v.speed == 5));
    }
}

#[test]
fn more_demand_means_more_entries() {
    let cfg = CorridorConfig::default();
    let road = Road::corridor(&cfg, None).unwrap();
    let mean_entered = |d: f64| {
        (0..10u64)
            .map(|seed| {
                let sim = SimRun {
                    seed,
                    params: BehaviorParams { p_keep: 0.9, q_anticipate: 0.8, r_slow: 0.2, depth: 2 },
                    horizon_steps: 400,
                    demand: vec![d],
                    initial: MicroState::empty(2),
                    lane_change_prob: DEFAULT_LANE_CHANGE_PROB,
                    record: RecordOptions::default(),
                };
                run(&sim, &road, &cfg).entered as f64
            })
            .sum::<f64>()
            / 10.0
    };
    let e: Vec<f64> = [10.0, 20.0, 30.0].into_iter().map(mean_entered).collect();
    assert!(e[0] < e[1] && e[1] < e[2], "{e:?}");
}
