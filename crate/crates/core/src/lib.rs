//! Freeway-corridor control recommendation engine.
//!
//! The crate assimilates spatiotemporal mean-speed observations into a
//! two-lane stochastic cellular-automaton model, simulates variable speed
//! limit (VSL) and inflow-control scenarios, and picks one control from the
//! Pareto front of (throughput, mean speed) by a weighted generalized
//! distance to the ideal point.
//!
//! Module map:
//!
//! * [`corridor`] – geometry, lanes, cells and unit conversions.
//! * [`speed_field`] – mean-speed grids, CSV ingest, congestion detection.
//! * [`fundamental_diagram`] – speed/density/flow calibration from counters.
//! * [`sim`] – the cellular-automaton engine.
//! * [`assimilation`] – particle filter over behaviour parameters and
//!   microstate reconstruction.
//! * [`scenarios`] – VSL catalog, inflow prediction and the inflow grid.
//! * [`objectives`] – Edie throughput / space-mean speed and scaling.
//! * [`pareto`] – dominance filtering and distance-based selection.
//! * [`dataset`] – observation bundles on disk and the synthetic twin
//!   generator.
//! * [`pipeline`] – the recommendation cycle, scheduling and persistence.

pub mod assimilation;
pub mod corridor;
pub mod dataset;
pub mod fundamental_diagram;
pub mod objectives;
pub mod pareto;
pub mod pipeline;
pub mod rng;
pub mod scenarios;
pub mod sim;
pub mod speed_field;

