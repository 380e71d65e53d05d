//! Subcommand bodies. Each returns the text printed on stdout.

use std::path::Path;

use anyhow::{bail, Context};
use atdm_core::dataset::{write_synthetic_dataset, Dataset, SyntheticSpec};
use atdm_core::pipeline::*;
use atdm_core::sim::VehicleRow;
use serde::Serialize;

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn resolve_now(ds: &Dataset, now: Option<usize>) -> anyhow::Result<usize> {
    let end = ds.speeds.n_minutes;
    match now {
        None => Ok(end),
        Some(m) if m >= 1 && m <= end => Ok(m),
        Some(m) => bail!("--now {m} outside 1..={end}"),
    }
}

fn write_or_return(text: String, out: Option<&Path>) -> anyhow::Result<String> {
    match out {
        Some(p) => {
            std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
            Ok(format!("wrote {}", p.display()))
        }
        None => Ok(text),
    }
}

pub fn synth(out: &Path, spec: Option<&Path>, seed: Option<u64>, cfg: &PipelineConfig) -> anyhow::Result<String> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let truth = write_synthetic_dataset(&spec, &cfg.corridor, out)?;
    let onset = truth.congestion.first().map(|e| e.onset_minute.to_string()).unwrap_or_else(|| "none".into());
    Ok(format!(
        "wrote {} ({} min, truth p_keep={} q={} r={}, congestion onset {onset})",
        out.display(),
        spec.history_min + spec.replay_min,
        spec.truth.p_keep,
        spec.truth.q_anticipate,
        spec.truth.r_slow
    ))
}

pub fn calibrate_fd(data: &Path, cfg: &PipelineConfig, now: Option<usize>, out: Option<&Path>) -> anyhow::Result<String> {
    let ds = load_dataset(data)?;
    let now = resolve_now(&ds, now)?;
    let fd = calibrate(&ds, cfg, now)?;
    write_or_return(serde_json::to_string_pretty(&fd)?, out)
}

#[derive(Serialize)]
struct AssimilationDump<'a> {
    now_minute: usize,
    map_params: &'a atdm_core::sim::BehaviorParams,
    posterior: &'a atdm_core::assimilation::Posterior,
    windows: &'a [atdm_core::assimilation::WindowReport],
    initial_state: Vec<VehicleRow>,
}

pub fn assimilate(data: &Path, cfg: &PipelineConfig, now: Option<usize>, out: Option<&Path>) -> anyhow::Result<String> {
    let ds = load_dataset(data)?;
    let now = resolve_now(&ds, now)?;
    let fd = calibrate(&ds, cfg, now)?;
    let res = assimilate_at(&ds, cfg, now, &fd)?;
    let dump = AssimilationDump {
        now_minute: now,
        map_params: &res.map_params,
        posterior: &res.posterior,
        windows: &res.windows,
        initial_state: res.initial_state.rows(),
    };
    write_or_return(serde_json::to_string_pretty(&dump)?, out)
}

/// One cycle; prints the selection report. `out` receives the full record.
pub fn recommend(data: &Path, cfg: &PipelineConfig, now: Option<usize>, out: Option<&Path>) -> anyhow::Result<String> {
    let ds = load_dataset(data)?;
    let now = resolve_now(&ds, now)?;
    let rec = match run_cycle(&ds, cfg, now, &format!("m{now:03}")) {
        Ok(r) => r,
        Err((partial, e)) => {
            if let Some(dir) = out {
                write_record_dir(&partial, dir)?;
            }
            return Err(e.into());
        }
    };
    if let Some(dir) = out {
        write_record_dir(&rec, dir)?;
    }
    Ok(selection_json(&rec)?)
}

pub fn replay(data: &Path, cfg: &PipelineConfig, store: &Path) -> anyhow::Result<String> {
    let ds = load_dataset(data)?;
    let store = RunStore::open(store)?;
    store.set_corridor(&cfg.corridor)?;
    let records = schedule(&ds, cfg, Some(&store), |r| {
        log::info!("{} {:?} in {} ms", r.run_id, r.status, r.timing.total_ms);
    })?;
    let mut lines = Vec::with_capacity(records.len());
    for r in &records {
        let dt = r.delta_t_min.map(|d| format!("{d:+}")).unwrap_or_else(|| "-".into());
        let picks: Vec<String> = r.selections.iter().map(|s| format!("w{}_p{}={}", s.w, s.p, s.scenario_id)).collect();
        lines.push(format!("{} minute={} dt={dt} status={:?} {}", r.run_id, r.now_minute, r.status, picks.join(" ")));
    }
    Ok(lines.join("\n"))
}
