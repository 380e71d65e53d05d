//! Command-line driver and HTTP service for the ATDM engine.
//!
//! - [`commands`]: one function per CLI subcommand
//! - [`server`]: run queue, worker and JSON routes

pub mod commands;
pub mod server;

use std::path::Path;

use anyhow::Context;
use atdm_core::pipeline::PipelineConfig;
use serde_json::Value;

/// Reads a pipeline config JSON document; missing fields take defaults.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Applies a JSON merge patch: objects merge key by key, `null` deletes,
/// anything else replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match (target, patch) {
        (Value::Object(t), Value::Object(p)) => {
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        (t, p) => *t = p.clone(),
    }
}

/// `base` with `overrides` merged in, validated.
pub fn apply_overrides(base: &PipelineConfig, overrides: &Value) -> anyhow::Result<PipelineConfig> {
    let mut v = serde_json::to_value(base)?;
    merge_patch(&mut v, overrides);
    let cfg: PipelineConfig = serde_json::from_value(v).context("overrides do not fit the config")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use atdm_core::pipeline::CatalogMode;
    use serde_json::json;

    #[test]
    fn overrides_merge_nested_fields() {
        let base = PipelineConfig::default();
        let cfg = apply_overrides(&base, &json!({"catalog": "combined", "assimilation": {"n_particles": 32}})).unwrap();
        assert_eq!(cfg.catalog, CatalogMode::Combined);
        assert_eq!(cfg.assimilation.n_particles, 32);
        assert_eq!(cfg.assimilation.sigma, base.assimilation.sigma);
        assert!(apply_overrides(&base, &json!({"seeds": 0})).is_err());
        assert!(apply_overrides(&base, &json!({"seeds": "many"})).is_err());
    }
}
