//! Run configuration: the JSON document, dot-path overrides, the canonical
//! hash and resolution into solver inputs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use tumor_ocp::continuation::{builtin_schedule, schedule_t60_mixed};
use tumor_ocp::model::{CoefficientField, Profile};
use tumor_ocp::pmp::SwitchingSearchOptions;
use tumor_ocp::{
    ContinuationConfig, ContinuationSchedule, ContinuationVector, ControlSchedule, InitialData, ModelParameters,
    PhenotypeGrid, SolverOptions, TestCase, TimeGrid,
};

use crate::output::read_csv_columns;

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset supplying every value not set below; `horizon60` if absent.
    #[serde(default)]
    pub case: Option<TestCase>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub controls: Option<ControlsConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    /// Continuation vector of the `solve` subcommand; all ones if absent.
    #[serde(default)]
    pub lambda: Option<ContinuationVector>,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
    #[serde(default)]
    pub switching: Option<SwitchingSearchOptions>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: Option<usize>,
    pub nt: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
}

/// A coefficient profile: a whitelisted formula in `x` or node values.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Formula(String),
    Nodes(Vec<f64>),
}

impl CoefficientSpec {
    fn resolve(&self, name: &str, grid: &PhenotypeGrid) -> Result<CoefficientField> {
        match self {
            CoefficientSpec::Formula(f) => Profile::parse(f)
                .map(|p| p.sample(grid))
                .ok_or_else(|| anyhow!("params.{name}: formula {f:?} is not in the whitelist; give node values instead")),
            CoefficientSpec::Nodes(v) => {
                if v.len() != grid.num_nodes() {
                    bail!("params.{name}: {} values for {} grid nodes", v.len(), grid.num_nodes());
                }
                CoefficientField::new(v.clone()).with_context(|| format!("params.{name}"))
            }
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub r_h: Option<CoefficientSpec>,
    pub r_c: Option<CoefficientSpec>,
    pub d_h: Option<CoefficientSpec>,
    pub d_c: Option<CoefficientSpec>,
    pub mu_h: Option<CoefficientSpec>,
    pub mu_c: Option<CoefficientSpec>,
    pub alpha_h: Option<f64>,
    pub alpha_c: Option<f64>,
    pub a_hh: Option<f64>,
    pub a_hc: Option<f64>,
    pub a_ch: Option<f64>,
    pub a_cc: Option<f64>,
    pub beta_h: Option<f64>,
    pub beta_c: Option<f64>,
    pub u1_max: Option<f64>,
    pub u2_max: Option<f64>,
    pub u1_max0: Option<f64>,
    pub u2_max0: Option<f64>,
    pub theta_hc: Option<f64>,
    pub theta_h: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub epsilon: Option<f64>,
    #[serde(rename = "rho_H0")]
    pub rho_h0: Option<f64>,
    #[serde(rename = "rho_C0")]
    pub rho_c0: Option<f64>,
    /// CSV with columns `n_H` and `n_C` at the phenotype nodes.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda0: Option<f64>,
}

/// Constant doses, or a CSV with columns `u1` and `u2` per time step.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsConfig {
    pub u1: Option<f64>,
    pub u2: Option<f64>,
    pub file: Option<PathBuf>,
}

/// A built-in schedule name or an inline schedule.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum ScheduleConfig {
    Name(String),
    Inline(ContinuationSchedule),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Number of evenly spaced density snapshots.
    pub snapshots: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { snapshots: 10 }
    }
}

/// Sets `key` (dot path, numeric segments index arrays) to `raw`, parsed as
/// JSON when possible and as a string otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override key {key:?} has an empty segment");
    }
    for seg in segments {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| anyhow!("override {key:?}: {seg:?} is not an array index"))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("override {key:?}: index {i} out of range ({len} items)"))?
            }
            _ => bail!("override {key:?}: {seg:?} descends into a scalar"),
        };
    }
    *node = value;
    Ok(())
}

/// SHA-256 of the compact serialization with object keys sorted.
pub fn canonical_hash(doc: &Value) -> String {
    fn canonical(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                Value::Object(keys.into_iter().map(|k| (k.clone(), canonical(&map[k]))).collect())
            }
            Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
            other => other.clone(),
        }
    }
    let text = serde_json::to_string(&canonical(doc)).expect("JSON values serialize");
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// A configuration document after overrides, with its hash.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub hash: String,
    /// Directory that relative file paths are resolved against.
    pub base_dir: PathBuf,
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let (mut doc, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (doc, dir)
        }
        None => (Value::Object(Default::default()), PathBuf::from(".")),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override {o:?} is not of the form KEY=VALUE"))?;
        apply_override(&mut doc, key.trim(), raw.trim())?;
    }
    let hash = canonical_hash(&doc);
    let config: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
    Ok(LoadedConfig {
        config,
        hash,
        base_dir,
    })
}

/// Everything the subcommands need, with presets and overrides merged.
pub struct Resolved {
    pub case: TestCase,
    pub params: ModelParameters,
    pub grid: PhenotypeGrid,
    pub time: TimeGrid,
    pub initial: InitialData,
    pub solver: SolverOptions,
    pub switching: SwitchingSearchOptions,
    pub controls: Option<ControlSchedule>,
    pub lambda: ContinuationVector,
    pub snapshots: usize,
    schedule: Option<ScheduleConfig>,
}

impl Resolved {
    pub fn continuation(&self) -> ContinuationConfig {
        ContinuationConfig {
            params: self.params.clone(),
            grid: self.grid,
            time: self.time,
            initial: self.initial.clone(),
            solver: self.solver.clone(),
            switching: self.switching.clone(),
        }
    }

    /// The schedule named or given inline, else the preset's own.
    pub fn schedule(&self) -> Result<ContinuationSchedule> {
        match &self.schedule {
            None => Ok(self.case.scenario()?.schedule),
            Some(ScheduleConfig::Inline(s)) => {
                for step in &s.steps {
                    step.validate()?;
                }
                Ok(s.clone())
            }
            Some(ScheduleConfig::Name(name)) if name == "t60-mixed" => Ok(schedule_t60_mixed(self.params.lambda0)),
            Some(ScheduleConfig::Name(name)) => builtin_schedule(name)
                .ok_or_else(|| anyhow!("unknown schedule {name:?}; expected t60, t80, t60-mixed or an inline schedule")),
        }
    }
}

fn read_initial(path: &Path, grid: &PhenotypeGrid) -> Result<InitialData> {
    let cols = read_csv_columns(path, &["n_H", "n_C"])?;
    let mut it = cols.into_iter();
    let (n_h, n_c) = (it.next().unwrap(), it.next().unwrap());
    Ok(InitialData::from_densities(grid, n_h, n_c)?)
}

fn read_controls(path: &Path, nt: usize) -> Result<ControlSchedule> {
    let cols = read_csv_columns(path, &["u1", "u2"])?;
    let mut it = cols.into_iter();
    let u = ControlSchedule {
        u1: it.next().unwrap(),
        u2: it.next().unwrap(),
    };
    if u.len() != nt {
        bail!("{}: {} control rows for {nt} time steps", path.display(), u.len());
    }
    Ok(u)
}

impl LoadedConfig {
    pub fn resolve(&self) -> Result<Resolved> {
        let c = &self.config;
        let case = c.case.unwrap_or(TestCase::Horizon60);
        let preset = case.scenario()?;
        let nx = c.grid.nx.unwrap_or(preset.grid.num_cells());
        let nt = c.grid.nt.unwrap_or(preset.time.num_steps());
        let horizon = c.grid.horizon.unwrap_or(preset.time.horizon());
        let grid = PhenotypeGrid::new(nx)?;
        let time = TimeGrid::new(horizon, nt)?;

        // Preset fields are the reference profiles; resample on this grid.
        let fields = tumor_ocp::model::sample_default_coefficients(&grid);
        let p = &c.params;
        let field = |spec: &Option<CoefficientSpec>, name: &str, default: CoefficientField| match spec {
            Some(s) => s.resolve(name, &grid),
            None => Ok(default),
        };
        let base = preset.params;
        let params = ModelParameters {
            r_h: field(&p.r_h, "r_h", fields.r_h)?,
            r_c: field(&p.r_c, "r_c", fields.r_c)?,
            d_h: field(&p.d_h, "d_h", fields.d_h)?,
            d_c: field(&p.d_c, "d_c", fields.d_c)?,
            mu_h: field(&p.mu_h, "mu_h", fields.mu_h)?,
            mu_c: field(&p.mu_c, "mu_c", fields.mu_c)?,
            alpha_h: p.alpha_h.unwrap_or(base.alpha_h),
            alpha_c: p.alpha_c.unwrap_or(base.alpha_c),
            a_hh: p.a_hh.unwrap_or(base.a_hh),
            a_hc: p.a_hc.unwrap_or(base.a_hc),
            a_ch: p.a_ch.unwrap_or(base.a_ch),
            a_cc: p.a_cc.unwrap_or(base.a_cc),
            beta_h: p.beta_h.unwrap_or(base.beta_h),
            beta_c: p.beta_c.unwrap_or(base.beta_c),
            u1_max: p.u1_max.unwrap_or(base.u1_max),
            u2_max: p.u2_max.unwrap_or(base.u2_max),
            u1_max0: p.u1_max0.unwrap_or(base.u1_max0),
            u2_max0: p.u2_max0.unwrap_or(base.u2_max0),
            theta_hc: p.theta_hc.unwrap_or(base.theta_hc),
            theta_h: p.theta_h.unwrap_or(base.theta_h),
            lambda0: c.objective.lambda0.unwrap_or(base.lambda0),
        };
        params.validate(&grid)?;

        let initial = match &c.initial.file {
            Some(f) => {
                if c.initial.epsilon.is_some() || c.initial.rho_h0.is_some() || c.initial.rho_c0.is_some() {
                    bail!("initial: give either a file or the Gaussian parameters, not both");
                }
                read_initial(&self.base_dir.join(f), &grid)?
            }
            None => {
                let r = &preset.initial;
                InitialData::gaussian(
                    &grid,
                    c.initial.epsilon.or(r.epsilon).unwrap_or(0.1),
                    c.initial.rho_h0.unwrap_or(r.rho_h0_target),
                    c.initial.rho_c0.unwrap_or(r.rho_c0_target),
                )?
            }
        };

        let controls = match &c.controls {
            None => None,
            Some(ControlsConfig { file: Some(f), u1, u2 }) => {
                if u1.is_some() || u2.is_some() {
                    bail!("controls: give either a file or constant doses, not both");
                }
                Some(read_controls(&self.base_dir.join(f), nt)?)
            }
            Some(ControlsConfig { u1, u2, .. }) => {
                Some(ControlSchedule::constant(nt, u1.unwrap_or(0.0), u2.unwrap_or(0.0)))
            }
        };

        Ok(Resolved {
            case,
            params,
            grid,
            time,
            initial,
            solver: c.solver.clone().unwrap_or_default(),
            switching: c.switching.clone().unwrap_or_default(),
            controls,
            lambda: c.lambda.unwrap_or(ContinuationVector::ones()),
            snapshots: c.output.snapshots,
            schedule: c.schedule.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"grid": {"nx": 8, "nt": 50}, "objective": {"lambda0": 0.5}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"objective": {"lambda0": 0.5}, "grid": {"nt": 50, "nx": 8}}"#).unwrap();
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
        let c = json!({"grid": {"nx": 8, "nt": 51}, "objective": {"lambda0": 0.5}});
        assert_ne!(canonical_hash(&a), canonical_hash(&c));
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let mut doc = json!({"grid": {"nx": 8}, "lambda": [1, 1, 1, 1, 1, 1]});
        apply_override(&mut doc, "grid.nt", "40").unwrap();
        apply_override(&mut doc, "params.mu_c", "0").unwrap();
        apply_override(&mut doc, "lambda.2", "0.5").unwrap();
        apply_override(&mut doc, "schedule", "t80").unwrap();
        assert_eq!(doc["grid"]["nt"], json!(40));
        assert_eq!(doc["params"]["mu_c"], json!(0));
        assert_eq!(doc["lambda"][2], json!(0.5));
        assert_eq!(doc["schedule"], json!("t80"));
        assert!(apply_override(&mut doc, "grid.nx.deeper", "1").is_err());
        assert!(apply_override(&mut doc, "lambda.9", "1").is_err());
        assert!(apply_override(&mut doc, "grid..nx", "1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            json!({"gird": {}}),
            json!({"grid": {"nx": 8, "dx": 0.1}}),
            json!({"params": {"gamma": 1.0}}),
            json!({"output": {"stride": 3}}),
        ] {
            assert!(serde_json::from_value::<RunConfig>(bad).is_err());
        }
    }

    fn resolve(doc: Value) -> Result<Resolved> {
        LoadedConfig {
            hash: canonical_hash(&doc),
            config: serde_json::from_value(doc)?,
            base_dir: PathBuf::from("."),
        }
        .resolve()
    }

    #[test]
    fn presets_and_overrides_merge() {
        let r = resolve(json!({"case": "horizon80", "grid": {"nt": 300}, "params": {"theta_h": 0.7}})).unwrap();
        assert_eq!(r.time.num_steps(), 300);
        assert_eq!(r.time.horizon(), 80.0);
        assert_eq!(r.grid.num_cells(), 12);
        assert_eq!(r.params.theta_h, 0.7);
        assert_eq!(r.params.u1_max0, 0.7);
        assert_eq!(r.schedule().unwrap().name, "t80");
    }

    #[test]
    fn formulas_come_from_the_whitelist() {
        let r = resolve(json!({"grid": {"nx": 4}, "params": {"mu_c": "0.2 / (0.7^2 + x^2)"}})).unwrap();
        let expect = Profile::HealthyDrugDeath.sample(&r.grid);
        assert_eq!(r.params.mu_c, expect);
        assert!(resolve(json!({"params": {"mu_c": "exp(-x)"}})).is_err());
        let r = resolve(json!({"grid": {"nx": 2}, "params": {"r_c": [1.0, 2.0, 3.0]}})).unwrap();
        assert_eq!(r.params.r_c.values(), &[1.0, 2.0, 3.0]);
        assert!(resolve(json!({"grid": {"nx": 2}, "params": {"r_c": [1.0, 2.0]}})).is_err());
    }

    #[test]
    fn unknown_schedule_name_is_an_error() {
        let r = resolve(json!({"schedule": "t70"})).unwrap();
        assert!(r.schedule().is_err());
        let r = resolve(json!({"objective": {"lambda0": 0.5}, "schedule": "t60-mixed"})).unwrap();
        assert_eq!(r.schedule().unwrap().steps.last().unwrap().lambda0, Some(0.5));
    }

    #[test]
    fn inline_schedule_parses() {
        let r = resolve(json!({"schedule": {"name": "short", "steps": [{"set": {"l2": 1.0}}, {"set": {"l1": 1.0}, "substeps": 2}]}}))
            .unwrap();
        let s = r.schedule().unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[1].substeps, 2);
    }
}
