//! Run configuration assembled from defaults, an optional JSON file and
//! command-line flags, in that order of precedence (lowest first).

use std::path::{Path, PathBuf};

use epiforecast::model::{SefnetConfig, Variant};
use epiforecast::train::{Grid, RunConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

pub const SEED_ENV: &str = "EPIFORECAST_SEED";
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_HORIZON: usize = 3;
const DEFAULT_AR_WINDOW: usize = 20;

/// Everything that determines a run. Written to `effective-config.json`;
/// passing that file back through `--config` reproduces the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    /// Also fit and score the linear baselines.
    pub baselines: bool,
    /// Hyperparameter sweep; absent or empty trains `run` as is.
    pub grid: Option<Grid>,
    pub run: RunConfig,
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch_size: Option<usize>,
    pub variant: Option<Variant>,
    pub norm: Option<epiforecast::data::NormMode>,
    pub pcc: Option<epiforecast::eval::PccMode>,
    pub jobs: Option<usize>,
    pub grid: Option<Grid>,
    pub no_baselines: bool,
}

fn read_file(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed config {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(Failure::usage(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    Ok(value)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn pointer_set(value: &Value, path: &str) -> bool {
    value.pointer(path).is_some_and(|v| !v.is_null())
}

pub fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV} must be a non-negative integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Data path named by the flag or the file.
pub fn data_path(file: Option<&Path>, flags: &Overrides) -> Result<(PathBuf, Value), Failure> {
    let file_value = match file {
        Some(p) => read_file(p)?,
        None => Value::Object(Default::default()),
    };
    let data = match (&flags.data, file_value.get("data").and_then(Value::as_str)) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Failure::usage("missing --data (or \"data\" in the config file)")),
    };
    Ok((data, file_value))
}

/// Resolves the effective configuration for a series with `regions` regions.
pub fn resolve(data: PathBuf, file_value: Value, regions: usize, flags: &Overrides) -> Result<CliConfig, Failure> {
    let model = SefnetConfig::small(regions, DEFAULT_WINDOW, DEFAULT_HORIZON);
    let defaults = CliConfig {
        data: data.clone(),
        out: None,
        jobs: 1,
        baselines: true,
        grid: None,
        run: RunConfig::new(model, 0),
    };
    let mut value = serde_json::to_value(&defaults).map_err(|e| Failure::internal(e.to_string()))?;
    let seed_in_file = pointer_set(&file_value, "/run/seed");
    let ar_in_file = pointer_set(&file_value, "/run/model/ar_window");
    merge(&mut value, file_value);
    let mut cfg: CliConfig =
        serde_json::from_value(value).map_err(|e| Failure::usage(format!("invalid config: {e}")))?;

    cfg.data = data;
    if cfg.run.model.regions != regions {
        return Err(Failure::data(format!(
            "config declares {} regions but the data has {regions}",
            cfg.run.model.regions
        )));
    }
    if let Some(out) = &flags.out {
        cfg.out = Some(out.clone());
    }
    let m = &mut cfg.run.model;
    if let Some(h) = flags.horizon {
        m.horizon = h;
    }
    if let Some(t) = flags.window {
        m.window = t;
    }
    if let Some(v) = flags.variant {
        m.variant = v;
    }
    if !ar_in_file {
        m.ar_window = DEFAULT_AR_WINDOW.min(m.window);
    }
    let r = &mut cfg.run;
    match (flags.seed, seed_in_file, env_seed()?) {
        (Some(s), _, _) => r.seed = s,
        (None, false, Some(s)) => r.seed = s,
        _ => {}
    }
    if let Some(lr) = flags.lr {
        r.lr = lr;
    }
    if let Some(e) = flags.max_epochs {
        r.max_epochs = e;
    }
    if let Some(p) = flags.patience {
        r.patience = p;
    }
    if let Some(b) = flags.batch_size {
        r.batch_size = b;
    }
    if let Some(n) = flags.norm {
        r.norm = n;
    }
    if let Some(p) = flags.pcc {
        r.pcc = p;
    }
    if let Some(j) = flags.jobs {
        cfg.jobs = j;
    }
    if let Some(g) = &flags.grid {
        cfg.grid = Some(g.clone());
    }
    if flags.no_baselines {
        cfg.baselines = false;
    }
    if cfg.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    cfg.run.validate()?;
    Ok(cfg)
}

/// `full` for the full sweep, otherwise a JSON file holding a grid.
pub fn load_grid(spec: &str) -> Result<Grid, Failure> {
    if spec == "full" {
        return Ok(Grid::full());
    }
    let text = std::fs::read_to_string(spec).map_err(|e| Failure::usage(format!("cannot read grid {spec}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("invalid grid {spec}: {e}")))
}
