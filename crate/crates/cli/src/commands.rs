use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use epiforecast::checkpoint::Checkpoint;
use epiforecast::data::{load_csv, EpidemicSeries};
use epiforecast::eval::EvalResult;
use epiforecast::model::Variant;
use epiforecast::pipeline::{baselines, evaluate_checkpoint, forecast_latest, prepare_with, run_experiment};
use epiforecast::synthetic::CoupledSinusoids;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{self, CliConfig, Overrides};
use crate::{Failure, SynthArgs};

const RESULTS_HEADER: &str = "dataset,model,variant,horizon,seed,rmse,pcc";

fn load_series(path: &Path) -> Result<EpidemicSeries, Failure> {
    load_csv(path).map_err(|e| {
        let f = Failure::from(e);
        Failure::data(format!("{}: {}", path.display(), f.message))
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| {
        let f = Failure::from(e);
        Failure::data(format!("checkpoint {}: {}", path.display(), f.message))
    })
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned())
}

fn out_dir(cfg: &CliConfig) -> Result<PathBuf, Failure> {
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| Failure::usage("missing --out (or \"out\" in the config file)"))?;
    fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn results_row(dataset: &str, model: &str, variant: &str, horizon: usize, seed: u64, r: &EvalResult) -> String {
    format!(
        "{dataset},{model},{variant},{horizon},{seed},{},{}",
        r.rmse,
        fmt_opt(r.pcc)
    )
}

fn append_results(path: &Path, rows: &[String]) -> Result<(), Failure> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::usage(format!("cannot open {}: {e}", path.display())))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes())
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

fn resolve(config_file: Option<&Path>, flags: &Overrides) -> Result<(CliConfig, EpidemicSeries), Failure> {
    let (data, file_value) = config::data_path(config_file, flags)?;
    let series = load_series(&data)?;
    let cfg = config::resolve(data, file_value, series.num_regions(), flags)?;
    Ok((cfg, series))
}

pub fn train(config_file: Option<&Path>, flags: &Overrides) -> Result<(), Failure> {
    let (cfg, series) = resolve(config_file, flags)?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("effective-config.json"), &pretty(&cfg)?)?;
    let out = run_experiment(&series, &cfg.run, cfg.grid.as_ref(), cfg.baselines, cfg.jobs)?;
    write(&dir.join("checkpoint.json"), &(out.checkpoint.to_json()? + "\n"))?;
    write(&dir.join("report.json"), &pretty(&out.report)?)?;
    write(&dir.join("epochs.csv"), &out.report.train.epochs_csv())?;

    let r = &out.report;
    eprintln!(
        "trained {} parameters for {} epochs (best {}), test rmse {:.4} pcc {}",
        r.num_parameters,
        r.train.epochs.len(),
        r.train.best_epoch,
        r.test.rmse,
        r.test.pcc.map_or_else(|| "undefined".into(), |p| format!("{p:.4}"))
    );
    if let Some(b) = &r.baselines {
        eprintln!(
            "baselines: persistence {:.4}, ar {:.4}, lridge {:.4} (lambda {})",
            b.persistence.rmse, b.ar.rmse, b.lridge.rmse, b.lridge_lambda
        );
    }
    Ok(())
}

pub fn evaluate(checkpoint: &Path, data: &Path, out: Option<&Path>, with_baselines: bool) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let series = load_series(data)?;
    let result = evaluate_checkpoint(&ck, &series)?;
    let cfg = &ck.config;
    let dataset = dataset_name(data);
    let variant = cfg.model.variant.name();
    let mut rows = vec![results_row(
        &dataset,
        "sefnet",
        variant,
        cfg.model.horizon,
        cfg.seed,
        &result,
    )];
    let mut doc = Map::new();
    doc.insert("dataset".into(), json!(dataset));
    doc.insert("model".into(), json!("sefnet"));
    doc.insert("variant".into(), json!(variant));
    doc.insert("seed".into(), json!(cfg.seed));
    doc.insert(
        "result".into(),
        serde_json::to_value(&result).map_err(|e| Failure::internal(e.to_string()))?,
    );
    if with_baselines {
        let prepared = prepare_with(&series, cfg, ck.norm_stats.clone())?;
        let b = baselines(&prepared, cfg)?;
        for (name, r) in [("persistence", &b.persistence), ("ar", &b.ar), ("lridge", &b.lridge)] {
            rows.push(results_row(&dataset, name, "-", cfg.model.horizon, cfg.seed, r));
        }
        doc.insert(
            "baselines".into(),
            serde_json::to_value(&b).map_err(|e| Failure::internal(e.to_string()))?,
        );
    }
    let text = pretty(&Value::Object(doc))?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
            write(&dir.join("eval.json"), &text)?;
            append_results(&dir.join("results.csv"), &rows)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Cell {
    variant: Variant,
    seed: u64,
    rmse: Option<f64>,
    pcc: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct VariantSummary {
    variant: Variant,
    runs: usize,
    failures: usize,
    rmse_mean: Option<f64>,
    rmse_sd: Option<f64>,
    pcc_mean: Option<f64>,
    pcc_sd: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

fn summarize(variants: &[Variant], cells: &[Cell]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&v| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.variant == v).collect();
            let rmse: Vec<f64> = mine.iter().filter_map(|c| c.rmse).collect();
            let pcc: Vec<f64> = mine.iter().filter_map(|c| c.pcc).collect();
            let (rmse_mean, rmse_sd) = mean_sd(&rmse);
            let (pcc_mean, pcc_sd) = mean_sd(&pcc);
            VariantSummary {
                variant: v,
                runs: mine.len(),
                failures: mine.iter().filter(|c| c.error.is_some()).count(),
                rmse_mean,
                rmse_sd,
                pcc_mean,
                pcc_sd,
            }
        })
        .collect()
}

pub fn ablate(
    config_file: Option<&Path>,
    flags: &Overrides,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<(), Failure> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Failure::usage("--variants and --seeds must not be empty"));
    }
    let mut variants = variants.to_vec();
    let mut seen = Vec::new();
    variants.retain(|v| {
        let fresh = !seen.contains(v);
        seen.push(*v);
        fresh
    });
    let (cfg, series) = resolve(config_file, flags)?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("effective-config.json"), &pretty(&cfg)?)?;

    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_cell = |&(variant, seed): &(Variant, u64)| {
        let mut run = cfg.run.clone();
        run.model.variant = variant;
        run.seed = seed;
        match run_experiment(&series, &run, None, false, 1) {
            Ok(out) => Cell {
                variant,
                seed,
                rmse: Some(out.report.test.rmse),
                pcc: out.report.test.pcc,
                error: None,
            },
            Err(e) => Cell {
                variant,
                seed,
                rmse: None,
                pcc: None,
                error: Some(e.to_string()),
            },
        }
    };
    let cells: Vec<Cell> = if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Failure::internal(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run_cell).collect())
    } else {
        jobs.iter().map(run_cell).collect()
    };

    let dataset = dataset_name(&cfg.data);
    let h = cfg.run.model.horizon;
    let mut csv = format!("{RESULTS_HEADER},error\n");
    for c in &cells {
        let err = c.error.as_deref().unwrap_or("").replace(['"', '\n'], " ");
        csv.push_str(&format!(
            "{dataset},sefnet,{},{h},{},{},{},\"{err}\"\n",
            c.variant,
            c.seed,
            fmt_opt(c.rmse),
            fmt_opt(c.pcc)
        ));
    }
    write(&dir.join("ablation.csv"), &csv)?;

    let summary = summarize(&variants, &cells);
    let mut table = String::from("variant,runs,failures,rmse_mean,rmse_sd,pcc_mean,pcc_sd\n");
    for s in &summary {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.variant,
            s.runs,
            s.failures,
            fmt_opt(s.rmse_mean),
            fmt_opt(s.rmse_sd),
            fmt_opt(s.pcc_mean),
            fmt_opt(s.pcc_sd)
        ));
    }
    write(&dir.join("ablation-summary.csv"), &table)?;
    write(
        &dir.join("ablation.json"),
        &pretty(&json!({ "cells": cells, "summary": summary }))?,
    )?;

    println!("{:<10} {:>22} {:>18}", "variant", "rmse (mean ± sd)", "pcc (mean ± sd)");
    for s in &summary {
        let cell = |m: Option<f64>, sd: Option<f64>| match (m, sd) {
            (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
            _ => "n/a".into(),
        };
        println!(
            "{:<10} {:>22} {:>18}{}",
            s.variant.name(),
            cell(s.rmse_mean, s.rmse_sd),
            cell(s.pcc_mean, s.pcc_sd),
            if s.failures > 0 {
                format!("  ({} failed)", s.failures)
            } else {
                String::new()
            }
        );
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, data: &Path, anchor: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let series = load_series(data)?;
    let forecast = forecast_latest(&ck, &series, anchor)?;
    let t = anchor.unwrap_or(series.len() - 1);
    let values: Map<String, Value> = series
        .regions()
        .iter()
        .cloned()
        .zip(forecast.iter().map(|v| json!(v)))
        .collect();
    let doc = json!({
        "anchor": series.times()[t],
        "horizon": ck.config.model.horizon,
        "forecast": values,
    });
    let text = pretty(&doc)?;
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
            write(&dir.join("forecast.json"), &text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let series = CoupledSinusoids {
        regions: a.regions,
        len: a.len,
        seed: a.seed,
        noise_sigma: a.noise,
        lag: a.lag,
        period: a.period,
        ..Default::default()
    }
    .generate()?;
    let file = fs::File::create(&a.output)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", a.output.display())))?;
    series.write_csv(file)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_sd_examples() {
        assert_eq!(mean_sd(&[]), (None, None));
        assert_eq!(mean_sd(&[2.0]), (Some(2.0), Some(0.0)));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
    }
}
