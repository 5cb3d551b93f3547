//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when an evaluated criterion fails.
//!
//! A criterion whose input data is not present on this machine is reported
//! as FAIL with the reason, but only fails the process when
//! `EPIFORECAST_ACCEPTANCE_STRICT` is set. The US-Regions check reads the CSV
//! named by `EPIFORECAST_US_REGIONS_CSV`, falling back to `data/us_regions.csv`
//! at the workspace root.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use epiforecast::baselines::{fit_ar, fit_lridge_samples};
use epiforecast::data::{make_windows, EpidemicSeries, SplitSpec};
use epiforecast::eval::Forecaster as _;
use epiforecast::model::{Sefnet, SefnetConfig, SefnetParams, Variant};
use epiforecast::pipeline::run_experiment;
use epiforecast::synthetic::CoupledSinusoids;
use epiforecast::tensor::gradcheck::{numeric_grad, relative_error, FD_STEP};
use epiforecast::tensor::BnRunning;
use epiforecast::train::{Grid, RunConfig};
use epiforecast::{ArrayId, ComputeTape, DiffArray, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_TRIALS: usize = 1000;
const ATTENTION_TOL: f64 = 1e-9;
const PERSISTENCE_MARGIN: f64 = 0.20;
const SMOKE_BUDGET: Duration = Duration::from_secs(300);
const BASELINE_TOL: f64 = 1e-6;
const LRIDGE_LAMBDA: f64 = 1e-8;
const PROTOCOL_BUDGET: Duration = Duration::from_secs(30 * 60);
const SMOKE_SEEDS: [u64; 3] = [0, 1, 2];

enum Verdict {
    Pass(String),
    Fail(String),
    /// Inputs missing on this machine.
    Unavailable(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("architecture invariants", architecture_invariants),
        ("learning smoke test", learning_smoke),
        ("ablation direction", ablation_direction),
        ("baseline correctness", baseline_correctness),
        ("protocol reproduction", protocol_reproduction),
        ("determinism", determinism),
    ];
    let strict = std::env::var_os("EPIFORECAST_ACCEPTANCE_STRICT").is_some();
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    let mut unavailable = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Unavailable(d) => {
                unavailable += 1;
                ("FAIL", format!("not evaluated: {d}"))
            }
        };
        println!("criterion {n} {tag} [{name}] {detail} ({secs:.1}s)");
    }
    println!("acceptance: {failed} failed, {unavailable} not evaluated");
    if failed > 0 || (strict && unavailable > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ------------------------------------------------------------ helpers

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

type Builder = dyn Fn(&mut ComputeTape, &[ArrayId]) -> epiforecast::Result<ArrayId>;

/// Worst relative error between the tape gradient and central differences
/// over every input of `f`.
fn grad_error(inputs: &[DiffArray], f: &Builder) -> f64 {
    let mut tape = ComputeTape::new();
    let ids: Vec<ArrayId> = inputs
        .iter()
        .map(|a| tape.leaf(a.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut tape, &ids).unwrap();
    tape.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[k]).unwrap().to_vec();
        let numeric = numeric_grad(
            |x| {
                let mut t = ComputeTape::new();
                let ids: Vec<ArrayId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, a)| {
                        let a = if j == k {
                            DiffArray::new(a.shape(), x.to_vec()).unwrap()
                        } else {
                            a.clone()
                        };
                        t.constant(a)
                    })
                    .collect();
                let r = f(&mut t, &ids).unwrap();
                t.value(r).values()[0]
            },
            input.values(),
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Fixed random weights per output element, then a sum.
fn weighted(tape: &mut ComputeTape, y: ArrayId) -> epiforecast::Result<ArrayId> {
    let mut rng = ChaCha8Rng::seed_from_u64(tape.shape(y).iter().product::<usize>() as u64);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn toy() -> SefnetConfig {
    SefnetConfig {
        regions: 3,
        window: 12,
        horizon: 3,
        lstm_hidden: 8,
        lstm_layers: 1,
        filters: 4,
        pool: 3,
        attn_dim: 8,
        ar_window: 4,
        dropout: 0.2,
        variant: Variant::None,
    }
}

fn scrambled(config: SefnetConfig, seed: u64) -> Sefnet {
    let mut model = Sefnet::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (_, arr) in model.params.iter_mut() {
        for v in arr.values_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    model
}

fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn train_loss(model: &Sefnet, inputs: &[f64], target: &[f64], batch: usize, seed: u64) -> f64 {
    let mut tape = ComputeTape::new();
    let out = model
        .forward(&mut tape, inputs, batch, Mode::Train, seed, false)
        .unwrap();
    let t = tape.constant(DiffArray::new(&[batch, model.config.regions], target.to_vec()).unwrap());
    let loss = tape.mse(out.pred, t).unwrap();
    tape.value(loss).values()[0]
}

// ------------------------------------------------------------ 1

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |shape: &[usize]| random(shape, &mut rng);
    let mut running = BnRunning::new(4);
    running.mean = vec![0.3, -0.2, 0.1, 0.0];
    running.var = vec![0.5, 1.5, 0.8, 2.0];

    let mut cases: Vec<(String, Vec<DiffArray>, Box<Builder>)> = vec![
        (
            "matmul".into(),
            vec![r(&[3, 4]), r(&[4, 2])],
            Box::new(|t, x| {
                let y = t.matmul(x[0], x[1])?;
                weighted(t, y)
            }),
        ),
        (
            "batch_matmul".into(),
            vec![r(&[2, 3, 4]), r(&[2, 4, 5])],
            Box::new(|t, x| {
                let y = t.batch_matmul(x[0], x[1], false)?;
                weighted(t, y)
            }),
        ),
        (
            "batch_matmul transposed".into(),
            vec![r(&[2, 3, 4]), r(&[2, 5, 4])],
            Box::new(|t, x| {
                let y = t.batch_matmul(x[0], x[1], true)?;
                weighted(t, y)
            }),
        ),
        (
            "adaptive_max_pool".into(),
            vec![r(&[3, 4, 10])],
            Box::new(|t, x| {
                let y = t.adaptive_max_pool(x[0], 3)?;
                weighted(t, y)
            }),
        ),
        (
            "batch_norm train".into(),
            vec![r(&[3, 4, 6]), r(&[4]), r(&[4])],
            Box::new(|t, x| {
                let (y, _) = t.batch_norm(x[0], x[1], x[2], &BnRunning::new(4), Mode::Train)?;
                weighted(t, y)
            }),
        ),
        (
            "tanh".into(),
            vec![r(&[3, 5])],
            Box::new(|t, x| {
                let y = t.tanh(x[0]);
                weighted(t, y)
            }),
        ),
        (
            "sigmoid".into(),
            vec![r(&[3, 5])],
            Box::new(|t, x| {
                let y = t.sigmoid(x[0]);
                weighted(t, y)
            }),
        ),
        (
            "softmax_rows".into(),
            vec![r(&[2, 3, 5])],
            Box::new(|t, x| {
                let y = t.softmax_rows(x[0]);
                weighted(t, y)
            }),
        ),
        (
            "concat".into(),
            vec![r(&[3, 2]), r(&[3, 4])],
            Box::new(|t, x| {
                let y = t.concat(&[x[0], x[1]])?;
                weighted(t, y)
            }),
        ),
        (
            "add broadcast".into(),
            vec![r(&[2, 3, 4]), r(&[4])],
            Box::new(|t, x| {
                let y = t.add(x[0], x[1])?;
                weighted(t, y)
            }),
        ),
        (
            "sub broadcast".into(),
            vec![r(&[2, 3, 4]), r(&[3, 4])],
            Box::new(|t, x| {
                let y = t.sub(x[0], x[1])?;
                weighted(t, y)
            }),
        ),
        (
            "mul broadcast".into(),
            vec![r(&[2, 3, 4]), r(&[1])],
            Box::new(|t, x| {
                let y = t.mul(x[0], x[1])?;
                weighted(t, y)
            }),
        ),
        (
            "scale".into(),
            vec![r(&[3, 4])],
            Box::new(|t, x| {
                let y = t.scale(x[0], -1.7);
                weighted(t, y)
            }),
        ),
        (
            "dropout train".into(),
            vec![r(&[4, 6])],
            Box::new(|t, x| {
                let y = t.dropout(x[0], 0.3, 9, Mode::Train)?;
                weighted(t, y)
            }),
        ),
        (
            "reshape".into(),
            vec![r(&[2, 6])],
            Box::new(|t, x| {
                let y = t.reshape(x[0], &[3, 4])?;
                weighted(t, y)
            }),
        ),
        (
            "select_last".into(),
            vec![r(&[3, 6])],
            Box::new(|t, x| {
                let y = t.select_last(x[0], &[5, 0, 2, 2])?;
                weighted(t, y)
            }),
        ),
        (
            "slice_last".into(),
            vec![r(&[3, 6])],
            Box::new(|t, x| {
                let y = t.slice_last(x[0], 1, 4)?;
                weighted(t, y)
            }),
        ),
        (
            "mean".into(),
            vec![r(&[3, 6])],
            Box::new(|t, x| {
                let y = t.tanh(x[0]);
                Ok(t.mean(y))
            }),
        ),
        (
            "mse".into(),
            vec![r(&[4, 3]), r(&[4, 3])],
            Box::new(|t, x| t.mse(x[0], x[1])),
        ),
    ];
    let eval_running = running.clone();
    cases.push((
        "batch_norm eval".into(),
        vec![r(&[3, 4, 6]), r(&[4]), r(&[4])],
        Box::new(move |t, x| {
            let (y, _) = t.batch_norm(x[0], x[1], x[2], &eval_running, Mode::Eval)?;
            weighted(t, y)
        }),
    ));
    for (s, d) in [(3, 1), (5, 1), (3, 2), (5, 2), (12, 1)] {
        cases.push((
            format!("conv1d s={s} d={d}"),
            vec![r(&[3, 12]), r(&[4, s])],
            Box::new(move |t, x| {
                let y = t.conv1d(x[0], x[1], d)?;
                weighted(t, y)
            }),
        ));
    }

    let mut worst = (0.0, String::new());
    for (name, inputs, f) in &cases {
        let e = grad_error(inputs, f.as_ref());
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name.clone());
        }
    }

    // full training loss, every parameter group
    let model = scrambled(toy(), 30);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let batch = 2;
    let inputs = uniform(batch * 36, &mut rng);
    let target = uniform(batch * 3, &mut rng);
    let mut tape = ComputeTape::new();
    let out = model.forward(&mut tape, &inputs, batch, Mode::Train, 77, true).unwrap();
    let t = tape.constant(DiffArray::new(&[batch, 3], target.clone()).unwrap());
    let loss = tape.mse(out.pred, t).unwrap();
    tape.backward(loss).unwrap();
    let mut groups = 0;
    for (name, id) in &out.leaves {
        let analytic = tape.grad(*id).unwrap().to_vec();
        let base = model.params.get(name).unwrap().values().to_vec();
        let numeric = numeric_grad(
            |v| {
                let mut probe = model.clone();
                probe.params.get_mut(name).unwrap().values_mut().copy_from_slice(v);
                train_loss(&probe, &inputs, &target, batch, 77)
            },
            &base,
            FD_STEP,
        );
        let e = relative_error(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, format!("loss wrt {name}"));
        }
        groups += 1;
    }
    let elapsed = start.elapsed();
    check(
        worst.0 < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{} op checks + {groups} parameter groups; worst relative error {:.2e} ({}), tol {GRAD_TOL:e}; {:.1}s of {}s",
            cases.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

// ------------------------------------------------------------ 2

fn brute_conv(x: &[f64], rows: usize, t: usize, k: &[f64], filters: usize, s: usize, d: usize) -> Vec<f64> {
    let out_len = t + 1 - (d * (s - 1) + 1);
    let mut y = Vec::new();
    for r in 0..rows {
        for f in 0..filters {
            for o in 0..out_len {
                let mut acc = 0.0;
                for i in 0..s {
                    acc += x[r * t + o + d * i] * k[f * s + i];
                }
                y.push(acc);
            }
        }
    }
    y
}

fn brute_pool(x: &[f64], len: usize, pool: usize) -> Vec<f64> {
    let mut y = Vec::new();
    for row in x.chunks(len) {
        for i in 0..pool {
            let mut best = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                let lo = (i as f64 * len as f64 / pool as f64).floor() as usize;
                let hi = ((i + 1) as f64 * len as f64 / pool as f64).floor() as usize;
                if (lo..hi).contains(&j) && v > best {
                    best = v;
                }
            }
            y.push(best);
        }
    }
    y
}

fn brute_softmax(x: &[f64], width: usize) -> Vec<f64> {
    let mut y = Vec::new();
    for row in x.chunks(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        y.extend(e.iter().map(|v| v / z));
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut conv, mut pool, mut soft) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..ORACLE_TRIALS {
        let rows = rng.random_range(1..=3);
        let filters = rng.random_range(1..=3);
        let t = rng.random_range(12..=24);
        let x = random(&[rows, t], &mut rng);
        for (s, d) in [(3, 1), (5, 1), (3, 2), (5, 2), (t, 1)] {
            let k = random(&[filters, s], &mut rng);
            let mut tape = ComputeTape::new();
            let (xi, ki) = (tape.constant(x.clone()), tape.constant(k.clone()));
            let y = tape.conv1d(xi, ki, d).unwrap();
            let want = brute_conv(x.values(), rows, t, k.values(), filters, s, d);
            conv = conv.max(max_diff(tape.value(y).values(), &want));
        }

        let p = rng.random_range(1..=6);
        let len = rng.random_range(p..=30);
        let xp = random(&[rows, filters, len], &mut rng);
        let mut tape = ComputeTape::new();
        let xi = tape.constant(xp.clone());
        let y = tape.adaptive_max_pool(xi, p).unwrap();
        pool = pool.max(max_diff(tape.value(y).values(), &brute_pool(xp.values(), len, p)));

        let width = rng.random_range(1..=8);
        let xs: Vec<f64> = (0..rows * width).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut tape = ComputeTape::new();
        let xi = tape.constant(DiffArray::new(&[rows, width], xs.clone()).unwrap());
        let y = tape.softmax_rows(xi);
        soft = soft.max(max_diff(tape.value(y).values(), &brute_softmax(&xs, width)));
    }
    check(
        conv <= ORACLE_TOL && pool <= ORACLE_TOL && soft <= ORACLE_TOL,
        format!(
            "{ORACLE_TRIALS} random inputs; max |diff| conv1d {conv:.1e} (5 kernel/dilation pairs), pool {pool:.1e}, softmax {soft:.1e}; tol {ORACLE_TOL:e}"
        ),
    )
}

// ------------------------------------------------------------ 3

fn architecture_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();

    // attention rows
    let mut worst_row: f64 = 0.0;
    for (config, batch) in [(toy(), 4), (SefnetConfig::small(5, 20, 3), 3)] {
        let model = scrambled(config.clone(), 40);
        let inputs = uniform(batch * config.regions * config.window, &mut rng);
        let mut tape = ComputeTape::new();
        let out = model.forward(&mut tape, &inputs, batch, Mode::Eval, 0, false).unwrap();
        let att = tape.value(out.attention.unwrap());
        for row in att.values().chunks(config.regions) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst_row > ATTENTION_TOL {
        problems.push(format!("attention row sum off by {worst_row:e}"));
    }

    // no-fusion against unit gates
    let mut full = scrambled(toy(), 18);
    for name in ["fusion.w_inter", "fusion.w_intra"] {
        full.params.get_mut(name).unwrap().values_mut().fill(1.0);
    }
    let mut params = SefnetParams::default();
    for (name, arr) in full.params.iter().filter(|(n, _)| !n.starts_with("fusion.")) {
        params.insert(name.to_string(), arr.clone());
    }
    let plain = Sefnet::from_parts(toy().with_variant(Variant::NoFusion), params, full.bn_running.clone()).unwrap();
    let x = uniform(36 * 5, &mut rng);
    let a = full.predict(&x, 5).unwrap();
    let b = plain.predict(&x, 5).unwrap();
    let identical = a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits());
    if !identical {
        problems.push("no-fusion differs from unit fusion gates".into());
    }

    // feature width over the full sweep
    let base = RunConfig::new(SefnetConfig::small(5, 20, 3), 0);
    let configs = Grid::full().expand(&base);
    let mut measured = std::collections::BTreeMap::new();
    for c in &configs {
        let m = &c.model;
        let expected = 4 * m.pool * m.filters + m.filters;
        if m.feature_width() != expected {
            problems.push(format!("declared width {} != {expected}", m.feature_width()));
            break;
        }
        let actual = measured
            .entry((m.filters, m.pool))
            .or_insert_with(|| {
                let model = Sefnet::new(m.clone(), 0).unwrap();
                let inputs = vec![0.5; 2 * m.regions * m.window];
                let mut tape = ComputeTape::new();
                let out = model.forward(&mut tape, &inputs, 2, Mode::Eval, 0, false).unwrap();
                tape.shape(out.h_dev.unwrap()).to_vec()
            })
            .clone();
        if actual != [2 * m.regions, expected] {
            problems.push(format!("h_dev shape {actual:?}, want width {expected}"));
            break;
        }
    }
    let detail = format!(
        "max |row sum − 1| {worst_row:.1e}; no-fusion bit-identical: {identical}; width 4PK+K holds for {} grid points ({} shapes measured)",
        configs.len(),
        measured.len()
    );
    if problems.is_empty() {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(format!("{detail}; {}", problems.join("; ")))
    }
}

// ------------------------------------------------------------ 4, 5

struct SmokeRun {
    seed: u64,
    rmse: f64,
    persistence: f64,
    ar: f64,
}

fn smoke_config(variant: Variant, seed: u64) -> RunConfig {
    RunConfig::new(SefnetConfig::small(5, 20, 3).with_variant(variant), seed)
}

fn smoke_series(seed: u64) -> EpidemicSeries {
    CoupledSinusoids {
        seed,
        ..Default::default()
    }
    .generate()
    .unwrap()
}

/// Full model with baselines on each seed, and the time it took.
fn smoke_runs() -> &'static (Vec<SmokeRun>, Duration) {
    static RUNS: OnceLock<(Vec<SmokeRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = SMOKE_SEEDS
            .iter()
            .map(|&seed| {
                let out =
                    run_experiment(&smoke_series(seed), &smoke_config(Variant::None, seed), None, true, 1).unwrap();
                let b = out.report.baselines.unwrap();
                SmokeRun {
                    seed,
                    rmse: out.report.test.rmse,
                    persistence: b.persistence.rmse,
                    ar: b.ar.rmse,
                }
            })
            .collect();
        (runs, start.elapsed())
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn learning_smoke() -> Verdict {
    let (runs, elapsed) = smoke_runs();
    let model = median(runs.iter().map(|r| r.rmse).collect());
    let persistence = median(runs.iter().map(|r| r.persistence).collect());
    let ar = median(runs.iter().map(|r| r.ar).collect());
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:.4}/{:.4}/{:.4}", r.seed, r.rmse, r.persistence, r.ar))
        .collect();
    let gain = 1.0 - model / persistence;
    check(
        gain >= PERSISTENCE_MARGIN && model < ar && *elapsed < SMOKE_BUDGET,
        format!(
            "median test rmse model {model:.4}, persistence {persistence:.4} ({:.0}% better, need {:.0}%), AR {ar:.4}; [{}]; {:.0}s of {}s",
            gain * 100.0,
            PERSISTENCE_MARGIN * 100.0,
            per_seed.join(", "),
            elapsed.as_secs_f64(),
            SMOKE_BUDGET.as_secs()
        ),
    )
}

fn ablation_direction() -> Verdict {
    let (runs, _) = smoke_runs();
    let full = median(runs.iter().map(|r| r.rmse).collect());
    let no_inter: Vec<f64> = SMOKE_SEEDS
        .iter()
        .map(|&seed| {
            run_experiment(
                &smoke_series(seed),
                &smoke_config(Variant::NoInter, seed),
                None,
                false,
                1,
            )
            .unwrap()
            .report
            .test
            .rmse
        })
        .collect();
    let detail = format!(
        "no-inter per seed {:?}",
        no_inter.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
    );
    let ablated = median(no_inter);
    check(
        ablated > full,
        format!("median test rmse no-inter {ablated:.4} vs full {full:.4}; {detail}"),
    )
}

// ------------------------------------------------------------ 6

fn baseline_correctness() -> Verdict {
    let len = 100;
    let mut x = vec![100.0];
    for t in 1..len {
        x.push(0.9 * x[t - 1]);
    }
    let series = EpidemicSeries::from_rows(vec![x]).unwrap();
    let bounds = SplitSpec::default().bounds(len).unwrap();
    let ar = fit_ar(&series, 1, 1, &bounds).unwrap();
    let coef_err = (ar.coefficients[0][0] - 0.9).abs();

    let len = 200;
    let driver = |t: f64| 5.0 + (t * 0.37).sin() + 0.5 * (t * 0.11).cos();
    let x1: Vec<f64> = (0..len).map(|t| driver(t as f64)).collect();
    let x2: Vec<f64> = (0..len).map(|t| driver(t as f64 - 2.0)).collect();
    let pair = EpidemicSeries::from_rows(vec![x1, x2]).unwrap();
    let bounds = SplitSpec::default().bounds(len).unwrap();
    let mut worst: f64 = 0.0;
    for q in [2, 3, 4] {
        let w = make_windows(&pair, q, 2, &bounds).unwrap();
        // from q = 3 on the lags of both regions overlap, so a little ridge is needed
        let model = fit_lridge_samples(&w.train, 2, q, LRIDGE_LAMBDA).unwrap();
        let pred = model.forecast(&w.test).unwrap();
        let sq: f64 = pred
            .iter()
            .zip(&w.test)
            .map(|(p, s)| (p[1] - s.target[1]).powi(2))
            .sum();
        worst = worst.max((sq / w.test.len() as f64).sqrt());
    }
    check(
        coef_err <= BASELINE_TOL && worst < BASELINE_TOL,
        format!(
            "AR(1) coefficient error {coef_err:.1e}; LRidge region-2 test rmse on the lag-2 pair, worst over q=2..4 at lambda {LRIDGE_LAMBDA:e}, {worst:.1e}; tol {BASELINE_TOL:e}"
        ),
    )
}

// ------------------------------------------------------------ 7

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn us_regions_csv() -> Option<PathBuf> {
    let path = std::env::var_os("EPIFORECAST_US_REGIONS_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/us_regions.csv"));
    path.is_file().then_some(path)
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_epiforecast"))
        .args(args)
        .env_remove("EPIFORECAST_SEED")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn protocol_reproduction() -> Verdict {
    let Some(csv) = us_regions_csv() else {
        return Verdict::Unavailable(
            "US-Regions CSV not found (set EPIFORECAST_US_REGIONS_CSV or add data/us_regions.csv)".into(),
        );
    };
    let dir = tempfile::tempdir().unwrap();
    // a slice of the full sweep that fits the time budget on one core
    let grid = Grid {
        lr: vec![0.005, 0.001],
        lstm_hidden: vec![32],
        attn_dim: vec![32],
        lstm_layers: vec![1],
        filters: vec![8, 16],
        pool: vec![3],
        ar_window: vec![20],
    };
    let grid_path = dir.path().join("grid.json");
    std::fs::write(&grid_path, serde_json::to_string(&grid).unwrap()).unwrap();
    let out = dir.path().join("run");
    let start = Instant::now();
    let result = cli(&[
        "train",
        "--data",
        csv.to_str().unwrap(),
        "--window",
        "20",
        "--horizon",
        "3",
        "--grid",
        grid_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let elapsed = start.elapsed();
    if !result.status.success() {
        return Verdict::Fail(format!(
            "train exited with {}: {}",
            result.status,
            String::from_utf8_lossy(&result.stderr)
        ));
    }
    let report = json(&out.join("report.json"));
    let model = report["test"]["rmse"].as_f64().unwrap();
    let lridge = report["baselines"]["lridge"]["rmse"].as_f64().unwrap();
    check(
        model < lridge && elapsed < PROTOCOL_BUDGET,
        format!(
            "test rmse model {model:.1} vs LRidge {lridge:.1}; {} grid points in {:.0}s of {}s",
            grid.expand(&RunConfig::new(SefnetConfig::small(10, 20, 3), 0)).len(),
            elapsed.as_secs_f64(),
            PROTOCOL_BUDGET.as_secs()
        ),
    )
}

// ------------------------------------------------------------ 8

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let data = p("synth.csv");
    let run = |args: &[&str]| {
        let o = cli(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    run(&[
        "synth",
        "--output",
        &data,
        "--regions",
        "4",
        "--len",
        "160",
        "--seed",
        "3",
    ]);

    let mut compared = 0;
    let mut mismatched = Vec::new();
    let mut compare = |label: &str, a: &[u8], b: &[u8]| {
        compared += 1;
        if a != b || a.is_empty() {
            mismatched.push(label.to_string());
        }
    };

    let train_args = |out: &str| {
        vec![
            "train".to_string(),
            "--data".into(),
            data.clone(),
            "--seed".into(),
            "11".into(),
            "--window".into(),
            "12".into(),
            "--max-epochs".into(),
            "6".into(),
            "--out".into(),
            out.to_string(),
        ]
    };
    let (a, b) = (p("train-a"), p("train-b"));
    for out in [&a, &b] {
        let args = train_args(out);
        run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for file in ["report.json", "checkpoint.json"] {
        let read = |d: &str| std::fs::read(Path::new(d).join(file)).unwrap();
        compare(&format!("train {file}"), &read(&a), &read(&b));
    }

    // the recorded config replays the run
    let replay = p("train-replay");
    run(&[
        "train",
        "--config",
        &format!("{a}/effective-config.json"),
        "--out",
        &replay,
    ]);
    compare(
        "replayed report.json",
        &std::fs::read(format!("{a}/report.json")).unwrap(),
        &std::fs::read(format!("{replay}/report.json")).unwrap(),
    );

    let ck = format!("{a}/checkpoint.json");
    let e1 = run(&["evaluate", "--checkpoint", &ck, "--data", &data, "--baselines"]);
    let e2 = run(&["evaluate", "--checkpoint", &ck, "--data", &data, "--baselines"]);
    compare("evaluate json", &e1, &e2);

    let f1 = run(&["predict", "--checkpoint", &ck, "--data", &data]);
    let f2 = run(&["predict", "--checkpoint", &ck, "--data", &data]);
    compare("predict json", &f1, &f2);

    let (x, y) = (p("ablate-a"), p("ablate-b"));
    for out in [&x, &y] {
        run(&[
            "ablate",
            "--data",
            &data,
            "--window",
            "12",
            "--max-epochs",
            "3",
            "--variants",
            "none,no-inter",
            "--seeds",
            "0,1",
            "--jobs",
            "2",
            "--out",
            out,
        ]);
    }
    compare(
        "ablation.json",
        &std::fs::read(format!("{x}/ablation.json")).unwrap(),
        &std::fs::read(format!("{y}/ablation.json")).unwrap(),
    );

    let detail =
        format!("{compared} JSON outputs compared across repeated train, replay, evaluate, predict and ablate runs");
    if mismatched.is_empty() {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(format!("{detail}; differing: {}", mismatched.join(", ")))
    }
}
