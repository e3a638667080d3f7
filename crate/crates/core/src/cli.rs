//! Command-line front end. Every command that produces artifacts writes them into a
//! fresh run directory `<out>/<command>-<hash12>-s<seed>-<n>` holding a `run.json`
//! manifest; existing directories are never reused.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::data::container::write_new;
use crate::data::manifest::{save_classification, save_dense};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::generator::save_generator;
use crate::harness::{self, Data, REPORT_FILE};
use crate::models::save_model;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const THREADS_ENV: &str = "MTLUE_THREADS";
pub const RUN_FILE: &str = "run.json";

#[derive(Parser, Debug)]
#[command(name = "mtlue", version, about = "Unlearnable examples for multi-task datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories (default: the config's output_dir, else `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic dataset and save it.
    GenData(Common),
    /// Train the configured victims on the configured (unmodified) dataset.
    Train(Common),
    /// Craft perturbations for the training split.
    Craft(Common),
    /// Craft, apply and mix perturbations; save the poisoned dataset.
    Poison(Common),
    /// Run the full experiment and write its report.
    Eval(Common),
    /// Finite-difference check of every operator and of the generator objective.
    Gradcheck(Common),
    /// Summarize a report (a report.json file or a run directory).
    Report { path: PathBuf },
}

/// Runs the CLI with `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let (name, common) = match cli.command {
        Command::Report { path } => {
            return match print_report(&path) {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_RUNTIME
                }
            };
        }
        Command::GenData(c) => ("gen-data", c),
        Command::Train(c) => ("train", c),
        Command::Craft(c) => ("craft", c),
        Command::Poison(c) => ("poison", c),
        Command::Eval(c) => ("eval", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    let cfg = match load_config(&common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match execute(name, &common, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::validation(THREADS_ENV, format!("expected a positive integer, got {v:?}")))?;
    // A pool may already exist when the CLI runs inside a test process; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Reads, overrides and validates the configuration.
fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    created_unix: u64,
    config: &'a ExperimentConfig,
}

/// Creates the next free run directory and writes its manifest.
pub fn create_run_dir(parent: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let hash = cfg.config_hash();
    let stem = format!("{command}-{}-s{}", &hash[..12], cfg.seed);
    let dir = (0..)
        .map(|n| parent.join(format!("{stem}-{n}")))
        .find_map(|d| match std::fs::create_dir(&d) {
            Ok(()) => Some(Ok(d)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => None,
            Err(e) => Some(Err(Error::io(&d, e))),
        })
        .expect("unbounded search")?;
    let m = RunManifest {
        command,
        config_hash: hash,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        created_unix: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config: &ExperimentConfig {
            output_dir: None,
            ..cfg.clone()
        },
    };
    write_new(&dir.join(RUN_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_new(path, serde_json::to_string_pretty(v)?.as_bytes())
}

fn execute(name: &str, common: &Common, cfg: &ExperimentConfig) -> Result<i32> {
    let parent = common.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
    let dir = create_run_dir(&parent, name, cfg)?;
    let hash = cfg.config_hash();
    let mut out = std::io::stdout().lock();
    let code = match name {
        "gen-data" => {
            match harness::load_data(cfg)? {
                Data::Classification { train, test } => save_classification(&dir, &train, &test, cfg.seed, &hash)?,
                Data::Dense { train, test } => save_dense(&dir, &train, &test, cfg.seed, &hash)?,
            };
            EXIT_OK
        }
        "train" => {
            let results = match harness::load_data(cfg)? {
                Data::Classification { train, test } => train_and_save(cfg, &train, &test, &dir)?,
                Data::Dense { train, test } => train_and_save(cfg, &train, &test, &dir)?,
            };
            write_json(&dir.join("metrics.json"), &results)?;
            for r in &results {
                writeln!(out, "{:<14} avg accuracy {}", r.victim, pct(r.metrics.avg_accuracy)).ok();
            }
            EXIT_OK
        }
        "craft" => {
            let info = match harness::load_data(cfg)? {
                Data::Classification { train, .. } => craft_and_save(cfg, &train, &dir)?,
                Data::Dense { train, .. } => craft_and_save(cfg, &train, &dir)?,
            };
            writeln!(out, "{} max |δ| {:.6}", info.method, info.max_abs_delta).ok();
            EXIT_OK
        }
        "poison" => {
            match harness::load_data(cfg)? {
                Data::Classification { train, test } => save_classification(&dir, &poison(cfg, &train)?, &test, cfg.seed, &hash)?,
                Data::Dense { train, test } => save_dense(&dir, &poison(cfg, &train)?, &test, cfg.seed, &hash)?,
            };
            EXIT_OK
        }
        "eval" => {
            let run_cfg = ExperimentConfig {
                output_dir: Some(dir.clone()),
                ..cfg.clone()
            };
            let report = harness::run_experiment(&run_cfg)?;
            write!(out, "{}", format_report(&serde_json::to_value(&report)?)).ok();
            EXIT_OK
        }
        "gradcheck" => {
            let reports = crate::gradcheck::full_suite(cfg.seed)?;
            for r in &reports {
                writeln!(out, "{:<32} {} max rel err {:.3e} over {} coords", r.name, if r.passed { "PASS" } else { "FAIL" }, r.max_rel_error, r.coordinates).ok();
            }
            write_json(&dir.join("gradcheck.json"), &reports)?;
            if reports.iter().all(|r| r.passed) {
                EXIT_OK
            } else {
                EXIT_RUNTIME
            }
        }
        _ => unreachable!("subcommands are fixed by the parser"),
    };
    writeln!(out, "run directory: {}", dir.display()).ok();
    Ok(code)
}

fn train_and_save<D: TaskData>(cfg: &ExperimentConfig, train: &D, test: &D, dir: &Path) -> Result<Vec<harness::VictimResult>> {
    let run = harness::train_victims(cfg, train, test, "as-configured")?;
    let hash = cfg.config_hash();
    for (r, m) in run.results.iter().zip(&run.models) {
        save_model(&dir.join("victims").join(&r.victim), m, r.strategy, cfg.seed, &hash)?;
    }
    Ok(run.results)
}

fn craft_and_save<D: TaskData>(cfg: &ExperimentConfig, train: &D, dir: &Path) -> Result<harness::AttackInfo> {
    let out = harness::craft(cfg, train)?;
    let hash = cfg.config_hash();
    if let Some(set) = &out.set {
        set.save(dir, "deltas", &hash)?;
    }
    if let Some(g) = &out.generator {
        save_generator(&dir.join("generator"), g, cfg.attack.lambda1, cfg.attack.lambda2, cfg.seed, &hash)?;
    }
    write_json(&dir.join("attack.json"), &out.info)?;
    Ok(out.info)
}

fn poison<D: TaskData>(cfg: &ExperimentConfig, train: &D) -> Result<D> {
    let out = harness::craft(cfg, train)?;
    let poisoned = match &out.set {
        Some(set) => crate::attacks::poison_dataset(train, set)?,
        None => train.clone(),
    };
    harness::mix_partial(train, &poisoned, cfg.mix_ratio, cfg.stage_seed("mix"))
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:6.2}%", 100.0 * v)
    } else {
        "     n/a".into()
    }
}

fn print_report(path: &Path) -> Result<()> {
    let file = if path.is_dir() { path.join(REPORT_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let v: Value = serde_json::from_str(&text)?;
    print!("{}", format_report(&v));
    Ok(())
}

fn score(task: &Value) -> String {
    let f = |k: &str| task.get(k).and_then(Value::as_f64);
    match (f("accuracy"), f("miou"), f("abs_err")) {
        (Some(a), _, _) => pct(a),
        (_, Some(m), _) => format!("{} mIoU {}", pct(f("pixel_accuracy").unwrap_or(f64::NAN)), pct(m)),
        (_, _, Some(a)) => format!("abs {a:.4} rel {:.4}", f("rel_err").unwrap_or(f64::NAN)),
        _ => "?".into(),
    }
}

fn victim_lines(s: &mut String, label: &str, victims: &[Value]) {
    for v in victims {
        let tasks: Vec<String> = v["tasks"].as_array().into_iter().flatten().filter_map(Value::as_u64).map(|t| format!("t{t}")).collect();
        let metrics: Vec<String> = v["metrics"]["tasks"].as_array().into_iter().flatten().map(score).collect();
        let avg = v["metrics"]["avg_accuracy"].as_f64().unwrap_or(f64::NAN);
        let cells: Vec<String> = tasks.iter().zip(&metrics).map(|(t, m)| format!("{t} {m}")).collect();
        s.push_str(&format!("  {label:<10} {:<14} avg {}  [{}]\n", v["victim"].as_str().unwrap_or("?"), pct(avg), cells.join(", ")));
    }
}

/// Human-readable summary of a report's JSON.
pub fn format_report(v: &Value) -> String {
    let mut s = String::new();
    let hash = v["config_hash"].as_str().unwrap_or("?");
    s.push_str(&format!(
        "config {} seed {} method {} mix {}/{}\n",
        &hash[..hash.len().min(12)],
        v["seed"],
        v["attack"]["method"].as_str().unwrap_or("?"),
        v["mix"]["poisoned_samples"],
        v["mix"]["total_samples"],
    ));
    if let Some(d) = v["attack"]["max_abs_delta"].as_f64() {
        s.push_str(&format!("max |δ| {d:.6}\n"));
    }
    victim_lines(&mut s, "poisoned", v["victims"].as_array().map_or(&[][..], |a| a));
    victim_lines(&mut s, "clean", v["clean_baseline"].as_array().map_or(&[][..], |a| a));
    for d in v["defenses"].as_array().into_iter().flatten() {
        victim_lines(&mut s, d["defense"].as_str().unwrap_or("?"), d["victims"].as_array().map_or(&[][..], |a| a));
    }
    if let (Some(a), Some(m)) = (v["intra_class_std"]["avg"].as_f64(), v["intra_class_std"]["max"].as_f64()) {
        s.push_str(&format!("intra-class relative std: avg {a:.4} max {m:.4}\n"));
    }
    if let Some(w) = v["wall_clock_secs"].as_f64() {
        s.push_str(&format!("wall clock {w:.1}s\n"));
    }
    s
}

