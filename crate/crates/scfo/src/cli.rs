//! Command-line front end for scenario runs.
//!
//! `scfo run <config> [--seed N] [--iters N] [--out DIR] [--sweep key=a..b]`
//!
//! Each run writes `trajectory_<seed>.csv` and a `summary.json`. The
//! environment variable `SCFO_OUT_DIR` overrides the output directory.
//! Exit status is 0 on success, 1 for invalid input and 2 for I/O failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::core::{ScfoError, ValidationIssue};
use crate::simharness::{run_scenario, RunOutcome, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const OUT_DIR_ENV: &str = "SCFO_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "scfo", about = "Run closed-loop scenarios of the safe optimizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario described by a JSON file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// `seed=a..b` or `iters=a..b`, both ends included.
        #[arg(long)]
        sweep: Option<String>,
    },
}

/// Parameter swept over an inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Seed(u64, u64),
    Iters(u64, u64),
}

pub fn parse_sweep(s: &str) -> Result<Sweep, ValidationIssue> {
    let bad = |m: &str| ValidationIssue::new("sweep", m.to_string());
    let (key, range) = s.split_once('=').ok_or_else(|| bad("expected key=a..b"))?;
    let (a, b) = range.split_once("..").ok_or_else(|| bad("expected a range a..b"))?;
    let a: u64 = a.trim().parse().map_err(|_| bad("range start is not an integer"))?;
    let b: u64 = b.trim().parse().map_err(|_| bad("range end is not an integer"))?;
    if a > b {
        return Err(bad("range start exceeds its end"));
    }
    match key.trim() {
        "seed" => Ok(Sweep::Seed(a, b)),
        "iters" => Ok(Sweep::Iters(a, b)),
        other => Err(bad(&format!("unknown sweep key '{other}', expected seed or iters"))),
    }
}

/// Error reported by the front end, mapped to an exit status.
#[derive(Debug)]
pub enum CliError {
    Invalid(Vec<ValidationIssue>),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Io(_) => EXIT_IO,
        }
    }

    /// JSON document printed on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            kind: &'a str,
            errors: Vec<ValidationIssue>,
        }
        let doc = match self {
            CliError::Invalid(e) => Doc { kind: "validation", errors: e.clone() },
            CliError::Io(m) => Doc { kind: "io", errors: vec![ValidationIssue::new("io", m.clone())] },
        };
        serde_json::to_string_pretty(&doc).expect("serializable")
    }
}

impl From<ScfoError> for CliError {
    fn from(e: ScfoError) -> Self {
        match e {
            ScfoError::Invalid(v) => CliError::Invalid(v.0),
            other => CliError::Invalid(vec![ValidationIssue::new("run", other.to_string())]),
        }
    }
}

/// Reads and validates a scenario file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(vec![ValidationIssue::new("config", format!("line {} column {}: {e}", e.line(), e.column()))])
    })?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Invalid(issues))
    }
}

/// `{:.16e}` keeps 17 significant digits, enough to round-trip an `f64`.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Trajectory as CSV text.
pub fn trajectory_csv(run: &RunOutcome) -> String {
    let mut s = String::new();
    let Some(first) = run.rows.first() else { return s };
    let mut header = vec!["k".to_string(), "tau".to_string()];
    header.extend((1..=first.u.len()).map(|i| format!("u{i}")));
    header.push("cost_true".into());
    header.push("cost_measured".into());
    header.extend((1..=first.g_true.len()).map(|j| format!("gp{j}")));
    header.extend((1..=first.g_numerical.len()).map(|j| format!("g{j}")));
    header.extend((1..=first.slacks.len()).map(|j| format!("d{j}")));
    header.extend(["gain", "k_star", "scenario"].map(String::from));
    s.push_str(&header.join(","));
    s.push('\n');
    for r in &run.rows {
        let mut cells = vec![r.k.to_string(), num(r.tau)];
        cells.extend(r.u.iter().map(|x| num(*x)));
        cells.push(num(r.cost_true));
        cells.push(num(r.cost_measured));
        cells.extend(r.g_true.iter().chain(&r.g_numerical).chain(&r.slacks).map(|x| num(*x)));
        cells.push(num(r.gain));
        cells.push(r.k_star.to_string());
        cells.push(r.scenario.clone());
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Executes `run` and returns the output directory.
pub fn run_command(
    config: &Path,
    seed: Option<u64>,
    iters: Option<usize>,
    out: &Path,
    sweep: Option<&str>,
) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(config)?;
    let sweep = sweep.map(parse_sweep).transpose().map_err(|e| CliError::Invalid(vec![e]))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iters {
        cfg.iterations = n;
    }
    let out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| out.to_path_buf());
    let runs: Vec<(PathBuf, ScenarioConfig)> = match sweep {
        None => vec![(out.clone(), cfg)],
        Some(Sweep::Seed(a, b)) => (a..=b).map(|s| (out.clone(), ScenarioConfig { seed: s, ..cfg.clone() })).collect(),
        Some(Sweep::Iters(a, b)) => (a..=b)
            .map(|n| (out.join(format!("iters_{n}")), ScenarioConfig { iterations: n as usize, ..cfg.clone() }))
            .collect(),
    };
    for (_, c) in &runs {
        let issues = c.validate();
        if !issues.is_empty() {
            return Err(CliError::Invalid(issues));
        }
    }
    let mut summaries = Vec::new();
    for (dir, c) in &runs {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let run = run_scenario(c)?;
        write(&dir.join(format!("trajectory_{}.csv", c.seed)), &trajectory_csv(&run))?;
        summaries.push(run.summary);
    }
    let json = if summaries.len() == 1 {
        serde_json::to_string_pretty(&summaries[0])
    } else {
        serde_json::to_string_pretty(&summaries)
    }
    .expect("serializable");
    write(&out.join("summary.json"), &json)?;
    Ok(out)
}

/// Entry point shared by the binary and the tests. Returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run { config, seed, iters, out, sweep } => match run_command(&config, seed, iters, &out, sweep.as_deref()) {
            Ok(dir) => {
                println!("{}", dir.join("summary.json").display());
                EXIT_OK
            }
            Err(e) => {
                println!("{}", e.to_json());
                e.exit_code()
            }
        },
    }
}
