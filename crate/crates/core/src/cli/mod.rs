//! Command-line front end: simulate, verify, calibrate and decompose.
//! Every output file carries the config hash and seed.

mod calibrate;
mod decompose;
mod simulate;
mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::config::RunConfig;
use crate::{Error, Result};

pub use calibrate::{cmd_calibrate, CalibrateSummary};
pub use decompose::cmd_decompose;
pub use simulate::{cmd_simulate, SimulateSummary};
pub use verify::{cmd_verify, duality_suite, time_consistency_suite, Fault, SuiteOutcome, VerifySummary};

#[derive(Debug, Parser)]
#[command(name = "duesenberry", version, about = "Heterogeneous-impatience equilibrium simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario; writes paths.csv, coefficients.csv and run.json.
    Simulate(RunArgs),
    /// Run the invariant suite; writes verification.json, exits 1 on failure.
    Verify(VerifyArgs),
    /// Recompute the long-run equity premium table and the short-rate calculations.
    Calibrate(CalibrateArgs),
    /// Per-step premium and short-rate decomposition of a simulated market.
    Decompose(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides ensemble.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Alternative table file (source, period, sigma, ep, printed columns).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    RateShift,
    KernelScale,
    WeightPerturb,
    DriftShift,
    GainShock,
    TerminalScale,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::RateShift => Fault::RateShift,
            FaultArg::KernelScale => Fault::KernelScale,
            FaultArg::WeightPerturb => Fault::WeightPerturb,
            FaultArg::DriftShift => Fault::DriftShift,
            FaultArg::GainShock => Fault::GainShock,
            FaultArg::TerminalScale => Fault::TerminalScale,
        }
    }
}

fn load(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(s) = args.seed {
        cfg.ensemble.seed = s;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

/// Dispatch; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Simulate(a) => {
            let (cfg, out) = load(&a)?;
            cmd_simulate(&cfg, &out)?;
            Ok(0)
        }
        Command::Verify(a) => {
            let (cfg, out) = load(&a.run)?;
            let s = cmd_verify(&cfg, &out, a.inject_fault.map(Fault::from))?;
            for suite in &s.suites {
                eprintln!("{:<18} {}", suite.name, if !suite.applicable { "n/a" } else if suite.pass { "pass" } else { "FAIL" });
            }
            Ok(if s.pass { 0 } else { 1 })
        }
        Command::Calibrate(a) => {
            let text = match &a.data {
                Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let s = cmd_calibrate(&a.out, text.as_deref())?;
            Ok(if s.pass { 0 } else { 1 })
        }
        Command::Decompose(a) => {
            let (cfg, out) = load(&a)?;
            cmd_decompose(&cfg, &out)?;
            Ok(0)
        }
    }
}

/// Writes CSV and JSON files stamped with the config hash and seed.
pub(crate) struct OutputDir {
    dir: PathBuf,
    hash: String,
    seed: String,
}

impl OutputDir {
    pub(crate) fn create(dir: &Path, hash: String, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash,
            seed: seed.map_or_else(|| "none".to_string(), |s| s.to_string()),
        })
    }

    pub(crate) fn csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut s = String::new();
        let _ = writeln!(s, "# config_hash={} seed={}", self.hash, self.seed);
        let _ = writeln!(s, "{}", header.join(","));
        for r in rows {
            let _ = writeln!(s, "{}", r.join(","));
        }
        self.write(name, s)
    }

    /// Top-level keys come out sorted (serde_json maps are ordered).
    pub(crate) fn json(&self, name: &str, mut value: Value) -> Result<PathBuf> {
        if let Some(m) = value.as_object_mut() {
            m.insert("config_hash".into(), Value::String(self.hash.clone()));
            m.insert("seed".into(), Value::String(self.seed.clone()));
        }
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        self.write(name, s)
    }

    fn write(&self, name: &str, contents: String) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Shortest round-trip decimal; "nan" for missing values.
pub(crate) fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "nan".into()
    }
}

pub(crate) fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}
