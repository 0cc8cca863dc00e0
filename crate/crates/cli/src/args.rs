use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug, Clone, Serialize, Deserialize)]
#[command(name = "stpad", version, about = "Stochastic traffic padding simulator")]
pub struct Cli {
    /// Base seed for every random stream. A fresh one is drawn and recorded
    /// in the manifest when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for all outputs.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Synthesize a device trace from a profile.
    Generate(GenerateArgs),
    /// Apply a defense to one or more traces.
    Shape(ShapeArgs),
    /// Run the rate-threshold activity inference attack.
    Attack(AttackArgs),
    /// Confidence/overhead tradeoff over a grid of q.
    Sweep(SweepArgs),
    /// Identify a device from contacted domains.
    Fingerprint(FingerprintArgs),
    /// Write a device profile, built in or extracted from a labelled trace.
    Profile(ProfileArgs),
    /// Re-run a command from its manifest and compare outputs.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Profile JSON, or builtin:wemo | builtin:nest-cam | builtin:echo.
    #[arg(long)]
    pub profile: String,
    /// Activity probability per decision tick.
    #[arg(long, value_parser = parse_prob)]
    pub p: f64,
    #[arg(long, value_parser = parse_duration)]
    pub duration: u64,
    #[arg(long, value_parser = parse_duration, default_value = "1s")]
    pub tick: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Defense {
    Stp,
    Ilp,
    Firewall,
    Vpn,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Oracle,
    Threshold,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ShapeArgs {
    /// Input trace CSV; repeat for vpn.
    #[arg(long, required = true)]
    pub trace: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub defense: Defense,
    /// Non-activity padding probability (stp).
    #[arg(long, value_parser = parse_prob, default_value_t = 0.0)]
    pub q: f64,
    /// Period length; defaults to one second longer than the longest label.
    #[arg(long = "T", value_parser = parse_duration)]
    pub period: Option<u64>,
    /// Upload pattern rate in bytes/s; defaults to the peak labelled rate.
    #[arg(long)]
    pub rate_up: Option<u64>,
    #[arg(long)]
    pub rate_down: Option<u64>,
    #[arg(long, value_enum, default_value_t = DetectorKind::Oracle)]
    pub detector: DetectorKind,
    /// Threshold detector sensitivity (mean + k sd).
    #[arg(long, default_value_t = 3.0)]
    pub k: f64,
    #[arg(long, default_value_t = stpad_core::shaping::DEFAULT_COVER_PACKET)]
    pub cover_packet: u64,
    /// Decision HMM JSON replacing Bernoulli(q).
    #[arg(long)]
    pub hmm: Option<PathBuf>,
    /// Per-packet tunnel overhead in bytes (vpn).
    #[arg(long, default_value_t = 0)]
    pub encapsulation: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// schedule.json written by `shape`; enables confidence scoring.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub k: f64,
    #[arg(long, value_parser = parse_duration, default_value = "1s")]
    pub bin: u64,
    #[arg(long, value_parser = parse_duration, default_value = "2s")]
    pub gap: u64,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Closed-form curve only; needs --rt, --da and --dna.
    #[arg(long)]
    pub analytic: bool,
    #[arg(long, required_unless_present = "analytic")]
    pub profile: Option<String>,
    #[arg(long, value_parser = parse_prob)]
    pub p: f64,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long, default_value = "0:1:0.01")]
    pub q_grid: String,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    #[arg(long, value_parser = parse_duration, default_value = "10000s")]
    pub duration: u64,
    #[arg(long, value_parser = parse_duration, default_value = "1s")]
    pub tick: u64,
    #[arg(long = "T", value_parser = parse_duration)]
    pub period: Option<u64>,
    #[arg(long)]
    pub rate_up: Option<u64>,
    #[arg(long)]
    pub rate_down: Option<u64>,
    /// Worker threads for grid points.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long, required_if_eq("analytic", "true"))]
    pub rt: Option<f64>,
    #[arg(long, required_if_eq("analytic", "true"))]
    pub da: Option<f64>,
    #[arg(long, required_if_eq("analytic", "true"))]
    pub dna: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct FingerprintArgs {
    /// Observed domains, one per line.
    #[arg(long, required_unless_present = "trace", conflicts_with = "trace")]
    pub domains: Option<PathBuf>,
    /// Trace whose flow ids are read as domains.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Fingerprint database JSON; defaults to the built-in identifying
    /// queries.
    #[arg(long)]
    pub db: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// builtin:NAME to export.
    #[arg(long, required_unless_present = "from_trace", conflicts_with = "from_trace")]
    pub builtin: Option<String>,
    /// Labelled trace to extract segments from.
    #[arg(long)]
    pub from_trace: Option<PathBuf>,
    #[arg(long, default_value = "device")]
    pub name: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Parses `10s`, `250ms`, `1500us` into microseconds. A bare number is
/// rejected so units are never guessed.
pub fn parse_duration(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, scale) = if let Some(n) = s.strip_suffix("us") {
        (n, 1.0)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, 1e3)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, 1e6)
    } else {
        return Err(format!("`{s}` needs a unit suffix (s, ms, us)"));
    };
    let v: f64 = num.trim().parse().map_err(|_| format!("`{s}` is not a duration"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("`{s}` must be a non-negative duration"));
    }
    let us = v * scale;
    if us.fract() != 0.0 {
        return Err(format!("`{s}` is finer than one microsecond"));
    }
    Ok(us as u64)
}

pub fn parse_prob(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("{v} is outside [0, 1]"));
    }
    Ok(v)
}

/// `start:stop:step` or `a,b,c`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("q grid is empty".into());
    }
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, c] = parts.as_slice() else {
            return Err(format!("`{s}` is not start:stop:step"));
        };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("`{x}` is not a number"));
        return stpad_core::metrics::q_grid(num(a)?, num(b)?, num(c)?).map_err(|e| e.to_string());
    }
    s.split(',').map(parse_prob).collect()
}
