mod args;
mod manifest;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use serde::Serialize;
use serde_json::json;

use stpad_core::adversary::{self, ThresholdDetector};
use stpad_core::decision::{ActivityHmm, DecisionSpec};
use stpad_core::generator::{self, DeviceProfile, GeneratorConfig};
use stpad_core::metrics::{self, AnalyticParams, PointKind, SweepConfig, SweepResult};
use stpad_core::shaping::{self, ActivityDetector, PaddingSchedule, ShapedResult, ShapingConfig};
use stpad_core::trace::{self, Trace};
use stpad_core::{profiles, Error as CoreError};

use args::*;
use manifest::{Artifacts, RunManifest};

/// Bad arguments caught after parsing; exits with status 2 like clap's own
/// usage errors.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::InvalidParameter(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run_top(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_top(cli: Cli) -> Result<()> {
    if let Command::Rerun(r) = &cli.command {
        return rerun(&r.manifest, cli.out_dir.clone());
    }
    let out_dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    execute(cli, &out_dir).map(|_| ())
}

fn fresh_seed() -> u64 {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    stpad_core::seed::splitmix64(nanos ^ std::process::id() as u64)
}

/// Runs one command, writes its outputs and manifest into `out_dir`.
fn execute(mut cli: Cli, out_dir: &Path) -> Result<RunManifest> {
    let base_seed = *cli.seed.get_or_insert_with(|| {
        let s = fresh_seed();
        log::info!("no --seed given, using {s}");
        s
    });
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut art = Artifacts::default();
    let format = cli.format;
    let name = match &cli.command {
        Command::Generate(a) => {
            cmd_generate(a, base_seed, out_dir, &mut art)?;
            "generate"
        }
        Command::Shape(a) => {
            cmd_shape(a, base_seed, out_dir, &mut art)?;
            "shape"
        }
        Command::Attack(a) => {
            cmd_attack(a, out_dir, &mut art)?;
            "attack"
        }
        Command::Sweep(a) => {
            cmd_sweep(a, base_seed, format, out_dir, &mut art)?;
            "sweep"
        }
        Command::Fingerprint(a) => {
            cmd_fingerprint(a, format, out_dir, &mut art)?;
            "fingerprint"
        }
        Command::Profile(a) => {
            cmd_profile(a, out_dir, &mut art)?;
            "profile"
        }
        Command::Rerun(_) => bail!("rerun cannot be nested"),
    };
    let m = RunManifest {
        command: name.to_string(),
        config: art.config.clone(),
        base_seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: manifest::digest_inputs(&art.inputs)?,
        outputs: manifest::digest_outputs(out_dir, &art.outputs)?,
        cli,
    };
    manifest::write(out_dir, &m)?;
    Ok(m)
}

fn rerun(path: &Path, out_dir: Option<PathBuf>) -> Result<()> {
    let old = manifest::read(path)?;
    for (input, digest) in &old.inputs {
        let now = manifest::sha256_file(Path::new(input))?;
        if &now != digest {
            bail!("input {input} changed since the recorded run");
        }
    }
    let out_dir = out_dir.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).join("rerun"));
    let mut cli = old.cli.clone();
    cli.seed = Some(old.base_seed);
    let new = execute(cli, &out_dir)?;
    let mut differing = Vec::new();
    for (name, digest) in &old.outputs {
        if new.outputs.get(name) != Some(digest) {
            differing.push(name.clone());
        }
    }
    if new.outputs.len() != old.outputs.len() {
        differing.push("<output file set>".into());
    }
    if !differing.is_empty() {
        bail!("rerun outputs differ: {}", differing.join(", "));
    }
    println!("rerun identical: {} output files in {}", new.outputs.len(), out_dir.display());
    Ok(())
}

fn load_profile(spec: &str, art: &mut Artifacts) -> Result<DeviceProfile> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return profiles::builtin(name).ok_or_else(|| {
            usage(format!(
                "unknown built-in profile `{name}` (choose from {})",
                profiles::BUILTIN_NAMES.join(", ")
            ))
        });
    }
    let path = Path::new(spec);
    art.input(path);
    Ok(DeviceProfile::load(path)?)
}

fn load_trace_input(path: &Path, art: &mut Artifacts) -> Result<Trace> {
    art.trace_input(path);
    Ok(trace::load_trace(path)?)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, art: &mut Artifacts) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    let path = dir.join(name);
    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
    art.output(name);
    Ok(())
}

/// Saves a trace as `<stem>.csv` plus meta and label files, always writing a
/// label file so the output set does not depend on the data.
fn write_trace(dir: &Path, stem: &str, t: &Trace, art: &mut Artifacts) -> Result<()> {
    let path = dir.join(format!("{stem}.csv"));
    trace::save_trace(&path, t)?;
    trace::save_labels(&trace::labels_path_for(&path), t.labels())?;
    art.output(format!("{stem}.csv"));
    art.output(format!("{stem}.labels.csv"));
    art.output(format!("{stem}.meta.json"));
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, seed: u64, out: &Path, art: &mut Artifacts) -> Result<()> {
    let profile = load_profile(&a.profile, art)?;
    let cfg = GeneratorConfig {
        p: a.p,
        duration: a.duration,
        decision_tick: a.tick,
        seed,
    };
    let t = generator::generate_trace(&profile, &cfg)?;
    write_trace(out, "trace", &t, art)?;
    art.config = json!({ "profile": profile, "generator": cfg });
    println!(
        "generated {} events, {} activities over {} s",
        t.events().len(),
        t.labels().len(),
        t.duration() as f64 / 1e6
    );
    Ok(())
}

fn stp_config(a: &ShapeArgs, t: &Trace, seed: u64) -> Result<ShapingConfig> {
    let mut cfg = if t.labels().is_empty() {
        match (a.rate_up, a.rate_down, a.period) {
            (Some(u), Some(d), Some(p)) => ShapingConfig::new(u, d, p, a.q, seed),
            _ => return Err(usage("--rate-up, --rate-down and --T are required for an unlabelled trace")),
        }
    } else {
        ShapingConfig::for_trace(t, a.q, seed)?
    };
    if let Some(u) = a.rate_up {
        cfg.rate_up = u;
    }
    if let Some(d) = a.rate_down {
        cfg.rate_down = d;
    }
    if let Some(p) = a.period {
        cfg.period = p;
    }
    cfg.cover_packet_size = a.cover_packet;
    if a.detector == DetectorKind::Threshold {
        cfg.detector = ActivityDetector::Threshold(ThresholdDetector {
            k: a.k,
            ..ThresholdDetector::default()
        });
    }
    Ok(cfg)
}

fn cmd_shape(a: &ShapeArgs, seed: u64, out: &Path, art: &mut Artifacts) -> Result<()> {
    if a.defense != Defense::Vpn && a.trace.len() != 1 {
        return Err(usage("exactly one --trace is accepted except for --defense vpn"));
    }
    let (result, config) = match a.defense {
        Defense::Vpn => {
            let mut inputs = Vec::new();
            for p in &a.trace {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                inputs.push((name, load_trace_input(p, art)?));
            }
            let t = shaping::vpn_aggregate(&inputs, a.encapsulation)?;
            let result = ShapedResult {
                trace: t,
                schedule: empty_schedule(),
                overflow: Vec::new(),
            };
            (result, json!({ "defense": "vpn", "encapsulation": a.encapsulation }))
        }
        Defense::Firewall => {
            let t = load_trace_input(&a.trace[0], art)?;
            let result = ShapedResult {
                trace: shaping::firewall_filter(&t),
                schedule: empty_schedule(),
                overflow: Vec::new(),
            };
            (result, json!({ "defense": "firewall" }))
        }
        Defense::Ilp => {
            let t = load_trace_input(&a.trace[0], art)?;
            let (u, d) = match (a.rate_up, a.rate_down) {
                (Some(u), Some(d)) => (u, d),
                _ if t.labels().is_empty() => {
                    return Err(usage("--rate-up and --rate-down are required for an unlabelled trace"))
                }
                _ => {
                    let c = ShapingConfig::for_trace(&t, 1.0, seed)?;
                    (a.rate_up.unwrap_or(c.rate_up), a.rate_down.unwrap_or(c.rate_down))
                }
            };
            let result = shaping::ilp_shape_with_packet(&t, u, d, a.cover_packet)?;
            let config = json!({ "defense": "ilp", "rate_up": u, "rate_down": d, "cover_packet_size": a.cover_packet });
            (result, config)
        }
        Defense::Stp => {
            let t = load_trace_input(&a.trace[0], art)?;
            if a.detector == DetectorKind::Oracle && t.labels().is_empty() {
                bail!(
                    "labels required: {} has no activity labels; use --detector threshold",
                    a.trace[0].display()
                );
            }
            let mut cfg = stp_config(a, &t, seed)?;
            if let Some(path) = &a.hmm {
                art.input(path);
                let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let model: ActivityHmm = serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))?;
                model.validate()?;
                cfg.decision = DecisionSpec::Hmm { model };
            }
            let result = shaping::stp_shape(&t, &cfg)?;
            if let Some(b) = metrics::empirical_overhead(&t, &result.trace) {
                println!("overhead {b:.4}");
            }
            (result, json!({ "defense": "stp", "shaping": cfg }))
        }
    };
    if !result.overflow.is_empty() {
        log::warn!("{} pattern slices overflowed", result.overflow.len());
    }
    write_trace(out, "shaped", &result.trace, art)?;
    write_schedule_csv(out, &result.schedule, art)?;
    write_json(out, "schedule.json", &result.schedule, art)?;
    write_json(out, "overflow.json", &result.overflow, art)?;
    println!(
        "shaped {} events, {} padded spans, {} overflow slices",
        result.trace.events().len(),
        result.schedule.spans.len(),
        result.overflow.len()
    );
    art.config = config;
    Ok(())
}

fn empty_schedule() -> PaddingSchedule {
    PaddingSchedule {
        period_length: 0,
        spans: Vec::new(),
        instances: Vec::new(),
    }
}

fn write_schedule_csv(dir: &Path, s: &PaddingSchedule, art: &mut Artifacts) -> Result<()> {
    let mut text = String::from("start_us,end_us,genuine\n");
    for span in &s.spans {
        text.push_str(&format!("{},{},{}\n", span.start, span.end, span.genuine as u8));
    }
    fs::write(dir.join("schedule.csv"), text).context("writing schedule.csv")?;
    art.output("schedule.csv");
    Ok(())
}

fn cmd_attack(a: &AttackArgs, out: &Path, art: &mut Artifacts) -> Result<()> {
    let t = load_trace_input(&a.trace, art)?;
    let schedule = match &a.schedule {
        Some(p) => {
            art.input(p);
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&s).with_context(|| format!("parsing schedule {}", p.display()))?
        }
        None => empty_schedule(),
    };
    let det = ThresholdDetector {
        bin: a.bin,
        k: a.k,
        min_quiet_gap: a.gap,
    };
    let shaped = ShapedResult {
        trace: t,
        schedule,
        overflow: Vec::new(),
    };
    let report = adversary::classify_spans(&shaped, &det)?;
    write_json(out, "report.json", &report, art)?;
    let fmt = |c: Option<f64>| c.map_or("undefined".to_string(), |c| format!("{c:.4}"));
    println!(
        "{} detections; confidence {}, span confidence {}, c_min {}",
        report.detected.len(),
        fmt(report.confidence),
        fmt(report.span_confidence),
        fmt(report.c_min)
    );
    art.config = json!({ "detector": det });
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64, format: Format, out: &Path, art: &mut Artifacts) -> Result<()> {
    let grid = parse_grid(&a.q_grid).map_err(usage)?;
    if grid.is_empty() {
        return Err(usage("q grid is empty"));
    }
    let result = if a.analytic {
        let (Some(rt), Some(da), Some(dna)) = (a.rt, a.da, a.dna) else {
            return Err(usage("--analytic needs --rt, --da and --dna"));
        };
        let params = AnalyticParams::normalized(a.p, 0.0, rt, da, dna);
        art.config = json!({ "mode": "analytic", "params": params, "q_grid": grid });
        SweepResult {
            params,
            points: metrics::analytic_sweep(&params, &grid),
        }
    } else {
        let spec = a.profile.as_deref().ok_or_else(|| usage("--profile is required"))?;
        let profile = load_profile(spec, art)?;
        let mut shaping = ShapingConfig::for_profile(&profile, 0.0, 0);
        if let Some(u) = a.rate_up {
            shaping.rate_up = u;
        }
        if let Some(d) = a.rate_down {
            shaping.rate_down = d;
        }
        if let Some(p) = a.period {
            shaping.period = p;
        }
        if a.parallel == 0 {
            return Err(usage("--parallel must be at least 1"));
        }
        let cfg = SweepConfig {
            shaping,
            duration: a.duration,
            decision_tick: a.tick,
            base_seed: seed,
            parallel: a.parallel > 1,
        };
        art.config = json!({ "mode": "empirical", "p": a.p, "runs": a.runs, "q_grid": grid, "sweep": cfg });
        let r = if a.parallel > 1 {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(a.parallel).build()?;
            pool.install(|| metrics::sweep(&profile, a.p, &grid, a.runs, &cfg))?
        } else {
            metrics::sweep(&profile, a.p, &grid, a.runs, &cfg)?
        };
        for pt in r.points.iter().filter(|p| p.failed()) {
            log::warn!("q = {} failed: {}", pt.q, pt.error.as_deref().unwrap_or(""));
        }
        r
    };
    match format {
        Format::Csv => {
            let mut buf = Vec::new();
            metrics::write_sweep_csv(&mut buf, &result.points)?;
            fs::write(out.join("sweep.csv"), buf).context("writing sweep.csv")?;
            art.output("sweep.csv");
        }
        Format::Json => write_json(out, "sweep.json", &result, art)?,
    }
    let empirical: Vec<_> = result.points.iter().filter(|p| p.kind == PointKind::Empirical).collect();
    if !empirical.is_empty() && empirical.iter().all(|p| p.failed()) {
        bail!("every sweep point failed");
    }
    println!("{} curve points", result.points.len());
    Ok(())
}

fn cmd_fingerprint(a: &FingerprintArgs, format: Format, out: &Path, art: &mut Artifacts) -> Result<()> {
    let observed: BTreeSet<String> = match (&a.domains, &a.trace) {
        (Some(p), _) => {
            art.input(p);
            fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        }
        (None, Some(p)) => adversary::observed_domains(&load_trace_input(p, art)?),
        (None, None) => return Err(usage("--domains or --trace is required")),
    };
    let db = match &a.db {
        Some(p) => {
            art.input(p);
            let s = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            adversary::FingerprintDb::from_json(&s)?
        }
        None => adversary::FingerprintDb::identifying_queries(),
    };
    let id = adversary::fingerprint_device(&observed, &db).map_err(|e| match e {
        CoreError::Ambiguous(names) => anyhow!("ambiguous match between {}", names.join(", ")),
        other => other.into(),
    })?;
    match format {
        Format::Json => write_json(out, "fingerprint.json", &id, art)?,
        Format::Csv => {
            let row = match &id {
                adversary::Identification::Device { device, method } => {
                    format!("{},{}\n", device, serde_json::to_value(method)?.as_str().unwrap_or(""))
                }
                adversary::Identification::Unknown => "unknown,\n".to_string(),
            };
            fs::write(out.join("fingerprint.csv"), format!("device,method\n{row}")).context("writing fingerprint.csv")?;
            art.output("fingerprint.csv");
        }
    }
    match &id {
        adversary::Identification::Device { device, .. } => println!("{device}"),
        adversary::Identification::Unknown => println!("unknown"),
    }
    art.config = json!({ "observed_domains": observed.len(), "db_entries": db.entries.len() });
    Ok(())
}

fn cmd_profile(a: &ProfileArgs, out: &Path, art: &mut Artifacts) -> Result<()> {
    let profile = match (&a.builtin, &a.from_trace) {
        (Some(spec), _) => load_profile(&format!("builtin:{}", spec.trim_start_matches("builtin:")), art)?,
        (None, Some(p)) => {
            let t = load_trace_input(p, art)?;
            let ex = generator::profile_from_trace(&t, &a.name)?;
            for w in &ex.warnings {
                log::warn!("{w}");
            }
            ex.profile
        }
        (None, None) => return Err(usage("--builtin or --from-trace is required")),
    };
    write_json(out, "profile.json", &profile, art)?;
    println!("{}: {} segments", profile.name, profile.segments.len());
    art.config = json!({ "name": profile.name });
    Ok(())
}
