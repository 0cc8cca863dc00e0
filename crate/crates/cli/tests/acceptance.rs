//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use stpad_core::adversary::{
    detect_activities, evaluate_confidence, evaluate_period_confidence, fingerprint_device, DeviceFingerprint,
    FingerprintDb, FingerprintMethod, Identification, ThresholdDetector,
};
use stpad_core::decision::ActivityHmm;
use stpad_core::generator::{generate_trace, ActivitySegment, DeviceProfile, GeneratorConfig};
use stpad_core::metrics::{
    analytic_confidence, analytic_overhead, analytic_sweep, empirical_overhead, loglog_slope, q_grid, sweep,
    AnalyticParams, PointKind, SweepConfig,
};
use stpad_core::profiles::{self, SyntheticSpec};
use stpad_core::seed;
use stpad_core::shaping::{ilp_shape, stp_shape, token_bucket_pad, SendKind, ShapingConfig};
use stpad_core::trace::{compute_stats, grid_for_labels, rate_series, Direction, DirectionFilter, TraceEvent};
use stpad_core::SECOND;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

// 1
fn confidence_endpoints() -> Outcome {
    let mut checked = 0;
    for i in 1..=1000 {
        let p = i as f64 / 1000.0;
        let c0 = analytic_confidence(&AnalyticParams::normalized(p, 0.0, 1.0, 0.9, 0.0));
        let c1 = analytic_confidence(&AnalyticParams::normalized(p, 1.0, 1.0, 0.9, 0.0));
        ensure!(c0 == Some(1.0), "c(p={p}, q=0) = {c0:?}");
        ensure!(c1 == Some(p), "c(p={p}, q=1) = {c1:?}");
        checked += 1;
    }
    Ok(format!("c = 1 at q = 0 and c = p at q = 1 exactly for {checked} values of p"))
}

// 2
fn analytic_curve() -> Outcome {
    let grid = q_grid(0.0, 1.0, 0.01).map_err(|e| e.to_string())?;
    for p in [0.01, 0.1] {
        let pts = analytic_sweep(&AnalyticParams::normalized(p, 0.0, 1.0, 0.9, 0.0), &grid);
        ensure!(pts.len() == 101, "p = {p}: {} points", pts.len());
        ensure!(pts.iter().all(|x| x.confidence.is_some() && x.overhead.is_some()), "undefined point at p = {p}");
    }
    let pts = analytic_sweep(&AnalyticParams::normalized(0.01, 0.0, 1.0, 0.9, 0.0), &grid);
    let (first, last) = (&pts[0], &pts[100]);
    let (b0, c0) = (first.overhead.unwrap(), first.confidence.unwrap());
    let (b1, c1) = (last.overhead.unwrap(), last.confidence.unwrap());
    ensure!(rel_err(b0, 1.111) < 0.005 && rel_err(c0, 1.0) < 0.005, "left endpoint ({b0}, {c0})");
    ensure!(rel_err(b1, 111.1) < 0.005 && rel_err(c1, 0.01) < 0.005, "right endpoint ({b1}, {c1})");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = stpad(&[
        "--out-dir",
        path_str(dir.path()),
        "sweep",
        "--analytic",
        "--p",
        "0.01",
        "--rt",
        "1",
        "--da",
        "0.9",
        "--dna",
        "0",
    ])?;
    ensure!(out.status.success(), "cli sweep failed");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).map_err(|e| e.to_string())?;
    ensure!(csv.lines().count() == 102, "cli wrote {} lines", csv.lines().count());
    Ok(format!("101 points per curve; p = 0.01 endpoints ({b0:.4}, {c0}) and ({b1:.2}, {c1})"))
}

/// Four 2 s segments, no background traffic.
fn two_second_profile() -> DeviceProfile {
    profiles::synthetic(&SyntheticSpec {
        name: "two-second".into(),
        segment_durations: vec![2 * SECOND; 4],
        mean_rate: 4000.0,
        stddev_ratio: 0.1,
        up_share: 0.35,
        packets_per_second: 8,
    })
}

// 3
fn convergence() -> Outcome {
    let prof = two_second_profile();
    let (p, q, periods) = (0.05, 0.1, 100_000u64);
    let period = 2 * SECOND;
    let gen = GeneratorConfig {
        p,
        duration: periods * period,
        decision_tick: period,
        seed: 3001,
    };
    let trace = generate_trace(&prof, &gen).map_err(|e| e.to_string())?;
    let mut cfg = ShapingConfig::for_profile(&prof, q, 3002);
    cfg.period = period;
    let shaped = stp_shape(&trace, &cfg).map_err(|e| e.to_string())?;
    let c = evaluate_period_confidence(&shaped.schedule).ok_or("nothing padded")?;
    let b = empirical_overhead(&trace, &shaped.trace).ok_or("empty trace")?;
    let params = AnalyticParams::for_config(p, q, &cfg, prof.mean_segment_bytes(), 0.0);
    let c_star = analytic_confidence(&params).unwrap();
    let b_star = analytic_overhead(&params).unwrap();
    ensure!((c - 0.3448).abs() <= 0.02, "confidence {c:.4}, want 0.3448 +- 0.02");
    ensure!(rel_err(b, b_star) <= 0.05, "overhead {b:.4} vs predicted {b_star:.4}");
    Ok(format!(
        "c = {c:.4} (analytic {c_star:.4}), b = {b:.4} (analytic {b_star:.4}, {:+.2}%), {} overflow slices",
        100.0 * (b - b_star) / b_star,
        shaped.overflow.len()
    ))
}

// 4
fn power_law() -> Outcome {
    let prof = profiles::wemo();
    let mut shaping = ShapingConfig::for_profile(&prof, 0.0, 0);
    shaping.period = 2 * SECOND;
    let cfg = SweepConfig {
        shaping,
        duration: 20_000 * SECOND,
        decision_tick: 2 * SECOND,
        base_seed: 4004,
        parallel: true,
    };
    let grid: Vec<f64> = (0..10).map(|i| 0.05 + 0.05 * i as f64).collect();
    let res = sweep(&prof, 0.01, &grid, 50, &cfg).map_err(|e| e.to_string())?;
    let emp: Vec<_> = res.points.iter().filter(|x| x.kind == PointKind::Empirical).collect();
    ensure!(emp.iter().all(|x| !x.failed()), "failed sweep points");
    let qs: Vec<f64> = emp.iter().map(|x| x.q).collect();
    let ratio: Vec<f64> = emp
        .iter()
        .map(|x| x.confidence.unwrap_or(0.0) / x.overhead.unwrap_or(f64::INFINITY))
        .collect();
    let slope = loglog_slope(&qs, &ratio).ok_or("slope undefined")?;
    let ana: Vec<_> = res.points.iter().filter(|x| x.kind == PointKind::Analytic).collect();
    let ana_ratio: Vec<f64> = ana.iter().map(|x| x.confidence.unwrap() / x.overhead.unwrap()).collect();
    let ana_slope = loglog_slope(&qs, &ana_ratio).unwrap();
    ensure!((slope + 2.0).abs() <= 0.3, "slope {slope:.3} outside -2 +- 0.3");
    Ok(format!("log-log slope of c/b = {slope:.3} (analytic {ana_slope:.3}), 10 points x 50 runs"))
}

const GOLDEN_SEED: u64 = 63;
const GOLDEN_DURATION: u64 = 1000 * SECOND;
const GOLDEN_OVERHEAD: f64 = 6.823904382470119;

// 5
fn golden_span_fixture() -> Outcome {
    let prof = profiles::wemo();
    let gen = GeneratorConfig {
        p: 0.001,
        duration: GOLDEN_DURATION,
        decision_tick: SECOND,
        seed: seed::substream(GOLDEN_SEED, 1),
    };
    let trace = generate_trace(&prof, &gen).map_err(|e| e.to_string())?;
    let cfg = ShapingConfig::for_profile(&prof, 0.01, seed::substream(GOLDEN_SEED, 2));
    let shaped = stp_shape(&trace, &cfg).map_err(|e| e.to_string())?;
    let spans = &shaped.schedule.spans;
    let genuine = spans.iter().filter(|s| s.genuine).count();
    ensure!(spans.len() == 6, "{} padded spans", spans.len());
    ensure!(genuine == 2, "{genuine} genuine spans");
    let c = evaluate_confidence(&shaped.schedule).unwrap();
    ensure!(c == 2.0 / 6.0, "confidence {c}");
    let b = empirical_overhead(&trace, &shaped.trace).unwrap();
    ensure!((3.4..=10.2).contains(&b), "overhead {b} outside the 6.8 +- 50% band");
    ensure!((b - GOLDEN_OVERHEAD).abs() < 1e-9, "overhead {b} differs from golden {GOLDEN_OVERHEAD}");
    Ok(format!("6 spans, 2 genuine, c = {:.1}%, b = {b:.4} (golden)", 100.0 * c))
}

// 6
fn ilp_equivalence() -> Outcome {
    let prof = profiles::wemo();
    let trace = generate_trace(&prof, &GeneratorConfig::new(0.01, 5000 * SECOND, 6006)).map_err(|e| e.to_string())?;
    let cfg = ShapingConfig::for_profile(&prof, 1.0, 6007);
    let stp = stp_shape(&trace, &cfg).map_err(|e| e.to_string())?;
    let ilp = ilp_shape(&trace, cfg.rate_up, cfg.rate_down).map_err(|e| e.to_string())?;
    ensure!(stp.schedule.spans.len() == 1, "q = 1 produced {} spans", stp.schedule.spans.len());
    let span = stp.schedule.spans[0];
    let first = span.start.div_ceil(SECOND) as usize;
    let last = (span.end.min(trace.duration()) / SECOND) as usize;
    let mut compared = 0;
    let mut worst = 0u64;
    for filter in [DirectionFilter::Upload, DirectionFilter::Download] {
        let a = rate_series(&stp.trace, SECOND, filter);
        let b = rate_series(&ilp.trace, SECOND, filter);
        for i in first..last {
            let d = a[i].abs_diff(b[i]);
            worst = worst.max(d);
            ensure!(d <= cfg.cover_packet_size, "bin {i} differs by {d} bytes");
            compared += 1;
        }
    }
    let det = detect_activities(&ilp.trace.observer_view(), &ThresholdDetector::default()).map_err(|e| e.to_string())?;
    ensure!(det.is_empty(), "{} detections on ILP output", det.len());

    let frac_1s = compute_stats(&trace, &grid_for_labels(trace.duration(), trace.labels(), SECOND).unwrap()).activity_fraction;
    let c_ilp = evaluate_period_confidence(&ilp.schedule).unwrap();
    ensure!((c_ilp - frac_1s).abs() <= 0.02, "ILP confidence {c_ilp} vs activity fraction {frac_1s}");
    let frac_t = grid_for_labels(trace.duration(), trace.labels(), cfg.period).unwrap().activity_fraction();
    let c_stp = evaluate_period_confidence(&stp.schedule).unwrap();
    ensure!((c_stp - frac_t).abs() <= 0.02, "STP q=1 confidence {c_stp} vs activity fraction {frac_t}");
    Ok(format!(
        "{compared} bins within {worst} B (<= one packet); 0 detections; c = {c_ilp:.4} vs {frac_1s:.4}, q=1 c = {c_stp:.4} vs {frac_t:.4}"
    ))
}

// 7
fn variance_ordering() -> Outcome {
    let ratios = [0.047, 0.287, 0.592];
    let mut overheads = Vec::new();
    for r in ratios {
        let prof = profiles::synthetic(&SyntheticSpec {
            name: format!("var-{r}"),
            segment_durations: vec![SECOND; 7],
            mean_rate: 10_000.0,
            stddev_ratio: r,
            up_share: 0.4,
            packets_per_second: 10,
        });
        let mut total = 0.0;
        for s in 0..5u64 {
            let trace =
                generate_trace(&prof, &GeneratorConfig::new(0.01, 20_000 * SECOND, 7000 + s)).map_err(|e| e.to_string())?;
            let cfg = ShapingConfig::for_profile(&prof, 0.0, 7100 + s);
            let shaped = stp_shape(&trace, &cfg).map_err(|e| e.to_string())?;
            total += empirical_overhead(&trace, &shaped.trace).unwrap();
        }
        overheads.push(total / 5.0);
    }
    ensure!(
        overheads[0] < overheads[1] && overheads[1] < overheads[2],
        "overheads {overheads:?} not strictly increasing"
    );
    Ok(format!(
        "q = 0 overheads {:.3} < {:.3} < {:.3} for stddev ratios 4.7%, 28.7%, 59.2%",
        overheads[0], overheads[1], overheads[2]
    ))
}

fn random_profile(rng: &mut impl Rng) -> DeviceProfile {
    let n = rng.gen_range(1..4);
    let segments = (0..n)
        .map(|i| {
            let duration = rng.gen_range(200_000..5 * SECOND);
            let k = rng.gen_range(1..20);
            let mut events: Vec<TraceEvent> = (0..k)
                .map(|_| {
                    let dir = if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down };
                    TraceEvent::new(rng.gen_range(0..duration), dir, rng.gen_range(40..1500), "dev")
                })
                .collect();
            events.sort_by_key(|e| e.timestamp);
            ActivitySegment {
                kind: format!("a{i}"),
                duration,
                events,
            }
        })
        .collect();
    DeviceProfile {
        name: "random".into(),
        background_rate_up: rng.gen_range(0.0..200.0),
        background_rate_down: rng.gen_range(0.0..200.0),
        background_packet_size: 100,
        segments,
    }
}

// 8
fn shaping_invariants() -> Outcome {
    let mut rng = seed::rng(8008);
    let mut overflowing = 0;
    let mut spans_seen = 0;
    for case in 0..1000 {
        let prof = random_profile(&mut rng);
        let gen = GeneratorConfig {
            p: rng.gen_range(0.0..0.3),
            duration: rng.gen_range(20..200) * SECOND,
            decision_tick: rng.gen_range(1..4) * SECOND / 2,
            seed: rng.gen(),
        };
        let trace = generate_trace(&prof, &gen).map_err(|e| e.to_string())?;
        let period = rng.gen_range(500_000..6 * SECOND);
        let cfg = ShapingConfig {
            cover_packet_size: rng.gen_range(100..1500),
            ..ShapingConfig::new(
                rng.gen_range(100..4000),
                rng.gen_range(100..4000),
                period,
                rng.gen_range(0.0..1.0),
                rng.gen(),
            )
        };
        let out = stp_shape(&trace, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let sched = &out.schedule;
        spans_seen += sched.spans.len();

        for s in &sched.spans {
            ensure!(s.len() > 0 && s.len() % period == 0, "case {case}: span length {} with T = {period}", s.len());
        }
        let mut starts = BTreeSet::new();
        for i in &sched.instances {
            ensure!(starts.insert(i.start / period), "case {case}: two pattern starts in period {}", i.start / period);
        }

        let real: Vec<&TraceEvent> = out.trace.events().iter().filter(|e| !e.is_cover).collect();
        ensure!(real.len() == trace.events().len(), "case {case}: {} of {} events kept", real.len(), trace.events().len());
        for (a, b) in real.iter().zip(trace.events()) {
            ensure!(*a == b, "case {case}: event changed: {b:?} -> {a:?}");
        }

        for l in trace.labels() {
            let mut t = l.start;
            for s in sched.spans.iter().filter(|s| s.genuine && s.end > l.start && s.start < l.end) {
                if s.start <= t {
                    t = t.max(s.end);
                }
            }
            ensure!(t >= l.end, "case {case}: label [{}, {}) not covered by genuine spans", l.start, l.end);
        }

        for s in &sched.spans {
            let mut a = s.start;
            while a < s.end {
                let b = a + period;
                for dir in [Direction::Up, Direction::Down] {
                    if out.overflow.iter().any(|o| o.start == a && o.direction == dir) {
                        overflowing += 1;
                        continue;
                    }
                    let sent: u64 = out.trace.events_between(a, b).iter().filter(|e| e.direction == dir).map(|e| e.size).sum();
                    let budget = (cfg.rate(dir) as u128 * period as u128 / SECOND as u128) as u64;
                    ensure!(sent == budget, "case {case}: slice [{a}, {b}) {dir:?} sent {sent}, budget {budget}");
                }
                a = b;
            }
        }
    }
    Ok(format!("1000 instances, {spans_seen} spans, {overflowing} overflow slices skipped in budget check"))
}

// 9
fn token_bucket() -> Outcome {
    let mut rng = seed::rng(9009);
    let mut sends_checked = 0usize;
    for case in 0..300 {
        let rate = rng.gen_range(500..20_000u64);
        let cover = rng.gen_range(50..1500u64);
        let duration = rng.gen_range(1..20) * SECOND;
        let n = rng.gen_range(0..60);
        let mut arrivals: Vec<(u64, u64)> =
            (0..n).map(|_| (rng.gen_range(0..duration), rng.gen_range(1..3000))).collect();
        arrivals.sort_by_key(|a| a.0);
        let log = token_bucket_pad(&arrivals, rate, cover, duration).map_err(|e| e.to_string())?;

        let mut remaining: Vec<u64> = arrivals.iter().map(|a| a.1).collect();
        for s in &log.sends {
            ensure!(s.size <= cover, "case {case}: send of {} exceeds one packet", s.size);
            match s.kind {
                SendKind::Device { packet, .. } => {
                    ensure!(arrivals[packet].0 <= s.time, "case {case}: packet {packet} sent before arrival");
                    remaining[packet] = remaining[packet].checked_sub(s.size).ok_or("over-sent packet")?;
                }
                SendKind::Cover => {
                    let waiting = arrivals.iter().zip(&remaining).any(|(a, r)| a.0 <= s.time && *r > 0);
                    ensure!(!waiting, "case {case}: cover sent at {} with a device packet queued", s.time);
                }
            }
        }

        for w in [SECOND / 10, SECOND / 3, SECOND, 3 * SECOND] {
            for (i, s) in log.sends.iter().enumerate() {
                let bytes: u64 = log.sends[i..].iter().take_while(|x| x.time < s.time + w).map(|x| x.size).sum();
                let bound = rate as f64 * w as f64 / SECOND as f64 + cover as f64;
                ensure!(bytes as f64 <= bound, "case {case}: {bytes} B in a {w} us window, bound {bound}");
                sends_checked += 1;
            }
        }
    }
    Ok(format!("300 fixtures, {sends_checked} windows within R*w + one packet, device-first order held"))
}

// 10
fn fingerprinting() -> Outcome {
    let db = FingerprintDb::identifying_queries();
    ensure!(db.entries.len() == 14, "{} table rows", db.entries.len());
    let mut unique_ok = 0;
    for (device, fp) in &db.entries {
        for d in &fp.unique {
            let observed: BTreeSet<String> = [d.clone(), "ntp.org".to_string()].into();
            let id = fingerprint_device(&observed, &db).map_err(|e| e.to_string())?;
            ensure!(
                id == Identification::Device {
                    device: device.clone(),
                    method: FingerprintMethod::UniqueDomain
                },
                "{d} -> {id:?}"
            );
            unique_ok += 1;
        }
    }
    let nest = fingerprint_device(&["nexus.dropcam.com".to_string()].into(), &db).map_err(|e| e.to_string())?;
    ensure!(
        matches!(&nest, Identification::Device { device, .. } if device == "Nest Cam Indoor"),
        "nexus.dropcam.com -> {nest:?}"
    );

    // ten domains per device, two of them shared by every device
    let shared = ["time.shared.net", "dns.shared.net"];
    let mut jdb = FingerprintDb::default();
    for i in 0..14 {
        let mut domains: BTreeSet<String> = shared.iter().map(|s| s.to_string()).collect();
        domains.extend((0..8).map(|j| format!("d{j}.vendor{i}.com")));
        jdb.entries.insert(format!("device-{i:02}"), DeviceFingerprint { unique: BTreeSet::new(), domains });
    }
    let mut rng = seed::rng(1010);
    let mut jaccard_ok = 0;
    for i in 0..14 {
        let mut observed: BTreeSet<String> = shared.iter().map(|s| s.to_string()).collect();
        let mut own: Vec<usize> = (0..8).collect();
        for _ in 0..3 {
            own.remove(rng.gen_range(0..own.len()));
        }
        observed.extend(own.iter().map(|j| format!("d{j}.vendor{i}.com")));
        observed.insert("cdn.example.org".into());
        let id = fingerprint_device(&observed, &jdb).map_err(|e| e.to_string())?;
        ensure!(
            id == Identification::Device {
                device: format!("device-{i:02}"),
                method: FingerprintMethod::SetSimilarity
            },
            "set {i} -> {id:?}"
        );
        jaccard_ok += 1;
    }
    Ok(format!("unique-domain {unique_ok}/14, Jaccard {jaccard_ok}/14"))
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stpad(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_stpad"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())
}

fn files_in(dir: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

// 11
fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let at = |s: &str| root.join(s).to_string_lossy().into_owned();

    let hmm = ActivityHmm {
        state_count: 2,
        transition: vec![vec![0.95, 0.05], vec![0.3, 0.7]],
        emission: vec![0.02, 0.6],
        initial: vec![0.9, 0.1],
        seed: 0,
    };
    fs::write(root.join("hmm.json"), serde_json::to_string(&hmm).unwrap()).map_err(|e| e.to_string())?;
    fs::write(root.join("domains.txt"), "nexus.dropcam.com\nntp.org\n").map_err(|e| e.to_string())?;

    let runs: Vec<(&str, Vec<String>)> = vec![
        ("profile", vec!["profile".into(), "--builtin".into(), "wemo".into()]),
        ("gen", vec![
            "--seed".into(), "7".into(), "generate".into(), "--profile".into(), at("profile/profile.json"),
            "--p".into(), "0.01".into(), "--duration".into(), "3000s".into(),
        ]),
        ("gen-auto", vec![
            "generate".into(), "--profile".into(), "builtin:echo".into(), "--p".into(), "0.02".into(),
            "--duration".into(), "1500s".into(),
        ]),
        ("stp", vec![
            "--seed".into(), "3".into(), "shape".into(), "--trace".into(), at("gen/trace.csv"), "--defense".into(),
            "stp".into(), "--q".into(), "0.05".into(), "--T".into(), "10s".into(),
        ]),
        ("stp-hmm", vec![
            "--seed".into(), "4".into(), "shape".into(), "--trace".into(), at("gen/trace.csv"), "--defense".into(),
            "stp".into(), "--hmm".into(), at("hmm.json"), "--detector".into(), "threshold".into(),
        ]),
        ("ilp", vec!["shape".into(), "--trace".into(), at("gen/trace.csv"), "--defense".into(), "ilp".into()]),
        ("firewall", vec!["shape".into(), "--trace".into(), at("gen/trace.csv"), "--defense".into(), "firewall".into()]),
        ("vpn", vec![
            "shape".into(), "--trace".into(), at("gen/trace.csv"), "--trace".into(), at("gen-auto/trace.csv"),
            "--defense".into(), "vpn".into(), "--encapsulation".into(), "40".into(),
        ]),
        ("attack", vec![
            "attack".into(), "--trace".into(), at("stp/shaped.csv"), "--schedule".into(), at("stp/schedule.json"),
        ]),
        ("sweep", vec![
            "--seed".into(), "11".into(), "sweep".into(), "--profile".into(), "builtin:wemo".into(), "--p".into(),
            "0.01".into(), "--q-grid".into(), "0,0.1,0.5,1".into(), "--runs".into(), "3".into(), "--duration".into(),
            "2000s".into(), "--parallel".into(), "3".into(),
        ]),
        ("sweep-json", vec![
            "--format".into(), "json".into(), "--seed".into(), "12".into(), "sweep".into(), "--profile".into(),
            "builtin:nest-cam".into(), "--p".into(), "0.01".into(), "--q-grid".into(), "0:0.2:0.1".into(),
            "--runs".into(), "2".into(), "--duration".into(), "2000s".into(),
        ]),
        ("analytic", vec![
            "sweep".into(), "--analytic".into(), "--p".into(), "0.1".into(), "--rt".into(), "1".into(), "--da".into(),
            "0.9".into(), "--dna".into(), "0".into(),
        ]),
        ("fingerprint", vec![
            "--format".into(), "json".into(), "fingerprint".into(), "--domains".into(), at("domains.txt"),
        ]),
    ];

    let mut files = 0;
    for (name, args) in &runs {
        let out_dir = at(name);
        let mut argv: Vec<&str> = vec!["--out-dir", &out_dir];
        argv.extend(args.iter().map(String::as_str));
        let out = stpad(&argv)?;
        ensure!(
            out.status.success(),
            "{name} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        );
        let rerun_dir = at(&format!("{name}.rerun"));
        let manifest = root.join(name).join("manifest.json");
        let out = stpad(&["--out-dir", &rerun_dir, "rerun", "--manifest", path_str(&manifest)])?;
        ensure!(
            out.status.success(),
            "rerun of {name} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        );
        let a = files_in(&root.join(name))?;
        let b = files_in(Path::new(&rerun_dir))?;
        ensure!(a == b, "{name}: file sets differ {a:?} vs {b:?}");
        for f in &a {
            let x = fs::read(root.join(name).join(f)).map_err(|e| e.to_string())?;
            let y = fs::read(Path::new(&rerun_dir).join(f)).map_err(|e| e.to_string())?;
            ensure!(x == y, "{name}/{f} differs after rerun");
            files += 1;
        }
    }
    Ok(format!("{} commands re-run from manifests, {files} files byte-identical", runs.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("1 confidence endpoints", confidence_endpoints),
        ("2 analytic tradeoff curve", analytic_curve),
        ("3 analytic-empirical convergence", convergence),
        ("4 power-law ratio", power_law),
        ("5 golden padded-span fixture", golden_span_fixture),
        ("6 ILP equivalence and blindness", ilp_equivalence),
        ("7 variance ordering", variance_ordering),
        ("8 shaping invariants", shaping_invariants),
        ("9 token-bucket discipline", token_bucket),
        ("10 fingerprinting", fingerprinting),
        ("11 determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.2}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.2}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
