//! Trace generation by replaying recorded activity segments.
//!
//! At each decision tick the generator flips a `p`-coin. On success it picks a
//! segment uniformly at random, replays it starting at the current time, and
//! does not decide again until the replay has finished. Optional background
//! traffic is laid down as evenly spaced packets outside replays.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{ActivityLabel, Direction, Trace, TraceEvent, SECOND};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivitySegment {
    pub kind: String,
    /// Length of the segment in microseconds.
    pub duration: u64,
    /// Events with timestamps relative to the segment start.
    pub events: Vec<TraceEvent>,
}

impl ActivitySegment {
    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.size).sum()
    }

    pub fn bytes_in(&self, dir: Direction) -> u64 {
        self.events.iter().filter(|e| e.direction == dir).map(|e| e.size).sum()
    }

    /// Largest byte count in any `bin`-long window aligned to the segment
    /// start, for one direction.
    pub fn peak_bin_bytes(&self, dir: Direction, bin: u64) -> u64 {
        let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.direction == dir) {
            *bins.entry(e.timestamp / bin).or_default() += e.size;
        }
        bins.values().copied().max().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.events.is_empty() {
            return Err(Error::invalid(format!("segment `{}` has no events", self.kind)));
        }
        if self.duration == 0 {
            return Err(Error::invalid(format!("segment `{}` has zero duration", self.kind)));
        }
        for e in &self.events {
            if e.timestamp >= self.duration {
                return Err(Error::invalid(format!(
                    "segment `{}` event at {} us is outside its {} us duration",
                    self.kind, e.timestamp, self.duration
                )));
            }
            if e.size == 0 {
                return Err(Error::invalid(format!("segment `{}` has a zero-size event", self.kind)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Background bytes per second, upload.
    #[serde(default)]
    pub background_rate_up: f64,
    /// Background bytes per second, download.
    #[serde(default)]
    pub background_rate_down: f64,
    #[serde(default = "default_background_packet")]
    pub background_packet_size: u64,
    pub segments: Vec<ActivitySegment>,
}

fn default_background_packet() -> u64 {
    100
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid(format!("profile `{}` has no segments", self.name)));
        }
        for s in &self.segments {
            s.validate()?;
        }
        let rates_ok = |r: f64| r.is_finite() && r >= 0.0;
        if !rates_ok(self.background_rate_up) || !rates_ok(self.background_rate_down) {
            return Err(Error::invalid("background rates must be finite and non-negative"));
        }
        if self.background_packet_size == 0 {
            return Err(Error::invalid("background_packet_size must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<DeviceProfile> {
        let p: DeviceProfile = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &std::path::Path) -> Result<DeviceProfile> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        DeviceProfile::from_json(&s)
    }

    pub fn max_segment_duration(&self) -> u64 {
        self.segments.iter().map(|s| s.duration).max().unwrap_or(0)
    }

    pub fn mean_segment_bytes(&self) -> f64 {
        if self.segments.is_empty() {
            return 0.0;
        }
        self.segments.iter().map(|s| s.total_bytes() as f64).sum::<f64>() / self.segments.len() as f64
    }

    /// Peak per-direction activity rate in bytes/s over 1 s bins aligned to
    /// each segment start.
    pub fn peak_rate(&self, dir: Direction) -> u64 {
        self.segments
            .iter()
            .map(|s| s.peak_bin_bytes(dir, SECOND))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Per-tick probability of starting an activity.
    pub p: f64,
    pub duration: u64,
    #[serde(default = "default_tick")]
    pub decision_tick: u64,
    pub seed: u64,
}

fn default_tick() -> u64 {
    SECOND
}

impl GeneratorConfig {
    pub fn new(p: f64, duration: u64, seed: u64) -> Self {
        GeneratorConfig {
            p,
            duration,
            decision_tick: SECOND,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!("p must be in [0, 1], got {}", self.p)));
        }
        if self.decision_tick == 0 {
            return Err(Error::invalid("decision_tick must be at least 1 us"));
        }
        Ok(())
    }
}

/// Replays `profile` under a Bernoulli(`p`) activity process.
///
/// A replay that would run past the end of the trace is not started; that
/// decision tick passes without activity.
pub fn generate_trace(profile: &DeviceProfile, config: &GeneratorConfig) -> Result<Trace> {
    profile.validate()?;
    config.validate()?;
    if config.duration == 0 {
        return Ok(Trace::empty(0));
    }
    let mut rng = seed::rng(config.seed);
    let mut events = Vec::new();
    let mut labels = Vec::new();
    let mut t = 0u64;
    while t < config.duration {
        if rng.gen_bool(config.p) {
            let seg = &profile.segments[rng.gen_range(0..profile.segments.len())];
            if t + seg.duration <= config.duration {
                events.extend(seg.events.iter().map(|e| TraceEvent {
                    timestamp: t + e.timestamp,
                    ..e.clone()
                }));
                labels.push(ActivityLabel::new(t, t + seg.duration, seg.kind.clone()));
                t += seg.duration;
                continue;
            }
        }
        t += config.decision_tick;
    }

    for (dir, rate) in [
        (Direction::Up, profile.background_rate_up),
        (Direction::Down, profile.background_rate_down),
    ] {
        if rate > 0.0 {
            background(&mut events, &labels, dir, rate, profile, config.duration);
        }
    }
    Trace::new(events, config.duration, labels)
}

fn background(
    events: &mut Vec<TraceEvent>,
    labels: &[ActivityLabel],
    dir: Direction,
    rate: f64,
    profile: &DeviceProfile,
    duration: u64,
) {
    let size = profile.background_packet_size;
    let spacing = size as f64 * SECOND as f64 / rate;
    let mut li = 0;
    let mut k = 0u64;
    loop {
        let t = (k as f64 * spacing).floor() as u64;
        if t >= duration {
            break;
        }
        k += 1;
        while li < labels.len() && labels[li].end <= t {
            li += 1;
        }
        if li < labels.len() && labels[li].contains(t) {
            continue;
        }
        events.push(TraceEvent::new(t, dir, size, profile.name.clone()));
    }
}

/// Result of cutting a labelled trace into replayable segments.
#[derive(Debug, Clone)]
pub struct ProfileExtraction {
    pub profile: DeviceProfile,
    /// Human-readable notes about labels that could not become segments.
    pub warnings: Vec<String>,
}

/// Builds a profile with one segment per label, events re-based to the label
/// start. Background rates are estimated from unlabelled time.
pub fn profile_from_trace(trace: &Trace, name: &str) -> Result<ProfileExtraction> {
    if trace.labels().is_empty() {
        return Err(Error::NoActivities);
    }
    let mut segments = Vec::new();
    let mut warnings = Vec::new();
    for l in trace.labels() {
        let evs = trace.events_between(l.start, l.end);
        if evs.is_empty() {
            warnings.push(format!("label `{}` [{}, {}) has no events; skipped", l.kind, l.start, l.end));
            continue;
        }
        segments.push(ActivitySegment {
            kind: l.kind.clone(),
            duration: l.len(),
            events: evs
                .iter()
                .map(|e| TraceEvent {
                    timestamp: e.timestamp - l.start,
                    ..e.clone()
                })
                .collect(),
        });
    }
    if segments.is_empty() {
        return Err(Error::NoActivities);
    }

    let labelled: u64 = trace.labels().iter().map(|l| l.len()).sum();
    let idle = trace.duration().saturating_sub(labelled);
    let mut idle_bytes = [0u64; 2];
    let mut idle_count = 0u64;
    let mut li = 0;
    for e in trace.events() {
        while li < trace.labels().len() && trace.labels()[li].end <= e.timestamp {
            li += 1;
        }
        if li < trace.labels().len() && trace.labels()[li].contains(e.timestamp) {
            continue;
        }
        idle_bytes[e.direction as usize] += e.size;
        idle_count += 1;
    }
    let per_sec = |b: u64| if idle == 0 { 0.0 } else { b as f64 * SECOND as f64 / idle as f64 };
    let packet = if idle_count == 0 {
        default_background_packet()
    } else {
        ((idle_bytes[0] + idle_bytes[1]) as f64 / idle_count as f64).round().max(1.0) as u64
    };
    Ok(ProfileExtraction {
        profile: DeviceProfile {
            name: name.to_string(),
            background_rate_up: per_sec(idle_bytes[Direction::Up as usize]),
            background_rate_down: per_sec(idle_bytes[Direction::Down as usize]),
            background_packet_size: packet,
            segments,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles;

    fn tiny_profile() -> DeviceProfile {
        DeviceProfile {
            name: "plug".into(),
            background_rate_up: 0.0,
            background_rate_down: 0.0,
            background_packet_size: 100,
            segments: vec![
                ActivitySegment {
                    kind: "on".into(),
                    duration: SECOND,
                    events: vec![
                        TraceEvent::new(0, Direction::Up, 300, "plug"),
                        TraceEvent::new(400_000, Direction::Down, 900, "plug"),
                    ],
                },
                ActivitySegment {
                    kind: "off".into(),
                    duration: 2 * SECOND,
                    events: vec![TraceEvent::new(1_000_000, Direction::Down, 1200, "plug")],
                },
            ],
        }
    }

    #[test]
    fn p_zero_gives_background_only() {
        let mut prof = tiny_profile();
        prof.background_rate_up = 50.0;
        let t = generate_trace(&prof, &GeneratorConfig::new(0.0, 100 * SECOND, 3)).unwrap();
        assert!(t.labels().is_empty());
        assert_eq!(t.events().len(), 50);
        assert!(t.events().iter().all(|e| e.size == 100 && e.direction == Direction::Up));
    }

    #[test]
    fn p_one_saturates() {
        let t = generate_trace(&tiny_profile(), &GeneratorConfig::new(1.0, 60 * SECOND, 11)).unwrap();
        let labels = t.labels();
        assert!(!labels.is_empty());
        assert_eq!(labels[0].start, 0);
        for w in labels.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn zero_duration_is_empty() {
        let t = generate_trace(&tiny_profile(), &GeneratorConfig::new(0.5, 0, 1)).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.duration(), 0);
    }

    #[test]
    fn rejects_bad_p() {
        assert!(generate_trace(&tiny_profile(), &GeneratorConfig::new(1.5, SECOND, 1)).is_err());
    }

    #[test]
    fn deterministic_and_faithful() {
        let prof = profiles::wemo();
        let cfg = GeneratorConfig::new(0.05, 2000 * SECOND, 99);
        let a = generate_trace(&prof, &cfg).unwrap();
        let b = generate_trace(&prof, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.labels().windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for l in a.labels() {
            let seg = prof.segments.iter().find(|s| s.kind == l.kind).unwrap();
            let bytes: u64 = a.events_between(l.start, l.end).iter().map(|e| e.size).sum();
            assert_eq!(bytes, seg.total_bytes());
        }
    }

    #[test]
    fn label_count_matches_bernoulli_oracle() {
        let prof = profiles::wemo();
        let p = 0.05;
        let ticks = 10_000u64;
        let cfg = GeneratorConfig::new(p, ticks * SECOND, 2024);
        let t = generate_trace(&prof, &cfg).unwrap();

        // Re-simulate the same seeded coin flips, counting decisions.
        let mut rng = seed::rng(cfg.seed);
        let (mut now, mut decisions, mut successes) = (0u64, 0u64, 0u64);
        while now < cfg.duration {
            decisions += 1;
            if rng.gen_bool(p) {
                let seg = &prof.segments[rng.gen_range(0..prof.segments.len())];
                if now + seg.duration <= cfg.duration {
                    successes += 1;
                    now += seg.duration;
                    continue;
                }
            }
            now += cfg.decision_tick;
        }
        assert_eq!(successes as usize, t.labels().len());

        // decisions are the ticks not consumed by replays
        let consumed: u64 = t.labels().iter().map(|l| l.len() / SECOND).sum();
        assert_eq!(decisions, ticks - consumed + t.labels().len() as u64);

        let n = decisions as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        let k = t.labels().len() as f64;
        assert!((k - n * p).abs() <= 2.576 * sd, "k={k} n={n}");
    }

    #[test]
    fn profile_extraction_counts_and_bytes() {
        let prof = profiles::wemo();
        let mut labels = Vec::new();
        let mut events = Vec::new();
        for (i, seg) in prof.segments.iter().enumerate() {
            let start = (10 + 20 * i as u64) * SECOND;
            labels.push(ActivityLabel::new(start, start + seg.duration, seg.kind.clone()));
            events.extend(seg.events.iter().map(|e| TraceEvent {
                timestamp: start + e.timestamp,
                ..e.clone()
            }));
        }
        events.push(TraceEvent::new(SECOND, Direction::Up, 77, "wemo"));
        let trace = Trace::new(events, 200 * SECOND, labels.clone()).unwrap();
        let ex = profile_from_trace(&trace, "wemo").unwrap();
        assert_eq!(ex.profile.segments.len(), 7);
        assert!(ex.warnings.is_empty());
        for (seg, l) in ex.profile.segments.iter().zip(&labels) {
            let oracle: u64 = trace
                .events()
                .iter()
                .filter(|e| l.start <= e.timestamp && e.timestamp < l.end)
                .map(|e| e.size)
                .sum();
            assert_eq!(seg.total_bytes(), oracle);
        }
        let idle_secs = 200.0 - 7.0;
        assert!((ex.profile.background_rate_up - 77.0 / idle_secs).abs() < 1e-9);
        assert_eq!(ex.profile.background_packet_size, 77);
    }

    #[test]
    fn empty_label_is_skipped_with_warning() {
        let trace = Trace::new(
            vec![TraceEvent::new(500, Direction::Up, 10, "d")],
            10 * SECOND,
            vec![ActivityLabel::new(0, SECOND, "a"), ActivityLabel::new(5 * SECOND, 6 * SECOND, "b")],
        )
        .unwrap();
        let ex = profile_from_trace(&trace, "d").unwrap();
        assert_eq!(ex.profile.segments.len(), 1);
        assert_eq!(ex.warnings.len(), 1);
    }

    #[test]
    fn no_labels_is_an_error() {
        let trace = Trace::empty(SECOND);
        assert!(matches!(profile_from_trace(&trace, "x"), Err(Error::NoActivities)));
    }

    #[test]
    fn profile_json_round_trip() {
        let prof = profiles::wemo();
        let s = serde_json::to_string(&prof).unwrap();
        assert_eq!(DeviceProfile::from_json(&s).unwrap(), prof);
    }
}
