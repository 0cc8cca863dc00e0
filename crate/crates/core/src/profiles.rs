//! Synthetic device profiles.
//!
//! Each profile is a set of constant-rate activity segments whose per-activity
//! mean rates have a chosen stddev/mean ratio. The three built-ins mimic the
//! activity shapes of a smart switch, a security camera and a voice assistant.

use crate::generator::{ActivitySegment, DeviceProfile};
use crate::trace::{Direction, TraceEvent, SECOND};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub name: String,
    /// One entry per segment, microseconds.
    pub segment_durations: Vec<u64>,
    /// Mean of the per-segment rates, bytes/s over both directions.
    pub mean_rate: f64,
    /// Population stddev of per-segment rates divided by their mean.
    pub stddev_ratio: f64,
    /// Fraction of each segment's bytes sent upstream.
    pub up_share: f64,
    /// Packets per second per direction.
    pub packets_per_second: u64,
}

/// Evenly spaced z-scores with mean 0 and population stddev 1.
fn standard_scores(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let raw: Vec<f64> = (0..n).map(|i| i as f64 - (n as f64 - 1.0) / 2.0).collect();
    let sd = (raw.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    raw.into_iter().map(|x| x / sd).collect()
}

fn split_evenly(total: u64, parts: u64) -> impl Iterator<Item = u64> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(move |i| base + u64::from(i < extra))
}

pub fn synthetic(spec: &SyntheticSpec) -> DeviceProfile {
    let z = standard_scores(spec.segment_durations.len());
    let segments = spec
        .segment_durations
        .iter()
        .zip(&z)
        .enumerate()
        .map(|(i, (&dur, &zi))| {
            let rate = spec.mean_rate * (1.0 + spec.stddev_ratio * zi);
            let total = (rate * dur as f64 / SECOND as f64).round().max(2.0) as u64;
            let up = ((total as f64 * spec.up_share).round() as u64).clamp(1, total - 1);
            let packets = (spec.packets_per_second * dur / SECOND).max(1);
            let mut events = Vec::new();
            for (dir, bytes, phase) in [(Direction::Up, up, 0.0), (Direction::Down, total - up, 0.5)] {
                let n = packets.min(bytes);
                for (j, size) in split_evenly(bytes, n).enumerate() {
                    let t = ((j as f64 + phase) * dur as f64 / n as f64) as u64;
                    events.push(TraceEvent::new(t, dir, size, spec.name.clone()));
                }
            }
            events.sort_by_key(|e| e.timestamp);
            ActivitySegment {
                kind: format!("{}-{}", spec.name, i),
                duration: dur,
                events,
            }
        })
        .collect();
    DeviceProfile {
        name: spec.name.clone(),
        background_rate_up: 0.0,
        background_rate_down: 0.0,
        background_packet_size: 100,
        segments,
    }
}

/// Seven 1 s activities, rate stddev 4.7% of the mean.
pub fn wemo() -> DeviceProfile {
    synthetic(&SyntheticSpec {
        name: "wemo".into(),
        segment_durations: vec![SECOND; 7],
        mean_rate: 4000.0,
        stddev_ratio: 0.047,
        up_share: 0.35,
        packets_per_second: 8,
    })
}

/// Seven 8-15 s activities, rate stddev 28.7% of the mean.
pub fn nest_cam() -> DeviceProfile {
    synthetic(&SyntheticSpec {
        name: "nest-cam".into(),
        segment_durations: [8, 12, 15, 9, 14, 10, 13].iter().map(|s| s * SECOND).collect(),
        mean_rate: 40_000.0,
        stddev_ratio: 0.287,
        up_share: 0.8,
        packets_per_second: 30,
    })
}

/// Nine 2-5 s activities, rate stddev 59.2% of the mean.
pub fn echo() -> DeviceProfile {
    synthetic(&SyntheticSpec {
        name: "echo".into(),
        segment_durations: [2, 5, 3, 4, 2, 5, 3, 4, 3].iter().map(|s| s * SECOND).collect(),
        mean_rate: 20_000.0,
        stddev_ratio: 0.592,
        up_share: 0.3,
        packets_per_second: 20,
    })
}

pub fn builtin(name: &str) -> Option<DeviceProfile> {
    match name {
        "wemo" => Some(wemo()),
        "nest-cam" => Some(nest_cam()),
        "echo" => Some(echo()),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["wemo", "nest-cam", "echo"];
