//! The passive observer: rate-threshold activity detection, scoring of padded
//! spans against ground truth, and destination-set device fingerprinting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shaping::{PaddingSchedule, ShapedResult};
use crate::trace::{grid_for_labels, rate_series, DirectionFilter, Trace, SECOND};

/// Flags bins whose byte count exceeds `mean + k * stddev` of the whole
/// series, then joins flagged runs separated by at most `min_quiet_gap`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDetector {
    pub bin: u64,
    pub k: f64,
    pub min_quiet_gap: u64,
}

impl Default for ThresholdDetector {
    fn default() -> Self {
        ThresholdDetector {
            bin: SECOND,
            k: 3.0,
            min_quiet_gap: 2 * SECOND,
        }
    }
}

impl ThresholdDetector {
    pub fn validate(&self) -> Result<()> {
        if self.bin == 0 {
            return Err(Error::invalid("detector bin must be at least 1 us"));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::invalid("detector k must be positive"));
        }
        Ok(())
    }
}

/// Detected activity intervals `[start, end)` in microseconds.
///
/// A series with zero variance has no bin above its mean and yields no
/// detections.
pub fn detect_activities(trace: &Trace, det: &ThresholdDetector) -> Result<Vec<(u64, u64)>> {
    det.validate()?;
    let series = rate_series(trace, det.bin, DirectionFilter::Both);
    if series.is_empty() {
        return Ok(Vec::new());
    }
    let n = series.len() as f64;
    let mean = series.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = series.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return Ok(Vec::new());
    }
    let threshold = mean + det.k * sd;
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (i, &x) in series.iter().enumerate() {
        if (x as f64) <= threshold {
            continue;
        }
        let start = i as u64 * det.bin;
        let end = ((i as u64 + 1) * det.bin).min(trace.duration());
        match out.last_mut() {
            Some(last) if start - last.1 <= det.min_quiet_gap => last.1 = end,
            _ => out.push((start, end)),
        }
    }
    Ok(out)
}

/// Genuine spans / spans. `None` for an empty schedule.
pub fn evaluate_confidence(schedule: &PaddingSchedule) -> Option<f64> {
    if schedule.spans.is_empty() {
        return None;
    }
    let genuine = schedule.spans.iter().filter(|s| s.genuine).count();
    Some(genuine as f64 / schedule.spans.len() as f64)
}

/// Period-level confidence: pattern instances starting in an activity period
/// over all instances. `None` when nothing was padded.
pub fn evaluate_period_confidence(schedule: &PaddingSchedule) -> Option<f64> {
    if schedule.instances.is_empty() {
        return None;
    }
    let genuine = schedule.instances.iter().filter(|i| i.genuine).count();
    Some(genuine as f64 / schedule.instances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Genuine,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanVerdict {
    pub start: u64,
    pub end: u64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    /// Threshold detections on the observer's view, microseconds.
    pub detected: Vec<(u64, u64)>,
    /// Each padded span is one attempted inference.
    pub spans: Vec<SpanVerdict>,
    /// Period-level confidence; `None` when nothing was padded.
    pub confidence: Option<f64>,
    /// Span-level confidence; `None` when nothing was padded.
    pub span_confidence: Option<f64>,
    /// Fraction of periods containing user activity.
    pub c_min: Option<f64>,
}

/// Runs the attack against a shaped result and scores it.
///
/// Detection only sees the shaped trace with cover flags and labels removed
/// and the schedule's span boundaries; ground truth enters only the scores.
pub fn classify_spans(shaped: &ShapedResult, det: &ThresholdDetector) -> Result<InferenceReport> {
    let observed = shaped.trace.observer_view();
    let detected = detect_activities(&observed, det)?;
    let schedule = &shaped.schedule;
    let spans = schedule
        .spans
        .iter()
        .map(|s| SpanVerdict {
            start: s.start,
            end: s.end,
            verdict: if s.genuine { Verdict::Genuine } else { Verdict::Unknown },
        })
        .collect();
    let c_min = if shaped.trace.labels().is_empty() || schedule.period_length == 0 {
        None
    } else {
        let g = grid_for_labels(shaped.trace.duration(), shaped.trace.labels(), schedule.period_length)?;
        Some(g.activity_fraction())
    };
    Ok(InferenceReport {
        detected,
        spans,
        confidence: evaluate_period_confidence(schedule),
        span_confidence: evaluate_confidence(schedule),
        c_min,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceFingerprint {
    /// Domains that by themselves identify this device.
    #[serde(default)]
    pub unique: BTreeSet<String>,
    /// Full set of domains the device contacts.
    #[serde(default)]
    pub domains: BTreeSet<String>,
}

impl DeviceFingerprint {
    fn all_domains(&self) -> BTreeSet<&str> {
        self.domains.iter().chain(&self.unique).map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FingerprintDb {
    pub entries: BTreeMap<String, DeviceFingerprint>,
}

impl FingerprintDb {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One identifying DNS query per device for fourteen common smart-home
    /// devices.
    pub fn identifying_queries() -> Self {
        let rows = [
            ("Amcrest Security Camera", "dh.amcrestsecurity.com"),
            ("Amazon Echo", "device-metrics-us.amazon.com"),
            ("Belkin Wemo Switch", "prod1-fs-xbcs-net-1101221371"),
            ("D-Link Wi-Fi Camera", "signal.auto.mydlink.com"),
            ("Geeni Lux lightbulb", "a.gw.tuyaus.com"),
            ("Google Home", "clients1.google.com"),
            ("Nest Cam Indoor", "nexus.dropcam.com"),
            ("Orvibo Smart Socket", "wiwo.orvibo.com"),
            ("Phillips Hue Starter Set", "diagnostics.meethue.com"),
            ("Samsung SmartCam", "xmpp.samsungsmartcam.com"),
            ("Samsung SmartThings Hub", "dc.connect.smartthings.com"),
            ("Sense Sleep Monitor", "sense-in.hello.is"),
            ("TP-Link Smart Plug", "devs.tplinkcloud.com"),
            ("Wink Hub", "agent-v1-production.wink.com"),
        ];
        FingerprintDb {
            entries: rows
                .iter()
                .map(|&(dev, q)| {
                    let set: BTreeSet<String> = [q.to_string()].into();
                    (
                        dev.to_string(),
                        DeviceFingerprint {
                            unique: set.clone(),
                            domains: set,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FingerprintMethod {
    UniqueDomain,
    SetSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "lowercase")]
pub enum Identification {
    Device { device: String, method: FingerprintMethod },
    Unknown,
}

/// Identifies a device from the domains it was seen contacting.
///
/// An observed domain listed as unique by exactly one device settles it.
/// Otherwise the device with the highest Jaccard similarity wins; a tie at the
/// top is an [`Error::Ambiguous`].
pub fn fingerprint_device(observed: &BTreeSet<String>, db: &FingerprintDb) -> Result<Identification> {
    if db.entries.is_empty() {
        return Err(Error::EmptyInput("fingerprint database is empty".into()));
    }
    if observed.is_empty() {
        return Ok(Identification::Unknown);
    }

    let mut unique_hits = BTreeSet::new();
    for d in observed {
        let owners: Vec<&String> = db
            .entries
            .iter()
            .filter(|(_, f)| f.unique.contains(d))
            .map(|(name, _)| name)
            .collect();
        if let [only] = owners.as_slice() {
            unique_hits.insert(*only);
        }
    }
    if unique_hits.len() == 1 {
        return Ok(Identification::Device {
            device: unique_hits.into_iter().next().unwrap().clone(),
            method: FingerprintMethod::UniqueDomain,
        });
    }

    let obs: BTreeSet<&str> = observed.iter().map(String::as_str).collect();
    let mut best = 0.0;
    let mut leaders: Vec<&String> = Vec::new();
    for (name, f) in &db.entries {
        let set = f.all_domains();
        let inter = obs.intersection(&set).count();
        let union = obs.union(&set).count();
        let j = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
        if j > best + 1e-12 {
            best = j;
            leaders = vec![name];
        } else if (j - best).abs() <= 1e-12 && j > 0.0 {
            leaders.push(name);
        }
    }
    match leaders.as_slice() {
        [] => Ok(Identification::Unknown),
        [one] => Ok(Identification::Device {
            device: (*one).clone(),
            method: FingerprintMethod::SetSimilarity,
        }),
        many => Err(Error::Ambiguous(many.iter().map(|s| (*s).clone()).collect())),
    }
}

/// Distinct non-cover flow labels in a trace, read as contacted domains.
pub fn observed_domains(trace: &Trace) -> BTreeSet<String> {
    trace
        .events()
        .iter()
        .filter(|e| !e.is_cover)
        .map(|e| e.flow_id.clone())
        .collect()
}
