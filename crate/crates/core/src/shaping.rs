//! Traffic shaping defenses.
//!
//! [`stp_shape`] is stochastic traffic padding: time is cut into periods of
//! length `T`; user activity and randomly chosen non-activity periods are both
//! padded to the same constant-rate pattern, so an observer cannot tell which
//! padded spans hide real activity. Baselines: [`ilp_shape`] (pad everything),
//! [`firewall_filter`] (block everything) and [`vpn_aggregate`] (merge devices
//! into one tunnel). [`token_bucket_pad`] models the two-queue shaper that
//! realizes a constant-rate pattern without delaying device packets.
//!
//! Padding never delays or drops real packets. When real traffic exceeds the
//! pattern budget the excess passes through and the slice is reported as an
//! overflow.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{detect_activities, ThresholdDetector};
use crate::decision::DecisionSpec;
use crate::error::{Error, Result};
use crate::generator::DeviceProfile;
use crate::seed;
use crate::trace::{grid_for_labels, ActivityLabel, Direction, Trace, TraceEvent, SECOND};

pub const DEFAULT_COVER_PACKET: u64 = 1400;

/// How the shaper learns that user activity is happening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActivityDetector {
    /// Use the trace's ground-truth labels.
    Oracle,
    /// Run the rate-threshold detector over the unshaped trace.
    Threshold(ThresholdDetector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    /// Upload pattern rate, bytes/s.
    pub rate_up: u64,
    /// Download pattern rate, bytes/s.
    pub rate_down: u64,
    /// Period length T, microseconds.
    pub period: u64,
    pub decision: DecisionSpec,
    pub detector: ActivityDetector,
    pub cover_packet_size: u64,
    /// Granularity of the constant-rate pattern. Bin edges sit on multiples of
    /// this value and on slice edges.
    pub pattern_bin: u64,
    pub seed: u64,
}

impl ShapingConfig {
    pub fn new(rate_up: u64, rate_down: u64, period: u64, q: f64, seed: u64) -> Self {
        ShapingConfig {
            rate_up,
            rate_down,
            period,
            decision: DecisionSpec::bernoulli(q),
            detector: ActivityDetector::Oracle,
            cover_packet_size: DEFAULT_COVER_PACKET,
            pattern_bin: SECOND,
            seed,
        }
    }

    /// Rates at the profile's per-direction peak, `T` the smallest whole
    /// number of seconds strictly longer than any segment.
    pub fn for_profile(profile: &DeviceProfile, q: f64, seed: u64) -> Self {
        let period = (profile.max_segment_duration() / SECOND + 1) * SECOND;
        ShapingConfig::new(
            profile.peak_rate(Direction::Up),
            profile.peak_rate(Direction::Down),
            period,
            q,
            seed,
        )
    }

    /// Same choice of defaults derived from a labelled trace.
    pub fn for_trace(trace: &Trace, q: f64, seed: u64) -> Result<Self> {
        let longest = trace
            .labels()
            .iter()
            .map(|l| l.len())
            .max()
            .ok_or_else(|| Error::invalid("labels required to choose default rates and period"))?;
        let peak = |dir: Direction| {
            trace
                .labels()
                .iter()
                .map(|l| {
                    let mut bins = std::collections::BTreeMap::<u64, u64>::new();
                    for e in trace.events_between(l.start, l.end).iter().filter(|e| e.direction == dir) {
                        *bins.entry(e.timestamp / SECOND).or_default() += e.size;
                    }
                    bins.values().copied().max().unwrap_or(0)
                })
                .max()
                .unwrap_or(0)
        };
        Ok(ShapingConfig::new(
            peak(Direction::Up),
            peak(Direction::Down),
            (longest / SECOND + 1) * SECOND,
            q,
            seed,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_up == 0 && self.rate_down == 0 {
            return Err(Error::invalid("rate_up + rate_down must be positive"));
        }
        if self.period == 0 {
            return Err(Error::invalid("period T must be at least 1 us"));
        }
        if self.cover_packet_size == 0 {
            return Err(Error::invalid("cover_packet_size must be at least 1"));
        }
        if self.pattern_bin == 0 {
            return Err(Error::invalid("pattern_bin must be at least 1 us"));
        }
        Ok(())
    }

    pub fn rate(&self, dir: Direction) -> u64 {
        match dir {
            Direction::Up => self.rate_up,
            Direction::Down => self.rate_down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedSpan {
    pub start: u64,
    pub end: u64,
    /// The span overlaps real user activity.
    pub genuine: bool,
}

impl PaddedSpan {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    Decision,
    Activity,
}

/// One repetition of the fixed pattern, `[start, start + T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternInstance {
    pub start: u64,
    pub trigger: Trigger,
    /// The period in which the instance starts contains user activity.
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingSchedule {
    pub period_length: u64,
    pub spans: Vec<PaddedSpan>,
    pub instances: Vec<PatternInstance>,
}

impl PaddingSchedule {
    pub fn padded_time(&self) -> u64 {
        self.spans.iter().map(|s| s.len()).sum()
    }

    /// Span boundaries only, as an observer would reconstruct them.
    pub fn boundaries(&self) -> Vec<(u64, u64)> {
        self.spans.iter().map(|s| (s.start, s.end)).collect()
    }
}

/// A pattern slice in which real traffic of one direction exceeded its budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowSlice {
    pub start: u64,
    pub end: u64,
    pub direction: Direction,
    pub budget: u64,
    pub real_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedResult {
    pub trace: Trace,
    pub schedule: PaddingSchedule,
    pub overflow: Vec<OverflowSlice>,
}

/// Activity intervals as the shaper sees them: sorted, merged.
fn activity_intervals(trace: &Trace, detector: &ActivityDetector) -> Result<Vec<(u64, u64)>> {
    let raw: Vec<(u64, u64)> = match detector {
        ActivityDetector::Oracle => trace.labels().iter().map(|l| (l.start, l.end)).collect(),
        ActivityDetector::Threshold(det) => detect_activities(trace, det)?,
    };
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(raw.len());
    for (a, b) in raw {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct OpenSpan {
    start: u64,
    end: u64,
    triggered: bool,
}

struct Scheduler {
    period: u64,
    spans: Vec<PaddedSpan>,
    instances: Vec<PatternInstance>,
    cur: Option<OpenSpan>,
}

impl Scheduler {
    fn close(&mut self) {
        if let Some(c) = self.cur.take() {
            self.spans.push(PaddedSpan {
                start: c.start,
                end: c.end,
                genuine: c.triggered,
            });
        }
    }

    fn open(&mut self, start: u64, trigger: Trigger) {
        self.close();
        self.cur = Some(OpenSpan {
            start,
            end: start + self.period,
            triggered: trigger == Trigger::Activity,
        });
        self.instances.push(PatternInstance {
            start,
            trigger,
            genuine: false,
        });
    }

    /// Repeats the pattern once more at the end of the open span.
    fn extend(&mut self, trigger: Trigger) {
        let c = self.cur.as_mut().expect("extend without an open span");
        self.instances.push(PatternInstance {
            start: c.end,
            trigger,
            genuine: false,
        });
        c.end += self.period;
        if trigger == Trigger::Activity {
            c.triggered = true;
        }
    }

    /// Activity observed over `[a, b)`.
    fn activity(&mut self, a: u64, b: u64) {
        match &mut self.cur {
            Some(c) if c.end >= a => c.triggered = true,
            _ => self.open(a, Trigger::Activity),
        }
        while self.cur.as_ref().is_some_and(|c| c.end < b) {
            self.extend(Trigger::Activity);
        }
    }
}

/// Runs the period/decision/activity state machine and returns the schedule
/// (instance and span `genuine` flags still unset by ground truth).
fn schedule_stp(duration: u64, activity: &[(u64, u64)], config: &ShapingConfig) -> Result<PaddingSchedule> {
    let period = config.period;
    let mut decide = config.decision.build(seed::substream(config.seed, 1))?;
    let mut offsets = seed::rng(seed::substream(config.seed, 2));
    let mut s = Scheduler {
        period,
        spans: Vec::new(),
        instances: Vec::new(),
        cur: None,
    };
    let periods = duration.div_ceil(period);
    let mut ai = 0usize;
    for k in 0..periods {
        let t0 = k * period;
        let t1 = t0 + period;
        if s.cur.as_ref().is_some_and(|c| c.end < t0) {
            s.close();
        }
        let mut pending = None;
        if decide.decide(k as usize) {
            if s.cur.is_some() {
                // shaping is live at the boundary: repeat the pattern
                s.extend(Trigger::Decision);
            } else {
                pending = Some(t0 + offsets.gen_range(0..period));
            }
        }
        while ai < activity.len() && activity[ai].0 < t1 {
            let (a, b) = activity[ai];
            let a = a.max(t0);
            let b_clip = b.min(t1);
            if a < b_clip {
                if let Some(p) = pending {
                    if p <= a {
                        s.open(p, Trigger::Decision);
                    }
                    // an activity starting first replaces the pending decoy
                    pending = None;
                }
                s.activity(a, b_clip);
            }
            if b <= t1 {
                ai += 1;
            } else {
                break;
            }
        }
        if let Some(p) = pending {
            s.open(p, Trigger::Decision);
        }
    }
    s.close();
    Ok(PaddingSchedule {
        period_length: period,
        spans: s.spans,
        instances: s.instances,
    })
}

/// Marks spans and instances against ground truth. Without labels the
/// trigger-based span flags are kept.
fn apply_truth(schedule: &mut PaddingSchedule, labels: &[ActivityLabel], duration: u64) -> Result<()> {
    if labels.is_empty() {
        return Ok(());
    }
    let horizon = schedule.spans.last().map_or(duration, |s| s.end.max(duration));
    let grid = grid_for_labels(horizon, labels, schedule.period_length)?;
    for inst in schedule.instances.iter_mut() {
        inst.genuine = grid.is_active(grid.period_of(inst.start));
    }
    for span in schedule.spans.iter_mut() {
        let i = labels.partition_point(|l| l.end <= span.start);
        span.genuine = labels.get(i).is_some_and(|l| l.intersects(span.start, span.end));
    }
    Ok(())
}

/// Budget for `[a, b)` within a slice starting at `origin`, telescoping so a
/// slice's bins sum to `floor(rate * len)`.
fn bin_budget(rate: u64, origin: u64, a: u64, b: u64) -> u64 {
    let cum = |t: u64| (rate as u128 * (t - origin) as u128 / SECOND as u128) as u64;
    cum(b) - cum(a)
}

fn push_cover(out: &mut Vec<TraceEvent>, dir: Direction, a: u64, b: u64, bytes: u64, packet: u64) {
    if bytes == 0 {
        return;
    }
    let k = bytes.div_ceil(packet);
    let width = b - a;
    for i in 0..k {
        let t = a + (i as u128 * width as u128 / k as u128) as u64;
        let size = if i + 1 == k { bytes - (k - 1) * packet } else { packet };
        out.push(TraceEvent::cover(t, dir, size));
    }
}

/// Pads each slice to the constant-rate pattern. Returns cover events and
/// per-slice overflow records.
fn fill_slices(
    trace: &Trace,
    slices: impl Iterator<Item = (u64, u64)>,
    rates: [(Direction, u64); 2],
    pattern_bin: u64,
    packet: u64,
) -> (Vec<TraceEvent>, Vec<OverflowSlice>) {
    let mut cover = Vec::new();
    let mut overflow = Vec::new();
    for (s0, s1) in slices {
        for (dir, rate) in rates {
            let mut slice_real = 0;
            let mut over = false;
            let mut a = s0;
            while a < s1 {
                let b = ((a / pattern_bin + 1) * pattern_bin).min(s1);
                let budget = bin_budget(rate, s0, a, b);
                let real: u64 = trace
                    .events_between(a, b)
                    .iter()
                    .filter(|e| e.direction == dir)
                    .map(|e| e.size)
                    .sum();
                slice_real += real;
                if real > budget {
                    over = true;
                } else {
                    push_cover(&mut cover, dir, a, b, budget - real, packet);
                }
                a = b;
            }
            if over {
                overflow.push(OverflowSlice {
                    start: s0,
                    end: s1,
                    direction: dir,
                    budget: bin_budget(rate, s0, s0, s1),
                    real_bytes: slice_real,
                });
            }
        }
    }
    (cover, overflow)
}

fn merge(trace: &Trace, cover: Vec<TraceEvent>, horizon: u64) -> Result<Trace> {
    let mut events = trace.events().to_vec();
    events.extend(cover);
    events.sort_by_key(|e| e.timestamp);
    Trace::new(events, trace.duration().max(horizon), trace.labels().to_vec())
}

/// Stochastic traffic padding.
///
/// At each period boundary the decision function is consulted once. If it
/// fires while shaping is live the pattern is repeated at the end of the
/// current span; otherwise a start offset is drawn uniformly in `[0, T)`.
/// Activity outside a span opens a span at the activity start (replacing a
/// decoy scheduled later in the same period); activity that outlasts a span
/// extends it in `T` steps. Every real event is passed through unchanged.
pub fn stp_shape(trace: &Trace, config: &ShapingConfig) -> Result<ShapedResult> {
    config.validate()?;
    let activity = activity_intervals(trace, &config.detector)?;
    let mut schedule = schedule_stp(trace.duration(), &activity, config)?;
    apply_truth(&mut schedule, trace.labels(), trace.duration())?;
    let period = config.period;
    let (cover, overflow) = fill_slices(
        trace,
        schedule.spans.iter().flat_map(|s| {
            (0..s.len() / period).map(move |j| (s.start + j * period, s.start + (j + 1) * period))
        }),
        [(Direction::Up, config.rate_up), (Direction::Down, config.rate_down)],
        config.pattern_bin,
        config.cover_packet_size,
    );
    let horizon = schedule.spans.last().map_or(0, |s| s.end);
    Ok(ShapedResult {
        trace: merge(trace, cover, horizon)?,
        schedule,
        overflow,
    })
}

/// Independent link padding: every 1 s bin of the trace, rounded up to whole
/// seconds, is padded to the target rate in each direction.
pub fn ilp_shape(trace: &Trace, rate_up: u64, rate_down: u64) -> Result<ShapedResult> {
    ilp_shape_with_packet(trace, rate_up, rate_down, DEFAULT_COVER_PACKET)
}

pub fn ilp_shape_with_packet(trace: &Trace, rate_up: u64, rate_down: u64, packet: u64) -> Result<ShapedResult> {
    if rate_up == 0 || rate_down == 0 {
        return Err(Error::invalid("ILP rates must be positive"));
    }
    if packet == 0 {
        return Err(Error::invalid("cover packet size must be at least 1"));
    }
    let end = trace.duration().div_ceil(SECOND) * SECOND;
    let mut schedule = PaddingSchedule {
        period_length: SECOND,
        spans: if end > 0 {
            vec![PaddedSpan {
                start: 0,
                end,
                genuine: false,
            }]
        } else {
            Vec::new()
        },
        instances: (0..end / SECOND)
            .map(|i| PatternInstance {
                start: i * SECOND,
                trigger: Trigger::Decision,
                genuine: false,
            })
            .collect(),
    };
    apply_truth(&mut schedule, trace.labels(), trace.duration())?;
    let (cover, overflow) = fill_slices(
        trace,
        (0..end / SECOND).map(|i| (i * SECOND, (i + 1) * SECOND)),
        [(Direction::Up, rate_up), (Direction::Down, rate_down)],
        SECOND,
        packet,
    );
    Ok(ShapedResult {
        trace: merge(trace, cover, end)?,
        schedule,
        overflow,
    })
}

/// The WAN view when a firewall blocks all device traffic.
pub fn firewall_filter(trace: &Trace) -> Trace {
    Trace::new(Vec::new(), trace.duration(), trace.labels().to_vec()).expect("labels already validated")
}

pub const TUNNEL_FLOW: &str = "vpn-tunnel";

/// Merges device traces into one tunnel flow. Each event grows by
/// `encapsulation` bytes; labels are prefixed with the device name and
/// overlapping labels are joined.
pub fn vpn_aggregate(traces: &[(String, Trace)], encapsulation: u64) -> Result<Trace> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("vpn_aggregate needs at least one trace".into()));
    }
    let mut events = Vec::with_capacity(traces.iter().map(|(_, t)| t.events().len()).sum());
    let mut labels: Vec<ActivityLabel> = Vec::new();
    let mut duration = 0;
    for (name, t) in traces {
        events.extend(t.events().iter().map(|e| TraceEvent {
            size: e.size + encapsulation,
            flow_id: TUNNEL_FLOW.to_string(),
            ..e.clone()
        }));
        labels.extend(
            t.labels()
                .iter()
                .map(|l| ActivityLabel::new(l.start, l.end, format!("{name}:{}", l.kind))),
        );
        duration = duration.max(t.duration());
    }
    events.sort_by_key(|e| e.timestamp);
    labels.sort_by_key(|l| (l.start, l.end));
    let mut merged: Vec<ActivityLabel> = Vec::with_capacity(labels.len());
    for l in labels {
        match merged.last_mut() {
            Some(last) if l.start < last.end => {
                last.end = last.end.max(l.end);
                last.kind = format!("{}+{}", last.kind, l.kind);
            }
            _ => merged.push(l),
        }
    }
    Trace::new(events, duration, merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SendKind {
    /// A device packet or one fragment of it.
    Device { packet: usize, fragment: u32, fragments: u32 },
    Cover,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendRecord {
    pub time: u64,
    pub size: u64,
    pub kind: SendKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendLog {
    pub sends: Vec<SendRecord>,
    /// Indices of device packets larger than one token that were split across
    /// consecutive send opportunities.
    pub fragmented: Vec<usize>,
}

/// Two-queue constant-rate shaper.
///
/// Tokens of `cover_size` bytes arrive at `rate` bytes/s into a bucket that
/// holds one token, so send opportunity `k` falls at
/// `floor(k * cover_size / rate)` seconds. Each opportunity sends the head of
/// the device queue if any packet has arrived, else a cover packet. Device
/// packets larger than a token take several consecutive opportunities.
/// `real_packets` holds `(arrival_us, bytes)`; equal arrivals keep input order.
pub fn token_bucket_pad(real_packets: &[(u64, u64)], rate: u64, cover_size: u64, duration: u64) -> Result<SendLog> {
    if rate == 0 {
        return Err(Error::invalid("token rate must be positive"));
    }
    if cover_size == 0 {
        return Err(Error::invalid("cover packet size must be at least 1"));
    }
    if let Some(i) = real_packets.iter().position(|&(_, s)| s == 0) {
        return Err(Error::invalid(format!("device packet {i} has size 0")));
    }
    let mut order: Vec<usize> = (0..real_packets.len()).collect();
    order.sort_by_key(|&i| real_packets[i].0);

    let mut queue: VecDeque<(usize, u64, u32)> = VecDeque::new();
    let mut next_arrival = 0;
    let mut sends = Vec::new();
    let mut fragmented = Vec::new();
    for k in 0u64.. {
        let t = (k as u128 * cover_size as u128 * SECOND as u128 / rate as u128) as u64;
        if t >= duration {
            break;
        }
        while next_arrival < order.len() && real_packets[order[next_arrival]].0 <= t {
            let idx = order[next_arrival];
            let size = real_packets[idx].1;
            if size > cover_size {
                fragmented.push(idx);
            }
            queue.push_back((idx, size, 0));
            next_arrival += 1;
        }
        match queue.front_mut() {
            Some((idx, remaining, sent)) => {
                let total = real_packets[*idx].1.div_ceil(cover_size) as u32;
                let size = (*remaining).min(cover_size);
                sends.push(SendRecord {
                    time: t,
                    size,
                    kind: SendKind::Device {
                        packet: *idx,
                        fragment: *sent,
                        fragments: total,
                    },
                });
                *remaining -= size;
                *sent += 1;
                if *remaining == 0 {
                    queue.pop_front();
                }
            }
            None => sends.push(SendRecord {
                time: t,
                size: cover_size,
                kind: SendKind::Cover,
            }),
        }
    }
    Ok(SendLog { sends, fragmented })
}
