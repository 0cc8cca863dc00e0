//! Packet-metadata traces: the data model, CSV I/O, rate binning and period
//! segmentation shared by every other module.
//!
//! Times are integer microseconds from the start of the trace. A trace on disk
//! is a CSV file with header `timestamp_us,direction,bytes,flow_id,is_cover`.
//! Ground-truth activity labels live in a companion `<stem>.labels.csv` file
//! (`start_us,end_us,kind`) so the same trace can be replayed with or without
//! truth attached.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One second in trace time units.
pub const SECOND: u64 = 1_000_000;

pub const TRACE_HEADER: [&str; 5] = ["timestamp_us", "direction", "bytes", "flow_id", "is_cover"];
pub const LABEL_HEADER: [&str; 3] = ["start_us", "end_us", "kind"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "up" => Some(Direction::Up),
            "down" => Some(Direction::Down),
            _ => None,
        }
    }
}

/// Which directions a rate series should count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionFilter {
    Upload,
    Download,
    Both,
}

impl DirectionFilter {
    pub fn matches(self, d: Direction) -> bool {
        match self {
            DirectionFilter::Upload => d == Direction::Up,
            DirectionFilter::Download => d == Direction::Down,
            DirectionFilter::Both => true,
        }
    }
}

impl From<Direction> for DirectionFilter {
    fn from(d: Direction) -> Self {
        match d {
            Direction::Up => DirectionFilter::Upload,
            Direction::Down => DirectionFilter::Download,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp: u64,
    pub direction: Direction,
    pub size: u64,
    pub flow_id: String,
    #[serde(default)]
    pub is_cover: bool,
}

impl TraceEvent {
    pub fn new(timestamp: u64, direction: Direction, size: u64, flow_id: impl Into<String>) -> Self {
        TraceEvent {
            timestamp,
            direction,
            size,
            flow_id: flow_id.into(),
            is_cover: false,
        }
    }

    pub fn cover(timestamp: u64, direction: Direction, size: u64) -> Self {
        TraceEvent {
            timestamp,
            direction,
            size,
            flow_id: COVER_FLOW.to_string(),
            is_cover: true,
        }
    }
}

/// flow_id given to generated padding packets.
pub const COVER_FLOW: &str = "cover";

/// Ground-truth interval `[start, end)` of a user activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityLabel {
    pub start: u64,
    pub end: u64,
    pub kind: String,
}

impl ActivityLabel {
    pub fn new(start: u64, end: u64, kind: impl Into<String>) -> Self {
        ActivityLabel {
            start,
            end,
            kind: kind.into(),
        }
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersects(&self, start: u64, end: u64) -> bool {
        self.start < end && start < self.end
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t < self.end
    }
}

/// An immutable packet-metadata trace.
///
/// Events are sorted by timestamp, every timestamp is `< duration`, and labels
/// are sorted and non-overlapping. Transformations return new traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    events: Vec<TraceEvent>,
    duration: u64,
    labels: Vec<ActivityLabel>,
    /// Set when the events had to be re-sorted on construction.
    #[serde(default)]
    resorted: bool,
}

impl Trace {
    /// Builds a trace, sorting events (stably) and labels.
    ///
    /// `duration` is raised if needed so that it exceeds every event timestamp
    /// and reaches the end of every label.
    pub fn new(mut events: Vec<TraceEvent>, duration: u64, mut labels: Vec<ActivityLabel>) -> Result<Trace> {
        if let Some(e) = events.iter().find(|e| e.size == 0) {
            return Err(Error::invalid(format!("event at {} us has size 0", e.timestamp)));
        }
        let resorted = !events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp);
        if resorted {
            events.sort_by_key(|e| e.timestamp);
        }
        labels.sort_by_key(|l| (l.start, l.end));
        for l in &labels {
            if l.start >= l.end {
                return Err(Error::invalid(format!("label [{}, {}) is empty", l.start, l.end)));
            }
        }
        for w in labels.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::invalid(format!(
                    "labels [{}, {}) and [{}, {}) overlap",
                    w[0].start, w[0].end, w[1].start, w[1].end
                )));
            }
        }
        let mut duration = duration;
        if let Some(last) = events.last() {
            duration = duration.max(last.timestamp + 1);
        }
        if let Some(last) = labels.last() {
            duration = duration.max(last.end);
        }
        Ok(Trace {
            events,
            duration,
            labels,
            resorted,
        })
    }

    pub fn empty(duration: u64) -> Trace {
        Trace {
            events: Vec::new(),
            duration,
            labels: Vec::new(),
            resorted: false,
        }
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn labels(&self) -> &[ActivityLabel] {
        &self.labels
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    /// True when the source had non-monotonic timestamps that were re-sorted.
    pub fn was_resorted(&self) -> bool {
        self.resorted
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| e.size).sum()
    }

    pub fn bytes_in(&self, filter: DirectionFilter) -> u64 {
        self.events
            .iter()
            .filter(|e| filter.matches(e.direction))
            .map(|e| e.size)
            .sum()
    }

    pub fn with_labels(&self, labels: Vec<ActivityLabel>) -> Result<Trace> {
        Trace::new(self.events.clone(), self.duration, labels)
    }

    pub fn with_duration(&self, duration: u64) -> Trace {
        Trace {
            duration: duration.max(self.duration),
            ..self.clone()
        }
    }

    /// Copy of the trace with cover flags cleared and labels dropped: what an
    /// on-path observer sees.
    pub fn observer_view(&self) -> Trace {
        Trace {
            events: self
                .events
                .iter()
                .map(|e| TraceEvent {
                    is_cover: false,
                    ..e.clone()
                })
                .collect(),
            duration: self.duration,
            labels: Vec::new(),
            resorted: false,
        }
    }

    /// Index of the first event with `timestamp >= t`.
    pub fn lower_bound(&self, t: u64) -> usize {
        self.events.partition_point(|e| e.timestamp < t)
    }

    pub fn events_between(&self, start: u64, end: u64) -> &[TraceEvent] {
        let a = self.lower_bound(start);
        let b = self.lower_bound(end).max(a);
        &self.events[a..b]
    }
}

/// `foo.csv` -> `foo.labels.csv`.
pub fn labels_path_for(trace_path: &Path) -> PathBuf {
    sibling(trace_path, "labels.csv")
}

/// `foo.csv` -> `foo.meta.json`; records the trace duration, which the CSV
/// alone cannot carry when the trace ends in silence.
pub fn meta_path_for(trace_path: &Path) -> PathBuf {
    sibling(trace_path, "meta.json")
}

fn sibling(trace_path: &Path, suffix: &str) -> PathBuf {
    let stem = trace_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    trace_path.with_file_name(format!("{stem}.{suffix}"))
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    duration_us: u64,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(f));
    let got = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`", header.join(",")),
        ));
    }
    Ok(rdr)
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path, line: u64) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| parse_err(path, line, format!("expected {} fields, found {}", i + 1, rec.len())))
}

fn read_events(path: &Path) -> Result<Vec<TraceEvent>> {
    let mut rdr = open_csv(path, &TRACE_HEADER)?;
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != TRACE_HEADER.len() {
            return Err(parse_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let timestamp = field(&rec, 0, path, line)?
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("timestamp_us: {e}")))?;
        let dir_s = field(&rec, 1, path, line)?;
        let direction = Direction::parse(dir_s)
            .ok_or_else(|| parse_err(path, line, format!("direction must be up or down, got `{dir_s}`")))?;
        let size = field(&rec, 2, path, line)?
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("bytes: {e}")))?;
        if size == 0 {
            return Err(parse_err(path, line, "bytes must be at least 1"));
        }
        let flow_id = field(&rec, 3, path, line)?.to_string();
        let is_cover = match field(&rec, 4, path, line)? {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("is_cover must be 0 or 1, got `{other}`"))),
        };
        events.push(TraceEvent {
            timestamp,
            direction,
            size,
            flow_id,
            is_cover,
        });
    }
    Ok(events)
}

pub fn load_labels(path: &Path) -> Result<Vec<ActivityLabel>> {
    let mut rdr = open_csv(path, &LABEL_HEADER)?;
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let start = field(&rec, 0, path, line)?
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("start_us: {e}")))?;
        let end = field(&rec, 1, path, line)?
            .parse::<u64>()
            .map_err(|e| parse_err(path, line, format!("end_us: {e}")))?;
        if end <= start {
            return Err(parse_err(path, line, "end_us must exceed start_us"));
        }
        let kind = field(&rec, 2, path, line)?.to_string();
        labels.push(ActivityLabel { start, end, kind });
    }
    Ok(labels)
}

/// Loads a trace CSV plus its companion label and meta files when present.
///
/// Out-of-order timestamps are accepted; the result is re-sorted and
/// [`Trace::was_resorted`] reports it.
pub fn load_trace(path: &Path) -> Result<Trace> {
    let labels_path = labels_path_for(path);
    let labels = if labels_path.exists() {
        load_labels(&labels_path)?
    } else {
        Vec::new()
    };
    load_trace_with_labels(path, labels)
}

pub fn load_trace_with_labels(path: &Path, labels: Vec<ActivityLabel>) -> Result<Trace> {
    let events = read_events(path)?;
    let meta_path = meta_path_for(path);
    let duration = if meta_path.exists() {
        let f = File::open(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TraceMeta = serde_json::from_reader(BufReader::new(f))?;
        meta.duration_us
    } else {
        0
    };
    let trace = Trace::new(events, duration, labels)?;
    if trace.was_resorted() {
        log::warn!("{}: timestamps were not monotonic; events re-sorted", path.display());
    }
    Ok(trace)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Writes only the event CSV.
pub fn write_events(path: &Path, trace: &Trace) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(TRACE_HEADER)?;
    for e in trace.events() {
        w.write_record([
            e.timestamp.to_string().as_str(),
            e.direction.as_str(),
            e.size.to_string().as_str(),
            e.flow_id.as_str(),
            if e.is_cover { "1" } else { "0" },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn save_labels(path: &Path, labels: &[ActivityLabel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(LABEL_HEADER)?;
    for l in labels {
        w.write_record([l.start.to_string().as_str(), l.end.to_string().as_str(), l.kind.as_str()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes the event CSV, the meta file, and the label file when the trace
/// carries labels.
pub fn save_trace(path: &Path, trace: &Trace) -> Result<()> {
    write_events(path, trace)?;
    let meta_path = meta_path_for(path);
    let mut w = create(&meta_path)?;
    serde_json::to_writer(&mut w, &TraceMeta {
        duration_us: trace.duration(),
    })?;
    w.write_all(b"\n").map_err(|e| Error::io(&meta_path, e))?;
    w.flush().map_err(|e| Error::io(&meta_path, e))?;
    if !trace.labels().is_empty() {
        save_labels(&labels_path_for(path), trace.labels())?;
    }
    Ok(())
}

/// Bytes per `bin` microseconds; bin `i` covers `[i*bin, (i+1)*bin)`.
///
/// The series has `ceil(duration / bin)` entries.
pub fn rate_series(trace: &Trace, bin: u64, filter: DirectionFilter) -> Vec<u64> {
    assert!(bin >= 1, "bin must be at least 1 us");
    let n = trace.duration().div_ceil(bin) as usize;
    let mut out = vec![0u64; n];
    for e in trace.events().iter().filter(|e| filter.matches(e.direction)) {
        out[(e.timestamp / bin) as usize] += e.size;
    }
    out
}

/// Time divided into periods of length `period_length`, each flagged when a
/// ground-truth label intersects it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodGrid {
    pub period_length: u64,
    pub period_count: usize,
    pub activity_flags: Vec<bool>,
}

impl PeriodGrid {
    pub fn period_of(&self, t: u64) -> usize {
        (t / self.period_length) as usize
    }

    pub fn period_start(&self, i: usize) -> u64 {
        i as u64 * self.period_length
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.activity_flags.get(i).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.activity_flags.iter().filter(|&&f| f).count()
    }

    /// Fraction of periods flagged as active; 0 for an empty grid.
    pub fn activity_fraction(&self) -> f64 {
        if self.period_count == 0 {
            0.0
        } else {
            self.active_count() as f64 / self.period_count as f64
        }
    }
}

pub fn segment_periods(trace: &Trace, period: u64) -> Result<PeriodGrid> {
    grid_for_labels(trace.duration(), trace.labels(), period)
}

pub fn grid_for_labels(duration: u64, labels: &[ActivityLabel], period: u64) -> Result<PeriodGrid> {
    if period == 0 {
        return Err(Error::invalid("period length T must be at least 1 us"));
    }
    let period_count = duration.div_ceil(period) as usize;
    let mut flags = vec![false; period_count];
    for l in labels {
        let first = (l.start / period) as usize;
        let last = ((l.end - 1) / period) as usize;
        for f in flags.iter_mut().take(last + 1).skip(first) {
            *f = true;
        }
    }
    Ok(PeriodGrid {
        period_length: period,
        period_count,
        activity_flags: flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    /// Mean bytes (both directions) over activity periods.
    pub mean_activity_bytes: f64,
    /// True when there are no activity periods, in which case
    /// `mean_activity_bytes` is reported as 0.
    pub mean_activity_undefined: bool,
    pub mean_background_bytes: f64,
    pub activity_fraction: f64,
    pub peak_rate_up: f64,
    pub peak_rate_down: f64,
    /// Population stddev / mean of the per-activity mean rates.
    pub activity_rate_stddev_ratio: f64,
}

pub fn compute_stats(trace: &Trace, grid: &PeriodGrid) -> TraceStats {
    let mut per_period = vec![0u64; grid.period_count];
    for e in trace.events() {
        let i = grid.period_of(e.timestamp);
        if i < per_period.len() {
            per_period[i] += e.size;
        }
    }
    let (mut act_sum, mut act_n, mut bg_sum, mut bg_n) = (0u64, 0u64, 0u64, 0u64);
    for (bytes, &flag) in per_period.iter().zip(&grid.activity_flags) {
        if flag {
            act_sum += bytes;
            act_n += 1;
        } else {
            bg_sum += bytes;
            bg_n += 1;
        }
    }
    let mean = |s: u64, n: u64| if n == 0 { 0.0 } else { s as f64 / n as f64 };

    let peak = |f: DirectionFilter| rate_series(trace, SECOND, f).into_iter().max().unwrap_or(0) as f64;

    let rates: Vec<f64> = trace
        .labels()
        .iter()
        .map(|l| {
            let bytes: u64 = trace.events_between(l.start, l.end).iter().map(|e| e.size).sum();
            bytes as f64 / (l.len() as f64 / SECOND as f64)
        })
        .collect();
    let ratio = if rates.len() < 2 {
        0.0
    } else {
        let m = rates.iter().sum::<f64>() / rates.len() as f64;
        let var = rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / rates.len() as f64;
        if m > 0.0 {
            var.sqrt() / m
        } else {
            0.0
        }
    };

    TraceStats {
        mean_activity_bytes: mean(act_sum, act_n),
        mean_activity_undefined: act_n == 0,
        mean_background_bytes: mean(bg_sum, bg_n),
        activity_fraction: grid.activity_fraction(),
        peak_rate_up: peak(DirectionFilter::Upload),
        peak_rate_down: peak(DirectionFilter::Download),
        activity_rate_stddev_ratio: ratio,
    }
}
