//! Analytic confidence/overhead formulas, empirical overhead, and the
//! tradeoff sweep that runs generator, shaper and scorer over a grid of `q`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::evaluate_period_confidence;
use crate::decision::DecisionSpec;
use crate::error::{Error, Result};
use crate::generator::{generate_trace, DeviceProfile, GeneratorConfig};
use crate::seed;
use crate::shaping::{stp_shape, ShapingConfig};
use crate::trace::{Trace, SECOND};

/// Inputs to the closed-form model. `rate * period` is the pattern volume per
/// period and must be in the same unit as `d_a` and `d_not_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticParams {
    /// Probability that a period contains user activity.
    pub p: f64,
    /// Probability of non-activity padding in a period.
    pub q: f64,
    /// Combined upload + download pattern rate.
    pub rate: f64,
    /// Period length in seconds (1 in normalized mode).
    pub period: f64,
    /// Mean data per activity period.
    pub d_a: f64,
    /// Mean background data per non-activity period.
    pub d_not_a: f64,
}

impl AnalyticParams {
    /// Dimensionless mode: the pattern volume per period is given directly.
    pub fn normalized(p: f64, q: f64, rt: f64, d_a: f64, d_not_a: f64) -> Self {
        AnalyticParams {
            p,
            q,
            rate: rt,
            period: 1.0,
            d_a,
            d_not_a,
        }
    }

    /// Byte-denominated parameters for a shaping configuration.
    pub fn for_config(p: f64, q: f64, config: &ShapingConfig, d_a: f64, d_not_a: f64) -> Self {
        AnalyticParams {
            p,
            q,
            rate: (config.rate_up + config.rate_down) as f64,
            period: config.period as f64 / SECOND as f64,
            d_a,
            d_not_a,
        }
    }

    /// Parameters matching a generator run: the per-tick activity probability
    /// is converted to a per-period one, `D_A` is the mean segment volume and
    /// `D_notA` the background volume of one period.
    pub fn for_profile(profile: &DeviceProfile, p_tick: f64, decision_tick: u64, config: &ShapingConfig) -> Self {
        let ticks = config.period as f64 / decision_tick as f64;
        let p = if ticks == 1.0 { p_tick } else { 1.0 - (1.0 - p_tick).powf(ticks) };
        let secs = config.period as f64 / SECOND as f64;
        AnalyticParams::for_config(
            p,
            0.0,
            config,
            profile.mean_segment_bytes(),
            (profile.background_rate_up + profile.background_rate_down) * secs,
        )
    }

    pub fn with_q(self, q: f64) -> Self {
        AnalyticParams { q, ..self }
    }

    pub fn rt(&self) -> f64 {
        self.rate * self.period
    }
}

/// Expected adversary confidence `(1 + (1-p) q / p)^-1`.
///
/// `None` when `p = q = 0` (nothing is ever padded).
pub fn analytic_confidence(params: &AnalyticParams) -> Option<f64> {
    let AnalyticParams { p, q, .. } = *params;
    if p == 0.0 {
        return if q > 0.0 { Some(0.0) } else { None };
    }
    if q == 0.0 {
        return Some(1.0);
    }
    if q == 1.0 {
        return Some(p);
    }
    Some(1.0 / (1.0 + (1.0 - p) * q / p))
}

/// Expected bandwidth overhead
/// `(p RT + (1-p) q RT + (1-p)(1-q) D_notA) / (p D_A + (1-p) D_notA)`.
///
/// `None` when the denominator is zero.
pub fn analytic_overhead(params: &AnalyticParams) -> Option<f64> {
    let AnalyticParams { p, q, d_a, d_not_a, .. } = *params;
    let rt = params.rt();
    let den = p * d_a + (1.0 - p) * d_not_a;
    if den <= 0.0 {
        return None;
    }
    Some((p * rt + (1.0 - p) * q * rt + (1.0 - p) * (1.0 - q) * d_not_a) / den)
}

/// Bytes sent with the defense over bytes sent without it. `None` when the
/// original carried no bytes.
pub fn empirical_overhead(original: &Trace, shaped: &Trace) -> Option<f64> {
    let base = original.total_bytes();
    if base == 0 {
        return None;
    }
    Some(shaped.total_bytes() as f64 / base as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Analytic,
    Empirical,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Analytic => "analytic",
            PointKind::Empirical => "empirical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub q: f64,
    pub kind: PointKind,
    pub confidence: Option<f64>,
    pub confidence_stderr: f64,
    pub overhead: Option<f64>,
    pub overhead_stderr: f64,
    /// Runs contributing to the means (0 for analytic points).
    pub runs: usize,
    /// Set when the point could not be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TradeoffPoint {
    pub fn analytic(params: &AnalyticParams) -> Self {
        TradeoffPoint {
            q: params.q,
            kind: PointKind::Analytic,
            confidence: analytic_confidence(params),
            confidence_stderr: 0.0,
            overhead: analytic_overhead(params),
            overhead_stderr: 0.0,
            runs: 0,
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Values from `start` to `stop` inclusive, spaced by `step` and rounded to
/// ten decimals so printed grids stay clean.
pub fn q_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || stop < start || start < 0.0 || stop > 1.0 {
        return Err(Error::invalid("q grid must satisfy 0 <= start <= stop <= 1 and step > 0"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e10).round() / 1e10).collect())
}

pub fn analytic_sweep(base: &AnalyticParams, q_grid: &[f64]) -> Vec<TradeoffPoint> {
    q_grid.iter().map(|&q| TradeoffPoint::analytic(&base.with_q(q))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Shaping parameters; the decision function is replaced per point by
    /// Bernoulli(q).
    pub shaping: ShapingConfig,
    pub duration: u64,
    pub decision_tick: u64,
    pub base_seed: u64,
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub params: AnalyticParams,
    pub points: Vec<TradeoffPoint>,
}

/// Measurement of one generated-and-shaped trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSample {
    pub confidence: Option<f64>,
    pub overhead: Option<f64>,
}

/// Generates one trace, shapes it with Bernoulli(q) padding and scores it.
/// `run_seed` drives both the generator and the shaper through sub-streams.
pub fn run_once(profile: &DeviceProfile, p: f64, q: f64, config: &SweepConfig, run_seed: u64) -> Result<RunSample> {
    let gen = GeneratorConfig {
        p,
        duration: config.duration,
        decision_tick: config.decision_tick,
        seed: seed::substream(run_seed, 10),
    };
    let trace = generate_trace(profile, &gen)?;
    let shaping = ShapingConfig {
        decision: DecisionSpec::bernoulli(q),
        seed: seed::substream(run_seed, 11),
        ..config.shaping.clone()
    };
    let shaped = stp_shape(&trace, &shaping)?;
    Ok(RunSample {
        confidence: evaluate_period_confidence(&shaped.schedule),
        overhead: empirical_overhead(&trace, &shaped.trace),
    })
}

fn mean_stderr(xs: &[f64]) -> (Option<f64>, f64) {
    if xs.is_empty() {
        return (None, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(m), 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(m), (var / n).sqrt())
}

fn empirical_point(profile: &DeviceProfile, p: f64, index: usize, q: f64, runs: usize, config: &SweepConfig) -> TradeoffPoint {
    let mut cs = Vec::with_capacity(runs);
    let mut bs = Vec::with_capacity(runs);
    for j in 0..runs {
        match run_once(profile, p, q, config, seed::mix(config.base_seed, index as u64, j as u64)) {
            Ok(s) => {
                // runs with no padding at all have no defined confidence
                if let (Some(c), Some(b)) = (s.confidence, s.overhead) {
                    cs.push(c);
                    bs.push(b);
                }
            }
            Err(e) => {
                return TradeoffPoint {
                    q,
                    kind: PointKind::Empirical,
                    confidence: None,
                    confidence_stderr: 0.0,
                    overhead: None,
                    overhead_stderr: 0.0,
                    runs: 0,
                    error: Some(e.to_string()),
                }
            }
        }
    }
    let (confidence, confidence_stderr) = mean_stderr(&cs);
    let (overhead, overhead_stderr) = mean_stderr(&bs);
    TradeoffPoint {
        q,
        kind: PointKind::Empirical,
        confidence,
        confidence_stderr,
        overhead,
        overhead_stderr,
        runs: cs.len(),
        error: None,
    }
}

/// Empirical tradeoff curve plus the matching analytic curve, sorted by
/// `(q, kind)`.
///
/// Run `j` of grid point `i` uses seed `mix(base_seed, i, j)`. A point whose
/// runs fail is recorded with `error` set and the sweep continues.
pub fn sweep(profile: &DeviceProfile, p: f64, q_grid: &[f64], runs: usize, config: &SweepConfig) -> Result<SweepResult> {
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    if q_grid.is_empty() {
        return Err(Error::invalid("q grid is empty"));
    }
    if let Some(q) = q_grid.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::invalid(format!("q must be in [0, 1], got {q}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("p must be in [0, 1], got {p}")));
    }
    profile.validate()?;
    config.shaping.validate()?;

    let point = |(i, &q): (usize, &f64)| empirical_point(profile, p, i, q, runs, config);
    let mut points: Vec<TradeoffPoint> = if config.parallel {
        q_grid.par_iter().enumerate().map(point).collect()
    } else {
        q_grid.iter().enumerate().map(point).collect()
    };
    let params = AnalyticParams::for_profile(profile, p, config.decision_tick, &config.shaping);
    if params.d_not_a > 0.0 {
        log::info!("background bytes inside padded spans count against the pattern budget; analytic overhead assumes the same");
    }
    points.extend(analytic_sweep(&params, q_grid));
    points.sort_by(|a, b| a.q.total_cmp(&b.q).then(a.kind.cmp(&b.kind)));
    Ok(SweepResult { params, points })
}

pub const SWEEP_HEADER: &str = "q,kind,confidence,confidence_stderr,overhead,overhead_stderr,runs";

/// Writes the sweep CSV; undefined or failed values are left empty.
pub fn write_sweep_csv<W: Write>(mut w: W, points: &[TradeoffPoint]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for pt in points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            pt.q,
            pt.kind.as_str(),
            opt(pt.confidence),
            pt.confidence_stderr,
            opt(pt.overhead),
            pt.overhead_stderr,
            pt.runs
        )?;
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x` over pairs with both values
/// positive.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}
