//! Decision functions that trigger non-activity padding at period boundaries.
//!
//! [`BernoulliDecision`] draws an independent coin per period. [`ActivityHmm`]
//! is a discrete hidden Markov model over binary "activity-like period"
//! observations; fit it to observed activity flags with [`hmm_fit`] and it
//! produces padding timings with realistic clustering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, SimRng};

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct BernoulliDecision {
    q: f64,
    rng: SimRng,
}

impl BernoulliDecision {
    pub fn new(q: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("q must be in [0, 1], got {q}")));
        }
        Ok(BernoulliDecision { q, rng: seed::rng(seed) })
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn decide(&mut self) -> bool {
        self.rng.gen_bool(self.q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityHmm {
    pub state_count: usize,
    /// Row-stochastic, `transition[i][j]` = P(next = j | current = i).
    pub transition: Vec<Vec<f64>>,
    /// Per-state probability of emitting an activity-like period.
    pub emission: Vec<f64>,
    pub initial: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ActivityHmm {
    pub fn validate(&self) -> Result<()> {
        let n = self.state_count;
        if n < 2 {
            return Err(Error::invalid("HMM needs at least 2 states"));
        }
        if self.transition.len() != n || self.emission.len() != n || self.initial.len() != n {
            return Err(Error::invalid("HMM parameter shapes do not match state_count"));
        }
        let stochastic = |row: &[f64]| {
            row.iter().all(|&x| (0.0..=1.0).contains(&x)) && (row.iter().sum::<f64>() - 1.0).abs() <= STOCHASTIC_TOL
        };
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n || !stochastic(row) {
                return Err(Error::invalid(format!("transition row {i} is not stochastic")));
            }
        }
        if !stochastic(&self.initial) {
            return Err(Error::invalid("initial distribution is not stochastic"));
        }
        if !self.emission.iter().all(|&e| (0.0..=1.0).contains(&e)) {
            return Err(Error::invalid("emission probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn emit_prob(&self, state: usize, obs: bool) -> f64 {
        if obs {
            self.emission[state]
        } else {
            1.0 - self.emission[state]
        }
    }

    /// Stationary distribution of the hidden chain, solved as a linear system
    /// so periodic chains are handled.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.state_count;
        // (A^T - I) pi = 0 with the last row replaced by sum(pi) = 1
        let mut m = vec![vec![0.0; n + 1]; n];
        for (i, row) in m.iter_mut().enumerate().take(n - 1) {
            for (j, cell) in row.iter_mut().enumerate().take(n) {
                *cell = self.transition[j][i] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for cell in m[n - 1].iter_mut() {
            *cell = 1.0;
        }
        solve(m).unwrap_or_else(|| vec![1.0 / n as f64; n])
    }

    /// Long-run fraction of periods emitting activity.
    pub fn stationary_activity_frequency(&self) -> f64 {
        self.stationary().iter().zip(&self.emission).map(|(p, e)| p * e).sum()
    }

    pub fn log_likelihood(&self, obs: &[bool]) -> f64 {
        forward(self, obs).1
    }
}

/// Gauss-Jordan elimination on an augmented `n x (n+1)` matrix.
fn solve(mut m: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        let div = m[col][col];
        for x in m[col].iter_mut() {
            *x /= div;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in col..=n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Some(m.into_iter().map(|row| row[n].max(0.0)).collect())
}

/// Scaled forward pass; returns normalized alphas and the log-likelihood.
fn forward(model: &ActivityHmm, obs: &[bool]) -> (Vec<Vec<f64>>, f64, Vec<f64>) {
    let n = model.state_count;
    let mut alphas = Vec::with_capacity(obs.len());
    let mut scales = Vec::with_capacity(obs.len());
    let mut ll = 0.0;
    let mut prev: Vec<f64> = Vec::new();
    for (t, &o) in obs.iter().enumerate() {
        let mut a: Vec<f64> = (0..n)
            .map(|j| {
                let pred = if t == 0 {
                    model.initial[j]
                } else {
                    (0..n).map(|i| prev[i] * model.transition[i][j]).sum()
                };
                pred * model.emit_prob(j, o)
            })
            .collect();
        let c: f64 = a.iter().sum();
        if c <= 0.0 {
            return (alphas, f64::NEG_INFINITY, scales);
        }
        for x in a.iter_mut() {
            *x /= c;
        }
        ll += c.ln();
        scales.push(c);
        prev = a.clone();
        alphas.push(a);
    }
    (alphas, ll, scales)
}

fn backward(model: &ActivityHmm, obs: &[bool], scales: &[f64]) -> Vec<Vec<f64>> {
    let n = model.state_count;
    let len = obs.len();
    let mut betas = vec![vec![1.0; n]; len];
    for t in (0..len.saturating_sub(1)).rev() {
        for i in 0..n {
            betas[t][i] = (0..n)
                .map(|j| model.transition[i][j] * model.emit_prob(j, obs[t + 1]) * betas[t + 1][j])
                .sum::<f64>()
                / scales[t + 1];
        }
    }
    betas
}

#[derive(Debug, Clone)]
pub struct HmmFit {
    pub model: ActivityHmm,
    /// Log-likelihood of the parameters entering each EM iteration, followed
    /// by that of the returned model.
    pub log_likelihoods: Vec<f64>,
    pub warnings: Vec<String>,
}

pub const DEFAULT_STATES: usize = 2;
pub const DEFAULT_ITERATIONS: usize = 100;
const LL_STOP_DELTA: f64 = 1e-6;

/// Baum-Welch estimation over a binary observation sequence.
///
/// Stops after `iterations` EM steps or when the log-likelihood improves by
/// less than 1e-6. A sequence with no variation yields a single-regime model
/// (emission pinned to the observed value, near-identity transitions) and a
/// warning.
pub fn hmm_fit(flags: &[bool], state_count: usize, iterations: usize) -> Result<HmmFit> {
    if state_count < 2 {
        return Err(Error::invalid("state_count must be at least 2"));
    }
    if flags.len() < 10 * state_count {
        return Err(Error::invalid(format!(
            "need at least {} observations for {} states, got {}",
            10 * state_count,
            state_count,
            flags.len()
        )));
    }
    let n = state_count;
    let freq = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
    if freq == 0.0 || freq == 1.0 {
        let stay = 0.99;
        let model = ActivityHmm {
            state_count: n,
            transition: (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| if i == j { stay } else { (1.0 - stay) / (n - 1) as f64 })
                        .collect()
                })
                .collect(),
            emission: vec![freq; n],
            initial: vec![1.0 / n as f64; n],
            seed: 0,
        };
        let ll = model.log_likelihood(flags);
        return Ok(HmmFit {
            model,
            log_likelihoods: vec![ll],
            warnings: vec![format!(
                "observations are all {}; returning a degenerate single-regime model",
                freq == 1.0
            )],
        });
    }

    // Emissions spread around the observed frequency break the state symmetry.
    let spread = freq.min(1.0 - freq);
    let mut model = ActivityHmm {
        state_count: n,
        transition: vec![vec![1.0 / n as f64; n]; n],
        emission: (0..n)
            .map(|i| freq + spread * (i as f64 / (n - 1) as f64 - 0.5))
            .collect(),
        initial: vec![1.0 / n as f64; n],
        seed: 0,
    };

    let mut lls = Vec::new();
    for _ in 0..iterations {
        let (alphas, ll, scales) = forward(&model, flags);
        lls.push(ll);
        let betas = backward(&model, flags, &scales);
        let len = flags.len();

        let gammas: Vec<Vec<f64>> = alphas
            .iter()
            .zip(&betas)
            .map(|(a, b)| {
                let g: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
                let s: f64 = g.iter().sum();
                g.into_iter().map(|x| x / s).collect()
            })
            .collect();

        let mut xi_sum = vec![vec![0.0; n]; n];
        for t in 0..len - 1 {
            let mut local = vec![vec![0.0; n]; n];
            let mut total = 0.0;
            for (i, row) in local.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    *cell = alphas[t][i]
                        * model.transition[i][j]
                        * model.emit_prob(j, flags[t + 1])
                        * betas[t + 1][j];
                    total += *cell;
                }
            }
            for (acc_row, row) in xi_sum.iter_mut().zip(&local) {
                for (acc, x) in acc_row.iter_mut().zip(row) {
                    *acc += x / total;
                }
            }
        }

        let mut next = model.clone();
        next.initial = gammas[0].clone();
        for i in 0..n {
            let from: f64 = xi_sum[i].iter().sum();
            if from > 0.0 {
                next.transition[i] = xi_sum[i].iter().map(|x| x / from).collect();
            }
            let occ: f64 = gammas.iter().map(|g| g[i]).sum();
            if occ > 0.0 {
                let on: f64 = gammas.iter().zip(flags).filter(|(_, &f)| f).map(|(g, _)| g[i]).sum();
                next.emission[i] = (on / occ).clamp(0.0, 1.0);
            }
        }
        renormalize(&mut next);
        model = next;

        if lls.len() >= 2 {
            let d = lls[lls.len() - 1] - lls[lls.len() - 2];
            if d.abs() < LL_STOP_DELTA {
                break;
            }
        }
    }
    lls.push(model.log_likelihood(flags));
    Ok(HmmFit {
        model,
        log_likelihoods: lls,
        warnings: Vec::new(),
    })
}

fn renormalize(m: &mut ActivityHmm) {
    for row in m.transition.iter_mut() {
        let s: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    let s: f64 = m.initial.iter().sum();
    for x in m.initial.iter_mut() {
        *x /= s;
    }
}

fn draw(rng: &mut SimRng, dist: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Stateful HMM sampler used as a decision function.
#[derive(Debug, Clone)]
pub struct HmmDecision {
    model: ActivityHmm,
    rng: SimRng,
    state: Option<usize>,
}

impl HmmDecision {
    pub fn new(model: ActivityHmm) -> Result<Self> {
        model.validate()?;
        let rng = seed::rng(model.seed);
        Ok(HmmDecision { model, rng, state: None })
    }

    /// Advances the hidden state one step (drawing from the initial
    /// distribution on the first call) and returns it with the emission.
    pub fn step(&mut self) -> (usize, bool) {
        let s = match self.state {
            None => draw(&mut self.rng, &self.model.initial),
            Some(prev) => draw(&mut self.rng, &self.model.transition[prev]),
        };
        self.state = Some(s);
        let e = self.model.emission[s];
        (s, self.rng.gen_bool(e))
    }
}

/// Samples `periods` hidden states and emissions; deterministic under the
/// model seed.
pub fn hmm_sample_path(model: &ActivityHmm, periods: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let mut d = HmmDecision::new(model.clone())?;
    Ok((0..periods).map(|_| d.step()).unzip())
}

pub fn hmm_sample(model: &ActivityHmm, periods: usize) -> Result<Vec<bool>> {
    Ok(hmm_sample_path(model, periods)?.1)
}

/// Serializable choice of decision function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecisionSpec {
    Bernoulli { q: f64 },
    Hmm { model: ActivityHmm },
}

impl DecisionSpec {
    pub fn bernoulli(q: f64) -> Self {
        DecisionSpec::Bernoulli { q }
    }

    /// Builds the runtime decision function. The Bernoulli stream is seeded
    /// with `seed`; an HMM keeps its own seed unless it is 0.
    pub fn build(&self, seed: u64) -> Result<DecisionFn> {
        Ok(match self {
            DecisionSpec::Bernoulli { q } => DecisionFn::Bernoulli(BernoulliDecision::new(*q, seed)?),
            DecisionSpec::Hmm { model } => {
                let mut m = model.clone();
                if m.seed == 0 {
                    m.seed = seed;
                }
                DecisionFn::Hmm(HmmDecision::new(m)?)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub enum DecisionFn {
    Bernoulli(BernoulliDecision),
    Hmm(HmmDecision),
}

impl DecisionFn {
    /// Called once per period, in order.
    pub fn decide(&mut self, _period_index: usize) -> bool {
        match self {
            DecisionFn::Bernoulli(b) => b.decide(),
            DecisionFn::Hmm(h) => h.step().1,
        }
    }
}
