//! Performance matrix and approximate exploitability.
//!
//! `M[i][j]` (1-based) is the mean discounted return of policy `j` for an
//! agent whose episodes start from the mean distribution of iteration
//! `i - 1` and whose rewards reference the population sample of row `i`.

use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::approx::Workspace;
use crate::env::{self, AgentState, EnvConfig, EnvError, PopulationSample};
use crate::math;
use crate::sac::{ActionMode, Policy, SacError};
use crate::{Sampler, StreamRng};

/// Diagonal entries considered for the smoothed best response.
pub const BR_WINDOW: usize = 5;
/// Trailing moving-average window.
pub const AVG_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("exploitability needs j >= 2, got {0}")]
    TooEarly(usize),
    #[error("performance matrix entry ({i}, {j}) is missing")]
    MissingEntry { i: usize, j: usize },
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Sac(#[from] SacError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub episodes: usize,
}

/// Monte-Carlo estimate of `E[sum_{t<T} gamma^t r_t]` for `policy`
/// (stochastic actions) from `init`, against the fixed population `pop`.
/// Episodes run in lockstep so the policy is evaluated in batches.
pub fn evaluate_entry(
    policy: &Policy,
    init: &dyn Sampler,
    pop: &PopulationSample,
    cfg: &EnvConfig,
    n_eval: usize,
    gamma: f64,
    rng: &mut StreamRng,
) -> Result<EntryEstimate, MetricsError> {
    if n_eval == 0 {
        return Err(MetricsError::NoEpisodes);
    }
    cfg.validate()?;
    let d = cfg.d;
    let mut states: Vec<AgentState> = (0..n_eval)
        .map(|_| cfg.sanitize(&init.sample_one(rng)))
        .collect::<Result<_, _>>()?;
    let mut returns = vec![0.0; n_eval];
    let mut flat = Vec::with_capacity(n_eval * 2 * d);
    let mut actions = Vec::new();
    let mut noise = vec![0.0; d];
    let mut ws = Workspace::new();
    let mut discount = 1.0;
    for _ in 0..cfg.horizon {
        flat.clear();
        for s in &states {
            flat.extend_from_slice(&s.x);
            flat.extend_from_slice(&s.v);
        }
        policy.act_batch(&flat, n_eval, ActionMode::Stochastic, rng, &mut ws, &mut actions)?;
        for (k, s) in states.iter_mut().enumerate() {
            draw_noise(&mut noise, cfg.sigma_noise, rng);
            let u = &actions[k * d..(k + 1) * d];
            let out = env::step(s, u, &noise, cfg)?;
            returns[k] += discount * env::reward(s, u, pop, cfg, out.penalty)?;
            *s = out.state;
        }
        discount *= gamma;
    }
    Ok(mean_and_error(&returns))
}

pub(crate) fn draw_noise(noise: &mut [f64], sigma: f64, rng: &mut StreamRng) {
    for n in noise.iter_mut() {
        *n = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        } else {
            0.0
        };
    }
}

fn mean_and_error(xs: &[f64]) -> EntryEstimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    EntryEstimate {
        mean,
        std_error: math::sqrt(var / n),
        episodes: xs.len(),
    }
}

/// Growable square matrix with optional entries, indexed from 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerformanceMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl PerformanceMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dense matrix from complete rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let mut m = Self::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i + 1, j + 1, v);
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i.wrapping_sub(1))?.get(j.wrapping_sub(1)).copied().flatten()
    }

    fn require(&self, i: usize, j: usize) -> Result<f64, MetricsError> {
        self.get(i, j).ok_or(MetricsError::MissingEntry { i, j })
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!(i >= 1 && j >= 1, "matrix indices start at 1");
        let n = i.max(j).max(self.size());
        for row in self.rows.iter_mut() {
            row.resize(n, None);
        }
        while self.rows.len() < n {
            self.rows.push(vec![None; n]);
        }
        self.rows[i - 1][j - 1] = Some(value);
    }

    /// Every `(i, j, value)` present, row-major.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    out.push((i + 1, j + 1, *v));
                }
            }
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }
}

/// `M[j][j] - mean(M[j][1..j-1])`
pub fn exploitability(m: &PerformanceMatrix, j: usize) -> Result<f64, MetricsError> {
    let diag = m.require(j, j)?;
    Ok(diag - past_mean(m, j)?)
}

fn past_mean(m: &PerformanceMatrix, j: usize) -> Result<f64, MetricsError> {
    if j < 2 {
        return Err(MetricsError::TooEarly(j));
    }
    let mut s = 0.0;
    for k in 1..j {
        s += m.require(j, k)?;
    }
    Ok(s / (j - 1) as f64)
}

/// Trailing mean over `min(window, available)` points.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let part = &series[lo..=i];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploitabilitySeries {
    /// Iteration index of each value, starting at 2.
    pub iterations: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

/// Raw and smoothed exploitability for iterations `2..=upto`. The smoothed
/// value replaces the diagonal term by the largest diagonal entry among the
/// last `min(5, j)` iterations, then averages over a trailing window of 10.
pub fn exploitability_series(m: &PerformanceMatrix, upto: usize) -> Result<ExploitabilitySeries, MetricsError> {
    let mut iterations = Vec::new();
    let mut raw = Vec::new();
    let mut best = Vec::new();
    for j in 2..=upto {
        let past = past_mean(m, j)?;
        raw.push(m.require(j, j)? - past);
        let lo = j + 1 - BR_WINDOW.min(j);
        let mut top = f64::NEG_INFINITY;
        for k in lo..=j {
            top = top.max(m.require(k, k)?);
        }
        best.push(top - past);
        iterations.push(j);
    }
    Ok(ExploitabilitySeries {
        iterations,
        raw,
        smoothed: moving_average(&best, AVG_WINDOW),
    })
}
