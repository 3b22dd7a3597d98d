//! Fictitious play: alternate a best response against the current mean
//! distribution, estimation of the discounted state occupancy it induces,
//! and a refit of the running mean of those occupancies.
//!
//! Every random draw of iteration `j` comes from a named child stream of
//! the root seed, so a run resumed from a saved [`FpState`] reproduces an
//! uninterrupted one exactly.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::Workspace;
use crate::env::{self, AgentState, Bounds, EnvConfig, EnvError, FlockingEnv, PopulationSample};
use crate::flows::{self, FitReport, FlowConfig, FlowError, FlowModel};
use crate::math;
use crate::metrics::{self, ExploitabilitySeries, MetricsError, PerformanceMatrix};
use crate::rng::stream;
use crate::sac::{self, ActionMode, Policy, SacConfig, SacError};
use crate::{Sampler, StreamRng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FpError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("iteration {j}: {source}")]
    Env { j: usize, source: EnvError },
    #[error("iteration {j}: best response failed: {source}")]
    Sac { j: usize, source: SacError },
    #[error("iteration {j}: flow fit failed: {source}")]
    Flow { j: usize, source: FlowError },
    #[error("iteration {j}: evaluation failed: {source}")]
    Metrics { j: usize, source: MetricsError },
    #[error("resumed state is inconsistent: {0}")]
    BadState(String),
    #[error("stopped by observer: {0}")]
    Observer(String),
}

/// Position part of the initial distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(deny_unknown_fields)]
pub enum PositionInit {
    /// Uniform over the box.
    Uniform,
    /// Isotropic Gaussian cluster, wrapped onto the torus.
    Gaussian { mean: Vec<f64>, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub positions: PositionInit,
    /// Mean initial velocity; empty means zero.
    pub velocity_bias: Vec<f64>,
    pub velocity_std: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            positions: PositionInit::Uniform,
            velocity_bias: Vec::new(),
            velocity_std: 0.5,
        }
    }
}

/// Analytic initial distribution bound to an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    d: usize,
    bounds: Bounds,
    vmax: f64,
    spec: InitSpec,
}

impl InitialDistribution {
    pub fn new(spec: &InitSpec, env: &EnvConfig) -> Result<Self, FpError> {
        let d = env.d;
        if !spec.velocity_bias.is_empty() && spec.velocity_bias.len() != d {
            return Err(FpError::InvalidConfig(format!(
                "init.velocity_bias must have {d} entries"
            )));
        }
        if !(spec.velocity_std >= 0.0) {
            return Err(FpError::InvalidConfig("init.velocity_std must be non-negative".into()));
        }
        if let PositionInit::Gaussian { mean, std } = &spec.positions {
            if mean.len() != d || !(*std >= 0.0) {
                return Err(FpError::InvalidConfig(format!(
                    "init.positions: gaussian needs a {d}-dimensional mean and non-negative std"
                )));
            }
        }
        Ok(Self {
            d,
            bounds: env.bounds,
            vmax: env.vmax,
            spec: spec.clone(),
        })
    }

    fn gauss(mean: f64, std: f64, rng: &mut StreamRng) -> f64 {
        if std > 0.0 {
            Normal::new(mean, std).map(|n| n.sample(rng)).unwrap_or(mean)
        } else {
            mean
        }
    }
}

impl Sampler for InitialDistribution {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn sample_one(&self, rng: &mut StreamRng) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.d);
        for c in 0..self.d {
            let x = match &self.spec.positions {
                PositionInit::Uniform => rng.random_range(self.bounds.min..self.bounds.max),
                PositionInit::Gaussian { mean, std } => self.bounds.wrap(Self::gauss(mean[c], *std, rng)),
            };
            out.push(x);
        }
        for c in 0..self.d {
            let bias = self.spec.velocity_bias.get(c).copied().unwrap_or(0.0);
            out.push(Self::gauss(bias, self.spec.velocity_std, rng).clamp(-self.vmax, self.vmax));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct FpConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Size of the fixed population sample used by the reward.
    pub n_agents: usize,
    pub n_station_samples: usize,
    pub n_mean_samples: usize,
    pub station_horizon: usize,
    /// Discount for occupancy weighting and for the performance matrix.
    pub gamma: f64,
    pub n_eval: usize,
    pub env: EnvConfig,
    pub init: InitSpec,
    pub sac: SacConfig,
    pub flow: FlowConfig,
}

impl Default for FpConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 20,
            n_agents: 300,
            n_station_samples: 20_000,
            n_mean_samples: 20_000,
            station_horizon: 200,
            gamma: 0.99,
            n_eval: 100,
            env: EnvConfig::default(),
            init: InitSpec::default(),
            sac: SacConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

impl FpConfig {
    pub fn validate(&self) -> Result<(), FpError> {
        let bad = |m: &str| Err(FpError::InvalidConfig(m.into()));
        self.env.validate().map_err(|e| FpError::InvalidConfig(format!("env: {e}")))?;
        self.sac.validate().map_err(|e| FpError::InvalidConfig(format!("sac: {e}")))?;
        self.flow.validate().map_err(|e| FpError::InvalidConfig(format!("flow: {e}")))?;
        InitialDistribution::new(&self.init, &self.env)?;
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.n_agents == 0 || self.n_eval == 0 || self.station_horizon == 0 {
            return bad("n_agents, n_eval and station_horizon must be positive");
        }
        let need = 4 * self.env.d;
        if self.n_station_samples < need || self.n_mean_samples < need {
            return Err(FpError::InvalidConfig(format!(
                "n_station_samples and n_mean_samples must be at least {need}"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Time index with `P(t) ∝ gamma^t` on `0..horizon`, by inverse CDF.
pub fn sample_time_index(gamma: f64, horizon: usize, rng: &mut StreamRng) -> usize {
    if horizon <= 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let tail = math::exp(horizon as f64 * math::ln(gamma));
    let t = math::ln(1.0 - u * (1.0 - tail)) / math::ln(gamma);
    if t.is_finite() {
        (math::floor(t) as usize).min(horizon - 1)
    } else {
        0
    }
}

/// Draw `n` states from the discounted occupancy of `policy` started from
/// `init`: each sample picks a truncated-geometric time index and records
/// the state reached then. Episodes are simulated in lockstep.
pub fn estimate_stationary_distribution(
    policy: &Policy,
    cfg: &EnvConfig,
    init: &dyn Sampler,
    n: usize,
    horizon: usize,
    gamma: f64,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<f64>>, FpError> {
    let err = |source| FpError::Env { j: 0, source };
    let d = cfg.d;
    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        times.push(sample_time_index(gamma, horizon, rng));
        states.push(cfg.sanitize(&init.sample_one(rng)).map_err(err)?);
    }
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut active: Vec<usize> = Vec::new();
    for (i, &t) in times.iter().enumerate() {
        if t == 0 {
            out[i] = Some(states[i].to_flat());
        } else {
            active.push(i);
        }
    }
    let mut ws = Workspace::new();
    let (mut flat, mut actions) = (Vec::new(), Vec::new());
    let mut noise = vec![0.0; d];
    let mut k = 0;
    while !active.is_empty() {
        flat.clear();
        for &i in &active {
            flat.extend_from_slice(&states[i].x);
            flat.extend_from_slice(&states[i].v);
        }
        policy
            .act_batch(&flat, active.len(), ActionMode::Stochastic, rng, &mut ws, &mut actions)
            .map_err(|source| FpError::Sac { j: 0, source })?;
        for (slot, &i) in active.iter().enumerate() {
            metrics::draw_noise(&mut noise, cfg.sigma_noise, rng);
            let next = env::step(&states[i], &actions[slot * d..(slot + 1) * d], &noise, cfg).map_err(err)?;
            states[i] = next.state;
        }
        k += 1;
        active.retain(|&i| {
            if times[i] == k {
                out[i] = Some(states[i].to_flat());
                false
            } else {
                true
            }
        });
    }
    Ok(out.into_iter().map(|s| s.expect("every time index is reached")).collect())
}

/// Fit a fresh flow on samples of the uniform mixture of `components`.
pub fn update_mean_distribution(
    components: &[&dyn Sampler],
    n_samples: usize,
    cfg: &FlowConfig,
    rng: &mut StreamRng,
) -> Result<FitReport, FlowError> {
    if components.is_empty() {
        return Err(FlowError::InvalidConfig("mean distribution needs at least one component".into()));
    }
    let data = flows::mixture_sample(components, n_samples, rng);
    flows::fit(&data, cfg, rng)
}

/// Everything fictitious play carries from one iteration to the next.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FpState {
    pub policies: Vec<Policy>,
    /// Occupancy flow of each best response.
    pub flows: Vec<FlowModel>,
    /// Mean distribution after each iteration.
    pub mean_flows: Vec<FlowModel>,
    /// Fixed population sample of each iteration.
    pub populations: Vec<PopulationSample>,
    pub matrix: PerformanceMatrix,
    /// Per-episode training returns of each best response.
    pub curves: Vec<Vec<f64>>,
}

impl FpState {
    /// Completed iterations.
    pub fn j(&self) -> usize {
        self.policies.len()
    }

    fn check(&self) -> Result<(), FpError> {
        let j = self.j();
        if self.flows.len() != j || self.mean_flows.len() != j || self.populations.len() != j {
            return Err(FpError::BadState(format!(
                "{} policies, {} flows, {} mean flows, {} populations",
                j,
                self.flows.len(),
                self.mean_flows.len(),
                self.populations.len()
            )));
        }
        for a in 1..=j {
            for b in 1..=j {
                if self.matrix.get(a, b).is_none() {
                    return Err(FpError::BadState(format!("matrix entry ({a}, {b}) missing")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub j: usize,
    pub station_log_likelihood: f64,
    pub mean_log_likelihood: f64,
    /// Coordinates clamped while standardizing either fit.
    pub degenerate_coordinates: Vec<usize>,
    /// Entries computed this iteration as `(i, j, value)`.
    pub new_entries: Vec<(usize, usize, f64)>,
    pub exploitability: Option<ExploitabilitySeries>,
}

/// Starting distribution of iteration `j` (1-based).
fn start_distribution<'a>(init: &'a InitialDistribution, state: &'a FpState, j: usize) -> &'a dyn Sampler {
    if j == 1 {
        init
    } else {
        &state.mean_flows[j - 2]
    }
}

/// Run iterations `state.j() + 1 ..= cfg.iterations`. The observer sees the
/// state after every iteration; an error from it stops the run.
pub fn run<F>(cfg: &FpConfig, mut state: FpState, mut observer: F) -> Result<FpState, FpError>
where
    F: FnMut(&FpState, &IterationReport) -> Result<(), FpError>,
{
    cfg.validate()?;
    state.check()?;
    let init = InitialDistribution::new(&cfg.init, &cfg.env)?;
    let seed = cfg.seed;
    for j in state.j() + 1..=cfg.iterations {
        let ju = j as u64;
        let env_err = |source| FpError::Env { j, source };
        let flow_err = |source| FpError::Flow { j, source };
        let start = start_distribution(&init, &state, j);

        let mut rng = stream(seed, "population", &[ju]);
        let pop = PopulationSample::new(
            (0..cfg.n_agents)
                .map(|_| cfg.env.sanitize(&start.sample_one(&mut rng)))
                .collect::<Result<Vec<AgentState>, _>>()
                .map_err(env_err)?,
        )
        .map_err(env_err)?;

        let mut env = FlockingEnv::new(&cfg.env, &pop, start).map_err(env_err)?;
        let (policy, curve) = sac::best_response(&mut env, &cfg.sac, &mut stream(seed, "best-response", &[ju]))
            .map_err(|source| FpError::Sac { j, source })?;

        let data = estimate_stationary_distribution(
            &policy,
            &cfg.env,
            start,
            cfg.n_station_samples,
            cfg.station_horizon,
            cfg.gamma,
            &mut stream(seed, "occupancy", &[ju]),
        )
        .map_err(|e| match e {
            FpError::Env { source, .. } => FpError::Env { j, source },
            FpError::Sac { source, .. } => FpError::Sac { j, source },
            other => other,
        })?;
        let station = flows::fit(&data, &cfg.flow, &mut stream(seed, "occupancy-fit", &[ju])).map_err(flow_err)?;

        let mean = {
            let mut comps: Vec<&dyn Sampler> = state.flows.iter().map(|f| f as &dyn Sampler).collect();
            comps.push(&station.model);
            update_mean_distribution(&comps, cfg.n_mean_samples, &cfg.flow, &mut stream(seed, "mean-fit", &[ju]))
                .map_err(flow_err)?
        };

        let mut degenerate = station.degenerate_coordinates.clone();
        degenerate.extend(&mean.degenerate_coordinates);
        degenerate.sort_unstable();
        degenerate.dedup();

        state.policies.push(policy);
        state.flows.push(station.model);
        state.mean_flows.push(mean.model);
        state.populations.push(pop);
        state.curves.push(curve);

        let mut new_entries = Vec::new();
        for (row, col) in (1..=j).map(|k| (j, k)).chain((1..j).map(|i| (i, j))) {
            let value = evaluate_cell(cfg, &init, &state, row, col)?;
            state.matrix.set(row, col, value);
            new_entries.push((row, col, value));
        }
        let exploitability = if j >= 2 {
            Some(metrics::exploitability_series(&state.matrix, j).map_err(|source| FpError::Metrics { j, source })?)
        } else {
            None
        };
        let report = IterationReport {
            j,
            station_log_likelihood: station.final_log_likelihood,
            mean_log_likelihood: mean.final_log_likelihood,
            degenerate_coordinates: degenerate,
            new_entries,
            exploitability,
        };
        observer(&state, &report)?;
    }
    Ok(state)
}

/// `M[i][j]` with its own child stream.
pub fn evaluate_cell(
    cfg: &FpConfig,
    init: &InitialDistribution,
    state: &FpState,
    i: usize,
    j: usize,
) -> Result<f64, FpError> {
    let est = metrics::evaluate_entry(
        &state.policies[j - 1],
        start_distribution(init, state, i),
        &state.populations[i - 1],
        &cfg.env,
        cfg.n_eval,
        cfg.gamma,
        &mut stream(cfg.seed, "evaluate", &[i as u64, j as u64]),
    )
    .map_err(|source| FpError::Metrics { j, source })?;
    Ok(est.mean)
}

/// Fill every missing entry of the performance matrix.
pub fn complete_matrix(cfg: &FpConfig, state: &mut FpState) -> Result<(), FpError> {
    let init = InitialDistribution::new(&cfg.init, &cfg.env)?;
    let n = state.j();
    for i in 1..=n {
        for j in 1..=n {
            if state.matrix.get(i, j).is_none() {
                let v = evaluate_cell(cfg, &init, state, i, j)?;
                state.matrix.set(i, j, v);
            }
        }
    }
    Ok(())
}
