//! Trajectory rollouts, CSV export and post-hoc evaluation of a run.

use std::path::{Path, PathBuf};

use rand::Rng;

use flocknrl_core::approx::Workspace;
use flocknrl_core::env::{self, AgentState, EnvConfig};
use flocknrl_core::fp::{self, InitialDistribution};
use flocknrl_core::metrics;
use flocknrl_core::rng::stream;
use flocknrl_core::sac::{ActionMode, Policy};
use flocknrl_core::{Sampler, StreamRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rundir::{self, RunDir};
use crate::table::{self, num};

pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const MATRIX_FILE: &str = "performance_matrix.csv";
pub const QUIVER_INITIAL_FILE: &str = "quiver_initial.csv";
pub const QUIVER_FINAL_FILE: &str = "quiver_final.csv";

/// Source of accelerations for a rollout.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Policy(&'a Policy, ActionMode),
    /// Independent uniform draws from `[-umax, umax]^d`.
    Random,
}

/// States of `n` independent agents at times `0..=steps`.
#[derive(Debug, Clone)]
pub struct Trajectories {
    /// `states[t][agent]`
    pub states: Vec<Vec<AgentState>>,
    /// Agent steps with obstacle contact.
    pub hits: usize,
}

impl Trajectories {
    pub fn agents(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Fraction of agent steps with obstacle contact.
    pub fn hit_frequency(&self) -> f64 {
        let n = self.agents() * self.steps();
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }

    pub fn final_states(&self) -> &[AgentState] {
        self.states.last().map_or(&[], Vec::as_slice)
    }
}

/// Roll out `n` agents from `start` for `steps` steps with the scenario's
/// noise. The agents do not interact.
pub fn simulate(
    cfg: &EnvConfig,
    start: &dyn Sampler,
    n: usize,
    steps: usize,
    controller: Controller<'_>,
    rng: &mut StreamRng,
) -> Result<Trajectories> {
    let runtime = Error::Runtime;
    let d = cfg.d;
    let mut current: Vec<AgentState> = (0..n)
        .map(|_| cfg.sanitize(&start.sample_one(rng)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| runtime(e.to_string()))?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut hits = 0;
    let mut ws = Workspace::new();
    let (mut flat, mut actions) = (Vec::new(), Vec::new());
    for _ in 0..steps {
        match controller {
            Controller::Policy(p, mode) => {
                flat.clear();
                for s in &current {
                    flat.extend_from_slice(&s.x);
                    flat.extend_from_slice(&s.v);
                }
                p.act_batch(&flat, n, mode, rng, &mut ws, &mut actions)
                    .map_err(|e| runtime(e.to_string()))?;
            }
            Controller::Random => {
                actions.clear();
                actions.extend((0..n * d).map(|_| rng.random_range(-cfg.umax..=cfg.umax)));
            }
        }
        let mut next = Vec::with_capacity(n);
        for (k, s) in current.iter().enumerate() {
            let noise: Vec<f64> = (0..d)
                .map(|_| {
                    if cfg.sigma_noise > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        cfg.sigma_noise * z
                    } else {
                        0.0
                    }
                })
                .collect();
            let out = env::step(s, &actions[k * d..(k + 1) * d], &noise, cfg).map_err(|e| runtime(e.to_string()))?;
            hits += out.hit as usize;
            next.push(out.state);
        }
        states.push(std::mem::replace(&mut current, next));
    }
    states.push(current);
    Ok(Trajectories { states, hits })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub path: PathBuf,
    pub rows: usize,
    pub hit_frequency: f64,
}

/// Write `steps` rows per agent (times `0..steps`) for `n_agents` agents
/// drawn from the last mean distribution and driven by the last policy at
/// its mean action.
pub fn export_trajectories(run: &Path, n_agents: usize, steps: usize, out: Option<&Path>) -> Result<ExportSummary> {
    let dir = RunDir::new(run);
    let scenario = dir.load_scenario()?;
    let j = dir.completed().min(scenario.config.iterations);
    if j == 0 {
        return Err(Error::Missing(dir.iter_dir(1)));
    }
    let last = dir.iter_dir(j);
    let policy = crate::checkpoint::load_policy(&last.join("policy.ckpt"))?;
    let mean = crate::checkpoint::load_flow(&last.join("mean_flow.ckpt"))?;
    let cfg = &scenario.config;
    let mut rng = stream(cfg.seed, "export", &[n_agents as u64, steps as u64]);
    let traj = simulate(&cfg.env, &mean, n_agents, steps, Controller::Policy(&policy, ActionMode::Mean), &mut rng)?;

    let path = out.map_or_else(|| run.join(TRAJECTORY_FILE), Path::to_path_buf);
    let mut header = table::header(&["episode", "t", "agent_id"]);
    header.extend(table::state_columns(cfg.env.d));
    let rows = (0..n_agents).flat_map(|a| {
        let traj = &traj;
        (0..steps).map(move |t| {
            let s = &traj.states[t][a];
            let mut row = vec!["0".to_string(), t.to_string(), a.to_string()];
            row.extend(s.x.iter().chain(&s.v).map(|v| num(*v)));
            row
        })
    });
    table::write(&path, &header, rows)?;
    Ok(ExportSummary {
        path,
        rows: n_agents * steps,
        hit_frequency: traj.hit_frequency(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub iterations: usize,
    pub files: Vec<PathBuf>,
}

/// Complete the performance matrix, rewrite the exploitability series and
/// emit quiver data: agents drawn from the initial distribution, and the same
/// number of agents after one episode from the last mean distribution under
/// the last policy.
pub fn eval_run(run: &Path) -> Result<EvalSummary> {
    let dir = RunDir::new(run);
    let scenario = dir.load_scenario()?;
    let cfg = &scenario.config;
    let mut state = dir.load_state(cfg)?;
    let j = state.j();
    if j == 0 {
        return Err(Error::Missing(dir.iter_dir(1)));
    }
    fp::complete_matrix(cfg, &mut state)?;

    let matrix_path = run.join(MATRIX_FILE);
    let mut header = vec!["i".to_string()];
    header.extend((1..=j).map(|c| format!("M_i{c}")));
    table::write(
        &matrix_path,
        &header,
        (1..=j).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend((1..=j).map(|c| num(state.matrix.get(i, c).expect("matrix is complete"))));
            row
        }),
    )?;
    let mut files = vec![matrix_path];

    let expl_path = run.join(rundir::EXPLOITABILITY_FILE);
    let series = metrics::exploitability_series(&state.matrix, j).map_err(|e| fp::FpError::Metrics { j, source: e })?;
    rundir::write_exploitability(&expl_path, &series)?;
    files.push(expl_path);

    let init = InitialDistribution::new(&cfg.init, &cfg.env)?;
    let mut rng = stream(cfg.seed, "quiver", &[]);
    let initial: Vec<AgentState> = (0..cfg.n_agents)
        .map(|_| cfg.env.sanitize(&init.sample_one(&mut rng)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Runtime(e.to_string()))?;
    let policy = &state.policies[j - 1];
    let traj = simulate(
        &cfg.env,
        &state.mean_flows[j - 1],
        cfg.n_agents,
        cfg.env.horizon,
        Controller::Policy(policy, ActionMode::Mean),
        &mut rng,
    )?;
    for (name, states) in [(QUIVER_INITIAL_FILE, &initial[..]), (QUIVER_FINAL_FILE, traj.final_states())] {
        let path = run.join(name);
        table::write(
            &path,
            &table::state_columns(cfg.env.d),
            states.iter().map(|s| s.x.iter().chain(&s.v).map(|v| num(*v)).collect()),
        )?;
        files.push(path);
    }
    Ok(EvalSummary { iterations: j, files })
}
