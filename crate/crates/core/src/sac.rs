//! Soft actor-critic best response with an explicit state-value network.
//!
//! Networks see scaled observations and normalized actions `u / umax`.
//! The actor outputs a mean and a log-std per action coordinate; actions
//! are `umax * tanh(z)` with `z` Gaussian.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, AdamConfig, ApproxError, Mlp, Workspace};
use crate::env::{EnvError, Environment, ObsScaling};
use crate::math;
use crate::StreamRng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SacError {
    #[error("non-finite {what} in {net}")]
    NonFinite { net: &'static str, what: &'static str },
    #[error("replay buffer holds {len} transitions, batch needs {batch}")]
    BufferTooSmall { len: usize, batch: usize },
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid SAC config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Stochastic,
    Mean,
}

/// Squashed-Gaussian policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    net: Mlp,
    action_scale: f64,
    obs: ObsScaling,
}

/// `log N(eps; 0, 1)` summed, plus the squashing and scaling corrections.
fn squashed_log_prob(eps: f64, log_std: f64, z: f64, scale: f64) -> f64 {
    -0.5 * eps * eps - 0.5 * math::LN_2PI - log_std - math::ln_one_minus_tanh_sq(z) - math::ln(scale)
}

impl Policy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        action_scale: f64,
        obs: ObsScaling,
        rng: &mut StreamRng,
    ) -> Result<Self, SacError> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self::from_parts(Mlp::new(&sizes, Activation::Relu, rng)?, action_scale, obs)
    }

    pub fn from_parts(net: Mlp, action_scale: f64, obs: ObsScaling) -> Result<Self, SacError> {
        if !(action_scale > 0.0 && action_scale.is_finite()) {
            return Err(SacError::InvalidConfig("action scale must be positive".into()));
        }
        if net.output_dim() % 2 != 0 || net.output_dim() == 0 {
            return Err(SacError::InvalidConfig("policy net must output mean and log-std pairs".into()));
        }
        if obs.dim() != net.input_dim() {
            return Err(SacError::DimensionMismatch {
                expected: net.input_dim(),
                got: obs.dim(),
            });
        }
        Ok(Self { net, action_scale, obs })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn action_scale(&self) -> f64 {
        self.action_scale
    }

    pub fn obs_scaling(&self) -> &ObsScaling {
        &self.obs
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    /// Mean and clamped log-std of the pre-squash Gaussian.
    pub fn heads(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>), SacError> {
        if s.len() != self.state_dim() {
            return Err(SacError::DimensionMismatch {
                expected: self.state_dim(),
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinite { net: "policy", what: "state" });
        }
        let mut o = Vec::with_capacity(s.len());
        self.obs.apply_into(s, &mut o);
        let out = self.net.forward(&o)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinite { net: "policy", what: "output" });
        }
        let d = self.action_dim();
        let mean = out[..d].to_vec();
        let log_std = out[d..].iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Ok((mean, log_std))
    }

    /// Action in `[-umax, umax]^d` and its log-density.
    pub fn select_action(&self, s: &[f64], mode: ActionMode, rng: &mut StreamRng) -> Result<(Vec<f64>, f64), SacError> {
        let (mean, log_std) = self.heads(s)?;
        let mut u = Vec::with_capacity(mean.len());
        let mut logp = 0.0;
        for (m, l) in mean.iter().zip(&log_std) {
            let eps: f64 = match mode {
                ActionMode::Stochastic => StandardNormal.sample(rng),
                ActionMode::Mean => 0.0,
            };
            let z = m + math::exp(*l) * eps;
            u.push(self.action_scale * math::tanh(z));
            logp += squashed_log_prob(eps, *l, z, self.action_scale);
        }
        Ok((u, logp))
    }
}

impl Policy {
    /// Actions for `n` row-major raw states, written to `actions`
    /// (`n x action_dim`). Draws noise row by row in order.
    pub fn act_batch(
        &self,
        states: &[f64],
        n: usize,
        mode: ActionMode,
        rng: &mut StreamRng,
        ws: &mut Workspace,
        actions: &mut Vec<f64>,
    ) -> Result<(), SacError> {
        let sd = self.state_dim();
        if states.len() != n * sd {
            return Err(SacError::DimensionMismatch {
                expected: n * sd,
                got: states.len(),
            });
        }
        let mut obs = Vec::with_capacity(states.len());
        for s in states.chunks_exact(sd) {
            self.obs.apply_into(s, &mut obs);
        }
        check_finite(&obs, "policy", "state")?;
        let out = self.net.forward_batch(&obs, n, ws);
        check_finite(out, "policy", "output")?;
        let d = self.action_dim();
        actions.clear();
        for row in out.chunks_exact(2 * d) {
            for c in 0..d {
                let z = match mode {
                    ActionMode::Mean => row[c],
                    ActionMode::Stochastic => {
                        let e: f64 = StandardNormal.sample(rng);
                        row[c] + math::exp(row[d + c].clamp(LOG_STD_MIN, LOG_STD_MAX)) * e
                    }
                };
                actions.push(self.action_scale * math::tanh(z));
            }
        }
        Ok(())
    }
}

/// Ring buffer of `(obs, normalized action, reward, next obs)`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    obs: Vec<f64>,
    act: Vec<f64>,
    rew: Vec<f64>,
    next: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            act_dim,
            obs: vec![0.0; capacity * obs_dim],
            act: vec![0.0; capacity * act_dim],
            rew: vec![0.0; capacity],
            next: vec![0.0; capacity * obs_dim],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, next: &[f64]) {
        let (od, ad, h) = (self.obs_dim, self.act_dim, self.head);
        self.obs[h * od..(h + 1) * od].copy_from_slice(obs);
        self.act[h * ad..(h + 1) * ad].copy_from_slice(act);
        self.rew[h] = reward;
        self.next[h * od..(h + 1) * od].copy_from_slice(next);
        self.head = (h + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Uniform indices with replacement over stored items.
    pub fn sample_indices(&self, n: usize, rng: &mut StreamRng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rew[i]
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.obs[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.act[i * self.act_dim..(i + 1) * self.act_dim]
    }

    pub fn next_obs(&self, i: usize) -> &[f64] {
        &self.next[i * self.obs_dim..(i + 1) * self.obs_dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    /// Entropy weight.
    pub delta: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            delta: 0.2,
            tau: 0.005,
            batch_size: 128,
            total_steps: 30_000,
            warmup_steps: 1000,
            updates_per_step: 1,
            buffer_capacity: 100_000,
            hidden: vec![64, 64],
            adam: AdamConfig::default(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.delta >= 0.0) {
            return bad("entropy weight must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be positive and fit in the buffer");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

/// `r + gamma * v(s')`
pub fn bellman_target(reward: f64, gamma: f64, v_next: f64) -> f64 {
    reward + gamma * v_next
}

/// `min(q1, q2) - delta * log pi`
pub fn value_target(q1: f64, q2: f64, log_prob: f64, delta: f64) -> f64 {
    q1.min(q2) - delta * log_prob
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub v: Mlp,
    pub v_target: Mlp,
}

impl Critics {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Result<Self, SacError> {
        let sizes = |input: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(1);
            s
        };
        let q1 = Mlp::new(&sizes(obs_dim + act_dim), Activation::Relu, rng)?;
        let q2 = Mlp::new(&sizes(obs_dim + act_dim), Activation::Relu, rng)?;
        let v = Mlp::new(&sizes(obs_dim), Activation::Relu, rng)?;
        let v_target = v.clone();
        Ok(Self { q1, q2, v, v_target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub q1: f64,
    pub q2: f64,
    pub v: f64,
    pub policy: f64,
    pub mean_log_prob: f64,
}

/// Learner state: networks, optimizers, buffer and scratch space.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: Policy,
    pub critics: Critics,
    pub buffer: ReplayBuffer,
    cfg: SacConfig,
    opt_pi: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_v: Adam,
    scratch: Scratch,
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    ws_a: Workspace,
    ws_b: Workspace,
    ws_c: Workspace,
    ws_d: Workspace,
    obs: Vec<f64>,
    next: Vec<f64>,
    sa: Vec<f64>,
    y: Vec<f64>,
    cot: Vec<f64>,
    grad: Vec<f64>,
    eps: Vec<f64>,
    z: Vec<f64>,
    log_std: Vec<f64>,
    clamped: Vec<bool>,
    logp: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    dq: Vec<f64>,
}

fn check_finite(v: &[f64], net: &'static str, what: &'static str) -> Result<(), SacError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SacError::NonFinite { net, what })
    }
}

impl SacAgent {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        action_scale: f64,
        obs: ObsScaling,
        cfg: SacConfig,
        rng: &mut StreamRng,
    ) -> Result<Self, SacError> {
        cfg.validate()?;
        let policy = Policy::new(state_dim, action_dim, &cfg.hidden, action_scale, obs, rng)?;
        let critics = Critics::new(state_dim, action_dim, &cfg.hidden, rng)?;
        Ok(Self {
            opt_pi: Adam::new(policy.net.params().len(), cfg.adam),
            opt_q1: Adam::new(critics.q1.params().len(), cfg.adam),
            opt_q2: Adam::new(critics.q2.params().len(), cfg.adam),
            opt_v: Adam::new(critics.v.params().len(), cfg.adam),
            buffer: ReplayBuffer::new(cfg.buffer_capacity, state_dim, action_dim),
            policy,
            critics,
            cfg,
            scratch: Scratch::default(),
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    /// Store one environment transition given raw states and actions.
    pub fn record(&mut self, s: &[f64], u: &[f64], reward: f64, s_next: &[f64]) {
        let sc = &mut self.scratch;
        sc.obs.clear();
        self.policy.obs.apply_into(s, &mut sc.obs);
        sc.next.clear();
        self.policy.obs.apply_into(s_next, &mut sc.next);
        let k = self.policy.action_scale;
        sc.eps.clear();
        sc.eps.extend(u.iter().map(|a| a / k));
        self.buffer.push(&sc.obs, &sc.eps, reward, &sc.next);
    }

    /// One gradient step on each of q1, q2, v and the policy, then a soft
    /// target update.
    pub fn update(&mut self, rng: &mut StreamRng) -> Result<LossReport, SacError> {
        let nb = self.cfg.batch_size;
        if self.buffer.len() < nb {
            return Err(SacError::BufferTooSmall {
                len: self.buffer.len(),
                batch: nb,
            });
        }
        let (gamma, delta) = (self.cfg.gamma, self.cfg.delta);
        let od = self.policy.state_dim();
        let ad = self.policy.action_dim();
        let idx = self.buffer.sample_indices(nb, rng);
        let sc = &mut self.scratch;
        let cr = &mut self.critics;
        let inv_n = 1.0 / nb as f64;

        sc.obs.clear();
        sc.next.clear();
        sc.sa.clear();
        for &i in &idx {
            sc.obs.extend_from_slice(self.buffer.obs(i));
            sc.next.extend_from_slice(self.buffer.next_obs(i));
            sc.sa.extend_from_slice(self.buffer.obs(i));
            sc.sa.extend_from_slice(self.buffer.action(i));
        }

        // Q regression towards r + gamma * v_target(s')
        let vt = cr.v_target.forward_batch(&sc.next, nb, &mut sc.ws_a);
        check_finite(vt, "v_target", "output")?;
        sc.y.clear();
        sc.y.extend(idx.iter().zip(vt).map(|(&i, v)| bellman_target(self.buffer.reward(i), gamma, *v)));
        let mut q_losses = [0.0; 2];
        for (k, (q, opt, name)) in [
            (&mut cr.q1, &mut self.opt_q1, "q1"),
            (&mut cr.q2, &mut self.opt_q2, "q2"),
        ]
        .into_iter()
        .enumerate()
        {
            let out = q.forward_batch(&sc.sa, nb, &mut sc.ws_a);
            check_finite(out, name, "output")?;
            sc.cot.clear();
            let mut loss = 0.0;
            for (p, t) in out.iter().zip(&sc.y) {
                let e = p - t;
                loss += 0.5 * e * e;
                sc.cot.push(e * inv_n);
            }
            q_losses[k] = loss * inv_n;
            sc.grad.clear();
            sc.grad.resize(q.params().len(), 0.0);
            q.backward_batch(&mut sc.ws_a, &sc.cot, &mut sc.grad, false);
            check_finite(&sc.grad, name, "gradient")?;
            opt.step(q.params_mut(), &sc.grad)?;
        }

        // fresh reparameterized action, shared by the value target and the
        // policy loss
        let heads = self.policy.net.forward_batch(&sc.obs, nb, &mut sc.ws_c);
        check_finite(heads, "policy", "output")?;
        sc.eps.clear();
        sc.z.clear();
        sc.log_std.clear();
        sc.clamped.clear();
        sc.logp.clear();
        sc.sa.clear();
        for b in 0..nb {
            let row = &heads[b * 2 * ad..(b + 1) * 2 * ad];
            sc.sa.extend_from_slice(&sc.obs[b * od..(b + 1) * od]);
            let mut lp = 0.0;
            for c in 0..ad {
                let raw = row[ad + c];
                let l = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let e: f64 = StandardNormal.sample(rng);
                let z = row[c] + math::exp(l) * e;
                lp += squashed_log_prob(e, l, z, self.policy.action_scale);
                sc.eps.push(e);
                sc.z.push(z);
                sc.log_std.push(l);
                sc.clamped.push(raw != l);
                sc.sa.push(math::tanh(z));
            }
            sc.logp.push(lp);
        }

        sc.q1.clear();
        sc.q1.extend_from_slice(cr.q1.forward_batch(&sc.sa, nb, &mut sc.ws_a));
        sc.q2.clear();
        sc.q2.extend_from_slice(cr.q2.forward_batch(&sc.sa, nb, &mut sc.ws_b));
        check_finite(&sc.q1, "q1", "output")?;
        check_finite(&sc.q2, "q2", "output")?;

        // V regression towards min Q - delta log pi
        let out = cr.v.forward_batch(&sc.obs, nb, &mut sc.ws_d);
        check_finite(out, "v", "output")?;
        sc.cot.clear();
        let mut v_loss = 0.0;
        for b in 0..nb {
            let e = out[b] - value_target(sc.q1[b], sc.q2[b], sc.logp[b], delta);
            v_loss += 0.5 * e * e;
            sc.cot.push(e * inv_n);
        }
        v_loss *= inv_n;
        sc.grad.clear();
        sc.grad.resize(cr.v.params().len(), 0.0);
        cr.v.backward_batch(&mut sc.ws_d, &sc.cot, &mut sc.grad, false);
        check_finite(&sc.grad, "v", "gradient")?;
        self.opt_v.step(cr.v.params_mut(), &sc.grad)?;

        // dQmin / d(normalized action), routed through whichever twin is lower
        sc.dq.clear();
        sc.dq.resize(nb * ad, 0.0);
        for (k, (q, ws)) in [(&cr.q1, &mut sc.ws_a), (&cr.q2, &mut sc.ws_b)].into_iter().enumerate() {
            sc.cot.clear();
            let mut any = false;
            for b in 0..nb {
                let pick = if k == 0 { sc.q1[b] <= sc.q2[b] } else { sc.q2[b] < sc.q1[b] };
                any |= pick;
                sc.cot.push(if pick { 1.0 } else { 0.0 });
            }
            if !any {
                continue;
            }
            q.input_grad_batch(ws, &sc.cot);
            let ig = ws.input_grad();
            for b in 0..nb {
                if sc.cot[b] != 0.0 {
                    for c in 0..ad {
                        sc.dq[b * ad + c] = ig[b * (od + ad) + od + c];
                    }
                }
            }
        }

        // policy: minimize mean(delta log pi - min Q)
        sc.cot.clear();
        sc.cot.resize(nb * 2 * ad, 0.0);
        let mut pi_loss = 0.0;
        for b in 0..nb {
            pi_loss += delta * sc.logp[b] - sc.q1[b].min(sc.q2[b]);
            for c in 0..ad {
                let i = b * ad + c;
                let t = math::tanh(sc.z[i]);
                let dz = 2.0 * delta * t - sc.dq[i] * (1.0 - t * t);
                sc.cot[b * 2 * ad + c] = dz * inv_n;
                sc.cot[b * 2 * ad + ad + c] = if sc.clamped[i] {
                    0.0
                } else {
                    (dz * math::exp(sc.log_std[i]) * sc.eps[i] - delta) * inv_n
                };
            }
        }
        sc.grad.clear();
        sc.grad.resize(self.policy.net.params().len(), 0.0);
        self.policy.net.backward_batch(&mut sc.ws_c, &sc.cot, &mut sc.grad, false);
        check_finite(&sc.grad, "policy", "gradient")?;
        self.opt_pi.step(self.policy.net.params_mut(), &sc.grad)?;

        cr.v_target.soft_update_from(&cr.v, self.cfg.tau);
        Ok(LossReport {
            q1: q_losses[0],
            q2: q_losses[1],
            v: v_loss,
            policy: pi_loss * inv_n,
            mean_log_prob: sc.logp.iter().sum::<f64>() * inv_n,
        })
    }
}

/// Train a policy against `env` for `cfg.total_steps` environment steps.
/// Returns the policy and the undiscounted return of every completed
/// episode.
pub fn best_response<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &SacConfig,
    rng: &mut StreamRng,
) -> Result<(Policy, Vec<f64>), SacError> {
    let mut agent = SacAgent::new(
        env.state_dim(),
        env.action_dim(),
        env.action_bound(),
        env.observation_scaling(),
        cfg.clone(),
        rng,
    )?;
    train(&mut agent, env, cfg.total_steps, rng).map(|curve| (agent.policy, curve))
}

/// Run `steps` environment steps with learning. Random uniform actions are
/// used until the buffer holds `warmup_steps` transitions.
pub fn train<E: Environment + ?Sized>(
    agent: &mut SacAgent,
    env: &mut E,
    steps: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, SacError> {
    let mut curve = Vec::new();
    if steps == 0 {
        return Ok(curve);
    }
    let horizon = env.horizon().max(1);
    let bound = env.action_bound();
    let (warmup, batch, ups) = (agent.cfg.warmup_steps, agent.cfg.batch_size, agent.cfg.updates_per_step);
    let mut s = env.reset(rng)?;
    let (mut t, mut ep_return) = (0usize, 0.0);
    for step in 0..steps {
        let u = if step < warmup {
            (0..env.action_dim()).map(|_| rng.random_range(-bound..=bound)).collect()
        } else {
            agent.policy.select_action(&s, ActionMode::Stochastic, rng)?.0
        };
        let out = env.step(&u, rng)?;
        agent.record(&s, &u, out.reward, &out.state);
        ep_return += out.reward;
        t += 1;
        s = out.state;
        if t == horizon {
            curve.push(ep_return);
            ep_return = 0.0;
            t = 0;
            s = env.reset(rng)?;
        }
        if step + 1 >= warmup && agent.buffer.len() >= batch {
            for _ in 0..ups {
                agent.update(rng)?;
            }
        }
    }
    Ok(curve)
}
