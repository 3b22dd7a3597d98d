//! Flocking environment: torus dynamics, box obstacles, rewards.
//!
//! An agent's state is a position `x` and a velocity `v` in `R^d`. One step
//! advances `x` by `v dt` on the torus `[xmin, xmax)^d` and `v` by the
//! clipped acceleration plus noise, clipped to `[-vmax, vmax]`. Axis-aligned
//! box obstacles reflect the agent like a billiard ball.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Sampler, StreamRng};

/// Reflections allowed in a single step before the step is abandoned.
pub const MAX_REFLECTIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("reward variant {0:?} needs at least two spatial dimensions")]
    NeedsPlane(RewardVariant),
    #[error("population sample is empty")]
    EmptyPopulation,
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), EnvError> {
    if expected == got {
        Ok(())
    } else {
        Err(EnvError::DimensionMismatch { what, expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl AgentState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self, EnvError> {
        check_dim("velocity", x.len(), v.len())?;
        Ok(Self { x, v })
    }

    /// Split a flat `(x, v)` vector of even length.
    pub fn from_flat(s: &[f64]) -> Result<Self, EnvError> {
        if s.len() % 2 != 0 || s.is_empty() {
            return Err(EnvError::DimensionMismatch {
                what: "flat state",
                expected: 2 * (s.len() / 2).max(1),
                got: s.len(),
            });
        }
        let d = s.len() / 2;
        Ok(Self {
            x: s[..d].to_vec(),
            v: s[d..].to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Positions followed by velocities.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.v);
        out
    }
}

/// The fixed finite population an agent interacts with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSample {
    states: Vec<AgentState>,
}

impl PopulationSample {
    pub fn new(states: Vec<AgentState>) -> Result<Self, EnvError> {
        let first = states.first().ok_or(EnvError::EmptyPopulation)?;
        let d = first.dim();
        for s in &states {
            check_dim("population member", d, s.dim())?;
            check_dim("population member velocity", d, s.v.len())?;
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[AgentState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn mean_velocity(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for s in &self.states {
            for (a, b) in m.iter_mut().zip(&s.v) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Periodic position bounds, shared by every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            min: -100.0,
            max: 100.0,
        }
    }
}

impl Bounds {
    pub fn period(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x < self.max
    }

    /// Map `x` into `[min, max)`. Values already inside are returned as is.
    pub fn wrap(&self, x: f64) -> f64 {
        if self.contains(x) {
            return x;
        }
        let p = self.period();
        let mut r = (x - self.min) - p * math::floor((x - self.min) / p);
        if r < 0.0 {
            r += p;
        }
        let y = self.min + r;
        if y >= self.max || y < self.min {
            self.min
        } else {
            y
        }
    }

    /// Shortest signed displacement `a - b` on the circle.
    pub fn displacement(&self, a: f64, b: f64) -> f64 {
        let p = self.period();
        let d = a - b;
        d - p * math::floor(d / p + 0.5)
    }
}

pub fn wrap_position(x: &[f64], bounds: Bounds) -> Vec<f64> {
    x.iter().map(|&c| bounds.wrap(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default)]
    pub penalty: f64,
}

impl Obstacle {
    pub fn contains_strictly(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&c, (&lo, &hi))| c > lo && c < hi)
    }

    fn shifted(&self, shift: &[f64]) -> Obstacle {
        Obstacle {
            lo: self.lo.iter().zip(shift).map(|(a, s)| a + s).collect(),
            hi: self.hi.iter().zip(shift).map(|(a, s)| a + s).collect(),
            penalty: self.penalty,
        }
    }

    /// Entry parameter and face axis of the segment `start -> end` into the
    /// open box, if the segment reaches the interior.
    fn entry(&self, start: &[f64], end: &[f64]) -> Option<(f64, usize)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = None;
        for a in 0..start.len() {
            let dir = end[a] - start[a];
            let (lo, hi) = (self.lo[a], self.hi[a]);
            if dir == 0.0 {
                if start[a] <= lo || start[a] >= hi {
                    return None;
                }
                continue;
            }
            let t1 = (lo - start[a]) / dir;
            let t2 = (hi - start[a]) / dir;
            let (tn, tf) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if tn > t_near {
                t_near = tn;
                axis = Some(a);
            }
            if tf < t_far {
                t_far = tf;
            }
        }
        let axis = axis?;
        if t_near < t_far && t_far > 0.0 && t_near >= 0.0 && t_near < 1.0 {
            Some((t_near, axis))
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Flocking, control cost and a speed bonus.
    Simple,
    /// Adds attraction to the lines `x2 = +/- line_offset`.
    TwoLines,
    /// Adds attraction to `x2 = 0` and the obstacle contact penalty.
    Obstacles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedNorm {
    /// `sum_i v_i^2`
    L2sq,
    /// `max_i |v_i|`
    Linf,
}

fn one() -> f64 {
    1.0
}

fn fifty() -> f64 {
    50.0
}

fn default_speed_norm() -> SpeedNorm {
    SpeedNorm::L2sq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    #[serde(default)]
    pub beta: f64,
    pub variant: RewardVariant,
    #[serde(default = "one")]
    pub w_flock: f64,
    #[serde(default = "one")]
    pub w_ctrl: f64,
    #[serde(default = "one")]
    pub w_speed: f64,
    #[serde(default = "one")]
    pub w_attract: f64,
    #[serde(default = "default_speed_norm")]
    pub speed_norm: SpeedNorm,
    #[serde(default = "fifty")]
    pub line_offset: f64,
}

impl RewardSpec {
    pub fn simple() -> Self {
        Self {
            beta: 0.0,
            variant: RewardVariant::Simple,
            w_flock: 1.0,
            w_ctrl: 1.0,
            w_speed: 1.0,
            w_attract: 1.0,
            speed_norm: SpeedNorm::L2sq,
            line_offset: 50.0,
        }
    }

    pub fn two_lines(beta: f64) -> Self {
        Self {
            beta,
            variant: RewardVariant::TwoLines,
            speed_norm: SpeedNorm::Linf,
            ..Self::simple()
        }
    }

    pub fn obstacles(beta: f64) -> Self {
        Self {
            beta,
            variant: RewardVariant::Obstacles,
            speed_norm: SpeedNorm::Linf,
            ..Self::simple()
        }
    }
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::simple()
    }
}

fn default_d() -> usize {
    2
}
fn default_dt() -> f64 {
    0.1
}
fn default_horizon() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub sigma_noise: f64,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default = "one")]
    pub vmax: f64,
    #[serde(default = "one")]
    pub umax: f64,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub reward: RewardSpec,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            dt: default_dt(),
            sigma_noise: 0.0,
            bounds: Bounds::default(),
            vmax: 1.0,
            umax: 1.0,
            obstacles: Vec::new(),
            horizon: default_horizon(),
            reward: RewardSpec::simple(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.sigma_noise >= 0.0) {
            return bad(format!("sigma_noise must be non-negative, got {}", self.sigma_noise));
        }
        if !(self.bounds.min < self.bounds.max) {
            return bad(format!(
                "bounds: min {} must be below max {}",
                self.bounds.min, self.bounds.max
            ));
        }
        if !(self.vmax > 0.0) || !(self.umax > 0.0) {
            return bad("vmax and umax must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if ob.lo.len() != self.d || ob.hi.len() != self.d {
                return bad(format!("obstacle {i}: corners must have {} coordinates", self.d));
            }
            if ob.lo.iter().zip(&ob.hi).any(|(l, h)| !(l < h)) {
                return bad(format!("obstacle {i}: lo must be below hi on every axis"));
            }
            if ob
                .lo
                .iter()
                .chain(&ob.hi)
                .any(|&c| c < self.bounds.min || c > self.bounds.max)
            {
                return bad(format!("obstacle {i}: must lie within the bounds"));
            }
            if !(ob.penalty >= 0.0) {
                return bad(format!("obstacle {i}: penalty must be non-negative"));
            }
        }
        let r = &self.reward;
        if !(r.beta >= 0.0) {
            return bad(format!("reward.beta must be non-negative, got {}", r.beta));
        }
        if [r.w_flock, r.w_ctrl, r.w_speed, r.w_attract]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return bad("reward weights must be non-negative".into());
        }
        if r.variant != RewardVariant::Simple && self.d < 2 {
            return Err(EnvError::NeedsPlane(r.variant));
        }
        Ok(())
    }

    /// Bring an arbitrary flat `(x, v)` vector into the state space: wrap
    /// positions, clip velocities and push positions out of obstacles.
    pub fn sanitize(&self, flat: &[f64]) -> Result<AgentState, EnvError> {
        check_dim("flat state", 2 * self.d, flat.len())?;
        let mut x = wrap_position(&flat[..self.d], self.bounds);
        let v = flat[self.d..]
            .iter()
            .map(|&c| if c.is_finite() { c.clamp(-self.vmax, self.vmax) } else { 0.0 })
            .collect();
        for c in x.iter_mut() {
            if !c.is_finite() {
                *c = 0.5 * (self.bounds.min + self.bounds.max);
            }
        }
        eject_from_obstacles(&mut x, &self.obstacles);
        Ok(AgentState { x, v })
    }

    /// Per-component affine map of `(x, v)` onto roughly `[-1, 1]`.
    pub fn observation_scaling(&self) -> ObsScaling {
        let c = 0.5 * (self.bounds.min + self.bounds.max);
        let h = 0.5 * self.bounds.period();
        let mut offset = vec![c; self.d];
        offset.extend(core::iter::repeat_n(0.0, self.d));
        let mut scale = vec![h; self.d];
        scale.extend(core::iter::repeat_n(self.vmax, self.d));
        ObsScaling { offset, scale }
    }
}

/// Move a point that lies strictly inside an obstacle onto the nearest face.
pub fn eject_from_obstacles(x: &mut [f64], obstacles: &[Obstacle]) {
    for _ in 0..obstacles.len().max(1) * 2 {
        let Some(ob) = obstacles.iter().find(|o| o.contains_strictly(x)) else {
            return;
        };
        let mut best = (f64::INFINITY, 0, 0.0);
        for a in 0..x.len() {
            for face in [ob.lo[a], ob.hi[a]] {
                let dist = math::abs(x[a] - face);
                if dist < best.0 {
                    best = (dist, a, face);
                }
            }
        }
        x[best.1] = best.2;
    }
}

/// Outcome of [`resolve_obstacle`].
#[derive(Debug, Clone, PartialEq)]
pub struct Bounce {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub hit: bool,
    /// Largest penalty among obstacles touched.
    pub penalty: f64,
    /// The reflection budget ran out and the agent was put back.
    pub degenerate: bool,
}

/// Reflect the move `x_old -> x_new` off box obstacles.
///
/// The earliest face crossing (smallest entry parameter, then lowest
/// obstacle index, then lowest axis) mirrors the endpoint across the face
/// plane and flips that velocity component. This repeats on the remaining
/// path until it is clear; after [`MAX_REFLECTIONS`] the agent is left at the
/// last contact-free point with its velocity reversed.
pub fn resolve_obstacle(x_old: &[f64], x_new: &[f64], v: &[f64], obstacles: &[Obstacle]) -> Bounce {
    let mut start = x_old.to_vec();
    let mut end = x_new.to_vec();
    let mut v = v.to_vec();
    let mut hit = false;
    let mut penalty: f64 = 0.0;
    for reflections in 0..=MAX_REFLECTIONS {
        let mut first: Option<(f64, usize, usize)> = None;
        for (i, ob) in obstacles.iter().enumerate() {
            if let Some((t, axis)) = ob.entry(&start, &end) {
                if first.is_none_or(|(tb, _, _)| t < tb) {
                    first = Some((t, i, axis));
                }
            }
        }
        let Some((t, i, axis)) = first else {
            return Bounce {
                x: end,
                v,
                hit,
                penalty,
                degenerate: false,
            };
        };
        let ob = &obstacles[i];
        penalty = penalty.max(ob.penalty);
        if reflections == MAX_REFLECTIONS {
            v.iter_mut().for_each(|c| *c = -*c);
            return Bounce {
                x: start,
                v,
                hit: true,
                penalty,
                degenerate: true,
            };
        }
        hit = true;
        let plane = if end[axis] > start[axis] {
            ob.lo[axis]
        } else {
            ob.hi[axis]
        };
        let contact: Vec<f64> = start
            .iter()
            .zip(&end)
            .enumerate()
            .map(|(a, (&s, &e))| if a == axis { plane } else { s + t * (e - s) })
            .collect();
        end[axis] = 2.0 * plane - end[axis];
        v[axis] = -v[axis];
        start = contact;
    }
    unreachable!("loop returns on its last iteration")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: AgentState,
    pub hit: bool,
    /// Penalty of the obstacle that was hit, 0 without contact.
    pub penalty: f64,
}

/// Advance one agent by one step. `u` is clipped to `[-umax, umax]`; `noise`
/// is added to the velocity before clipping.
pub fn step(s: &AgentState, u: &[f64], noise: &[f64], cfg: &EnvConfig) -> Result<StepOutcome, EnvError> {
    let d = cfg.d;
    check_dim("position", d, s.x.len())?;
    check_dim("velocity", d, s.v.len())?;
    check_dim("action", d, u.len())?;
    check_dim("noise", d, noise.len())?;
    let mut x_new: Vec<f64> = s.x.iter().zip(&s.v).map(|(x, v)| x + v * cfg.dt).collect();
    let mut v_new: Vec<f64> = (0..d)
        .map(|i| {
            let ui = u[i].clamp(-cfg.umax, cfg.umax);
            (s.v[i] + ui * cfg.dt + noise[i]).clamp(-cfg.vmax, cfg.vmax)
        })
        .collect();
    let mut hit = false;
    let mut penalty = 0.0;
    if !cfg.obstacles.is_empty() {
        let images = obstacle_images(&x_new, cfg);
        let bounce = resolve_obstacle(&s.x, &x_new, &v_new, images.as_deref().unwrap_or(&cfg.obstacles));
        x_new = bounce.x;
        v_new = bounce.v;
        hit = bounce.hit;
        penalty = bounce.penalty;
    }
    Ok(StepOutcome {
        state: AgentState {
            x: wrap_position(&x_new, cfg.bounds),
            v: v_new,
        },
        hit,
        penalty,
    })
}

/// When the unwrapped move leaves the box, obstacles must also be tested at
/// their periodic images on the axes being crossed.
fn obstacle_images(x_new: &[f64], cfg: &EnvConfig) -> Option<Vec<Obstacle>> {
    let p = cfg.bounds.period();
    let crossing: Vec<(usize, f64)> = x_new
        .iter()
        .enumerate()
        .filter_map(|(a, &c)| {
            if c >= cfg.bounds.max {
                Some((a, p))
            } else if c < cfg.bounds.min {
                Some((a, -p))
            } else {
                None
            }
        })
        .collect();
    if crossing.is_empty() {
        return None;
    }
    let mut out = Vec::new();
    for mask in 0..(1usize << crossing.len()) {
        let mut shift = vec![0.0; cfg.d];
        for (bit, &(a, s)) in crossing.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                shift[a] = s;
            }
        }
        out.extend(cfg.obstacles.iter().map(|o| o.shifted(&shift)));
    }
    Some(out)
}

/// Velocity-alignment criterion of `s` against the population:
/// `-|| mean_j (v - v_j) / (1 + |x - x_j|^2)^beta ||^2`, with torus distances.
pub fn flocking_term(s: &AgentState, pop: &PopulationSample, beta: f64, bounds: Bounds) -> f64 {
    let d = s.dim();
    let mut acc = [0.0f64; 8];
    let mut heap;
    let acc: &mut [f64] = if d <= acc.len() {
        &mut acc[..d]
    } else {
        heap = vec![0.0; d];
        &mut heap
    };
    for other in pop.states() {
        let w = if beta == 0.0 {
            1.0
        } else {
            let dist2: f64 = s
                .x
                .iter()
                .zip(&other.x)
                .map(|(&a, &b)| {
                    let dd = bounds.displacement(a, b);
                    dd * dd
                })
                .sum();
            math::powf(1.0 + dist2, -beta)
        };
        for i in 0..d {
            acc[i] += w * (s.v[i] - other.v[i]);
        }
    }
    let n = pop.len() as f64;
    -acc.iter().map(|a| (a / n) * (a / n)).sum::<f64>()
}

/// Instantaneous reward of state `s` under action `u` (clipped to the action
/// box), given the contact penalty of the resulting step.
pub fn reward(
    s: &AgentState,
    u: &[f64],
    pop: &PopulationSample,
    cfg: &EnvConfig,
    hit_penalty: f64,
) -> Result<f64, EnvError> {
    let spec = &cfg.reward;
    check_dim("action", cfg.d, u.len())?;
    check_dim("population", cfg.d, pop.dim())?;
    if spec.variant != RewardVariant::Simple && cfg.d < 2 {
        return Err(EnvError::NeedsPlane(spec.variant));
    }
    let flock = flocking_term(s, pop, spec.beta, cfg.bounds);
    let ctrl: f64 = u
        .iter()
        .map(|&a| {
            let a = a.clamp(-cfg.umax, cfg.umax);
            a * a
        })
        .sum();
    let speed = match spec.speed_norm {
        SpeedNorm::L2sq => s.v.iter().map(|v| v * v).sum(),
        SpeedNorm::Linf => s.v.iter().fold(0.0, |m: f64, v| m.max(math::abs(*v))),
    };
    let attract = match spec.variant {
        RewardVariant::Simple => 0.0,
        RewardVariant::TwoLines => line_term(s.x[1], spec.line_offset),
        RewardVariant::Obstacles => -math::abs(s.x[1]),
    };
    let contact = match spec.variant {
        RewardVariant::Obstacles => hit_penalty,
        _ => 0.0,
    };
    Ok(spec.w_flock * flock - spec.w_ctrl * ctrl + spec.w_speed * speed + spec.w_attract * attract - contact)
}

/// `-min(|x2 - offset|, |x2 + offset|)`
pub fn line_term(x2: f64, offset: f64) -> f64 {
    -math::abs(x2 - offset).min(math::abs(x2 + offset))
}

/// Per-component affine normalization `(s - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsScaling {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply_into(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(
            s.iter()
                .zip(self.offset.iter().zip(&self.scale))
                .map(|(x, (o, k))| (x - o) / k),
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub hit: bool,
}

/// Gym-style single-agent episodic environment with a bounded box action space.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn action_bound(&self) -> f64;
    fn horizon(&self) -> usize;
    fn observation_scaling(&self) -> ObsScaling;
    fn reset(&mut self, rng: &mut StreamRng) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64], rng: &mut StreamRng) -> Result<EnvStep, EnvError>;
}

/// One representative agent against a fixed population sample, episodes
/// starting from `init`.
pub struct FlockingEnv<'a> {
    cfg: &'a EnvConfig,
    pop: &'a PopulationSample,
    init: &'a dyn Sampler,
    state: AgentState,
    noise: Vec<f64>,
}

impl<'a> FlockingEnv<'a> {
    pub fn new(cfg: &'a EnvConfig, pop: &'a PopulationSample, init: &'a dyn Sampler) -> Result<Self, EnvError> {
        cfg.validate()?;
        check_dim("population", cfg.d, pop.dim())?;
        check_dim("initial sampler", 2 * cfg.d, init.dim())?;
        Ok(Self {
            cfg,
            pop,
            init,
            state: AgentState {
                x: vec![0.0; cfg.d],
                v: vec![0.0; cfg.d],
            },
            noise: vec![0.0; cfg.d],
        })
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn set_state(&mut self, state: AgentState) {
        self.state = state;
    }

    /// Advance without computing the reward.
    pub fn advance(&mut self, action: &[f64], rng: &mut StreamRng) -> Result<StepOutcome, EnvError> {
        self.draw_noise(rng);
        let out = step(&self.state, action, &self.noise, self.cfg)?;
        self.state = out.state.clone();
        Ok(out)
    }

    fn draw_noise(&mut self, rng: &mut StreamRng) {
        let sigma = self.cfg.sigma_noise;
        for n in self.noise.iter_mut() {
            *n = if sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            } else {
                0.0
            };
        }
    }
}

impl Environment for FlockingEnv<'_> {
    fn state_dim(&self) -> usize {
        2 * self.cfg.d
    }

    fn action_dim(&self) -> usize {
        self.cfg.d
    }

    fn action_bound(&self) -> f64 {
        self.cfg.umax
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn observation_scaling(&self) -> ObsScaling {
        self.cfg.observation_scaling()
    }

    fn reset(&mut self, rng: &mut StreamRng) -> Result<Vec<f64>, EnvError> {
        let raw = self.init.sample_one(rng);
        self.state = self.cfg.sanitize(&raw)?;
        Ok(self.state.to_flat())
    }

    fn step(&mut self, action: &[f64], rng: &mut StreamRng) -> Result<EnvStep, EnvError> {
        self.draw_noise(rng);
        let out = step(&self.state, action, &self.noise, self.cfg)?;
        let r = reward(&self.state, action, self.pop, self.cfg, out.penalty)?;
        self.state = out.state;
        Ok(EnvStep {
            state: self.state.to_flat(),
            reward: r,
            hit: out.hit,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub hit: bool,
}

/// One episode of `env.horizon()` steps from a fresh reset.
pub fn rollout<E, P>(env: &mut E, mut policy: P, rng: &mut StreamRng) -> Result<Vec<Transition>, EnvError>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64], &mut StreamRng) -> Vec<f64>,
{
    let mut s = env.reset(rng)?;
    let mut out = Vec::with_capacity(env.horizon());
    for _ in 0..env.horizon() {
        let a = policy(&s, rng);
        let st = env.step(&a, rng)?;
        out.push(Transition {
            state: core::mem::replace(&mut s, st.state.clone()),
            action: a,
            reward: st.reward,
            next_state: st.state,
            hit: st.hit,
        });
    }
    Ok(out)
}

/// `sum_t gamma^t r_t`
pub fn discounted_return(rewards: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += g * r;
        g *= gamma;
    }
    total
}
