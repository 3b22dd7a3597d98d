use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use flocknrl_core::approx::{Activation, Mlp};
use flocknrl_core::env::{EnvError, EnvStep, Environment, ObsScaling};
use flocknrl_core::flows::{self, FlowConfig, FlowModel, Standardizer};
use flocknrl_core::metrics::{self, PerformanceMatrix};
use flocknrl_core::rng::stream;
use flocknrl_core::sac::{best_response, ActionMode, Policy, SacConfig};
use flocknrl_core::StreamRng;

use crate::Report;

fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `||a - b|| / max(||a||, ||b||)`
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-300)
}

pub fn gradient_oracle(r: &mut Report) {
    let mut rng = stream(11, "gradient-oracle", &[]);
    let mut worst: f64 = 0.0;
    let mut sizes_seen = 0;
    for k in 0..50 {
        // at most 64 parameters: [n_in, hidden, n_out]
        let (n_in, hidden, n_out) = loop {
            let s = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..4));
            if Mlp::param_count(&[s.0, s.1, s.2]) <= 64 {
                break s;
            }
        };
        let sizes = [n_in, hidden, n_out];
        sizes_seen = sizes_seen.max(Mlp::param_count(&sizes));
        let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let net = Mlp::new(&sizes, act, &mut rng).unwrap();
        let mut net = net;
        for p in net.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cot: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = net.backward(&x, &cot).unwrap();
        let loss = |n: &Mlp, x: &[f64]| n.forward(x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-5;
        let fd_params: Vec<f64> = (0..net.params().len())
            .map(|i| {
                central_difference(
                    |e| {
                        let mut n = net.clone();
                        n.params_mut()[i] += e;
                        loss(&n, &x)
                    },
                    h,
                )
            })
            .collect();
        let fd_input: Vec<f64> = (0..n_in)
            .map(|i| {
                central_difference(
                    |e| {
                        let mut y = x.clone();
                        y[i] += e;
                        loss(&net, &y)
                    },
                    h,
                )
            })
            .collect();
        worst = worst
            .max(relative_error(&g.params, &fd_params))
            .max(relative_error(&g.input, &fd_input));
    }
    r.check(
        "gradient oracle",
        worst < 1e-4,
        format!("50 nets up to {sizes_seen} params, worst relative error {worst:.2e} (< 1e-4)"),
    );
}

fn random_flow(dim: usize, rng: &mut StreamRng) -> FlowModel {
    let st = Standardizer {
        mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        scale: (0..dim).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let mut flow = FlowModel::identity(dim, &FlowConfig::default(), st, rng).unwrap();
    for layer in flow.layers_mut() {
        for p in layer.conditioner_mut().params_mut() {
            *p += rng.random_range(-0.4..0.4);
        }
    }
    flow
}

/// `ln |det A|` by Gaussian elimination with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut out = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        out += pivot.abs().ln();
        let (top, rest) = a.split_at_mut(c + 1);
        for row in rest {
            let f = row[c] / pivot;
            for (x, y) in row[c..].iter_mut().zip(&top[c][c..]) {
                *x -= f * y;
            }
        }
    }
    out
}

pub fn flow_exactness(r: &mut Report) {
    let mut rng = stream(12, "flow-exactness", &[]);
    let (mut round_trip, mut logdet_err) = (0.0f64, 0.0f64);
    let mut pairs = 0;
    for dim in [2usize, 4, 6] {
        let n = if dim == 6 { 334 } else { 333 };
        for _ in 0..n {
            let flow = random_flow(dim, &mut rng);
            let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (x, ld) = flow.forward(&z).unwrap();
            let (z2, ild) = flow.inverse(&x).unwrap();
            let (x2, _) = flow.forward(&z2).unwrap();
            for (a, b) in z.iter().zip(&z2).chain(x.iter().zip(&x2)) {
                round_trip = round_trip.max((a - b).abs());
            }
            round_trip = round_trip.max((ld + ild).abs());
            if dim <= 4 {
                let h = 1e-6;
                let mut jac = vec![vec![0.0; dim]; dim];
                for c in 0..dim {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[c] += h;
                    zm[c] -= h;
                    let (xp, _) = flow.forward(&zp).unwrap();
                    let (xm, _) = flow.forward(&zm).unwrap();
                    for (row, jr) in jac.iter_mut().enumerate() {
                        jr[c] = (xp[row] - xm[row]) / (2.0 * h);
                    }
                }
                let numeric = log_abs_det(jac);
                logdet_err = logdet_err.max((numeric - ld).abs() / ld.abs().max(1.0));
            }
            pairs += 1;
        }
    }
    r.check(
        "flow exactness: round trip",
        round_trip < 1e-8,
        format!("{pairs} pairs over D in {{2, 4, 6}}, max error {round_trip:.2e} (< 1e-8)"),
    );
    r.check(
        "flow exactness: log-determinant",
        logdet_err < 1e-4,
        format!("numerical Jacobian on D <= 4, max relative error {logdet_err:.2e} (< 1e-4)"),
    );
}

pub fn density_fit(r: &mut Report) {
    let (mean, sd) = (3.0, 0.5);
    let normal = Normal::new(mean, sd).unwrap();
    let mut rng = stream(13, "density", &[]);
    let train: Vec<Vec<f64>> = (0..5000).map(|_| vec![normal.sample(&mut rng)]).collect();
    let held_out: Vec<Vec<f64>> = (0..5000).map(|_| vec![normal.sample(&mut rng)]).collect();
    let fit = flows::fit(&train, &FlowConfig::default(), &mut rng).unwrap();
    let ll = fit.model.mean_log_prob(&held_out).unwrap();
    // negative differential entropy of the generating Gaussian
    let optimum = -(0.5 * (2.0 * std::f64::consts::PI * sd * sd).ln() + 0.5);
    r.check(
        "density fitting",
        (ll - optimum).abs() < 0.1,
        format!("held-out mean log-likelihood {ll:.4} vs optimum {optimum:.4} (within 0.1)"),
    );
}

pub fn metrics_arithmetic(r: &mut Report) {
    // (matrix, raw exploitability for j = 2, 3, smoothed series), worked by hand
    type Case = ([[f64; 3]; 3], [f64; 2], [f64; 2]);
    let cases: [Case; 3] = [
        ([[1.0, 2.0, 0.0], [4.0, 6.0, 1.0], [2.0, 0.0, 5.0]], [2.0, 4.0], [2.0, 3.5]),
        ([[-3.0, 0.5, 2.0], [-1.0, -2.0, 4.0], [7.0, -5.0, 0.0]], [-1.0, -1.0], [-1.0, -1.0]),
        ([[7.5; 3]; 3], [0.0, 0.0], [0.0, 0.0]),
    ];
    let mut ok = true;
    for (m, raw, smooth) in &cases {
        let pm = PerformanceMatrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let s = metrics::exploitability_series(&pm, 3).unwrap();
        ok &= s.raw == raw && s.smoothed == smooth;
        ok &= metrics::exploitability(&pm, 2).unwrap() == raw[0] && metrics::exploitability(&pm, 3).unwrap() == raw[1];
    }
    let avg = metrics::moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
    ok &= avg == [1.0, 1.5, 2.5, 3.5];
    r.check("metrics arithmetic", ok, "three fixed 3x3 matrices and a moving average reproduced exactly");
}

/// Point mass on a line driven towards x = 5: `x' = x + v dt`, `v' = v + u dt`,
/// reward `-(x - 5)^2`, starting at rest at the origin.
struct PointMass {
    x: f64,
    v: f64,
}

const DT: f64 = 0.2;
const STEPS: usize = 50;

impl Environment for PointMass {
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn action_bound(&self) -> f64 {
        1.0
    }
    fn horizon(&self) -> usize {
        STEPS
    }
    fn observation_scaling(&self) -> ObsScaling {
        ObsScaling {
            offset: vec![5.0, 0.0],
            scale: vec![5.0, 2.0],
        }
    }
    fn reset(&mut self, _: &mut StreamRng) -> Result<Vec<f64>, EnvError> {
        self.x = 0.0;
        self.v = 0.0;
        Ok(vec![0.0, 0.0])
    }
    fn step(&mut self, u: &[f64], _: &mut StreamRng) -> Result<EnvStep, EnvError> {
        let reward = -(self.x - 5.0) * (self.x - 5.0);
        self.x += self.v * DT;
        self.v += u[0].clamp(-1.0, 1.0) * DT;
        Ok(EnvStep {
            state: vec![self.x, self.v],
            reward,
            hit: false,
        })
    }
}

fn point_mass_return(mut act: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut env = PointMass { x: 0.0, v: 0.0 };
    let mut rng = stream(0, "point-mass", &[]);
    let mut s = env.reset(&mut rng).unwrap();
    let mut total = 0.0;
    for _ in 0..STEPS {
        let out = env.step(&[act(&s)], &mut rng).unwrap();
        total += out.reward;
        s = out.state;
    }
    total
}

pub fn sac_sanity(r: &mut Report) {
    let oracle = (0..=2000)
        .map(|k| {
            let u = -1.0 + k as f64 / 1000.0;
            point_mass_return(|_| u)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let cfg = SacConfig {
        total_steps: 50_000,
        ..SacConfig::default()
    };
    let mut env = PointMass { x: 0.0, v: 0.0 };
    let (policy, _) = best_response(&mut env, &cfg, &mut stream(14, "sac-sanity", &[])).unwrap();
    let learned = evaluate(&policy);
    // returns are negative: 90% of the oracle return means at most 0.9 of its cost
    let target = 0.9 * oracle;
    r.check(
        "SAC sanity",
        learned >= target,
        format!(
            "learned return {learned:.2} vs best constant control {oracle:.2}; needs >= {target:.2}, {} steps",
            cfg.total_steps
        ),
    );
}

fn evaluate(policy: &Policy) -> f64 {
    let mut rng = stream(0, "sac-eval", &[]);
    point_mass_return(|s| policy.select_action(s, ActionMode::Mean, &mut rng).unwrap().0[0])
}
