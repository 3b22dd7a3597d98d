use flocknrl_core::flows::{fit, FlowConfig, FlowModel, Standardizer};
use flocknrl_core::{rng, Sampler};
use rand_distr::{Distribution, Normal};

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn ks_statistic(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = normal_cdf(x);
            (c - i as f64 / n).abs().max((((i + 1) as f64) / n - c).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn identity_flow_samples_pass_ks() {
    let mut r = rng::stream(1, "flow-ks", &[]);
    let m = FlowModel::identity(2, &FlowConfig::default(), Standardizer::identity(2), &mut r).unwrap();
    let pts = m.sample(10_000, &mut r);
    // critical value at alpha = 0.01
    let crit = 1.628 / (10_000f64).sqrt();
    for d in 0..2 {
        let ks = ks_statistic(pts.iter().map(|p| p[d]).collect());
        assert!(ks < crit, "coordinate {d}: {ks}");
    }
    assert!(pts.iter().all(|p| m.log_prob(p).unwrap().is_finite()));
}

#[test]
fn one_dimensional_gaussian_fit() {
    let mut r = rng::stream(2, "flow-1d", &[]);
    let dist = Normal::new(3.0, 0.5).unwrap();
    let train: Vec<Vec<f64>> = (0..5000).map(|_| vec![dist.sample(&mut r)]).collect();
    let held: Vec<Vec<f64>> = (0..5000).map(|_| vec![dist.sample(&mut r)]).collect();
    let rep = fit(&train, &FlowConfig::default(), &mut r).unwrap();
    let optimum = -(0.5 * (2.0 * std::f64::consts::PI * 0.25).ln() + 0.5);
    let ll = rep.model.mean_log_prob(&held).unwrap();
    assert!((ll - optimum).abs() < 0.1, "{ll} vs {optimum}");
    assert!(rep.final_log_likelihood >= rep.initial_log_likelihood);
}

#[test]
fn refit_on_own_samples_and_moments() {
    let mut r = rng::stream(3, "flow-self", &[]);
    // a bent two-dimensional cluster
    let data: Vec<Vec<f64>> = (0..3000)
        .map(|_| {
            let a: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut r);
            let b: f64 = Normal::new(0.0, 0.3).unwrap().sample(&mut r);
            vec![10.0 + 4.0 * a, -2.0 + 0.5 * a * a + b]
        })
        .collect();
    let cfg = FlowConfig::default();
    let rep = fit(&data, &cfg, &mut r).unwrap();
    assert!(rep.final_log_likelihood >= rep.initial_log_likelihood);

    let own = rep.model.sample(3000, &mut r);
    let before = rep.model.mean_log_prob(&own).unwrap();
    let refit = fit(&own, &cfg, &mut r).unwrap();
    let after = refit.model.mean_log_prob(&own).unwrap();
    assert!(after >= before - 0.05, "{after} vs {before}");

    let n = data.len() as f64;
    let samples = rep.model.sample(3000, &mut r);
    for d in 0..2 {
        let mean: f64 = data.iter().map(|p| p[d]).sum::<f64>() / n;
        let var: f64 = data.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / n;
        let smean: f64 = samples.iter().map(|p| p[d]).sum::<f64>() / samples.len() as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!((smean - mean).abs() < 3.0 * se, "coord {d}: {smean} vs {mean}");
    }
    assert_eq!(Sampler::dim(&rep.model), 2);
}
