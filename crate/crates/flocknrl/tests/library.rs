mod support;

use std::time::Instant;

use flocknrl::scenario::BUNDLED;
use flocknrl::{run_scenario, simulate, Controller, RunDir, Scenario};
use flocknrl_core::approx::{Activation, Mlp};
use flocknrl_core::fp::InitialDistribution;
use flocknrl_core::rng::stream;
use flocknrl_core::sac::{ActionMode, Policy};
use flocknrl_core::Sampler;

use support::tiny;

#[test]
fn every_bundled_scenario_smoke_runs() {
    for (name, _) in BUNDLED {
        let tmp = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let st = run_scenario(&tiny(name, 1), tmp.path(), |_| {}).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(st.j(), 1);
        assert!(t.elapsed().as_secs() < 300, "{name} took {:?}", t.elapsed());
    }
}

#[test]
fn reloaded_state_reproduces_mean_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tiny("one-obstacle-6d", 2);
    let st = run_scenario(&s, tmp.path(), |_| {}).unwrap();
    let back = RunDir::new(tmp.path()).load_state(&s.config).unwrap();
    assert_eq!(back, st);
    let a = st.mean_flows[1].sample(20, &mut stream(4, "check", &[]));
    let b = back.mean_flows[1].sample(20, &mut stream(4, "check", &[]));
    assert_eq!(a, b);
    assert_eq!(Scenario::parse(&support::read(tmp.path().join("config.toml"))).unwrap(), s);
}

#[test]
fn zero_policy_without_noise_keeps_agents_still() {
    let mut s = tiny("simple-4d", 1).config;
    s.init.velocity_std = 0.0;
    let init = InitialDistribution::new(&s.init, &s.env).unwrap();
    let sizes = vec![4, 3, 4];
    let net = Mlp::from_parts(sizes.clone(), Activation::Relu, vec![0.0; Mlp::param_count(&sizes)]).unwrap();
    let policy = Policy::from_parts(net, 1.0, s.env.observation_scaling()).unwrap();
    let traj = simulate(
        &s.env,
        &init,
        3,
        5,
        Controller::Policy(&policy, ActionMode::Mean),
        &mut stream(1, "stub", &[]),
    )
    .unwrap();
    for t in 0..=5 {
        assert_eq!(traj.states[t], traj.states[0]);
    }
    assert_eq!(traj.hits, 0);
}

#[test]
fn random_agents_hit_the_column_grid() {
    let s = Scenario::bundled("many-obstacles-6d").unwrap().config;
    let init = InitialDistribution::new(&s.init, &s.env).unwrap();
    let traj = simulate(&s.env, &init, 50, 100, Controller::Random, &mut stream(2, "random", &[])).unwrap();
    assert!(traj.hit_frequency() > 0.2, "{}", traj.hit_frequency());
    for st in traj.final_states() {
        assert!(!s.env.obstacles.iter().any(|o| o.contains_strictly(&st.x)));
    }
    assert_eq!(init.dim(), 6);
}
