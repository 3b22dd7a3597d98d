#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flocknrl::Scenario;

/// A bundled scenario shrunk to run in about a second per iteration.
pub fn tiny(name: &str, iterations: usize) -> Scenario {
    let mut s = Scenario::bundled(name).expect("bundled scenario");
    let c = &mut s.config;
    c.iterations = iterations;
    c.n_agents = 12;
    c.n_station_samples = 200;
    c.n_mean_samples = 200;
    c.station_horizon = 20;
    c.n_eval = 3;
    c.env.horizon = 20;
    c.sac.total_steps = 120;
    c.sac.warmup_steps = 40;
    c.sac.batch_size = 16;
    c.sac.hidden = vec![8, 8];
    c.flow.epochs = 2;
    c.flow.batch_size = 64;
    s
}

pub fn write_scenario(dir: &Path, s: &Scenario) -> PathBuf {
    let path = dir.join(format!("{}.toml", s.name));
    std::fs::write(&path, s.to_toml()).unwrap();
    path
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flocknrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn read(path: impl AsRef<Path>) -> String {
    let p = path.as_ref();
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
