use std::path::Path;

use flocknrl::scenario::BUNDLED;
use flocknrl::{export_trajectories, run_scenario, simulate, Controller, Scenario};
use flocknrl_core::fp::InitialDistribution;
use flocknrl_core::rng::stream;

use crate::support::{read, tiny};
use crate::Report;

/// Rows of an exported trajectory file at time `t`, as `(x, v)`.
fn states_at(path: &Path, t: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let d = (rdr.headers().unwrap().len() - 3) / 2;
    rdr.records()
        .map(|r| r.unwrap())
        .filter(|r| r[1].parse::<usize>().unwrap() == t)
        .map(|r| {
            let vals: Vec<f64> = r.iter().skip(3).map(|v| v.parse().unwrap()).collect();
            (vals[..d].to_vec(), vals[d..].to_vec())
        })
        .collect()
}

fn run(scenario: &Scenario, out: &Path) {
    run_scenario(scenario, out, |p| {
        eprintln!("  {} iteration {} ({:.0} s)", scenario.name, p.report.j, p.seconds)
    })
    .unwrap_or_else(|e| panic!("{}: {e}", scenario.name));
}

fn smoothed_exploitability(run: &Path) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(run.join("exploitability.csv")).unwrap();
    rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect()
}

pub fn determinism(r: &mut Report) {
    let files = ["iter_1/metrics.csv", "iter_2/metrics.csv", "exploitability.csv", "trajectories.csv"];
    let mut mismatches = Vec::new();
    for (name, _) in BUNDLED {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = tiny(name, 2);
        s.config.seed = 3;
        let dirs = [tmp.path().join("a"), tmp.path().join("b")];
        for dir in &dirs {
            run(&s, dir);
            export_trajectories(dir, 5, 10, None).unwrap();
        }
        for f in files {
            if read(dirs[0].join(f)) != read(dirs[1].join(f)) {
                mismatches.push(format!("{name}/{f}"));
            }
        }
    }
    r.check(
        "determinism",
        mismatches.is_empty(),
        format!(
            "{} bundled scenarios run twice with one seed; differing files: {:?}",
            BUNDLED.len(),
            mismatches
        ),
    );
}

fn mean_pairwise_cosine(vs: &[Vec<f64>]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
    let (mut total, mut pairs) = (0.0, 0usize);
    for a in 0..vs.len() {
        for b in a + 1..vs.len() {
            let dot: f64 = vs[a].iter().zip(&vs[b]).map(|(x, y)| x * y).sum();
            total += dot / (norm(&vs[a]) * norm(&vs[b]));
            pairs += 1;
        }
    }
    total / pairs as f64
}

pub fn consensus_and_trend(r: &mut Report) {
    let (steps, agents) = (200, 100);
    let (mut passes, mut fails, mut trend_ok, mut runs) = (0, 0, 0, 0);
    let mut details = Vec::new();
    let mut trend_details = Vec::new();
    for seed in 1..=5u64 {
        if passes >= 3 || fails >= 3 {
            break;
        }
        let tmp = tempfile::tempdir().unwrap();
        let mut s = Scenario::bundled("simple-4d").unwrap();
        s.config.seed = seed;
        run(&s, tmp.path());
        let summary = export_trajectories(tmp.path(), agents, steps, None).unwrap();
        let vs: Vec<Vec<f64>> = states_at(&summary.path, steps - 1).into_iter().map(|(_, v)| v).collect();
        let cos = mean_pairwise_cosine(&vs);
        let mean: Vec<f64> = (0..2).map(|c| vs.iter().map(|v| v[c]).sum::<f64>() / vs.len() as f64).collect();
        let corner_gap = mean.iter().map(|m| (m.abs() - 1.0).abs()).fold(0.0, f64::max);
        let ok = cos >= 0.95 && corner_gap <= 0.15;
        if ok {
            passes += 1;
        } else {
            fails += 1;
        }
        details.push(format!("seed {seed}: cos {cos:.3}, mean v [{:.2}, {:.2}]", mean[0], mean[1]));

        let e = smoothed_exploitability(tmp.path());
        let k = 5.min(e.len());
        let first = e[..k].iter().sum::<f64>() / k as f64;
        let last = e[e.len() - k..].iter().sum::<f64>() / k as f64;
        runs += 1;
        if last < first {
            trend_ok += 1;
        }
        trend_details.push(format!("seed {seed}: {first:.2} -> {last:.2}"));
    }
    r.check(
        "consensus",
        passes >= 3,
        format!("{passes} of {} seeds reach consensus (need 3 of 5); {}", passes + fails, details.join("; ")),
    );
    r.check(
        "exploitability trend",
        trend_ok == runs,
        format!(
            "smoothed exploitability, mean of first 5 vs last 5, decreases in {trend_ok} of {runs} runs; {}",
            trend_details.join("; ")
        ),
    );
}

/// Export length for the two-lines check: long enough for an agent to
/// travel from anywhere to a line at full speed.
const TWO_LINES_EXPORT_STEPS: usize = 1000;

pub fn two_lines(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::bundled("two-lines-4d").unwrap();
    s.config.seed = 1;
    run(&s, tmp.path());
    let steps = TWO_LINES_EXPORT_STEPS;
    let summary = export_trajectories(tmp.path(), 100, steps, None).unwrap();
    let last = states_at(&summary.path, steps - 1);
    let near = last
        .iter()
        .filter(|(x, _)| (x[1] - 50.0).abs().min((x[1] + 50.0).abs()) <= 10.0)
        .count();
    let frac = near as f64 / last.len() as f64;
    r.check(
        "two-lines structure",
        frac >= 0.8,
        format!("{:.0}% of agents within 10 of x2 = +/-50 after {steps} steps (need 80%)", 100.0 * frac),
    );
}

pub fn obstacle_avoidance(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = Scenario::bundled("many-obstacles-6d").unwrap();
    s.config.seed = 1;
    run(&s, tmp.path());
    let steps = s.config.env.horizon;
    let learned = export_trajectories(tmp.path(), 100, steps, None).unwrap().hit_frequency;
    let init = InitialDistribution::new(&s.config.init, &s.config.env).unwrap();
    let random = simulate(&s.config.env, &init, 100, steps, Controller::Random, &mut stream(1, "random-baseline", &[]))
        .unwrap()
        .hit_frequency();
    r.check(
        "obstacle avoidance",
        learned < 0.05 && random > 0.2,
        format!(
            "hits on {:.1}% of steps for the learned policy (need < 5%), {:.1}% for random actions (need > 20%)",
            100.0 * learned,
            100.0 * random
        ),
    );
}
