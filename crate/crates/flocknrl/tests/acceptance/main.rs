//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Arguments filter groups by substring, e.g.
//! `cargo test --test acceptance -- metrics flow`.

#[path = "../support/mod.rs"]
mod support;

mod behaviour;
mod numeric;

use std::time::Instant;

pub struct Report {
    failed: Vec<String>,
    started: Instant,
}

impl Report {
    pub fn check(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        println!(
            "{} {name}: {} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            detail.as_ref(),
            self.started.elapsed().as_secs_f64()
        );
        if !pass {
            self.failed.push(name.to_string());
        }
        self.started = Instant::now();
    }
}

type Group = (&'static str, fn(&mut Report));

const GROUPS: &[Group] = &[
    ("gradient", numeric::gradient_oracle),
    ("flow", numeric::flow_exactness),
    ("density", numeric::density_fit),
    ("metrics", numeric::metrics_arithmetic),
    ("sac", numeric::sac_sanity),
    ("determinism", behaviour::determinism),
    ("consensus", behaviour::consensus_and_trend),
    ("two-lines", behaviour::two_lines),
    ("obstacles", behaviour::obstacle_avoidance),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut report = Report {
        failed: Vec::new(),
        started: Instant::now(),
    };
    for (name, group) in GROUPS {
        if filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())) {
            report.started = Instant::now();
            group(&mut report);
        }
    }
    if !report.failed.is_empty() {
        println!("failed: {}", report.failed.join(", "));
        std::process::exit(1);
    }
}
