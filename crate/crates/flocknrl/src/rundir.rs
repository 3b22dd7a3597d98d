//! Run directories.
//!
//! ```text
//! <run>/config.toml           scenario with every default written out
//! <run>/exploitability.csv    j,e_raw,e_smoothed
//! <run>/iter_<j>/policy.ckpt
//! <run>/iter_<j>/flow.ckpt        occupancy flow of the best response
//! <run>/iter_<j>/mean_flow.ckpt
//! <run>/iter_<j>/pop_sample.csv   agent_id,x1..xd,v1..vd
//! <run>/iter_<j>/metrics.csv      j,i,M_ij for entries computed at iteration j
//! <run>/iter_<j>/curve.csv        episode,return
//! ```
//!
//! In `metrics.csv`, `j` is the policy and `i` the iteration whose start
//! distribution and population were used. Iteration directories are written
//! under a temporary name and renamed once complete.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flocknrl_core::env::{AgentState, PopulationSample};
use flocknrl_core::fp::{self, FpConfig, FpState, IterationReport};
use flocknrl_core::metrics::ExploitabilitySeries;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::table::{self, num};

pub const CONFIG_FILE: &str = "config.toml";
pub const EXPLOITABILITY_FILE: &str = "exploitability.csv";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn iter_dir(&self, j: usize) -> PathBuf {
        self.root.join(format!("iter_{j}"))
    }

    pub fn load_scenario(&self) -> Result<Scenario> {
        let path = self.root.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        Scenario::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Completed iterations `1..=k`, stopping at the first missing one.
    pub fn completed(&self) -> usize {
        (1..).take_while(|&j| self.iter_dir(j).is_dir()).count()
    }

    /// State after every completed iteration, capped at `cfg.iterations`.
    pub fn load_state(&self, cfg: &FpConfig) -> Result<FpState> {
        let mut st = FpState::default();
        let d = cfg.env.d;
        for j in 1..=self.completed().min(cfg.iterations) {
            let dir = self.iter_dir(j);
            st.policies.push(checkpoint::load_policy(&dir.join("policy.ckpt"))?);
            st.flows.push(checkpoint::load_flow(&dir.join("flow.ckpt"))?);
            st.mean_flows.push(checkpoint::load_flow(&dir.join("mean_flow.ckpt"))?);
            st.populations.push(read_population(&dir.join("pop_sample.csv"), d)?);
            st.curves.push(read_curve(&dir.join("curve.csv"))?);
            let path = dir.join("metrics.csv");
            for rec in table::read(&path, &table::header(&["j", "i", "M_ij"]))? {
                let policy: usize = table::field(&path, &rec, 0)?;
                let row: usize = table::field(&path, &rec, 1)?;
                if policy == 0 || row == 0 || policy > j || row > j {
                    return Err(Error::Format {
                        path: path.clone(),
                        line: rec.position().map_or(0, |p| p.line() as usize),
                        msg: format!("entry ({row}, {policy}) outside iteration {j}"),
                    });
                }
                st.matrix.set(row, policy, table::field(&path, &rec, 2)?);
            }
        }
        Ok(st)
    }

    /// Persist iteration `report.j` of `state`.
    pub fn save_iteration(&self, state: &FpState, report: &IterationReport) -> Result<()> {
        let j = report.j;
        let final_dir = self.iter_dir(j);
        let tmp = self.root.join(format!("iter_{j}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(Error::io(&tmp))?;
        checkpoint::write_file(&tmp.join("policy.ckpt"), &checkpoint::encode_policy(&state.policies[j - 1]))?;
        checkpoint::write_file(&tmp.join("flow.ckpt"), &checkpoint::encode_flow(&state.flows[j - 1]))?;
        checkpoint::write_file(&tmp.join("mean_flow.ckpt"), &checkpoint::encode_flow(&state.mean_flows[j - 1]))?;
        write_population(&tmp.join("pop_sample.csv"), &state.populations[j - 1])?;
        table::write(
            &tmp.join("curve.csv"),
            &table::header(&["episode", "return"]),
            state.curves[j - 1].iter().enumerate().map(|(e, r)| vec![e.to_string(), num(*r)]),
        )?;
        table::write(
            &tmp.join("metrics.csv"),
            &table::header(&["j", "i", "M_ij"]),
            report
                .new_entries
                .iter()
                .map(|&(row, policy, v)| vec![policy.to_string(), row.to_string(), num(v)]),
        )?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(Error::io(&final_dir))?;
        }
        fs::rename(&tmp, &final_dir).map_err(Error::io(&final_dir))
    }

    pub fn write_exploitability(&self, series: &ExploitabilitySeries) -> Result<()> {
        write_exploitability(&self.root.join(EXPLOITABILITY_FILE), series)
    }
}

pub(crate) fn write_exploitability(path: &Path, series: &ExploitabilitySeries) -> Result<()> {
    table::write(
        path,
        &table::header(&["j", "e_raw", "e_smoothed"]),
        series
            .iterations
            .iter()
            .zip(&series.raw)
            .zip(&series.smoothed)
            .map(|((j, r), s)| vec![j.to_string(), num(*r), num(*s)]),
    )
}

fn write_population(path: &Path, pop: &PopulationSample) -> Result<()> {
    let mut header = vec!["agent_id".to_string()];
    header.extend(table::state_columns(pop.dim()));
    table::write(
        path,
        &header,
        pop.states().iter().enumerate().map(|(i, s)| {
            let mut row = vec![i.to_string()];
            row.extend(s.x.iter().chain(&s.v).map(|v| num(*v)));
            row
        }),
    )
}

fn read_population(path: &Path, d: usize) -> Result<PopulationSample> {
    let mut header = vec!["agent_id".to_string()];
    header.extend(table::state_columns(d));
    let mut states = Vec::new();
    for rec in table::read(path, &header)? {
        let vals = (1..=2 * d)
            .map(|c| table::field(path, &rec, c))
            .collect::<Result<Vec<f64>>>()?;
        states.push(AgentState::new(vals[..d].to_vec(), vals[d..].to_vec()).expect("equal halves"));
    }
    PopulationSample::new(states).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })
}

fn read_curve(path: &Path) -> Result<Vec<f64>> {
    table::read(path, &table::header(&["episode", "return"]))?
        .iter()
        .map(|rec| table::field(path, rec, 1))
        .collect()
}

/// Progress of one finished iteration.
#[derive(Debug, Clone)]
pub struct Progress<'a> {
    pub report: &'a IterationReport,
    pub seconds: f64,
}

/// Run `scenario` into `out`, resuming from the iterations already stored
/// there when the stored config matches.
pub fn run_scenario(scenario: &Scenario, out: &Path, mut progress: impl FnMut(Progress<'_>)) -> Result<FpState> {
    scenario.validate()?;
    let dir = RunDir::new(out);
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut state = FpState::default();
    if out.join(CONFIG_FILE).exists() {
        let stored = dir.load_scenario()?;
        let mut a = stored.config.clone();
        a.iterations = scenario.config.iterations;
        if stored.name != scenario.name || a != scenario.config {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                out.display()
            )));
        }
        state = dir.load_state(&scenario.config)?;
    }
    checkpoint::write_file(&out.join(CONFIG_FILE), &scenario.to_toml())?;

    let mut clock = Instant::now();
    let mut io_error = None;
    let result = fp::run(&scenario.config, state, |st, report| {
        let saved = dir.save_iteration(st, report).and_then(|_| match &report.exploitability {
            Some(series) => dir.write_exploitability(series),
            None => Ok(()),
        });
        if let Err(e) = saved {
            let msg = e.to_string();
            io_error = Some(e);
            return Err(fp::FpError::Observer(msg));
        }
        progress(Progress {
            report,
            seconds: clock.elapsed().as_secs_f64(),
        });
        clock = Instant::now();
        Ok(())
    });
    match (result, io_error) {
        (_, Some(e)) => Err(e),
        (Ok(st), None) => Ok(st),
        (Err(e), None) => Err(e.into()),
    }
}
