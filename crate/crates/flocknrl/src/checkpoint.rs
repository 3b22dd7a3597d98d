//! Text checkpoints for networks, policies and flows.
//!
//! Every file starts with `flocknrl-checkpoint 1` followed by `kind <k>`.
//! Each further line is a key followed by whitespace-separated values; blank
//! lines and lines starting with `#` are ignored. A network is stored as
//!
//! ```text
//! net <activation> <n_0> <n_1> ... <n_L>
//! params <count>
//! <values, eight per line>
//! ```
//!
//! where the parameters are laid out layer by layer, each layer being its
//! row-major `n_out x n_in` weight matrix followed by its `n_out` biases.
//! Floats use the shortest representation that parses back to the same bits.
//!
//! `kind policy` adds `action_scale`, `obs_offset` and `obs_scale` before the
//! net. `kind flow` stores `dim`, `bins`, `tail_bound`, `standardizer_mean`,
//! `standardizer_scale` and `layers <n>`, then per layer `layer <i>`,
//! `split`, `permutation` and the conditioner net.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use flocknrl_core::approx::{Activation, Mlp};
use flocknrl_core::env::ObsScaling;
use flocknrl_core::flows::{CouplingLayer, FlowModel, Standardizer};
use flocknrl_core::sac::Policy;

use crate::error::{Error, Result};

pub const MAGIC: &str = "flocknrl-checkpoint";
pub const VERSION: u32 = 1;
const PER_LINE: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct FormatError {
    pub line: usize,
    pub msg: String,
}

fn header(out: &mut String, kind: &str) {
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "kind {kind}");
}

fn floats_line(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

fn write_net(out: &mut String, net: &Mlp) {
    let act = match net.activation() {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
    };
    out.push_str("net ");
    out.push_str(act);
    for n in net.layer_sizes() {
        let _ = write!(out, " {n}");
    }
    let _ = writeln!(out, "\nparams {}", net.params().len());
    for chunk in net.params().chunks(PER_LINE) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn encode_mlp(net: &Mlp) -> String {
    let mut out = String::new();
    header(&mut out, "mlp");
    write_net(&mut out, net);
    out
}

pub fn encode_policy(policy: &Policy) -> String {
    let mut out = String::new();
    header(&mut out, "policy");
    floats_line(&mut out, "action_scale", &[policy.action_scale()]);
    floats_line(&mut out, "obs_offset", &policy.obs_scaling().offset);
    floats_line(&mut out, "obs_scale", &policy.obs_scaling().scale);
    write_net(&mut out, policy.net());
    out
}

pub fn encode_flow(flow: &FlowModel) -> String {
    let mut out = String::new();
    header(&mut out, "flow");
    let _ = writeln!(out, "dim {}", flow.dim());
    let _ = writeln!(out, "bins {}", flow.bins());
    floats_line(&mut out, "tail_bound", &[flow.tail_bound()]);
    floats_line(&mut out, "standardizer_mean", &flow.standardizer().mean);
    floats_line(&mut out, "standardizer_scale", &flow.standardizer().scale);
    let _ = writeln!(out, "layers {}", flow.layers().len());
    for (i, (layer, perm)) in flow.layers().iter().zip(flow.permutations()).enumerate() {
        let _ = writeln!(out, "layer {i}");
        let _ = writeln!(out, "split {}", layer.split());
        out.push_str("permutation");
        for p in perm {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
        write_net(&mut out, layer.conditioner());
    }
    out
}

/// Tokenized lines with their 1-based numbers.
struct Reader<'a> {
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .filter_map(|(i, l)| {
                let l = l.trim();
                (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
            })
            .collect();
        Self { lines, pos: 0 }
    }

    fn err<T>(&self, msg: impl Into<String>) -> std::result::Result<T, FormatError> {
        let line = self
            .lines
            .get(self.pos.min(self.lines.len().saturating_sub(1)))
            .map_or(0, |l| l.0);
        Err(FormatError { line, msg: msg.into() })
    }

    /// Values of the next line, which must start with `key`.
    fn key(&mut self, key: &str) -> std::result::Result<Vec<&'a str>, FormatError> {
        match self.lines.get(self.pos) {
            Some((_, toks)) if toks.first() == Some(&key) => {
                self.pos += 1;
                Ok(toks[1..].to_vec())
            }
            Some((_, toks)) => self.err(format!("expected `{key}`, found `{}`", toks[0])),
            None => self.err(format!("expected `{key}`, found end of file")),
        }
    }

    fn parse<T: FromStr>(&self, tok: &str) -> std::result::Result<T, FormatError> {
        tok.parse().or_else(|_| self.err(format!("cannot parse `{tok}`")))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> std::result::Result<Vec<T>, FormatError> {
        let toks = self.key(key)?;
        self.pos -= 1;
        let out = toks.iter().map(|t| self.parse(t)).collect();
        self.pos += 1;
        out
    }

    fn one<T: FromStr>(&mut self, key: &str) -> std::result::Result<T, FormatError> {
        let mut v = self.list(key)?;
        if v.len() != 1 {
            self.pos -= 1;
            return self.err(format!("`{key}` takes exactly one value"));
        }
        Ok(v.remove(0))
    }

    /// `count` bare floats spread over the following lines.
    fn floats(&mut self, count: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let Some((_, toks)) = self.lines.get(self.pos) else {
                return self.err(format!("expected {count} values, found {}", out.len()));
            };
            for t in toks {
                out.push(self.parse(t)?);
            }
            self.pos += 1;
        }
        if out.len() != count {
            self.pos -= 1;
            return self.err(format!("expected {count} values, found {}", out.len()));
        }
        Ok(out)
    }

    fn header(&mut self, kind: &str) -> std::result::Result<(), FormatError> {
        let version: u32 = self.one(MAGIC)?;
        if version != VERSION {
            self.pos -= 1;
            return self.err(format!("unsupported version {version}"));
        }
        let found = self.key("kind")?;
        if found != [kind] {
            self.pos -= 1;
            return self.err(format!("expected a {kind} checkpoint"));
        }
        Ok(())
    }

    fn net(&mut self) -> std::result::Result<Mlp, FormatError> {
        let toks = self.key("net")?;
        let act = match toks.first() {
            Some(&"tanh") => Activation::Tanh,
            Some(&"relu") => Activation::Relu,
            _ => {
                self.pos -= 1;
                return self.err("unknown activation");
            }
        };
        self.pos -= 1;
        let sizes = toks[1..].iter().map(|t| self.parse(t)).collect::<std::result::Result<Vec<usize>, _>>()?;
        self.pos += 1;
        let count: usize = self.one("params")?;
        let params = self.floats(count)?;
        Mlp::from_parts(sizes, act, params).or_else(|e| self.err(e.to_string()))
    }

    fn finish(&self) -> std::result::Result<(), FormatError> {
        if self.pos < self.lines.len() {
            return self.err("unexpected trailing content");
        }
        Ok(())
    }
}

pub fn decode_mlp(text: &str) -> std::result::Result<Mlp, FormatError> {
    let mut r = Reader::new(text);
    r.header("mlp")?;
    let net = r.net()?;
    r.finish()?;
    Ok(net)
}

pub fn decode_policy(text: &str) -> std::result::Result<Policy, FormatError> {
    let mut r = Reader::new(text);
    r.header("policy")?;
    let action_scale = r.one("action_scale")?;
    let offset = r.list("obs_offset")?;
    let scale = r.list("obs_scale")?;
    let net = r.net()?;
    r.finish()?;
    Policy::from_parts(net, action_scale, ObsScaling { offset, scale }).or_else(|e| r.err(e.to_string()))
}

pub fn decode_flow(text: &str) -> std::result::Result<FlowModel, FormatError> {
    let mut r = Reader::new(text);
    r.header("flow")?;
    let dim: usize = r.one("dim")?;
    let bins: usize = r.one("bins")?;
    let tail_bound: f64 = r.one("tail_bound")?;
    let mean = r.list("standardizer_mean")?;
    let scale = r.list("standardizer_scale")?;
    let n_layers: usize = r.one("layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut perms = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let idx: usize = r.one("layer")?;
        if idx != i {
            r.pos -= 1;
            return r.err(format!("expected layer {i}"));
        }
        let split: usize = r.one("split")?;
        perms.push(r.list::<usize>("permutation")?);
        let net = r.net()?;
        layers.push(CouplingLayer::from_parts(dim, split, bins, tail_bound, net).or_else(|e| r.err(e.to_string()))?);
    }
    r.finish()?;
    FlowModel::from_parts(layers, perms, Standardizer { mean, scale }).or_else(|e| r.err(e.to_string()))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

fn read_with<T>(path: &Path, decode: fn(&str) -> std::result::Result<T, FormatError>) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    decode(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line,
        msg: e.msg,
    })
}

pub fn load_policy(path: &Path) -> Result<Policy> {
    read_with(path, decode_policy)
}

pub fn load_flow(path: &Path) -> Result<FlowModel> {
    read_with(path, decode_flow)
}
