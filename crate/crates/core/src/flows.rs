//! Neural spline flows: rational-quadratic spline coupling layers.
//!
//! A [`FlowModel`] maps standard-normal base points to data through a stack
//! of coupling layers (generative direction, [`FlowModel::forward`]), with a
//! fixed per-coordinate standardization at the data end. Densities are
//! evaluated through the exact inverse.
//!
//! Each transformed coordinate goes through a monotone rational-quadratic
//! spline on `[-B, B]` with `K` bins. Its `3K - 1` raw parameters are split
//! into width logits, height logits and interior-derivative pre-activations:
//! widths and heights are `2B * softmax(.)`, interior derivatives are
//! `softplus(.)`, and the two boundary derivatives are 1 so the spline joins
//! the identity tails smoothly.
//!
//! Fitting needs gradients through the inverse spline. They come from
//! implicit differentiation of the forward formula, whose partial
//! derivatives are taken with a 7-direction dual number over
//! `(x, x_k, w_k, y_k, h_k, d_k, d_{k+1})` of the active bin.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::approx::{Activation, Adam, AdamConfig, ApproxError, Mlp, Workspace};
use crate::math::{self, Dual};
use crate::{Sampler, StreamRng};

/// Smallest standardization scale.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("non-finite spline parameter at index {index}")]
    NonFiniteParams { index: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset has {got} points, fitting needs at least {need}")]
    DatasetTooSmall { need: usize, got: usize },
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("every minibatch produced a non-finite gradient")]
    Diverged,
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

/// Raw parameters of one scalar spline.
#[derive(Debug, Clone, PartialEq)]
pub struct RqSplineParams {
    pub bins: usize,
    pub tail_bound: f64,
    /// `[theta_w (K), theta_h (K), theta_d (K - 1)]`
    pub raw: Vec<f64>,
}

impl RqSplineParams {
    pub fn new(bins: usize, tail_bound: f64, raw: Vec<f64>) -> Result<Self, FlowError> {
        check_spline_shape(bins, tail_bound)?;
        if raw.len() != 3 * bins - 1 {
            return Err(FlowError::DimensionMismatch {
                expected: 3 * bins - 1,
                got: raw.len(),
            });
        }
        if let Some(index) = raw.iter().position(|r| !r.is_finite()) {
            return Err(FlowError::NonFiniteParams { index });
        }
        Ok(Self { bins, tail_bound, raw })
    }

    /// Parameters of the identity map on `[-B, B]`.
    pub fn identity(bins: usize, tail_bound: f64) -> Self {
        let mut raw = vec![0.0; 3 * bins - 1];
        raw[2 * bins..].fill(math::softplus_inv(1.0));
        Self { bins, tail_bound, raw }
    }
}

fn check_spline_shape(bins: usize, tail_bound: f64) -> Result<(), FlowError> {
    if bins < 2 {
        return Err(FlowError::InvalidConfig("spline needs at least 2 bins".into()));
    }
    if !(tail_bound > 0.0) {
        return Err(FlowError::InvalidConfig("tail bound must be positive".into()));
    }
    Ok(())
}

/// Knot positions and derivatives decoded from raw parameters.
#[derive(Debug, Clone)]
struct Knots {
    bins: usize,
    tail: f64,
    sw: Vec<f64>,
    sh: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    derivs: Vec<f64>,
    dsig: Vec<f64>,
}

impl Knots {
    fn new(bins: usize, tail: f64) -> Self {
        Self {
            bins,
            tail,
            sw: vec![0.0; bins],
            sh: vec![0.0; bins],
            xs: vec![0.0; bins + 1],
            ys: vec![0.0; bins + 1],
            derivs: vec![1.0; bins + 1],
            dsig: vec![0.0; bins - 1],
        }
    }

    fn load(&mut self, raw: &[f64]) {
        let k = self.bins;
        let two_b = 2.0 * self.tail;
        math::softmax(&raw[..k], &mut self.sw);
        math::softmax(&raw[k..2 * k], &mut self.sh);
        self.xs[0] = -self.tail;
        self.ys[0] = -self.tail;
        for i in 0..k {
            self.xs[i + 1] = self.xs[i] + two_b * self.sw[i];
            self.ys[i + 1] = self.ys[i] + two_b * self.sh[i];
        }
        for i in 0..k - 1 {
            let t = raw[2 * k + i];
            self.derivs[i + 1] = math::softplus(t);
            self.dsig[i] = math::sigmoid(t);
        }
    }

    fn width(&self, i: usize) -> f64 {
        2.0 * self.tail * self.sw[i]
    }

    fn height(&self, i: usize) -> f64 {
        2.0 * self.tail * self.sh[i]
    }

    /// Bin whose interval contains `v` given the knot array.
    fn bin_of(knots: &[f64], v: f64) -> usize {
        let k = knots.len() - 1;
        knots[1..k].iter().take_while(|&&t| t <= v).count()
    }

    /// `[x_k, w_k, y_k, h_k, d_k, d_{k+1}]`
    fn local(&self, k: usize) -> [f64; 6] {
        [
            self.xs[k],
            self.width(k),
            self.ys[k],
            self.height(k),
            self.derivs[k],
            self.derivs[k + 1],
        ]
    }

    /// Chain cotangents on the local quantities of bin `k` back to raw
    /// parameters, accumulating into `out` (length `3K - 1`).
    fn accumulate_raw(&self, k: usize, c: [f64; 6], out: &mut [f64]) {
        let n = self.bins;
        let [c_x, c_w, c_y, c_h, c_dl, c_dr] = c;
        let (wk, hk) = (self.width(k), self.height(k));
        let sx = c_x * (self.xs[k] + self.tail) + c_w * wk;
        let sy = c_y * (self.ys[k] + self.tail) + c_h * hk;
        for j in 0..n {
            let mut gw = -self.sw[j] * sx;
            let mut gh = -self.sh[j] * sy;
            if j < k {
                gw += c_x * self.width(j);
                gh += c_y * self.height(j);
            } else if j == k {
                gw += c_w * wk;
                gh += c_h * hk;
            }
            out[j] += gw;
            out[n + j] += gh;
        }
        if k >= 1 {
            out[2 * n + k - 1] += c_dl * self.dsig[k - 1];
        }
        if k + 1 < n {
            out[2 * n + k] += c_dr * self.dsig[k];
        }
    }
}

/// Rational-quadratic map on one bin and its log-derivative.
#[inline]
fn rq_eval<const N: usize>(x: Dual<N>, p: [Dual<N>; 6]) -> (Dual<N>, Dual<N>) {
    let [xk, wk, yk, hk, dl, dr] = p;
    let xi = (x - xk) / wk;
    let s = hk / wk;
    let one_minus = Dual::constant(1.0) - xi;
    let xi1m = xi * one_minus;
    let den = s + (dr + dl - s * 2.0) * xi1m;
    let num = hk * (s * xi * xi + dl * xi1m);
    let y = yk + num / den;
    let dnum = s * s * (dr * xi * xi + s * xi1m * 2.0 + dl * one_minus * one_minus);
    let logd = dnum.ln() - den.ln() * 2.0;
    (y, logd)
}

fn rq_forward_plain(x: f64, p: [f64; 6]) -> (f64, f64) {
    let (y, l) = rq_eval::<0>(Dual::constant(x), p.map(Dual::constant));
    (y.re, l.re)
}

fn rq_with_partials(x: f64, p: [f64; 6]) -> (Dual<7>, Dual<7>) {
    let xd = Dual::variable(x, 0);
    let mut pd = [Dual::constant(0.0); 6];
    for i in 0..6 {
        pd[i] = Dual::variable(p[i], i + 1);
    }
    rq_eval(xd, pd)
}

/// Solve the bin-local quadratic for the preimage of `y`.
fn rq_solve(y: f64, p: [f64; 6]) -> f64 {
    let [xk, wk, yk, hk, dl, dr] = p;
    let s = hk / wk;
    let dy = y - yk;
    let sum = dr + dl - 2.0 * s;
    let a = hk * (s - dl) + dy * sum;
    let b = hk * dl - dy * sum;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let denom = -b - math::sqrt(disc);
    let xi = if denom == 0.0 { 0.0 } else { (2.0 * c / denom).clamp(0.0, 1.0) };
    let mut x = xk + xi * wk;
    // one Newton step cleans up cancellation in the closed form
    let (g, l) = rq_eval::<1>(Dual::variable(x, 0), p.map(Dual::constant));
    if l.re.is_finite() && g.eps[0] > 0.0 {
        x = (x - (g.re - y) / g.eps[0]).clamp(xk, xk + wk);
    }
    x
}

fn check_raw(raw: &[f64]) -> Result<(), FlowError> {
    match raw.iter().position(|r| !r.is_finite()) {
        Some(index) => Err(FlowError::NonFiniteParams { index }),
        None => Ok(()),
    }
}

/// Forward spline map: `(y, log dy/dx)`. Identity outside `[-B, B]`.
pub fn spline_forward(x: f64, p: &RqSplineParams) -> Result<(f64, f64), FlowError> {
    check_raw(&p.raw)?;
    if !x.is_finite() {
        return Err(FlowError::NonFiniteInput);
    }
    let mut knots = Knots::new(p.bins, p.tail_bound);
    knots.load(&p.raw);
    Ok(forward_with(&knots, x))
}

/// Inverse spline map: `(x, log dx/dy)`. Identity outside `[-B, B]`.
pub fn spline_inverse(y: f64, p: &RqSplineParams) -> Result<(f64, f64), FlowError> {
    check_raw(&p.raw)?;
    if !y.is_finite() {
        return Err(FlowError::NonFiniteInput);
    }
    let mut knots = Knots::new(p.bins, p.tail_bound);
    knots.load(&p.raw);
    Ok(inverse_with(&knots, y))
}

fn forward_with(knots: &Knots, x: f64) -> (f64, f64) {
    if x < -knots.tail || x > knots.tail {
        return (x, 0.0);
    }
    let k = Knots::bin_of(&knots.xs, x);
    rq_forward_plain(x, knots.local(k))
}

fn inverse_with(knots: &Knots, y: f64) -> (f64, f64) {
    if y < -knots.tail || y > knots.tail {
        return (y, 0.0);
    }
    let k = Knots::bin_of(&knots.ys, y);
    let p = knots.local(k);
    let x = rq_solve(y, p);
    let (_, l) = rq_forward_plain(x, p);
    (x, -l)
}

/// Inverse spline with its reverse-mode rule. Given cotangents on the
/// outputs `(x, logdet)`, returns the cotangent on `y` and accumulates raw
/// parameter cotangents into `c_raw`.
fn inverse_backward(knots: &Knots, y: f64, c_x: f64, c_ld: f64, c_raw: &mut [f64]) -> f64 {
    if y < -knots.tail || y > knots.tail {
        return c_x;
    }
    let k = Knots::bin_of(&knots.ys, y);
    let p = knots.local(k);
    let x = rq_solve(y, p);
    let (g, l) = rq_with_partials(x, p);
    let gx = g.eps[0];
    let lx = l.eps[0];
    let mut c_local = [0.0; 6];
    for i in 0..6 {
        let dxdp = -g.eps[i + 1] / gx;
        c_local[i] = c_x * dxdp - c_ld * (l.eps[i + 1] + lx * dxdp);
    }
    knots.accumulate_raw(k, c_local, c_raw);
    (c_x - c_ld * lx) / gx
}

/// Coupling layer: coordinates `0..split` pass through and condition the
/// splines applied to `split..dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    bins: usize,
    tail_bound: f64,
    conditioner: Mlp,
}

impl CouplingLayer {
    /// A layer whose conditioner outputs identity spline parameters.
    pub fn identity(
        dim: usize,
        split: usize,
        bins: usize,
        tail_bound: f64,
        hidden: usize,
        rng: &mut StreamRng,
    ) -> Result<Self, FlowError> {
        check_spline_shape(bins, tail_bound)?;
        if split >= dim || (split == 0 && dim > 1) {
            return Err(FlowError::InvalidConfig(alloc::format!(
                "split {split} must satisfy 1 <= split < {dim}"
            )));
        }
        let n_out = (dim - split) * (3 * bins - 1);
        let mut conditioner = Mlp::new(&[split, hidden, n_out], Activation::Tanh, rng)?;
        let wr = conditioner.output_weight_range();
        conditioner.params_mut()[wr].fill(0.0);
        let br = conditioner.output_bias_range();
        let ident = RqSplineParams::identity(bins, tail_bound);
        for (i, p) in conditioner.params_mut()[br].iter_mut().enumerate() {
            *p = ident.raw[i % (3 * bins - 1)];
        }
        Ok(Self {
            dim,
            split,
            bins,
            tail_bound,
            conditioner,
        })
    }

    pub fn from_parts(dim: usize, split: usize, bins: usize, tail_bound: f64, conditioner: Mlp) -> Result<Self, FlowError> {
        check_spline_shape(bins, tail_bound)?;
        if split >= dim || (split == 0 && dim > 1) {
            return Err(FlowError::InvalidConfig(alloc::format!(
                "split {split} must satisfy 1 <= split < {dim}"
            )));
        }
        if conditioner.input_dim() != split || conditioner.output_dim() != (dim - split) * (3 * bins - 1) {
            return Err(FlowError::InvalidConfig("conditioner shape does not match layer".into()));
        }
        Ok(Self {
            dim,
            split,
            bins,
            tail_bound,
            conditioner,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn conditioner_mut(&mut self) -> &mut Mlp {
        &mut self.conditioner
    }

    fn n_raw(&self) -> usize {
        3 * self.bins - 1
    }

    fn check(&self, v: &[f64]) -> Result<(), FlowError> {
        if v.len() != self.dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(FlowError::NonFiniteInput);
        }
        Ok(())
    }

    /// Spline parameters the conditioner assigns, one block per transformed
    /// coordinate.
    pub fn spline_params(&self, x: &[f64]) -> Result<Vec<RqSplineParams>, FlowError> {
        self.check(x)?;
        let raw = self.conditioner.forward(&x[..self.split])?;
        raw.chunks(self.n_raw())
            .map(|c| RqSplineParams::new(self.bins, self.tail_bound, c.to_vec()))
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.map(x, false)
    }

    pub fn inverse(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.map(y, true)
    }

    fn map(&self, input: &[f64], inverse: bool) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(input)?;
        let raw = self.conditioner.forward(&input[..self.split])?;
        check_raw(&raw)?;
        let mut knots = Knots::new(self.bins, self.tail_bound);
        let mut out = input.to_vec();
        let mut logdet = 0.0;
        for (i, block) in raw.chunks(self.n_raw()).enumerate() {
            knots.load(block);
            let c = self.split + i;
            let (v, l) = if inverse {
                inverse_with(&knots, input[c])
            } else {
                forward_with(&knots, input[c])
            };
            out[c] = v;
            logdet += l;
        }
        Ok((out, logdet))
    }
}

/// Per-coordinate affine standardization `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of the data. Returns the indices of
    /// coordinates whose scale had to be clamped to [`MIN_SCALE`].
    pub fn fit(data: &[Vec<f64>], dim: usize) -> (Self, Vec<usize>) {
        let n = data.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in data {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for x in data {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut clamped = Vec::new();
        let scale = var
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sd = math::sqrt(s / n);
                if sd < MIN_SCALE {
                    clamped.push(i);
                    MIN_SCALE
                } else {
                    sd
                }
            })
            .collect();
        (Self { mean, scale }, clamped)
    }

    /// `log |d z / d x|`
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| math::ln(*s)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            bins: 8,
            tail_bound: 4.0,
            hidden: 8,
            epochs: 20,
            batch_size: 256,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        check_spline_shape(self.bins, self.tail_bound)?;
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(FlowError::InvalidConfig(
                "layers, hidden and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    bins: usize,
    tail_bound: f64,
    layers: Vec<CouplingLayer>,
    /// Applied before the matching layer in the generative direction:
    /// `out[i] = in[perm[i]]`.
    permutations: Vec<Vec<usize>>,
    standardizer: Standardizer,
}

/// Alternating identity / reversal permutations.
pub fn alternating_permutations(dim: usize, layers: usize) -> Vec<Vec<usize>> {
    (0..layers)
        .map(|l| {
            if l % 2 == 0 {
                (0..dim).collect()
            } else {
                (0..dim).rev().collect()
            }
        })
        .collect()
}

impl FlowModel {
    /// A flow that is the identity map (up to the standardizer).
    pub fn identity(dim: usize, cfg: &FlowConfig, standardizer: Standardizer, rng: &mut StreamRng) -> Result<Self, FlowError> {
        cfg.validate()?;
        if dim == 0 || standardizer.mean.len() != dim || standardizer.scale.len() != dim {
            return Err(FlowError::DimensionMismatch {
                expected: dim,
                got: standardizer.mean.len(),
            });
        }
        let split = dim / 2;
        let layers = (0..cfg.layers)
            .map(|_| CouplingLayer::identity(dim, split, cfg.bins, cfg.tail_bound, cfg.hidden, rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dim,
            bins: cfg.bins,
            tail_bound: cfg.tail_bound,
            layers,
            permutations: alternating_permutations(dim, cfg.layers),
            standardizer,
        })
    }

    pub fn from_parts(
        layers: Vec<CouplingLayer>,
        permutations: Vec<Vec<usize>>,
        standardizer: Standardizer,
    ) -> Result<Self, FlowError> {
        let first = layers
            .first()
            .ok_or_else(|| FlowError::InvalidConfig("a flow needs at least one layer".into()))?;
        let (dim, bins, tail_bound) = (first.dim, first.bins, first.tail_bound);
        if layers.iter().any(|l| l.dim != dim || l.bins != bins || l.tail_bound != tail_bound) {
            return Err(FlowError::InvalidConfig("layers disagree on shape".into()));
        }
        if permutations.len() != layers.len() {
            return Err(FlowError::InvalidConfig("one permutation per layer required".into()));
        }
        for p in &permutations {
            let mut seen = vec![false; dim];
            for &i in p {
                if i >= dim || seen[i] {
                    return Err(FlowError::InvalidConfig("permutation is not a bijection".into()));
                }
                seen[i] = true;
            }
            if p.len() != dim {
                return Err(FlowError::InvalidConfig("permutation is not a bijection".into()));
            }
        }
        if standardizer.mean.len() != dim
            || standardizer.scale.len() != dim
            || standardizer.scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(FlowError::InvalidConfig("standardizer scales must be positive".into()));
        }
        Ok(Self {
            dim,
            bins,
            tail_bound,
            layers,
            permutations,
            standardizer,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer] {
        &mut self.layers
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn check(&self, v: &[f64]) -> Result<(), FlowError> {
        if v.len() != self.dim {
            return Err(FlowError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(FlowError::NonFiniteInput);
        }
        Ok(())
    }

    /// Base point to data point, with `log |det d x / d z|`.
    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(z)?;
        let mut h = z.to_vec();
        let mut logdet = 0.0;
        for (layer, perm) in self.layers.iter().zip(&self.permutations) {
            let permuted: Vec<f64> = perm.iter().map(|&i| h[i]).collect();
            let (out, l) = layer.forward(&permuted)?;
            h = out;
            logdet += l;
        }
        let st = &self.standardizer;
        for i in 0..self.dim {
            h[i] = h[i] * st.scale[i] + st.mean[i];
        }
        Ok((h, logdet - st.log_jacobian()))
    }

    /// Data point to base point, with `log |det d z / d x|`.
    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(x)?;
        let st = &self.standardizer;
        let mut h: Vec<f64> = (0..self.dim).map(|i| (x[i] - st.mean[i]) / st.scale[i]).collect();
        let mut logdet = st.log_jacobian();
        for (layer, perm) in self.layers.iter().zip(&self.permutations).rev() {
            let (out, l) = layer.inverse(&h)?;
            logdet += l;
            for (i, &p) in perm.iter().enumerate() {
                h[p] = out[i];
            }
        }
        Ok((h, logdet))
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64, FlowError> {
        let (z, logdet) = self.inverse(x)?;
        Ok(std_normal_log_density(&z) + logdet)
    }

    /// Mean log-likelihood over `data`, evaluated in batches.
    pub fn mean_log_prob(&self, data: &[Vec<f64>]) -> Result<f64, FlowError> {
        let mut trainer = Trainer::new(self);
        let mut total = 0.0;
        for chunk in data.chunks(512) {
            total += trainer.batch(self, chunk, false)? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn n_raw(&self) -> usize {
        3 * self.bins - 1
    }
}

impl Sampler for FlowModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_one(&self, rng: &mut StreamRng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
        self.forward(&z)
            .expect("base draws are finite and conditioner parameters are validated")
            .0
    }
}

pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * math::LN_2PI + math::dot(z, z))
}

/// Uniform mixture: each point picks a component uniformly, then samples it.
pub fn mixture_sample(components: &[&dyn Sampler], n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    assert!(!components.is_empty(), "mixture needs at least one component");
    if components.len() == 1 {
        return (0..n).map(|_| components[0].sample_one(rng)).collect();
    }
    (0..n)
        .map(|_| {
            let i = rng.random_range(0..components.len());
            components[i].sample_one(rng)
        })
        .collect()
}

/// Exact log-density of the uniform mixture of `flows`.
pub fn mixture_log_prob(flows: &[FlowModel], x: &[f64]) -> Result<f64, FlowError> {
    let logs = flows.iter().map(|f| f.log_prob(x)).collect::<Result<Vec<_>, _>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().map(|l| math::exp(l - max)).sum();
    Ok(max + math::ln(s) - math::ln(flows.len() as f64))
}

/// Batched inverse pass with optional gradient of the mean negative
/// log-likelihood with respect to every conditioner parameter.
struct Trainer {
    workspaces: Vec<Workspace>,
    /// Data-side input of each layer in the inverse pass, `batch x dim`.
    layer_inputs: Vec<Vec<f64>>,
    knots: Knots,
    grads: Vec<Vec<f64>>,
    c_raw: Vec<f64>,
}

impl Trainer {
    fn new(model: &FlowModel) -> Self {
        Self {
            workspaces: vec![Workspace::new(); model.layers.len()],
            layer_inputs: vec![Vec::new(); model.layers.len()],
            knots: Knots::new(model.bins, model.tail_bound),
            grads: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.conditioner.params().len()])
                .collect(),
            c_raw: Vec::new(),
        }
    }

    /// Returns the batch mean log-likelihood; with `backward`, leaves the
    /// gradient of the mean negative log-likelihood in `self.grads`.
    fn batch(&mut self, model: &FlowModel, data: &[Vec<f64>], backward: bool) -> Result<f64, FlowError> {
        let dim = model.dim;
        let nb = data.len();
        let st = &model.standardizer;
        let mut h = Vec::with_capacity(nb * dim);
        for x in data {
            model.check(x)?;
            h.extend((0..dim).map(|i| (x[i] - st.mean[i]) / st.scale[i]));
        }
        let mut logdet = vec![st.log_jacobian(); nb];
        let n_raw = model.n_raw();
        let mut cond_in = Vec::new();
        for (l, (layer, perm)) in model.layers.iter().zip(&model.permutations).enumerate().rev() {
            let split = layer.split;
            cond_in.clear();
            for row in h.chunks_exact(dim) {
                cond_in.extend_from_slice(&row[..split]);
            }
            let raw = layer.conditioner.forward_batch(&cond_in, nb, &mut self.workspaces[l]);
            check_raw(raw)?;
            self.layer_inputs[l].clear();
            self.layer_inputs[l].extend_from_slice(&h);
            let width = (dim - split) * n_raw;
            for (b, row) in h.chunks_exact_mut(dim).enumerate() {
                let mut out = [0.0f64; 16];
                let mut heap;
                let out: &mut [f64] = if dim <= 16 {
                    &mut out[..dim]
                } else {
                    heap = vec![0.0; dim];
                    &mut heap
                };
                out.copy_from_slice(row);
                for i in 0..dim - split {
                    self.knots.load(&raw[b * width + i * n_raw..b * width + (i + 1) * n_raw]);
                    let (v, ld) = inverse_with(&self.knots, row[split + i]);
                    out[split + i] = v;
                    logdet[b] += ld;
                }
                for (i, &p) in perm.iter().enumerate() {
                    row[p] = out[i];
                }
            }
        }
        let mut total = 0.0;
        for (row, ld) in h.chunks_exact(dim).zip(&logdet) {
            total += std_normal_log_density(row) + ld;
        }
        let mean_ll = total / nb as f64;
        if !backward {
            return Ok(mean_ll);
        }

        // d(-mean ll)/dz = z / nb, d(-mean ll)/d logdet = -1 / nb
        let inv_n = 1.0 / nb as f64;
        let mut c: Vec<f64> = h.iter().map(|z| z * inv_n).collect();
        let c_ld = -inv_n;
        for g in self.grads.iter_mut() {
            g.fill(0.0);
        }
        for (l, (layer, perm)) in model.layers.iter().zip(&model.permutations).enumerate() {
            let split = layer.split;
            let width = (dim - split) * n_raw;
            self.c_raw.clear();
            self.c_raw.resize(nb * width, 0.0);
            let raw = self.workspaces[l].output().to_vec();
            let inputs = &self.layer_inputs[l];
            for b in 0..nb {
                let crow = &mut c[b * dim..(b + 1) * dim];
                // undo the output permutation: layer output i landed at perm[i]
                let mut c_out = [0.0f64; 16];
                let mut heap;
                let c_out: &mut [f64] = if dim <= 16 {
                    &mut c_out[..dim]
                } else {
                    heap = vec![0.0; dim];
                    &mut heap
                };
                for (i, &p) in perm.iter().enumerate() {
                    c_out[i] = crow[p];
                }
                for i in 0..dim - split {
                    let off = b * width + i * n_raw;
                    self.knots.load(&raw[off..off + n_raw]);
                    let y = inputs[b * dim + split + i];
                    c_out[split + i] = inverse_backward(
                        &self.knots,
                        y,
                        c_out[split + i],
                        c_ld,
                        &mut self.c_raw[off..off + n_raw],
                    );
                }
                crow.copy_from_slice(c_out);
            }
            layer.conditioner.backward_batch(
                &mut self.workspaces[l],
                &self.c_raw,
                &mut self.grads[l],
                split > 0,
            );
            if split > 0 {
                let ig = self.workspaces[l].input_grad();
                for b in 0..nb {
                    for i in 0..split {
                        c[b * dim + i] += ig[b * split + i];
                    }
                }
            }
        }
        Ok(mean_ll)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: FlowModel,
    /// Mean train log-likelihood of the identity-initialized model.
    pub initial_log_likelihood: f64,
    /// Mean train log-likelihood of the returned model.
    pub final_log_likelihood: f64,
    /// Coordinates whose standardization scale was clamped.
    pub degenerate_coordinates: Vec<usize>,
    pub skipped_batches: usize,
}

/// Maximum-likelihood fit by minibatch Adam. The returned model is the best
/// epoch on the training set, so the likelihood never ends below the
/// starting point.
pub fn fit(data: &[Vec<f64>], cfg: &FlowConfig, rng: &mut StreamRng) -> Result<FitReport, FlowError> {
    cfg.validate()?;
    let dim = data.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(FlowError::DatasetTooSmall { need: 2, got: 0 });
    }
    if data.len() < 2 * dim {
        return Err(FlowError::DatasetTooSmall {
            need: 2 * dim,
            got: data.len(),
        });
    }
    for x in data {
        if x.len() != dim {
            return Err(FlowError::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(FlowError::NonFiniteInput);
        }
    }
    let (standardizer, degenerate) = Standardizer::fit(data, dim);
    let mut model = FlowModel::identity(dim, cfg, standardizer, rng)?;
    let initial = model.mean_log_prob(data)?;
    let mut best = (initial, model.clone());
    let mut adams: Vec<Adam> = model
        .layers
        .iter()
        .map(|l| Adam::new(l.conditioner.params().len(), cfg.adam))
        .collect();
    let mut trainer = Trainer::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let (mut skipped, mut applied) = (0usize, 0usize);
    for _ in 0..cfg.epochs {
        shuffle(&mut order, rng);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| data[i].clone()));
            let ll = trainer.batch(&model, &batch, true)?;
            if !ll.is_finite() || trainer.grads.iter().flatten().any(|g| !g.is_finite()) {
                skipped += 1;
                continue;
            }
            for ((layer, adam), g) in model.layers.iter_mut().zip(&mut adams).zip(&trainer.grads) {
                adam.step(layer.conditioner.params_mut(), g)?;
            }
            applied += 1;
        }
        let ll = model.mean_log_prob(data)?;
        if ll.is_finite() && ll > best.0 {
            best = (ll, model.clone());
        }
    }
    if applied == 0 && skipped > 0 {
        return Err(FlowError::Diverged);
    }
    Ok(FitReport {
        model: best.1,
        initial_log_likelihood: initial,
        final_log_likelihood: best.0,
        degenerate_coordinates: degenerate,
        skipped_batches: skipped,
    })
}

fn shuffle(v: &mut [usize], rng: &mut StreamRng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn random_params(bins: usize, tail: f64, r: &mut StreamRng) -> RqSplineParams {
        let raw = (0..3 * bins - 1).map(|_| r.random_range(-2.0..2.0)).collect();
        RqSplineParams::new(bins, tail, raw).unwrap()
    }

    fn random_flow(dim: usize, r: &mut StreamRng) -> FlowModel {
        let cfg = FlowConfig::default();
        let st = Standardizer {
            mean: (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            scale: (0..dim).map(|_| r.random_range(0.5..2.0)).collect(),
        };
        let mut m = FlowModel::identity(dim, &cfg, st, r).unwrap();
        for layer in m.layers_mut() {
            for p in layer.conditioner_mut().params_mut() {
                *p += r.random_range(-0.4..0.4);
            }
        }
        m
    }

    #[test]
    fn identity_spline_is_identity() {
        let p = RqSplineParams::identity(8, 4.0);
        for i in 0..=80 {
            let x = -4.0 + 0.1 * i as f64;
            let (y, ld) = spline_forward(x, &p).unwrap();
            assert!((y - x).abs() < 1e-12, "{x} -> {y}");
            assert!(ld.abs() < 1e-12);
            let (xi, ldi) = spline_inverse(x, &p).unwrap();
            assert!((xi - x).abs() < 1e-12);
            assert!(ldi.abs() < 1e-12);
        }
    }

    #[test]
    fn tails_are_identity() {
        let mut r = rng(1);
        let p = random_params(8, 4.0, &mut r);
        assert_eq!(spline_forward(5.0, &p).unwrap(), (5.0, 0.0));
        assert_eq!(spline_inverse(-7.5, &p).unwrap(), (-7.5, 0.0));
    }

    #[test]
    fn round_trip_and_logdets() {
        let mut r = rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p = random_params(8, 4.0, &mut r);
            let y = r.random_range(-4.5..4.5);
            let (x, ldi) = spline_inverse(y, &p).unwrap();
            let (y2, ldf) = spline_forward(x, &p).unwrap();
            worst = worst.max((y2 - y).abs());
            assert!((ldi + ldf).abs() < 1e-8);
        }
        assert!(worst < 1e-8, "{worst}");
        let p = random_params(8, 4.0, &mut r);
        let (y, _) = spline_forward(0.3, &p).unwrap();
        assert!((spline_inverse(y, &p).unwrap().0 - 0.3).abs() < 1e-8);
    }

    #[test]
    fn spline_is_strictly_increasing() {
        let mut r = rng(3);
        for _ in 0..20 {
            let p = random_params(8, 4.0, &mut r);
            let mut prev = f64::NEG_INFINITY;
            for i in 0..1000 {
                let x = -4.0 + 8.0 * i as f64 / 999.0;
                let y = spline_forward(x, &p).unwrap().0;
                assert!(y > prev);
                prev = y;
            }
        }
    }

    #[test]
    fn spline_logdet_matches_finite_difference() {
        let mut r = rng(4);
        for _ in 0..50 {
            let p = random_params(6, 3.0, &mut r);
            let x = r.random_range(-2.9..2.9);
            let h = 1e-6;
            let fd = (spline_forward(x + h, &p).unwrap().0 - spline_forward(x - h, &p).unwrap().0) / (2.0 * h);
            let ld = spline_forward(x, &p).unwrap().1;
            assert!((fd.ln() - ld).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(matches!(
            RqSplineParams::new(4, 2.0, vec![0.0; 10]),
            Err(FlowError::DimensionMismatch { expected: 11, got: 10 })
        ));
        let mut raw = vec![0.0; 11];
        raw[3] = f64::NAN;
        assert!(matches!(
            RqSplineParams::new(4, 2.0, raw),
            Err(FlowError::NonFiniteParams { index: 3 })
        ));
        let p = RqSplineParams::identity(4, 2.0);
        assert!(matches!(spline_inverse(f64::NAN, &p), Err(FlowError::NonFiniteInput)));
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let mut r = rng(5);
        let bins = 5;
        let n = 3 * bins - 1;
        let loss = |raw: &[f64], y: f64| {
            let p = RqSplineParams::new(bins, 3.0, raw.to_vec()).unwrap();
            let (x, ld) = spline_inverse(y, &p).unwrap();
            // arbitrary smooth combination of both outputs
            0.7 * x * x - 1.3 * ld
        };
        for _ in 0..30 {
            let raw: Vec<f64> = (0..n).map(|_| r.random_range(-1.5..1.5)).collect();
            let y = r.random_range(-2.8..2.8);
            let p = RqSplineParams::new(bins, 3.0, raw.clone()).unwrap();
            let (x, _) = spline_inverse(y, &p).unwrap();
            let mut knots = Knots::new(bins, 3.0);
            knots.load(&raw);
            let mut c_raw = vec![0.0; n];
            let c_y = inverse_backward(&knots, y, 1.4 * x, -1.3, &mut c_raw);
            let h = 1e-6;
            let fd_y = (loss(&raw, y + h) - loss(&raw, y - h)) / (2.0 * h);
            assert!((fd_y - c_y).abs() < 1e-5 * (1.0 + fd_y.abs()), "{fd_y} vs {c_y}");
            for j in 0..n {
                let mut up = raw.clone();
                up[j] += h;
                let mut dn = raw.clone();
                dn[j] -= h;
                let fd = (loss(&up, y) - loss(&dn, y)) / (2.0 * h);
                assert!((fd - c_raw[j]).abs() < 1e-5 * (1.0 + fd.abs()), "param {j}: {fd} vs {}", c_raw[j]);
            }
        }
    }

    #[test]
    fn identity_layer_and_structure() {
        let mut r = rng(6);
        let layer = CouplingLayer::identity(4, 2, 8, 4.0, 8, &mut r).unwrap();
        let x = [0.5, -1.0, 2.0, 3.5];
        let (y, ld) = layer.forward(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ld.abs() < 1e-12);

        let mut layer = layer;
        for p in layer.conditioner_mut().params_mut() {
            *p += r.random_range(-1.0..1.0);
        }
        let a = layer.spline_params(&[0.5, -1.0, 2.0, 3.5]).unwrap();
        let b = layer.spline_params(&[0.5, -1.0, -3.0, 0.1]).unwrap();
        assert_eq!(a, b);
        let c = layer.spline_params(&[0.6, -1.0, 2.0, 3.5]).unwrap();
        assert_ne!(a, c);
    }

    fn numerical_log_det(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64]) -> f64 {
        let d = x.len();
        let h = 1e-6;
        let mut jac = vec![vec![0.0; d]; d];
        for j in 0..d {
            let mut up = x.to_vec();
            up[j] += h;
            let mut dn = x.to_vec();
            dn[j] -= h;
            let (fu, fd) = (f(&up), f(&dn));
            for i in 0..d {
                jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
            }
        }
        // LU with partial pivoting
        let mut logdet = 0.0;
        for c in 0..d {
            let piv = (c..d)
                .max_by(|&a, &b| jac[a][c].abs().partial_cmp(&jac[b][c].abs()).unwrap())
                .unwrap();
            jac.swap(c, piv);
            let p = jac[c][c];
            logdet += p.abs().ln();
            for rr in c + 1..d {
                let f = jac[rr][c] / p;
                for k in c..d {
                    jac[rr][k] -= f * jac[c][k];
                }
            }
        }
        logdet
    }

    #[test]
    fn layer_logdet_matches_numerical_jacobian() {
        let mut r = rng(7);
        let mut layer = CouplingLayer::identity(3, 1, 8, 4.0, 8, &mut r).unwrap();
        for p in layer.conditioner_mut().params_mut() {
            *p += r.random_range(-1.0..1.0);
        }
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let ld = layer.forward(&x).unwrap().1;
            let num = numerical_log_det(|v| layer.forward(v).unwrap().0, &x);
            assert!((ld - num).abs() < 1e-4 * (1.0 + ld.abs()), "{ld} vs {num}");
        }
    }

    #[test]
    fn flow_bijective_with_consistent_logdet() {
        let mut r = rng(8);
        for &dim in &[2usize, 4, 6] {
            let m = random_flow(dim, &mut r);
            for _ in 0..20 {
                let z: Vec<f64> = (0..dim).map(|_| r.random_range(-3.0..3.0)).collect();
                let (x, ldf) = m.forward(&z).unwrap();
                let (z2, ldi) = m.inverse(&x).unwrap();
                for (a, b) in z.iter().zip(&z2) {
                    assert!((a - b).abs() < 1e-8, "dim {dim} z {z:?} z2 {z2:?}");
                }
                assert!((ldf + ldi).abs() < 1e-8);
                if dim <= 4 {
                    let num = numerical_log_det(|v| m.forward(v).unwrap().0, &z);
                    assert!((ldf - num).abs() < 1e-4 * (1.0 + ldf.abs()));
                }
            }
        }
    }

    #[test]
    fn identity_flow_log_prob_at_origin() {
        let mut r = rng(9);
        let m = FlowModel::identity(2, &FlowConfig::default(), Standardizer::identity(2), &mut r).unwrap();
        let lp = m.log_prob(&[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * core::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((lp + 1.837_877_07).abs() < 1e-8);
    }

    #[test]
    fn translation_standardizer() {
        let mut r = rng(10);
        let st = Standardizer {
            mean: vec![2.0, -1.0],
            scale: vec![1.0, 1.0],
        };
        let m = FlowModel::identity(2, &FlowConfig::default(), st, &mut r).unwrap();
        let lp = m.log_prob(&[2.5, 0.0]).unwrap();
        assert!((lp - std_normal_log_density(&[0.5, 1.0])).abs() < 1e-12);
    }

    #[test]
    fn batch_log_prob_matches_pointwise() {
        let mut r = rng(11);
        let m = random_flow(4, &mut r);
        let data: Vec<Vec<f64>> = (0..37).map(|_| (0..4).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let direct: f64 = data.iter().map(|x| m.log_prob(x).unwrap()).sum::<f64>() / 37.0;
        assert!((m.mean_log_prob(&data).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn fit_gradient_matches_finite_differences() {
        let mut r = rng(12);
        let m = random_flow(3, &mut r);
        let data: Vec<Vec<f64>> = (0..7).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mut tr = Trainer::new(&m);
        tr.batch(&m, &data, true).unwrap();
        let h = 1e-6;
        for l in 0..m.layers.len() {
            let n = m.layers[l].conditioner.params().len();
            for j in (0..n).step_by(7) {
                let mut up = m.clone();
                up.layers[l].conditioner.params_mut()[j] += h;
                let mut dn = m.clone();
                dn.layers[l].conditioner.params_mut()[j] -= h;
                let fd = -(up.mean_log_prob(&data).unwrap() - dn.mean_log_prob(&data).unwrap()) / (2.0 * h);
                let g = tr.grads[l][j];
                assert!((fd - g).abs() < 1e-5 * (1.0 + fd.abs()), "layer {l} param {j}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let mut r = rng(13);
        let cfg = FlowConfig::default();
        let st = Standardizer {
            mean: vec![0.5],
            scale: vec![1.5],
        };
        let mut m = FlowModel::identity(1, &cfg, st, &mut r).unwrap();
        for layer in m.layers_mut() {
            let br = layer.conditioner().output_bias_range();
            for p in &mut layer.conditioner_mut().params_mut()[br] {
                *p += r.random_range(-1.0..1.0);
            }
        }
        // trapezoid rule on [-15, 15]
        let n = 30_000;
        let (a, b) = (-15.0, 15.0);
        let hstep = (b - a) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * hstep;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * m.log_prob(&[x]).unwrap().exp();
        }
        assert!((total * hstep - 1.0).abs() < 1e-2, "{}", total * hstep);
    }

    #[test]
    fn mixture_selection_is_uniform() {
        struct Tag(f64);
        impl Sampler for Tag {
            fn dim(&self) -> usize {
                1
            }
            fn sample_one(&self, _: &mut StreamRng) -> Vec<f64> {
                vec![self.0]
            }
        }
        let (a, b, c) = (Tag(0.0), Tag(1.0), Tag(2.0));
        let comps: [&dyn Sampler; 3] = [&a, &b, &c];
        let pts = mixture_sample(&comps, 30_000, &mut rng(14));
        let sigma = (30_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for k in 0..3 {
            let count = pts.iter().filter(|p| p[0] == k as f64).count() as f64;
            assert!((count - 10_000.0).abs() < 3.0 * sigma, "{count}");
        }
        assert_eq!(mixture_sample(&comps, 50, &mut rng(3)), mixture_sample(&comps, 50, &mut rng(3)));
    }

    #[test]
    fn single_component_mixture_equals_sampling() {
        let mut r = rng(15);
        let m = random_flow(2, &mut r);
        let comps: [&dyn Sampler; 1] = [&m];
        assert_eq!(mixture_sample(&comps, 20, &mut rng(16)), m.sample(20, &mut rng(16)));
    }

    #[test]
    fn mixture_log_prob_of_identical_flows() {
        let mut r = rng(17);
        let m = random_flow(2, &mut r);
        let x = [0.3, -0.2];
        let mix = mixture_log_prob(&[m.clone(), m.clone(), m.clone()], &x).unwrap();
        assert!((mix - m.log_prob(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_tiny_dataset() {
        let data = vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![3.0, 1.0]];
        assert!(matches!(
            fit(&data, &FlowConfig::default(), &mut rng(18)),
            Err(FlowError::DatasetTooSmall { need: 4, got: 3 })
        ));
    }

    #[test]
    fn fit_flags_zero_variance() {
        let data: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 1.0]).collect();
        let cfg = FlowConfig {
            epochs: 1,
            ..Default::default()
        };
        let rep = fit(&data, &cfg, &mut rng(19)).unwrap();
        assert_eq!(rep.degenerate_coordinates, vec![1]);
        assert_eq!(rep.model.standardizer().scale[1], MIN_SCALE);
    }
}
