//! Multilayer perceptrons with exact reverse-mode gradients, and Adam.
//!
//! Parameter layout is flat: for each layer in order, the `n_out x n_in`
//! weight matrix in row-major order followed by the `n_out` biases. Hidden
//! layers apply the activation; the final layer is linear.
//!
//! Batched passes go through `matrixmultiply`. A [`Workspace`] keeps the
//! activations of the last forward pass so that [`Mlp::backward_batch`] can
//! reuse them.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::StreamRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApproxError {
    #[error("expected a vector of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter vector has length {got}, layout requires {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("a network needs at least an input and an output size")]
    TooFewLayers,
    #[error("non-finite parameter at index {index}")]
    NonFiniteParam { index: usize },
    #[error("non-finite gradient component at index {index}")]
    NonFiniteGradient { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => math::tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Scratch buffers for batched passes.
#[derive(Debug, Default, Clone)]
pub struct Workspace {
    batch: usize,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    input_grad: Vec<f64>,
    scratch: Vec<f64>,
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Output of the last forward pass, `batch x n_out` row-major.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Input gradient of the last backward pass that requested it.
    pub fn input_grad(&self) -> &[f64] {
        &self.input_grad
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Gradients of `<output, cotangent>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Products this small lose more to packing than they gain from blocking.
fn use_blocked(m: usize, k: usize, n: usize) -> bool {
    m >= 32 && k >= 32 && n >= 32
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() & !3);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `(rows x cols)` to `(cols x rows)`.
fn transpose_into(rows: usize, cols: usize, src: &[f64], dst: &mut Vec<f64>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for (r, row) in src.chunks_exact(cols).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

/// Below this inner length, contiguous row updates beat short dots.
const SHORT: usize = 16;

/// `out (m x n) += a (m x k) * w^T` with `w` stored `n x k`.
fn mul_a_wt(m: usize, k: usize, n: usize, a: &[f64], w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    if use_blocked(m, k, n) {
        gemm(m, k, n, a, (k, 1), w, (1, k), 1.0, out, (n, 1));
        return;
    }
    if k == 0 {
        return;
    }
    if k < SHORT && n >= SHORT {
        transpose_into(n, k, w, scratch);
        for (ar, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            for (&s, wc) in ar.iter().zip(scratch.chunks_exact(n)) {
                axpy(s, wc, orow);
            }
        }
        return;
    }
    for (ar, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, wr) in orow.iter_mut().zip(w.chunks_exact(k)) {
            *o += dot4(ar, wr);
        }
    }
}

/// `g (n x k) += d^T a` with `d` stored `m x n` and `a` stored `m x k`.
fn mul_dt_a(m: usize, n: usize, k: usize, d: &[f64], a: &[f64], g: &mut [f64], scratch: &mut Vec<f64>) {
    if use_blocked(m, k, n) {
        gemm(n, m, k, d, (1, n), a, (k, 1), 1.0, g, (k, 1));
        return;
    }
    if k == 0 {
        return;
    }
    if k < SHORT && n >= SHORT {
        // accumulate g^T (k x n) with rows of d, then fold back
        scratch.clear();
        scratch.resize(k * n, 0.0);
        for (drow, ar) in d.chunks_exact(n).zip(a.chunks_exact(k)) {
            for (&s, gt) in ar.iter().zip(scratch.chunks_exact_mut(n)) {
                if s != 0.0 {
                    axpy(s, drow, gt);
                }
            }
        }
        for (p, gt) in scratch.chunks_exact(n).enumerate() {
            for (o, &v) in gt.iter().enumerate() {
                g[o * k + p] += v;
            }
        }
        return;
    }
    for (drow, ar) in d.chunks_exact(n).zip(a.chunks_exact(k)) {
        for (&s, grow) in drow.iter().zip(g.chunks_exact_mut(k)) {
            if s != 0.0 {
                axpy(s, ar, grow);
            }
        }
    }
}

/// `out (m x k) = d (m x n) * w` with `w` stored `n x k`.
fn mul_d_w(m: usize, n: usize, k: usize, d: &[f64], w: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    if use_blocked(m, k, n) {
        gemm(m, n, k, d, (n, 1), w, (k, 1), 0.0, out, (k, 1));
        return;
    }
    out.fill(0.0);
    if k == 0 {
        return;
    }
    if k < SHORT && n >= SHORT {
        transpose_into(n, k, w, scratch);
        for (drow, orow) in d.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
            for (o, wc) in orow.iter_mut().zip(scratch.chunks_exact(n)) {
                *o = dot4(drow, wc);
            }
        }
        return;
    }
    for (drow, orow) in d.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (&s, wr) in drow.iter().zip(w.chunks_exact(k)) {
            if s != 0.0 {
                axpy(s, wr, orow);
            }
        }
    }
}

/// `C = A B + beta C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Mlp {
    /// Number of parameters for a given layout.
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut StreamRng,
    ) -> Result<Self, ApproxError> {
        if layer_sizes.len() < 2 {
            return Err(ApproxError::TooFewLayers);
        }
        let mut params = Vec::with_capacity(Self::param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = math::sqrt(6.0 / (n_in + n_out) as f64);
            for _ in 0..n_in * n_out {
                params.push(rng.random_range(-limit..limit));
            }
            params.extend(core::iter::repeat_n(0.0, n_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            params,
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self, ApproxError> {
        if layer_sizes.len() < 2 {
            return Err(ApproxError::TooFewLayers);
        }
        let expected = Self::param_count(&layer_sizes);
        if params.len() != expected {
            return Err(ApproxError::ParamLength {
                expected,
                got: params.len(),
            });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(ApproxError::NonFiniteParam { index });
        }
        Ok(Self {
            layer_sizes,
            activation,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated at construction")
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(weight offset, bias offset, n_in, n_out)` of layer `l`.
    fn layer_layout(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.layer_sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (off, off + n_in * n_out, n_in, n_out)
    }

    /// Parameter range of the final layer's biases.
    pub fn output_bias_range(&self) -> core::ops::Range<usize> {
        let (_, b, _, n_out) = self.layer_layout(self.n_layers() - 1);
        b..b + n_out
    }

    /// Parameter range of the final layer's weights.
    pub fn output_weight_range(&self) -> core::ops::Range<usize> {
        let (w, b, _, _) = self.layer_layout(self.n_layers() - 1);
        w..b
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, ApproxError> {
        self.check_len(input.len(), self.input_dim())?;
        let mut ws = Workspace::new();
        Ok(self.forward_batch(input, 1, &mut ws).to_vec())
    }

    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<Gradients, ApproxError> {
        self.check_len(input.len(), self.input_dim())?;
        self.check_len(cotangent.len(), self.output_dim())?;
        let mut ws = Workspace::new();
        self.forward_batch(input, 1, &mut ws);
        let mut params = vec![0.0; self.params.len()];
        self.backward_batch(&mut ws, cotangent, &mut params, true);
        Ok(Gradients {
            params,
            input: ws.input_grad,
        })
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<(), ApproxError> {
        if got == expected {
            Ok(())
        } else {
            Err(ApproxError::DimensionMismatch { expected, got })
        }
    }

    /// Forward pass over `batch` row-major inputs. Panics on length mismatch.
    pub fn forward_batch<'w>(&self, inputs: &[f64], batch: usize, ws: &'w mut Workspace) -> &'w [f64] {
        assert_eq!(inputs.len(), batch * self.input_dim(), "input batch shape");
        let n_layers = self.n_layers();
        ws.batch = batch;
        ws.acts.resize_with(n_layers + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(inputs);
        for l in 0..n_layers {
            let (w_off, b_off, n_in, n_out) = self.layer_layout(l);
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let a_in = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let bias = &self.params[b_off..b_off + n_out];
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            mul_a_wt(batch, n_in, n_out, a_in, &self.params[w_off..b_off], out, &mut ws.scratch);
            if l + 1 < n_layers {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        ws.output()
    }

    /// Accumulate gradients of `sum_b <output_b, cotangent_b>` into
    /// `param_grad` using the activations stored by the last
    /// [`forward_batch`](Self::forward_batch). When `input_grad` is set the
    /// input gradient is left in [`Workspace::input_grad`].
    pub fn backward_batch(
        &self,
        ws: &mut Workspace,
        cotangent: &[f64],
        param_grad: &mut [f64],
        input_grad: bool,
    ) {
        assert_eq!(param_grad.len(), self.params.len(), "gradient length");
        self.backward_impl(ws, cotangent, Some(param_grad), input_grad);
    }

    /// Input gradient only, left in [`Workspace::input_grad`].
    pub fn input_grad_batch(&self, ws: &mut Workspace, cotangent: &[f64]) {
        self.backward_impl(ws, cotangent, None, true);
    }

    fn backward_impl(
        &self,
        ws: &mut Workspace,
        cotangent: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: bool,
    ) {
        let batch = ws.batch;
        let n_layers = self.n_layers();
        assert_eq!(cotangent.len(), batch * self.output_dim(), "cotangent shape");
        ws.delta.clear();
        ws.delta.extend_from_slice(cotangent);
        for l in (0..n_layers).rev() {
            let (w_off, b_off, n_in, n_out) = self.layer_layout(l);
            if let Some(pg) = param_grad.as_deref_mut() {
                let (gw, gb) = pg[w_off..b_off + n_out].split_at_mut(n_in * n_out);
                mul_dt_a(batch, n_out, n_in, &ws.delta, &ws.acts[l], gw, &mut ws.scratch);
                for row in ws.delta.chunks_exact(n_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if l == 0 && !input_grad {
                break;
            }
            ws.delta_prev.clear();
            ws.delta_prev.resize(batch * n_in, 0.0);
            mul_d_w(batch, n_out, n_in, &ws.delta, &self.params[w_off..b_off], &mut ws.delta_prev, &mut ws.scratch);
            if l > 0 {
                let act = self.activation;
                for (d, &a) in ws.delta_prev.iter_mut().zip(&ws.acts[l]) {
                    *d *= act.derivative_from_output(a);
                }
            }
            core::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        if input_grad {
            ws.input_grad.clear();
            ws.input_grad.extend_from_slice(&ws.delta);
        }
    }

    /// `self <- (1 - tau) self + tau other`.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) {
        assert_eq!(self.params.len(), other.params.len());
        for (t, &s) in self.params.iter_mut().zip(&other.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam, minimizing.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update. Nothing is modified if `grad` has a non-finite entry.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), ApproxError> {
        if params.len() != self.m.len() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grad.len() != self.m.len() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ApproxError::NonFiniteGradient { index });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - math::powf(beta1, t);
        let c2 = 1.0 - math::powf(beta2, t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
        Ok(())
    }
}
