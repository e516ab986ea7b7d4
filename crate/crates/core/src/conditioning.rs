//! Text-conditioned activation mixing, AdaIN modulation, and the
//! mean-subtracted activation profiles used for plotting.
//!
//! A learnable activation site owns `w` (`d x a`, row-major) and `b` (`a`).
//! Its mixture weights `s = softmax(te . w + b)` depend only on the text
//! embedding, so they are computed once per forward pass and shared by every
//! frame and every utterance of the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, LayerGroupId, ParamId, ParamStore};
use crate::tensor::{sigmoid, softmax, Tensor3};

/// Epsilon inside the instance-normalization denominator.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFunction {
    /// ELU with alpha = 1.
    Elu,
    /// clip(x / 6 + 1/2, 0, 1).
    HardSigmoid,
    Relu,
    Softplus,
    /// x * sigmoid(x).
    Swish,
    Tanh,
}

impl BasisFunction {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            BasisFunction::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            BasisFunction::HardSigmoid => (x / 6.0 + 0.5).clamp(0.0, 1.0),
            BasisFunction::Relu => x.max(0.0),
            BasisFunction::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            BasisFunction::Swish => x * sigmoid(x),
            BasisFunction::Tanh => x.tanh(),
        }
    }

    /// Derivative; at kinks the right-hand value for ReLU is not used (0).
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            BasisFunction::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            BasisFunction::HardSigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            BasisFunction::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            BasisFunction::Softplus => sigmoid(x),
            BasisFunction::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            BasisFunction::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    /// Points where the derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            BasisFunction::Relu | BasisFunction::Elu => &[0.0],
            BasisFunction::HardSigmoid => &[-3.0, 3.0],
            _ => &[],
        }
    }
}

/// Ordered set of basis activations mixed by a learnable site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationBasis {
    functions: Vec<BasisFunction>,
}

impl Default for ActivationBasis {
    fn default() -> Self {
        Self::standard()
    }
}

impl ActivationBasis {
    /// ELU, hard sigmoid, ReLU, softplus, swish, tanh, in that order.
    pub fn standard() -> Self {
        use BasisFunction::*;
        Self { functions: vec![Elu, HardSigmoid, Relu, Softplus, Swish, Tanh] }
    }

    pub fn new(functions: Vec<BasisFunction>) -> Result<Self> {
        if functions.is_empty() {
            return Err(Error::Config("activation basis must not be empty".into()));
        }
        Ok(Self { functions })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn position(&self, f: BasisFunction) -> Option<usize> {
        self.functions.iter().position(|&g| g == f)
    }

    /// a^-1 * sum_i A_i(x).
    pub fn mean_at(&self, x: f64) -> f64 {
        self.functions.iter().map(|f| f.eval(x)).sum::<f64>() / self.len() as f64
    }

    pub fn kink_distance(&self, x: f64) -> f64 {
        self.functions
            .iter()
            .flat_map(|f| f.kinks().iter())
            .fold(f64::INFINITY, |m, k| m.min((x - k).abs()))
    }
}

/// Convex mixture weights over the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationWeights(Vec<f64>);

impl ActivationWeights {
    pub fn new(s: Vec<f64>) -> Result<Self> {
        let sum: f64 = s.iter().sum();
        if s.is_empty() || s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!("activation weights must lie on the simplex, got {s:?}")));
        }
        Ok(Self(s))
    }

    pub fn uniform(a: usize) -> Self {
        Self(vec![1.0 / a as f64; a])
    }

    pub fn one_hot(a: usize, i: usize) -> Self {
        let mut s = vec![0.0; a];
        s[i] = 1.0;
        Self(s)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// s = softmax(te . w + b), `w` row-major `d x a`.
pub fn laf_weights(te: &[f64], w: &[f64], b: &[f64]) -> Result<ActivationWeights> {
    let a = b.len();
    let d = te.len();
    if a == 0 || w.len() != d * a {
        return Err(Error::Shape(format!(
            "activation site expects w of {d}x{a} = {} values, got {}",
            d * a,
            w.len()
        )));
    }
    let mut z = b.to_vec();
    for (j, &t) in te.iter().enumerate() {
        let row = &w[j * a..(j + 1) * a];
        for (zi, wi) in z.iter_mut().zip(row) {
            *zi += t * wi;
        }
    }
    Ok(ActivationWeights(softmax(&z)))
}

#[inline]
pub fn laf_scalar(h: f64, s: &ActivationWeights, basis: &ActivationBasis) -> f64 {
    basis.functions().iter().zip(s.as_slice()).map(|(f, si)| si * f.eval(h)).sum()
}

/// y = sum_i s_i A_i(h), elementwise.
pub fn laf_apply(h: &[f64], s: &ActivationWeights, basis: &ActivationBasis) -> Vec<f64> {
    h.iter().map(|&v| laf_scalar(v, s, basis)).collect()
}

/// Mixture derivative with respect to h.
#[inline]
pub fn laf_scalar_derivative(h: f64, s: &ActivationWeights, basis: &ActivationBasis) -> f64 {
    basis.functions().iter().zip(s.as_slice()).map(|(f, si)| si * f.derivative(h)).sum()
}

/// Backward through one site. Returns dL/dh and accumulates dL/dw, dL/db
/// into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn laf_backward(
    h: &[f64],
    dy: &[f64],
    s: &ActivationWeights,
    basis: &ActivationBasis,
    te: &[f64],
    w_id: ParamId,
    b_id: ParamId,
    grads: &mut Gradients,
) -> Vec<f64> {
    let a = basis.len();
    let mut ds = vec![0.0; a];
    let mut dh = Vec::with_capacity(h.len());
    for (&x, &g) in h.iter().zip(dy) {
        let mut deriv = 0.0;
        for (i, f) in basis.functions().iter().enumerate() {
            ds[i] += g * f.eval(x);
            deriv += s.0[i] * f.derivative(x);
        }
        dh.push(g * deriv);
    }
    if grads.wants(w_id) || grads.wants(b_id) {
        let dz = softmax_backward(s.as_slice(), &ds);
        if let Some(slot) = grads.slot(w_id) {
            for (j, &t) in te.iter().enumerate() {
                for i in 0..a {
                    slot[j * a + i] += t * dz[i];
                }
            }
        }
        if let Some(slot) = grads.slot(b_id) {
            slot.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        }
    }
    dh
}

/// dL/dz for s = softmax(z) given dL/ds.
pub fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let inner: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(si, di)| si * (di - inner)).collect()
}

/// Learnable activation parameters at one activation site.
#[derive(Clone, Debug)]
pub struct LafSite {
    pub w: ParamId,
    pub b: ParamId,
    pub group: LayerGroupId,
    pub site: usize,
}

impl LafSite {
    pub fn weights<T: Clone>(&self, store: &ParamStore<T>, te: &[f64]) -> Result<ActivationWeights> {
        laf_weights(te, store.value(self.w), store.value(self.b))
    }
}

/// LAF(h | te) - a^-1 sum_i A_i(h) over `grid`.
pub fn laf_normalized_profile(
    s: &ActivationWeights,
    basis: &ActivationBasis,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if grid.is_empty() {
        return Err(Error::Input("profile grid must not be empty".into()));
    }
    if let Some(h) = grid.iter().find(|h| !(-3.0..=3.0).contains(*h)) {
        return Err(Error::Input(format!("profile grid point {h} outside [-3, 3]")));
    }
    Ok(grid.iter().map(|&h| (h, laf_scalar(h, s, basis) - basis.mean_at(h))).collect())
}

/// `n` evenly spaced points covering [-3, 3].
pub fn profile_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// AdaIN site: a linear projection of the text embedding into per-channel
/// scale and shift, applied to instance-normalized features.
///
/// `proj` is `(2f) x d` row-major (first `f` rows produce gamma), `bias` is
/// `2f` and initialized to gamma = 1, beta = 0.
#[derive(Clone, Debug)]
pub struct AdaInSite {
    pub proj: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug)]
pub struct AdaInCache {
    normalized: Tensor3,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

impl AdaInSite {
    /// Per-channel (gamma, beta) predicted from `te`.
    pub fn modulation<T: Clone>(&self, store: &ParamStore<T>, te: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if te.len() != self.embed_dim {
            return Err(Error::Shape(format!("AdaIN expects a {}-dim embedding, got {}", self.embed_dim, te.len())));
        }
        let p = store.value(self.proj);
        let bias = store.value(self.bias);
        let f = self.channels;
        let d = self.embed_dim;
        let mut out = bias.to_vec();
        for (r, o) in out.iter_mut().enumerate() {
            *o += p[r * d..(r + 1) * d].iter().zip(te).map(|(a, b)| a * b).sum::<f64>();
        }
        let beta = out.split_off(f);
        Ok((out, beta))
    }

    pub fn forward<T: Clone>(&self, store: &ParamStore<T>, h: &Tensor3, te: &[f64]) -> Result<(Tensor3, AdaInCache)> {
        if h.channels != self.channels {
            return Err(Error::Shape(format!("AdaIN expects {} channels, got {}", self.channels, h.channels)));
        }
        let (gamma, beta) = self.modulation(store, te)?;
        let (normalized, inv_std) = instance_normalize(h);
        let mut y = h.same_shape();
        for b in 0..h.batch {
            for c in 0..h.channels {
                for (o, &n) in y.row_mut(b, c).iter_mut().zip(normalized.row(b, c)) {
                    *o = gamma[c] * n + beta[c];
                }
            }
        }
        Ok((y, AdaInCache { normalized, inv_std, gamma }))
    }

    pub fn backward(&self, cache: &AdaInCache, dy: &Tensor3, te: &[f64], grads: &mut Gradients) -> Tensor3 {
        let f = self.channels;
        let d = self.embed_dim;
        let mut dmod = vec![0.0; 2 * f];
        let mut dx = dy.same_shape();
        let t_n = dy.time as f64;
        for b in 0..dy.batch {
            for c in 0..f {
                let n = cache.normalized.row(b, c);
                let g = dy.row(b, c);
                let dgamma: f64 = g.iter().zip(n).map(|(a, v)| a * v).sum();
                let dbeta: f64 = g.iter().sum();
                dmod[c] += dgamma;
                dmod[f + c] += dbeta;
                let scale = cache.gamma[c] * cache.inv_std[b * f + c];
                let m1 = dbeta / t_n;
                let m2 = dgamma / t_n;
                for ((o, gv), nv) in dx.row_mut(b, c).iter_mut().zip(g).zip(n) {
                    *o = scale * (gv - m1 - nv * m2);
                }
            }
        }
        if let Some(slot) = grads.slot(self.proj) {
            for r in 0..2 * f {
                for j in 0..d {
                    slot[r * d + j] += dmod[r] * te[j];
                }
            }
        }
        if let Some(slot) = grads.slot(self.bias) {
            slot.iter_mut().zip(&dmod).for_each(|(s, v)| *s += v);
        }
        dx
    }
}

/// Normalizes each (sample, channel) row over time; returns the normalized
/// tensor and per-row inverse standard deviations.
pub fn instance_normalize(h: &Tensor3) -> (Tensor3, Vec<f64>) {
    let mut out = h.same_shape();
    let mut inv = Vec::with_capacity(h.batch * h.channels);
    for b in 0..h.batch {
        for c in 0..h.channels {
            let r = h.row(b, c);
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + ADAIN_EPS).sqrt();
            inv.push(is);
            for (o, v) in out.row_mut(b, c).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
        }
    }
    (out, inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditioningKind {
    Tcfm,
    AdaIn,
}

/// Parameter count of one conditioning site, weights and bias reported apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningCount {
    pub weights: usize,
    pub bias: usize,
}

impl ConditioningCount {
    pub fn total(&self) -> usize {
        self.weights + self.bias
    }
}

/// TCFM: `d * a` weights plus `a` biases. AdaIN: `d * 2 * f` weights plus
/// `2 * f` biases.
pub fn conditioning_param_count(kind: ConditioningKind, d: usize, f: usize, a: usize) -> ConditioningCount {
    match kind {
        ConditioningKind::Tcfm => ConditioningCount { weights: d * a, bias: a },
        ConditioningKind::AdaIn => ConditioningCount { weights: d * 2 * f, bias: 2 * f },
    }
}
