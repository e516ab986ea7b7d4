//! Convolution, batch normalization and squeeze-excitation with explicit
//! backward passes. Each forward returns the cache its backward consumes.

use rand::Rng;

use crate::params::{BufferId, Gradients, ParamId, ParamStore};
use crate::tensor::{par_chunks_mut, sigmoid, Tensor3};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// 1-D convolution with zero "same" padding; `kernel` must be odd.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Clone>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        tag: T,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel;
        let w = uniform_init(rng, out_channels * in_channels * kernel, fan_in);
        let weight = store.add(format!("{name}.weight"), vec![out_channels, in_channels, kernel], tag.clone(), w);
        let bias = bias.then(|| {
            let b = uniform_init(rng, out_channels, fan_in);
            store.add(format!("{name}.bias"), vec![out_channels], tag, b)
        });
        Self { weight, bias, in_channels, out_channels, kernel, dilation }
    }

    #[inline]
    fn tap_offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel as isize - 1) / 2) * self.dilation as isize
    }

    #[inline]
    fn valid_range(off: isize, time: usize) -> (usize, usize) {
        let lo = (-off).max(0) as usize;
        let hi = (time as isize - off).clamp(0, time as isize) as usize;
        (lo.min(hi), hi)
    }

    pub fn forward<T: Clone>(&self, store: &ParamStore<T>, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_channels);
        let time = x.time;
        let w = store.value(self.weight);
        let bias = self.bias.map(|b| store.value(b));
        let mut out = Tensor3::zeros(x.batch, self.out_channels, time);
        let (cin, k) = (self.in_channels, self.kernel);
        par_chunks_mut(&mut out.data, self.out_channels * time, |b, ys| {
            let xs = x.sample(b);
            for o in 0..self.out_channels {
                let y = &mut ys[o * time..(o + 1) * time];
                if let Some(bias) = bias {
                    y.iter_mut().for_each(|v| *v = bias[o]);
                }
                for i in 0..cin {
                    let xr = &xs[i * time..(i + 1) * time];
                    for kk in 0..k {
                        let wv = w[(o * cin + i) * k + kk];
                        let off = self.tap_offset(kk);
                        let (lo, hi) = Self::valid_range(off, time);
                        if lo == hi {
                            continue;
                        }
                        let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (yv, xv) in y[lo..hi].iter_mut().zip(src) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        });
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward<T: Clone>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor3,
        dy: &Tensor3,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Tensor3> {
        let time = x.time;
        let (cin, cout, k) = (self.in_channels, self.out_channels, self.kernel);
        if grads.wants(self.weight) {
            let mut dw = vec![0.0; cout * cin * k];
            par_chunks_mut(&mut dw, cin * k, |o, dwo| {
                for b in 0..x.batch {
                    let dyr = dy.row(b, o);
                    for i in 0..cin {
                        let xr = x.row(b, i);
                        for kk in 0..k {
                            let off = self.tap_offset(kk);
                            let (lo, hi) = Self::valid_range(off, time);
                            if lo == hi {
                                continue;
                            }
                            let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                            let s: f64 = dyr[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum();
                            dwo[i * k + kk] += s;
                        }
                    }
                }
            });
            let slot = grads.slot(self.weight).expect("wanted");
            slot.iter_mut().zip(&dw).for_each(|(g, d)| *g += d);
        }
        if let Some(bias) = self.bias {
            if let Some(slot) = grads.slot(bias) {
                for b in 0..dy.batch {
                    for o in 0..cout {
                        slot[o] += dy.row(b, o).iter().sum::<f64>();
                    }
                }
            }
        }
        if !need_input_grad {
            return None;
        }
        let w = store.value(self.weight);
        let mut dx = Tensor3::zeros(x.batch, cin, time);
        par_chunks_mut(&mut dx.data, cin * time, |b, dxs| {
            let dys = dy.sample(b);
            for o in 0..cout {
                let dyr = &dys[o * time..(o + 1) * time];
                for i in 0..cin {
                    let dxr = &mut dxs[i * time..(i + 1) * time];
                    for kk in 0..k {
                        let wv = w[(o * cin + i) * k + kk];
                        let off = self.tap_offset(kk);
                        let (lo, hi) = Self::valid_range(off, time);
                        if lo == hi {
                            continue;
                        }
                        let dst = &mut dxr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (d, g) in dst.iter_mut().zip(&dyr[lo..hi]) {
                            *d += wv * g;
                        }
                    }
                }
            }
        });
        Some(dx)
    }
}

/// Per-channel batch normalization over (batch, time).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor3,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased variance when batch statistics were used.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl BnCache {
    pub fn batch_stats(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.batch_stats.as_ref()
    }
}

impl BatchNorm {
    pub fn register<T: Clone>(store: &mut ParamStore<T>, name: &str, channels: usize, tag: T) -> Self {
        let gamma = store.add(format!("{name}.weight"), vec![channels], tag.clone(), vec![1.0; channels]);
        let beta = store.add(format!("{name}.bias"), vec![channels], tag, vec![0.0; channels]);
        let running_mean = store.add_buffer(format!("{name}.running_mean"), vec![0.0; channels]);
        let running_var = store.add_buffer(format!("{name}.running_var"), vec![1.0; channels]);
        Self { gamma, beta, running_mean, running_var, channels }
    }

    pub fn forward<T: Clone>(&self, store: &ParamStore<T>, x: &Tensor3, use_batch_stats: bool) -> (Tensor3, BnCache) {
        let c_n = self.channels;
        let n = (x.batch * x.time) as f64;
        let (mean, var, batch_stats) = if use_batch_stats {
            let mut mean = vec![0.0; c_n];
            let mut var = vec![0.0; c_n];
            for c in 0..c_n {
                let mut s = 0.0;
                for b in 0..x.batch {
                    s += x.row(b, c).iter().sum::<f64>();
                }
                let m = s / n;
                let mut v = 0.0;
                for b in 0..x.batch {
                    v += x.row(b, c).iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
                }
                mean[c] = m;
                var[c] = v / n;
            }
            let unbiased: Vec<f64> =
                var.iter().map(|&v| if n > 1.0 { v * n / (n - 1.0) } else { v }).collect();
            (mean.clone(), var, Some((mean, unbiased)))
        } else {
            (store.buffer(self.running_mean).to_vec(), store.buffer(self.running_var).to_vec(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut xhat = x.same_shape();
        let mut y = x.same_shape();
        for b in 0..x.batch {
            for c in 0..c_n {
                let (m, s) = (mean[c], inv_std[c]);
                let xr = x.row(b, c);
                let hr = xhat.row_mut(b, c);
                for (h, &v) in hr.iter_mut().zip(xr) {
                    *h = (v - m) * s;
                }
                let (g, bt) = (gamma[c], beta[c]);
                let hr = xhat.row(b, c).to_vec();
                for (o, h) in y.row_mut(b, c).iter_mut().zip(hr) {
                    *o = g * h + bt;
                }
            }
        }
        (y, BnCache { xhat, inv_std, batch_stats })
    }

    pub fn backward<T: Clone>(&self, store: &ParamStore<T>, cache: &BnCache, dy: &Tensor3, grads: &mut Gradients) -> Tensor3 {
        let c_n = self.channels;
        let xhat = &cache.xhat;
        let n = (dy.batch * dy.time) as f64;
        let mut sum_dy = vec![0.0; c_n];
        let mut sum_dy_xhat = vec![0.0; c_n];
        for b in 0..dy.batch {
            for c in 0..c_n {
                for (g, h) in dy.row(b, c).iter().zip(xhat.row(b, c)) {
                    sum_dy[c] += g;
                    sum_dy_xhat[c] += g * h;
                }
            }
        }
        if let Some(slot) = grads.slot(self.gamma) {
            slot.iter_mut().zip(&sum_dy_xhat).for_each(|(s, v)| *s += v);
        }
        if let Some(slot) = grads.slot(self.beta) {
            slot.iter_mut().zip(&sum_dy).for_each(|(s, v)| *s += v);
        }
        let gamma = store.value(self.gamma);
        let mut dx = dy.same_shape();
        let batch_mode = cache.batch_stats.is_some();
        for b in 0..dy.batch {
            for c in 0..c_n {
                let scale = gamma[c] * cache.inv_std[c];
                let dyr = dy.row(b, c);
                let hr = xhat.row(b, c);
                let dxr = dx.row_mut(b, c);
                if batch_mode {
                    let (m1, m2) = (sum_dy[c] / n, sum_dy_xhat[c] / n);
                    for ((d, g), h) in dxr.iter_mut().zip(dyr).zip(hr) {
                        *d = scale * (g - m1 - h * m2);
                    }
                } else {
                    for (d, g) in dxr.iter_mut().zip(dyr) {
                        *d = scale * g;
                    }
                }
            }
        }
        dx
    }

    /// Folds batch statistics from `cache` into the running estimates.
    pub fn update_running<T: Clone>(&self, store: &mut ParamStore<T>, cache: &BnCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            let rm = store.buffer_mut(self.running_mean);
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.buffer_mut(self.running_var);
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

/// Squeeze-excitation: time-average, bias-free bottleneck, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub down: ParamId,
    pub up: ParamId,
    pub channels: usize,
    pub bottleneck: usize,
}

#[derive(Clone, Debug)]
pub struct SeCache {
    x: Tensor3,
    squeezed: Vec<f64>,
    hidden_pre: Vec<f64>,
    gate: Vec<f64>,
}

impl SqueezeExcite {
    pub fn register<T: Clone>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        bottleneck: usize,
        tag: T,
        rng: &mut impl Rng,
    ) -> Self {
        let down = store.add(
            format!("{name}.down.weight"),
            vec![bottleneck, channels],
            tag.clone(),
            uniform_init(rng, bottleneck * channels, channels),
        );
        let up = store.add(
            format!("{name}.up.weight"),
            vec![channels, bottleneck],
            tag,
            uniform_init(rng, channels * bottleneck, bottleneck),
        );
        Self { down, up, channels, bottleneck }
    }

    pub fn forward<T: Clone>(&self, store: &ParamStore<T>, x: &Tensor3) -> (Tensor3, SeCache) {
        let (c_n, k_n, bsz) = (self.channels, self.bottleneck, x.batch);
        let down = store.value(self.down);
        let up = store.value(self.up);
        let mut squeezed = vec![0.0; bsz * c_n];
        let mut hidden_pre = vec![0.0; bsz * k_n];
        let mut gate = vec![0.0; bsz * c_n];
        let mut y = x.same_shape();
        for b in 0..bsz {
            let z = &mut squeezed[b * c_n..(b + 1) * c_n];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc = x.row(b, c).iter().sum::<f64>() / x.time as f64;
            }
            let u = &mut hidden_pre[b * k_n..(b + 1) * k_n];
            for (j, uj) in u.iter_mut().enumerate() {
                *uj = (0..c_n).map(|c| down[j * c_n + c] * z[c]).sum();
            }
            for c in 0..c_n {
                let v: f64 = (0..k_n).map(|j| up[c * k_n + j] * u[j].max(0.0)).sum();
                let g = sigmoid(v);
                gate[b * c_n + c] = g;
                for (o, &xv) in y.row_mut(b, c).iter_mut().zip(x.row(b, c)) {
                    *o = xv * g;
                }
            }
        }
        (y, SeCache { x: x.clone(), squeezed, hidden_pre, gate })
    }

    pub fn backward<T: Clone>(&self, store: &ParamStore<T>, cache: &SeCache, dy: &Tensor3, grads: &mut Gradients) -> Tensor3 {
        let (c_n, k_n) = (self.channels, self.bottleneck);
        let x = &cache.x;
        let down = store.value(self.down);
        let up = store.value(self.up);
        let mut ddown = vec![0.0; k_n * c_n];
        let mut dup = vec![0.0; c_n * k_n];
        let mut dx = x.same_shape();
        for b in 0..x.batch {
            let z = &cache.squeezed[b * c_n..(b + 1) * c_n];
            let u = &cache.hidden_pre[b * k_n..(b + 1) * k_n];
            let mut dv = vec![0.0; c_n];
            for c in 0..c_n {
                let g = cache.gate[b * c_n + c];
                let dg: f64 = dy.row(b, c).iter().zip(x.row(b, c)).map(|(a, v)| a * v).sum();
                dv[c] = dg * g * (1.0 - g);
                for (d, a) in dx.row_mut(b, c).iter_mut().zip(dy.row(b, c)) {
                    *d = a * g;
                }
            }
            let mut du = vec![0.0; k_n];
            for c in 0..c_n {
                for j in 0..k_n {
                    dup[c * k_n + j] += dv[c] * u[j].max(0.0);
                    du[j] += up[c * k_n + j] * dv[c];
                }
            }
            for j in 0..k_n {
                if u[j] <= 0.0 {
                    du[j] = 0.0;
                }
            }
            let inv_t = 1.0 / x.time as f64;
            for c in 0..c_n {
                let mut dz = 0.0;
                for j in 0..k_n {
                    ddown[j * c_n + c] += du[j] * z[c];
                    dz += down[j * c_n + c] * du[j];
                }
                let add = dz * inv_t;
                dx.row_mut(b, c).iter_mut().for_each(|d| *d += add);
            }
        }
        if let Some(slot) = grads.slot(self.down) {
            slot.iter_mut().zip(&ddown).for_each(|(s, v)| *s += v);
        }
        if let Some(slot) = grads.slot(self.up) {
            slot.iter_mut().zip(&dup).for_each(|(s, v)| *s += v);
        }
        dx
    }

    /// Smallest |pre-activation| of the bottleneck ReLU.
    pub(crate) fn kink_margin(cache: &SeCache) -> f64 {
        cache.hidden_pre.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Row-wise L2 normalization of `(batch, dim, 1)` vectors.
pub fn l2_normalize(x: &Tensor3) -> (Tensor3, Vec<f64>) {
    let mut y = x.same_shape();
    let mut norms = Vec::with_capacity(x.batch);
    for b in 0..x.batch {
        let s = x.sample(b);
        let n = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        norms.push(n);
        for (o, v) in y.sample_mut(b).iter_mut().zip(s) {
            *o = v / n;
        }
    }
    (y, norms)
}

pub fn l2_normalize_backward(y: &Tensor3, norms: &[f64], dy: &Tensor3) -> Tensor3 {
    let mut dx = y.same_shape();
    for b in 0..y.batch {
        let ys = y.sample(b);
        let dys = dy.sample(b);
        let proj: f64 = ys.iter().zip(dys).map(|(a, c)| a * c).sum();
        for ((d, yv), g) in dx.sample_mut(b).iter_mut().zip(ys).zip(dys) {
            *d = (g - yv * proj) / norms[b];
        }
    }
    dx
}
