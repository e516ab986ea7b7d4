//! Dense `(batch, channels, time)` buffers used by every layer.
//!
//! Vectors such as pooled statistics and embeddings are stored with
//! `time == 1` so that normalization and 1x1 convolutions apply unchanged.

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub batch: usize,
    pub channels: usize,
    pub time: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, time: usize) -> Self {
        Self { batch, channels, time, data: vec![0.0; batch * channels * time] }
    }

    pub fn from_vec(batch: usize, channels: usize, time: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), batch * channels * time, "tensor buffer length");
        Self { batch, channels, time, data }
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.batch, self.channels, self.time)
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.channels * self.time
    }

    #[inline]
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    #[inline]
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.channels + c) * self.time;
        &self.data[start..start + self.time]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.channels + c) * self.time;
        &mut self.data[start..start + self.time]
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Copies channels `[start, start + len)` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.batch, len, self.time);
        for b in 0..self.batch {
            for c in 0..len {
                out.row_mut(b, c).copy_from_slice(self.row(b, start + c));
            }
        }
        out
    }

    /// Writes `part` into channels starting at `start`.
    pub fn write_channels(&mut self, start: usize, part: &Tensor3) {
        for b in 0..self.batch {
            for c in 0..part.channels {
                self.row_mut(b, start + c).copy_from_slice(part.row(b, c));
            }
        }
    }

    pub fn concat_channels(parts: &[&Tensor3]) -> Tensor3 {
        let first = parts[0];
        let total = parts.iter().map(|p| p.channels).sum();
        let mut out = Tensor3::zeros(first.batch, total, first.time);
        let mut offset = 0;
        for p in parts {
            out.write_channels(offset, p);
            offset += p.channels;
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(feature = "parallel")]
pub(crate) fn par_chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    if chunk == 0 {
        return;
    }
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
