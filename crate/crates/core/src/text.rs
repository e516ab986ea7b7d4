//! Character-level text encoder producing the keyword's representative
//! embedding.
//!
//! Architecture: character embedding table, two "same"-padded 1-D
//! convolutions with ReLU, mean pooling over characters, a linear projection
//! to the shared dimension and L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{l2_normalize, l2_normalize_backward, Conv1d};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor3;

/// Closed keyword alphabet: lowercase ASCII letters, digits, space,
/// apostrophe and hyphen.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 '-";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KeywordText(String);

impl KeywordText {
    /// Lowercases `text` and validates it against [`ALPHABET`].
    pub fn new(text: &str) -> Result<Self> {
        let lowered = text.to_lowercase();
        if lowered.is_empty() {
            return Err(Error::Input("keyword text must not be empty".into()));
        }
        if let Some(c) = lowered.chars().find(|c| !ALPHABET.contains(*c)) {
            return Err(Error::Input(format!("character {c:?} is outside the keyword alphabet")));
        }
        Ok(Self(lowered))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn indices(&self) -> Vec<usize> {
        self.0.chars().map(|c| ALPHABET.find(c).expect("validated")).collect()
    }
}

impl TryFrom<String> for KeywordText {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        KeywordText::new(&s)
    }
}

impl From<KeywordText> for String {
    fn from(k: KeywordText) -> String {
        k.0
    }
}

impl std::fmt::Display for KeywordText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Unit-norm keyword embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    /// Normalizes `v` to unit length.
    pub fn from_unnormalized(v: Vec<f64>) -> Result<Self> {
        let n = crate::tensor::l2_norm(&v);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Input("cannot normalize a zero or non-finite embedding".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub char_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { char_dim: 64, hidden: 256, embed_dim: 512 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.char_dim == 0 || self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("text encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    store: ParamStore<()>,
    embedding: ParamId,
    conv1: Conv1d,
    conv2: Conv1d,
    proj: Conv1d,
}

pub struct TextTrace {
    indices: Vec<usize>,
    emb: Tensor3,
    h1_pre: Tensor3,
    h1: Tensor3,
    h2_pre: Tensor3,
    pooled: Tensor3,
    normed: Tensor3,
    norms: Vec<f64>,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = ALPHABET.chars().count();
        let table = {
            use rand_distr::{Distribution, Normal};
            let n = Normal::new(0.0, 1.0).expect("valid normal");
            (0..vocab * config.char_dim).map(|_| n.sample(&mut rng)).collect()
        };
        let embedding = store.add("embedding", vec![vocab, config.char_dim], (), table);
        let conv1 = Conv1d::register(&mut store, "conv1", config.char_dim, config.hidden, 3, 1, true, (), &mut rng);
        let conv2 = Conv1d::register(&mut store, "conv2", config.hidden, config.hidden, 3, 1, true, (), &mut rng);
        let proj = Conv1d::register(&mut store, "proj", config.hidden, config.embed_dim, 1, 1, true, (), &mut rng);
        Ok(Self { config, store, embedding, conv1, conv2, proj })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<()> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<()> {
        &mut self.store
    }

    pub fn encode(&self, text: &KeywordText) -> TextEmbedding {
        let trace = self.forward_trace(text);
        TextEmbedding(trace.normed.data.clone())
    }

    pub fn forward_trace(&self, text: &KeywordText) -> TextTrace {
        let indices = text.indices();
        let (dim, len) = (self.config.char_dim, indices.len());
        let table = self.store.value(self.embedding);
        let mut emb = Tensor3::zeros(1, dim, len);
        for (t, &ix) in indices.iter().enumerate() {
            for c in 0..dim {
                emb.row_mut(0, c)[t] = table[ix * dim + c];
            }
        }
        let h1_pre = self.conv1.forward(&self.store, &emb);
        let h1 = h1_pre.map(|v| v.max(0.0));
        let h2_pre = self.conv2.forward(&self.store, &h1);
        let mut pooled = Tensor3::zeros(1, self.config.hidden, 1);
        for c in 0..self.config.hidden {
            pooled.data[c] = h2_pre.row(0, c).iter().map(|v| v.max(0.0)).sum::<f64>() / len as f64;
        }
        let out = self.proj.forward(&self.store, &pooled);
        let (normed, norms) = l2_normalize(&out);
        TextTrace { indices, emb, h1_pre, h1, h2_pre, pooled, normed, norms }
    }

    pub fn embedding_of(trace: &TextTrace) -> TextEmbedding {
        TextEmbedding(trace.normed.data.clone())
    }

    /// Accumulates parameter gradients for dL/d(embedding).
    pub fn backward(&self, trace: &TextTrace, d_embedding: &[f64], grads: &mut Gradients) {
        let dnorm = Tensor3::from_vec(1, self.config.embed_dim, 1, d_embedding.to_vec());
        let dout = l2_normalize_backward(&trace.normed, &trace.norms, &dnorm);
        let dpooled = self.proj.backward(&self.store, &trace.pooled, &dout, grads, true).expect("input grad");
        let len = trace.indices.len();
        let mut dh2 = trace.h2_pre.same_shape();
        for c in 0..self.config.hidden {
            let g = dpooled.data[c] / len as f64;
            for (d, &p) in dh2.row_mut(0, c).iter_mut().zip(trace.h2_pre.row(0, c)) {
                *d = if p > 0.0 { g } else { 0.0 };
            }
        }
        let mut dh1 = self.conv2.backward(&self.store, &trace.h1, &dh2, grads, true).expect("input grad");
        for (d, &p) in dh1.data.iter_mut().zip(&trace.h1_pre.data) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        let need_emb = grads.wants(self.embedding);
        let demb = self.conv1.backward(&self.store, &trace.emb, &dh1, grads, need_emb);
        if let (Some(demb), Some(slot)) = (demb, grads.slot(self.embedding)) {
            let dim = self.config.char_dim;
            for (t, &ix) in trace.indices.iter().enumerate() {
                for c in 0..dim {
                    slot[ix * dim + c] += demb.row(0, c)[t];
                }
            }
        }
    }

    /// Locks the encoder; the returned handle only supports encoding.
    pub fn freeze(self) -> FrozenTextEncoder {
        FrozenTextEncoder { inner: self }
    }
}

/// Read-only text encoder. Parameter updates are rejected.
#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    inner: TextEncoder,
}

impl FrozenTextEncoder {
    pub fn encode(&self, text: &KeywordText) -> TextEmbedding {
        self.inner.encode(text)
    }

    /// Freezing is idempotent.
    pub fn freeze(self) -> FrozenTextEncoder {
        self
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &ParamStore<()> {
        &self.inner.store
    }

    /// Always fails: frozen parameters cannot receive updates.
    pub fn apply_update(&mut self, _grads: &Gradients) -> Result<()> {
        Err(Error::Frozen("the text encoder is frozen".into()))
    }

    pub fn unfreeze(self) -> TextEncoder {
        self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TextEncoder {
        TextEncoder::new(TextEncoderConfig { char_dim: 4, hidden: 6, embed_dim: 5 }, 3).unwrap()
    }

    #[test]
    fn keyword_validation_names_the_character() {
        assert!(KeywordText::new("Sheila").is_ok());
        assert!(KeywordText::new("").is_err());
        let err = KeywordText::new("go!").unwrap_err().to_string();
        assert!(err.contains("'!'"), "{err}");
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let enc = small();
        let k = KeywordText::new("marvin").unwrap();
        let a = enc.encode(&k);
        assert!((crate::tensor::l2_norm(a.as_slice()) - 1.0).abs() < 1e-12);
        assert_eq!(a, enc.encode(&k));
        assert_eq!(a.dim(), 5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut enc = small();
        let k = KeywordText::new("go-4").unwrap();
        let probe = [0.3, -1.2, 0.7, 0.1, -0.4];
        let loss = |e: &TextEncoder| -> f64 { crate::tensor::dot(e.encode(&k).as_slice(), &probe) };
        let trace = enc.forward_trace(&k);
        let mut grads = Gradients::for_all(enc.store());
        enc.backward(&trace, &probe, &mut grads);
        let h = 1e-6;
        for pid in 0..enc.store().len() {
            let id = ParamId(pid);
            for i in 0..enc.store().value(id).len() {
                let orig = enc.store().value(id)[i];
                enc.store_mut().value_mut(id)[i] = orig + h;
                let up = loss(&enc);
                enc.store_mut().value_mut(id)[i] = orig - h;
                let dn = loss(&enc);
                enc.store_mut().value_mut(id)[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.get(id).unwrap()[i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "param {pid}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn frozen_encoder_rejects_updates() {
        let enc = small();
        let grads = Gradients::for_all(enc.store());
        let mut frozen = enc.freeze().freeze();
        assert!(matches!(frozen.apply_update(&grads), Err(Error::Frozen(_))));
    }
}
