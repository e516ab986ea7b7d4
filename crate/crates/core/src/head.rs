//! Classification heads on top of the acoustic embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Gradients, LayerGroupId, ParamId, ParamKind, ParamStore, ParamTag};
use crate::tensor::{dot, Tensor3};
use crate::text::TextEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadInit {
    /// Weight vector copied from the keyword's text embedding.
    FromTextEmbedding,
    /// Small random weights.
    Scratch,
}

/// Learned linear head with `classes` outputs. One output is read as a
/// sigmoid logit; two or more are read as softmax logits with class 0 being
/// the target keyword.
#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl Head {
    pub fn register(
        store: &mut ParamStore<ParamTag>,
        classes: usize,
        dim: usize,
        init: HeadInit,
        te: &TextEmbedding,
        seed: u64,
    ) -> Self {
        let t = ParamTag { group: LayerGroupId::G6, kind: ParamKind::Head };
        let w = match init {
            HeadInit::FromTextEmbedding => {
                let mut w = vec![0.0; classes * dim];
                w[..dim].copy_from_slice(te.as_slice());
                if classes > 1 {
                    for r in 1..classes {
                        for (o, v) in w[r * dim..(r + 1) * dim].iter_mut().zip(te.as_slice()) {
                            *o = -v / (classes - 1) as f64;
                        }
                    }
                }
                w
            }
            HeadInit::Scratch => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bound = 1.0 / (dim as f64).sqrt();
                (0..classes * dim).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let weight = store.add("head.weight", vec![classes, dim], t, w);
        let bias = store.add("head.bias", vec![classes], t, vec![0.0; classes]);
        Self { weight, bias, classes, dim }
    }

    /// Logits, `classes` per row of `emb` (`(batch, dim, 1)`).
    pub fn logits(&self, store: &ParamStore<ParamTag>, emb: &Tensor3) -> Vec<Vec<f64>> {
        let w = store.value(self.weight);
        let b = store.value(self.bias);
        (0..emb.batch)
            .map(|i| {
                let e = emb.sample(i);
                (0..self.classes).map(|k| dot(&w[k * self.dim..(k + 1) * self.dim], e) + b[k]).collect()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns dL/d(embedding).
    pub fn backward(&self, store: &ParamStore<ParamTag>, emb: &Tensor3, d_logits: &[Vec<f64>], grads: &mut Gradients) -> Tensor3 {
        let w = store.value(self.weight).to_vec();
        let mut d_emb = emb.same_shape();
        for (i, dl) in d_logits.iter().enumerate() {
            let e = emb.sample(i).to_vec();
            if let Some(slot) = grads.slot(self.weight) {
                for k in 0..self.classes {
                    for j in 0..self.dim {
                        slot[k * self.dim + j] += dl[k] * e[j];
                    }
                }
            }
            if let Some(slot) = grads.slot(self.bias) {
                slot.iter_mut().zip(dl).for_each(|(s, v)| *s += v);
            }
            let de = d_emb.sample_mut(i);
            for k in 0..self.classes {
                for j in 0..self.dim {
                    de[j] += dl[k] * w[k * self.dim + j];
                }
            }
        }
        d_emb
    }
}
