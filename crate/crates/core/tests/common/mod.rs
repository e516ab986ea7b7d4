#![allow(dead_code)]

use std::collections::BTreeSet;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kws_adapt::checkpoint::ModelPair;
use kws_adapt::data::{make_toy_dataset, toy_vocabulary, AugmentationConfig, Dataset, ToyConfig};
use kws_adapt::encoder::{ConditioningContext, EncoderModel};
use kws_adapt::metrics::bce_with_logit;
use kws_adapt::optim::OptimizerConfig;
use kws_adapt::params::Gradients;
use kws_adapt::tensor::{dot, Tensor3};
use kws_adapt::text::TextEmbedding;
use kws_adapt::train::{pretrain_toy, BatchComposition, PretrainConfig, TrainConfig};

pub type Q = Ratio<i64>;

/// EER by sweeping thresholds upwards over {distinct scores} + {+inf} with
/// exact rationals. FAR(t) = #neg >= t / N, FRR(t) = #pos < t / P.
pub fn eer_oracle(scores: &[(f64, bool)]) -> Q {
    let p = scores.iter().filter(|s| s.1).count() as i64;
    let n = scores.len() as i64 - p;
    let mut ts: Vec<f64> = scores.iter().map(|s| s.0).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let point = |t: Option<f64>| -> (Q, Q) {
        let fa = scores.iter().filter(|s| !s.1 && t.is_none_or(|t| s.0 >= t)).count() as i64;
        let fr = scores.iter().filter(|s| s.1 && t.is_some_and(|t| s.0 < t)).count() as i64;
        // `None` stands for the lowest threshold (everything accepted).
        (Q::new(fa, n), Q::new(fr, p))
    };
    let mut pts: Vec<(Q, Q)> = vec![point(None)];
    for &t in &ts[1..] {
        pts.push(point(Some(t)));
    }
    let fa_none = Q::from_integer(0);
    pts.push((fa_none, Q::from_integer(1)));
    // pts runs from (FAR=1, FRR=0) to (FAR=0, FRR=1).
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.0 - a.1;
        let db = b.0 - b.1;
        if da == Q::from_integer(0) {
            return a.0 * 100;
        }
        if db <= Q::from_integer(0) {
            if db == Q::from_integer(0) {
                return b.0 * 100;
            }
            let t = da / (da - db);
            return (a.0 + t * (b.0 - a.0)) * 100;
        }
    }
    unreachable!()
}

/// Step-interpolated AP with a stable descending sort, from ranks alone.
pub fn ap_oracle(scores: &[(f64, bool)]) -> Q {
    let rank = |i: usize| -> i64 {
        scores.iter().enumerate().filter(|(j, s)| s.0 > scores[i].0 || (s.0 == scores[i].0 && *j <= i)).count() as i64
    };
    let hits = |i: usize| -> i64 {
        scores
            .iter()
            .enumerate()
            .filter(|(j, s)| s.1 && (s.0 > scores[i].0 || (s.0 == scores[i].0 && *j <= i)))
            .count() as i64
    };
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].1).collect();
    let sum: Q = pos.iter().map(|&i| Q::new(hits(i), rank(i))).fold(Q::from_integer(0), |a, b| a + b);
    sum * 100 / pos.len() as i64
}

pub fn q_to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Random labeled score set on the grid {0.0, 0.1, ..., 1.0}, with at least
/// one positive and one negative.
pub fn grid_score_set(rng: &mut impl Rng, max_len: usize) -> Vec<(f64, bool)> {
    let len = rng.gen_range(2..=max_len);
    let mut s: Vec<(f64, bool)> = (0..len).map(|_| (rng.gen_range(0..=10) as f64 / 10.0, rng.gen_bool(0.5))).collect();
    s[0].1 = true;
    s[1].1 = false;
    let k = rng.gen_range(0..len);
    s.swap(0, k);
    s
}

/// Mean BCE of sigmoid(te . ae) over a training-mode forward pass.
pub fn bce_objective(model: &EncoderModel, x: &Tensor3, te: &TextEmbedding, labels: &[bool]) -> f64 {
    let cond = ConditioningContext::new(te.clone());
    let trace = model.forward_batch(x, Some(&cond), true).unwrap();
    let e = trace.embeddings();
    (0..e.batch).map(|b| bce_with_logit(dot(e.sample(b), te.as_slice()), labels[b]).0).sum::<f64>() / e.batch as f64
}

pub fn bce_gradients(model: &EncoderModel, x: &Tensor3, te: &TextEmbedding, labels: &[bool], names: &BTreeSet<String>) -> Gradients {
    let cond = ConditioningContext::new(te.clone());
    let trace = model.forward_batch(x, Some(&cond), true).unwrap();
    let e = trace.embeddings();
    let mut d = e.same_shape();
    for b in 0..e.batch {
        let g = bce_with_logit(dot(e.sample(b), te.as_slice()), labels[b]).1 / e.batch as f64;
        for (o, t) in d.sample_mut(b).iter_mut().zip(te.as_slice()) {
            *o = g * t;
        }
    }
    let mut grads = Gradients::masked(model.store(), |p| names.contains(&p.name));
    model.backward(&trace, &d, &mut grads);
    grads
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Compares analytic gradients with central differences for every element
/// of the named parameters. Relative error is |a - n| / max(|a|, |n|, floor).
pub fn grad_check(model: &mut EncoderModel, x: &Tensor3, te: &TextEmbedding, labels: &[bool], names: &BTreeSet<String>, h: f64, floor: f64) -> GradCheck {
    let grads = bce_gradients(model, x, te, labels, names);
    let mut out = GradCheck { checked: 0, max_rel: 0.0, worst: String::new() };
    for name in names {
        let id = model.store().id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let analytic = grads.get(id).expect("gradient slot").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.store().value(id)[i];
            model.store_mut().value_mut(id)[i] = orig + h;
            let lp = bce_objective(model, x, te, labels);
            model.store_mut().value_mut(id)[i] = orig - h;
            let lm = bce_objective(model, x, te, labels);
            model.store_mut().value_mut(id)[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{name}[{i}]: analytic {a:e}, numeric {num:e}");
            }
        }
    }
    out
}

pub fn random_tensor(batch: usize, channels: usize, time: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * channels * time).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor3::from_vec(batch, channels, time, data)
}

pub fn jitter_params(model: &mut EncoderModel, names: &BTreeSet<String>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let id = model.store().id_of(name).unwrap();
        for v in model.store_mut().value_mut(id).iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// The toy protocol: an 8-keyword evaluation corpus, and a separate
/// pretraining corpus made of the remaining vocabulary plus the evaluation
/// corpus's seen keywords.
pub struct ToyProtocol {
    pub data: Dataset,
    pub pair: ModelPair,
    pub train: TrainConfig,
}

pub const TOY_NOISE_STD: f64 = 1.0;

pub fn toy_corpus(seed: u64) -> Dataset {
    make_toy_dataset(&ToyConfig { noise_std: TOY_NOISE_STD, ..ToyConfig::default() }, seed).unwrap()
}

pub fn pretraining_corpus(eval: &Dataset, seed: u64) -> Dataset {
    let vocab = toy_vocabulary();
    let held_out: Vec<&str> = eval.manifest.keyword_inventory.iter().map(|s| s.as_str()).collect();
    let mut words: Vec<String> = vocab.iter().filter(|w| !held_out.contains(w)).map(|s| s.to_string()).collect();
    words.extend(eval.manifest.seen.iter().cloned());
    let cfg = ToyConfig { n_keywords: words.len(), keywords: Some(words), noise_std: TOY_NOISE_STD, ..ToyConfig::default() };
    make_toy_dataset(&cfg, seed).unwrap()
}

pub fn toy_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig { lr: 1e-3, epochs, lr_halving_period_epochs: 20, ..OptimizerConfig::default() },
        batch: BatchComposition::scaled(32).unwrap(),
        augmentation: AugmentationConfig { expansion_factor: 1, ..AugmentationConfig::default() },
        ..TrainConfig::default()
    }
}

pub fn toy_protocol(epochs: usize) -> ToyProtocol {
    let data = toy_corpus(7);
    let corpus = pretraining_corpus(&data, 1007);
    let (pair, _) = pretrain_toy(&corpus, &PretrainConfig { epochs: 10, ..PretrainConfig::default() }).unwrap();
    ToyProtocol { data, pair, train: toy_train_config(epochs) }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
