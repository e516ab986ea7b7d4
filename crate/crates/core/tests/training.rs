mod common;

use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kws_adapt::adaptation::{prepare_model, select_trainable, AdapterSpec, AttachOptions};
use kws_adapt::checkpoint::{encode, Checkpoint, ModelPair};
use kws_adapt::data::{make_toy_dataset, sample_few_shot, AugmentationConfig, Augmenter, Dataset, DatasetManifest, Split, ToyConfig};
use kws_adapt::encoder::{EncoderConfig, EncoderModel};
use kws_adapt::metrics::compute_ap;
use kws_adapt::optim::OptimizerConfig;
use kws_adapt::params::Gradients;
use kws_adapt::tensor::dot;
use kws_adapt::text::{KeywordText, TextEncoder, TextEncoderConfig};
use kws_adapt::train::{
    adapt, alignment_margin, compose_batch, eval_items, pretrain_toy, run_method, score_set, AdaptedModel, BatchComposition,
    MethodKind, PretrainConfig, Role, TrainConfig, TRAIN_LOG_HEADER,
};
use kws_adapt::Error;

fn toy() -> ToyConfig {
    ToyConfig { n_keywords: 4, n_per_keyword: 24, n_noise: 12, n_frames: 16, ..ToyConfig::default() }
}

fn pretrain_cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        encoder: EncoderConfig::compact(20, 16, 4, 16),
        text: TextEncoderConfig { char_dim: 8, hidden: 16, embed_dim: 16 },
        epochs,
        ..PretrainConfig::default()
    }
}

/// A small dataset and a briefly pretrained pair, shared by the tests.
fn fixture() -> &'static (Dataset, ModelPair) {
    static F: OnceLock<(Dataset, ModelPair)> = OnceLock::new();
    F.get_or_init(|| {
        let data = make_toy_dataset(&toy(), 3).unwrap();
        let (pair, _) = pretrain_toy(&data, &pretrain_cfg(6)).unwrap();
        (data, pair)
    })
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig { lr: 2e-3, epochs, ..OptimizerConfig::default() },
        batch: BatchComposition::scaled(16).unwrap(),
        batches_per_epoch: 2,
        augmentation: AugmentationConfig { expansion_factor: 2, ..AugmentationConfig::default() },
        ..TrainConfig::default()
    }
}

fn keyword(data: &Dataset) -> String {
    data.manifest.keyword_inventory[1].clone()
}

fn bytes(m: &EncoderModel) -> Vec<u8> {
    encode(m, None, &serde_json::Value::Null).unwrap()
}

#[test]
fn zero_epochs_return_the_pretrained_encoder() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 0).unwrap();
    let (m, log) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &quick(0)).unwrap();
    assert_eq!(bytes(&m.acoustic), bytes(&pair.acoustic));
    assert!(log.rows.is_empty() && log.best_epoch.is_none());
}

#[test]
fn adaptation_is_reproducible() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 1).unwrap();
    let (a, la) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &quick(3)).unwrap();
    let (b, lb) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &quick(3)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(bytes(&a.acoustic), bytes(&b.acoustic));
    let (_, lc) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &TrainConfig { seed: 9, ..quick(3) }).unwrap();
    assert_ne!(la.rows[0].loss, lc.rows[0].loss);
}

#[test]
fn returned_model_is_the_best_validation_epoch() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 2).unwrap();
    let (m, log) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &quick(6)).unwrap();
    let best = log.rows.iter().map(|r| r.valid_ap).fold(f64::NEG_INFINITY, f64::max);
    let first = log.rows.iter().position(|r| r.valid_ap == best).unwrap();
    assert_eq!(log.best_epoch, Some(first));
    let valid = eval_items(data, &task.valid_set).unwrap();
    let set = score_set(&m.acoustic, &m.te, &task.keyword, &valid, 64).unwrap();
    assert_eq!(compute_ap(&set).unwrap(), best);
}

#[test]
fn log_follows_the_lr_schedule_and_serializes() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 0).unwrap();
    let cfg = TrainConfig { optimizer: OptimizerConfig { lr_halving_period_epochs: 2, ..quick(5).optimizer }, ..quick(5) };
    let (_, log) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &cfg).unwrap();
    let lrs: Vec<f64> = log.rows.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![2e-3, 2e-3, 1e-3, 1e-3, 5e-4]);
    let csv = log.to_csv();
    assert_eq!(csv.lines().next(), Some(TRAIN_LOG_HEADER));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 0).unwrap();
    let cfg = TrainConfig { optimizer: OptimizerConfig { lr: 1e300, ..quick(4).optimizer }, ..quick(4) };
    match adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &cfg) {
        Err(Error::Divergence { lr, .. }) => assert_eq!(lr, 1e300),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn every_method_leaves_its_frozen_parameters_untouched() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 0).unwrap();
    let cfg = quick(2);
    for kind in MethodKind::ALL {
        let run = run_method(kind, &task, pair, data, &cfg, 0).unwrap();
        let spec = kind.spec();
        let mut prepared = pair.acoustic.clone();
        let opts = AttachOptions { laf_init: cfg.laf_init, head_init: cfg.head_init, seed: cfg.seed };
        let plan = if kind.trains() {
            prepare_model(&mut prepared, &spec, &run.model.te, opts).unwrap()
        } else {
            select_trainable(&prepared, &spec).unwrap()
        };
        assert_eq!(run.model.tunable, plan.tunable, "{kind}");
        assert_eq!(run.model.acoustic.store().params().len(), prepared.store().params().len(), "{kind}");
        for (a, b) in prepared.store().params().iter().zip(run.model.acoustic.store().params()) {
            if !plan.contains(&a.name) {
                assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()), "{kind}: {} moved", a.name);
            }
        }
        assert_eq!(run.report.method, kind.name());
        assert!((0.0..=100.0).contains(&run.report.ap) && (0.0..=100.0).contains(&run.report.eer));
    }
}

#[test]
fn method_tunable_counts_order_as_expected() {
    let (_, pair) = fixture();
    let n = |k: MethodKind| select_trainable(&pair.acoustic, &k.spec()).unwrap().tunable;
    let total = pair.acoustic.total_params();
    assert_eq!(n(MethodKind::Pt), 0);
    assert_eq!(n(MethodKind::FtClf), pair.acoustic.embed_dim() + 1);
    assert_eq!(n(MethodKind::FtFull), total + pair.acoustic.embed_dim() + 1);
    assert!(n(MethodKind::TaAdapter) < n(MethodKind::FtFull));
    assert!(n(MethodKind::KamAdain) > total);
}

#[test]
fn method_names_parse_case_insensitively() {
    for kind in MethodKind::ALL {
        assert_eq!(MethodKind::from_str(&kind.name().to_lowercase().replace('_', "-")).unwrap(), kind);
    }
    assert!(matches!(MethodKind::from_str("maml"), Err(Error::Config(_))));
}

#[test]
fn adapted_models_survive_a_checkpoint() {
    let (data, pair) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 5, 0).unwrap();
    let (m, _) = adapt(pair, data, &task, &AdapterSpec::ta_adapter(), &quick(2)).unwrap();
    let ck = Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap();
    let back = AdaptedModel::from_checkpoint(ck).unwrap();
    let items: Vec<_> = task.test_set.iter().map(|(id, _)| data.features_of(id).unwrap()).collect();
    assert_eq!(m.score(&items, 16).unwrap(), back.score(&items, 16).unwrap());
    assert_eq!(back.spec, m.spec);
}

#[test]
fn noise_slots_are_never_augmented() {
    let (data, _) = fixture();
    let task = sample_few_shot(&data.manifest, &keyword(data), 3, 0).unwrap();
    let noise = data.features_of(&task.noise_pool[0]).unwrap().clone();
    let aug = Augmenter::new(AugmentationConfig::default(), vec![noise], vec![]).unwrap();
    let batch = compose_batch(&task, data, &BatchComposition::scaled(32).unwrap(), &aug, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for item in &batch.items {
        let clean = data.features_of(&item.id).unwrap();
        match item.role {
            Role::Noise => assert_eq!(&item.features, clean),
            _ => assert_ne!(&item.features, clean),
        }
        if item.role == Role::Target {
            assert!(task.positives.contains(&item.id));
        }
    }
}

#[test]
fn pretraining_aligns_keywords() {
    let (data, pair) = fixture();
    let (same, cross) = alignment_margin(pair, data, Split::Test).unwrap();
    assert!(same - cross > 0.1, "same {same}, cross {cross}");

    let cfg = pretrain_cfg(0);
    let untrained = ModelPair {
        acoustic: EncoderModel::new(cfg.encoder.clone(), 11).unwrap(),
        text: TextEncoder::new(cfg.text.clone(), 11).unwrap().freeze(),
    };
    let (s0, c0) = alignment_margin(&untrained, data, Split::Test).unwrap();
    assert!((s0 - c0).abs() < 0.15, "untrained margin {}", s0 - c0);
    assert!(same - cross > (s0 - c0).abs());
}

#[test]
fn pretrained_pairs_reload_identically() {
    let (data, pair) = fixture();
    let back = ModelPair::from_bytes(&pair.to_bytes().unwrap()).unwrap();
    assert_eq!(alignment_margin(pair, data, Split::Valid).unwrap(), alignment_margin(&back, data, Split::Valid).unwrap());
}

#[test]
fn pretraining_needs_two_keywords() {
    let data = make_toy_dataset(&toy(), 0).unwrap();
    let kw = data.manifest.keyword_inventory[0].clone();
    let records = data.manifest.records.iter().filter(|r| r.label.keyword().is_none_or(|k| k == kw)).cloned().collect();
    let single = Dataset {
        manifest: DatasetManifest::new(records, vec![kw], vec![]).unwrap(),
        features: data.features.clone(),
    };
    assert!(matches!(pretrain_toy(&single, &pretrain_cfg(1)), Err(Error::Pretrain(_))));
    let only = PretrainConfig { keywords: Some(vec![data.manifest.keyword_inventory[0].clone()]), ..pretrain_cfg(1) };
    assert!(matches!(pretrain_toy(&data, &only), Err(Error::Pretrain(_))));
    let unknown = PretrainConfig { keywords: Some(vec!["zebra".into(), "yes".into()]), ..pretrain_cfg(1) };
    assert!(matches!(pretrain_toy(&data, &unknown), Err(Error::Pretrain(_))));
}

#[test]
fn text_encoder_is_frozen_and_separates_keywords() {
    let (data, pair) = fixture();
    let mut text = pair.text.clone();
    let grads = Gradients::for_all(text.store());
    assert!(matches!(text.apply_update(&grads), Err(Error::Frozen(_))));
    let tes: Vec<_> = data.manifest.keyword_inventory.iter().map(|k| text.encode(&KeywordText::new(k).unwrap())).collect();
    for i in 0..tes.len() {
        for j in i + 1..tes.len() {
            assert!(dot(tes[i].as_slice(), tes[j].as_slice()) < 0.99);
        }
    }
}
