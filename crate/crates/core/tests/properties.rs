mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kws_adapt::adaptation::{audit, restore, select_trainable, snapshot, AdapterSpec, AuditEntry, ClassifierMode, ConditioningMode};
use kws_adapt::checkpoint::{decode, encode};
use kws_adapt::conditioning::{laf_apply, laf_normalized_profile, laf_weights, profile_grid, ActivationBasis, ActivationWeights};
use kws_adapt::data::{
    convolve_time, expand_eval_set, make_toy_dataset, mean_power, mix_at_snr, sample_few_shot, synthetic_rir, AugmentMode,
    AugmentationConfig, Augmenter, EvalItem, Split, ToyConfig,
};
use kws_adapt::encoder::{ConditioningContext, EncoderConfig, EncoderModel, LafInit, MelFeatureSequence};
use kws_adapt::metrics::{compute_ap, compute_eer, ScoreMode, ScoreSet};
use kws_adapt::optim::OptimizerConfig;
use kws_adapt::params::LayerGroupId::{self, *};
use kws_adapt::tensor::l2_norm;
use kws_adapt::text::{KeywordText, TextEmbedding, TextEncoder, TextEncoderConfig};
use kws_adapt::train::{BatchComposition, REFERENCE_RATIO};

use common::*;

fn small_model(seed: u64) -> EncoderModel {
    EncoderModel::new(EncoderConfig::compact(6, 8, 4, 6), seed).unwrap()
}

fn features(t: usize, m: usize, vals: &[f64]) -> MelFeatureSequence {
    let data = (0..t * m).map(|i| vals[i % vals.len()]).collect();
    MelFeatureSequence::new(t, m, data).unwrap()
}

fn set_of(pairs: &[(f64, bool)]) -> ScoreSet {
    ScoreSet::from_pairs(KeywordText::new("up").unwrap(), ScoreMode::Probability, pairs.iter().copied())
}

fn score_pairs() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (any::<u64>(), 2usize..=12).prop_map(|(seed, n)| grid_score_set(&mut ChaCha8Rng::seed_from_u64(seed), n))
}

fn group_set(mask: u8, pool: &[LayerGroupId]) -> BTreeSet<LayerGroupId> {
    pool.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, g)| *g).collect()
}

fn spec_from(bn: u8, se: u8, tcfm: u8) -> AdapterSpec {
    let tcfm_sites = group_set(tcfm, &[G0, G1, G2, G3, G4, G5]);
    AdapterSpec {
        bn_groups: group_set(bn, &LayerGroupId::ALL),
        se_groups: group_set(se, &LayerGroupId::SE_GROUPS),
        conditioning: if tcfm_sites.is_empty() { ConditioningMode::None } else { ConditioningMode::Tcfm },
        tcfm_sites,
        ..AdapterSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn laf_weights_lie_on_the_simplex(
        d in 1usize..8,
        seed in any::<u64>(),
        scale in 0.0f64..30.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let te: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d * 6).map(|_| rng.gen_range(-scale..=scale)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-scale..=scale)).collect();
        let s = laf_weights(&te, &w, &b).unwrap();
        prop_assert!(s.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((s.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn one_hot_mixture_is_the_basis_function(i in 0usize..6, h in -3.0f64..=3.0) {
        let basis = ActivationBasis::standard();
        let y = laf_apply(&[h], &ActivationWeights::one_hot(6, i), &basis)[0];
        prop_assert!((y - basis.functions()[i].eval(h)).abs() <= 1e-12);
    }

    #[test]
    fn profiles_are_bounded_by_the_basis_spread(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let s = ActivationWeights::new(raw.iter().map(|v| v / total).collect()).unwrap();
        let basis = ActivationBasis::standard();
        for (h, y) in laf_normalized_profile(&s, &basis, &profile_grid(121)).unwrap() {
            let vals: Vec<f64> = basis.functions().iter().map(|f| f.eval(h) - basis.mean_at(h)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn metrics_match_exact_oracles(pairs in score_pairs()) {
        let set = set_of(&pairs);
        prop_assert!((compute_eer(&set).unwrap() - q_to_f64(eer_oracle(&pairs))).abs() <= 1e-9);
        prop_assert!((compute_ap(&set).unwrap() - q_to_f64(ap_oracle(&pairs))).abs() <= 1e-9);
    }

    #[test]
    fn metrics_are_bounded(pairs in score_pairs()) {
        let set = set_of(&pairs);
        let eer = compute_eer(&set).unwrap();
        let ap = compute_ap(&set).unwrap();
        prop_assert!((0.0..=100.0).contains(&eer));
        prop_assert!(ap > 0.0 && ap <= 100.0);
    }

    #[test]
    fn eer_is_symmetric_under_label_and_score_flip(pairs in score_pairs()) {
        let flipped: Vec<(f64, bool)> = pairs.iter().map(|&(s, y)| (-s, !y)).collect();
        let a = compute_eer(&set_of(&pairs)).unwrap();
        let b = compute_eer(&set_of(&flipped)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(pairs in score_pairs(), k in 0.1f64..10.0, c in -5.0f64..5.0) {
        let moved: Vec<(f64, bool)> = pairs.iter().map(|&(s, y)| (k * s + c, y)).collect();
        let (a, b) = (set_of(&pairs), set_of(&moved));
        prop_assert!((compute_eer(&a).unwrap() - compute_eer(&b).unwrap()).abs() <= 1e-9);
        prop_assert!((compute_ap(&a).unwrap() - compute_ap(&b).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn separable_scores_are_perfect(n_pos in 1usize..8, n_neg in 1usize..8) {
        let mut pairs: Vec<(f64, bool)> = (0..n_neg).map(|i| (i as f64 / 100.0, false)).collect();
        pairs.extend((0..n_pos).map(|i| (0.5 + i as f64 / 100.0, true)));
        let set = set_of(&pairs);
        prop_assert_eq!(compute_eer(&set).unwrap(), 0.0);
        prop_assert_eq!(compute_ap(&set).unwrap(), 100.0);
    }

    #[test]
    fn lr_halves_every_period(lr in 1e-8f64..1.0, period in 1usize..60, epoch in 0usize..600) {
        let opt = OptimizerConfig { lr, lr_halving_period_epochs: period, ..OptimizerConfig::default() };
        prop_assert_eq!(opt.lr_at(epoch), lr * 0.5f64.powi((epoch / period) as i32));
    }

    #[test]
    fn scaled_batches_keep_the_ratio(total in 3usize..2048) {
        let c = BatchComposition::scaled(total).unwrap();
        prop_assert_eq!(c.n_target + c.n_nontarget + c.n_noise, total);
        let sum: usize = REFERENCE_RATIO.iter().sum();
        for (n, r) in [c.n_target, c.n_nontarget, c.n_noise].into_iter().zip(REFERENCE_RATIO) {
            let exact = (total * r) as f64 / sum as f64;
            prop_assert!((n as f64 - exact).abs() < 1.0);
        }
    }

    #[test]
    fn trainable_sets_grow_with_the_spec(
        bn in any::<u8>(), bn_extra in any::<u8>(),
        se in any::<u8>(), se_extra in any::<u8>(),
        tcfm in any::<u8>(), tcfm_extra in any::<u8>(),
    ) {
        let model = small_model(1);
        let a = spec_from(bn, se, tcfm);
        let b = spec_from(bn | bn_extra, se | se_extra, tcfm | tcfm_extra);
        prop_assert!(a.is_subset_of(&b));
        let pa = select_trainable(&model, &a).unwrap();
        let pb = select_trainable(&model, &b).unwrap();
        prop_assert!(pa.names.is_subset(&pb.names));
        prop_assert!(pa.tunable <= pb.tunable);
    }

    #[test]
    fn snapshot_restore_is_bitwise(seed in any::<u64>(), noise in 0.01f64..1.0) {
        let mut model = small_model(seed % 1000);
        let snap = snapshot(&model);
        let names: BTreeSet<String> = model.store().params().iter().map(|p| p.name.clone()).collect();
        jitter_params(&mut model, &names, noise, seed);
        restore(&mut model, &snap).unwrap();
        let after = snapshot(&model);
        prop_assert_eq!(after.checksum(), snap.checksum());
    }

    #[test]
    fn embeddings_are_unit_norm_at_any_length(t in 1usize..60, seed in 0u64..50) {
        let model = small_model(seed);
        let x = random_tensor(1, 6, t, seed + 7);
        let seq = MelFeatureSequence::new(t, 6, {
            // (batch, channels, time) -> frames row-major.
            let mut v = vec![0.0; t * 6];
            for c in 0..6 { for ti in 0..t { v[ti * 6 + c] = x.row(0, c)[ti]; } }
            v
        }).unwrap();
        let ae = model.forward(&seq, None).unwrap();
        prop_assert_eq!(ae.dim(), 6);
        prop_assert!((l2_norm(ae.as_slice()) - 1.0).abs() <= 1e-6);
        let again = model.forward(&seq, None).unwrap();
        prop_assert!(ae.as_slice().iter().zip(again.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mixing_hits_the_requested_snr(seed in any::<u64>(), snr in -10.0f64..40.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..200).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let n: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mixed = mix_at_snr(&s, &n, snr).unwrap();
        let added: Vec<f64> = mixed.iter().zip(&s).map(|(m, s)| m - s).collect();
        let achieved = 10.0 * (mean_power(&s) / mean_power(&added)).log10();
        prop_assert!((achieved - snr).abs() <= 0.01 * snr.abs().max(1.0));
    }

    #[test]
    fn synthetic_rirs_have_unit_energy(len in 1usize..32, decay in 0.1f64..10.0) {
        let h = synthetic_rir(len, decay);
        prop_assert!((h.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(h.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn unit_impulse_convolution_is_identity(t in 1usize..20, vals in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let x = features(t, 4, &vals);
        prop_assert_eq!(convolve_time(&x, &[1.0]).unwrap(), x);
    }

    #[test]
    fn expansion_multiplies_the_set(k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let noise = features(16, 4, &[0.3, -0.2, 0.5, 0.1, -0.7]);
        let aug = Augmenter::new(AugmentationConfig { expansion_factor: k, ..AugmentationConfig::default() }, vec![noise], vec![]).unwrap();
        let items: Vec<EvalItem> = (0..n)
            .map(|i| EvalItem { id: format!("u{i}"), features: features(8, 4, &[i as f64 + 1.0, 0.5]), positive: i % 2 == 0 })
            .collect();
        let out = expand_eval_set(&items, &aug, seed).unwrap();
        prop_assert_eq!(out.len(), n * k);
        let ids: BTreeSet<&str> = out.iter().map(|e| e.id.as_str()).collect();
        prop_assert_eq!(ids.len(), out.len());
        for (i, it) in items.iter().enumerate() {
            prop_assert_eq!(&out[i * k], it);
            prop_assert!(out[i * k..(i + 1) * k].iter().all(|e| e.positive == it.positive));
        }
    }

    #[test]
    fn few_shot_tasks_respect_split_hygiene(seed in 0u64..20, kw in 0usize..4, shots in 1usize..15) {
        let data = make_toy_dataset(&ToyConfig { n_keywords: 4, n_per_keyword: 32, n_noise: 8, n_frames: 8, ..ToyConfig::default() }, seed).unwrap();
        let keyword = data.manifest.keyword_inventory[kw].clone();
        let task = sample_few_shot(&data.manifest, &keyword, shots, seed).unwrap();
        let split_of = |id: &str| data.manifest.records.iter().find(|r| r.id == id).unwrap().split;
        prop_assert_eq!(task.positives.len(), shots);
        prop_assert_eq!(task.positives.iter().collect::<BTreeSet<_>>().len(), shots);
        for id in task.positives.iter().chain(&task.nontarget_pool).chain(&task.noise_pool) {
            prop_assert_eq!(split_of(id), Split::Train);
        }
        prop_assert!(task.valid_set.iter().all(|(id, _)| split_of(id) == Split::Valid));
        prop_assert!(task.test_set.iter().all(|(id, _)| split_of(id) == Split::Test));
        prop_assert!(task.valid_set.iter().any(|p| p.1) && task.test_set.iter().any(|p| p.1));
        let again = sample_few_shot(&data.manifest, &keyword, shots, seed).unwrap();
        prop_assert_eq!(again, task);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip_byte_identical(seed in any::<u64>(), tcfm in 1u8..64, head in 0usize..3) {
        let mut model = small_model(seed % 100);
        let spec = AdapterSpec {
            classifier: match head { 0 => ClassifierMode::FixedTe, 1 => ClassifierMode::LearnedFc, _ => ClassifierMode::Softmax { classes: 3 } },
            ..spec_from(0xff, 0b111, tcfm)
        };
        let te = TextEmbedding::from_unnormalized(vec![0.3, -0.1, 0.5, 0.2, 0.9, -0.4]).unwrap();
        kws_adapt::adaptation::prepare_model(&mut model, &spec, &te, Default::default()).unwrap();
        let names: BTreeSet<String> = model.store().params().iter().map(|p| p.name.clone()).collect();
        jitter_params(&mut model, &names, 0.5, seed);
        let text = TextEncoder::new(TextEncoderConfig { char_dim: 4, hidden: 8, embed_dim: 6 }, seed).unwrap().freeze();
        let extra = serde_json::json!({"seed": seed});
        let bytes = encode(&model, Some(&text), &extra).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back.acoustic, back.text.as_ref(), &back.extra).unwrap(), bytes);
        let x = random_tensor(2, 6, 9, seed);
        let cond = ConditioningContext::new(te);
        let a = model.forward_batch(&x, Some(&cond), false).unwrap();
        let b = back.acoustic.forward_batch(&x, Some(&cond), false).unwrap();
        prop_assert_eq!(&a.embeddings().data, &b.embeddings().data);
    }

    #[test]
    fn audit_partitions_bn_by_group(channels in prop::sample::select(vec![8usize, 16, 24]), d in 4usize..12) {
        let model = EncoderModel::new(EncoderConfig::compact(6, channels, 4, d), 0).unwrap();
        let mut entries: Vec<AuditEntry> = LayerGroupId::ALL
            .iter()
            .map(|&g| AuditEntry::new(g.to_string(), AdapterSpec { bn_groups: [g].into_iter().collect(), ..AdapterSpec::default() }))
            .collect();
        entries.push(AuditEntry::new("all", AdapterSpec { bn_groups: LayerGroupId::ALL.into_iter().collect(), ..AdapterSpec::default() }));
        entries.push(AuditEntry::new("full", AdapterSpec { full_finetune: true, ..AdapterSpec::default() }));
        let r = audit(&model, &entries).unwrap();
        let per_group: usize = r.rows[..7].iter().map(|row| row.tunable_params).sum();
        prop_assert_eq!(per_group, r.row("all").unwrap().tunable_params);
        prop_assert_eq!(r.row("full").unwrap().tunable_params, r.total_params);
        let listed = model.list_parameters();
        prop_assert_eq!(listed.iter().map(|p| p.numel()).sum::<usize>(), r.total_params);
        prop_assert_eq!(listed.iter().map(|p| &p.name).collect::<BTreeSet<_>>().len(), listed.len());
    }
}

#[test]
fn corrupted_snapshot_is_rejected() {
    let mut model = small_model(3);
    let mut snap = snapshot(&model);
    snap.values_mut(0)[0] += 1.0;
    let err = restore(&mut model, &snap).unwrap_err();
    assert!(matches!(err, kws_adapt::Error::Corruption { .. }), "{err}");
}

#[test]
fn snapshot_from_another_architecture_is_rejected() {
    let snap = snapshot(&small_model(3));
    let mut model = small_model(3);
    model.attach_laf(&[G4], LafInit::Uniform).unwrap();
    assert!(matches!(restore(&mut model, &snap), Err(kws_adapt::Error::IncompatibleSnapshot(_))));
}

/// Kolmogorov-Smirnov test of augmentation SNR draws against U[5, 25].
#[test]
fn snr_draws_are_uniform_over_the_range() {
    let noise = features(16, 4, &[0.3, -0.2, 0.5, 0.1, -0.7]);
    let aug = Augmenter::new(AugmentationConfig { reverb: false, ..AugmentationConfig::default() }, vec![noise], vec![]).unwrap();
    let x = features(8, 4, &[1.0, 2.0, -1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 2000;
    let mut snrs: Vec<f64> = (0..n).map(|_| aug.augment_traced(&x, &mut rng).unwrap().1.snr_db.unwrap()).collect();
    snrs.sort_by(f64::total_cmp);
    let d = snrs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = (s - 5.0) / 20.0;
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // Critical value at alpha = 0.01.
    assert!(d < 1.63 / (n as f64).sqrt(), "KS statistic {d}");
    assert!(snrs.iter().all(|s| (5.0..=25.0).contains(s)));
}

#[test]
fn independent_mode_applies_exactly_one_transform() {
    let noise = features(16, 4, &[0.3, -0.2, 0.5, 0.1, -0.7]);
    let cfg = AugmentationConfig { mode: AugmentMode::Independent, ..AugmentationConfig::default() };
    let aug = Augmenter::new(cfg, vec![noise], vec![]).unwrap();
    let x = features(8, 4, &[1.0, 2.0, -1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rir_only = 0;
    for _ in 0..400 {
        let (_, draw) = aug.augment_traced(&x, &mut rng).unwrap();
        assert!(draw.rir.is_some() != draw.snr_db.is_some());
        rir_only += draw.rir.is_some() as usize;
    }
    assert!((150..250).contains(&rir_only), "{rir_only}");
}

#[test]
fn toy_splits_are_disjoint_and_cover_every_record() {
    let data = make_toy_dataset(&ToyConfig::default(), 4).unwrap();
    let ids: BTreeSet<&str> = data.manifest.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids.len(), data.manifest.records.len());
    let counts = [Split::Train, Split::Valid, Split::Test].map(|s| data.manifest.records_in(s).count());
    assert_eq!(counts.iter().sum::<usize>(), data.manifest.records.len());
    assert!(counts.iter().all(|&c| c > 0));
    assert_eq!(data.features.len(), data.manifest.records.len());
}
