//! Toy pretraining followed by few-shot adaptation of one unseen keyword,
//! comparing frozen scoring with the text-aware adapter.
//!
//! cargo run --release -p kws-adapt-core --example toy_experiment -- [keyword] [shots]

use std::time::Instant;

use kws_adapt::data::{make_toy_dataset, sample_few_shot, toy_vocabulary, AugmentationConfig, Split, ToyConfig};
use kws_adapt::optim::OptimizerConfig;
use kws_adapt::train::{alignment_margin, pretrain_toy, run_method, BatchComposition, MethodKind, PretrainConfig, TrainConfig};

fn main() -> kws_adapt::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let keyword = args.get(1).cloned().unwrap_or_else(|| "bed".into());
    let shots: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    let data = make_toy_dataset(&ToyConfig { noise_std: 1.0, ..ToyConfig::default() }, 7)?;
    // Pretrain on other words plus the seen ones so the target stays unseen.
    let held_out = &data.manifest.keyword_inventory;
    let mut words: Vec<String> = toy_vocabulary().iter().filter(|w| !held_out.iter().any(|h| h == *w)).map(|w| w.to_string()).collect();
    words.extend(data.manifest.seen.iter().cloned());
    let corpus = make_toy_dataset(&ToyConfig { n_keywords: words.len(), keywords: Some(words), noise_std: 1.0, ..ToyConfig::default() }, 1007)?;

    let t = Instant::now();
    let (pair, log) = pretrain_toy(&corpus, &PretrainConfig { epochs: 10, ..PretrainConfig::default() })?;
    let (same, cross) = alignment_margin(&pair, &data, Split::Test)?;
    println!(
        "pretrained in {:.1}s, final loss {:.3}, cosine same/cross {same:.3}/{cross:.3}",
        t.elapsed().as_secs_f64(),
        log.losses.last().copied().unwrap_or(f64::NAN)
    );

    let train = TrainConfig {
        optimizer: OptimizerConfig { lr: 1e-3, epochs: 60, ..OptimizerConfig::default() },
        batch: BatchComposition::scaled(32)?,
        augmentation: AugmentationConfig { expansion_factor: 1, ..AugmentationConfig::default() },
        ..TrainConfig::default()
    };
    let task = sample_few_shot(&data.manifest, &keyword, shots, 0)?;
    for kind in [MethodKind::Pt, MethodKind::TaAdapter] {
        let t = Instant::now();
        let run = run_method(kind, &task, &pair, &data, &train, 0)?;
        println!(
            "{:<10} {keyword} {shots}-shot  EER {:6.2}  AP {:6.2}  ({} tunable, {:.1}s)",
            kind.name(),
            run.report.eer,
            run.report.ap,
            run.model.tunable,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
