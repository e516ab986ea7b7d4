use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::json;

use kws_adapt::adaptation::{audit, default_audit_entries};
use kws_adapt::checkpoint::{Checkpoint, ModelPair};
use kws_adapt::conditioning::{laf_normalized_profile, profile_grid};
use kws_adapt::data::{expand_eval_set, make_toy_dataset, sample_few_shot, Dataset, FewShotTask, Split};
use kws_adapt::encoder::EncoderModel;
use kws_adapt::frontend::load_audio_dataset;
use kws_adapt::metrics::{aggregate, report_csv_row, MetricsReport, REPORT_CSV_HEADER};
use kws_adapt::optim::OptimizerConfig;
use kws_adapt::text::{KeywordText, TextEmbedding};
use kws_adapt::train::{
    adapt as adapt_model, alignment_margin, build_augmenter, eval_items, pretrain_toy, run_method, score_set, AdaptedModel,
    MethodKind, TrainConfig,
};

use crate::config::{required, RunConfig};
use crate::CliError;

/// Seed of the `id`-th few-shot sampling under the run seed.
pub fn sampling_seed(seed: u64, id: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(id)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(path, text + "\n")
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [data] table; set one of data.root, data.dataset or data.toy".into()))?;
    let data = match (&d.root, &d.dataset, &d.toy) {
        (Some(root), None, None) => {
            d.frontend.validate().map_err(|e| CliError::from(e).context("data.frontend"))?;
            load_audio_dataset(root, &d.frontend).map_err(|e| CliError::from(e).context(format!("data.root = {}", root.display())))?
        }
        (None, Some(dir), None) => Dataset::load(dir).map_err(|e| CliError::from(e).context(format!("data.dataset = {}", dir.display())))?,
        (None, None, Some(toy)) => make_toy_dataset(toy, cfg.seed).map_err(|e| CliError::from(e).context("data.toy"))?,
        (None, None, None) => return Err(CliError::Config("[data] needs one of data.root, data.dataset or data.toy".into())),
        _ => return Err(CliError::Config("data.root, data.dataset and data.toy are mutually exclusive".into())),
    };
    for w in &data.manifest.warnings {
        log::warn!("{w}");
    }
    Ok(data)
}

fn check_mels(data: &Dataset, n_mels: usize, key: &str) -> Result<(), CliError> {
    if let Some(f) = data.features.values().next() {
        if f.n_mels() != n_mels {
            return Err(CliError::Config(format!("{key} is {n_mels} but the dataset has {} mel bins", f.n_mels())));
        }
    }
    Ok(())
}

fn load_pair(path: &Path, key: &str) -> Result<ModelPair, CliError> {
    ModelPair::load(path).map_err(|e| CliError::from(e).context(format!("{key} = {}", path.display())))
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut pc = cfg.pretrain.clone().unwrap_or_default();
    pc.seed = cfg.seed;
    pc.validate().map_err(|e| CliError::from(e).context("[pretrain]"))?;
    let data = load_data(cfg)?;
    check_mels(&data, pc.encoder.n_mels, "pretrain.encoder.n_mels")?;
    let (pair, log) = pretrain_toy(&data, &pc)?;
    pair.save(&out.join("pretrained.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in log.losses.iter().enumerate() {
        writeln!(csv, "{e},{l:.9}").expect("string write");
    }
    write(&out.join("pretrain_log.csv"), csv)?;
    let (same, cross) = alignment_margin(&pair, &data, Split::Test)?;
    write_json(&out.join("alignment.json"), &json!({"same_keyword_cosine": same, "cross_keyword_cosine": cross}))?;
    log::info!("pretrained {} epochs, final loss {:.4}, test alignment {same:.3} vs {cross:.3}", pc.epochs, log.losses.last().unwrap_or(&f64::NAN));
    Ok(())
}

fn parse_method(name: &str, key: &str) -> Result<MethodKind, CliError> {
    MethodKind::from_str(name).map_err(|e| CliError::from(e).context(key))
}

pub fn adapt(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ac = RunConfig::section(&cfg.adapt, "adapt")?;
    let ckpt = required(&ac.checkpoint, "adapt.checkpoint")?;
    let keyword = required(&ac.keyword, "adapt.keyword")?;
    let method = ac.method.as_deref().map(|m| parse_method(m, "adapt.method")).transpose()?;
    let spec = method.map(MethodKind::spec).unwrap_or_else(|| ac.spec.clone());
    spec.validate().map_err(|e| CliError::from(e).context("adapt.spec"))?;
    let mut train = TrainConfig { seed: cfg.seed, ..ac.train.clone() };
    if method == Some(MethodKind::Pt) {
        train.optimizer = OptimizerConfig { epochs: 0, ..train.optimizer };
    }
    train.validate().map_err(|e| CliError::from(e).context("adapt.train"))?;

    let data = load_data(cfg)?;
    let pair = load_pair(ckpt, "adapt.checkpoint")?;
    check_mels(&data, pair.acoustic.config().n_mels, "the checkpoint's n_mels")?;
    let seed = sampling_seed(cfg.seed, ac.sampling_id);
    let task = sample_few_shot(&data.manifest, keyword, ac.shots, seed)?;
    let (model, log) = adapt_model(&pair, &data, &task, &spec, &train)?;

    let named = method.or_else(|| MethodKind::ALL.iter().copied().find(|m| m.spec() == spec));
    let label = named.map(|m| m.name().to_string()).unwrap_or_else(|| spec.to_string());
    let mut ck = model.to_checkpoint();
    if let Some(extra) = ck.extra.as_object_mut() {
        extra.insert("method".into(), json!(label));
        extra.insert("shots".into(), json!(ac.shots));
        extra.insert("sampling_id".into(), json!(ac.sampling_id));
        extra.insert("sampling_seed".into(), json!(seed));
    }
    ck.save(&out.join("adapted.ckpt"))?;
    write(&out.join("train_log.csv"), log.to_csv())?;
    write_json(&out.join("task.json"), &task)?;
    match log.best_epoch {
        Some(e) => log::info!("{label} on `{keyword}`: {} tunable parameters, best valid AP {:.2} at epoch {e}", model.tunable, log.rows[e].valid_ap),
        None => log::info!("{label} on `{keyword}`: no training epochs, pretrained encoder kept"),
    }
    Ok(())
}

fn extra_u64(ck: &Checkpoint, key: &str, path: &Path) -> Result<u64, CliError> {
    ck.extra
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CliError::Data(format!("{} is not an adapted checkpoint (no `{key}`)", path.display())))
}

fn test_report(
    model: &AdaptedModel,
    data: &Dataset,
    task: &FewShotTask,
    method: &str,
    sampling_id: usize,
    expand: Option<&TrainConfig>,
) -> Result<MetricsReport, CliError> {
    let mut items = eval_items(data, &task.test_set)?;
    if let Some(tc) = expand {
        let aug = build_augmenter(&tc.augmentation, data, task)?;
        items = expand_eval_set(&items, &aug, tc.seed ^ task.sampling_seed)?;
    }
    let chunk = expand.map(|t| t.eval_chunk).unwrap_or(64);
    let set = score_set(&model.acoustic, &model.te, &model.keyword, &items, chunk)?;
    Ok(MetricsReport::from_scores(&set, method, task.shots, sampling_id)?)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ec = RunConfig::section(&cfg.eval, "eval")?;
    if ec.checkpoints.is_empty() {
        return Err(CliError::Config("eval.checkpoints is empty".into()));
    }
    let data = load_data(cfg)?;
    let expand = TrainConfig { seed: cfg.seed, eval_chunk: ec.eval_chunk.unwrap_or(64), ..TrainConfig::default() };
    let mut reports = Vec::new();
    for path in &ec.checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| CliError::from(e).context(format!("eval.checkpoints: {}", path.display())))?;
        let shots = extra_u64(&ck, "shots", path)? as usize;
        let sampling_id = extra_u64(&ck, "sampling_id", path)? as usize;
        let seed = extra_u64(&ck, "sampling_seed", path)?;
        let method = ck.extra.get("method").and_then(|m| m.as_str()).unwrap_or("ADAPTED").to_string();
        let model = AdaptedModel::from_checkpoint(ck)?;
        let task = sample_few_shot(&data.manifest, model.keyword.as_str(), shots, seed)?;
        reports.push(test_report(&model, &data, &task, &method, sampling_id, ec.expand_test_set.then_some(&expand))?);
    }
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for r in &reports {
        csv.push_str(&report_csv_row(r));
        csv.push('\n');
    }
    write(&out.join("metrics.csv"), csv)?;

    // One mean row per (keyword, shots, method); sampling_id holds the count.
    let mut groups: BTreeMap<(String, usize, String), Vec<MetricsReport>> = BTreeMap::new();
    for r in &reports {
        groups.entry((r.keyword.to_string(), r.shots, r.method.clone())).or_default().push(r.clone());
    }
    let mut summary = format!("{REPORT_CSV_HEADER}\n");
    let mut agg = Vec::new();
    for rs in groups.values() {
        let a = aggregate(rs)?;
        summary.push_str(&report_csv_row(&a));
        summary.push('\n');
        agg.push(a);
    }
    write(&out.join("metrics_summary.csv"), summary)?;
    write_json(&out.join("metrics.json"), &json!({"reports": reports, "aggregates": agg}))?;
    for a in &agg {
        log::info!("{} {}-shot {}: EER {:.2} AP {:.2} over {} samplings", a.keyword, a.shots, a.method, a.eer, a.ap, a.sampling_id);
    }
    Ok(())
}

pub fn param_audit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ac = cfg.audit.clone().unwrap_or_default();
    ac.encoder.validate().map_err(|e| CliError::from(e).context("audit.encoder"))?;
    let entries = ac.entries.clone().unwrap_or_else(default_audit_entries);
    for e in &entries {
        e.spec.validate().map_err(|err| CliError::from(err).context(format!("audit entry `{}`", e.label)))?;
    }
    let model = EncoderModel::new(ac.encoder, cfg.seed)?;
    let report = audit(&model, &entries)?;
    write(&out.join("audit.csv"), report.to_csv())?;
    write_json(&out.join("audit.json"), &report)?;
    log::info!("audited {} selectors over {} parameters", report.rows.len(), report.total_params);
    Ok(())
}

fn profile_rows(csv: &mut String, model: &EncoderModel, te: &TextEmbedding, keyword: &str, groups: &[kws_adapt::params::LayerGroupId], grid: &[f64]) -> Result<(), CliError> {
    for &g in groups {
        let sites = model.sites_in(g);
        let lafs: Vec<_> = sites.iter().filter_map(|&i| model.sites()[i].laf.as_ref()).collect();
        if lafs.is_empty() {
            return Err(CliError::Config(format!("no learnable activations at {g} for `{keyword}` (plot_laf.groups)")));
        }
        for (k, laf) in lafs.iter().enumerate() {
            let s = laf.weights(model.store(), te.as_slice())?;
            for (h, y) in laf_normalized_profile(&s, model.basis(), grid)? {
                writeln!(csv, "{keyword},{g},{k},{h:.4},{y:.9}").expect("string write");
            }
        }
    }
    Ok(())
}

pub fn plot_laf(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let pc = RunConfig::section(&cfg.plot_laf, "plot_laf")?;
    if pc.grid_points == 0 {
        return Err(CliError::Config("plot_laf.grid_points must be positive".into()));
    }
    if pc.checkpoints.is_empty() == pc.pretrained.is_none() {
        return Err(CliError::Config("set exactly one of plot_laf.checkpoints or plot_laf.pretrained".into()));
    }
    let grid = profile_grid(pc.grid_points);
    let mut csv = String::from("keyword,group,site,h,y\n");
    for path in &pc.checkpoints {
        let ck = Checkpoint::load(path).map_err(|e| CliError::from(e).context(format!("plot_laf.checkpoints: {}", path.display())))?;
        let m = AdaptedModel::from_checkpoint(ck)?;
        profile_rows(&mut csv, &m.acoustic, &m.te, m.keyword.as_str(), &pc.groups, &grid)?;
    }
    if let Some(path) = &pc.pretrained {
        if pc.keywords.is_empty() {
            return Err(CliError::Config("plot_laf.keywords is empty".into()));
        }
        let pair = load_pair(path, "plot_laf.pretrained")?;
        let mut model = pair.acoustic.clone();
        model.attach_laf(&pc.groups, pc.laf_init).map_err(|e| CliError::from(e).context("plot_laf.groups"))?;
        for kw in &pc.keywords {
            let text = KeywordText::new(kw).map_err(|e| CliError::from(e).context("plot_laf.keywords"))?;
            profile_rows(&mut csv, &model, &pair.text.encode(&text), text.as_str(), &pc.groups, &grid)?;
        }
    }
    write(&out.join("laf_profiles.csv"), csv)?;
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ab = RunConfig::section(&cfg.ablate, "ablate")?;
    let ckpt = required(&ab.checkpoint, "ablate.checkpoint")?;
    let methods: Vec<MethodKind> = ab.methods.iter().map(|m| parse_method(m, "ablate.methods")).collect::<Result<_, _>>()?;
    if methods.is_empty() || ab.shots.is_empty() || ab.samplings == 0 {
        return Err(CliError::Config("ablate.methods, ablate.shots and ablate.samplings must be non-empty".into()));
    }
    let train = TrainConfig { seed: cfg.seed, ..ab.train.clone() };
    train.validate().map_err(|e| CliError::from(e).context("ablate.train"))?;

    let data = load_data(cfg)?;
    let pair = load_pair(ckpt, "ablate.checkpoint")?;
    let keywords = if ab.keywords.is_empty() { data.manifest.unseen.clone() } else { ab.keywords.clone() };
    if keywords.is_empty() {
        return Err(CliError::Data("the dataset has no unseen keywords; set ablate.keywords".into()));
    }
    let mut jobs = Vec::new();
    for &m in &methods {
        for &shots in &ab.shots {
            for kw in &keywords {
                for s in 0..ab.samplings {
                    jobs.push((m, shots, kw.clone(), s));
                }
            }
        }
    }
    // Tasks are drawn up front so data errors surface before any training.
    let tasks: Vec<FewShotTask> = jobs
        .iter()
        .map(|(_, shots, kw, s)| sample_few_shot(&data.manifest, kw, *shots, sampling_seed(cfg.seed, *s)))
        .collect::<Result<_, _>>()?;
    log::info!("running {} adaptations", jobs.len());
    let reports: Vec<MetricsReport> = jobs
        .par_iter()
        .zip(&tasks)
        .map(|((m, _, _, s), task)| run_method(*m, task, &pair, &data, &train, *s as usize).map(|r| r.report))
        .collect::<Result<_, _>>()?;

    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    let mut summary: BTreeMap<(usize, usize), (String, Vec<&MetricsReport>)> = BTreeMap::new();
    for ((m, shots, _, _), r) in jobs.iter().zip(&reports) {
        csv.push_str(&report_csv_row(r));
        csv.push('\n');
        let idx = methods.iter().position(|x| x == m).expect("listed");
        summary.entry((idx, *shots)).or_insert_with(|| (m.name().to_string(), Vec::new())).1.push(r);
    }
    write(&out.join("ablation.csv"), csv)?;
    let mut s = String::from("method,shots,runs,eer,ap\n");
    for ((_, shots), (name, rs)) in &summary {
        let n = rs.len() as f64;
        let eer = rs.iter().map(|r| r.eer).sum::<f64>() / n;
        let ap = rs.iter().map(|r| r.ap).sum::<f64>() / n;
        writeln!(s, "{name},{shots},{},{eer:.6},{ap:.6}", rs.len()).expect("string write");
        log::info!("{name} {shots}-shot: EER {eer:.2} AP {ap:.2} over {} runs", rs.len());
    }
    write(&out.join("ablation_summary.csv"), s)?;
    Ok(())
}

pub fn make_toy(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let toy = cfg.data.as_ref().and_then(|d| d.toy.clone()).unwrap_or_default();
    let data = make_toy_dataset(&toy, cfg.seed).map_err(|e| CliError::from(e).context("data.toy"))?;
    data.save(out)?;
    log::info!("wrote {} utterances over {} keywords to {}", data.manifest.records.len(), data.manifest.keyword_inventory.len(), out.display());
    Ok(())
}
