//! Few-shot adaptation, baseline strategies and toy contrastive pretraining.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{prepare_model, AdapterSpec, AttachOptions, ClassifierMode, ConditioningMode, TrainablePlan};
use crate::checkpoint::{Checkpoint, ModelPair};
use crate::data::{draw_rng, expand_eval_set, AugmentationConfig, Augmenter, Dataset, EvalItem, FewShotTask, Label, Split};
use crate::encoder::{batch_features, ConditioningContext, EncoderConfig, EncoderModel, LafInit, MelFeatureSequence};
use crate::error::{Error, Result};
use crate::head::HeadInit;
use crate::metrics::{bce_with_logit, compute_ap, MetricsReport, ScoreMode, ScoreSet};
use crate::optim::{AdamW, OptimizerConfig};
use crate::params::{Gradients, LayerGroupId};
use crate::tensor::{dot, sigmoid, softmax, Tensor3};
use crate::text::{KeywordText, TextEmbedding, TextEncoder, TextEncoderConfig};

/// Reference mini-batch: 128 target, 96 non-target and 32 noise utterances.
pub const REFERENCE_RATIO: [usize; 3] = [128, 96, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchComposition {
    pub total: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub n_noise: usize,
}

impl Default for BatchComposition {
    fn default() -> Self {
        Self::scaled(256).expect("reference composition")
    }
}

impl BatchComposition {
    pub fn new(n_target: usize, n_nontarget: usize, n_noise: usize) -> Result<Self> {
        let c = Self { total: n_target + n_nontarget + n_noise, n_target, n_nontarget, n_noise };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::Config("a batch needs at least one target utterance".into()));
        }
        if self.n_target + self.n_nontarget + self.n_noise != self.total {
            return Err(Error::Config(format!(
                "batch counts {} + {} + {} do not add up to total {}",
                self.n_target, self.n_nontarget, self.n_noise, self.total
            )));
        }
        Ok(())
    }

    /// Splits `total` in the reference ratio by largest-remainder rounding.
    pub fn scaled(total: usize) -> Result<Self> {
        Self::with_ratio(total, REFERENCE_RATIO)
    }

    /// Largest-remainder apportionment; remainders tie in target, non-target,
    /// noise order.
    pub fn with_ratio(total: usize, ratio: [usize; 3]) -> Result<Self> {
        let sum: usize = ratio.iter().sum();
        if sum == 0 {
            return Err(Error::Config("batch ratio must not be all zeros".into()));
        }
        let mut counts: Vec<usize> = ratio.iter().map(|r| total * r / sum).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(total * ratio[i] % sum));
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        let c = Self { total, n_target: counts[0], n_nontarget: counts[1], n_noise: counts[2] };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    NonTarget,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub role: Role,
    pub features: MelFeatureSequence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |r| self.items.iter().filter(|i| i.role == r).count();
        (n(Role::Target), n(Role::NonTarget), n(Role::Noise))
    }

    pub fn roles(&self) -> Vec<Role> {
        self.items.iter().map(|i| i.role).collect()
    }

    /// Stacks the batch; shorter sequences are padded by repeating their
    /// last frame.
    pub fn tensor(&self) -> Result<Tensor3> {
        let t = self.items.iter().map(|i| i.features.n_frames()).max().unwrap_or(0);
        let padded: Vec<MelFeatureSequence> = self.items.iter().map(|i| pad_frames(&i.features, t)).collect::<Result<_>>()?;
        batch_features(&padded.iter().collect::<Vec<_>>())
    }
}

fn pad_frames(x: &MelFeatureSequence, t: usize) -> Result<MelFeatureSequence> {
    if x.n_frames() >= t {
        return Ok(x.clone());
    }
    let mut frames = x.frames().to_vec();
    let last = x.frame(x.n_frames() - 1).to_vec();
    for _ in x.n_frames()..t {
        frames.extend_from_slice(&last);
    }
    MelFeatureSequence::new(t, x.n_mels(), frames)
}

/// Draws one batch. Few-shot positives are resampled with replacement to
/// fill the target slots; target and non-target utterances are augmented,
/// noise utterances are used as recorded.
pub fn compose_batch<R: Rng>(
    task: &FewShotTask,
    data: &Dataset,
    comp: &BatchComposition,
    aug: &Augmenter,
    rng: &mut R,
) -> Result<Batch> {
    comp.validate()?;
    if task.positives.is_empty() {
        return Err(Error::Data(format!("no positive utterances for {}", task.keyword)));
    }
    if comp.n_nontarget > 0 && task.nontarget_pool.is_empty() {
        return Err(Error::Data(format!("non-target pool for {} is empty", task.keyword)));
    }
    if comp.n_noise > 0 && task.noise_pool.is_empty() {
        return Err(Error::Data(format!("noise pool for {} is empty", task.keyword)));
    }
    let mut items = Vec::with_capacity(comp.total);
    let mut draw = |pool: &[String], role: Role, n: usize, augment: bool, rng: &mut R| -> Result<()> {
        for _ in 0..n {
            let id = pool.choose(rng).expect("non-empty pool").clone();
            let src = data.features_of(&id)?;
            let features = if augment { aug.augment(src, rng)? } else { src.clone() };
            items.push(BatchItem { id, role, features });
        }
        Ok(())
    };
    draw(&task.positives, Role::Target, comp.n_target, true, rng)?;
    draw(&task.nontarget_pool, Role::NonTarget, comp.n_nontarget, true, rng)?;
    draw(&task.noise_pool, Role::Noise, comp.n_noise, false, rng)?;
    Ok(Batch { items })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch: BatchComposition,
    /// Composed batches per epoch.
    pub batches_per_epoch: usize,
    pub augmentation: AugmentationConfig,
    /// Redraw batches and augmentation every epoch; otherwise every epoch
    /// sees the same batches.
    pub redraw_each_epoch: bool,
    pub laf_init: LafInit,
    pub head_init: HeadInit,
    /// Enlarge the test set by the augmentation expansion factor.
    pub expand_test_set: bool,
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch: BatchComposition::default(),
            batches_per_epoch: 4,
            augmentation: AugmentationConfig::default(),
            redraw_each_epoch: true,
            laf_init: LafInit::default(),
            head_init: HeadInit::FromTextEmbedding,
            expand_test_set: false,
            eval_chunk: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.batch.validate()?;
        self.augmentation.validate()?;
        if self.batches_per_epoch == 0 {
            return Err(Error::Config("batches_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub valid_ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub best_epoch: Option<usize>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,lr,valid_ap";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{:.9},{:e},{:.6}\n", r.epoch, r.loss, r.lr, r.valid_ap));
        }
        s
    }
}

/// An encoder adapted to one keyword.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub acoustic: EncoderModel,
    pub keyword: KeywordText,
    pub te: TextEmbedding,
    pub spec: AdapterSpec,
    pub tunable: usize,
}

impl AdaptedModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            acoustic: self.acoustic.clone(),
            text: None,
            extra: serde_json::json!({
                "keyword": self.keyword.as_str(),
                "te": self.te.as_slice(),
                "spec": self.spec,
                "tunable": self.tunable,
            }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let field = |k: &str| ck.extra.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        let keyword: KeywordText = serde_json::from_value(field("keyword")?)?;
        // Stored bitwise; renormalizing would perturb the last bits.
        let te: TextEmbedding = serde_json::from_value(field("te")?)?;
        if (crate::tensor::l2_norm(te.as_slice()) - 1.0).abs() > 1e-6 {
            return Err(Error::Format("checkpoint text embedding is not unit-norm".into()));
        }
        let spec: AdapterSpec = serde_json::from_value(field("spec")?)?;
        let tunable: usize = serde_json::from_value(field("tunable")?)?;
        Ok(Self { acoustic: ck.acoustic, keyword, te, spec, tunable })
    }

    pub fn score(&self, items: &[&MelFeatureSequence], chunk: usize) -> Result<Vec<f64>> {
        score_utterances(&self.acoustic, &self.te, items, chunk)
    }
}

/// Detection probabilities for `items`. Without a head the score is
/// sigmoid(te . ae); a one-output head gives sigmoid(logit); a softmax head
/// gives the target-class probability.
pub fn score_utterances(model: &EncoderModel, te: &TextEmbedding, items: &[&MelFeatureSequence], chunk: usize) -> Result<Vec<f64>> {
    let cond = ConditioningContext::new(te.clone());
    let mut out = Vec::with_capacity(items.len());
    let mut start = 0;
    while start < items.len() {
        let t = items[start].n_frames();
        let mut end = start + 1;
        while end < items.len() && end - start < chunk.max(1) && items[end].n_frames() == t {
            end += 1;
        }
        let x = batch_features(&items[start..end])?;
        let trace = model.forward_batch(&x, Some(&cond), false)?;
        out.extend(scores_from_embeddings(model, trace.embeddings(), te));
        start = end;
    }
    Ok(out)
}

fn scores_from_embeddings(model: &EncoderModel, emb: &Tensor3, te: &TextEmbedding) -> Vec<f64> {
    match model.head() {
        None => (0..emb.batch).map(|b| sigmoid(dot(emb.sample(b), te.as_slice()))).collect(),
        Some(h) => h
            .logits(model.store(), emb)
            .into_iter()
            .map(|l| if h.classes == 1 { sigmoid(l[0]) } else { softmax(&l)[0] })
            .collect(),
    }
}

fn target_class(role: Role, classes: usize) -> usize {
    match role {
        Role::Target => 0,
        Role::NonTarget => 1,
        Role::Noise => 2.min(classes - 1),
    }
}

/// Mean batch loss and dL/d(embedding); head gradients go into `grads`.
fn classifier_loss(model: &EncoderModel, emb: &Tensor3, te: &TextEmbedding, roles: &[Role], grads: &mut Gradients) -> (f64, Tensor3) {
    let n = roles.len() as f64;
    match model.head() {
        None => {
            let mut d = emb.same_shape();
            let mut loss = 0.0;
            for (b, role) in roles.iter().enumerate() {
                let (l, g) = bce_with_logit(dot(emb.sample(b), te.as_slice()), *role == Role::Target);
                loss += l;
                for (o, t) in d.sample_mut(b).iter_mut().zip(te.as_slice()) {
                    *o = g / n * t;
                }
            }
            (loss / n, d)
        }
        Some(h) => {
            let logits = h.logits(model.store(), emb);
            let mut loss = 0.0;
            let d_logits: Vec<Vec<f64>> = logits
                .iter()
                .zip(roles)
                .map(|(l, role)| {
                    if h.classes == 1 {
                        let (li, g) = bce_with_logit(l[0], *role == Role::Target);
                        loss += li;
                        vec![g / n]
                    } else {
                        let p = softmax(l);
                        let y = target_class(*role, h.classes);
                        loss += -p[y].max(1e-300).ln();
                        p.iter().enumerate().map(|(k, pk)| (pk - if k == y { 1.0 } else { 0.0 }) / n).collect()
                    }
                })
                .collect();
            let d = h.clone().backward(model.store(), emb, &d_logits, grads);
            (loss / n, d)
        }
    }
}

/// Labeled utterances of a task split.
pub fn eval_items(data: &Dataset, set: &[(String, bool)]) -> Result<Vec<EvalItem>> {
    set.iter()
        .map(|(id, positive)| Ok(EvalItem { id: id.clone(), features: data.features_of(id)?.clone(), positive: *positive }))
        .collect()
}

pub fn score_set(model: &EncoderModel, te: &TextEmbedding, keyword: &KeywordText, items: &[EvalItem], chunk: usize) -> Result<ScoreSet> {
    let feats: Vec<&MelFeatureSequence> = items.iter().map(|i| &i.features).collect();
    let scores = score_utterances(model, te, &feats, chunk)?;
    Ok(ScoreSet::from_pairs(keyword.clone(), ScoreMode::Probability, scores.into_iter().zip(items.iter().map(|i| i.positive))))
}

fn noise_features(data: &Dataset, task: &FewShotTask) -> Result<Vec<MelFeatureSequence>> {
    task.noise_pool.iter().map(|id| data.features_of(id).cloned()).collect()
}

pub fn build_augmenter(cfg: &AugmentationConfig, data: &Dataset, task: &FewShotTask) -> Result<Augmenter> {
    let pool = if cfg.add_noise { noise_features(data, task)? } else { Vec::new() };
    Augmenter::new(cfg.clone(), pool, Vec::new())
}

fn check_frozen(before: &EncoderModel, after: &EncoderModel, plan: &TrainablePlan) -> Result<()> {
    for p in before.store().params() {
        if plan.contains(&p.name) {
            continue;
        }
        let id = after.store().id_of(&p.name).expect("attachments only add parameters");
        if after.store().value(id).iter().zip(&p.value).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Frozen(format!("frozen parameter {} changed during adaptation", p.name)));
        }
    }
    Ok(())
}

/// Fine-tunes the parameters selected by `spec` on one few-shot task with
/// BCE (or softmax cross-entropy for multi-class heads). The epoch with the
/// highest validation AP is returned, ties going to the earliest. With zero
/// epochs the pretrained encoder is returned unchanged.
pub fn adapt(pretrained: &ModelPair, data: &Dataset, task: &FewShotTask, spec: &AdapterSpec, cfg: &TrainConfig) -> Result<(AdaptedModel, TrainLog)> {
    cfg.validate()?;
    spec.validate()?;
    let te = pretrained.text.encode(&task.keyword);
    if cfg.optimizer.epochs == 0 {
        let plan = crate::adaptation::select_trainable(&pretrained.acoustic, spec)?;
        let m = AdaptedModel { acoustic: pretrained.acoustic.clone(), keyword: task.keyword.clone(), te, spec: spec.clone(), tunable: plan.tunable };
        return Ok((m, TrainLog::default()));
    }
    let mut model = pretrained.acoustic.clone();
    let opts = AttachOptions { laf_init: cfg.laf_init, head_init: cfg.head_init, seed: cfg.seed };
    let plan = prepare_model(&mut model, spec, &te, opts)?;
    let attached = model.clone();
    let cond = ConditioningContext::new(te.clone());
    let aug = build_augmenter(&cfg.augmentation, data, task)?;
    let valid = eval_items(data, &task.valid_set)?;

    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut grads = Gradients::masked(model.store(), |p| plan.contains(&p.name));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, EncoderModel)> = None;
    for epoch in 0..cfg.optimizer.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let draw = if cfg.redraw_each_epoch { epoch * cfg.batches_per_epoch + b } else { b };
            let mut rng = draw_rng(cfg.seed, &format!("batch/{}/{}", task.keyword, task.sampling_seed), draw as u64);
            let batch = compose_batch(task, data, &cfg.batch, &aug, &mut rng)?;
            let x = batch.tensor()?;
            let trace = model.forward_batch(&x, Some(&cond), true)?;
            grads.zero();
            let (loss, d_emb) = classifier_loss(&model, trace.embeddings(), &te, &batch.roles(), &mut grads);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, lr, detail: format!("loss is {loss} at batch {b}") });
            }
            if grads.any() {
                model.backward(&trace, &d_emb, &mut grads);
            }
            if !grads.all_finite() {
                return Err(Error::Divergence { epoch, lr, detail: format!("non-finite gradient at batch {b}") });
            }
            opt.step(model.store_mut(), &grads, lr);
            model.commit_running_stats(&trace);
            epoch_loss += loss;
        }
        let set = score_set(&model, &te, &task.keyword, &valid, cfg.eval_chunk)?;
        let valid_ap = compute_ap(&set)?;
        log.rows.push(TrainLogRow { epoch, loss: epoch_loss / cfg.batches_per_epoch as f64, lr, valid_ap });
        if best.as_ref().is_none_or(|(ap, _)| valid_ap > *ap) {
            best = Some((valid_ap, model.clone()));
            log.best_epoch = Some(epoch);
        }
    }
    let (_, model) = best.expect("at least one epoch");
    check_frozen(&attached, &model, &plan)?;
    Ok((AdaptedModel { acoustic: model, keyword: task.keyword.clone(), te, spec: spec.clone(), tunable: plan.tunable }, log))
}

/// Detection strategies compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MethodKind {
    /// Frozen pretrained encoder scored against the text embedding.
    Pt,
    TaAdapter,
    FtFull,
    FtClf,
    TwoClassClf,
    ThreeClassClf,
    KamAdain,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Pt,
        MethodKind::TaAdapter,
        MethodKind::FtFull,
        MethodKind::FtClf,
        MethodKind::TwoClassClf,
        MethodKind::ThreeClassClf,
        MethodKind::KamAdain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Pt => "PT",
            MethodKind::TaAdapter => "TA_ADAPTER",
            MethodKind::FtFull => "FT_FULL",
            MethodKind::FtClf => "FT_CLF",
            MethodKind::TwoClassClf => "TWO_CLASS_CLF",
            MethodKind::ThreeClassClf => "THREE_CLASS_CLF",
            MethodKind::KamAdain => "KAM_ADAIN",
        }
    }

    pub fn spec(self) -> AdapterSpec {
        let full = AdapterSpec { full_finetune: true, ..AdapterSpec::default() };
        match self {
            MethodKind::Pt => AdapterSpec::default(),
            MethodKind::TaAdapter => AdapterSpec::ta_adapter(),
            MethodKind::FtFull => AdapterSpec { classifier: ClassifierMode::LearnedFc, ..full },
            MethodKind::FtClf => AdapterSpec { classifier: ClassifierMode::LearnedFc, ..AdapterSpec::default() },
            MethodKind::TwoClassClf => AdapterSpec { classifier: ClassifierMode::Softmax { classes: 2 }, ..full },
            MethodKind::ThreeClassClf => AdapterSpec { classifier: ClassifierMode::Softmax { classes: 3 }, ..full },
            MethodKind::KamAdain => AdapterSpec { conditioning: ConditioningMode::AdainKam, ..full },
        }
    }

    pub fn trains(self) -> bool {
        self != MethodKind::Pt
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Outcome of one method on one task.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub kind: MethodKind,
    pub report: MetricsReport,
    pub log: TrainLog,
    pub model: AdaptedModel,
}

/// Adapts with the method's fixed spec and reports test-set metrics.
pub fn run_method(kind: MethodKind, task: &FewShotTask, pretrained: &ModelPair, data: &Dataset, cfg: &TrainConfig, sampling_id: usize) -> Result<MethodRun> {
    let spec = kind.spec();
    let (model, log) = if kind.trains() {
        adapt(pretrained, data, task, &spec, cfg)?
    } else {
        let no_train = TrainConfig { optimizer: OptimizerConfig { epochs: 0, ..cfg.optimizer.clone() }, ..cfg.clone() };
        adapt(pretrained, data, task, &spec, &no_train)?
    };
    let mut test = eval_items(data, &task.test_set)?;
    if cfg.expand_test_set {
        let aug = build_augmenter(&cfg.augmentation, data, task)?;
        test = expand_eval_set(&test, &aug, cfg.seed ^ task.sampling_seed)?;
    }
    let set = score_set(&model.acoustic, &model.te, &task.keyword, &test, cfg.eval_chunk)?;
    let report = MetricsReport::from_scores(&set, kind.name(), task.shots, sampling_id)?;
    Ok(MethodRun { kind, report, log, model })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub text: TextEncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Restricts pretraining to these keywords; all keywords when absent.
    pub keywords: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::compact(20, 32, 4, 32),
            text: TextEncoderConfig { char_dim: 16, hidden: 32, embed_dim: 32 },
            epochs: 20,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-5,
            temperature: 0.1,
            keywords: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.text.validate()?;
        if self.text.embed_dim != self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "text embed_dim {} differs from acoustic embed_dim {}",
                self.text.embed_dim, self.encoder.embed_dim
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretraining batch_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("pretraining lr and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch pretraining loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub losses: Vec<f64>,
}

/// Symmetric contrastive alignment of acoustic and text embeddings.
///
/// For a batch of utterances and the text embeddings of all keywords, with
/// `z_ik = ae_i . te_k / temperature`:
/// audio-to-text is cross-entropy of each utterance over keywords, and
/// text-to-audio is, for each keyword present in the batch, cross-entropy
/// over utterances averaged across its positives. The loss is the mean of
/// both directions. Noise utterances are not used.
pub fn pretrain_toy(data: &Dataset, cfg: &PretrainConfig) -> Result<(ModelPair, PretrainLog)> {
    cfg.validate()?;
    let mut keywords: Vec<String> = data.manifest.keyword_inventory.clone();
    if let Some(k) = &cfg.keywords {
        if let Some(missing) = k.iter().find(|k| !keywords.contains(k)) {
            return Err(Error::Pretrain(format!("keyword {missing} is not in the dataset")));
        }
        keywords = k.clone();
    }
    let mut by_kw: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for r in data.manifest.records_in(Split::Train) {
        if let Label::Keyword(k) = &r.label {
            if let Some(i) = keywords.iter().position(|x| x == k) {
                by_kw.entry(i).or_default().push(&r.id);
            }
        }
    }
    if by_kw.len() < 2 {
        return Err(Error::Pretrain(format!("pretraining needs at least 2 keywords with training data, found {}", by_kw.len())));
    }
    let pool: Vec<(usize, &str)> = by_kw.iter().flat_map(|(k, ids)| ids.iter().map(move |id| (*k, *id))).collect();
    let texts: Vec<KeywordText> = keywords.iter().map(|k| KeywordText::new(k)).collect::<Result<_>>()?;

    let mut acoustic = EncoderModel::new(cfg.encoder.clone(), cfg.seed)?;
    acoustic.set_bn_training(|_, _| true);
    let mut text = TextEncoder::new(cfg.text.clone(), cfg.seed.wrapping_add(1))?;
    let ocfg = OptimizerConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..OptimizerConfig::default() };
    let mut opt_a = AdamW::new(ocfg.clone());
    let mut opt_t = AdamW::new(ocfg);
    let mut ga = Gradients::for_all(acoustic.store());
    let mut gt = Gradients::for_all(text.store());
    let tau = cfg.temperature;
    let steps = pool.len().div_ceil(cfg.batch_size);
    let mut log = PretrainLog::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut draw_rng(cfg.seed, "pretrain/order", epoch as u64));
        let mut total = 0.0;
        for step in 0..steps {
            let idx = &order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(order.len())];
            if idx.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| pool[i].0).collect();
            let feats: Vec<&MelFeatureSequence> = idx.iter().map(|&i| data.features_of(pool[i].1)).collect::<Result<_>>()?;
            let x = batch_features(&feats)?;
            let trace = acoustic.forward_batch(&x, None, true)?;
            let ttraces: Vec<_> = texts.iter().map(|t| text.forward_trace(t)).collect();
            let tes: Vec<Vec<f64>> = ttraces.iter().map(|t| TextEncoder::embedding_of(t).as_slice().to_vec()).collect();
            let emb = trace.embeddings();
            let (b, k) = (idx.len(), tes.len());
            let z: Vec<Vec<f64>> = (0..b).map(|i| tes.iter().map(|t| dot(emb.sample(i), t) / tau).collect()).collect();
            // dL/dz accumulated from both directions.
            let mut dz = vec![vec![0.0; k]; b];
            let mut loss_a = 0.0;
            for i in 0..b {
                let p = softmax(&z[i]);
                loss_a -= p[labels[i]].max(1e-300).ln();
                for j in 0..k {
                    dz[i][j] += 0.5 * (p[j] - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
                }
            }
            let present: Vec<usize> = (0..k).filter(|j| labels.contains(j)).collect();
            let mut loss_t = 0.0;
            for &j in &present {
                let col: Vec<f64> = (0..b).map(|i| z[i][j]).collect();
                let q = softmax(&col);
                let pos: Vec<usize> = (0..b).filter(|&i| labels[i] == j).collect();
                let np = pos.len() as f64;
                for &i in &pos {
                    loss_t -= q[i].max(1e-300).ln() / np;
                }
                // d/dz_ij of -(1/|P|) sum_{i in P} log q_i = q_i - [i in P]/|P|
                for i in 0..b {
                    let y = if labels[i] == j { 1.0 / np } else { 0.0 };
                    dz[i][j] += 0.5 * (q[i] - y) / present.len() as f64;
                }
            }
            let loss = 0.5 * (loss_a / b as f64 + loss_t / present.len() as f64);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, lr: cfg.lr, detail: format!("pretraining loss is {loss}") });
            }
            let mut d_emb = emb.same_shape();
            let mut d_te = vec![vec![0.0; cfg.encoder.embed_dim]; k];
            for i in 0..b {
                for j in 0..k {
                    let g = dz[i][j] / tau;
                    if g == 0.0 {
                        continue;
                    }
                    for (o, t) in d_emb.sample_mut(i).iter_mut().zip(&tes[j]) {
                        *o += g * t;
                    }
                    for (o, e) in d_te[j].iter_mut().zip(emb.sample(i)) {
                        *o += g * e;
                    }
                }
            }
            ga.zero();
            gt.zero();
            acoustic.backward(&trace, &d_emb, &mut ga);
            for (tt, d) in ttraces.iter().zip(&d_te) {
                text.backward(tt, d, &mut gt);
            }
            if !ga.all_finite() || !gt.all_finite() {
                return Err(Error::Divergence { epoch, lr: cfg.lr, detail: "non-finite pretraining gradient".into() });
            }
            opt_a.step(acoustic.store_mut(), &ga, cfg.lr);
            opt_t.step(text.store_mut(), &gt, cfg.lr);
            acoustic.commit_running_stats(&trace);
            total += loss;
        }
        log.losses.push(total / steps as f64);
    }
    acoustic.set_bn_training(|_, _| false);
    Ok((ModelPair { acoustic, text: text.freeze() }, log))
}

/// Mean same-keyword and cross-keyword cosine between acoustic embeddings of
/// `split` utterances and the keywords' text embeddings.
pub fn alignment_margin(pair: &ModelPair, data: &Dataset, split: Split) -> Result<(f64, f64)> {
    let recs: Vec<_> = data.manifest.records_in(split).filter(|r| r.label.keyword().is_some()).collect();
    let feats: Vec<&MelFeatureSequence> = recs.iter().map(|r| data.features_of(&r.id)).collect::<Result<_>>()?;
    let tes: BTreeMap<&str, TextEmbedding> = data
        .manifest
        .keyword_inventory
        .iter()
        .map(|k| Ok((k.as_str(), pair.text.encode(&KeywordText::new(k)?))))
        .collect::<Result<_>>()?;
    let embs = pair.acoustic.embed_all(&feats, None, 64)?;
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (r, e) in recs.iter().zip(&embs) {
        let kw = r.label.keyword().expect("filtered");
        for (k, te) in &tes {
            let c = dot(e.as_slice(), te.as_slice());
            if *k == kw {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    Ok((same / ns.max(1) as f64, cross / nc.max(1) as f64))
}

/// The group holding the first activation site of `group`, for profiles.
pub fn first_site_in(model: &EncoderModel, group: LayerGroupId) -> Option<usize> {
    model.sites_in(group).first().copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_and_scaled_compositions() {
        let c = BatchComposition::default();
        assert_eq!((c.total, c.n_target, c.n_nontarget, c.n_noise), (256, 128, 96, 32));
        let s = BatchComposition::scaled(16).unwrap();
        assert_eq!((s.n_target, s.n_nontarget, s.n_noise), (8, 6, 2));
        assert!(BatchComposition::new(0, 3, 1).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodKind::ALL {
            assert_eq!(m.name().parse::<MethodKind>().unwrap(), m);
        }
        assert!("BOGUS".parse::<MethodKind>().is_err());
    }

    #[test]
    fn method_specs_validate() {
        for m in MethodKind::ALL {
            m.spec().validate().unwrap();
        }
    }
}
