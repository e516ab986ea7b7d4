//! Compact ECAPA-style acoustic encoder.
//!
//! Layer groups:
//!
//! * `G0` stem: conv(k=5) -> activation -> BN
//! * `G1..G3` SE-Res2 blocks: 1x1 conv -> act -> BN, dilated Res2 branches
//!   (conv -> act -> BN each), 1x1 conv -> act -> BN, squeeze-excitation,
//!   residual add
//! * `G4` aggregation: concatenated block outputs -> 1x1 conv -> act (no BN)
//! * `G5` attentive statistics pooling (conv -> act -> conv -> softmax over
//!   time) followed by BN over the pooled mean/std vector
//! * `G6` linear projection to the embedding followed by BN
//!
//! The output is L2-normalized. Every activation in `G0..G5` is a site that
//! can be swapped from ReLU to a text-conditioned learnable activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    laf_backward, laf_scalar, ActivationBasis, ActivationWeights, AdaInCache, AdaInSite, BasisFunction, LafSite,
};
use crate::error::{Error, Result};
use crate::head::Head;
use crate::layers::{
    l2_normalize, l2_normalize_backward, BatchNorm, BnCache, Conv1d, SeCache, SqueezeExcite,
};
use crate::params::{Gradients, LayerGroupId, ParamKind, ParamStore, ParamTag, TaggedParameter};
use crate::tensor::Tensor3;
use crate::text::TextEmbedding;

const STEM_KERNEL: usize = 5;
const RES2_KERNEL: usize = 3;
const POOL_STD_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub res2_scale: usize,
    pub n_blocks: usize,
    pub attn_channels: usize,
    pub embed_dim: usize,
    pub dilations: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            channels: 256,
            res2_scale: 8,
            n_blocks: 3,
            attn_channels: 128,
            embed_dim: 512,
            dilations: vec![2, 3, 4],
        }
    }
}

impl EncoderConfig {
    /// A narrow configuration for desk-scale experiments.
    pub fn compact(n_mels: usize, channels: usize, res2_scale: usize, embed_dim: usize) -> Self {
        Self {
            n_mels,
            channels,
            res2_scale,
            attn_channels: (channels / 2).max(1),
            embed_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks != 3 {
            return Err(Error::Config(format!("n_blocks must be 3, got {}", self.n_blocks)));
        }
        if self.res2_scale < 2 {
            return Err(Error::Config(format!("res2_scale must be at least 2, got {}", self.res2_scale)));
        }
        if self.channels == 0 || self.channels % self.res2_scale != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of res2_scale ({})",
                self.channels, self.res2_scale
            )));
        }
        if self.dilations.len() != self.n_blocks || self.dilations.contains(&0) {
            return Err(Error::Config(format!(
                "dilations must list {} positive values, got {:?}",
                self.n_blocks, self.dilations
            )));
        }
        if self.n_mels == 0 || self.attn_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("n_mels, attn_channels and embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Squeeze-excitation bottleneck width (a quarter of the block width).
    pub fn se_bottleneck(&self) -> usize {
        (self.channels / 4).max(1)
    }

    /// Width of the concatenated block outputs entering G4.
    pub fn aggregate_channels(&self) -> usize {
        self.channels * self.n_blocks
    }

    /// Activation sites per layer group, in forward order.
    pub fn sites_per_group(&self, group: LayerGroupId) -> usize {
        match group {
            LayerGroupId::G0 | LayerGroupId::G4 | LayerGroupId::G5 => 1,
            LayerGroupId::G1 | LayerGroupId::G2 | LayerGroupId::G3 => self.res2_scale + 1,
            LayerGroupId::G6 => 0,
        }
    }
}

/// T x n_mels feature matrix, frames stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelFeatureSequence {
    n_frames: usize,
    n_mels: usize,
    frames: Vec<f64>,
}

impl MelFeatureSequence {
    pub fn new(n_frames: usize, n_mels: usize, frames: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || n_mels == 0 {
            return Err(Error::Input("feature sequence needs at least one frame and one bin".into()));
        }
        if frames.len() != n_frames * n_mels {
            return Err(Error::Shape(format!(
                "expected {n_frames}x{n_mels} = {} values, got {}",
                n_frames * n_mels,
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature sequence contains non-finite values".into()));
        }
        Ok(Self { n_frames, n_mels, frames })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frames_mut(&mut self) -> &mut [f64] {
        &mut self.frames
    }
}

/// Stacks equal-length sequences into a `(batch, n_mels, time)` tensor.
pub fn batch_features(seqs: &[&MelFeatureSequence]) -> Result<Tensor3> {
    let first = seqs.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let (t_n, m_n) = (first.n_frames, first.n_mels);
    let mut out = Tensor3::zeros(seqs.len(), m_n, t_n);
    for (b, s) in seqs.iter().enumerate() {
        if s.n_frames != t_n || s.n_mels != m_n {
            return Err(Error::Shape(format!(
                "batch items must share a shape: {}x{} vs {}x{}",
                s.n_frames, s.n_mels, t_n, m_n
            )));
        }
        for t in 0..t_n {
            for m in 0..m_n {
                out.row_mut(b, m)[t] = s.frames[t * m_n + m];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticEmbedding(Vec<f64>);

impl AcousticEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Text embedding that drives conditioning during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext {
    pub te: TextEmbedding,
}

impl ConditioningContext {
    pub fn new(te: TextEmbedding) -> Self {
        Self { te }
    }
}

/// Initial mixture logits for newly attached learnable activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LafInit {
    /// w = 0, b = 0: uniform mixture.
    Uniform,
    /// w = 0, b one-hot scaled by `logit` on `function`.
    Favor { function: BasisFunction, logit: f64 },
}

impl Default for LafInit {
    fn default() -> Self {
        LafInit::Favor { function: BasisFunction::Relu, logit: 4.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ActivationSite {
    pub name: String,
    pub group: LayerGroupId,
    pub laf: Option<LafSite>,
}

#[derive(Clone, Debug)]
struct Cab {
    conv: Conv1d,
    site: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Cab,
    branches: Vec<Cab>,
    conv2: Cab,
    se: SqueezeExcite,
    width: usize,
}

#[derive(Clone, Debug)]
struct Pool {
    conv1: Conv1d,
    site: usize,
    conv2: Conv1d,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    basis: ActivationBasis,
    store: ParamStore<ParamTag>,
    stem: Cab,
    blocks: Vec<Block>,
    mfa: Conv1d,
    mfa_site: usize,
    pool: Pool,
    pool_bn: usize,
    fc: Conv1d,
    fc_bn: usize,
    bns: Vec<BatchNorm>,
    bn_groups: Vec<LayerGroupId>,
    bn_train: Vec<bool>,
    sites: Vec<ActivationSite>,
    kam: Option<AdaInSite>,
    head: Option<Head>,
}

struct CabCache {
    conv_in: Tensor3,
    act_pre: Tensor3,
    bn: BnCache,
}

struct BlockCache {
    conv1: CabCache,
    branch_in: Vec<CabCache>,
    conv2: CabCache,
    se_out_pre: SeCache,
}

struct PoolCache {
    h: Tensor3,
    a_pre: Tensor3,
    a: Tensor3,
    alpha: Tensor3,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    clamped: Vec<bool>,
}

/// Intermediate values of a batched forward pass.
pub struct Trace {
    batch: usize,
    te: Option<Vec<f64>>,
    weights: Vec<Option<ActivationWeights>>,
    stem: CabCache,
    blocks: Vec<BlockCache>,
    mfa_in: Tensor3,
    mfa_pre: Tensor3,
    kam: Option<AdaInCache>,
    pool: PoolCache,
    pool_bn: BnCache,
    fc_in: Tensor3,
    fc_bn: BnCache,
    normed: Tensor3,
    norms: Vec<f64>,
}

impl Trace {
    pub fn embeddings(&self) -> &Tensor3 {
        &self.normed
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn embedding(&self, b: usize) -> AcousticEmbedding {
        AcousticEmbedding(self.normed.sample(b).to_vec())
    }

    /// Mixture weights of each activation site (None for plain ReLU).
    pub fn site_weights(&self) -> &[Option<ActivationWeights>] {
        &self.weights
    }

    /// Distance of the nearest pre-activation to a non-differentiable point.
    pub fn kink_margin(&self, model: &EncoderModel) -> f64 {
        let mut m = f64::INFINITY;
        let mut visit = |pre: &Tensor3, site: usize| {
            let basis_kinks = match &self.weights[site] {
                Some(_) => model.basis.clone(),
                None => ActivationBasis::new(vec![BasisFunction::Relu]).expect("non-empty"),
            };
            for &v in &pre.data {
                m = m.min(basis_kinks.kink_distance(v));
            }
        };
        visit(&self.stem.act_pre, model.stem.site);
        for (bc, blk) in self.blocks.iter().zip(&model.blocks) {
            visit(&bc.conv1.act_pre, blk.conv1.site);
            for (c, cab) in bc.branch_in.iter().zip(&blk.branches) {
                visit(&c.act_pre, cab.site);
            }
            visit(&bc.conv2.act_pre, blk.conv2.site);
        }
        visit(&self.mfa_pre, model.mfa_site);
        visit(&self.pool.a_pre, model.pool.site);
        self.blocks.iter().fold(m, |m, bc| m.min(SqueezeExcite::kink_margin(&bc.se_out_pre)))
    }
}

fn tag(group: LayerGroupId, kind: ParamKind) -> ParamTag {
    ParamTag { group, kind }
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut bns = Vec::new();
        let mut bn_groups = Vec::new();
        let mut sites = Vec::new();
        let c = config.channels;

        let mut add_bn = |store: &mut ParamStore<ParamTag>, name: &str, ch: usize, g: LayerGroupId| {
            bns.push(BatchNorm::register(store, name, ch, tag(g, ParamKind::Bn)));
            bn_groups.push(g);
            bns.len() - 1
        };
        let mut add_site = |name: String, g: LayerGroupId| {
            sites.push(ActivationSite { name, group: g, laf: None });
            sites.len() - 1
        };

        let g0 = LayerGroupId::G0;
        let stem = Cab {
            conv: Conv1d::register(&mut store, "g0.conv", config.n_mels, c, STEM_KERNEL, 1, true, tag(g0, ParamKind::Conv), &mut rng),
            site: add_site("g0.act".into(), g0),
            bn: add_bn(&mut store, "g0.bn", c, g0),
        };

        let width = c / config.res2_scale;
        let mut blocks = Vec::new();
        for (bi, &dil) in config.dilations.iter().enumerate() {
            let g = LayerGroupId::from_index(bi + 1).expect("three blocks");
            let p = format!("g{}", bi + 1);
            let conv1 = Cab {
                conv: Conv1d::register(&mut store, &format!("{p}.conv1"), c, c, 1, 1, true, tag(g, ParamKind::Conv), &mut rng),
                site: add_site(format!("{p}.act1"), g),
                bn: add_bn(&mut store, &format!("{p}.bn1"), c, g),
            };
            let branches = (1..config.res2_scale)
                .map(|i| Cab {
                    conv: Conv1d::register(
                        &mut store,
                        &format!("{p}.res2.{i}.conv"),
                        width,
                        width,
                        RES2_KERNEL,
                        dil,
                        true,
                        tag(g, ParamKind::Conv),
                        &mut rng,
                    ),
                    site: add_site(format!("{p}.res2.{i}.act"), g),
                    bn: add_bn(&mut store, &format!("{p}.res2.{i}.bn"), width, g),
                })
                .collect();
            let conv2 = Cab {
                conv: Conv1d::register(&mut store, &format!("{p}.conv2"), c, c, 1, 1, true, tag(g, ParamKind::Conv), &mut rng),
                site: add_site(format!("{p}.act2"), g),
                bn: add_bn(&mut store, &format!("{p}.bn2"), c, g),
            };
            let se = SqueezeExcite::register(&mut store, &format!("{p}.se"), c, config.se_bottleneck(), tag(g, ParamKind::Se), &mut rng);
            blocks.push(Block { conv1, branches, conv2, se, width });
        }

        let agg = config.aggregate_channels();
        let g4 = LayerGroupId::G4;
        let mfa = Conv1d::register(&mut store, "g4.conv", agg, agg, 1, 1, true, tag(g4, ParamKind::Conv), &mut rng);
        let mfa_site = add_site("g4.act".into(), g4);

        let g5 = LayerGroupId::G5;
        let pool = Pool {
            conv1: Conv1d::register(&mut store, "g5.attn.conv1", agg, config.attn_channels, 1, 1, true, tag(g5, ParamKind::Attn), &mut rng),
            site: add_site("g5.attn.act".into(), g5),
            conv2: Conv1d::register(&mut store, "g5.attn.conv2", config.attn_channels, agg, 1, 1, true, tag(g5, ParamKind::Attn), &mut rng),
        };
        let pool_bn = add_bn(&mut store, "g5.bn", 2 * agg, g5);

        let g6 = LayerGroupId::G6;
        let fc = Conv1d::register(&mut store, "g6.fc", 2 * agg, config.embed_dim, 1, 1, true, tag(g6, ParamKind::Fc), &mut rng);
        let fc_bn = add_bn(&mut store, "g6.bn", config.embed_dim, g6);

        let bn_train = vec![true; bns.len()];
        Ok(Self {
            config,
            basis: ActivationBasis::standard(),
            store,
            stem,
            blocks,
            mfa,
            mfa_site,
            pool,
            pool_bn,
            fc,
            fc_bn,
            bns,
            bn_groups,
            bn_train,
            sites,
            kam: None,
            head: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn basis(&self) -> &ActivationBasis {
        &self.basis
    }

    pub fn store(&self) -> &ParamStore<ParamTag> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<ParamTag> {
        &mut self.store
    }

    pub fn sites(&self) -> &[ActivationSite] {
        &self.sites
    }

    pub fn head(&self) -> Option<&Head> {
        self.head.as_ref()
    }

    pub fn kam(&self) -> Option<&AdaInSite> {
        self.kam.as_ref()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Exhaustive tag list in registration order.
    pub fn list_parameters(&self) -> Vec<TaggedParameter> {
        self.store
            .params()
            .iter()
            .map(|p| TaggedParameter { name: p.name.clone(), group: p.tag.group, kind: p.tag.kind, shape: p.shape.clone() })
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.store.numel()
    }

    pub fn needs_conditioning(&self) -> bool {
        self.kam.is_some() || self.sites.iter().any(|s| s.laf.is_some())
    }

    pub fn laf_groups(&self) -> Vec<LayerGroupId> {
        let mut g: Vec<_> = self.sites.iter().filter(|s| s.laf.is_some()).map(|s| s.group).collect();
        g.dedup();
        g
    }

    /// Site indices belonging to `group`.
    pub fn sites_in(&self, group: LayerGroupId) -> Vec<usize> {
        (0..self.sites.len()).filter(|&i| self.sites[i].group == group).collect()
    }

    /// Replaces every ReLU in `groups` by a learnable activation. Groups
    /// that already carry learnable activations are left untouched.
    pub fn attach_laf(&mut self, groups: &[LayerGroupId], init: LafInit) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| **g == LayerGroupId::G6) {
            return Err(Error::Spec(format!("group {g} has no activation site")));
        }
        let d = self.config.embed_dim;
        let a = self.basis.len();
        let bias = match init {
            LafInit::Uniform => vec![0.0; a],
            LafInit::Favor { function, logit } => {
                let mut b = vec![0.0; a];
                let i = self
                    .basis
                    .position(function)
                    .ok_or_else(|| Error::Config(format!("{function:?} is not in the activation basis")))?;
                b[i] = logit;
                b
            }
        };
        for i in 0..self.sites.len() {
            let site = &self.sites[i];
            if !groups.contains(&site.group) || site.laf.is_some() {
                continue;
            }
            let t = tag(site.group, ParamKind::Laf);
            let name = site.name.clone();
            let group = site.group;
            let w = self.store.add(format!("{name}.laf.w"), vec![d, a], t, vec![0.0; d * a]);
            let b = self.store.add(format!("{name}.laf.b"), vec![a], t, bias.clone());
            self.sites[i].laf = Some(LafSite { w, b, group, site: i });
        }
        Ok(())
    }

    /// Inserts an AdaIN keyword-adaptive module on the G4 output features.
    pub fn attach_kam(&mut self) {
        if self.kam.is_some() {
            return;
        }
        let f = self.config.aggregate_channels();
        let d = self.config.embed_dim;
        let t = tag(LayerGroupId::G4, ParamKind::Kam);
        let proj = self.store.add("kam.proj.weight", vec![2 * f, d], t, vec![0.0; 2 * f * d]);
        let mut bias = vec![1.0; f];
        bias.extend(std::iter::repeat_n(0.0, f));
        let bias = self.store.add("kam.proj.bias", vec![2 * f], t, bias);
        self.kam = Some(AdaInSite { proj, bias, channels: f, embed_dim: d });
    }

    pub fn attach_head(&mut self, head: Head) {
        self.head = Some(head);
    }

    pub(crate) fn store_and_head_mut(&mut self) -> (&mut ParamStore<ParamTag>, &mut Option<Head>) {
        (&mut self.store, &mut self.head)
    }

    /// Selects batch statistics (in training passes) for BN layers whose
    /// names satisfy `pred`; others use running statistics.
    pub fn set_bn_training(&mut self, pred: impl Fn(&str, LayerGroupId) -> bool) {
        for (i, bn) in self.bns.iter().enumerate() {
            let name = &self.store.param(bn.gamma).name;
            let base = name.trim_end_matches(".weight");
            self.bn_train[i] = pred(base, self.bn_groups[i]);
        }
    }

    /// Names of BN layers that use batch statistics in training passes.
    pub fn bn_training_layers(&self) -> Vec<String> {
        self.bns
            .iter()
            .zip(&self.bn_train)
            .filter(|(_, t)| **t)
            .map(|(bn, _)| self.store.param(bn.gamma).name.trim_end_matches(".weight").to_string())
            .collect()
    }

    fn site_weights(&self, cond: Option<&ConditioningContext>) -> Result<(Vec<Option<ActivationWeights>>, Option<Vec<f64>>)> {
        let te = match cond {
            Some(c) => {
                if c.te.dim() != self.config.embed_dim {
                    return Err(Error::Shape(format!(
                        "conditioning embedding has dimension {}, encoder expects {}",
                        c.te.dim(),
                        self.config.embed_dim
                    )));
                }
                Some(c.te.as_slice().to_vec())
            }
            None => None,
        };
        if self.needs_conditioning() && te.is_none() {
            return Err(Error::MissingConditioning(
                "learnable activations or AdaIN modules are attached but no text embedding was supplied".into(),
            ));
        }
        let weights = self
            .sites
            .iter()
            .map(|s| match (&s.laf, &te) {
                (Some(laf), Some(te)) => laf.weights(&self.store, te).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((weights, te))
    }

    /// Single-utterance inference with running statistics.
    pub fn forward(&self, features: &MelFeatureSequence, cond: Option<&ConditioningContext>) -> Result<AcousticEmbedding> {
        let x = batch_features(&[features])?;
        let trace = self.forward_batch(&x, cond, false)?;
        Ok(trace.embedding(0))
    }

    /// Embeds many utterances in evaluation mode, one forward per chunk.
    pub fn embed_all(&self, seqs: &[&MelFeatureSequence], cond: Option<&ConditioningContext>, chunk: usize) -> Result<Vec<AcousticEmbedding>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            let x = batch_features(part)?;
            let trace = self.forward_batch(&x, cond, false)?;
            out.extend((0..part.len()).map(|b| trace.embedding(b)));
        }
        Ok(out)
    }

    /// Batched forward. With `training`, BN layers flagged by
    /// [`Self::set_bn_training`] normalize with batch statistics.
    pub fn forward_batch(&self, x: &Tensor3, cond: Option<&ConditioningContext>, training: bool) -> Result<Trace> {
        if x.channels != self.config.n_mels {
            return Err(Error::Shape(format!("expected {} mel bins, got {}", self.config.n_mels, x.channels)));
        }
        if x.time == 0 || x.batch == 0 {
            return Err(Error::Input("empty input".into()));
        }
        let (weights, te) = self.site_weights(cond)?;
        let (stem_out, stem) = self.cab_forward(&self.stem, x, &weights, training);

        let mut blocks = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        let mut cur = stem_out;
        for blk in &self.blocks {
            let (h1, c1) = self.cab_forward(&blk.conv1, &cur, &weights, training);
            let mut res = h1.same_shape();
            res.write_channels(0, &h1.narrow_channels(0, blk.width));
            let mut branch_in = Vec::with_capacity(blk.branches.len());
            let mut prev: Option<Tensor3> = None;
            for (i, cab) in blk.branches.iter().enumerate() {
                let mut inp = h1.narrow_channels((i + 1) * blk.width, blk.width);
                if let Some(p) = &prev {
                    inp.add_assign(p);
                }
                let (y, cache) = self.cab_forward(cab, &inp, &weights, training);
                res.write_channels((i + 1) * blk.width, &y);
                branch_in.push(cache);
                prev = Some(y);
            }
            let (h3, c2) = self.cab_forward(&blk.conv2, &res, &weights, training);
            let (mut h4, se_cache) = blk.se.forward(&self.store, &h3);
            h4.add_assign(&cur);
            blocks.push(BlockCache { conv1: c1, branch_in, conv2: c2, se_out_pre: se_cache });
            outs.push(h4.clone());
            cur = h4;
        }

        let mfa_in = Tensor3::concat_channels(&outs.iter().collect::<Vec<_>>());
        let mfa_pre = self.mfa.forward(&self.store, &mfa_in);
        let mut h = self.act_forward(self.mfa_site, &mfa_pre, &weights);
        let mut kam_cache = None;
        if let Some(kam) = &self.kam {
            let te = te.as_deref().expect("checked above");
            let (y, c) = kam.forward(&self.store, &h, te)?;
            h = y;
            kam_cache = Some(c);
        }

        let pool = self.pool_forward(h, &weights);
        let agg = self.config.aggregate_channels();
        let mut pooled = Tensor3::zeros(x.batch, 2 * agg, 1);
        for b in 0..x.batch {
            let s = pooled.sample_mut(b);
            s[..agg].copy_from_slice(&pool.mu[b * agg..(b + 1) * agg]);
            s[agg..].copy_from_slice(&pool.sigma[b * agg..(b + 1) * agg]);
        }
        let (fc_in, pool_bn) = self.bn_forward(self.pool_bn, &pooled, training);
        let fc_out = self.fc.forward(&self.store, &fc_in);
        let (emb_raw, fc_bn) = self.bn_forward(self.fc_bn, &fc_out, training);
        let (normed, norms) = l2_normalize(&emb_raw);

        Ok(Trace {
            batch: x.batch,
            te,
            weights,
            stem,
            blocks,
            mfa_in,
            mfa_pre,
            kam: kam_cache,
            pool,
            pool_bn,
            fc_in,
            fc_bn,
            normed,
            norms,
        })
    }

    /// Back-propagates dL/d(embedding) (`(batch, d, 1)`) into `grads`.
    pub fn backward(&self, trace: &Trace, d_embed: &Tensor3, grads: &mut Gradients) {
        let te = trace.te.as_deref();
        let d_raw = l2_normalize_backward(&trace.normed, &trace.norms, d_embed);
        let d_fc_out = self.bns[self.fc_bn].backward(&self.store, &trace.fc_bn, &d_raw, grads);
        let d_fc_in = self.fc.backward(&self.store, &trace.fc_in, &d_fc_out, grads, true).expect("input grad");
        let d_pooled = self.bns[self.pool_bn].backward(&self.store, &trace.pool_bn, &d_fc_in, grads);

        let mut dh = self.pool_backward(&trace.pool, &d_pooled, trace, grads);
        if let (Some(kam), Some(cache)) = (&self.kam, &trace.kam) {
            dh = kam.backward(cache, &dh, te.expect("conditioned"), grads);
        }
        let d_mfa_pre = self.act_backward(self.mfa_site, &trace.mfa_pre, &dh, trace, grads);
        let d_cat = self.mfa.backward(&self.store, &trace.mfa_in, &d_mfa_pre, grads, true).expect("input grad");

        let c = self.config.channels;
        let mut d_next: Option<Tensor3> = None;
        for (bi, (blk, bc)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let mut d_out = d_cat.narrow_channels(bi * c, c);
            if let Some(d) = &d_next {
                d_out.add_assign(d);
            }
            // residual path
            let mut d_in = d_out.clone();
            let d_h3 = blk.se.backward(&self.store, &bc.se_out_pre, &d_out, grads);
            let d_res = self.cab_backward(&blk.conv2, &bc.conv2, &d_h3, trace, grads, true).expect("input grad");
            let mut d_h1 = d_res.same_shape();
            d_h1.write_channels(0, &d_res.narrow_channels(0, blk.width));
            let mut d_carry: Option<Tensor3> = None;
            for (i, (cab, cache)) in blk.branches.iter().zip(&bc.branch_in).enumerate().rev() {
                let mut d_y = d_res.narrow_channels((i + 1) * blk.width, blk.width);
                if let Some(dc) = &d_carry {
                    d_y.add_assign(dc);
                }
                let d_inp = self.cab_backward(cab, cache, &d_y, trace, grads, true).expect("input grad");
                d_h1.write_channels((i + 1) * blk.width, &d_inp);
                d_carry = (i > 0).then_some(d_inp);
            }
            let d_x = self.cab_backward(&blk.conv1, &bc.conv1, &d_h1, trace, grads, true).expect("input grad");
            d_in.add_assign(&d_x);
            d_next = Some(d_in);
        }
        let d_stem = d_next.expect("three blocks");
        self.cab_backward(&self.stem, &trace.stem, &d_stem, trace, grads, false);
    }

    /// Folds the batch statistics of a training pass into running estimates.
    pub fn commit_running_stats(&mut self, trace: &Trace) {
        let mut caches: Vec<(usize, &BnCache)> = vec![(self.stem.bn, &trace.stem.bn)];
        for (blk, bc) in self.blocks.iter().zip(&trace.blocks) {
            caches.push((blk.conv1.bn, &bc.conv1.bn));
            for (cab, c) in blk.branches.iter().zip(&bc.branch_in) {
                caches.push((cab.bn, &c.bn));
            }
            caches.push((blk.conv2.bn, &bc.conv2.bn));
        }
        caches.push((self.pool_bn, &trace.pool_bn));
        caches.push((self.fc_bn, &trace.fc_bn));
        for (i, cache) in caches {
            let bn = self.bns[i].clone();
            bn.update_running(&mut self.store, cache);
        }
    }

    fn bn_forward(&self, i: usize, x: &Tensor3, training: bool) -> (Tensor3, BnCache) {
        self.bns[i].forward(&self.store, x, training && self.bn_train[i])
    }

    fn cab_forward(&self, cab: &Cab, x: &Tensor3, weights: &[Option<ActivationWeights>], training: bool) -> (Tensor3, CabCache) {
        let pre = cab.conv.forward(&self.store, x);
        let act = self.act_forward(cab.site, &pre, weights);
        let (y, bn) = self.bn_forward(cab.bn, &act, training);
        (y, CabCache { conv_in: x.clone(), act_pre: pre, bn })
    }

    fn cab_backward(&self, cab: &Cab, cache: &CabCache, dy: &Tensor3, trace: &Trace, grads: &mut Gradients, need_dx: bool) -> Option<Tensor3> {
        let d_act = self.bns[cab.bn].backward(&self.store, &cache.bn, dy, grads);
        let d_pre = self.act_backward(cab.site, &cache.act_pre, &d_act, trace, grads);
        cab.conv.backward(&self.store, &cache.conv_in, &d_pre, grads, need_dx)
    }

    fn act_forward(&self, site: usize, pre: &Tensor3, weights: &[Option<ActivationWeights>]) -> Tensor3 {
        match &weights[site] {
            None => pre.map(|v| v.max(0.0)),
            Some(s) => pre.map(|v| laf_scalar(v, s, &self.basis)),
        }
    }

    fn act_backward(&self, site: usize, pre: &Tensor3, dy: &Tensor3, trace: &Trace, grads: &mut Gradients) -> Tensor3 {
        match (&trace.weights[site], &self.sites[site].laf) {
            (Some(s), Some(laf)) => {
                let te = trace.te.as_deref().expect("conditioned");
                let dh = laf_backward(&pre.data, &dy.data, s, &self.basis, te, laf.w, laf.b, grads);
                Tensor3::from_vec(pre.batch, pre.channels, pre.time, dh)
            }
            _ => {
                let mut dx = dy.clone();
                for (d, &p) in dx.data.iter_mut().zip(&pre.data) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                dx
            }
        }
    }

    fn pool_forward(&self, h: Tensor3, weights: &[Option<ActivationWeights>]) -> PoolCache {
        let a_pre = self.pool.conv1.forward(&self.store, &h);
        let a = self.act_forward(self.pool.site, &a_pre, weights);
        let e = self.pool.conv2.forward(&self.store, &a);
        let agg = h.channels;
        let mut alpha = e.same_shape();
        let mut mu = vec![0.0; h.batch * agg];
        let mut sigma = vec![0.0; h.batch * agg];
        let mut clamped = vec![false; h.batch * agg];
        for b in 0..h.batch {
            for c in 0..agg {
                let er = e.row(b, c);
                let max = er.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = er.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let ar = alpha.row_mut(b, c);
                for (o, ex) in ar.iter_mut().zip(&exps) {
                    *o = ex / z;
                }
                let hr = h.row(b, c);
                let ar = alpha.row(b, c);
                let m: f64 = ar.iter().zip(hr).map(|(a, v)| a * v).sum();
                let s2: f64 = ar.iter().zip(hr).map(|(a, v)| a * v * v).sum();
                let var = s2 - m * m;
                let k = b * agg + c;
                mu[k] = m;
                if var > POOL_STD_FLOOR {
                    sigma[k] = var.sqrt();
                } else {
                    sigma[k] = POOL_STD_FLOOR.sqrt();
                    clamped[k] = true;
                }
            }
        }
        PoolCache { h, a_pre, a, alpha, mu, sigma, clamped }
    }

    fn pool_backward(&self, pc: &PoolCache, d_pooled: &Tensor3, trace: &Trace, grads: &mut Gradients) -> Tensor3 {
        let agg = pc.h.channels;
        let mut dh = pc.h.same_shape();
        let mut de = pc.h.same_shape();
        for b in 0..pc.h.batch {
            let dp = d_pooled.sample(b);
            for c in 0..agg {
                let k = b * agg + c;
                let (m, s) = (pc.mu[k], pc.sigma[k]);
                let dvar = if pc.clamped[k] { 0.0 } else { dp[agg + c] / (2.0 * s) };
                let dmu = dp[c] - 2.0 * m * dvar;
                let hr = pc.h.row(b, c);
                let ar = pc.alpha.row(b, c);
                let mut dalpha = Vec::with_capacity(hr.len());
                for ((d, &hv), &av) in dh.row_mut(b, c).iter_mut().zip(hr).zip(ar) {
                    *d = av * (dmu + 2.0 * hv * dvar);
                    dalpha.push(hv * dmu + hv * hv * dvar);
                }
                let inner: f64 = dalpha.iter().zip(ar).map(|(d, a)| d * a).sum();
                for ((o, da), &av) in de.row_mut(b, c).iter_mut().zip(&dalpha).zip(ar) {
                    *o = av * (da - inner);
                }
            }
        }
        let da = self.pool.conv2.backward(&self.store, &pc.a, &de, grads, true).expect("input grad");
        let da_pre = self.act_backward(self.pool.site, &pc.a_pre, &da, trace, grads);
        let dh2 = self.pool.conv1.backward(&self.store, &pc.h, &da_pre, grads, true).expect("input grad");
        dh.add_assign(&dh2);
        dh
    }
}

/// Constructs an encoder, validating `config`.
pub fn build_encoder(config: EncoderConfig, seed: u64) -> Result<EncoderModel> {
    EncoderModel::new(config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::l2_norm;

    fn tiny() -> EncoderConfig {
        EncoderConfig { n_mels: 5, channels: 8, res2_scale: 4, attn_channels: 4, embed_dim: 6, ..EncoderConfig::default() }
    }

    fn features(t: usize, m: usize, seed: u64) -> MelFeatureSequence {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelFeatureSequence::new(t, m, (0..t * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = tiny();
        c.channels = 10;
        assert!(matches!(EncoderModel::new(c, 0), Err(Error::Config(m)) if m.contains("res2_scale")));
        let mut c = tiny();
        c.n_blocks = 4;
        assert!(EncoderModel::new(c, 0).is_err());
        let mut c = tiny();
        c.dilations = vec![1, 2];
        assert!(EncoderModel::new(c, 0).is_err());
    }

    #[test]
    fn output_is_unit_norm_for_any_length() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        for t in [1, 7, 50, 120] {
            let e = m.forward(&features(t, 5, t as u64), None).unwrap();
            assert_eq!(e.dim(), 6);
            assert!((l2_norm(e.as_slice()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn site_layout() {
        let m = EncoderModel::new(tiny(), 1).unwrap();
        assert_eq!(m.sites().len(), 1 + 3 * 5 + 1 + 1);
        for g in LayerGroupId::ALL {
            assert_eq!(m.sites_in(g).len(), m.config().sites_per_group(g));
        }
    }

    #[test]
    fn laf_requires_conditioning() {
        let mut m = EncoderModel::new(tiny(), 1).unwrap();
        m.attach_laf(&[LayerGroupId::G4], LafInit::Uniform).unwrap();
        let err = m.forward(&features(9, 5, 2), None).unwrap_err();
        assert!(matches!(err, Error::MissingConditioning(_)));
        let te = TextEmbedding::from_unnormalized(vec![1.0; 6]).unwrap();
        assert!(m.forward(&features(9, 5, 2), Some(&ConditioningContext::new(te))).is_ok());
    }

    #[test]
    fn attach_laf_is_idempotent() {
        let mut m = EncoderModel::new(tiny(), 1).unwrap();
        m.attach_laf(&[LayerGroupId::G5], LafInit::default()).unwrap();
        let n = m.total_params();
        m.attach_laf(&[LayerGroupId::G5], LafInit::default()).unwrap();
        assert_eq!(n, m.total_params());
        assert!(m.attach_laf(&[LayerGroupId::G6], LafInit::default()).is_err());
    }

    #[test]
    fn mixed_lengths_in_a_batch_are_rejected() {
        let a = features(4, 5, 1);
        let b = features(5, 5, 1);
        assert!(matches!(batch_features(&[&a, &b]), Err(Error::Shape(_))));
    }
}
