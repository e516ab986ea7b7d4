//! Selective fine-tuning: which parameters an adapter trains, exact
//! snapshots for reverting to the pre-trained weights, and tunable-parameter
//! audits.
//!
//! Adapting BN unfreezes the affine scale/shift of the selected groups and
//! switches those layers to batch statistics while training; every other BN
//! layer keeps its running statistics frozen. Adapting SE unfreezes both
//! bottleneck projections of the selected block.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{conditioning_param_count, ConditioningKind};
use crate::encoder::{EncoderModel, LafInit};
use crate::error::{Error, Result};
use crate::head::{Head, HeadInit};
use crate::params::{LayerGroupId, ParamKind, TaggedParameter};
use crate::text::TextEmbedding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClassifierMode {
    /// Logit = te . ae with the text embedding fixed.
    FixedTe,
    /// A single learned logit (weight + bias).
    LearnedFc,
    /// Learned softmax head; class 0 is the target keyword.
    Softmax { classes: usize },
}

impl ClassifierMode {
    pub fn head_classes(self) -> Option<usize> {
        match self {
            ClassifierMode::FixedTe => None,
            ClassifierMode::LearnedFc => Some(1),
            ClassifierMode::Softmax { classes } => Some(classes),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConditioningMode {
    None,
    Tcfm,
    AdainKam,
}

/// Declarative choice of trainable parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub bn_groups: BTreeSet<LayerGroupId>,
    pub se_groups: BTreeSet<LayerGroupId>,
    pub tcfm_sites: BTreeSet<LayerGroupId>,
    pub classifier: ClassifierMode,
    pub conditioning: ConditioningMode,
    /// Unfreezes every encoder parameter (full fine-tuning baselines).
    pub full_finetune: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            bn_groups: BTreeSet::new(),
            se_groups: BTreeSet::new(),
            tcfm_sites: BTreeSet::new(),
            classifier: ClassifierMode::FixedTe,
            conditioning: ConditioningMode::None,
            full_finetune: false,
        }
    }
}

fn groups<const N: usize>(gs: [LayerGroupId; N]) -> BTreeSet<LayerGroupId> {
    gs.into_iter().collect()
}

impl AdapterSpec {
    /// All BN layers plus SE in `se`, fixed text-embedding classifier.
    pub fn fw_adapter(se: LayerGroupId) -> Self {
        Self { bn_groups: LayerGroupId::ALL.into_iter().collect(), se_groups: groups([se]), ..Self::default() }
    }

    /// The full text-aware adapter: TCFM at G4 and G5, SE at G3, all BN,
    /// fixed text-embedding classifier.
    pub fn ta_adapter() -> Self {
        Self {
            tcfm_sites: groups([LayerGroupId::G4, LayerGroupId::G5]),
            conditioning: ConditioningMode::Tcfm,
            ..Self::fw_adapter(LayerGroupId::G3)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = self.se_groups.iter().find(|g| !LayerGroupId::SE_GROUPS.contains(g)) {
            return Err(Error::Spec(format!("group {g} has no squeeze-excitation module")));
        }
        if self.tcfm_sites.contains(&LayerGroupId::G6) {
            return Err(Error::Spec("group G6 has no activation site for TCFM".into()));
        }
        if !self.tcfm_sites.is_empty() && self.conditioning != ConditioningMode::Tcfm {
            return Err(Error::Spec("tcfm_sites requires conditioning = TCFM".into()));
        }
        if let ClassifierMode::Softmax { classes } = self.classifier {
            if classes < 2 {
                return Err(Error::Spec(format!("a softmax head needs at least 2 classes, got {classes}")));
            }
        }
        Ok(())
    }

    /// Componentwise inclusion.
    pub fn is_subset_of(&self, other: &AdapterSpec) -> bool {
        let cond_ok = self.conditioning == ConditioningMode::None || self.conditioning == other.conditioning;
        let clf_ok = self.classifier == ClassifierMode::FixedTe || self.classifier == other.classifier;
        self.bn_groups.is_subset(&other.bn_groups)
            && self.se_groups.is_subset(&other.se_groups)
            && self.tcfm_sites.is_subset(&other.tcfm_sites)
            && cond_ok
            && clf_ok
            && (!self.full_finetune || other.full_finetune)
    }

    fn selects(&self, p: &TaggedParameter) -> bool {
        match p.kind {
            ParamKind::Head => self.classifier.head_classes().is_some(),
            ParamKind::Laf => self.conditioning == ConditioningMode::Tcfm && self.tcfm_sites.contains(&p.group),
            ParamKind::Kam => self.conditioning == ConditioningMode::AdainKam,
            _ if self.full_finetune => true,
            ParamKind::Bn => self.bn_groups.contains(&p.group),
            ParamKind::Se => self.se_groups.contains(&p.group),
            _ => false,
        }
    }
}

fn fmt_groups(f: &mut fmt::Formatter<'_>, label: &str, g: &BTreeSet<LayerGroupId>) -> fmt::Result {
    let list: Vec<String> = g.iter().map(|g| g.to_string()).collect();
    write!(f, "{label}[{}]", list.join(" "))
}

impl fmt::Display for AdapterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.full_finetune {
            f.write_str("FULL ")?;
        }
        fmt_groups(f, "BN", &self.bn_groups)?;
        f.write_str(" ")?;
        fmt_groups(f, "SE", &self.se_groups)?;
        match self.conditioning {
            ConditioningMode::Tcfm => {
                f.write_str(" ")?;
                fmt_groups(f, "TCFM", &self.tcfm_sites)?;
            }
            ConditioningMode::AdainKam => f.write_str(" KAM")?,
            ConditioningMode::None => {}
        }
        match self.classifier {
            ClassifierMode::FixedTe => f.write_str(" TE-clf"),
            ClassifierMode::LearnedFc => f.write_str(" FC-clf"),
            ClassifierMode::Softmax { classes } => write!(f, " {classes}-class-clf"),
        }
    }
}

/// Parameters that [`prepare_model`] would attach for `spec`.
pub fn planned_attachments(model: &EncoderModel, spec: &AdapterSpec) -> Vec<TaggedParameter> {
    let d = model.embed_dim();
    let a = model.basis().len();
    let mut out = Vec::new();
    if spec.conditioning == ConditioningMode::Tcfm {
        for site in model.sites() {
            if spec.tcfm_sites.contains(&site.group) && site.laf.is_none() {
                let count = conditioning_param_count(ConditioningKind::Tcfm, d, 0, a);
                out.push(TaggedParameter { name: format!("{}.laf.w", site.name), group: site.group, kind: ParamKind::Laf, shape: vec![d, count.weights / d] });
                out.push(TaggedParameter { name: format!("{}.laf.b", site.name), group: site.group, kind: ParamKind::Laf, shape: vec![count.bias] });
            }
        }
    }
    if spec.conditioning == ConditioningMode::AdainKam && model.kam().is_none() {
        let f = model.config().aggregate_channels();
        out.push(TaggedParameter { name: "kam.proj.weight".into(), group: LayerGroupId::G4, kind: ParamKind::Kam, shape: vec![2 * f, d] });
        out.push(TaggedParameter { name: "kam.proj.bias".into(), group: LayerGroupId::G4, kind: ParamKind::Kam, shape: vec![2 * f] });
    }
    if let (Some(classes), None) = (spec.classifier.head_classes(), model.head()) {
        out.push(TaggedParameter { name: "head.weight".into(), group: LayerGroupId::G6, kind: ParamKind::Head, shape: vec![classes, d] });
        out.push(TaggedParameter { name: "head.bias".into(), group: LayerGroupId::G6, kind: ParamKind::Head, shape: vec![classes] });
    }
    out
}

/// The exact trainable parameter set of an adapter spec.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainablePlan {
    pub spec: AdapterSpec,
    pub names: BTreeSet<String>,
    pub tunable: usize,
}

impl TrainablePlan {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    /// BN layers switched to batch statistics while training.
    pub fn bn_trains(&self, group: LayerGroupId) -> bool {
        self.spec.full_finetune || self.spec.bn_groups.contains(&group)
    }
}

/// Computes the trainable set without touching the model. Parameters the
/// spec would attach (activation sites, AdaIN module, head) are included.
pub fn select_trainable(model: &EncoderModel, spec: &AdapterSpec) -> Result<TrainablePlan> {
    spec.validate()?;
    let mut names = BTreeSet::new();
    let mut tunable = 0;
    for p in model.list_parameters().into_iter().chain(planned_attachments(model, spec)) {
        if spec.selects(&p) {
            tunable += p.numel();
            names.insert(p.name);
        }
    }
    Ok(TrainablePlan { spec: spec.clone(), names, tunable })
}

/// Attachment options used by [`prepare_model`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachOptions {
    pub laf_init: LafInit,
    pub head_init: HeadInit,
    pub seed: u64,
}

impl Default for AttachOptions {
    fn default() -> Self {
        Self { laf_init: LafInit::default(), head_init: HeadInit::FromTextEmbedding, seed: 0 }
    }
}

/// Attaches whatever `spec` needs, configures BN modes and returns the plan.
pub fn prepare_model(model: &mut EncoderModel, spec: &AdapterSpec, te: &TextEmbedding, opts: AttachOptions) -> Result<TrainablePlan> {
    spec.validate()?;
    if spec.conditioning == ConditioningMode::Tcfm {
        let gs: Vec<_> = spec.tcfm_sites.iter().copied().collect();
        model.attach_laf(&gs, opts.laf_init)?;
    }
    if spec.conditioning == ConditioningMode::AdainKam {
        model.attach_kam();
    }
    if let Some(classes) = spec.classifier.head_classes() {
        match model.head() {
            Some(h) if h.classes != classes => {
                return Err(Error::Spec(format!("model already has a {}-output head", h.classes)));
            }
            Some(_) => {}
            None => {
                let dim = model.embed_dim();
                let (store, head) = model.store_and_head_mut();
                *head = Some(Head::register(store, classes, dim, opts.head_init, te, opts.seed));
            }
        }
    }
    let plan = select_trainable(model, spec)?;
    model.set_bn_training(|_, g| plan.bn_trains(g));
    Ok(plan)
}

/// Bit-exact copy of every parameter and buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    buffers: Vec<(String, Vec<f64>)>,
    checksum: String,
}

fn digest(params: &[(String, Vec<usize>, Vec<f64>)], buffers: &[(String, Vec<f64>)]) -> String {
    let mut h = Sha256::new();
    for (name, shape, v) in params {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    for (name, v) in buffers {
        h.update(name.as_bytes());
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

impl ParamSnapshot {
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the digest over the stored bytes.
    pub fn verify(&self) -> Result<()> {
        let found = digest(&self.params, &self.buffers);
        if found != self.checksum {
            return Err(Error::Corruption { expected: self.checksum.clone(), found });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[doc(hidden)]
    pub fn values_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.params[i].2
    }
}

pub fn snapshot(model: &EncoderModel) -> ParamSnapshot {
    let params: Vec<_> =
        model.store().params().iter().map(|p| (p.name.clone(), p.shape.clone(), p.value.clone())).collect();
    let buffers: Vec<_> = model.store().buffers().iter().map(|b| (b.name.clone(), b.value.clone())).collect();
    let checksum = digest(&params, &buffers);
    ParamSnapshot { params, buffers, checksum }
}

/// Restores every parameter and buffer bitwise. Attachments added after the
/// snapshot make the architectures differ and are rejected.
pub fn restore(model: &mut EncoderModel, snap: &ParamSnapshot) -> Result<()> {
    snap.verify()?;
    let store = model.store();
    if store.params().len() != snap.params.len() || store.buffers().len() != snap.buffers.len() {
        return Err(Error::IncompatibleSnapshot(format!(
            "snapshot holds {} parameters / {} buffers, model has {} / {}",
            snap.params.len(),
            snap.buffers.len(),
            store.params().len(),
            store.buffers().len()
        )));
    }
    for (p, (name, shape, _)) in store.params().iter().zip(&snap.params) {
        if &p.name != name || &p.shape != shape {
            return Err(Error::IncompatibleSnapshot(format!(
                "parameter {} {:?} does not match snapshot entry {name} {shape:?}",
                p.name, p.shape
            )));
        }
    }
    for (b, (name, v)) in store.buffers().iter().zip(&snap.buffers) {
        if &b.name != name || b.value.len() != v.len() {
            return Err(Error::IncompatibleSnapshot(format!("buffer {} does not match snapshot entry {name}", b.name)));
        }
    }
    let store = model.store_mut();
    for (p, (_, _, v)) in store.params_mut().iter_mut().zip(&snap.params) {
        p.value.copy_from_slice(v);
    }
    for (b, (_, v)) in store.buffers_mut().iter_mut().zip(&snap.buffers) {
        b.value.copy_from_slice(v);
    }
    Ok(())
}

/// One audited selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub label: String,
    pub spec: AdapterSpec,
    /// Published count in thousands, for side-by-side comparison.
    #[serde(default)]
    pub reference_k: Option<f64>,
    #[serde(default)]
    pub note: String,
}

impl AuditEntry {
    pub fn new(label: impl Into<String>, spec: AdapterSpec) -> Self {
        Self { label: label.into(), spec, reference_k: None, note: String::new() }
    }

    fn with_reference(mut self, k: f64) -> Self {
        self.reference_k = Some(k);
        self
    }

    fn with_note(mut self, note: &str) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub selector: String,
    pub spec: String,
    pub tunable_params: usize,
    pub percent_of_total: f64,
    pub reference_k: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub total_params: usize,
    pub rows: Vec<AuditRow>,
}

pub const AUDIT_CSV_HEADER: &str = "selector,spec,tunable_params,percent_of_total,reference_k,note";

impl AuditReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(AUDIT_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let reference = r.reference_k.map(|k| format!("{k:.1}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{:.4},{},{}\n",
                csv_field(&r.selector),
                csv_field(&r.spec),
                r.tunable_params,
                r.percent_of_total,
                reference,
                csv_field(&r.note)
            ));
        }
        s
    }

    pub fn row(&self, selector: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.selector == selector)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Tunable counts for each entry; percentages are relative to the model's
/// own parameter count.
pub fn audit(model: &EncoderModel, entries: &[AuditEntry]) -> Result<AuditReport> {
    let total = model.total_params();
    let rows = entries
        .iter()
        .map(|e| {
            let plan = select_trainable(model, &e.spec)?;
            Ok(AuditRow {
                selector: e.label.clone(),
                spec: e.spec.to_string(),
                tunable_params: plan.tunable,
                percent_of_total: 100.0 * plan.tunable as f64 / total as f64,
                reference_k: e.reference_k,
                note: e.note.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport { total_params: total, rows })
}

const G5_NOTE: &str = "G5 site counted as d*a+a like every other site; the reference implies ~0.1 K for G5";

/// Selectors ordered like the published BN/SE and TCFM ablation tables.
pub fn default_audit_entries() -> Vec<AuditEntry> {
    use LayerGroupId::*;
    let all_bn: BTreeSet<_> = LayerGroupId::ALL.into_iter().collect();
    let bn = |g: LayerGroupId| AdapterSpec { bn_groups: groups([g]), ..AdapterSpec::default() };
    let fw = AdapterSpec::fw_adapter(G3);
    let tcfm = |gs: &[LayerGroupId], base: &AdapterSpec| AdapterSpec {
        tcfm_sites: gs.iter().copied().collect(),
        conditioning: ConditioningMode::Tcfm,
        ..base.clone()
    };
    let se_all = AdapterSpec { bn_groups: all_bn.clone(), se_groups: groups([G1, G2, G3]), ..AdapterSpec::default() };
    vec![
        AuditEntry::new("PT", AdapterSpec::default()),
        AuditEntry::new("FT", AdapterSpec { full_finetune: true, classifier: ClassifierMode::LearnedFc, ..AdapterSpec::default() })
            .with_reference(2210.0),
        AuditEntry::new("FT clf", AdapterSpec { classifier: ClassifierMode::LearnedFc, ..AdapterSpec::default() }).with_reference(0.5),
        AuditEntry::new("BN G0", bn(G0)).with_reference(0.5),
        AuditEntry::new("BN G1", bn(G1)).with_reference(1.5),
        AuditEntry::new("BN G2", bn(G2)).with_reference(1.5),
        AuditEntry::new("BN G3", bn(G3)).with_reference(1.5),
        AuditEntry::new("BN G5", bn(G5)).with_reference(3.1),
        AuditEntry::new("BN G6", bn(G6)).with_reference(1.0),
        AuditEntry::new("BN", AdapterSpec { bn_groups: all_bn.clone(), ..AdapterSpec::default() }).with_reference(9.0),
        AuditEntry::new("SE G1 & BN", AdapterSpec::fw_adapter(G1)).with_reference(41.8),
        AuditEntry::new("SE G2 & BN", AdapterSpec::fw_adapter(G2)).with_reference(41.8),
        AuditEntry::new("SE G3 & BN", fw.clone()).with_reference(41.8),
        AuditEntry::new("SE & BN (FC clf)", AdapterSpec { classifier: ClassifierMode::LearnedFc, ..se_all.clone() })
            .with_reference(107.8),
        AuditEntry::new("SE & BN (TE clf)", se_all).with_reference(107.3),
        AuditEntry::new("TCFM G0 + FW", tcfm(&[G0], &fw)).with_reference(44.9),
        AuditEntry::new("TCFM G1 + FW", tcfm(&[G1], &fw)).with_reference(69.5),
        AuditEntry::new("TCFM G2 + FW", tcfm(&[G2], &fw)).with_reference(69.5),
        AuditEntry::new("TCFM G3 + FW", tcfm(&[G3], &fw)).with_reference(69.5),
        AuditEntry::new("TCFM G4 + FW", tcfm(&[G4], &fw)).with_reference(44.9),
        AuditEntry::new("TCFM G5 + FW", tcfm(&[G5], &fw)).with_reference(41.9).with_note(G5_NOTE),
        AuditEntry::new("TCFM G3 G4 G5 + FW", tcfm(&[G3, G4, G5], &fw)).with_reference(72.7).with_note(G5_NOTE),
        AuditEntry::new("TCFM G4 G5 + FW", tcfm(&[G4, G5], &fw)).with_reference(45.0).with_note(G5_NOTE),
        AuditEntry::new("TCFM G4 G5", tcfm(&[G4, G5], &AdapterSpec::default())).with_reference(3.2).with_note(G5_NOTE),
    ]
}
