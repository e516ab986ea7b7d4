//! Datasets, augmentation and few-shot sampling.
//!
//! Two sources are supported: a Speech-Commands-style folder layout and a
//! synthetic toy corpus. Both yield a [`DatasetManifest`]; features live in a
//! [`FeatureBank`] keyed by record id.
//!
//! Folder layout read by [`load_manifest`]:
//!
//! ```text
//! root/
//!   <keyword>/*.wav           one folder per keyword
//!   _background_noise_/*.wav  noise recordings (label NOISE, train split)
//!   validation_list.txt       relative paths of validation utterances
//!   testing_list.txt          relative paths of test utterances
//! ```
//!
//! Utterances in neither list form the training split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::MelFeatureSequence;
use crate::error::{Error, Result};
use crate::text::KeywordText;

pub const NOISE_LABEL: &str = "NOISE";
pub const VALIDATION_LIST: &str = "validation_list.txt";
pub const TESTING_LIST: &str = "testing_list.txt";
pub const BACKGROUND_NOISE_DIR: &str = "_background_noise_";

/// Keywords seen during pre-training of the reference model.
pub const SEEN_KEYWORDS: [&str; 10] =
    ["backward", "follow", "forward", "happy", "house", "one", "seven", "sheila", "visual", "zero"];

pub const UNSEEN_KEYWORDS: [&str; 25] = [
    "bed", "bird", "cat", "dog", "down", "eight", "five", "four", "go", "learn", "left", "marvin", "nine", "no",
    "off", "on", "right", "six", "stop", "three", "tree", "two", "up", "wow", "yes",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Label {
    Keyword(String),
    Noise,
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        if s == NOISE_LABEL {
            Label::Noise
        } else {
            Label::Keyword(s)
        }
    }
}

impl From<Label> for String {
    fn from(l: Label) -> Self {
        l.to_string()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Keyword(k) => f.write_str(k),
            Label::Noise => f.write_str(NOISE_LABEL),
        }
    }
}

impl Label {
    pub fn keyword(&self) -> Option<&str> {
        match self {
            Label::Keyword(k) => Some(k),
            Label::Noise => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Audio { path: PathBuf },
    Synthetic { seed: u64, index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: Label,
    pub source: Source,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Seen,
    Unseen,
}

pub fn partition_of(keyword: &str) -> Partition {
    if SEEN_KEYWORDS.contains(&keyword) {
        Partition::Seen
    } else {
        Partition::Unseen
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<UtteranceRecord>,
    pub keyword_inventory: Vec<String>,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    /// Builds the seen/unseen partition from the inventory.
    pub fn new(records: Vec<UtteranceRecord>, keyword_inventory: Vec<String>, warnings: Vec<String>) -> Result<Self> {
        let (seen, unseen) = keyword_inventory.iter().cloned().partition(|k| partition_of(k) == Partition::Seen);
        let m = Self { records, keyword_inventory, seen, unseen, warnings };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(&r.id) {
                return Err(Error::Data(format!("duplicate utterance id {}", r.id)));
            }
        }
        let inv: BTreeSet<&String> = self.keyword_inventory.iter().collect();
        if inv.len() != self.keyword_inventory.len() {
            return Err(Error::Data("keyword inventory has duplicates".into()));
        }
        if let Some(r) = self.records.iter().find(|r| r.label.keyword().is_some_and(|k| !inv.contains(&k.to_string()))) {
            return Err(Error::Data(format!("record {} has label {} outside the inventory", r.id, r.label)));
        }
        let seen: BTreeSet<&String> = self.seen.iter().collect();
        let unseen: BTreeSet<&String> = self.unseen.iter().collect();
        if !seen.is_disjoint(&unseen) || seen.union(&unseen).copied().collect::<BTreeSet<_>>() != inv {
            return Err(Error::Data("seen and unseen keywords must partition the inventory".into()));
        }
        Ok(())
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn keyword_records(&self, keyword: &str, split: Split) -> Vec<&UtteranceRecord> {
        self.records_in(split).filter(|r| r.label.keyword() == Some(keyword)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

fn read_list(path: &Path) -> Result<BTreeSet<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim().replace('\\', "/"))
        .filter(|l| !l.is_empty())
        .collect())
}

fn wav_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type()?.is_file() && name.to_ascii_lowercase().ends_with(".wav") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads a Speech-Commands-style folder tree.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let missing: Vec<&str> = [VALIDATION_LIST, TESTING_LIST].into_iter().filter(|f| !root.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing split lists in {}: {}", root.display(), missing.join(", "))));
    }
    let valid = read_list(&root.join(VALIDATION_LIST))?;
    let test = read_list(&root.join(TESTING_LIST))?;
    if let Some(both) = valid.intersection(&test).next() {
        return Err(Error::Data(format!("{both} is listed in both {VALIDATION_LIST} and {TESTING_LIST}")));
    }

    let mut dirs = Vec::new();
    for e in std::fs::read_dir(root)? {
        let e = e?;
        if e.file_type()?.is_dir() {
            dirs.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();

    let mut records = Vec::new();
    let mut inventory = Vec::new();
    let mut warnings = Vec::new();
    for dir in &dirs {
        if dir == BACKGROUND_NOISE_DIR {
            for f in wav_files(&root.join(dir))? {
                let id = format!("{dir}/{f}");
                records.push(UtteranceRecord {
                    source: Source::Audio { path: root.join(&id) },
                    id,
                    label: Label::Noise,
                    split: Split::Train,
                });
            }
            continue;
        }
        if dir.starts_with('_') || dir.starts_with('.') {
            continue;
        }
        let keyword = KeywordText::new(dir)
            .map_err(|e| Error::Data(format!("folder {dir} is not a valid keyword: {e}")))?
            .as_str()
            .to_string();
        let files = wav_files(&root.join(dir))?;
        if files.is_empty() {
            let w = format!("keyword folder {dir} contains no audio");
            log::warn!("{w}");
            warnings.push(w);
        }
        for f in files {
            let id = format!("{dir}/{f}");
            let split = if valid.contains(&id) {
                Split::Valid
            } else if test.contains(&id) {
                Split::Test
            } else {
                Split::Train
            };
            records.push(UtteranceRecord {
                source: Source::Audio { path: root.join(&id) },
                id,
                label: Label::Keyword(keyword.clone()),
                split,
            });
        }
        inventory.push(keyword);
    }
    DatasetManifest::new(records, inventory, warnings)
}

/// Feature sequences keyed by record id.
pub type FeatureBank = BTreeMap<String, MelFeatureSequence>;

/// A manifest together with the features of its records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: FeatureBank,
}

impl Dataset {
    pub fn features_of(&self, id: &str) -> Result<&MelFeatureSequence> {
        self.features.get(id).ok_or_else(|| Error::Data(format!("no features for record {id}")))
    }

    /// Writes `manifest.json` and one binary feature file per record.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        std::fs::create_dir_all(&feat_dir)?;
        std::fs::write(dir.join("manifest.json"), self.manifest.to_json()?)?;
        for (i, r) in self.manifest.records.iter().enumerate() {
            let f = self.features_of(&r.id)?;
            let mut buf = Vec::with_capacity(8 + 8 * f.frames().len());
            buf.extend((f.n_frames() as u32).to_le_bytes());
            buf.extend((f.n_mels() as u32).to_le_bytes());
            for v in f.frames() {
                buf.extend(v.to_le_bytes());
            }
            std::fs::File::create(feat_dir.join(format!("{i:06}.feat")))?.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest = DatasetManifest::from_json(&text)?;
        let mut features = FeatureBank::new();
        for (i, r) in manifest.records.iter().enumerate() {
            let mut buf = Vec::new();
            std::fs::File::open(dir.join("features").join(format!("{i:06}.feat")))?.read_to_end(&mut buf)?;
            if buf.len() < 8 {
                return Err(Error::Data(format!("feature file for {} is truncated", r.id)));
            }
            let t = u32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) as usize;
            let m = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
            if buf.len() != 8 + 8 * t * m {
                return Err(Error::Data(format!("feature file for {} has the wrong size", r.id)));
            }
            let frames = buf[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            features.insert(r.id.clone(), MelFeatureSequence::new(t, m, frames)?);
        }
        Ok(Self { manifest, features })
    }
}

/// Parameters of the synthetic keyword corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_keywords: usize,
    pub n_per_keyword: usize,
    pub n_noise: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    /// Standard deviation of per-frame feature noise.
    pub noise_std: f64,
    /// Fractions of each class assigned to the validation and test splits.
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Explicit keyword names; defaults to the Speech Commands vocabulary.
    pub keywords: Option<Vec<String>>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_keywords: 8,
            n_per_keyword: 40,
            n_noise: 40,
            n_mels: 20,
            n_frames: 32,
            noise_std: 0.6,
            valid_fraction: 0.25,
            test_fraction: 0.25,
            keywords: None,
        }
    }
}

/// Keyword vocabulary in the order used by the toy generator: seen and
/// unseen keywords interleaved so small sets contain both.
pub fn toy_vocabulary() -> Vec<&'static str> {
    let mut out = Vec::new();
    let mut u = UNSEEN_KEYWORDS.iter();
    for s in SEEN_KEYWORDS {
        out.push(s);
        out.extend(u.by_ref().take(2));
    }
    out.extend(u);
    out
}

const TEMPLATE_SEED: u64 = 0x5eed_7e3a;

/// Spectral template of one character: a smooth random profile over the mel
/// axis. Fixed across datasets so that keywords sharing letters sound alike.
pub fn char_template(c: char, n_mels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let raw: Vec<f64> = (0..n_mels).map(|_| normal.sample(&mut rng)).collect();
    let mut out: Vec<f64> = (0..n_mels)
        .map(|m| {
            let lo = m.saturating_sub(1);
            let hi = (m + 1).min(n_mels - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n_mels as f64;
    let norm = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt().max(1e-9);
    for v in &mut out {
        *v = (*v - mean) / norm * (n_mels as f64).sqrt();
    }
    out
}

fn keyword_utterance(keyword: &str, cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (t, m) = (cfg.n_frames, cfg.n_mels);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let chars: Vec<char> = keyword.chars().collect();
    let templates: Vec<Vec<f64>> = chars.iter().map(|&c| char_template(c, m)).collect();
    let len = ((t as f64) * rng.gen_range(0.6..0.85)).round().max(chars.len() as f64) as usize;
    let len = len.min(t);
    let start = rng.gen_range(0..=t - len);
    // Segment boundaries with jitter.
    let mut bounds = vec![0.0];
    let mut acc = 0.0;
    let weights: Vec<f64> = chars.iter().map(|_| rng.gen_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    for w in &weights {
        acc += w / total;
        bounds.push(acc);
    }
    let gain = rng.gen_range(0.7..1.3);
    let shift = rng.gen_range(-0.3..0.3);
    let mut frames = vec![0.0; t * m];
    for ti in 0..t {
        let row = &mut frames[ti * m..(ti + 1) * m];
        if ti >= start && ti < start + len {
            let pos = (ti - start) as f64 / len as f64;
            let j = bounds.windows(2).position(|w| pos >= w[0] && pos < w[1]).unwrap_or(chars.len() - 1);
            for (k, v) in row.iter_mut().enumerate() {
                *v = gain * templates[j][k] + shift;
            }
        }
        for v in row.iter_mut() {
            *v += cfg.noise_std * normal.sample(rng);
        }
    }
    frames
}

fn noise_utterance(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (t, m) = (cfg.n_frames, cfg.n_mels);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let tilt = rng.gen_range(-1.0..1.0);
    let level = rng.gen_range(0.5..1.5);
    let rho: f64 = rng.gen_range(0.3..0.9);
    let mut frames = vec![0.0; t * m];
    let mut prev = vec![0.0; m];
    for ti in 0..t {
        for k in 0..m {
            let e = normal.sample(rng) * (1.0 - rho * rho).sqrt();
            prev[k] = rho * prev[k] + e;
            let x = k as f64 / (m.max(2) - 1) as f64 - 0.5;
            frames[ti * m + k] = level * prev[k] + tilt * x;
        }
    }
    frames
}

fn split_for(i: usize, n: usize, cfg: &ToyConfig) -> Split {
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_train = n.saturating_sub(n_valid + n_test);
    if i < n_train {
        Split::Train
    } else if i < n_train + n_valid {
        Split::Valid
    } else {
        Split::Test
    }
}

/// Synthetic keyword corpus. Each keyword's utterances are built from the
/// spectral templates of its letters laid out over time with random
/// durations, gain and additive noise; noise utterances are coloured noise.
pub fn make_toy_dataset(cfg: &ToyConfig, seed: u64) -> Result<Dataset> {
    if cfg.n_keywords < 2 {
        return Err(Error::Data(format!("a toy dataset needs at least 2 keywords, got {}", cfg.n_keywords)));
    }
    if cfg.n_mels == 0 || cfg.n_frames == 0 || cfg.n_per_keyword == 0 {
        return Err(Error::Config("toy n_mels, n_frames and n_per_keyword must be positive".into()));
    }
    if !(cfg.valid_fraction >= 0.0 && cfg.test_fraction >= 0.0 && cfg.valid_fraction + cfg.test_fraction < 1.0) {
        return Err(Error::Config("toy split fractions must be non-negative and sum below 1".into()));
    }
    let names: Vec<String> = match &cfg.keywords {
        Some(k) => {
            if k.len() != cfg.n_keywords {
                return Err(Error::Config(format!("{} keyword names given for n_keywords = {}", k.len(), cfg.n_keywords)));
            }
            k.iter().map(|s| KeywordText::new(s).map(|k| k.as_str().to_string())).collect::<Result<_>>()?
        }
        None => {
            let vocab = toy_vocabulary();
            if cfg.n_keywords > vocab.len() {
                return Err(Error::Config(format!("at most {} default toy keywords", vocab.len())));
            }
            vocab[..cfg.n_keywords].iter().map(|s| s.to_string()).collect()
        }
    };
    let mut records = Vec::new();
    let mut features = FeatureBank::new();
    let mut index = 0;
    let mut push = |label: Label, split: Split, frames: Vec<f64>, id: String| -> Result<()> {
        features.insert(id.clone(), MelFeatureSequence::new(cfg.n_frames, cfg.n_mels, frames)?);
        records.push(UtteranceRecord { id, label, source: Source::Synthetic { seed, index }, split });
        index += 1;
        Ok(())
    };
    for kw in &names {
        for i in 0..cfg.n_per_keyword {
            let mut rng = draw_rng(seed, &format!("{kw}/{i}"), 0);
            let frames = keyword_utterance(kw, cfg, &mut rng);
            push(Label::Keyword(kw.clone()), split_for(i, cfg.n_per_keyword, cfg), frames, format!("{kw}/{i:04}"))?;
        }
    }
    for i in 0..cfg.n_noise {
        let mut rng = draw_rng(seed, &format!("noise/{i}"), 0);
        let frames = noise_utterance(cfg, &mut rng);
        push(Label::Noise, split_for(i, cfg.n_noise, cfg), frames, format!("{BACKGROUND_NOISE_DIR}/{i:04}"))?;
    }
    let manifest = DatasetManifest::new(records, names, Vec::new())?;
    Ok(Dataset { manifest, features })
}

/// Deterministic generator for draw `index` of record `id` under `seed`.
pub fn draw_rng(seed: u64, id: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((id.len() as u64).to_le_bytes());
    h.update(id.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Reverberation followed by additive noise on every copy.
    Joint,
    /// Either reverberation or noise, chosen with equal probability.
    Independent,
}

/// Feature-domain augmentation. SNR is the ratio of mean squared feature
/// values of the (reverberated) signal and of the scaled noise segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub snr_db_range: [f64; 2],
    pub add_noise: bool,
    pub reverb: bool,
    pub mode: AugmentMode,
    /// Decay time constants (frames) of synthetic impulse responses.
    pub rir_decay_range: [f64; 2],
    pub rir_length: usize,
    pub expansion_factor: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            snr_db_range: [5.0, 25.0],
            add_noise: true,
            reverb: true,
            mode: AugmentMode::Joint,
            rir_decay_range: [0.5, 3.0],
            rir_length: 8,
            expansion_factor: 4,
        }
    }
}

impl AugmentationConfig {
    /// No reverberation, no noise.
    pub fn disabled() -> Self {
        Self { add_noise: false, reverb: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("snr_db_range [{lo}, {hi}] must be finite and non-degenerate")));
        }
        let [dlo, dhi] = self.rir_decay_range;
        if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
            return Err(Error::Config(format!("rir_decay_range [{dlo}, {dhi}] is invalid")));
        }
        if self.rir_length == 0 {
            return Err(Error::Config("rir_length must be positive".into()));
        }
        if self.expansion_factor == 0 {
            return Err(Error::Config("expansion_factor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Augmentation config plus the noise and impulse-response pools it draws from.
#[derive(Clone, Debug)]
pub struct Augmenter {
    pub config: AugmentationConfig,
    pub noise_pool: Vec<MelFeatureSequence>,
    /// Impulse responses along time; synthesized per draw when empty.
    pub rir_pool: Vec<Vec<f64>>,
}

/// What one augmentation draw applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub snr_db: Option<f64>,
    pub rir: Option<Vec<f64>>,
}

impl Augmenter {
    pub fn new(config: AugmentationConfig, noise_pool: Vec<MelFeatureSequence>, rir_pool: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if config.add_noise && noise_pool.is_empty() {
            return Err(Error::Config("noise augmentation requested but the noise pool is empty".into()));
        }
        if let Some(r) = rir_pool.iter().find(|r| r.is_empty() || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("invalid impulse response of length {}", r.len())));
        }
        Ok(Self { config, noise_pool, rir_pool })
    }

    pub fn identity() -> Self {
        Self { config: AugmentationConfig::disabled(), noise_pool: Vec::new(), rir_pool: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        !self.config.add_noise && !self.config.reverb
    }

    pub fn augment(&self, x: &MelFeatureSequence, rng: &mut impl Rng) -> Result<MelFeatureSequence> {
        Ok(self.augment_traced(x, rng)?.0)
    }

    pub fn augment_traced(&self, x: &MelFeatureSequence, rng: &mut impl Rng) -> Result<(MelFeatureSequence, AugmentDraw)> {
        let c = &self.config;
        let (mut do_rir, mut do_noise) = (c.reverb, c.add_noise);
        if c.mode == AugmentMode::Independent && do_rir && do_noise {
            let pick_rir = rng.gen_bool(0.5);
            do_rir = pick_rir;
            do_noise = !pick_rir;
        }
        let mut out = x.clone();
        let mut draw = AugmentDraw { snr_db: None, rir: None };
        if do_rir {
            let h = if self.rir_pool.is_empty() {
                synthetic_rir(c.rir_length, rng.gen_range(c.rir_decay_range[0]..=c.rir_decay_range[1]))
            } else {
                self.rir_pool[rng.gen_range(0..self.rir_pool.len())].clone()
            };
            out = convolve_time(&out, &h)?;
            draw.rir = Some(h);
        }
        if do_noise {
            if self.noise_pool.is_empty() {
                return Err(Error::Config("noise augmentation requested but the noise pool is empty".into()));
            }
            let snr = rng.gen_range(c.snr_db_range[0]..=c.snr_db_range[1]);
            let src = &self.noise_pool[rng.gen_range(0..self.noise_pool.len())];
            let seg = noise_segment(src, out.n_frames(), out.n_mels(), rng)?;
            let mixed = mix_at_snr(out.frames(), &seg, snr)?;
            out = MelFeatureSequence::new(out.n_frames(), out.n_mels(), mixed)?;
            draw.snr_db = Some(snr);
        }
        Ok((out, draw))
    }
}

/// Exponential-decay impulse response with unit direct path.
pub fn synthetic_rir(len: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|k| (-(k as f64) / decay).exp()).collect();
    let energy = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| v / energy).collect()
}

/// Causal convolution along time per mel bin, truncated to the input length.
pub fn convolve_time(x: &MelFeatureSequence, h: &[f64]) -> Result<MelFeatureSequence> {
    let (t, m) = (x.n_frames(), x.n_mels());
    let mut out = vec![0.0; t * m];
    for ti in 0..t {
        for (k, hk) in h.iter().enumerate().take(ti + 1) {
            let src = x.frame(ti - k);
            for (o, s) in out[ti * m..(ti + 1) * m].iter_mut().zip(src) {
                *o += hk * s;
            }
        }
    }
    MelFeatureSequence::new(t, m, out)
}

fn noise_segment(src: &MelFeatureSequence, t: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if src.n_mels() != m {
        return Err(Error::Shape(format!("noise has {} mel bins, signal has {m}", src.n_mels())));
    }
    let n = src.n_frames();
    let off = rng.gen_range(0..n);
    let mut out = Vec::with_capacity(t * m);
    for ti in 0..t {
        out.extend_from_slice(src.frame((off + ti) % n));
    }
    Ok(out)
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `signal + g * noise` with g chosen so the power ratio equals `snr_db`.
pub fn mix_at_snr(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if signal.len() != noise.len() {
        return Err(Error::Shape(format!("signal has {} values, noise {}", signal.len(), noise.len())));
    }
    if snr_db == f64::INFINITY {
        return Ok(signal.to_vec());
    }
    let ps = mean_power(signal);
    let pn = mean_power(noise);
    if pn == 0.0 {
        return Ok(signal.to_vec());
    }
    let g = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    Ok(signal.iter().zip(noise).map(|(s, n)| s + g * n).collect())
}

/// One evaluation item: features and whether it is the target keyword.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub features: MelFeatureSequence,
    pub positive: bool,
}

/// Enlarges an evaluation set to `expansion_factor` times its size: the
/// clean item followed by augmented copies drawn from (seed, id, copy).
pub fn expand_eval_set(items: &[EvalItem], aug: &Augmenter, seed: u64) -> Result<Vec<EvalItem>> {
    let k = aug.config.expansion_factor.max(1);
    let mut out = Vec::with_capacity(items.len() * k);
    for it in items {
        out.push(it.clone());
        for copy in 1..k {
            let mut rng = draw_rng(seed, &it.id, copy as u64);
            out.push(EvalItem {
                id: format!("{}#{copy}", it.id),
                features: aug.augment(&it.features, &mut rng)?,
                positive: it.positive,
            });
        }
    }
    Ok(out)
}

/// A target keyword with its few-shot positives and the pools used for
/// negatives, validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub keyword: KeywordText,
    pub shots: usize,
    pub sampling_seed: u64,
    pub positives: Vec<String>,
    pub nontarget_pool: Vec<String>,
    pub noise_pool: Vec<String>,
    /// (id, is_target) pairs.
    pub valid_set: Vec<(String, bool)>,
    pub test_set: Vec<(String, bool)>,
}

fn labeled(manifest: &DatasetManifest, split: Split, keyword: &str) -> Vec<(String, bool)> {
    manifest.records_in(split).map(|r| (r.id.clone(), r.label.keyword() == Some(keyword))).collect()
}

/// Draws `shots` training utterances of `keyword`, reproducibly from the seed.
pub fn sample_few_shot(manifest: &DatasetManifest, keyword: &str, shots: usize, sampling_seed: u64) -> Result<FewShotTask> {
    let kw = KeywordText::new(keyword)?;
    let keyword = kw.as_str();
    if !manifest.keyword_inventory.iter().any(|k| k == keyword) {
        return Err(Error::Data(format!("keyword {keyword} is not in the dataset inventory")));
    }
    if shots == 0 {
        return Err(Error::Data("shots must be positive".into()));
    }
    let mut pool: Vec<String> = manifest.keyword_records(keyword, Split::Train).iter().map(|r| r.id.clone()).collect();
    pool.sort();
    if pool.len() < shots {
        return Err(Error::Data(format!(
            "keyword {keyword} has {} training utterances, {shots} shots requested",
            pool.len()
        )));
    }
    let mut rng = draw_rng(sampling_seed, keyword, 0);
    pool.shuffle(&mut rng);
    pool.truncate(shots);
    let nontarget_pool = manifest
        .records_in(Split::Train)
        .filter(|r| matches!(r.label.keyword(), Some(k) if k != keyword))
        .map(|r| r.id.clone())
        .collect();
    let noise_pool = manifest.records_in(Split::Train).filter(|r| r.label == Label::Noise).map(|r| r.id.clone()).collect();
    Ok(FewShotTask {
        keyword: kw.clone(),
        shots,
        sampling_seed,
        positives: pool,
        nontarget_pool,
        noise_pool,
        valid_set: labeled(manifest, Split::Valid, keyword),
        test_set: labeled(manifest, Split::Test, keyword),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_serializes_noise_as_marker() {
        assert_eq!(serde_json::to_string(&Label::Noise).unwrap(), "\"NOISE\"");
        let l: Label = serde_json::from_str("\"yes\"").unwrap();
        assert_eq!(l, Label::Keyword("yes".into()));
    }

    #[test]
    fn vocabulary_covers_both_partitions() {
        let v = toy_vocabulary();
        assert_eq!(v.len(), 35);
        assert_eq!(v.iter().collect::<BTreeSet<_>>().len(), 35);
        let first8: Vec<_> = v[..8].iter().map(|k| partition_of(k)).collect();
        assert!(first8.contains(&Partition::Seen) && first8.contains(&Partition::Unseen));
    }

    #[test]
    fn toy_requires_two_keywords() {
        let cfg = ToyConfig { n_keywords: 1, ..ToyConfig::default() };
        assert!(matches!(make_toy_dataset(&cfg, 1), Err(Error::Data(_))));
    }

    #[test]
    fn rir_has_unit_energy() {
        let h = synthetic_rir(8, 2.0);
        assert!((h.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn noise_without_pool_is_a_config_error() {
        assert!(matches!(Augmenter::new(AugmentationConfig::default(), vec![], vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn infinite_snr_is_identity() {
        let s = vec![1.0, -2.0, 3.0];
        assert_eq!(mix_at_snr(&s, &[5.0, 5.0, 5.0], f64::INFINITY).unwrap(), s);
    }
}
