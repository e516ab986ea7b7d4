//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KWSACKPT"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! n_arrays   u64
//! n_arrays times:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     f64 little-endian, product(dims) values
//! ```
//!
//! Array names are namespaced: `acoustic/<parameter or buffer name>` and
//! `text/<parameter name>`. Values are stored as raw IEEE-754 bits, so a
//! save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, LafInit};
use crate::error::{Error, Result};
use crate::head::{Head, HeadInit};
use crate::params::{LayerGroupId, ParamKind};
use crate::text::{FrozenTextEncoder, TextEmbedding, TextEncoder, TextEncoderConfig};

pub const MAGIC: &[u8; 8] = b"KWSACKPT";
pub const FORMAT_VERSION: u32 = 1;
const ACOUSTIC: &str = "acoustic/";
const TEXT: &str = "text/";

/// Module attached on top of the base encoder, in attachment order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    Laf { group: LayerGroupId },
    Kam,
    Head { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub text_encoder: Option<TextEncoderConfig>,
    pub attachments: Vec<Attachment>,
    /// Parameter name to layer group.
    pub groups: Vec<(String, LayerGroupId)>,
    /// Free-form provenance (keyword, adapter spec, ...).
    pub extra: serde_json::Value,
}

/// An acoustic encoder with an optional frozen text encoder.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub acoustic: EncoderModel,
    pub text: Option<FrozenTextEncoder>,
    pub extra: serde_json::Value,
}

/// Acoustic and text encoders sharing an embedding space.
#[derive(Clone, Debug)]
pub struct ModelPair {
    pub acoustic: EncoderModel,
    pub text: FrozenTextEncoder,
}

impl ModelPair {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.acoustic, Some(&self.text), &serde_json::Value::Null)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = decode(bytes)?;
        let text = ck.text.ok_or_else(|| Error::Format("checkpoint has no text encoder".into()))?;
        Ok(Self { acoustic: ck.acoustic, text })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.acoustic, self.text.as_ref(), &self.extra)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Attachments inferred from the parameter order of the store.
pub fn attachments_of(model: &EncoderModel) -> Vec<Attachment> {
    let mut out: Vec<Attachment> = Vec::new();
    for p in model.store().params() {
        let a = match p.tag.kind {
            ParamKind::Laf => Attachment::Laf { group: p.tag.group },
            ParamKind::Kam => Attachment::Kam,
            ParamKind::Head => Attachment::Head { classes: p.shape[0] },
            _ => continue,
        };
        if !out.contains(&a) {
            out.push(a);
        }
    }
    out
}

fn put_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend((*d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend(v.to_le_bytes());
    }
}

pub fn encode(acoustic: &EncoderModel, text: Option<&FrozenTextEncoder>, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        encoder: acoustic.config().clone(),
        text_encoder: text.map(|t| t.config().clone()),
        attachments: attachments_of(acoustic),
        groups: acoustic.store().params().iter().map(|p| (p.name.clone(), p.tag.group)).collect(),
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(FORMAT_VERSION.to_le_bytes());
    buf.extend((meta.len() as u64).to_le_bytes());
    buf.extend(&meta);

    let a = acoustic.store();
    let t = text.map(|t| t.store());
    let count = a.params().len() + a.buffers().len() + t.map_or(0, |t| t.params().len() + t.buffers().len());
    buf.extend((count as u64).to_le_bytes());
    for p in a.params() {
        put_array(&mut buf, &format!("{ACOUSTIC}{}", p.name), &p.shape, &p.value);
    }
    for b in a.buffers() {
        put_array(&mut buf, &format!("{ACOUSTIC}{}", b.name), &[b.value.len()], &b.value);
    }
    if let Some(t) = t {
        for p in t.params() {
            put_array(&mut buf, &format!("{TEXT}{}", p.name), &p.shape, &p.value);
        }
        for b in t.buffers() {
            put_array(&mut buf, &format!("{TEXT}{}", b.name), &[b.value.len()], &b.value);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(4, what)?.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let mut b = [0u8; 8];
        self.take(8, what)?.read_exact(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }
}

struct Array {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn read_arrays(r: &mut Reader<'_>) -> Result<Vec<Array>> {
    let n = r.u64("array count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "array name")?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(Array { name, shape, data });
    }
    if !r.bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(out)
}

fn fill<T: Clone>(store: &mut crate::params::ParamStore<T>, arrays: &mut Vec<Array>, prefix: &str, what: &str) -> Result<()> {
    let mut seen = 0;
    for a in arrays.iter_mut().filter(|a| a.name.starts_with(prefix)) {
        let name = &a.name[prefix.len()..];
        if let Some(id) = store.id_of(name) {
            let p = store.param(id);
            if p.shape != a.shape {
                return Err(Error::Format(format!("{what} parameter {name}: stored shape {:?}, expected {:?}", a.shape, p.shape)));
            }
            *store.value_mut(id) = std::mem::take(&mut a.data);
        } else if let Some(id) = store.buffer_id_of(name) {
            if store.buffer(id).len() != a.data.len() {
                return Err(Error::Format(format!("{what} buffer {name} has the wrong length")));
            }
            *store.buffer_mut(id) = std::mem::take(&mut a.data);
        } else {
            return Err(Error::Format(format!("unexpected {what} array {name}")));
        }
        seen += 1;
    }
    let expected = store.params().len() + store.buffers().len();
    if seen != expected {
        return Err(Error::Format(format!("{what} section holds {seen} arrays, model has {expected}")));
    }
    arrays.retain(|a| !a.name.starts_with(prefix));
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let meta_len = r.u64("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let mut arrays = read_arrays(&mut r)?;

    let mut acoustic = EncoderModel::new(meta.encoder.clone(), 0)?;
    for a in &meta.attachments {
        match *a {
            Attachment::Laf { group } => acoustic.attach_laf(&[group], LafInit::Uniform)?,
            Attachment::Kam => acoustic.attach_kam(),
            Attachment::Head { classes } => {
                let d = acoustic.embed_dim();
                let mut unit = vec![0.0; d];
                unit[0] = 1.0;
                let te = TextEmbedding::from_unnormalized(unit)?;
                let (store, head) = acoustic.store_and_head_mut();
                *head = Some(Head::register(store, classes, d, HeadInit::FromTextEmbedding, &te, 0));
            }
        }
    }
    fill(acoustic.store_mut(), &mut arrays, ACOUSTIC, "acoustic")?;

    let text = match &meta.text_encoder {
        Some(cfg) => {
            let mut t = TextEncoder::new(cfg.clone(), 0)?;
            fill(t.store_mut(), &mut arrays, TEXT, "text")?;
            Some(t.freeze())
        }
        None => None,
    };
    if let Some(a) = arrays.first() {
        return Err(Error::Format(format!("array {} belongs to no namespace", a.name)));
    }
    Ok(Checkpoint { acoustic, text, extra: meta.extra })
}

/// Reads only the metadata record.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let mut r = Reader { bytes };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    r.u32("version")?;
    let n = r.u64("metadata length")?;
    Ok(serde_json::from_slice(r.take(n, "metadata")?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::KeywordText;

    fn pair() -> ModelPair {
        let acoustic = EncoderModel::new(EncoderConfig::compact(6, 8, 4, 6), 1).unwrap();
        let text = TextEncoder::new(TextEncoderConfig { char_dim: 4, hidden: 5, embed_dim: 6 }, 2).unwrap().freeze();
        ModelPair { acoustic, text }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut p = pair();
        p.acoustic.attach_laf(&[LayerGroupId::G5, LayerGroupId::G4], LafInit::default()).unwrap();
        p.acoustic.attach_kam();
        let bytes = p.to_bytes().unwrap();
        let q = ModelPair::from_bytes(&bytes).unwrap();
        assert_eq!(q.to_bytes().unwrap(), bytes);
        let kw = KeywordText::new("yes").unwrap();
        assert_eq!(p.text.encode(&kw), q.text.encode(&kw));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = pair().to_bytes().unwrap();
        assert!(matches!(ModelPair::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelPair::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn acoustic_only_checkpoint_has_no_text() {
        let p = pair();
        let ck = Checkpoint { acoustic: p.acoustic, text: None, extra: serde_json::json!({"keyword": "yes"}) };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.text.is_none());
        assert_eq!(back.extra["keyword"], "yes");
        assert!(ModelPair::from_bytes(&ck.to_bytes().unwrap()).is_err());
    }
}
