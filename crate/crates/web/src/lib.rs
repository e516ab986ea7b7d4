//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns plain values or JSON strings so the page
//! needs no bundler. The `*_json` functions hold the logic and are callable
//! from native tests; the `#[wasm_bindgen]` wrappers only convert errors.

use serde_json::json;
use wasm_bindgen::prelude::*;

use kws_adapt::adaptation::{audit, default_audit_entries, AuditEntry};
use kws_adapt::conditioning::{laf_normalized_profile, laf_scalar, profile_grid, ActivationBasis, ActivationWeights};
use kws_adapt::encoder::{EncoderConfig, EncoderModel};
use kws_adapt::metrics::{compute_ap, compute_eer, ScoreMode, ScoreSet};
use kws_adapt::tensor::softmax;
use kws_adapt::text::KeywordText;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Mixture weights, raw activation and basis-mean-subtracted profile for one
/// set of mixture logits (one per basis function, standard order).
pub fn laf_profile_json(logits: &[f64], points: usize) -> Result<String, String> {
    let basis = ActivationBasis::standard();
    if logits.len() != basis.len() {
        return Err(format!("expected {} logits, got {}", basis.len(), logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err("logits must be finite".into());
    }
    if points < 2 {
        return Err("need at least two grid points".into());
    }
    let s = ActivationWeights::new(softmax(logits)).map_err(err)?;
    let grid = profile_grid(points);
    let profile = laf_normalized_profile(&s, &basis, &grid).map_err(err)?;
    let raw: Vec<f64> = grid.iter().map(|&h| laf_scalar(h, &s, &basis)).collect();
    let names: Vec<String> = basis.functions().iter().map(|f| format!("{f:?}")).collect();
    Ok(json!({
        "basis": names,
        "weights": s.as_slice(),
        "h": grid,
        "activation": raw,
        "profile": profile.iter().map(|p| p.1).collect::<Vec<_>>(),
    })
    .to_string())
}

/// EER and AP (both in percent) of scores against 0/1 labels.
pub fn detection_metrics_json(scores: &[f64], labels: &[u8]) -> Result<String, String> {
    if scores.len() != labels.len() {
        return Err(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(format!("labels must be 0 or 1, got {l}"));
    }
    let mode = if scores.iter().all(|s| (0.0..=1.0).contains(s)) { ScoreMode::Probability } else { ScoreMode::Cosine };
    let keyword = KeywordText::new("demo").map_err(err)?;
    let set = ScoreSet::from_pairs(keyword, mode, scores.iter().copied().zip(labels.iter().map(|&l| l == 1)));
    let (n_pos, n_neg) = set.counts();
    Ok(json!({
        "eer": compute_eer(&set).map_err(err)?,
        "ap": compute_ap(&set).map_err(err)?,
        "n_pos": n_pos,
        "n_neg": n_neg,
    })
    .to_string())
}

/// Tunable-parameter audit. `encoder` is an encoder configuration as JSON
/// (empty for the full-size default); `entries` a JSON list of selectors
/// (empty for the standard table).
pub fn param_audit_json(encoder: &str, entries: &str) -> Result<String, String> {
    let config: EncoderConfig = if encoder.trim().is_empty() { EncoderConfig::default() } else { serde_json::from_str(encoder).map_err(err)? };
    let entries: Vec<AuditEntry> = if entries.trim().is_empty() { default_audit_entries() } else { serde_json::from_str(entries).map_err(err)? };
    config.validate().map_err(err)?;
    let model = EncoderModel::new(config, 0).map_err(err)?;
    let report = audit(&model, &entries).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[wasm_bindgen]
pub fn laf_profile(logits: Vec<f64>, points: usize) -> Result<String, JsError> {
    laf_profile_json(&logits, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn detection_metrics(scores: Vec<f64>, labels: Vec<u8>) -> Result<String, JsError> {
    detection_metrics_json(&scores, &labels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn param_audit(encoder: &str, entries: &str) -> Result<String, JsError> {
    param_audit_json(encoder, entries).map_err(|e| JsError::new(&e))
}
