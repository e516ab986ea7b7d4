//! Keyword scoring (fixed text-embedding classifier), binary cross-entropy,
//! and detection metrics.
//!
//! * EER sweeps thresholds over the distinct scores (a score is accepted when
//!   it is `>= threshold`, so tied scores move together) and interpolates
//!   linearly between the two operating points that bracket FAR = FRR.
//! * AP is the step-interpolated area under the precision/recall curve over
//!   the ranking by descending score; tied scores keep their input order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, sigmoid};
use crate::text::{KeywordText, TextEmbedding};

/// Probability clamp applied inside [`bce_loss`].
pub const PROB_CLAMP: f64 = 1e-7;

/// p(k|x) = sigmoid(te . ae); for unit-norm inputs the logit is the cosine.
pub fn keyword_probability(ae: &[f64], te: &TextEmbedding) -> Result<f64> {
    Ok(sigmoid(keyword_logit(ae, te)?))
}

pub fn keyword_logit(ae: &[f64], te: &TextEmbedding) -> Result<f64> {
    if ae.len() != te.dim() {
        return Err(Error::Shape(format!("embedding dimensions differ: {} vs {}", ae.len(), te.dim())));
    }
    Ok(dot(ae, te.as_slice()))
}

/// -[y log p + (1 - y) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
pub fn bce_loss(p: f64, label: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// BCE of sigmoid(logit) and its derivative with respect to the logit.
/// The derivative is zero where the clamp is active.
pub fn bce_with_logit(logit: f64, label: bool) -> (f64, f64) {
    let p = sigmoid(logit);
    let y = if label { 1.0 } else { 0.0 };
    let grad = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP { p - y } else { 0.0 };
    (bce_loss(p, label), grad)
}

pub fn mean_bce(probs: &[f64], labels: &[bool]) -> f64 {
    probs.iter().zip(labels).map(|(&p, &l)| bce_loss(p, l)).sum::<f64>() / probs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Scores in [0, 1].
    Probability,
    /// Raw cosine in [-1, 1].
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub score: f64,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub keyword: KeywordText,
    pub mode: ScoreMode,
    pub scores: Vec<DetectionScore>,
}

impl ScoreSet {
    pub fn new(keyword: KeywordText, mode: ScoreMode, scores: Vec<DetectionScore>) -> Self {
        Self { keyword, mode, scores }
    }

    pub fn from_pairs(keyword: KeywordText, mode: ScoreMode, pairs: impl IntoIterator<Item = (f64, bool)>) -> Self {
        let scores = pairs.into_iter().map(|(score, positive)| DetectionScore { score, positive }).collect();
        Self { keyword, mode, scores }
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.scores.iter().filter(|s| s.positive).count();
        (pos, self.scores.len() - pos)
    }

    fn check_finite(&self) -> Result<()> {
        if self.scores.iter().any(|s| !s.score.is_finite()) {
            return Err(Error::Input("score set contains non-finite scores".into()));
        }
        Ok(())
    }

    /// Indices ordered by descending score, ties in input order.
    fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].score.partial_cmp(&self.scores[a].score).expect("finite"));
        idx
    }
}

/// Equal error rate in percent.
pub fn compute_eer(set: &ScoreSet) -> Result<f64> {
    set.check_finite()?;
    let (n_pos, n_neg) = set.counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "EER needs positives and negatives (got {n_pos} positive, {n_neg} negative)"
        )));
    }
    let order = set.ranking();
    let (p, n) = (n_pos as f64, n_neg as f64);
    // Operating points as (false accepts, false rejects), threshold descending.
    let mut points = vec![(0usize, n_pos)];
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]].score;
        let (mut fa, mut fr) = *points.last().expect("non-empty");
        while i < order.len() && set.scores[order[i]].score == s {
            if set.scores[order[i]].positive {
                fr -= 1;
            } else {
                fa += 1;
            }
            i += 1;
        }
        points.push((fa, fr));
    }
    let rate = |(fa, fr): (usize, usize)| (fa as f64 / n, fr as f64 / p);
    let mut prev = rate(points[0]);
    for &pt in &points[1..] {
        let (far, frr) = rate(pt);
        let d = far - frr;
        if d == 0.0 {
            return Ok(100.0 * far);
        }
        if d > 0.0 {
            let d_prev = prev.0 - prev.1;
            let t = -d_prev / (d - d_prev);
            return Ok(100.0 * (prev.0 + t * (far - prev.0)));
        }
        prev = (far, frr);
    }
    unreachable!("the sweep always ends at FAR = 1, FRR = 0")
}

/// Average precision in percent.
pub fn compute_ap(set: &ScoreSet) -> Result<f64> {
    set.check_finite()?;
    let (n_pos, _) = set.counts();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in set.ranking().iter().enumerate() {
        if set.scores[i].positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * sum / n_pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub keyword: KeywordText,
    pub mode: ScoreMode,
    pub method: String,
    pub shots: usize,
    pub sampling_id: usize,
    pub eer: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricsReport {
    pub fn from_scores(set: &ScoreSet, method: &str, shots: usize, sampling_id: usize) -> Result<Self> {
        let (n_pos, n_neg) = set.counts();
        Ok(Self {
            keyword: set.keyword.clone(),
            mode: set.mode,
            method: method.to_string(),
            shots,
            sampling_id,
            eer: compute_eer(set)?,
            ap: compute_ap(set)?,
            n_pos,
            n_neg,
        })
    }
}

/// Arithmetic mean of EER and AP over repeated samplings. The result's
/// `sampling_id` is the number of aggregated reports.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Aggregation("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.mode != first.mode) {
        return Err(Error::Aggregation(format!("mixed score modes {:?} and {:?}", first.mode, r.mode)));
    }
    if let Some(r) = reports.iter().find(|r| r.keyword != first.keyword) {
        return Err(Error::Aggregation(format!("mixed keywords `{}` and `{}`", first.keyword, r.keyword)));
    }
    let n = reports.len() as f64;
    Ok(MetricsReport {
        eer: reports.iter().map(|r| r.eer).sum::<f64>() / n,
        ap: reports.iter().map(|r| r.ap).sum::<f64>() / n,
        n_pos: reports.iter().map(|r| r.n_pos).sum::<usize>() / reports.len(),
        n_neg: reports.iter().map(|r| r.n_neg).sum::<usize>() / reports.len(),
        sampling_id: reports.len(),
        ..first.clone()
    })
}

pub const REPORT_CSV_HEADER: &str = "keyword,shots,method,sampling_id,eer,ap";

pub fn report_csv_row(r: &MetricsReport) -> String {
    format!("{},{},{},{},{:.6},{:.6}", r.keyword, r.shots, r.method, r.sampling_id, r.eer, r.ap)
}

/// Appends rows to a run-level CSV, writing the header for a new file.
pub fn append_reports_csv(path: &std::path::Path, rows: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{REPORT_CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(f, "{r}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kw() -> KeywordText {
        KeywordText::new("zero").unwrap()
    }

    fn set(pos: &[f64], neg: &[f64]) -> ScoreSet {
        ScoreSet::from_pairs(
            kw(),
            ScoreMode::Probability,
            pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))),
        )
    }

    #[test]
    fn eer_examples() {
        assert_eq!(compute_eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 0.0);
        assert!((compute_eer(&set(&[0.8, 0.4], &[0.6, 0.2])).unwrap() - 50.0).abs() < 1e-12);
        assert!((compute_eer(&set(&[0.9], &[0.9])).unwrap() - 50.0).abs() < 1e-12);
        assert!((compute_eer(&set(&[0.1], &[0.9])).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn eer_requires_both_classes() {
        assert!(matches!(compute_eer(&set(&[0.9], &[])), Err(Error::UndefinedMetric(_))));
        assert!(matches!(compute_eer(&set(&[], &[0.1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        let ranking = ScoreSet::from_pairs(kw(), ScoreMode::Cosine, [(0.9, true), (0.8, false), (0.7, true), (0.6, false)]);
        assert!((compute_ap(&ranking).unwrap() - 100.0 * (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(compute_ap(&set(&[0.9, 0.8], &[0.1])).unwrap(), 100.0);
        let last = set(&[0.1], &[0.9, 0.8, 0.7]);
        assert!((compute_ap(&last).unwrap() - 25.0).abs() < 1e-12);
        assert!(matches!(compute_ap(&set(&[], &[0.3])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_ties_follow_input_order() {
        let a = ScoreSet::from_pairs(kw(), ScoreMode::Cosine, [(0.5, true), (0.5, false)]);
        let b = ScoreSet::from_pairs(kw(), ScoreMode::Cosine, [(0.5, false), (0.5, true)]);
        assert_eq!(compute_ap(&a).unwrap(), 100.0);
        assert_eq!(compute_ap(&b).unwrap(), 50.0);
    }

    #[test]
    fn probability_examples() {
        let te = TextEmbedding::from_unnormalized(vec![0.6, 0.8]).unwrap();
        assert!((keyword_probability(&[0.6, 0.8], &te).unwrap() - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert_eq!(keyword_probability(&[0.8, -0.6], &te).unwrap(), 0.5);
        assert!((keyword_probability(&[-0.6, -0.8], &te).unwrap() - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!(matches!(keyword_probability(&[1.0], &te), Err(Error::Shape(_))));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, true) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.5, false) - 2f64.ln()).abs() < 1e-15);
        let softplus_m1 = (1.0 + (-1f64).exp()).ln();
        assert!((bce_loss(sigmoid(1.0), true) - softplus_m1).abs() < 1e-12);
        assert!((bce_loss(0.0, true) - -(PROB_CLAMP.ln())).abs() < 1e-9);
        let (l, g) = bce_with_logit(0.3, false);
        assert!((l - bce_loss(sigmoid(0.3), false)).abs() < 1e-15);
        assert!((g - sigmoid(0.3)).abs() < 1e-15);
    }

    fn report(ap: f64, eer: f64, mode: ScoreMode) -> MetricsReport {
        MetricsReport { keyword: kw(), mode, method: "m".into(), shots: 5, sampling_id: 0, eer, ap, n_pos: 2, n_neg: 3 }
    }

    #[test]
    fn aggregate_means() {
        let r = aggregate(&[report(80.0, 4.0, ScoreMode::Probability), report(90.0, 6.0, ScoreMode::Probability)]).unwrap();
        assert_eq!(r.ap, 85.0);
        assert_eq!(r.eer, 5.0);
        let same = vec![report(70.0, 3.0, ScoreMode::Probability); 5];
        let r = aggregate(&same).unwrap();
        assert_eq!((r.ap, r.eer), (70.0, 3.0));
        assert!(matches!(
            aggregate(&[report(1.0, 1.0, ScoreMode::Cosine), report(1.0, 1.0, ScoreMode::Probability)]),
            Err(Error::Aggregation(_))
        ));
        assert!(aggregate(&[]).is_err());
    }
}
