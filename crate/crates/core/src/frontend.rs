//! WAV decoding and log-mel filterbank features.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetManifest, FeatureBank, Source};
use crate::encoder::MelFeatureSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { sample_rate: 16_000, n_fft: 512, win_length: 400, hop_length: 160, n_mels: 40, f_min: 20.0, f_max: 7600.0 }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_length == 0 || self.win_length > self.n_fft || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::Config("frontend needs 0 < win_length <= n_fft, positive hop and n_mels".into()));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!("frontend band [{}, {}] is invalid", self.f_min, self.f_max)));
        }
        Ok(())
    }
}

/// Mono samples in [-1, 1] and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = r.spec();
    let ch = spec.channels.max(1) as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<std::result::Result<_, _>>()
        }
        hound::SampleFormat::Float => r.samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>(),
    }
    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mono = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    Ok((mono, spec.sample_rate))
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `n_mels` rows over `n_fft / 2 + 1` bins.
pub fn mel_filterbank(cfg: &FrontendConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let points: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hamming-windowed power spectrum through the mel filterbank, log-compressed.
pub fn log_mel(samples: &[f64], cfg: &FrontendConfig) -> Result<MelFeatureSequence> {
    cfg.validate()?;
    let mut padded = samples.to_vec();
    if padded.len() < cfg.win_length {
        padded.resize(cfg.win_length, 0.0);
    }
    let n_frames = 1 + (padded.len() - cfg.win_length) / cfg.hop_length;
    let window: Vec<f64> = (0..cfg.win_length)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (cfg.win_length - 1).max(1) as f64).cos())
        .collect();
    let fb = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut frames = Vec::with_capacity(n_frames * cfg.n_mels);
    for t in 0..n_frames {
        let seg = &padded[t * cfg.hop_length..t * cfg.hop_length + cfg.win_length];
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            b.re = s * w;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        for filt in &fb {
            let e: f64 = filt.iter().zip(&power).map(|(f, p)| f * p).sum();
            frames.push((e + 1e-6).ln());
        }
    }
    MelFeatureSequence::new(n_frames, cfg.n_mels, frames)
}

/// Decodes every audio record of the manifest into features.
pub fn load_features(manifest: &DatasetManifest, cfg: &FrontendConfig) -> Result<FeatureBank> {
    let mut bank = FeatureBank::new();
    for r in &manifest.records {
        if let Source::Audio { path } = &r.source {
            let (samples, rate) = read_wav(path)?;
            if rate != cfg.sample_rate {
                return Err(Error::Data(format!("{} is sampled at {rate} Hz, expected {}", path.display(), cfg.sample_rate)));
            }
            bank.insert(r.id.clone(), log_mel(&samples, cfg)?);
        }
    }
    Ok(bank)
}

/// Loads a folder dataset and computes its features.
pub fn load_audio_dataset(root: &Path, cfg: &FrontendConfig) -> Result<Dataset> {
    let manifest = crate::data::load_manifest(root)?;
    let features = load_features(&manifest, cfg)?;
    Ok(Dataset { manifest, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_energy_lands_in_matching_band() {
        let cfg = FrontendConfig::default();
        let f0 = 1000.0;
        let x: Vec<f64> = (0..4000).map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / 16000.0).sin()).collect();
        let m = log_mel(&x, &cfg).unwrap();
        assert_eq!(m.n_mels(), 40);
        assert_eq!(m.n_frames(), 1 + (4000 - 400) / 160);
        let frame = m.frame(5);
        let peak = (0..40).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        let fb = mel_filterbank(&cfg);
        let bin = (f0 / (16000.0 / 512.0)).round() as usize;
        assert!(fb[peak][bin] > 0.0);
    }

    #[test]
    fn short_input_yields_one_frame() {
        let m = log_mel(&[0.1; 100], &FrontendConfig::default()).unwrap();
        assert_eq!(m.n_frames(), 1);
    }
}
