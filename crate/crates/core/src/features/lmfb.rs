//! Log mel-scale filterbank features.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmfbConfig {
    pub sample_rate_hz: u32,
    /// Samples per frame (25 ms at 16 kHz).
    pub frame_len: usize,
    /// Hop between frames (10 ms at 16 kHz).
    pub frame_shift: usize,
    pub n_mels: usize,
    pub fft_size: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Added to the mel power before the log.
    pub log_floor: f64,
    /// Per-utterance mean/variance normalisation of each mel bin.
    pub normalize: bool,
}

impl Default for LmfbConfig {
    fn default() -> Self {
        LmfbConfig {
            sample_rate_hz: 16_000,
            frame_len: 400,
            frame_shift: 160,
            n_mels: 80,
            fft_size: 512,
            f_min_hz: 0.0,
            f_max_hz: 8_000.0,
            log_floor: 1e-10,
            normalize: false,
        }
    }
}

impl LmfbConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frame_len == 0 || self.frame_shift == 0 {
            return bad("frame_len and frame_shift must be positive".into());
        }
        if self.frame_len > self.fft_size {
            return bad(format!("frame_len {} exceeds fft_size {}", self.frame_len, self.fft_size));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if self.log_floor <= 0.0 {
            return bad(format!("log_floor must be > 0, got {}", self.log_floor));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(0.0 <= self.f_min_hz && self.f_min_hz < self.f_max_hz && self.f_max_hz <= nyquist) {
            return bad(format!("mel range {}..{} Hz invalid for Nyquist {nyquist} Hz", self.f_min_hz, self.f_max_hz));
        }
        Ok(())
    }

    /// `floor((len − frame_len) / frame_shift) + 1`, or `None` if too short.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        (samples >= self.frame_len).then(|| (samples - self.frame_len) / self.frame_shift + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peaks at `n_mels` points equally spaced on the
/// mel scale between the configured edges.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels × (fft_size / 2 + 1)`
    weights: Vec<f64>,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &LmfbConfig) -> Self {
        let n_bins = cfg.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        MelFilterbank {
            weights,
            n_bins,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.weights[m * self.n_bins..(m + 1) * self.n_bins]
                .iter()
                .zip(power)
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// `n × n_mels` log mel energies of 16 kHz mono audio.
///
/// `sample_rate_hz` is the rate the caller claims for `pcm`; it must match
/// the configuration since no resampling is performed.
pub fn extract_lmfb(pcm: &[f32], sample_rate_hz: u32, cfg: &LmfbConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    if sample_rate_hz != cfg.sample_rate_hz {
        return Err(Error::Config(format!(
            "audio declared at {sample_rate_hz} Hz but features expect {} Hz",
            cfg.sample_rate_hz
        )));
    }
    let frames = cfg.frame_count(pcm.len()).ok_or_else(|| {
        Error::Config(format!(
            "{} samples is shorter than one {}-sample frame",
            pcm.len(),
            cfg.frame_len
        ))
    })?;
    let bank = MelFilterbank::new(cfg);
    let window = hann(cfg.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let n_bins = cfg.fft_size / 2 + 1;

    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut power = vec![0.0; n_bins];
    let mut mel = vec![0.0; cfg.n_mels];
    let mut out = Vec::with_capacity(frames * cfg.n_mels);
    for f in 0..frames {
        let start = f * cfg.frame_shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.frame_len {
                Complex::new(pcm[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, &mut mel);
        out.extend(mel.iter().map(|&e| (e + cfg.log_floor).ln() as f32));
    }
    let mut t = Tensor::new([frames, cfg.n_mels], out)?;
    if cfg.normalize {
        normalize_per_utterance(&mut t);
    }
    Ok(t)
}

/// Zero mean, unit variance per column of an `n × d` tensor.
pub fn normalize_per_utterance(t: &mut Tensor<f32>) {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let data = t.data_mut();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j] as f64).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var.sqrt() + 1e-8);
        for i in 0..n {
            data[i * d + j] = ((data[i * d + j] as f64 - mean) * inv) as f32;
        }
    }
}
