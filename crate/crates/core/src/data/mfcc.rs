//! MFCC extraction: 12 mel-frequency cepstral coefficients plus the log of
//! the total frame energy, from 25 ms windows sampled every 10 ms.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_filters: usize,
    /// Cepstral coefficients kept (c1..=cN); the energy column is separate.
    pub n_coeffs: usize,
    pub pre_emphasis: f64,
    pub energy_floor: f64,
    /// Per-utterance mean/variance normalization of all output columns.
    pub normalize: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_filters: 40,
            n_coeffs: 12,
            pre_emphasis: 0.97,
            energy_floor: 1e-10,
            normalize: false,
        }
    }
}

impl MfccConfig {
    /// Output feature dimension: coefficients plus the energy column.
    pub fn dim(&self) -> usize {
        self.n_coeffs + 1
    }
}

/// Triangular mel filterbank spanning 0 Hz to Nyquist on the HTK mel scale.
pub struct MelFilterbank {
    /// Per-filter weights over the one-sided spectrum bins.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_filters: usize, nfft: usize, rate: u32) -> Self {
        let nyquist = rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
            .collect();
        let n_bins = nfft / 2 + 1;
        let bin_hz = rate as f64 / nfft as f64;
        let mut weights = Vec::with_capacity(n_filters);
        for k in 0..n_filters {
            let (lo, center, hi) = (points[k], points[k + 1], points[k + 2]);
            let w: Vec<f64> = (0..n_bins)
                .map(|i| {
                    let f = i as f64 * bin_hz;
                    let rising = if center > lo { (f - lo) / (center - lo) } else { 1.0 };
                    let falling = if hi > center { (hi - f) / (hi - center) } else { 1.0 };
                    rising.min(falling).max(0.0)
                })
                .collect();
            weights.push(w);
        }
        Self {
            weights,
            centers_hz: points[1..=n_filters].to_vec(),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.weights.len()
    }

    pub fn center_hz(&self, filter: usize) -> f64 {
        self.centers_hz[filter]
    }

    /// Filter energies of a one-sided power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(&wi, &p)| wi * p).sum())
            .collect()
    }
}

/// Orthonormal DCT-II coefficients 1..=n of `x`.
fn dct2_coefficients(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() as f64;
    let scale = (2.0 / len).sqrt();
    (1..=n)
        .map(|k| {
            let mut acc = 0.0;
            for (i, &v) in x.iter().enumerate() {
                acc += v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / len).cos();
            }
            scale * acc
        })
        .collect()
}

/// Extract MFCC features from a waveform.
///
/// Returns the row-major [frames × dim] feature matrix and the frame count,
/// with frames = ⌊(n_samples − window)/hop⌋ + 1. Columns 0..n_coeffs hold
/// c1..cN of the DCT-II of the log mel filterbank energies; the final column
/// is the log of the total frame energy, floored at `energy_floor`.
pub fn extract_mfcc(samples: &[f64], rate: u32, cfg: &MfccConfig) -> Result<(Vec<f64>, usize)> {
    if rate < 8000 {
        return Err(Error::Contract(format!(
            "sample rate must be at least 8000 Hz, got {rate}"
        )));
    }
    let window = (rate as f64 * cfg.window_ms / 1000.0).round() as usize;
    let hop = (rate as f64 * cfg.hop_ms / 1000.0).round() as usize;
    if window == 0 || hop == 0 {
        return Err(Error::Config("window and hop must be positive".into()));
    }
    if samples.len() < window {
        return Err(Error::Contract(format!(
            "signal of {} samples is shorter than one {window}-sample window",
            samples.len()
        )));
    }
    let frames = (samples.len() - window) / hop + 1;

    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for i in 1..samples.len() {
        emphasized.push(samples[i] - cfg.pre_emphasis * samples[i - 1]);
    }

    let nfft = window.next_power_of_two();
    let filterbank = MelFilterbank::new(cfg.n_filters, nfft, rate);
    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let dim = cfg.dim();
    let mut out = Vec::with_capacity(frames * dim);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];

    for f in 0..frames {
        let frame = &emphasized[f * hop..f * hop + window];
        let energy: f64 = frame.iter().map(|s| s * s).sum();

        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                Complex::new(frame[i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..nfft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / nfft as f64)
            .collect();

        let mel: Vec<f64> = filterbank
            .apply(&power)
            .into_iter()
            .map(|e| e.max(cfg.energy_floor).ln())
            .collect();
        out.extend(dct2_coefficients(&mel, cfg.n_coeffs));
        out.push(energy.max(cfg.energy_floor).ln());
    }

    if cfg.normalize {
        normalize_columns(&mut out, frames, dim);
    }
    Ok((out, frames))
}

/// Mel filterbank energies per frame, before the DCT. Used to inspect the
/// spectral geometry of the pipeline.
pub fn mel_energies(samples: &[f64], rate: u32, cfg: &MfccConfig) -> Result<(Vec<Vec<f64>>, MelFilterbank)> {
    if samples.len() < (rate as f64 * cfg.window_ms / 1000.0).round() as usize {
        return Err(Error::Contract("signal shorter than one window".into()));
    }
    let window = (rate as f64 * cfg.window_ms / 1000.0).round() as usize;
    let hop = (rate as f64 * cfg.hop_ms / 1000.0).round() as usize;
    let frames = (samples.len() - window) / hop + 1;
    let nfft = window.next_power_of_two();
    let filterbank = MelFilterbank::new(cfg.n_filters, nfft, rate);
    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos())
        .collect();
    let mut emphasized = Vec::with_capacity(samples.len());
    emphasized.push(samples[0]);
    for i in 1..samples.len() {
        emphasized.push(samples[i] - cfg.pre_emphasis * samples[i - 1]);
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut rows = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for f in 0..frames {
        let frame = &emphasized[f * hop..f * hop + window];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < window {
                Complex::new(frame[i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..nfft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / nfft as f64)
            .collect();
        rows.push(filterbank.apply(&power));
    }
    Ok((rows, filterbank))
}

fn normalize_columns(values: &mut [f64], frames: usize, dim: usize) {
    for c in 0..dim {
        let mean: f64 = (0..frames).map(|f| values[f * dim + c]).sum::<f64>() / frames as f64;
        let var: f64 = (0..frames)
            .map(|f| (values[f * dim + c] - mean).powi(2))
            .sum::<f64>()
            / frames as f64;
        let std = var.sqrt().max(1e-10);
        for f in 0..frames {
            values[f * dim + c] = (values[f * dim + c] - mean) / std;
        }
    }
}
