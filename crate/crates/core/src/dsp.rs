//! Windowing, the overcomplete short-time Fourier transform, and overlap-add
//! resynthesis.
//!
//! All transforms use a periodic Hann window and frames that start at sample 0
//! (no centering unless [`StftConfig::center_pad`] is set). The forward
//! transform is a dense product of each frame with a precomputed cosine and sine
//! basis sampled on an `m`-times finer frequency grid than the plain DFT, so
//! `m = 1` is exactly the real DFT.

use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::linalg::gemm;

/// A mono signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        ensure!(!samples.is_empty(), "waveform must contain at least one sample");
        ensure!(sample_rate_hz > 0, "sample rate must be positive");
        ensure!(
            samples.iter().all(|s| s.is_finite()),
            "waveform samples must be finite"
        );
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keeps the first `len` samples.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        ensure!(len >= 1 && len <= self.len(), "cannot truncate to {len} samples");
        Self::new(self.samples[..len].to_vec(), self.sample_rate_hz)
    }
}

impl AsRef<[f64]> for Waveform {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}

/// Periodic Hann window `w[i] = 0.5·(1 − cos(2πi/n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    ensure!(n >= 1, "window length must be at least 1");
    Ok((0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub oversample: usize,
    pub center_pad: bool,
}

impl StftConfig {
    /// Window `k`, 50% overlap, 8× oversampled basis, no padding.
    pub fn new(window_len: usize) -> Self {
        Self {
            window_len,
            hop: window_len / 2,
            oversample: 8,
            center_pad: false,
        }
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn with_hop(mut self, hop: usize) -> Self {
        self.hop = hop;
        self
    }

    pub fn with_center_pad(mut self, center_pad: bool) -> Self {
        self.center_pad = center_pad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window_len >= 2 && self.window_len % 2 == 0,
            "window length must be a positive even integer, got {}",
            self.window_len
        );
        ensure!(
            self.hop >= 1 && self.hop <= self.window_len,
            "hop must lie in 1..={}, got {}",
            self.window_len,
            self.hop
        );
        ensure!(self.oversample >= 1, "oversampling factor must be positive");
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.oversample * self.window_len / 2 + 1
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        let padded = if self.center_pad { len + self.window_len } else { len };
        ensure!(
            padded >= self.window_len,
            "signal of {len} samples is shorter than the {}-sample window",
            self.window_len
        );
        Ok((padded - self.window_len) / self.hop + 1)
    }
}

/// Non-negative magnitudes for one window length, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    window_len: usize,
    oversample: usize,
    frames: usize,
    bins: usize,
    magnitudes: Vec<f64>,
}

impl Spectrogram {
    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn oversample(&self) -> usize {
        self.oversample
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.magnitudes[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, bin: usize) -> f64 {
        self.magnitudes[t * self.bins + bin]
    }
}

/// Windowed cosine and sine bases for one window length, each stored k×B
/// row-major so a frame matrix (T×k) times the basis gives T×B coefficients.
#[derive(Debug, Clone)]
pub struct FourierBasis {
    window_len: usize,
    bins: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl FourierBasis {
    pub fn new(window_len: usize, oversample: usize) -> Result<Self> {
        StftConfig::new(window_len)
            .with_oversample(oversample)
            .validate()?;
        let window = hann_window(window_len)?;
        let bins = oversample * window_len / 2 + 1;
        let period = (oversample * window_len) as f64;
        let mut cos = vec![0.0; window_len * bins];
        let mut sin = vec![0.0; window_len * bins];
        for (n, w) in window.iter().enumerate() {
            for i in 0..bins {
                // Reduce the phase index modulo the period before scaling so large
                // products keep full precision.
                let phase = 2.0 * PI * ((i * n) % (oversample * window_len)) as f64 / period;
                cos[n * bins + i] = w * phase.cos();
                sin[n * bins + i] = w * phase.sin();
            }
        }
        Ok(Self {
            window_len,
            bins,
            cos,
            sin,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn cos(&self) -> &[f64] {
        &self.cos
    }

    pub fn sin(&self) -> &[f64] {
        &self.sin
    }

    /// Projects a T×k frame matrix; returns (Σ w·x·cos, Σ w·x·sin), each T×B.
    pub fn project(&self, frames: &[f64], count: usize) -> (Vec<f64>, Vec<f64>) {
        let mut c = vec![0.0; count * self.bins];
        let mut s = vec![0.0; count * self.bins];
        gemm(count, self.window_len, self.bins, frames, false, &self.cos, false, &mut c, false);
        gemm(count, self.window_len, self.bins, frames, false, &self.sin, false, &mut s, false);
        (c, s)
    }

    /// Magnitudes of a T×k frame matrix, T×B.
    pub fn magnitudes(&self, frames: &[f64], count: usize) -> Vec<f64> {
        let (c, s) = self.project(frames, count);
        c.iter().zip(&s).map(|(c, s)| c.hypot(*s)).collect()
    }
}

/// Slices `samples` into `count` frames of `window_len`, stored row-major.
pub fn frame_signal(samples: &[f64], window_len: usize, hop: usize) -> Result<(Vec<f64>, usize)> {
    ensure!(window_len >= 1 && hop >= 1, "window and hop must be positive");
    ensure!(
        samples.len() >= window_len,
        "signal of {} samples is shorter than the {window_len}-sample window",
        samples.len()
    );
    let count = (samples.len() - window_len) / hop + 1;
    let mut frames = Vec::with_capacity(count * window_len);
    for t in 0..count {
        frames.extend_from_slice(&samples[t * hop..t * hop + window_len]);
    }
    Ok((frames, count))
}

fn padded_samples(x: &Waveform, cfg: &StftConfig) -> Vec<f64> {
    if cfg.center_pad {
        let half = cfg.window_len / 2;
        let mut padded = vec![0.0; x.len() + 2 * half];
        padded[half..half + x.len()].copy_from_slice(x.samples());
        padded
    } else {
        x.samples().to_vec()
    }
}

/// Magnitude spectrogram over the `m`-times oversampled basis.
pub fn stft_magnitude(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    cfg.frame_count(x.len())?;
    let basis = FourierBasis::new(cfg.window_len, cfg.oversample)?;
    let (frames, count) = frame_signal(&padded_samples(x, cfg), cfg.window_len, cfg.hop)?;
    Ok(Spectrogram {
        window_len: cfg.window_len,
        oversample: cfg.oversample,
        frames: count,
        bins: basis.bins(),
        magnitudes: basis.magnitudes(&frames, count),
    })
}

/// Complex STFT frames (T × (k/2+1)), standard `e^{-jωn}` sign convention.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexFrames {
    pub window_len: usize,
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexFrames {
    pub fn zeros(window_len: usize, frames: usize) -> Self {
        let bins = window_len / 2 + 1;
        Self {
            window_len,
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
        }
    }

    pub fn modulus(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }
}

pub fn stft_complex(x: &Waveform, cfg: &StftConfig) -> Result<ComplexFrames> {
    cfg.validate()?;
    ensure!(
        cfg.oversample == 1,
        "the complex STFT is only defined for an oversampling factor of 1"
    );
    cfg.frame_count(x.len())?;
    let basis = FourierBasis::new(cfg.window_len, 1)?;
    let (frames, count) = frame_signal(&padded_samples(x, cfg), cfg.window_len, cfg.hop)?;
    let (re, sin) = basis.project(&frames, count);
    Ok(ComplexFrames {
        window_len: cfg.window_len,
        frames: count,
        bins: basis.bins(),
        re,
        im: sin.into_iter().map(|s| -s).collect(),
    })
}

/// Σ_t w²[n − t·hop] for `frames` frames; the normalizer of windowed overlap-add.
pub fn synthesis_envelope(window_len: usize, hop: usize, frames: usize) -> Result<Vec<f64>> {
    ensure!(frames >= 1, "at least one frame is required");
    let window = hann_window(window_len)?;
    let len = (frames - 1) * hop + window_len;
    let mut env = vec![0.0; len];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            env[t * hop + n] += w * w;
        }
    }
    Ok(env)
}

/// Matrix (rows = coefficient slots, cols = time samples) that maps one frame's
/// non-redundant spectrum to its synthesis-windowed inverse DFT.
///
/// Slot order: `re[0], re[1], im[1], …, re[k/2−1], im[k/2−1], re[k/2]`; the DC and
/// Nyquist imaginary parts are identically zero for a real frame and have no slot.
pub fn inverse_dft_matrix(window_len: usize) -> Result<Vec<f64>> {
    ensure!(
        window_len >= 2 && window_len % 2 == 0,
        "window length must be a positive even integer"
    );
    let k = window_len;
    let half = k / 2;
    let window = hann_window(k)?;
    let mut m = vec![0.0; k * k];
    let scale = 1.0 / k as f64;
    for n in 0..k {
        let w = window[n] * scale;
        m[n] = w;
        for i in 1..half {
            let phase = 2.0 * PI * ((i * n) % k) as f64 / k as f64;
            m[(2 * i - 1) * k + n] = 2.0 * w * phase.cos();
            m[(2 * i) * k + n] = -2.0 * w * phase.sin();
        }
        m[(k - 1) * k + n] = if n % 2 == 0 { w } else { -w };
    }
    Ok(m)
}

/// Packs complex frames into the slot layout of [`inverse_dft_matrix`].
pub fn pack_spectrum(frames: &ComplexFrames) -> Vec<f64> {
    let k = frames.window_len;
    let half = k / 2;
    let mut out = vec![0.0; frames.frames * k];
    for t in 0..frames.frames {
        let re = &frames.re[t * frames.bins..(t + 1) * frames.bins];
        let im = &frames.im[t * frames.bins..(t + 1) * frames.bins];
        let row = &mut out[t * k..(t + 1) * k];
        row[0] = re[0];
        for i in 1..half {
            row[2 * i - 1] = re[i];
            row[2 * i] = im[i];
        }
        row[k - 1] = re[half];
    }
    out
}

/// Sums frames (T×k) at offsets `t·hop`; the adjoint of [`frame_signal`].
pub fn overlap_add(frames: &[f64], window_len: usize, hop: usize) -> Vec<f64> {
    let count = frames.len() / window_len;
    if count == 0 {
        return Vec::new();
    }
    let mut out = vec![0.0; (count - 1) * hop + window_len];
    for t in 0..count {
        for (o, f) in out[t * hop..t * hop + window_len]
            .iter_mut()
            .zip(&frames[t * window_len..(t + 1) * window_len])
        {
            *o += f;
        }
    }
    out
}

/// Inverse STFT by windowed overlap-add, normalized by the squared-window
/// envelope. Output length is `(T − 1)·hop + k`.
pub fn istft_overlap_add(frames: &ComplexFrames, window_len: usize, hop: usize) -> Result<Vec<f64>> {
    ensure!(
        window_len >= 2 && window_len % 2 == 0,
        "window length must be a positive even integer"
    );
    ensure!(
        hop * 2 == window_len,
        "overlap-add resynthesis requires hop = k/2 (k = {window_len}, hop = {hop})"
    );
    ensure!(
        frames.window_len == window_len && frames.bins == window_len / 2 + 1,
        "frames were computed for window {}, not {window_len}",
        frames.window_len
    );
    ensure!(frames.frames >= 1, "at least one frame is required");
    let synth = inverse_dft_matrix(window_len)?;
    let packed = pack_spectrum(frames);
    let mut time = vec![0.0; frames.frames * window_len];
    gemm(
        frames.frames,
        window_len,
        window_len,
        &packed,
        false,
        &synth,
        false,
        &mut time,
        false,
    );
    let mut out = overlap_add(&time, window_len, hop);
    let env = synthesis_envelope(window_len, hop, frames.frames)?;
    for (o, e) in out.iter_mut().zip(&env) {
        *o /= e.max(ENVELOPE_FLOOR);
    }
    Ok(out)
}

pub const ENVELOPE_FLOOR: f64 = 1e-12;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters (n_mel × bins) over bins spanning 0 Hz to Nyquist.
///
/// A filter too narrow to cover any bin centre gets unit weight on the bin
/// nearest its peak, so every row has positive mass.
pub fn mel_filterbank(bins: usize, n_mel: usize, sample_rate_hz: u32) -> Result<Vec<f64>> {
    ensure!(bins >= 2, "filterbank needs at least two bins");
    ensure!(n_mel >= 1, "filterbank needs at least one band");
    ensure!(
        n_mel < bins,
        "number of mel bands ({n_mel}) must be smaller than the number of bins ({bins})"
    );
    ensure!(sample_rate_hz > 0, "sample rate must be positive");
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mel + 2)
        .map(|j| mel_to_hz(top * j as f64 / (n_mel + 1) as f64))
        .collect();
    let bin_hz = |i: usize| nyquist * i as f64 / (bins - 1) as f64;
    let mut fb = vec![0.0; n_mel * bins];
    for j in 0..n_mel {
        let (lo, centre, hi) = (edges[j], edges[j + 1], edges[j + 2]);
        let row = &mut fb[j * bins..(j + 1) * bins];
        for (i, w) in row.iter_mut().enumerate() {
            let f = bin_hz(i);
            let up = (f - lo) / (centre - lo);
            let down = (hi - f) / (hi - centre);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            let nearest = ((centre / nyquist) * (bins - 1) as f64).round() as usize;
            row[nearest.min(bins - 1)] = 1.0;
        }
    }
    Ok(fb)
}
