//! Diagnostics for trained generators.

use serde::{Deserialize, Serialize};

use crate::dsp::{stft_magnitude, StftConfig, Waveform};
use crate::error::{ensure, Result};
use crate::linalg::jacobi_eigen;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    /// Fraction of samples within the radius of their nearest mode.
    pub fraction_within: f64,
    /// Fraction of samples whose nearest mode is each mode.
    pub per_mode_share: Vec<f64>,
    pub median_nearest_dist: f64,
}

pub fn mode_coverage<S: AsRef<[f64]>>(samples: &[S], modes: &[Vec<f64>], radius: f64) -> Result<ModeCoverage> {
    ensure!(!modes.is_empty(), "at least one mode is required");
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let dim = modes[0].len();
    ensure!(
        modes.iter().all(|m| m.len() == dim) && samples.iter().all(|s| s.as_ref().len() == dim),
        "samples and modes must share dimension {dim}"
    );
    let mut counts = vec![0usize; modes.len()];
    let mut within = 0usize;
    let mut nearest = Vec::with_capacity(samples.len());
    for s in samples {
        let (idx, d) = modes
            .iter()
            .map(|m| euclid(s.as_ref(), m))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("modes nonempty");
        counts[idx] += 1;
        if d <= radius {
            within += 1;
        }
        nearest.push(d);
    }
    let n = samples.len() as f64;
    Ok(ModeCoverage {
        fraction_within: within as f64 / n,
        per_mode_share: counts.iter().map(|&c| c as f64 / n).collect(),
        median_nearest_dist: median(nearest),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormProjectionStats {
    pub mean_l2_norm: f64,
    pub std_l2_norm: f64,
    /// Mean over samples of the coordinate average `Σ x_i / n`.
    pub mean_coord_avg: f64,
    pub std_coord_avg: f64,
}

pub fn norm_projection_stats<S: AsRef<[f64]>>(samples: &[S]) -> Result<NormProjectionStats> {
    ensure!(!samples.is_empty(), "no samples to evaluate");
    let norms: Vec<f64> = samples
        .iter()
        .map(|s| s.as_ref().iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let avgs: Vec<f64> = samples
        .iter()
        .map(|s| {
            let s = s.as_ref();
            s.iter().sum::<f64>() / s.len().max(1) as f64
        })
        .collect();
    let (mn, sn) = moments(&norms);
    let (ma, sa) = moments(&avgs);
    Ok(NormProjectionStats {
        mean_l2_norm: mn,
        std_l2_norm: sn,
        mean_coord_avg: ma,
        std_coord_avg: sa,
    })
}

/// Mean and population standard deviation.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `E‖x‖₂` for `x ~ N(0, I_dim)`, i.e. `√2·Γ((dim+1)/2)/Γ(dim/2)`, by the
/// recurrence `r(d) = (d − 1)/r(d − 1)`.
pub fn chi_mean(dim: usize) -> f64 {
    assert!(dim >= 1, "chi_mean needs a positive dimension");
    let mut r = (2.0 / std::f64::consts::PI).sqrt();
    for d in 2..=dim {
        r = (d - 1) as f64 / r;
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    /// Row-major `dim × dim`.
    Full(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Covariance,
}

const PSD_TOL: f64 = 1e-10;

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        let d = mean.len();
        ensure!(d >= 1, "Gaussian statistics need at least one dimension");
        match &cov {
            Covariance::Diagonal(v) => {
                ensure!(v.len() == d, "diagonal covariance of length {} for dimension {d}", v.len());
                ensure!(
                    v.iter().all(|&x| x >= -PSD_TOL),
                    "covariance is not positive semi-definite"
                );
            }
            Covariance::Full(m) => {
                ensure!(m.len() == d * d, "covariance of {} entries for dimension {d}", m.len());
                for i in 0..d {
                    for j in 0..i {
                        let (a, b) = (m[i * d + j], m[j * d + i]);
                        ensure!(
                            (a - b).abs() <= PSD_TOL * a.abs().max(b.abs()).max(1.0),
                            "covariance is not symmetric at ({i}, {j})"
                        );
                    }
                }
            }
        }
        Ok(Self { mean, cov })
    }

    /// Sample mean and unbiased covariance of equal-length vectors.
    pub fn from_samples<S: AsRef<[f64]>>(samples: &[S], diagonal: bool) -> Result<Self> {
        ensure!(samples.len() >= 2, "need at least two samples, got {}", samples.len());
        let d = samples[0].as_ref().len();
        ensure!(
            samples.iter().all(|s| s.as_ref().len() == d),
            "samples must share one dimension"
        );
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            mean.iter_mut().zip(s.as_ref()).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        // Pairwise form of the unbiased covariance, Σ_{i<j} δδᵀ / (n(n−1)) with
        // δ = x_i − x_j; it is exactly zero for identical samples.
        let norm = n * (n - 1.0);
        let cov = if diagonal {
            let mut v = vec![0.0; d];
            for (i, a) in samples.iter().enumerate() {
                for b in &samples[i + 1..] {
                    for ((v, x), y) in v.iter_mut().zip(a.as_ref()).zip(b.as_ref()) {
                        *v += (x - y) * (x - y);
                    }
                }
            }
            v.iter_mut().for_each(|v| *v /= norm);
            Covariance::Diagonal(v)
        } else {
            let mut c = vec![0.0; d * d];
            for (i, a) in samples.iter().enumerate() {
                for b in &samples[i + 1..] {
                    let delta: Vec<f64> = a.as_ref().iter().zip(b.as_ref()).map(|(x, y)| x - y).collect();
                    for r in 0..d {
                        for q in 0..=r {
                            c[r * d + q] += delta[r] * delta[q];
                        }
                    }
                }
            }
            for r in 0..d {
                for q in 0..=r {
                    let v = c[r * d + q] / norm;
                    c[r * d + q] = v;
                    c[q * d + r] = v;
                }
            }
            Covariance::Full(c)
        };
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn full(&self) -> Vec<f64> {
        let d = self.dim();
        match &self.cov {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => {
                let mut m = vec![0.0; d * d];
                for (i, x) in v.iter().enumerate() {
                    m[i * d + i] = *x;
                }
                m
            }
        }
    }
}

/// Eigen-decomposes a symmetric PSD matrix, clamping round-off negatives.
fn psd_eigen(m: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (vals, vecs) = jacobi_eigen(m, d);
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    ensure!(
        vals.iter().all(|&v| v >= -PSD_TOL * scale),
        "covariance is not positive semi-definite (eigenvalue {})",
        vals.iter().cloned().fold(f64::INFINITY, f64::min)
    );
    Ok((vals.into_iter().map(|v| v.max(0.0)).collect(), vecs))
}

/// `V·diag(f(λ))·Vᵀ` with eigenvectors stored column-wise.
fn spectral_apply(vals: &[f64], vecs: &[f64], d: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for (k, &l) in vals.iter().enumerate() {
        let fl = f(l);
        for i in 0..d {
            let vik = vecs[i * d + k] * fl;
            for j in 0..d {
                out[i * d + j] += vik * vecs[j * d + k];
            }
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`.
///
/// Two diagonal inputs use the element-wise square root; otherwise the trace
/// term is `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_gaussian(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    ensure!(b.dim() == d, "dimension mismatch ({d} vs {})", b.dim());
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace_term = match (&a.cov, &b.cov) {
        (Covariance::Diagonal(va), Covariance::Diagonal(vb)) => va
            .iter()
            .zip(vb)
            .map(|(x, y)| {
                let (x, y) = (x.max(0.0), y.max(0.0));
                x + y - 2.0 * (x * y).sqrt()
            })
            .sum(),
        _ => {
            let (ma, mb) = (a.full(), b.full());
            let (la, va) = psd_eigen(&ma, d)?;
            psd_eigen(&mb, d)?;
            let sa = spectral_apply(&la, &va, d, f64::sqrt);
            let inner = matmul_sq(&matmul_sq(&sa, &mb, d), &sa, d);
            // Symmetrize round-off before the second decomposition.
            let mut sym = inner.clone();
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
                }
            }
            let (li, _) = psd_eigen(&sym, d)?;
            let tr_a: f64 = (0..d).map(|i| ma[i * d + i]).sum();
            let tr_b: f64 = (0..d).map(|i| mb[i * d + i]).sum();
            tr_a + tr_b - 2.0 * li.iter().map(|l| l.sqrt()).sum::<f64>()
        }
    };
    Ok((mean_term + trace_term).max(0.0))
}

pub const EMBED_LOG_EPS: f64 = 1e-5;

/// Time-mean log-magnitude spectrum of one waveform.
pub fn spectral_embedding(x: &Waveform, cfg: &StftConfig) -> Result<Vec<f64>> {
    let spec = stft_magnitude(x, cfg)?;
    let bins = spec.bins();
    let mut acc = vec![0.0; bins];
    for t in 0..spec.frames() {
        for (a, s) in acc.iter_mut().zip(spec.frame(t)) {
            *a += (s + EMBED_LOG_EPS).ln();
        }
    }
    let n = spec.frames() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Gaussian fit of spectral embeddings at window `k` with the default
/// oversampling, diagonal covariance.
pub fn embed_spectral(samples: &[Waveform], k: usize) -> Result<GaussianStats> {
    embed_spectral_with(samples, &StftConfig::new(k), true)
}

pub fn embed_spectral_with(samples: &[Waveform], cfg: &StftConfig, diagonal: bool) -> Result<GaussianStats> {
    ensure!(samples.len() >= 2, "need at least two waveforms, got {}", samples.len());
    let len = samples[0].len();
    ensure!(
        samples.iter().all(|w| w.len() == len),
        "waveforms must have equal length"
    );
    let emb: Vec<Vec<f64>> = samples
        .iter()
        .map(|w| spectral_embedding(w, cfg))
        .collect::<Result<_>>()?;
    GaussianStats::from_samples(&emb, diagonal)
}

/// Bin of the largest time-averaged magnitude at window `k`, `m = 1`.
pub fn peak_bin(y: &Waveform, k: usize) -> Result<usize> {
    let spec = stft_magnitude(y, &StftConfig::new(k).with_oversample(1))?;
    let mut avg = vec![0.0; spec.bins()];
    for t in 0..spec.frames() {
        avg.iter_mut().zip(spec.frame(t)).for_each(|(a, s)| *a += s);
    }
    Ok(avg
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least one bin"))
}

/// Whether the spectral peak lies within one bin of `f0_hz`.
pub fn pitch_peak_match(y: &Waveform, f0_hz: f64, k: usize) -> Result<bool> {
    let nyquist = y.sample_rate_hz() as f64 / 2.0;
    ensure!(
        f0_hz > 0.0 && f0_hz < nyquist,
        "f0 {f0_hz} Hz is outside (0, {nyquist}) Hz"
    );
    let expected = f0_hz * k as f64 / y.sample_rate_hz() as f64;
    Ok((peak_bin(y, k)? as f64 - expected).abs() <= 1.0)
}
