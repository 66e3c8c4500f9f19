//! Multi-scale spectrogram distance.
//!
//! For each window length `k` the signals are framed with 50% overlap, projected
//! on the oversampled Hann-windowed Fourier basis, and compared frame by frame:
//!
//! ```text
//! d(a, b) = Σ_k Σ_t ‖s_t(a) − s_t(b)‖₁ + α_k · ‖log(s_t(a) + ε) − log(s_t(b) + ε)‖₂
//! ```
//!
//! [`MultiScaleDistance`] precomputes the bases once and evaluates the distance
//! either directly or as a node of an autodiff [`Graph`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dsp::{frame_signal, mel_filterbank, FourierBasis, Waveform};
use crate::error::{ensure, Result};

/// Window lengths accepted by [`single_scale_distance`] without the override flag.
pub const STANDARD_WINDOWS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];

/// Added under the square root of the per-frame log-L2 norm inside the graph so
/// the norm stays differentiable when two frames coincide.
pub const NORM_EPS: f64 = 1e-12;

/// `α_k = √(k/2)`.
pub fn default_alpha(window_len: usize) -> f64 {
    (window_len as f64 / 2.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub window_lens: Vec<usize>,
    /// One weight per window length, same order.
    pub alphas: Vec<f64>,
    pub oversample: usize,
    pub log_eps: f64,
    pub use_mel: bool,
    /// Mel band count; defaults to half the bin count of each scale.
    pub n_mel: Option<usize>,
    /// Accept window lengths outside [`STANDARD_WINDOWS`] in single-scale mode.
    pub allow_any_window: bool,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self::with_windows(STANDARD_WINDOWS.to_vec())
    }
}

impl DistanceConfig {
    /// Given window lengths with `α_k = √(k/2)`, 8× oversampling and `ε = 1e-5`.
    pub fn with_windows(window_lens: Vec<usize>) -> Self {
        let alphas = window_lens.iter().map(|&k| default_alpha(k)).collect();
        Self {
            window_lens,
            alphas,
            oversample: 8,
            log_eps: 1e-5,
            use_mel: false,
            n_mel: None,
            allow_any_window: false,
        }
    }

    pub fn with_oversample(mut self, oversample: usize) -> Self {
        self.oversample = oversample;
        self
    }

    pub fn with_mel(mut self, use_mel: bool) -> Self {
        self.use_mel = use_mel;
        self
    }

    pub fn with_log_eps(mut self, log_eps: f64) -> Self {
        self.log_eps = log_eps;
        self
    }

    pub fn alpha(&self, window_len: usize) -> Option<f64> {
        self.window_lens
            .iter()
            .position(|&k| k == window_len)
            .map(|i| self.alphas[i])
    }

    pub fn max_window(&self) -> usize {
        self.window_lens.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.window_lens.is_empty(), "at least one window length is required");
        ensure!(
            self.window_lens.windows(2).all(|w| w[0] < w[1]),
            "window lengths must be strictly increasing: {:?}",
            self.window_lens
        );
        ensure!(
            self.window_lens.iter().all(|&k| k >= 2 && k % 2 == 0),
            "window lengths must be positive even integers: {:?}",
            self.window_lens
        );
        ensure!(
            self.alphas.len() == self.window_lens.len(),
            "{} weights for {} window lengths",
            self.alphas.len(),
            self.window_lens.len()
        );
        ensure!(
            self.alphas.iter().all(|a| a.is_finite() && *a >= 0.0),
            "weights must be finite and non-negative: {:?}",
            self.alphas
        );
        ensure!(self.oversample >= 1, "oversampling factor must be positive");
        ensure!(
            self.log_eps > 0.0 && self.log_eps.is_finite(),
            "log floor must be positive, got {}",
            self.log_eps
        );
        Ok(())
    }

    /// The same settings restricted to one window length.
    pub fn single(&self, window_len: usize) -> Result<Self> {
        ensure!(
            self.allow_any_window || STANDARD_WINDOWS.contains(&window_len),
            "window length {window_len} is not one of {STANDARD_WINDOWS:?}"
        );
        let alpha = self.alpha(window_len).unwrap_or_else(|| default_alpha(window_len));
        Ok(Self {
            window_lens: vec![window_len],
            alphas: vec![alpha],
            ..self.clone()
        })
    }
}

/// Contribution of one window length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleTerms {
    pub window_len: usize,
    pub alpha: f64,
    /// Σ_t ‖Δs_t‖₁
    pub l1: f64,
    /// Σ_t ‖Δ log s_t‖₂, unweighted.
    pub log_l2: f64,
}

impl ScaleTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.alpha * self.log_l2
    }
}

#[derive(Debug, Clone)]
struct Scale {
    window_len: usize,
    alpha: f64,
    basis: FourierBasis,
    cos: Arc<[f64]>,
    sin: Arc<[f64]>,
    /// bins × n_mel, so magnitudes (T×bins) times it gives T×n_mel.
    mel: Option<Arc<[f64]>>,
    out_bins: usize,
}

/// Per-scale magnitudes and log-magnitudes of one signal (T×bins each).
#[derive(Debug, Clone)]
pub struct SpectralFeatures {
    scales: Vec<(Vec<f64>, Vec<f64>, usize)>,
}

impl SpectralFeatures {
    /// Smallest of every magnitude in `self` and `other` and every bin-wise
    /// difference between them; small values mean a kink of the loss is near.
    pub fn min_gap(&self, other: &SpectralFeatures) -> f64 {
        self.scales
            .iter()
            .zip(&other.scales)
            .flat_map(|((ma, _, _), (mb, _, _))| ma.iter().zip(mb).map(|(a, b)| a.min(*b).min((a - b).abs())))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Graph nodes holding per-scale magnitudes and log-magnitudes of one signal.
#[derive(Debug, Clone)]
pub struct FeatureNodes {
    scales: Vec<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct MultiScaleDistance {
    cfg: DistanceConfig,
    sample_rate_hz: u32,
    scales: Vec<Scale>,
}

impl MultiScaleDistance {
    pub fn new(cfg: DistanceConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate()?;
        ensure!(sample_rate_hz > 0, "sample rate must be positive");
        let mut scales = Vec::with_capacity(cfg.window_lens.len());
        for (&k, &alpha) in cfg.window_lens.iter().zip(&cfg.alphas) {
            let basis = FourierBasis::new(k, cfg.oversample)?;
            let bins = basis.bins();
            let (mel, out_bins) = if cfg.use_mel {
                let n_mel = cfg.n_mel.unwrap_or(bins / 2);
                let fb = mel_filterbank(bins, n_mel, sample_rate_hz)?;
                let mut t = vec![0.0; bins * n_mel];
                for j in 0..n_mel {
                    for i in 0..bins {
                        t[i * n_mel + j] = fb[j * bins + i];
                    }
                }
                (Some(Arc::from(t)), n_mel)
            } else {
                (None, bins)
            };
            scales.push(Scale {
                window_len: k,
                alpha,
                cos: Arc::from(basis.cos()),
                sin: Arc::from(basis.sin()),
                basis,
                mel,
                out_bins,
            });
        }
        Ok(Self {
            cfg,
            sample_rate_hz,
            scales,
        })
    }

    pub fn config(&self) -> &DistanceConfig {
        &self.cfg
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    fn check_len(&self, len: usize) -> Result<()> {
        ensure!(
            len >= self.cfg.max_window(),
            "signals of {len} samples are shorter than the largest window ({})",
            self.cfg.max_window()
        );
        Ok(())
    }

    pub fn features(&self, x: &[f64]) -> Result<SpectralFeatures> {
        self.check_len(x.len())?;
        let mut scales = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let (frames, count) = frame_signal(x, s.window_len, s.window_len / 2)?;
            let mut mag = s.basis.magnitudes(&frames, count);
            if let Some(mel) = &s.mel {
                let mut out = vec![0.0; count * s.out_bins];
                crate::linalg::gemm(
                    count,
                    s.basis.bins(),
                    s.out_bins,
                    &mag,
                    false,
                    mel,
                    false,
                    &mut out,
                    false,
                );
                mag = out;
            }
            let log = mag.iter().map(|m| (m + self.cfg.log_eps).ln()).collect();
            scales.push((mag, log, s.out_bins));
        }
        Ok(SpectralFeatures { scales })
    }

    pub fn breakdown_features(&self, a: &SpectralFeatures, b: &SpectralFeatures) -> Result<Vec<ScaleTerms>> {
        ensure!(
            a.scales.len() == self.scales.len() && b.scales.len() == self.scales.len(),
            "feature sets were computed with a different configuration"
        );
        let mut out = Vec::with_capacity(self.scales.len());
        for (s, ((ma, la, bins), (mb, lb, _))) in self.scales.iter().zip(a.scales.iter().zip(&b.scales)) {
            ensure!(ma.len() == mb.len(), "signals must have equal length");
            let l1 = ma.iter().zip(mb).map(|(x, y)| (x - y).abs()).sum();
            let log_l2 = la
                .chunks(*bins)
                .zip(lb.chunks(*bins))
                .map(|(fa, fb)| {
                    fa.iter()
                        .zip(fb)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            out.push(ScaleTerms {
                window_len: s.window_len,
                alpha: s.alpha,
                l1,
                log_l2,
            });
        }
        Ok(out)
    }

    pub fn breakdown(&self, a: &[f64], b: &[f64]) -> Result<Vec<ScaleTerms>> {
        ensure!(
            a.len() == b.len(),
            "signals must have equal length ({} vs {})",
            a.len(),
            b.len()
        );
        self.breakdown_features(&self.features(a)?, &self.features(b)?)
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Ok(self.breakdown(a, b)?.iter().map(ScaleTerms::total).sum())
    }

    pub fn distance_features(&self, a: &SpectralFeatures, b: &SpectralFeatures) -> Result<f64> {
        Ok(self.breakdown_features(a, b)?.iter().map(ScaleTerms::total).sum())
    }

    /// Spectral features of a rank-1 signal node.
    pub fn feature_nodes(&self, g: &mut Graph, x: Var) -> Result<FeatureNodes> {
        self.check_len(g.value(x).len())?;
        let mut scales = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let k = s.window_len;
            let bins = s.basis.bins();
            let frames = g.frame_extract(x, k, k / 2)?;
            let re = g.matmul_const(frames, s.cos.clone(), k, bins)?;
            let im = g.matmul_const(frames, s.sin.clone(), k, bins)?;
            let re2 = g.square(re)?;
            let im2 = g.square(im)?;
            let power = g.add(re2, im2)?;
            let mut mag = g.sqrt(power)?;
            if let Some(mel) = &s.mel {
                mag = g.matmul_const(mag, mel.clone(), bins, s.out_bins)?;
            }
            let shifted = g.add_scalar(mag, self.cfg.log_eps);
            let log = g.log(shifted)?;
            scales.push((mag, log));
        }
        Ok(FeatureNodes { scales })
    }

    /// Constant (non-differentiable) feature nodes from precomputed features.
    pub fn constant_feature_nodes(&self, g: &mut Graph, f: &SpectralFeatures) -> Result<FeatureNodes> {
        let mut scales = Vec::with_capacity(f.scales.len());
        for (mag, log, bins) in &f.scales {
            let t = mag.len() / bins;
            let m = g.constant(vec![t, *bins], mag.clone())?;
            let l = g.constant(vec![t, *bins], log.clone())?;
            scales.push((m, l));
        }
        Ok(FeatureNodes { scales })
    }

    /// Per-scale weighted term nodes.
    pub fn term_nodes(&self, g: &mut Graph, a: &FeatureNodes, b: &FeatureNodes) -> Result<Vec<Var>> {
        ensure!(
            a.scales.len() == self.scales.len() && b.scales.len() == self.scales.len(),
            "feature nodes were built with a different configuration"
        );
        let mut terms = Vec::with_capacity(self.scales.len());
        for (s, (&(ma, la), &(mb, lb))) in self.scales.iter().zip(a.scales.iter().zip(&b.scales)) {
            ensure!(
                g.shape(ma) == g.shape(mb),
                "signals must have equal length"
            );
            let diff = g.sub(ma, mb)?;
            let absdiff = g.abs(diff);
            let l1 = g.sum(absdiff);
            let ldiff = g.sub(la, lb)?;
            let norms = g.l2_norm_rows(ldiff, NORM_EPS)?;
            let l2 = g.sum(norms);
            let weighted = g.mul_scalar(l2, s.alpha);
            terms.push(g.add(l1, weighted)?);
        }
        Ok(terms)
    }

    pub fn distance_from_features(&self, g: &mut Graph, a: &FeatureNodes, b: &FeatureNodes) -> Result<Var> {
        let terms = self.term_nodes(g, a, b)?;
        let all = g.concat(&terms, 0)?;
        Ok(g.sum(all))
    }

    /// Differentiable distance between two rank-1 signal nodes.
    pub fn distance_node(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        ensure!(
            g.value(a).len() == g.value(b).len(),
            "signals must have equal length ({} vs {})",
            g.value(a).len(),
            g.value(b).len()
        );
        let fa = self.feature_nodes(g, a)?;
        let fb = self.feature_nodes(g, b)?;
        self.distance_from_features(g, &fa, &fb)
    }
}

fn check_pair(a: &Waveform, b: &Waveform) -> Result<()> {
    ensure!(
        a.len() == b.len(),
        "waveforms must have equal length ({} vs {})",
        a.len(),
        b.len()
    );
    ensure!(
        a.sample_rate_hz() == b.sample_rate_hz(),
        "sample rates differ ({} vs {})",
        a.sample_rate_hz(),
        b.sample_rate_hz()
    );
    Ok(())
}

pub fn multiscale_distance(a: &Waveform, b: &Waveform, cfg: &DistanceConfig) -> Result<f64> {
    check_pair(a, b)?;
    MultiScaleDistance::new(cfg.clone(), a.sample_rate_hz())?.distance(a.samples(), b.samples())
}

pub fn single_scale_distance(a: &Waveform, b: &Waveform, window_len: usize, cfg: &DistanceConfig) -> Result<f64> {
    check_pair(a, b)?;
    MultiScaleDistance::new(cfg.single(window_len)?, a.sample_rate_hz())?
        .distance(a.samples(), b.samples())
}

pub fn multiscale_distance_node(
    g: &mut Graph,
    a: Var,
    b: Var,
    cfg: &DistanceConfig,
    sample_rate_hz: u32,
) -> Result<Var> {
    MultiScaleDistance::new(cfg.clone(), sample_rate_hz)?.distance_node(g, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 16000).unwrap()
    }

    /// Brute force: direct DFT of every windowed frame, norms summed by hand.
    fn oracle(a: &[f64], b: &[f64], cfg: &DistanceConfig) -> f64 {
        let mut total = 0.0;
        for (&k, &alpha) in cfg.window_lens.iter().zip(&cfg.alphas) {
            let m = cfg.oversample;
            let hop = k / 2;
            let frames = (a.len() - k) / hop + 1;
            let mag = |x: &[f64], t: usize| -> Vec<f64> {
                (0..=m * k / 2)
                    .map(|i| {
                        let (mut re, mut im) = (0.0, 0.0);
                        for n in 0..k {
                            let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / k as f64).cos();
                            let ph = 2.0 * PI * (i * n) as f64 / (m * k) as f64;
                            re += w * x[t * hop + n] * ph.cos();
                            im += w * x[t * hop + n] * ph.sin();
                        }
                        (re * re + im * im).sqrt()
                    })
                    .collect()
            };
            for t in 0..frames {
                let (sa, sb) = (mag(a, t), mag(b, t));
                let l1: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
                let l2: f64 = sa
                    .iter()
                    .zip(&sb)
                    .map(|(x, y)| ((x + cfg.log_eps).ln() - (y + cfg.log_eps).ln()).powi(2))
                    .sum::<f64>()
                    .sqrt();
                total += l1 + alpha * l2;
            }
        }
        total
    }

    #[test]
    fn default_config_matches_published_settings() {
        let cfg = DistanceConfig::default();
        assert_eq!(cfg.window_lens, vec![64, 128, 256, 512, 1024, 2048]);
        assert_eq!(cfg.oversample, 8);
        assert!((cfg.alpha(64).unwrap() - 5.656854249492381).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn identical_signals_are_at_distance_zero() {
        let x = wave(noise(2048, 1));
        assert_eq!(multiscale_distance(&x, &x, &DistanceConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_and_matches_direct_dft_oracle() {
        let cfg = DistanceConfig::with_windows(vec![16, 32, 64]).with_oversample(2);
        let a = wave(noise(96, 2));
        let b = wave(noise(96, 3));
        let dab = multiscale_distance(&a, &b, &cfg).unwrap();
        let dba = multiscale_distance(&b, &a, &cfg).unwrap();
        assert_eq!(dab, dba);
        let o = oracle(a.samples(), b.samples(), &cfg);
        assert!((dab - o).abs() / o < 1e-8, "{dab} vs {o}");
    }

    #[test]
    fn single_scales_add_up() {
        let cfg = DistanceConfig::with_windows(vec![64, 128, 256]);
        let a = wave(noise(512, 4));
        let b = wave(noise(512, 5));
        let total = multiscale_distance(&a, &b, &cfg).unwrap();
        let parts: f64 = [64, 128, 256]
            .iter()
            .map(|&k| single_scale_distance(&a, &b, k, &cfg).unwrap())
            .sum();
        assert!((total - parts).abs() < 1e-10 * total);
        assert_eq!(single_scale_distance(&a, &a, 128, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn distinct_tones_are_apart_at_one_scale() {
        let tone = |f: f64| wave((0..1024).map(|n| (2.0 * PI * f * n as f64 / 16000.0).sin()).collect());
        let d = single_scale_distance(&tone(440.0), &tone(660.0), 256, &DistanceConfig::default()).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn nonstandard_window_needs_override() {
        let a = wave(noise(256, 6));
        let mut cfg = DistanceConfig::default();
        assert!(single_scale_distance(&a, &a, 48, &cfg).is_err());
        cfg.allow_any_window = true;
        assert_eq!(single_scale_distance(&a, &a, 48, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = DistanceConfig::default();
        let short = wave(noise(1000, 1));
        assert!(multiscale_distance(&short, &short, &cfg).is_err());
        let a = wave(noise(2048, 1));
        let b = wave(noise(2049, 1));
        assert!(multiscale_distance(&a, &b, &cfg).is_err());
        let mut bad = cfg.clone();
        bad.window_lens = vec![128, 64];
        bad.alphas = vec![1.0, 1.0];
        assert!(bad.validate().is_err());
        assert!(cfg.clone().with_log_eps(0.0).validate().is_err());
    }

    #[test]
    fn scaled_copy_is_at_positive_distance() {
        let a = noise(512, 8);
        let b: Vec<f64> = a.iter().map(|v| 0.5 * v).collect();
        let cfg = DistanceConfig::with_windows(vec![64, 128]);
        assert!(multiscale_distance(&wave(a), &wave(b), &cfg).unwrap() > 0.0);
    }

    #[test]
    fn mel_distance_is_finite_and_zero_on_identity() {
        let cfg = DistanceConfig::with_windows(vec![64, 128]).with_mel(true);
        let a = wave(noise(512, 9));
        let b = wave(noise(512, 10));
        let d = multiscale_distance(&a, &b, &cfg).unwrap();
        assert!(d.is_finite() && d > 0.0);
        assert_eq!(multiscale_distance(&a, &a, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn node_value_matches_plain_distance() {
        let cfg = DistanceConfig::with_windows(vec![32, 64, 128]).with_oversample(4);
        let dist = MultiScaleDistance::new(cfg, 16000).unwrap();
        let a = noise(256, 11);
        let b = noise(256, 12);
        let mut g = Graph::new();
        let va = g.variable(vec![256], a.clone()).unwrap();
        let vb = g.variable(vec![256], b.clone()).unwrap();
        let d = dist.distance_node(&mut g, va, vb).unwrap();
        let plain = dist.distance(&a, &b).unwrap();
        assert!((g.scalar(d) - plain).abs() < 1e-10 * plain.max(1.0));
        g.backward(d).unwrap();
        assert!(g.grad(va).is_some() && g.grad(vb).is_some());
    }
}
