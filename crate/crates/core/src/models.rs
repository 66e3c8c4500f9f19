//! Implicit conditional generators `y = f_θ(c, z)`.
//!
//! * [`MlpGenerator`]: a plain multilayer perceptron on vectors.
//! * [`IstftGenerator`]: a convolutional stack over feature chunks that emits one
//!   STFT frame per chunk and turns it into audio with a fixed linear inverse
//!   STFT (window `2C`, hop `C`), upsampling each feature vector `C`-fold.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::dsp::{inverse_dft_matrix, synthesis_envelope, ENVELOPE_FLOOR};
use crate::error::{ensure, Error, Result};
use crate::rng::purpose_rng;

/// Trainable tensors addressed by stable names, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneratorParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Per-parameter gradients keyed like [`GeneratorParams`].
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl GeneratorParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t)))
                .collect(),
        }
    }
}

impl GeneratorParams {
    /// Binds every parameter as a leaf except `name`, which is mapped to `var`.
    pub fn bind_with(&self, g: &mut Graph, name: &str, var: Var) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), if n == name { var } else { g.leaf(t) }))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`GeneratorParams`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidState(format!("parameter {name} is not bound")))
    }

    /// Gradients after `g.backward`; parameters the loss does not reach get zeros.
    pub fn grads(&self, g: &Graph) -> ParamGrads {
        self.vars
            .iter()
            .map(|(n, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (n.clone(), grad)
            })
            .collect()
    }
}

/// Adds `b` into `a` key by key.
pub fn accumulate_grads(a: &mut ParamGrads, b: &ParamGrads) {
    for (name, g) in b {
        match a.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            None => {
                a.insert(name.clone(), g.clone());
            }
        }
    }
}

fn gaussian_tensor(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, values).expect("shape and value count agree")
}

/// I.i.d. standard-normal latents, optionally truncated by resampling any
/// coordinate whose magnitude exceeds the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSampler {
    pub dim: usize,
    pub truncation: Option<f64>,
}

impl LatentSampler {
    pub fn new(dim: usize, truncation: Option<f64>) -> Result<Self> {
        ensure!(dim >= 1, "latent dimension must be positive");
        if let Some(t) = truncation {
            ensure!(t > 0.0, "truncation threshold must be positive, got {t}");
        }
        Ok(Self { dim, truncation })
    }

    fn coordinate(&self, rng: &mut impl Rng) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            match self.truncation {
                Some(t) if z.abs() > t => continue,
                _ => return z,
            }
        }
    }

    /// One latent vector.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.dim).map(|_| self.coordinate(rng)).collect()
    }

    /// `rows` latent vectors, row-major.
    pub fn sample_rows(&self, rng: &mut impl Rng, rows: usize) -> Vec<f64> {
        (0..rows * self.dim).map(|_| self.coordinate(rng)).collect()
    }
}

/// A generator that maps flat conditioning and latent buffers to a flat sample.
pub trait ConditionalGenerator {
    /// Latent values needed for conditioning `c`.
    fn latent_len(&self, c: &[f64]) -> Result<usize>;
    fn sample(&self, c: &[f64], z: &[f64]) -> Result<Vec<f64>>;
}

/// Two forward passes with the same conditioning and parameters and latents
/// drawn from `rng` and `rng_prime` respectively.
pub fn sample_pair<G: ConditionalGenerator>(
    generator: &G,
    c: &[f64],
    sampler: &LatentSampler,
    rng: &mut impl Rng,
    rng_prime: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = generator.latent_len(c)?;
    ensure!(
        n % sampler.dim == 0,
        "latent sampler of dimension {} cannot fill {n} values",
        sampler.dim
    );
    let z = sampler.sample_rows(rng, n / sampler.dim);
    let z_prime = sampler.sample_rows(rng_prime, n / sampler.dim);
    Ok((generator.sample(c, &z)?, generator.sample(c, &z_prime)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone)]
pub struct MlpGenerator {
    layer_sizes: Vec<usize>,
    activation: Activation,
    cond_dim: usize,
    latent_dim: usize,
    pub params: GeneratorParams,
}

impl MlpGenerator {
    /// Layers `[cond_dim + latent_dim, hidden…, out_dim]`, He-scaled Gaussian
    /// weights and zero biases drawn from `seed`.
    pub fn new(
        cond_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        ensure!(cond_dim + latent_dim >= 1, "generator needs at least one input");
        ensure!(out_dim >= 1, "generator needs at least one output");
        ensure!(hidden.iter().all(|&h| h >= 1), "hidden layers must be non-empty");
        let mut layer_sizes = vec![cond_dim + latent_dim];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(out_dim);
        let mut rng = purpose_rng(seed, "mlp-init");
        let mut params = GeneratorParams::new();
        for (i, w) in layer_sizes.windows(2).enumerate() {
            let gain = match activation {
                Activation::Relu => 2.0,
                Activation::Tanh => 1.0,
            };
            let std = (gain / w[0] as f64).sqrt();
            params.insert(format!("layer{i}.weight"), gaussian_tensor(&mut rng, vec![w[0], w[1]], std));
            params.insert(format!("layer{i}.bias"), Tensor::zeros(vec![w[1]]));
        }
        Ok(Self {
            layer_sizes,
            activation,
            cond_dim,
            latent_dim,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    /// Forward pass on a batch of rows `[c | z]` (B × (cond+latent)).
    pub fn forward_node(&self, g: &mut Graph, p: &BoundParams, input: Var) -> Result<Var> {
        let cols = g.shape(input).last().copied().unwrap_or(1);
        ensure!(
            cols == self.layer_sizes[0],
            "MLP expects {} inputs per row, got {cols}",
            self.layer_sizes[0]
        );
        let mut h = input;
        let last = self.layer_sizes.len() - 2;
        for i in 0..=last {
            h = g.affine(
                h,
                p.get(&format!("layer{i}.weight"))?,
                p.get(&format!("layer{i}.bias"))?,
            )?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Rows `[c_i | z_i]` for a batch.
    pub fn stack_inputs(&self, conds: &[f64], latents: &[f64], rows: usize) -> Result<Vec<f64>> {
        ensure!(
            conds.len() == rows * self.cond_dim && latents.len() == rows * self.latent_dim,
            "expected {rows} rows of {} conditioning and {} latent values",
            self.cond_dim,
            self.latent_dim
        );
        let mut out = Vec::with_capacity(rows * self.layer_sizes[0]);
        for r in 0..rows {
            out.extend_from_slice(&conds[r * self.cond_dim..(r + 1) * self.cond_dim]);
            out.extend_from_slice(&latents[r * self.latent_dim..(r + 1) * self.latent_dim]);
        }
        Ok(out)
    }

    /// Batched sampling without gradients; returns B × out_dim row-major.
    pub fn sample_batch(&self, conds: &[f64], latents: &[f64], rows: usize) -> Result<Vec<f64>> {
        let input = self.stack_inputs(conds, latents, rows)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(vec![rows, self.layer_sizes[0]], input)?;
        let y = self.forward_node(&mut g, &p, x)?;
        Ok(g.value(y).to_vec())
    }
}

impl ConditionalGenerator for MlpGenerator {
    fn latent_len(&self, c: &[f64]) -> Result<usize> {
        ensure!(
            c.len() == self.cond_dim,
            "expected {} conditioning values, got {}",
            self.cond_dim,
            c.len()
        );
        Ok(self.latent_dim)
    }

    fn sample(&self, c: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(self, c, z)
    }
}

/// One sample `f_θ(c, z)`.
pub fn mlp_forward(g: &MlpGenerator, c: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        c.len() == g.cond_dim && z.len() == g.latent_dim,
        "MLP expects {} conditioning and {} latent values, got {} and {}",
        g.cond_dim,
        g.latent_dim,
        c.len(),
        z.len()
    );
    g.sample_batch(c, z, 1)
}

/// Sizes of the inverse-STFT generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IstftConfig {
    /// Samples per feature chunk (`C`); the frame is `2C` long with hop `C`.
    pub chunk_size: usize,
    pub n_blocks: usize,
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
    pub cond_dim: usize,
    pub latent_dim: usize,
}

impl IstftConfig {
    /// Laptop-scale sizes.
    pub fn desk(cond_dim: usize, latent_dim: usize) -> Self {
        Self {
            chunk_size: 16,
            n_blocks: 4,
            hidden_channels: 128,
            bottleneck_channels: 32,
            cond_dim,
            latent_dim,
        }
    }

    /// The full-size 120-sample-chunk, 12-block configuration.
    pub fn full_scale(cond_dim: usize, latent_dim: usize) -> Self {
        Self {
            chunk_size: 120,
            n_blocks: 12,
            hidden_channels: 2048,
            bottleneck_channels: 512,
            cond_dim,
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.chunk_size >= 2 && self.chunk_size % 2 == 0,
            "chunk size must be a positive even integer, got {}",
            self.chunk_size
        );
        ensure!(self.hidden_channels >= 1 && self.bottleneck_channels >= 1, "channel counts must be positive");
        ensure!(self.cond_dim >= 1, "the iSTFT generator needs conditioning features");
        ensure!(self.latent_dim >= 1, "latent dimension must be positive");
        Ok(())
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const CONV_KERNEL: usize = 5;

#[derive(Debug, Clone)]
pub struct IstftGenerator {
    cfg: IstftConfig,
    /// (2C − 1) × 2C synthesis matrix: coefficient slots to windowed time samples.
    synthesis: Arc<[f64]>,
    pub params: GeneratorParams,
}

impl IstftGenerator {
    pub fn new(cfg: IstftConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = purpose_rng(seed, "istft-init");
        let mut params = GeneratorParams::new();
        let (h, b) = (cfg.hidden_channels, cfg.bottleneck_channels);
        let input_dim = cfg.cond_dim + cfg.latent_dim;
        let conv = |rng: &mut _, k: usize, cin: usize, cout: usize| {
            gaussian_tensor(rng, vec![k, cin, cout], (2.0 / (k * cin) as f64).sqrt())
        };
        params.insert("input.weight", conv(&mut rng, 1, input_dim, h));
        params.insert("input.bias", Tensor::zeros(vec![h]));
        for blk in 0..cfg.n_blocks {
            for (j, ch) in [h, b, b, b].into_iter().enumerate() {
                for kind in ["scale", "shift"] {
                    let p = format!("block{blk}.mod{j}.{kind}");
                    params.insert(format!("{p}.weight"), Tensor::zeros(vec![cfg.cond_dim, ch]));
                    params.insert(format!("{p}.bias"), Tensor::zeros(vec![ch]));
                }
            }
            params.insert(format!("block{blk}.down.weight"), conv(&mut rng, 1, h, b));
            params.insert(format!("block{blk}.down.bias"), Tensor::zeros(vec![b]));
            params.insert(format!("block{blk}.conv1.weight"), conv(&mut rng, CONV_KERNEL, b, b));
            params.insert(format!("block{blk}.conv1.bias"), Tensor::zeros(vec![b]));
            params.insert(format!("block{blk}.conv2.weight"), conv(&mut rng, CONV_KERNEL, b, b));
            params.insert(format!("block{blk}.conv2.bias"), Tensor::zeros(vec![b]));
            // Residual branches start switched off.
            params.insert(format!("block{blk}.up.weight"), Tensor::zeros(vec![1, b, h]));
            params.insert(format!("block{blk}.up.bias"), Tensor::zeros(vec![h]));
        }
        let out = 2 * cfg.chunk_size;
        params.insert("output.weight", gaussian_tensor(&mut rng, vec![1, h, out], 0.1 / (h as f64).sqrt()));
        params.insert("output.bias", Tensor::zeros(vec![out]));
        Self::with_params(cfg, params)
    }

    /// Builds a generator around existing parameters (e.g. from a checkpoint).
    pub fn with_params(cfg: IstftConfig, params: GeneratorParams) -> Result<Self> {
        cfg.validate()?;
        let k = 2 * cfg.chunk_size;
        let full = inverse_dft_matrix(k)?;
        // Drop the Nyquist slot (last row): 2C − 1 coefficients drive each frame.
        let synthesis: Arc<[f64]> = Arc::from(&full[..(k - 1) * k]);
        Ok(Self {
            cfg,
            synthesis,
            params,
        })
    }

    pub fn config(&self) -> &IstftConfig {
        &self.cfg
    }

    pub fn output_len(&self, n_chunks: usize) -> usize {
        n_chunks * self.cfg.chunk_size
    }

    fn modulate(&self, g: &mut Graph, p: &BoundParams, x: Var, c: Var, prefix: &str) -> Result<Var> {
        let scale = g.affine(
            c,
            p.get(&format!("{prefix}.scale.weight"))?,
            p.get(&format!("{prefix}.scale.bias"))?,
        )?;
        let scale = g.add_scalar(scale, 1.0);
        let shift = g.affine(
            c,
            p.get(&format!("{prefix}.shift.weight"))?,
            p.get(&format!("{prefix}.shift.bias"))?,
        )?;
        let scaled = g.mul(x, scale)?;
        g.add(scaled, shift)
    }

    /// STFT coefficient slots per chunk (n_chunks × (2C − 1)), before synthesis.
    pub fn coefficients_node(&self, g: &mut Graph, p: &BoundParams, c: Var, z: Var) -> Result<Var> {
        let shape_c = g.shape(c).to_vec();
        let shape_z = g.shape(z).to_vec();
        ensure!(
            shape_c.len() == 2 && shape_c[1] == self.cfg.cond_dim,
            "conditioning must be n_chunks × {}, got {shape_c:?}",
            self.cfg.cond_dim
        );
        ensure!(
            shape_z.len() == 2 && shape_z[1] == self.cfg.latent_dim && shape_z[0] == shape_c[0],
            "latents must be {} × {}, got {shape_z:?}",
            shape_c[0],
            self.cfg.latent_dim
        );
        ensure!(shape_c[0] >= 2, "the iSTFT generator needs at least two chunks");
        let input = g.concat(&[c, z], 1)?;
        let mut h = g.conv1d(input, p.get("input.weight")?, Some(p.get("input.bias")?))?;
        for blk in 0..self.cfg.n_blocks {
            let pre = format!("block{blk}");
            let mut u = self.modulate(g, p, h, c, &format!("{pre}.mod0"))?;
            u = g.leaky_relu(u, LEAKY_SLOPE);
            u = g.conv1d(u, p.get(&format!("{pre}.down.weight"))?, Some(p.get(&format!("{pre}.down.bias"))?))?;
            for (j, conv) in ["conv1", "conv2"].into_iter().enumerate() {
                u = self.modulate(g, p, u, c, &format!("{pre}.mod{}", j + 1))?;
                u = g.leaky_relu(u, LEAKY_SLOPE);
                u = g.conv1d(
                    u,
                    p.get(&format!("{pre}.{conv}.weight"))?,
                    Some(p.get(&format!("{pre}.{conv}.bias"))?),
                )?;
            }
            u = self.modulate(g, p, u, c, &format!("{pre}.mod3"))?;
            u = g.leaky_relu(u, LEAKY_SLOPE);
            u = g.conv1d(u, p.get(&format!("{pre}.up.weight"))?, Some(p.get(&format!("{pre}.up.bias"))?))?;
            h = g.add(h, u)?;
        }
        let out = g.conv1d(h, p.get("output.weight")?, Some(p.get("output.bias")?))?;
        let k = 2 * self.cfg.chunk_size;
        let log_gain = g.slice_cols(out, 0, 1)?;
        let gain = g.exp(log_gain);
        let raw = g.slice_cols(out, 1, k)?;
        let gain = g.reshape(gain, vec![shape_c[0]])?;
        g.mul_col(raw, gain)
    }

    /// Turns coefficient slots (n_chunks × (2C − 1)) into a waveform of
    /// `n_chunks · C` samples.
    pub fn synthesize_node(&self, g: &mut Graph, coeffs: Var) -> Result<Var> {
        let c = self.cfg.chunk_size;
        let k = 2 * c;
        let chunks = g.shape(coeffs)[0];
        let frames = g.matmul_const(coeffs, self.synthesis.clone(), k - 1, k)?;
        let summed = g.overlap_add(frames, c)?;
        let env = synthesis_envelope(k, c, chunks)?;
        let inv: Vec<f64> = env.iter().map(|e| 1.0 / e.max(ENVELOPE_FLOOR)).collect();
        let inv = g.constant(vec![inv.len()], inv)?;
        let normalized = g.mul(summed, inv)?;
        // The first and last half-chunks are covered by a single, vanishing
        // window edge; trimming them leaves exactly n_chunks · C samples.
        g.slice_rows(normalized, c / 2, c / 2 + chunks * c)
    }

    pub fn forward_node(&self, g: &mut Graph, p: &BoundParams, c: Var, z: Var) -> Result<Var> {
        let coeffs = self.coefficients_node(g, p, c, z)?;
        self.synthesize_node(g, coeffs)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

impl ConditionalGenerator for IstftGenerator {
    fn latent_len(&self, c: &[f64]) -> Result<usize> {
        ensure!(
            c.len() % self.cfg.cond_dim == 0,
            "conditioning length {} is not a multiple of {}",
            c.len(),
            self.cfg.cond_dim
        );
        Ok(c.len() / self.cfg.cond_dim * self.cfg.latent_dim)
    }

    fn sample(&self, c: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        istft_generator_forward(self, c, z)
    }
}

/// Waveform for conditioning `c` (n_chunks × cond_dim) and latents `z`
/// (n_chunks × latent_dim), both row-major.
pub fn istft_generator_forward(gen: &IstftGenerator, c: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let cfg = gen.config();
    ensure!(
        c.len() % cfg.cond_dim == 0,
        "conditioning length {} is not a multiple of {}",
        c.len(),
        cfg.cond_dim
    );
    let chunks = c.len() / cfg.cond_dim;
    ensure!(chunks >= 2, "the iSTFT generator needs at least two chunks, got {chunks}");
    ensure!(
        z.len() == chunks * cfg.latent_dim,
        "expected {} latent values, got {}",
        chunks * cfg.latent_dim,
        z.len()
    );
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g);
    let cv = g.constant(vec![chunks, cfg.cond_dim], c.to_vec())?;
    let zv = g.constant(vec![chunks, cfg.latent_dim], z.to_vec())?;
    let y = gen.forward_node(&mut g, &p, cv, zv)?;
    Ok(g.value(y).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::dsp::{stft_complex, pack_spectrum, StftConfig, Waveform};
    use crate::rng::stream_rng;
    use crate::spectral::{DistanceConfig, MultiScaleDistance};

    fn tiny() -> IstftGenerator {
        let cfg = IstftConfig {
            chunk_size: 4,
            n_blocks: 1,
            hidden_channels: 6,
            bottleneck_channels: 3,
            cond_dim: 2,
            latent_dim: 2,
        };
        let mut gen = IstftGenerator::new(cfg, 3).unwrap();
        // Give every parameter a non-zero value so each one influences the output.
        let mut rng = purpose_rng(11, "perturb");
        for (_, t) in gen.params.iter_mut() {
            for v in t.values_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        gen
    }

    #[test]
    fn mlp_is_deterministic_and_sized() {
        let g = MlpGenerator::new(1, 3, &[64, 64], 2, Activation::Relu, 5).unwrap();
        assert_eq!(g.layer_sizes(), &[4, 64, 64, 2]);
        let a = mlp_forward(&g, &[0.5], &[0.1, -0.2, 0.3]).unwrap();
        let b = mlp_forward(&g, &[0.5], &[0.1, -0.2, 0.3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(mlp_forward(&g, &[0.5], &[0.1]).is_err());
    }

    #[test]
    fn mlp_with_zero_parameters_outputs_zero() {
        let mut g = MlpGenerator::new(0, 3, &[8], 2, Activation::Tanh, 5).unwrap();
        for (_, t) in g.params.iter_mut() {
            t.values_mut().fill(0.0);
        }
        assert_eq!(mlp_forward(&g, &[], &[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn istft_output_length() {
        let gen = IstftGenerator::new(IstftConfig::desk(1, 4), 1).unwrap();
        let c = vec![0.3; 25];
        let z = vec![0.1; 100];
        assert_eq!(istft_generator_forward(&gen, &c, &z).unwrap().len(), 400);
        assert!(istft_generator_forward(&gen, &[0.3], &[0.1; 4]).is_err());
    }

    #[test]
    fn istft_zero_projection_gives_silence() {
        let mut gen = IstftGenerator::new(IstftConfig::desk(1, 4), 1).unwrap();
        gen.params.get_mut("output.weight").unwrap().values_mut().fill(0.0);
        let y = istft_generator_forward(&gen, &[0.5; 8], &[0.7; 32]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn istft_gain_channel_scales_output_linearly() {
        let mut gen = tiny();
        let c = vec![0.2, -0.4, 0.1, 0.9, -0.3, 0.5];
        let z = vec![0.5, -1.0, 0.3, 0.2, 1.1, -0.7];
        let y = istft_generator_forward(&gen, &c, &z).unwrap();
        gen.params.get_mut("output.bias").unwrap().values_mut()[0] += std::f64::consts::LN_2;
        let y2 = istft_generator_forward(&gen, &c, &z).unwrap();
        for (a, b) in y.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn synthesis_reproduces_interior_of_a_packed_stft() {
        let gen = IstftGenerator::new(IstftConfig::desk(1, 1), 1).unwrap();
        let c = gen.config().chunk_size;
        // A signal without Nyquist content, so dropping that slot is lossless.
        let x: Vec<f64> = (0..(10 + 1) * c)
            .map(|n| (0.3 * n as f64).sin() + 0.5 * (1.1 * n as f64).cos())
            .collect();
        let frames = stft_complex(
            &Waveform::new(x.clone(), 8000).unwrap(),
            &StftConfig::new(2 * c).with_oversample(1),
        )
        .unwrap();
        let packed = pack_spectrum(&frames);
        let k = 2 * c;
        let slots: Vec<f64> = packed.chunks(k).flat_map(|r| r[..k - 1].to_vec()).collect();
        let mut g = Graph::new();
        let coeffs = g.constant(vec![frames.frames, k - 1], slots).unwrap();
        let y = gen.synthesize_node(&mut g, coeffs).unwrap();
        let y = g.value(y);
        assert_eq!(y.len(), frames.frames * c);
        let nyq_free: f64 = (0..frames.frames)
            .map(|t| frames.re[t * frames.bins + c].abs())
            .fold(0.0, f64::max);
        for n in c..y.len() - c {
            // Residual equals the dropped Nyquist component's contribution.
            assert!((y[n] - x[n + c / 2]).abs() < 1e-9 + nyq_free, "n={n}");
        }
    }

    #[test]
    fn desk_generator_fits_parameter_budget() {
        let gen = IstftGenerator::new(IstftConfig::desk(3, 8), 0).unwrap();
        assert!(gen.parameter_count() < 1_000_000);
    }

    #[test]
    fn istft_loss_gradients_match_finite_differences() {
        let gen = tiny();
        let chunks = 3;
        let c: Vec<f64> = vec![0.2, -0.4, 0.1, 0.9, -0.3, 0.5];
        let z: Vec<f64> = vec![0.5, -1.0, 0.3, 0.2, 1.1, -0.7];
        let target: Vec<f64> = (0..chunks * 4).map(|n| (0.9 * n as f64).sin()).collect();
        let dist = MultiScaleDistance::new(DistanceConfig::with_windows(vec![4, 8]).with_oversample(2), 8000).unwrap();
        for (name, tensor) in gen.params.iter() {
            let f = |g: &mut Graph, x: Var| -> Result<Var> {
                let mut bound = BTreeMap::new();
                for (n, t) in gen.params.iter() {
                    let v = if n == name { x } else { g.leaf(t) };
                    bound.insert(n.clone(), v);
                }
                let p = BoundParams { vars: bound };
                let cv = g.constant(vec![chunks, 2], c.clone())?;
                let zv = g.constant(vec![chunks, 2], z.clone())?;
                let y = gen.forward_node(g, &p, cv, zv)?;
                let t = g.constant(vec![target.len()], target.clone())?;
                dist.distance_node(g, t, y)
            };
            let err = grad_check(f, tensor, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn sample_pair_properties() {
        let g = MlpGenerator::new(1, 2, &[16], 2, Activation::Relu, 9).unwrap();
        let sampler = LatentSampler::new(2, None).unwrap();
        let (y, yp) = sample_pair(&g, &[0.1], &sampler, &mut stream_rng(1, 0, 0, 0), &mut stream_rng(1, 0, 0, 1)).unwrap();
        assert_ne!(y, yp);
        let (y, yp) = sample_pair(&g, &[0.1], &sampler, &mut stream_rng(1, 0, 0, 0), &mut stream_rng(1, 0, 0, 0)).unwrap();
        assert_eq!(y, yp);
        let trunc = LatentSampler::new(3, Some(2.0)).unwrap();
        let mut rng = stream_rng(2, 0, 0, 0);
        assert!(trunc.sample_rows(&mut rng, 5000).iter().all(|z| z.abs() <= 2.0));
    }
}
