//! Experiment drivers shared by the `ged` binary and the acceptance suite.
//!
//! Every driver is deterministic given its seed: data, latents and evaluation
//! draws come from [`stream_rng`] streams, and per-example gradients are summed
//! in example order whatever the worker count.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autodiff::{grad_check, Graph, Tensor, Var};
use crate::dsp::Waveform;
use crate::error::{ensure, Error, Result};
use crate::eval::{
    chi_mean, embed_spectral_with, frechet_gaussian, mode_coverage, norm_projection_stats, pitch_peak_match,
    ModeCoverage, NormProjectionStats,
};
use crate::ged::{ged_loss_nodes, minibatch_ged_loss, GedLossConfig, GedLossValue, PowerDistance};
use crate::models::{
    accumulate_grads, Activation, GeneratorParams, IstftConfig, IstftGenerator, LatentSampler, MlpGenerator,
    ParamGrads,
};
use crate::optim::{metrics_csv, train_step, AdamConfig, AdamState, EmaState, LossEval, StepMetrics};
use crate::rng::{derive_seed, purpose_rng, stream_rng};
use crate::spectral::{DistanceConfig, MultiScaleDistance};
use crate::wav::{wav_write, write_atomic};

pub const SCHEMA_VERSION: u32 = 1;

/// Worker threads for per-example graphs, from `GED_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("GED_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Maps `f` over `0..n` on up to `threads` scoped threads, keeping index order.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    write_atomic(&dir.join(name), bytes)
}

fn write_json(dir: &Path, name: &str, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values always serialize");
    write_file(dir, name, format!("{text}\n").as_bytes())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Settings shared by the small vector experiments.
#[derive(Debug, Clone, Serialize)]
pub struct ToyOptions {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub repulsive: bool,
    /// Sample from an EMA copy of the parameters with this decay.
    pub ema_decay: Option<f64>,
    /// Number of model samples drawn for evaluation.
    pub eval_samples: usize,
    /// Decay the learning rate to zero over the run with a cosine schedule.
    pub cosine_decay: bool,
    /// Hidden layer widths; `None` uses the experiment's default.
    pub hidden: Option<Vec<usize>>,
}

impl ToyOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: 5000,
            batch: 64,
            lr: 1e-3,
            seed,
            repulsive: true,
            ema_decay: None,
            eval_samples: 1000,
            cosine_decay: false,
            hidden: None,
        }
    }

    fn adam(&self) -> AdamConfig {
        let cfg = AdamConfig::toy().with_lr(self.lr);
        if self.cosine_decay {
            cfg.with_cosine_decay(self.steps)
        } else {
            cfg
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "at least one training step is required");
        ensure!(self.batch >= 1, "batch size must be positive");
        ensure!(self.eval_samples >= 1, "at least one evaluation sample is required");
        Ok(())
    }
}

/// Runs `steps` optimizer steps, stopping at the first error.
///
/// Returns the metrics recorded so far alongside the outcome so callers can
/// flush partial metrics when training diverges.
fn train_loop(
    params: &mut GeneratorParams,
    adam_cfg: AdamConfig,
    steps: u64,
    ema_decay: Option<f64>,
    mut eval: impl FnMut(u64, &GeneratorParams) -> Result<LossEval>,
) -> (Vec<StepMetrics>, Option<EmaState>, Result<()>) {
    let mut metrics = Vec::with_capacity(steps as usize);
    let mut adam = match AdamState::new(adam_cfg, params) {
        Ok(a) => a,
        Err(e) => return (metrics, None, Err(e)),
    };
    let mut ema = match ema_decay.map(|d| EmaState::new(d, params)).transpose() {
        Ok(e) => e,
        Err(e) => return (metrics, None, Err(e)),
    };
    for step in 1..=steps {
        match train_step(params, &mut adam, ema.as_mut(), |p| eval(step, p)) {
            Ok(m) => metrics.push(m),
            Err(e) => return (metrics, ema, Err(e)),
        }
    }
    (metrics, ema, Ok(()))
}

/// Writes partial metrics when `outcome` failed and an output directory exists.
fn settle(outcome: Result<()>, metrics: &[StepMetrics], out: Option<&Path>) -> Result<()> {
    if let Err(e) = outcome {
        if let Some(dir) = out {
            prepare_dir(dir)?;
            write_file(dir, "metrics.csv", metrics_csv(metrics).as_bytes())?;
        }
        return Err(e);
    }
    Ok(())
}

fn loss_value(g: &Graph, nodes: &crate::ged::GedLossNodes) -> GedLossValue {
    GedLossValue {
        total: g.scalar(nodes.total),
        attract: g.scalar(nodes.attract),
        repulse: nodes.repulse.map(|r| g.scalar(r)).unwrap_or(0.0),
    }
}

/// One minibatch step of an unconditional MLP generator against data rows `xs`.
fn mlp_loss(
    gen: &MlpGenerator,
    params: &GeneratorParams,
    xs: Vec<f64>,
    z: Vec<f64>,
    z_prime: Vec<f64>,
    batch: usize,
    metric: &PowerDistance,
    cfg: GedLossConfig,
) -> Result<LossEval> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let x = g.constant(vec![batch, gen.out_dim()], xs)?;
    let zv = g.constant(vec![batch, gen.latent_dim()], z)?;
    let y = gen.forward_node(&mut g, &p, zv)?;
    let attract = metric.rows_node(&mut g, x, y)?;
    let mut repulse = Vec::new();
    if cfg.repulsive {
        let zp = g.constant(vec![batch, gen.latent_dim()], z_prime)?;
        let yp = gen.forward_node(&mut g, &p, zp)?;
        repulse.push(metric.rows_node(&mut g, y, yp)?);
    }
    let nodes = ged_loss_nodes(&mut g, &[attract], &repulse, cfg)?;
    g.backward(nodes.total)?;
    Ok(LossEval {
        value: loss_value(&g, &nodes),
        grads: p.grads(&g),
    })
}

/// Draws `batch` data rows and two latent batches for `step`.
fn toy_batch(
    seed: u64,
    step: u64,
    batch: usize,
    latent: &LatentSampler,
    mut draw_x: impl FnMut(&mut rand_chacha::ChaCha8Rng) -> Vec<f64>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut z = Vec::new();
    let mut zp = Vec::new();
    for i in 0..batch as u64 {
        xs.extend(draw_x(&mut stream_rng(seed, step, i, 0)));
        z.extend(latent.sample(&mut stream_rng(seed, step, i, 1)));
        zp.extend(latent.sample(&mut stream_rng(seed, step, i, 2)));
    }
    (xs, z, zp)
}

fn draw_model_samples(gen: &MlpGenerator, params: &GeneratorParams, seed: u64, n: usize) -> Result<Vec<Vec<f64>>> {
    let latent = LatentSampler::new(gen.latent_dim(), None)?;
    let mut rng = purpose_rng(seed, "eval-samples");
    let z = latent.sample_rows(&mut rng, n);
    let mut model = gen.clone();
    model.params = params.clone();
    let flat = model.sample_batch(&[], &z, n)?;
    Ok(flat.chunks(gen.out_dim()).map(<[f64]>::to_vec).collect())
}

fn csv_rows(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Equal-weight 2-D mixture with means on an equilateral triangle.
#[derive(Debug, Clone, Serialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
}

impl GmmSpec {
    /// Triangle of side 2 centred at the origin, σ = 0.25.
    pub fn triangle() -> Self {
        let r = 2.0 / 3f64.sqrt();
        let means = (0..3)
            .map(|i| {
                let a = PI / 2.0 + 2.0 * PI * i as f64 / 3.0;
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        Self { means, sigma: 0.25 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let m = &self.means[rng.gen_range(0..self.means.len())];
        m.iter()
            .map(|c| c + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

pub const GMM_LATENT_DIM: usize = 2;
pub const GMM_HIDDEN: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone)]
pub struct GmmRun {
    pub metrics: Vec<StepMetrics>,
    pub samples: Vec<Vec<f64>>,
    pub coverage: ModeCoverage,
    pub report: Value,
}

impl GmmRun {
    pub fn samples_csv(&self) -> String {
        csv_rows("x,y", self.samples.iter().cloned())
    }
}

/// Mixture defaults: lr 3e-3 with cosine decay.
pub fn gmm_options(seed: u64) -> ToyOptions {
    ToyOptions {
        lr: 3e-3,
        cosine_decay: true,
        ..ToyOptions::new(seed)
    }
}

pub fn train_gmm(opts: &ToyOptions, out: Option<&Path>) -> Result<GmmRun> {
    opts.validate()?;
    let spec = GmmSpec::triangle();
    let mut gen = MlpGenerator::new(0, GMM_LATENT_DIM, opts.hidden.as_deref().unwrap_or(&GMM_HIDDEN), 2, Activation::Relu, opts.seed)?;
    let latent = LatentSampler::new(GMM_LATENT_DIM, None)?;
    let cfg = GedLossConfig {
        repulsive: opts.repulsive,
    };
    let metric = PowerDistance::euclidean();
    let model = gen.clone();
    let mut params = gen.params.clone();
    let (metrics, ema, outcome) = train_loop(&mut params, opts.adam(), opts.steps, opts.ema_decay, |step, p| {
        let (xs, z, zp) = toy_batch(opts.seed, step, opts.batch, &latent, |r| spec.sample(r));
        mlp_loss(&model, p, xs, z, zp, opts.batch, &metric, cfg)
    });
    settle(outcome, &metrics, out)?;
    let final_params = ema.map(|e| e.params().clone()).unwrap_or(params);
    gen.params = final_params;
    let samples = draw_model_samples(&gen, &gen.params, opts.seed, opts.eval_samples)?;
    let coverage = mode_coverage(&samples, &spec.means, 3.0 * spec.sigma)?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": "gmm",
        "repulsive": opts.repulsive,
        "options": opts,
        "data": spec,
        "model": {"layers": gen.layer_sizes(), "activation": "relu", "parameters": gen.params.count()},
        "coverage_radius": 3.0 * spec.sigma,
        "coverage": coverage,
        "final_loss": metrics.last().map(|m| m.loss),
    });
    let run = GmmRun {
        metrics,
        samples,
        coverage,
        report,
    };
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_file(dir, "samples.csv", run.samples_csv().as_bytes())?;
        crate::checkpoint::save(dir.join("params.ckpt"), &gen.params)?;
        write_file(dir, "metrics.csv", metrics_csv(&run.metrics).as_bytes())?;
        write_json(dir, "report.json", &run.report)?;
    }
    Ok(run)
}

pub const HIGHDIM_DIM: usize = 100;

#[derive(Debug, Clone)]
pub struct HighDimRun {
    pub metrics: Vec<StepMetrics>,
    /// Per-sample `(‖x‖₂, Σ x_i / n)`.
    pub projections: Vec<Vec<f64>>,
    pub stats: NormProjectionStats,
    pub report: Value,
}

pub const HIGHDIM_HIDDEN: [usize; 2] = [64, 64];

/// High-dimensional defaults: lr 1e-3 with cosine decay.
pub fn highdim_options(seed: u64) -> ToyOptions {
    ToyOptions {
        cosine_decay: true,
        ..ToyOptions::new(seed)
    }
}

pub fn train_highdim(opts: &ToyOptions, out: Option<&Path>) -> Result<HighDimRun> {
    opts.validate()?;
    let d = HIGHDIM_DIM;
    let mut gen = MlpGenerator::new(0, d, opts.hidden.as_deref().unwrap_or(&HIGHDIM_HIDDEN), d, Activation::Relu, opts.seed)?;
    let latent = LatentSampler::new(d, None)?;
    let cfg = GedLossConfig {
        repulsive: opts.repulsive,
    };
    let metric = PowerDistance::euclidean();
    let model = gen.clone();
    let mut params = gen.params.clone();
    let (metrics, ema, outcome) = train_loop(&mut params, opts.adam(), opts.steps, opts.ema_decay, |step, p| {
        let (xs, z, zp) = toy_batch(opts.seed, step, opts.batch, &latent, |r| {
            (0..d).map(|_| r.sample(StandardNormal)).collect()
        });
        mlp_loss(&model, p, xs, z, zp, opts.batch, &metric, cfg)
    });
    settle(outcome, &metrics, out)?;
    gen.params = ema.map(|e| e.params().clone()).unwrap_or(params);
    let samples = draw_model_samples(&gen, &gen.params, opts.seed, opts.eval_samples)?;
    let stats = norm_projection_stats(&samples)?;
    let projections: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            vec![
                s.iter().map(|v| v * v).sum::<f64>().sqrt(),
                s.iter().sum::<f64>() / d as f64,
            ]
        })
        .collect();
    let target = chi_mean(d);
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": "highdim",
        "repulsive": opts.repulsive,
        "options": opts,
        "model": {"layers": gen.layer_sizes(), "activation": "relu", "parameters": gen.params.count()},
        "target_mean_l2_norm": target,
        "stats": stats,
        "relative_norm_error": (stats.mean_l2_norm - target).abs() / target,
        "coord_avg_standard_error": stats.std_coord_avg / (samples.len() as f64).sqrt(),
        "final_loss": metrics.last().map(|m| m.loss),
    });
    let run = HighDimRun {
        metrics,
        projections,
        stats,
        report,
    };
    if let Some(dir) = out {
        prepare_dir(dir)?;
        crate::checkpoint::save(dir.join("params.ckpt"), &gen.params)?;
        write_file(dir, "samples.csv", csv_rows("l2_norm,coord_avg", run.projections.iter().cloned()).as_bytes())?;
        write_file(dir, "metrics.csv", metrics_csv(&run.metrics).as_bytes())?;
        write_json(dir, "report.json", &run.report)?;
    }
    Ok(run)
}

/// `y = μ + σ·z` fitted to `N(2, 0.5²)` with `d(x, y) = |x − y|`.
#[derive(Debug, Clone)]
pub struct LocationScaleRun {
    pub metrics: Vec<StepMetrics>,
    pub mu: f64,
    /// `|σ|`; the sign of the raw parameter is unidentifiable.
    pub sigma: f64,
    /// `(step, μ, |σ|)` every 10 steps.
    pub trajectory: Vec<Vec<f64>>,
    pub report: Value,
}

pub const LOCATION_SCALE_TARGET: (f64, f64) = (2.0, 0.5);

/// Options for the location-scale run: batch 256, lr 5e-3 and an EMA of decay 0.995.
pub fn location_scale_options(seed: u64) -> ToyOptions {
    ToyOptions {
        batch: 256,
        lr: 5e-3,
        ema_decay: Some(0.995),
        ..ToyOptions::new(seed)
    }
}

pub fn train_location_scale(opts: &ToyOptions, out: Option<&Path>) -> Result<LocationScaleRun> {
    opts.validate()?;
    let (mu_true, sigma_true) = LOCATION_SCALE_TARGET;
    let mut params = GeneratorParams::new();
    params.insert("mu", Tensor::new(vec![1], vec![0.0])?);
    params.insert("sigma", Tensor::new(vec![1], vec![1.0])?);
    let cfg = GedLossConfig {
        repulsive: opts.repulsive,
    };
    let metric = PowerDistance::new(1.0, 1.0)?;
    let mut trajectory = Vec::new();
    let b = opts.batch;
    let (metrics, ema, outcome) = train_loop(&mut params, opts.adam(), opts.steps, opts.ema_decay, |step, p| {
        if (step - 1) % 10 == 0 {
            let mu = p.get("mu").map(|t| t.values()[0]).unwrap_or(f64::NAN);
            let s = p.get("sigma").map(|t| t.values()[0].abs()).unwrap_or(f64::NAN);
            trajectory.push(vec![(step - 1) as f64, mu, s]);
        }
        let mut xs = Vec::with_capacity(b);
        let mut z = Vec::with_capacity(b);
        let mut zp = Vec::with_capacity(b);
        for i in 0..b as u64 {
            xs.push(mu_true + sigma_true * stream_rng(opts.seed, step, i, 0).sample::<f64, _>(StandardNormal));
            z.push(stream_rng(opts.seed, step, i, 1).sample::<f64, _>(StandardNormal));
            zp.push(stream_rng(opts.seed, step, i, 2).sample::<f64, _>(StandardNormal));
        }
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let (mu, sigma) = (bound.get("mu")?, bound.get("sigma")?);
        let x = g.constant(vec![b, 1], xs)?;
        let model = |g: &mut Graph, z: Vec<f64>| -> Result<Var> {
            let zv = g.constant(vec![b, 1], z)?;
            let scaled = g.mul(zv, sigma)?;
            g.add(scaled, mu)
        };
        let y = model(&mut g, z)?;
        let attract = metric.rows_node(&mut g, x, y)?;
        let mut repulse = Vec::new();
        if cfg.repulsive {
            let yp = model(&mut g, zp)?;
            repulse.push(metric.rows_node(&mut g, y, yp)?);
        }
        let nodes = ged_loss_nodes(&mut g, &[attract], &repulse, cfg)?;
        g.backward(nodes.total)?;
        Ok(LossEval {
            value: loss_value(&g, &nodes),
            grads: bound.grads(&g),
        })
    });
    settle(outcome, &metrics, out)?;
    let final_params = ema.map(|e| e.params().clone()).unwrap_or(params);
    let mu = final_params.get("mu").expect("mu exists").values()[0];
    let sigma = final_params.get("sigma").expect("sigma exists").values()[0].abs();
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": "location_scale",
        "repulsive": opts.repulsive,
        "options": opts,
        "target": {"mu": mu_true, "sigma": sigma_true},
        "mu": mu,
        "sigma": sigma,
        "mu_relative_error": (mu - mu_true).abs() / mu_true,
        "sigma_relative_error": (sigma - sigma_true).abs() / sigma_true,
    });
    let run = LocationScaleRun {
        metrics,
        mu,
        sigma,
        trajectory,
        report,
    };
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_file(dir, "trajectory.csv", csv_rows("step,mu,sigma", run.trajectory.iter().cloned()).as_bytes())?;
        write_file(dir, "metrics.csv", metrics_csv(&run.metrics).as_bytes())?;
        write_json(dir, "report.json", &run.report)?;
    }
    Ok(run)
}

/// A discrete distribution over a shared list of support points.
#[derive(Debug, Clone, Serialize)]
pub struct DiscreteDist {
    pub probs: Vec<f64>,
}

impl DiscreteDist {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.len() - 1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UnbiasednessCheck {
    pub support: Vec<Vec<f64>>,
    pub p: DiscreteDist,
    pub q: DiscreteDist,
    pub batch: usize,
    pub draws: usize,
    pub exact: f64,
    pub mc_mean: f64,
    pub standard_error: f64,
    pub z_score: f64,
}

impl UnbiasednessCheck {
    pub fn passed(&self) -> bool {
        self.z_score.abs() <= 3.0
    }

    pub fn csv(&self) -> String {
        csv_rows(
            "batch,draws,exact,mc_mean,standard_error,z_score",
            [vec![
                self.batch as f64,
                self.draws as f64,
                self.exact,
                self.mc_mean,
                self.standard_error,
                self.z_score,
            ]],
        )
    }
}

/// Compares the Monte Carlo mean of the minibatch loss against exact enumeration
/// of `batch · (2·E d(x,y) − E d(y,y′))` on random 2-D support points.
pub fn check_unbiased(seed: u64, support_size: usize, batch: usize, draws: usize) -> Result<UnbiasednessCheck> {
    ensure!((2..=8).contains(&support_size), "support size must lie in 2..=8");
    ensure!(batch >= 1 && draws >= 2, "need a positive batch and at least two draws");
    let mut rng = purpose_rng(seed, "unbiased-setup");
    let support: Vec<Vec<f64>> = (0..support_size)
        .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let probs = |rng: &mut rand_chacha::ChaCha8Rng| {
        let w: Vec<f64> = (0..support_size).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        DiscreteDist {
            probs: w.iter().map(|v| v / s).collect(),
        }
    };
    let p = probs(&mut rng);
    let q = probs(&mut rng);
    let metric = PowerDistance::euclidean();
    let d = |i: usize, j: usize| metric.eval(&support[i], &support[j]);
    let mut exact_xy = 0.0;
    let mut exact_yy = 0.0;
    for i in 0..support_size {
        for j in 0..support_size {
            exact_xy += p.probs[i] * q.probs[j] * d(i, j)?;
            exact_yy += q.probs[i] * q.probs[j] * d(i, j)?;
        }
    }
    let exact = batch as f64 * (2.0 * exact_xy - exact_yy);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for draw in 0..draws as u64 {
        let mut r = stream_rng(seed, draw, 0, 0);
        let xs: Vec<&[f64]> = (0..batch).map(|_| support[p.sample(&mut r)].as_slice()).collect();
        let ys: Vec<&[f64]> = (0..batch).map(|_| support[q.sample(&mut r)].as_slice()).collect();
        let yps: Vec<&[f64]> = (0..batch).map(|_| support[q.sample(&mut r)].as_slice()).collect();
        let v = minibatch_ged_loss(&xs, &ys, &yps, GedLossConfig::default(), &metric)?.total;
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mc_mean = sum / n;
    let var = (sum_sq - n * mc_mean * mc_mean) / (n - 1.0);
    let standard_error = (var.max(0.0) / n).sqrt();
    let z_score = if standard_error > 0.0 {
        (mc_mean - exact) / standard_error
    } else {
        0.0
    };
    Ok(UnbiasednessCheck {
        support,
        p,
        q,
        batch,
        draws,
        exact,
        mc_mean,
        standard_error,
        z_score,
    })
}

pub fn write_unbiased(check: &UnbiasednessCheck, dir: &Path) -> Result<()> {
    prepare_dir(dir)?;
    write_file(dir, "estimate.csv", check.csv().as_bytes())?;
    let mut report = serde_json::to_value(check).expect("serializable");
    report["schema_version"] = json!(SCHEMA_VERSION);
    report["experiment"] = json!("unbiasedness");
    report["passed"] = json!(check.passed());
    write_json(dir, "report.json", &report)
}

/// Synthetic harmonic tones with a log-uniform fundamental.
#[derive(Debug, Clone, Serialize)]
pub struct ToneTask {
    pub sample_rate_hz: u32,
    pub chunk: usize,
    pub n_chunks: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub harmonic_amps: Vec<f64>,
    /// Overall scale keeping the summed harmonics inside [−1, 1].
    pub gain: f64,
    /// Standard deviation of the additive white noise (variance 0.01).
    pub noise_std: f64,
    /// Adds the sine and cosine of the fundamental's phase at each chunk start
    /// to the per-chunk conditioning.
    pub phase_features: bool,
}

impl ToneTask {
    pub fn desk(chunk: usize, phase_features: bool) -> Self {
        Self {
            sample_rate_hz: 8000,
            chunk,
            n_chunks: 512 / chunk,
            f0_min_hz: 110.0,
            f0_max_hz: 440.0,
            harmonic_amps: vec![1.0, 0.5, 0.25],
            gain: 0.5,
            noise_std: 0.1,
            phase_features,
        }
    }

    pub fn len(&self) -> usize {
        self.chunk * self.n_chunks
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cond_dim(&self) -> usize {
        if self.phase_features {
            3
        } else {
            1
        }
    }

    /// `f0_j = f0_min · (f0_max/f0_min)^((j + ½)/count)`.
    pub fn heldout_f0(&self, j: usize, count: usize) -> f64 {
        self.f0_min_hz * (self.f0_max_hz / self.f0_min_hz).powf((j as f64 + 0.5) / count as f64)
    }

    fn norm_log_f0(&self, f0: f64) -> f64 {
        let (lo, hi) = (self.f0_min_hz.ln(), self.f0_max_hz.ln());
        2.0 * (f0.ln() - lo) / (hi - lo) - 1.0
    }

    /// Per-chunk conditioning rows, `n_chunks × cond_dim`.
    pub fn conditioning(&self, f0: f64) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.n_chunks * self.cond_dim());
        let v = self.norm_log_f0(f0);
        for t in 0..self.n_chunks {
            c.push(v);
            if self.phase_features {
                let theta = 2.0 * PI * f0 * (t * self.chunk) as f64 / self.sample_rate_hz as f64;
                c.push(theta.sin());
                c.push(theta.cos());
            }
        }
        c
    }

    /// Noisy harmonic tone with a random starting phase.
    pub fn tone(&self, f0: f64, rng: &mut impl Rng) -> Vec<f64> {
        let phase = rng.gen_range(0.0..2.0 * PI);
        let sr = self.sample_rate_hz as f64;
        (0..self.len())
            .map(|n| {
                let clean: f64 = self
                    .harmonic_amps
                    .iter()
                    .enumerate()
                    .map(|(h, a)| {
                        let h = (h + 1) as f64;
                        a * (h * (2.0 * PI * f0 * n as f64 / sr + phase)).sin()
                    })
                    .sum();
                self.gain * clean + self.noise_std * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    pub fn draw_f0(&self, rng: &mut impl Rng) -> f64 {
        rng.gen_range(self.f0_min_hz.ln()..self.f0_max_hz.ln()).exp()
    }
}

/// Settings for the conditional audio experiment.
#[derive(Debug, Clone, Serialize)]
pub struct AudioOptions {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub repulsive: bool,
    pub ema_decay: Option<f64>,
    pub chunk: usize,
    pub blocks: usize,
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
    pub latent_dim: usize,
    pub phase_features: bool,
    pub windows: Vec<usize>,
    pub oversample: usize,
    /// Held-out conditions evaluated after training.
    pub heldout: usize,
    /// Window of the pitch check.
    pub pitch_window: usize,
    /// Worker threads; `None` reads `GED_THREADS`.
    pub threads: Option<usize>,
}

pub const DESK_WINDOWS: [usize; 6] = [16, 32, 64, 128, 256, 512];

impl AudioOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            steps: 10_000,
            batch: 4,
            lr: 5e-4,
            warmup_steps: 200,
            seed,
            repulsive: true,
            ema_decay: None,
            chunk: 16,
            blocks: 4,
            hidden_channels: 128,
            bottleneck_channels: 32,
            latent_dim: 4,
            phase_features: true,
            windows: DESK_WINDOWS.to_vec(),
            oversample: 2,
            heldout: 50,
            pitch_window: 512,
            threads: None,
        }
    }

    pub fn task(&self) -> ToneTask {
        ToneTask::desk(self.chunk, self.phase_features)
    }

    pub fn distance_config(&self) -> DistanceConfig {
        DistanceConfig::with_windows(self.windows.clone()).with_oversample(self.oversample)
    }

    pub fn generator_config(&self) -> IstftConfig {
        IstftConfig {
            chunk_size: self.chunk,
            n_blocks: self.blocks,
            hidden_channels: self.hidden_channels,
            bottleneck_channels: self.bottleneck_channels,
            cond_dim: self.task().cond_dim(),
            latent_dim: self.latent_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1 && self.batch >= 1, "steps and batch must be positive");
        ensure!(self.heldout >= 2, "at least two held-out conditions are required");
        ensure!(
            self.chunk >= 2 && self.chunk % 2 == 0 && 512 % self.chunk == 0,
            "chunk size must be an even divisor of 512, got {}",
            self.chunk
        );
        let task = self.task();
        ensure!(
            self.windows.iter().all(|&k| k <= task.len()) && self.pitch_window <= task.len(),
            "window lengths must not exceed the {}-sample clips",
            task.len()
        );
        self.distance_config().validate()?;
        self.generator_config().validate()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HeldoutRow {
    pub index: usize,
    pub f0_hz: f64,
    pub pitch_match: bool,
    pub d_generated_real: f64,
    pub d_real_real: f64,
}

#[derive(Debug, Clone)]
pub struct AudioRun {
    pub metrics: Vec<StepMetrics>,
    pub heldout: Vec<HeldoutRow>,
    pub generated: Vec<Waveform>,
    pub real: Vec<Waveform>,
    pub pitch_accuracy: f64,
    pub mean_d_generated_real: f64,
    pub mean_d_real_real: f64,
    pub frechet_proxy: f64,
    pub parameter_count: usize,
    pub report: Value,
}

impl AudioRun {
    pub fn distance_ratio(&self) -> f64 {
        self.mean_d_generated_real / self.mean_d_real_real
    }

    pub fn heldout_csv(&self) -> String {
        let mut out = String::from("index,f0_hz,pitch_match,d_generated_real,d_real_real\n");
        for r in &self.heldout {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.index, r.f0_hz, r.pitch_match as u8, r.d_generated_real, r.d_real_real
            );
        }
        out
    }
}

/// Loss and gradients for one training example of the audio task.
#[allow(clippy::too_many_arguments)]
fn audio_example(
    gen: &IstftGenerator,
    params: &GeneratorParams,
    dist: &MultiScaleDistance,
    x: &[f64],
    c: &[f64],
    z: Vec<f64>,
    z_prime: Vec<f64>,
    cfg: GedLossConfig,
) -> Result<(GedLossValue, ParamGrads)> {
    let gc = gen.config();
    let t = c.len() / gc.cond_dim;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let cv = g.constant(vec![t, gc.cond_dim], c.to_vec())?;
    let xf = dist.features(x)?;
    let xn = dist.constant_feature_nodes(&mut g, &xf)?;
    let zv = g.constant(vec![t, gc.latent_dim], z)?;
    let y = gen.forward_node(&mut g, &p, cv, zv)?;
    let yn = dist.feature_nodes(&mut g, y)?;
    let attract = dist.distance_from_features(&mut g, &xn, &yn)?;
    let mut repulse = Vec::new();
    if cfg.repulsive {
        let zp = g.constant(vec![t, gc.latent_dim], z_prime)?;
        let yp = gen.forward_node(&mut g, &p, cv, zp)?;
        let ypn = dist.feature_nodes(&mut g, yp)?;
        repulse.push(dist.distance_from_features(&mut g, &yn, &ypn)?);
    }
    let nodes = ged_loss_nodes(&mut g, &[attract], &repulse, cfg)?;
    g.backward(nodes.total)?;
    Ok((loss_value(&g, &nodes), p.grads(&g)))
}

const HELDOUT_TAG: u64 = 0x4845_4C44;

pub fn train_audio(opts: &AudioOptions, out: Option<&Path>) -> Result<AudioRun> {
    opts.validate()?;
    let task = opts.task();
    let gcfg = opts.generator_config();
    let mut gen = IstftGenerator::new(gcfg, opts.seed)?;
    let dist = MultiScaleDistance::new(opts.distance_config(), task.sample_rate_hz)?;
    let latent = LatentSampler::new(gcfg.latent_dim, None)?;
    let cfg = GedLossConfig {
        repulsive: opts.repulsive,
    };
    let threads = opts.threads.unwrap_or_else(worker_threads).max(1);
    let adam = AdamConfig::toy().with_lr(opts.lr).with_warmup(opts.warmup_steps);
    let model = gen.clone();
    let mut params = gen.params.clone();
    let (metrics, ema, outcome) = train_loop(&mut params, adam, opts.steps, opts.ema_decay, |step, p| {
        let per_example = parallel_map(opts.batch, threads, |i| {
            let mut r = stream_rng(opts.seed, step, i as u64, 0);
            let f0 = task.draw_f0(&mut r);
            let x = task.tone(f0, &mut r);
            let c = task.conditioning(f0);
            let z = latent.sample_rows(&mut stream_rng(opts.seed, step, i as u64, 1), task.n_chunks);
            let zp = latent.sample_rows(&mut stream_rng(opts.seed, step, i as u64, 2), task.n_chunks);
            audio_example(&model, p, &dist, &x, &c, z, zp, cfg)
        })?;
        let mut value = GedLossValue {
            total: 0.0,
            attract: 0.0,
            repulse: 0.0,
        };
        let mut grads = ParamGrads::new();
        for (v, g) in per_example {
            value.total += v.total;
            value.attract += v.attract;
            value.repulse += v.repulse;
            accumulate_grads(&mut grads, &g);
        }
        Ok(LossEval { value, grads })
    });
    settle(outcome, &metrics, out)?;
    gen.params = ema.map(|e| e.params().clone()).unwrap_or(params);

    let eval_seed = derive_seed(opts.seed, &[HELDOUT_TAG]);
    let rows = parallel_map(opts.heldout, threads, |j| {
        let f0 = task.heldout_f0(j, opts.heldout);
        let c = task.conditioning(f0);
        let z = latent.sample_rows(&mut stream_rng(eval_seed, 0, j as u64, 0), task.n_chunks);
        let y = crate::models::istft_generator_forward(&gen, &c, &z)?;
        let x = task.tone(f0, &mut stream_rng(eval_seed, 0, j as u64, 1));
        let x2 = task.tone(f0, &mut stream_rng(eval_seed, 0, j as u64, 2));
        let yw = Waveform::new(y, task.sample_rate_hz)?;
        let row = HeldoutRow {
            index: j,
            f0_hz: f0,
            pitch_match: pitch_peak_match(&yw, f0, opts.pitch_window)?,
            d_generated_real: dist.distance(yw.samples(), &x)?,
            d_real_real: dist.distance(&x2, &x)?,
        };
        Ok((row, yw, Waveform::new(x, task.sample_rate_hz)?))
    })?;
    let mut heldout = Vec::with_capacity(rows.len());
    let mut generated = Vec::with_capacity(rows.len());
    let mut real = Vec::with_capacity(rows.len());
    for (r, y, x) in rows {
        heldout.push(r);
        generated.push(y);
        real.push(x);
    }
    let n = heldout.len() as f64;
    let pitch_accuracy = heldout.iter().filter(|r| r.pitch_match).count() as f64 / n;
    let mean_d_generated_real = heldout.iter().map(|r| r.d_generated_real).sum::<f64>() / n;
    let mean_d_real_real = heldout.iter().map(|r| r.d_real_real).sum::<f64>() / n;
    let embed_cfg = crate::dsp::StftConfig::new(64).with_oversample(1);
    let frechet_proxy = frechet_gaussian(
        &embed_spectral_with(&generated, &embed_cfg, true)?,
        &embed_spectral_with(&real, &embed_cfg, true)?,
    )?;
    let parameter_count = gen.parameter_count();
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": "audio",
        "repulsive": opts.repulsive,
        "label": if opts.repulsive { "repulsive" } else { "no-repulsive" },
        "options": opts,
        "task": task,
        "parameters": parameter_count,
        "pitch_accuracy": pitch_accuracy,
        "mean_d_generated_real": mean_d_generated_real,
        "mean_d_real_real": mean_d_real_real,
        "distance_ratio": mean_d_generated_real / mean_d_real_real,
        "frechet_proxy": frechet_proxy,
        "final_loss": metrics.last().map(|m| m.loss),
    });
    let run = AudioRun {
        metrics,
        heldout,
        generated,
        real,
        pitch_accuracy,
        mean_d_generated_real,
        mean_d_real_real,
        frechet_proxy,
        parameter_count,
        report,
    };
    if let Some(dir) = out {
        prepare_dir(dir)?;
        let wav_dir = dir.join("wav");
        prepare_dir(&wav_dir)?;
        for (j, (y, x)) in run.generated.iter().zip(&run.real).enumerate() {
            wav_write(wav_dir.join(format!("generated_{j:02}.wav")), y)?;
            wav_write(wav_dir.join(format!("real_{j:02}.wav")), x)?;
        }
        write_file(dir, "heldout.csv", run.heldout_csv().as_bytes())?;
        crate::checkpoint::save(dir.join("params.ckpt"), &gen.params)?;
        write_file(dir, "metrics.csv", metrics_csv(&run.metrics).as_bytes())?;
        write_json(dir, "report.json", &run.report)?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub row: usize,
    pub kind: String,
    pub windows: Vec<usize>,
    pub oversample: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub frechet_proxy: f64,
    pub pitch_accuracy: f64,
}

impl AblationRow {
    pub fn is_finite(&self) -> bool {
        self.final_loss.is_finite() && self.frechet_proxy.is_finite() && self.pitch_accuracy.is_finite()
    }
}

pub const ABLATION_OVERSAMPLING: [usize; 5] = [1, 2, 4, 8, 16];
/// Training steps per ablation row unless overridden.
pub const ABLATION_STEPS: u64 = 200;

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub rows: Vec<AblationRow>,
    pub report: Value,
}

impl AblationGrid {
    pub fn csv(&self) -> String {
        let mut out = String::from("row,kind,windows,oversample,steps,final_loss,frechet_proxy,pitch_accuracy\n");
        for r in &self.rows {
            let windows: Vec<String> = r.windows.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.row,
                r.kind,
                windows.join(";"),
                r.oversample,
                r.steps,
                r.final_loss,
                r.frechet_proxy,
                r.pitch_accuracy
            );
        }
        out
    }
}

/// Retrains the audio model for every single-window loss, every oversampling
/// factor and the full multi-scale baseline.
pub fn ablate(base: &AudioOptions, windows: &[usize], oversampling: &[usize], out: Option<&Path>) -> Result<AblationGrid> {
    ensure!(!windows.is_empty() && !oversampling.is_empty(), "ablation grid must not be empty");
    let mut configs: Vec<(String, Vec<usize>, usize)> = Vec::new();
    for &k in windows {
        configs.push(("single_window".into(), vec![k], base.oversample));
    }
    for &m in oversampling {
        configs.push(("oversampling".into(), base.windows.clone(), m));
    }
    configs.push(("baseline".into(), base.windows.clone(), base.oversample));
    let mut rows = Vec::with_capacity(configs.len());
    for (i, (kind, w, m)) in configs.into_iter().enumerate() {
        let opts = AudioOptions {
            windows: w.clone(),
            oversample: m,
            ..base.clone()
        };
        let run = train_audio(&opts, None)?;
        rows.push(AblationRow {
            row: i,
            kind,
            windows: w,
            oversample: m,
            steps: opts.steps,
            final_loss: run.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
            frechet_proxy: run.frechet_proxy,
            pitch_accuracy: run.pitch_accuracy,
        });
    }
    let baseline = rows.last().expect("baseline row").pitch_accuracy;
    let flagged: Vec<usize> = rows
        .iter()
        .filter(|r| r.kind == "single_window" && r.pitch_accuracy > baseline)
        .map(|r| r.row)
        .collect();
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "experiment": "ablation",
        "options": base,
        "rows": rows,
        "baseline_pitch_accuracy": baseline,
        "single_window_rows_beating_baseline": flagged,
        "all_finite": rows.iter().all(AblationRow::is_finite),
    });
    let grid = AblationGrid { rows, report };
    if let Some(dir) = out {
        prepare_dir(dir)?;
        write_file(dir, "grid.csv", grid.csv().as_bytes())?;
        write_json(dir, "report.json", &grid.report)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

type Probe = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// `Σ w ⊙ out` with fixed pseudo-random weights, so every output element matters.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    let mut r = purpose_rng(seed, "gradcheck-weights");
    let w: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..1.5)).collect();
    let shape = g.shape(out).to_vec();
    let wv = g.constant(shape, w)?;
    let prod = g.mul(out, wv)?;
    Ok(g.sum(prod))
}

fn split(g: &mut Graph, x: Var, at: usize) -> Result<(Var, Var)> {
    let n = g.value(x).len();
    Ok((g.slice_rows(x, 0, at)?, g.slice_rows(x, at, n)?))
}

/// Named scalar probes of each primitive, with input length and a sampler for
/// valid evaluation points.
fn primitive_probes() -> Vec<(&'static str, usize, fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<f64>, Probe)> {
    fn normal(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }
    fn positive(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(0.2..2.0)).collect()
    }
    /// Bounded away from zero so kinks are never crossed by the probe step.
    fn off_zero(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(0.05..2.0);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect()
    }
    let mut v: Vec<(&'static str, usize, fn(&mut rand_chacha::ChaCha8Rng, usize) -> Vec<f64>, Probe)> = Vec::new();
    macro_rules! probe {
        ($name:expr, $n:expr, $sampler:expr, $body:expr) => {
            v.push(($name, $n, $sampler, Box::new($body)));
        };
    }
    probe!("add", 8, normal, |g, x| {
        let (a, b) = split(g, x, 4)?;
        let o = g.add(a, b)?;
        weighted_sum(g, o, 1)
    });
    probe!("sub", 8, normal, |g, x| {
        let (a, b) = split(g, x, 4)?;
        let o = g.sub(a, b)?;
        weighted_sum(g, o, 2)
    });
    probe!("mul", 8, normal, |g, x| {
        let (a, b) = split(g, x, 4)?;
        let o = g.mul(a, b)?;
        weighted_sum(g, o, 3)
    });
    probe!("div", 8, positive, |g, x| {
        let (a, b) = split(g, x, 4)?;
        let o = g.div(a, b)?;
        weighted_sum(g, o, 4)
    });
    probe!("scalar_broadcast", 5, normal, |g, x| {
        let (a, s) = split(g, x, 4)?;
        let o = g.mul(a, s)?;
        let o = g.add(o, s)?;
        let o = g.mul_scalar(o, 1.7);
        let o = g.add_scalar(o, -0.3);
        weighted_sum(g, o, 5)
    });
    probe!("matmul", 9, normal, |g, x| {
        let (a, b) = split(g, x, 6)?;
        let a = g.reshape(a, vec![2, 3])?;
        let b = g.reshape(b, vec![3, 1])?;
        let o = g.matmul(a, b)?;
        weighted_sum(g, o, 6)
    });
    probe!("affine", 14, normal, |g, x| {
        let (a, rest) = split(g, x, 6)?;
        let (w, b) = split(g, rest, 6)?;
        let a = g.reshape(a, vec![2, 3])?;
        let w = g.reshape(w, vec![3, 2])?;
        let o = g.affine(a, w, b)?;
        weighted_sum(g, o, 7)
    });
    probe!("mul_col", 9, normal, |g, x| {
        let (a, s) = split(g, x, 6)?;
        let a = g.reshape(a, vec![3, 2])?;
        let o = g.mul_col(a, s)?;
        weighted_sum(g, o, 8)
    });
    probe!("conv1d_k1", 12 + 6 + 2, normal, |g, x| {
        let (a, rest) = split(g, x, 12)?;
        let (w, b) = split(g, rest, 6)?;
        let a = g.reshape(a, vec![4, 3])?;
        let w = g.reshape(w, vec![1, 3, 2])?;
        let o = g.conv1d(a, w, Some(b))?;
        weighted_sum(g, o, 9)
    });
    probe!("conv1d_k5", 12 + 30 + 3, normal, |g, x| {
        let (a, rest) = split(g, x, 12)?;
        let (w, b) = split(g, rest, 30)?;
        let a = g.reshape(a, vec![6, 2])?;
        let w = g.reshape(w, vec![5, 2, 3])?;
        let o = g.conv1d(a, w, Some(b))?;
        weighted_sum(g, o, 10)
    });
    probe!("relu", 6, off_zero, |g, x| {
        let o = g.relu(x);
        weighted_sum(g, o, 11)
    });
    probe!("leaky_relu", 6, off_zero, |g, x| {
        let o = g.leaky_relu(x, 0.2);
        weighted_sum(g, o, 12)
    });
    probe!("tanh", 6, normal, |g, x| {
        let o = g.tanh(x);
        weighted_sum(g, o, 13)
    });
    probe!("exp", 6, normal, |g, x| {
        let o = g.exp(x);
        weighted_sum(g, o, 14)
    });
    probe!("log", 6, positive, |g, x| {
        let o = g.log(x)?;
        weighted_sum(g, o, 15)
    });
    probe!("sqrt", 6, positive, |g, x| {
        let o = g.sqrt(x)?;
        weighted_sum(g, o, 16)
    });
    probe!("abs", 6, off_zero, |g, x| {
        let o = g.abs(x);
        weighted_sum(g, o, 17)
    });
    probe!("powf", 6, positive, |g, x| {
        let o = g.powf(x, 1.5)?;
        weighted_sum(g, o, 18)
    });
    probe!("sum", 6, normal, |g, x| {
        let sq = g.square(x)?;
        Ok(g.sum(sq))
    });
    probe!("mean", 6, normal, |g, x| {
        let sq = g.square(x)?;
        Ok(g.mean(sq))
    });
    probe!("concat_rows", 6, normal, |g, x| {
        let (a, b) = split(g, x, 2)?;
        let a = g.reshape(a, vec![1, 2])?;
        let b = g.reshape(b, vec![2, 2])?;
        let o = g.concat(&[a, b, a], 0)?;
        weighted_sum(g, o, 19)
    });
    probe!("concat_cols", 6, normal, |g, x| {
        let (a, b) = split(g, x, 2)?;
        let a = g.reshape(a, vec![2, 1])?;
        let b = g.reshape(b, vec![2, 2])?;
        let o = g.concat(&[b, a], 1)?;
        weighted_sum(g, o, 20)
    });
    probe!("slice", 12, normal, |g, x| {
        let m = g.reshape(x, vec![4, 3])?;
        let r = g.slice_rows(m, 1, 3)?;
        let c = g.slice_cols(r, 1, 3)?;
        weighted_sum(g, c, 21)
    });
    probe!("frame_extract", 10, normal, |g, x| {
        let f = g.frame_extract(x, 4, 2)?;
        weighted_sum(g, f, 22)
    });
    probe!("overlap_add", 12, normal, |g, x| {
        let f = g.reshape(x, vec![3, 4])?;
        let o = g.overlap_add(f, 2)?;
        weighted_sum(g, o, 23)
    });
    probe!("l2_norm_rows", 8, normal, |g, x| {
        let m = g.reshape(x, vec![2, 4])?;
        let o = g.l2_norm_rows(m, 1e-12)?;
        weighted_sum(g, o, 24)
    });
    probe!("matmul_const", 6, normal, |g, x| {
        let m = g.reshape(x, vec![2, 3])?;
        let b: std::sync::Arc<[f64]> = std::sync::Arc::from(vec![0.3, -1.0, 0.8, 0.5, 1.2, -0.4]);
        let o = g.matmul_const(m, b, 3, 2)?;
        weighted_sum(g, o, 25)
    });
    v
}

fn spectral_margin(dist: &MultiScaleDistance, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(dist.features(a)?.min_gap(&dist.features(b)?))
}

/// Runs every primitive probe and the waveform-to-distance pipeline at
/// `points` random points each.
pub fn gradcheck_suite(seed: u64, points: usize) -> Result<Vec<GradCheckRow>> {
    let mut rows = gradcheck_suite_primitives(seed, points)?;
    rows.push(pipeline_check(seed, points)?);
    rows.push(generator_pipeline_check(seed, points.min(3))?);
    Ok(rows)
}

/// The primitive probes alone.
pub fn gradcheck_suite_primitives(seed: u64, points: usize) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for (i, (name, n, sampler, f)) in primitive_probes().into_iter().enumerate() {
        let mut r = stream_rng(seed, 0, i as u64, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let x = Tensor::new(vec![n], sampler(&mut r, n))?;
            worst = worst.max(grad_check(&f, &x, GRADCHECK_STEP)?);
        }
        rows.push(GradCheckRow {
            name: name.to_string(),
            points,
            max_rel_err: worst,
            passed: worst < GRADCHECK_TOL,
        });
    }
    Ok(rows)
}

/// The waveform → multi-scale distance pipeline of the audio loss on
/// 512-sample unit-variance noise.
///
/// The target is half the probe signal, so every spectral difference is half a
/// magnitude. Points whose smallest magnitude falls below 2e-3 are redrawn:
/// near a zero the log term's curvature makes central differences inaccurate.
pub fn pipeline_check(seed: u64, points: usize) -> Result<GradCheckRow> {
    let dist = MultiScaleDistance::new(AudioOptions::new(seed).distance_config(), 8000)?;
    let mut r = purpose_rng(seed, "pipeline-gradcheck");
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < points {
        let x: Vec<f64> = (0..512).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let target: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
        if spectral_margin(&dist, &x, &target)? < 1e-3 {
            continue;
        }
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let t = g.constant(vec![512], target.clone())?;
            dist.distance_node(g, v, t)
        };
        worst = worst.max(grad_check(f, &Tensor::new(vec![512], x)?, GRADCHECK_STEP)?);
        done += 1;
    }
    Ok(GradCheckRow {
        name: "waveform_to_multiscale_distance".into(),
        points,
        max_rel_err: worst,
        passed: worst < GRADCHECK_TOL,
    })
}

/// Generator output layer → inverse STFT → distance, on a tiny generator.
pub fn generator_pipeline_check(seed: u64, points: usize) -> Result<GradCheckRow> {
    let cfg = IstftConfig {
        chunk_size: 4,
        n_blocks: 1,
        hidden_channels: 6,
        bottleneck_channels: 3,
        cond_dim: 2,
        latent_dim: 2,
    };
    let gen = IstftGenerator::new(cfg, seed)?;
    let dist = MultiScaleDistance::new(DistanceConfig::with_windows(vec![4, 8]).with_oversample(2), 8000)?;
    let mut r = purpose_rng(seed, "generator-gradcheck");
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let c: Vec<f64> = (0..6).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..6).map(|_| r.sample(StandardNormal)).collect();
        let target: Vec<f64> = (0..12).map(|_| r.sample(StandardNormal)).collect();
        let mut params = gen.params.clone();
        for (_, t) in params.iter_mut() {
            for v in t.values_mut() {
                *v += 0.3 * r.sample::<f64, _>(StandardNormal);
            }
        }
        for (name, tensor) in params.iter() {
            let f = |g: &mut Graph, x: Var| -> Result<Var> {
                let bound = params.bind_with(g, name, x);
                let cv = g.constant(vec![3, 2], c.clone())?;
                let zv = g.constant(vec![3, 2], z.clone())?;
                let y = gen.forward_node(g, &bound, cv, zv)?;
                let t = g.constant(vec![12], target.clone())?;
                dist.distance_node(g, y, t)
            };
            worst = worst.max(grad_check(f, tensor, GRADCHECK_STEP)?);
        }
    }
    Ok(GradCheckRow {
        name: "istft_generator_to_distance".into(),
        points,
        max_rel_err: worst,
        passed: worst < GRADCHECK_TOL,
    })
}

pub fn gradcheck_csv(rows: &[GradCheckRow]) -> String {
    let mut out = String::from("name,points,max_rel_err,passed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:e},{}", r.name, r.points, r.max_rel_err, r.passed);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_audio(seed: u64) -> AudioOptions {
        AudioOptions {
            steps: 3,
            batch: 2,
            hidden_channels: 8,
            bottleneck_channels: 4,
            blocks: 1,
            windows: vec![16, 64],
            heldout: 3,
            pitch_window: 256,
            ..AudioOptions::new(seed)
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let seq = parallel_map(10, 1, |i| Ok(i * i)).unwrap();
        let par = parallel_map(10, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(seq, par);
        let err = parallel_map(5, 2, |i| if i == 3 { Err(Error::invalid("boom")) } else { Ok(i) });
        assert!(err.is_err());
    }

    #[test]
    fn triangle_has_side_two() {
        let m = GmmSpec::triangle().means;
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let d = ((m[a][0] - m[b][0]).powi(2) + (m[a][1] - m[b][1]).powi(2)).sqrt();
            assert!((d - 2.0).abs() < 1e-12);
        }
        let c: f64 = m.iter().map(|p| p[0] + p[1]).sum();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn tone_task_shapes_and_range() {
        let t = ToneTask::desk(16, true);
        assert_eq!(t.len(), 512);
        assert_eq!(t.conditioning(220.0).len(), 32 * 3);
        assert!((t.heldout_f0(0, 50) - 110.0 * 4f64.powf(0.01)).abs() < 1e-9);
        assert!(t.heldout_f0(49, 50) < 440.0);
        let c = ToneTask::desk(16, false).conditioning(110.0);
        assert!(c.iter().all(|v| (*v + 1.0).abs() < 1e-12));
        let mut r = purpose_rng(3, "t");
        let f0 = t.draw_f0(&mut r);
        assert!((110.0..440.0).contains(&f0));
        assert_eq!(t.tone(f0, &mut r).len(), 512);
    }

    #[test]
    fn unbiased_check_small() {
        let c = check_unbiased(5, 4, 3, 20_000).unwrap();
        assert!(c.passed(), "z = {}", c.z_score);
        assert!(check_unbiased(5, 9, 3, 10).is_err());
    }

    #[test]
    fn location_scale_short_run_is_deterministic() {
        let opts = ToyOptions {
            steps: 30,
            ..location_scale_options(2)
        };
        let a = train_location_scale(&opts, None).unwrap();
        let b = train_location_scale(&opts, None).unwrap();
        assert_eq!(metrics_csv(&a.metrics).lines().count(), 31);
        assert_eq!(a.mu.to_bits(), b.mu.to_bits());
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.trajectory.len(), 3);
    }

    #[test]
    fn gmm_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let opts = ToyOptions {
            steps: 5,
            eval_samples: 20,
            ..gmm_options(1)
        };
        let run = train_gmm(&opts, Some(dir.path())).unwrap();
        let samples = fs::read_to_string(dir.path().join("samples.csv")).unwrap();
        assert!(samples.starts_with("x,y\n"));
        assert_eq!(samples.lines().count(), 21);
        let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(report["schema_version"], json!(SCHEMA_VERSION));
        assert_eq!(run.metrics.len(), 5);
        let params = crate::checkpoint::load(dir.path().join("params.ckpt")).unwrap();
        assert_eq!(params.count(), MlpGenerator::new(0, 2, &GMM_HIDDEN, 2, Activation::Relu, 0).unwrap().params.count());
    }

    #[test]
    fn divergence_flushes_partial_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = GeneratorParams::new();
        params.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let (metrics, _, outcome) = train_loop(&mut params, AdamConfig::toy(), 5, None, |step, _| {
            let loss = if step == 3 { f64::NAN } else { 1.0 };
            let mut grads = ParamGrads::new();
            grads.insert("w".into(), vec![0.5]);
            Ok(LossEval {
                value: GedLossValue {
                    total: loss,
                    attract: loss,
                    repulse: 0.0,
                },
                grads,
            })
        });
        assert_eq!(metrics.len(), 2);
        let err = settle(outcome, &metrics, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 3, .. }));
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn audio_tiny_run_is_thread_independent() {
        let opts = tiny_audio(4);
        let a = train_audio(&opts, None).unwrap();
        assert_eq!(a.heldout.len(), 3);
        assert_eq!(a.generated[0].len(), 512);
        assert!(a.heldout_csv().starts_with("index,f0_hz,pitch_match"));
        assert!(a.frechet_proxy.is_finite());
        let b = train_audio(
            &AudioOptions {
                threads: Some(3),
                ..opts.clone()
            },
            None,
        )
        .unwrap();
        let losses = |r: &AudioRun| r.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.heldout_csv(), b.heldout_csv());
        let bad = AudioOptions {
            chunk: 15,
            ..tiny_audio(4)
        };
        assert!(matches!(train_audio(&bad, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ablation_grid_shape() {
        let base = AudioOptions {
            steps: 1,
            ..tiny_audio(1)
        };
        let grid = ablate(&base, &[16, 64], &[1, 2], None).unwrap();
        assert_eq!(grid.rows.len(), 5);
        assert_eq!(grid.rows.last().unwrap().kind, "baseline");
        let csv = grid.csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,single_window,16,2,1,"));
        assert!(csv.contains(",16;64,1,"));
    }

    #[test]
    fn gradcheck_primitives_pass() {
        for row in gradcheck_suite_primitives(7, 2).unwrap() {
            assert!(row.passed, "{}: {}", row.name, row.max_rel_err);
        }
    }
}
