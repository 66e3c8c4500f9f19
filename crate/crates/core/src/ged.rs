//! Energy-distance statistics.
//!
//! A symmetric kernel `k` induces the distance `d(x, y) = ½(k(x,x) + k(y,y)) − k(x,y)`,
//! under which the squared MMD and the generalized energy distance
//! `E[2d(x,y) − d(x,x′) − d(y,y′)]` coincide. Training only needs the model-dependent
//! part, the energy score `E[2d(x,y) − d(y,y′)]`, estimated per example from two
//! independent model draws.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::dsp::Waveform;
use crate::error::{ensure, Result};
use crate::spectral::MultiScaleDistance;

/// A distance between two samples.
pub trait Metric<T: ?Sized> {
    fn distance(&self, a: &T, b: &T) -> Result<f64>;
}

/// Wraps a closure as a [`Metric`].
pub struct FnMetric<F>(pub F);

impl<T: ?Sized, F: Fn(&T, &T) -> f64> Metric<T> for FnMetric<F> {
    fn distance(&self, a: &T, b: &T) -> Result<f64> {
        Ok((self.0)(a, b))
    }
}

impl Metric<[f64]> for MultiScaleDistance {
    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        MultiScaleDistance::distance(self, a, b)
    }
}

/// `‖x − y‖_α^β`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerDistance {
    alpha: f64,
    beta: f64,
}

impl PowerDistance {
    /// Requires `α ∈ (0, 2]` and `β ∈ (0, α]`, the region where the energy score is proper.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        ensure!(
            alpha > 0.0 && alpha <= 2.0 && beta > 0.0 && beta <= alpha,
            "power distance needs α ∈ (0, 2] and β ∈ (0, α], got α = {alpha}, β = {beta}"
        );
        Ok(Self { alpha, beta })
    }

    /// Any positive exponents, for experiments outside the proper region.
    pub fn new_unchecked(alpha: f64, beta: f64) -> Result<Self> {
        ensure!(
            alpha > 0.0 && beta > 0.0,
            "power distance exponents must be positive"
        );
        Ok(Self { alpha, beta })
    }

    pub fn euclidean() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        ensure!(
            x.len() == y.len(),
            "vectors of different length ({} vs {})",
            x.len(),
            y.len()
        );
        let s: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs().powf(self.alpha)).sum();
        Ok(s.powf(self.beta / self.alpha))
    }

    /// Row-wise distances between two r×n matrices of samples, as a rank-1 node.
    pub fn rows_node(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let diff = g.sub(a, b)?;
        if self.alpha == 2.0 && self.beta == 1.0 {
            return g.l2_norm_rows(diff, 1e-12);
        }
        let shape = g.shape(a).to_vec();
        let cols = if shape.len() == 2 { shape[1] } else { 1 };
        let abs = g.abs(diff);
        let powered = g.powf(abs, self.alpha)?;
        let ones = g.constant(vec![cols, 1], vec![1.0; cols])?;
        let sums = g.matmul(powered, ones)?;
        let rows = g.value(sums).len();
        let sums = g.reshape(sums, vec![rows])?;
        g.powf(sums, self.beta / self.alpha)
    }
}

impl Metric<[f64]> for PowerDistance {
    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.eval(a, b)
    }
}

pub fn power_distance(x: &[f64], y: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    PowerDistance::new(alpha, beta)?.eval(x, y)
}

/// `½(k(x,x) + k(y,y) − 2k(x,y))`.
pub fn kernel_to_distance<T: ?Sized>(kernel: impl Fn(&T, &T) -> f64, x: &T, y: &T) -> f64 {
    0.5 * (kernel(x, x) + kernel(y, y) - 2.0 * kernel(x, y))
}

/// Where a batch of samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Data,
    Model,
}

#[derive(Debug, Clone)]
pub struct SampleBatch<T> {
    items: Vec<T>,
    provenance: Provenance,
}

impl SampleBatch<Vec<f64>> {
    pub fn vectors(items: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        ensure!(!items.is_empty(), "sample batch must not be empty");
        let dim = items[0].len();
        ensure!(
            items.iter().all(|v| v.len() == dim),
            "sample batch must have homogeneous dimension"
        );
        Ok(Self { items, provenance })
    }
}

impl SampleBatch<Waveform> {
    pub fn waveforms(items: Vec<Waveform>, provenance: Provenance) -> Result<Self> {
        ensure!(!items.is_empty(), "sample batch must not be empty");
        let len = items[0].len();
        ensure!(
            items.iter().all(|w| w.len() == len),
            "sample batch must have homogeneous length"
        );
        Ok(Self { items, provenance })
    }
}

impl<T> SampleBatch<T> {
    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Mean of `f` over ordered pairs `i ≠ j`, summed row-major.
fn within_mean<T>(xs: &[T], f: &impl Fn(&T, &T) -> Result<f64>) -> Result<f64> {
    let n = xs.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += f(&xs[i], &xs[j])?;
            }
        }
    }
    Ok(s / (n * (n - 1)) as f64)
}

fn cross_mean<T>(xs: &[T], ys: &[T], f: &impl Fn(&T, &T) -> Result<f64>) -> Result<f64> {
    let mut s = 0.0;
    for x in xs {
        for y in ys {
            s += f(x, y)?;
        }
    }
    Ok(s / (xs.len() * ys.len()) as f64)
}

/// Unbiased squared MMD with distinct-index within-batch averages.
pub fn mmd2_ustat<T>(xs: &[T], ys: &[T], kernel: impl Fn(&T, &T) -> f64) -> Result<f64> {
    ensure!(
        xs.len() >= 2 && ys.len() >= 2,
        "MMD U-statistic needs at least two samples per batch ({} and {})",
        xs.len(),
        ys.len()
    );
    let k = |a: &T, b: &T| Ok(kernel(a, b));
    Ok(within_mean(xs, &k)? + within_mean(ys, &k)? - 2.0 * cross_mean(xs, ys, &k)?)
}

/// U-statistic estimate of `E[2d(x,y) − d(x,x′) − d(y,y′)]`.
pub fn ged_population_estimate<T: ?Sized, S: AsRef<T>>(
    xs: &[S],
    ys: &[S],
    metric: &impl Metric<T>,
) -> Result<f64> {
    ensure!(
        xs.len() >= 2 && ys.len() >= 2,
        "energy distance estimate needs at least two samples per batch ({} and {})",
        xs.len(),
        ys.len()
    );
    let d = |a: &S, b: &S| metric.distance(a.as_ref(), b.as_ref());
    Ok(2.0 * cross_mean(xs, ys, &d)? - within_mean(xs, &d)? - within_mean(ys, &d)?)
}

/// Single-draw estimate `2d(x,y) − d(y,y′)`.
pub fn energy_score<T: ?Sized>(x: &T, y: &T, y_prime: &T, metric: &impl Metric<T>) -> Result<f64> {
    Ok(2.0 * metric.distance(x, y)? - metric.distance(y, y_prime)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GedLossConfig {
    pub repulsive: bool,
}

impl Default for GedLossConfig {
    fn default() -> Self {
        Self { repulsive: true }
    }
}

/// Value of the minibatch loss and its two parts; `total = attract − repulse`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GedLossValue {
    pub total: f64,
    pub attract: f64,
    pub repulse: f64,
}

/// The minibatch energy-score loss bound to a metric.
pub struct GedLoss<M> {
    cfg: GedLossConfig,
    metric: M,
}

impl<M> GedLoss<M> {
    pub fn new(cfg: GedLossConfig, metric: M) -> Self {
        Self { cfg, metric }
    }

    /// Like [`GedLoss::new`], after probing the metric for symmetry and
    /// non-negativity on every pair of `probes`.
    pub fn validated<T: ?Sized, S: AsRef<T>>(cfg: GedLossConfig, metric: M, probes: &[S]) -> Result<Self>
    where
        M: Metric<T>,
    {
        validate_metric(&metric, probes)?;
        Ok(Self { cfg, metric })
    }

    pub fn config(&self) -> GedLossConfig {
        self.cfg
    }

    pub fn metric(&self) -> &M {
        &self.metric
    }

    pub fn eval<T: ?Sized, S: AsRef<T>>(&self, xs: &[S], ys: &[S], ys_prime: &[S]) -> Result<GedLossValue>
    where
        M: Metric<T>,
    {
        minibatch_ged_loss(xs, ys, ys_prime, self.cfg, &self.metric)
    }
}

/// Checks symmetry and non-negativity of `metric` on all pairs of `probes`.
pub fn validate_metric<T: ?Sized, S: AsRef<T>, M: Metric<T>>(metric: &M, probes: &[S]) -> Result<()> {
    for (i, a) in probes.iter().enumerate() {
        for b in &probes[i..] {
            let (a, b) = (a.as_ref(), b.as_ref());
            let ab = metric.distance(a, b)?;
            let ba = metric.distance(b, a)?;
            ensure!(ab >= 0.0 && ba >= 0.0, "metric returned a negative distance ({ab})");
            ensure!(
                (ab - ba).abs() <= 1e-9 * ab.abs().max(1.0),
                "metric is not symmetric: d(a,b) = {ab}, d(b,a) = {ba}"
            );
        }
    }
    Ok(())
}

/// `count` standard-normal probe vectors of dimension `dim`.
pub fn random_probes(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// `Σ_i 2d(x_i, y_i) − [repulsive]·d(y_i, y′_i)`, summed in example order.
pub fn minibatch_ged_loss<T: ?Sized, S: AsRef<T>>(
    xs: &[S],
    ys: &[S],
    ys_prime: &[S],
    cfg: GedLossConfig,
    metric: &impl Metric<T>,
) -> Result<GedLossValue> {
    ensure!(
        xs.len() == ys.len() && ys.len() == ys_prime.len(),
        "minibatch lengths differ ({}, {}, {})",
        xs.len(),
        ys.len(),
        ys_prime.len()
    );
    ensure!(!xs.is_empty(), "minibatch must not be empty");
    let mut attract = 0.0;
    let mut repulse = 0.0;
    for ((x, y), yp) in xs.iter().zip(ys).zip(ys_prime) {
        attract += 2.0 * metric.distance(x.as_ref(), y.as_ref())?;
        if cfg.repulsive {
            repulse += metric.distance(y.as_ref(), yp.as_ref())?;
        }
    }
    Ok(GedLossValue {
        total: attract - repulse,
        attract,
        repulse,
    })
}

/// Graph form of the minibatch loss.
#[derive(Debug, Clone, Copy)]
pub struct GedLossNodes {
    pub total: Var,
    pub attract: Var,
    /// `None` when the repulsive term is disabled.
    pub repulse: Option<Var>,
}

/// Builds `attract − repulse` from per-example distance nodes.
///
/// `attract_d` holds `d(x_i, y_i)`, `repulse_d` holds `d(y_i, y′_i)` (ignored when
/// the repulsive term is off). Each list may hold scalar or rank-1 nodes; all
/// entries are summed.
pub fn ged_loss_nodes(
    g: &mut Graph,
    attract_d: &[Var],
    repulse_d: &[Var],
    cfg: GedLossConfig,
) -> Result<GedLossNodes> {
    ensure!(!attract_d.is_empty(), "minibatch must not be empty");
    let joined = g.concat(attract_d, 0)?;
    let summed = g.sum(joined);
    let attract = g.mul_scalar(summed, 2.0);
    if !cfg.repulsive {
        return Ok(GedLossNodes {
            total: attract,
            attract,
            repulse: None,
        });
    }
    ensure!(
        !repulse_d.is_empty(),
        "repulsive term enabled but no model-pair distances were given"
    );
    let joined = g.concat(repulse_d, 0)?;
    let repulse = g.sum(joined);
    let total = g.sub(attract, repulse)?;
    Ok(GedLossNodes {
        total,
        attract,
        repulse: Some(repulse),
    })
}

/// Graph form of [`minibatch_ged_loss`] with a node-building distance.
pub fn minibatch_ged_loss_node(
    g: &mut Graph,
    xs: &[Var],
    ys: &[Var],
    ys_prime: &[Var],
    cfg: GedLossConfig,
    mut distance: impl FnMut(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<GedLossNodes> {
    ensure!(
        xs.len() == ys.len() && ys.len() == ys_prime.len(),
        "minibatch lengths differ ({}, {}, {})",
        xs.len(),
        ys.len(),
        ys_prime.len()
    );
    let mut attract = Vec::with_capacity(xs.len());
    let mut repulse = Vec::with_capacity(xs.len());
    for ((&x, &y), &yp) in xs.iter().zip(ys).zip(ys_prime) {
        attract.push(distance(g, x, y)?);
        if cfg.repulsive {
            repulse.push(distance(g, y, yp)?);
        }
    }
    ged_loss_nodes(g, &attract, &repulse, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn abs1(a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        (a[0] - b[0]).abs()
    }

    #[test]
    fn kernel_distance_identities() {
        let x = vec![1.0, -2.0, 0.5];
        let y = vec![0.3, 0.7, -1.1];
        let sq: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((kernel_to_distance(linear, &x, &y) - 0.5 * sq).abs() < 1e-14);
        assert_eq!(kernel_to_distance(|_: &Vec<f64>, _: &Vec<f64>| 3.0, &x, &y), 0.0);
        let gauss = |a: &Vec<f64>, b: &Vec<f64>| {
            (-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
        };
        assert_eq!(kernel_to_distance(gauss, &x, &x), 0.0);
    }

    #[test]
    fn mmd_two_point_hand_enumeration() {
        let xs = vec![vec![0.0], vec![1.0]];
        let ys = vec![vec![0.0], vec![1.0]];
        // within terms: (0·1 + 1·0)/2 = 0 each; cross: (0+0+0+1)/4 = 0.25
        let v = mmd2_ustat(&xs, &ys, linear).unwrap();
        assert!((v + 0.5).abs() < 1e-15, "{v}");
    }

    #[test]
    fn mmd_matches_brute_force_double_loop() {
        let xs = random_probes(3, 5, 1);
        let ys = random_probes(3, 4, 2);
        let mut t1 = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    t1 += linear(&xs[i], &xs[j]);
                }
            }
        }
        let mut t2 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    t2 += linear(&ys[i], &ys[j]);
                }
            }
        }
        let mut t3 = 0.0;
        for x in &xs {
            for y in &ys {
                t3 += linear(x, y);
            }
        }
        let expected = t1 / 20.0 + t2 / 12.0 - 2.0 * t3 / 20.0;
        assert!((mmd2_ustat(&xs, &ys, linear).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn small_batches_rejected() {
        let one = vec![vec![0.0]];
        let two = vec![vec![0.0], vec![1.0]];
        assert!(mmd2_ustat(&one, &two, linear).is_err());
        assert!(ged_population_estimate(&two, &one, &PowerDistance::euclidean()).is_err());
    }

    #[test]
    fn zero_metric_gives_zero_ged() {
        let xs = random_probes(2, 4, 3);
        let ys = random_probes(2, 4, 4);
        let zero = FnMetric(|_: &Vec<f64>, _: &Vec<f64>| 0.0);
        assert_eq!(ged_population_estimate(&xs, &ys, &zero).unwrap(), 0.0);
    }

    #[test]
    fn energy_score_special_cases() {
        let d = FnMetric(abs1);
        let (x, y) = (vec![0.3], vec![1.0]);
        assert_eq!(energy_score(&x, &y, &y, &d).unwrap(), 2.0 * 0.7);
        assert_eq!(energy_score(&x, &x, &x, &d).unwrap(), 0.0);
    }

    #[test]
    fn minibatch_loss_special_cases() {
        let d = FnMetric(abs1);
        let xs = vec![vec![1.0]];
        let ys = vec![vec![3.0]];
        let yp = vec![vec![0.0]];
        let off = minibatch_ged_loss(&xs, &ys, &yp, GedLossConfig { repulsive: false }, &d).unwrap();
        assert_eq!(off.total, 4.0);
        assert_eq!(off.repulse, 0.0);
        let on_same = minibatch_ged_loss(&xs, &ys, &ys, GedLossConfig { repulsive: true }, &d).unwrap();
        assert_eq!(on_same.total, off.total);
        let on = minibatch_ged_loss(&xs, &ys, &yp, GedLossConfig::default(), &d).unwrap();
        assert_eq!(on.total, 4.0 - 3.0);
        assert_eq!(on.total, on.attract - on.repulse);
        assert!(minibatch_ged_loss(&xs, &ys, &[], GedLossConfig::default(), &d).is_err());
    }

    #[test]
    fn power_distance_cases() {
        assert_eq!(power_distance(&[3.0, 4.0], &[0.0, 0.0], 2.0, 1.0).unwrap(), 5.0);
        assert_eq!(power_distance(&[1.5, 2.0], &[1.5, 2.0], 1.5, 1.0).unwrap(), 0.0);
        let x: [f64; 3] = [0.3, -1.2, 2.2];
        let y = [1.0, 0.4, -0.1];
        let l1: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum();
        assert!((power_distance(&x, &y, 1.0, 1.0).unwrap() - l1).abs() < 1e-14);
        assert!(PowerDistance::new(2.5, 1.0).is_err());
        assert!(PowerDistance::new(1.0, 1.5).is_err());
        assert!(PowerDistance::new_unchecked(3.0, 2.0).is_ok());
    }

    #[test]
    fn power_distance_rows_node_matches_eval() {
        let a = random_probes(3, 4, 5);
        let b = random_probes(3, 4, 6);
        for (alpha, beta) in [(2.0, 1.0), (1.0, 1.0), (1.5, 0.7)] {
            let pd = PowerDistance::new(alpha, beta).unwrap();
            let mut g = Graph::new();
            let va = g.constant(vec![4, 3], a.concat()).unwrap();
            let vb = g.constant(vec![4, 3], b.concat()).unwrap();
            let rows = pd.rows_node(&mut g, va, vb).unwrap();
            for i in 0..4 {
                let expected = pd.eval(&a[i], &b[i]).unwrap();
                assert!((g.value(rows)[i] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn metric_validation_catches_asymmetry() {
        let probes = random_probes(2, 16, 7);
        assert!(validate_metric(&PowerDistance::euclidean(), &probes).is_ok());
        let skew = FnMetric(|a: &Vec<f64>, b: &Vec<f64>| (a[0] - b[0]).max(0.0) + 2.0 * (b[0] - a[0]).max(0.0));
        assert!(GedLoss::validated(GedLossConfig::default(), skew, &probes).is_err());
        let neg = FnMetric(|_: &Vec<f64>, _: &Vec<f64>| -1.0);
        assert!(validate_metric(&neg, &probes).is_err());
    }

    #[test]
    fn loss_nodes_match_plain_loss() {
        let xs = random_probes(2, 3, 8);
        let ys = random_probes(2, 3, 9);
        let yp = random_probes(2, 3, 10);
        let pd = PowerDistance::euclidean();
        let plain = minibatch_ged_loss(&xs, &ys, &yp, GedLossConfig::default(), &pd).unwrap();
        let mut g = Graph::new();
        let vx: Vec<Var> = xs.iter().map(|v| g.constant(vec![1, 2], v.clone()).unwrap()).collect();
        let vy: Vec<Var> = ys.iter().map(|v| g.variable(vec![1, 2], v.clone()).unwrap()).collect();
        let vp: Vec<Var> = yp.iter().map(|v| g.variable(vec![1, 2], v.clone()).unwrap()).collect();
        let nodes = minibatch_ged_loss_node(&mut g, &vx, &vy, &vp, GedLossConfig::default(), |g, a, b| {
            pd.rows_node(g, a, b)
        })
        .unwrap();
        assert!((g.scalar(nodes.total) - plain.total).abs() < 1e-9);
        g.backward(nodes.total).unwrap();
        assert!(g.grad(vp[0]).is_some());
    }
}
