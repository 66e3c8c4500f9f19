//! Adam with linear warmup, a parameter EMA, and the two-sample training step.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ged::GedLossValue;
use crate::models::{GeneratorParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear warmup; 0 disables it.
    pub warmup_steps: u64,
    /// Cosine decay of the rate to zero over this many steps; 0 keeps it constant.
    pub decay_steps: u64,
}

impl Default for AdamConfig {
    /// The large-scale settings: lr 3e-4 with 6000 warmup steps.
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 6000,
            decay_steps: 0,
        }
    }
}

impl AdamConfig {
    /// Toy-experiment settings: lr 1e-3, no warmup.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: 0,
            ..Self::default()
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    pub fn with_cosine_decay(mut self, steps: u64) -> Self {
        self.decay_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive, got {}", self.lr);
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, "Adam epsilon must be positive");
        Ok(())
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.decay_steps == 0 {
            1.0
        } else {
            let frac = (t.saturating_sub(1) as f64 / self.decay_steps as f64).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        };
        self.lr * warm * decay
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    m: ParamGrads,
    v: ParamGrads,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &GeneratorParams) -> Result<Self> {
        cfg.validate()?;
        let zeros: ParamGrads = params.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        Ok(Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update; returns the learning rate used.
pub fn adam_step(state: &mut AdamState, params: &mut GeneratorParams, grads: &ParamGrads) -> Result<f64> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("no gradient for parameter {name}")))?;
        ensure!(
            g.len() == t.len() && state.m.get(name).is_some_and(|m| m.len() == t.len()),
            "gradient or optimizer state for {name} does not match its shape"
        );
    }
    state.t += 1;
    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.cfg;
    let lr = state.cfg.lr_at(state.t);
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked above");
        let v = state.v.get_mut(name).expect("checked above");
        for (((w, g), m), v) in t.values_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(lr)
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    decay: f64,
    shadow: GeneratorParams,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9999;

impl EmaState {
    pub fn new(decay: f64, params: &GeneratorParams) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&decay), "EMA decay must lie in [0, 1], got {decay}");
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.shadow
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(ema: &mut EmaState, params: &GeneratorParams) -> Result<()> {
    ensure!(
        ema.shadow.same_layout(params),
        "EMA shadow and parameters have different layouts"
    );
    let d = ema.decay;
    for ((_, s), (_, p)) in ema.shadow.iter_mut().zip(params.iter()) {
        for (s, p) in s.values_mut().iter_mut().zip(p.values()) {
            *s = d * *s + (1.0 - d) * p;
        }
    }
    Ok(())
}

/// Loss value and parameter gradients for one minibatch.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: GedLossValue,
    pub grads: ParamGrads,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_attract: f64,
    pub loss_repulse: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Evaluates the loss through `eval`, then applies Adam and (optionally) the EMA.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`] before any
/// parameter changes.
pub fn train_step(
    params: &mut GeneratorParams,
    adam: &mut AdamState,
    ema: Option<&mut EmaState>,
    eval: impl FnOnce(&GeneratorParams) -> Result<LossEval>,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let step = adam.step_count() + 1;
    let LossEval { value, grads } = eval(params)?;
    let finite = value.total.is_finite() && grads.values().all(|g| g.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::Diverged {
            step,
            loss: value.total,
        });
    }
    let lr = adam_step(adam, params, &grads)?;
    if let Some(ema) = ema {
        ema_update(ema, params)?;
    }
    Ok(StepMetrics {
        step,
        loss: value.total,
        loss_attract: value.attract,
        loss_repulse: value.repulse,
        lr,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

pub const METRICS_HEADER: &str = "step,loss,loss_attract,loss_repulse,lr,wall_ms";

/// Metrics rows as CSV, header included.
pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.step, r.loss, r.loss_attract, r.loss_repulse, r.lr, r.wall_ms
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(w: f64) -> GeneratorParams {
        let mut p = GeneratorParams::new();
        p.insert("w", Tensor::new(vec![1], vec![w]).unwrap());
        p
    }

    fn grads(g: f64) -> ParamGrads {
        [("w".to_string(), vec![g])].into_iter().collect()
    }

    #[test]
    fn first_step_on_square_moves_by_lr() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(AdamConfig::default().with_lr(0.1).with_warmup(0), &p).unwrap();
        // f(w) = w², f'(1) = 2; bias-corrected m̂ = 2, v̂ = 4.
        adam_step(&mut adam, &mut p, &grads(2.0)).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("w").unwrap().values()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.9).abs() < 1e-8);
    }

    #[test]
    fn warmup_schedule() {
        let cfg = AdamConfig::default();
        assert!((cfg.lr_at(3000) - 1.5e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(6000), 3e-4);
        assert_eq!(cfg.lr_at(10_000), 3e-4);
        assert_eq!(AdamConfig::toy().lr_at(1), 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.7);
        let mut adam = AdamState::new(AdamConfig::toy(), &p).unwrap();
        adam_step(&mut adam, &mut p, &grads(1.0)).unwrap();
        let v1 = adam.second_moment("w").unwrap()[0];
        let mut q = single(0.7);
        let mut adam0 = AdamState::new(AdamConfig::toy(), &q).unwrap();
        adam_step(&mut adam0, &mut q, &grads(0.0)).unwrap();
        assert_eq!(q.get("w").unwrap().values()[0], 0.7);
        adam_step(&mut adam, &mut p, &grads(0.0)).unwrap();
        assert_eq!(adam.second_moment("w").unwrap()[0], 0.999 * v1);
    }

    #[test]
    fn missing_gradient_is_invalid_state() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(AdamConfig::toy(), &p).unwrap();
        let err = adam_step(&mut adam, &mut p, &ParamGrads::new()).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn ema_edge_decays() {
        let p = single(3.0);
        let mut e = EmaState::new(0.0, &single(1.0)).unwrap();
        ema_update(&mut e, &p).unwrap();
        assert_eq!(e.params().get("w").unwrap().values()[0], 3.0);
        let mut e = EmaState::new(1.0, &single(1.0)).unwrap();
        ema_update(&mut e, &p).unwrap();
        assert_eq!(e.params().get("w").unwrap().values()[0], 1.0);
        let mut e = EmaState::new(0.9, &single(1.0)).unwrap();
        for _ in 0..20 {
            ema_update(&mut e, &p).unwrap();
        }
        let gap = 3.0 - e.params().get("w").unwrap().values()[0];
        assert!((gap - 2.0 * 0.9f64.powi(20)).abs() < 1e-12);
        let mut other = GeneratorParams::new();
        other.insert("w", Tensor::zeros(vec![2]));
        assert!(ema_update(&mut e, &other).is_err());
    }

    #[test]
    fn non_finite_loss_diverges_without_update() {
        let mut p = single(1.0);
        let mut adam = AdamState::new(AdamConfig::toy(), &p).unwrap();
        let err = train_step(&mut p, &mut adam, None, |_| {
            Ok(LossEval {
                value: GedLossValue {
                    total: f64::NAN,
                    attract: f64::NAN,
                    repulse: 0.0,
                },
                grads: grads(1.0),
            })
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }));
        assert_eq!(p.get("w").unwrap().values()[0], 1.0);
    }

    #[test]
    fn metrics_csv_has_header() {
        let row = StepMetrics {
            step: 1,
            loss: 0.5,
            loss_attract: 1.0,
            loss_repulse: 0.5,
            lr: 1e-3,
            wall_ms: 2.0,
        };
        let csv = metrics_csv(&[row]);
        assert_eq!(csv, "step,loss,loss_attract,loss_repulse,lr,wall_ms\n1,0.5,1,0.5,0.001,2.000\n");
    }
}
