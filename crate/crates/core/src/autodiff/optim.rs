//! First-order optimizers behind a common trait, selectable by name.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update in place. Parameters whose gradient is `None` are
    /// left untouched and their moments do not advance.
    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError>;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64);

    fn step_count(&self) -> u64;
}

/// Shared moment bookkeeping for Adam-family methods.
#[derive(Clone, Debug)]
struct Moments {
    cfg: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Moments {
    fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    fn prepare(&mut self, params: &ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        if grads.len() != params.len() {
            return Err(AutodiffError::StateMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(AutodiffError::StateMismatch(format!(
                "state for {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.len() != params.get(id).len() {
                    return Err(AutodiffError::StateMismatch(format!(
                        "gradient for {} has {} values, parameter has {}",
                        params.name(id),
                        g.len(),
                        params.get(id).len()
                    )));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(AutodiffError::NonFiniteGradient {
                        index: id.index(),
                        name: params.name(id).to_string(),
                    });
                }
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Updates moments for one parameter and calls `apply(m, v, p)` per scalar.
    fn update(&mut self, params: &mut ParamStore, grads: &Gradients, apply: impl Fn(f64, f64, &mut f64)) {
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for ((p, &gi), (mi, vi)) in
                params.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                apply(*mi, *vi, p);
            }
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    state: Moments,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { state: Moments::new(cfg) }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        self.state.prepare(params, grads)?;
        let OptimizerConfig { lr, beta1, beta2, eps } = self.state.cfg;
        let t = self.state.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        self.state.update(params, grads, |m, v, p| {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        });
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.state.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.state.cfg.lr = lr;
    }

    fn step_count(&self) -> u64 {
        self.state.t
    }
}

/// Adam with variance rectification: while the approximated SMA length
/// `ρ_t ≤ 4` the adaptive term is undefined and the update falls back to
/// bias-corrected momentum.
#[derive(Clone, Debug)]
pub struct RAdam {
    state: Moments,
}

impl RAdam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { state: Moments::new(cfg) }
    }

    /// `ρ_t = ρ_∞ − 2 t β₂ᵗ / (1 − β₂ᵗ)`.
    pub fn rho(beta2: f64, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let bt = beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * bt / (1.0 - bt)
    }

    pub fn is_rectified(beta2: f64, t: u64) -> bool {
        Self::rho(beta2, t) > 4.0
    }
}

impl Optimizer for RAdam {
    fn name(&self) -> &'static str {
        "radam"
    }

    fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        self.state.prepare(params, grads)?;
        let OptimizerConfig { lr, beta1, beta2, eps } = self.state.cfg;
        let t = self.state.t;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho = Self::rho(beta2, t);
        if rho > 4.0 {
            let r = (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
            self.state.update(params, grads, |m, v, p| {
                *p -= lr * r * (m / bc1) * bc2.sqrt() / (v.sqrt() + eps);
            });
        } else {
            self.state.update(params, grads, |m, _, p| {
                *p -= lr * m / bc1;
            });
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.state.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.state.cfg.lr = lr;
    }

    fn step_count(&self) -> u64 {
        self.state.t
    }
}

/// Names accepted by [`build_optimizer`].
pub const OPTIMIZER_NAMES: &[&str] = &["adam", "radam"];

pub fn build_optimizer(name: &str, cfg: OptimizerConfig) -> Option<Box<dyn Optimizer>> {
    match name {
        "adam" => Some(Box::new(Adam::new(cfg))),
        "radam" => Some(Box::new(RAdam::new(cfg))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamId, Tensor};

    fn single(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![w]));
        (s, id)
    }

    fn grad_of_square(s: &ParamStore, id: ParamId) -> Gradients {
        let mut g = Gradients::new(s.len());
        g.set(id, vec![2.0 * s.get(id).data()[0]]);
        g
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(OptimizerConfig::with_lr(0.1));
        let g = grad_of_square(&s, id);
        opt.step(&mut s, &g).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((s.get(id).data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for name in OPTIMIZER_NAMES {
            let (mut s, id) = single(0.5);
            let mut opt = build_optimizer(name, OptimizerConfig::with_lr(0.1)).unwrap();
            let mut g = Gradients::new(1);
            g.set(id, vec![0.0]);
            for _ in 0..6 {
                opt.step(&mut s, &g).unwrap();
            }
            assert_eq!(s.get(id).data()[0], 0.5, "{name}");
        }
    }

    #[test]
    fn radam_falls_back_for_first_four_steps() {
        for t in 1..=4 {
            assert!(!RAdam::is_rectified(0.999, t), "step {t}");
        }
        assert!(RAdam::is_rectified(0.999, 5));
        // Fallback step is plain bias-corrected momentum: first step moves by lr·g.
        let (mut s, id) = single(1.0);
        let mut opt = RAdam::new(OptimizerConfig::with_lr(0.1));
        let g = grad_of_square(&s, id);
        opt.step(&mut s, &g).unwrap();
        assert!((s.get(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_reports_index() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::vector(vec![1.0]));
        let b = s.add("b", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Gradients::new(2);
        g.set(b, vec![0.0, f64::NAN]);
        let err = RAdam::new(OptimizerConfig::with_lr(0.1)).step(&mut s, &g).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient { index: 1, name: "b".into() });
        assert_eq!(s.get(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn step_count_increments_by_one() {
        let (mut s, id) = single(1.0);
        let mut opt = Adam::new(OptimizerConfig::with_lr(0.01));
        for expected in 1..=5 {
            let g = grad_of_square(&s, id);
            opt.step(&mut s, &g).unwrap();
            assert_eq!(opt.step_count(), expected);
        }
    }

    #[test]
    fn unknown_optimizer_name() {
        assert!(build_optimizer("sgd", OptimizerConfig::with_lr(0.1)).is_none());
    }
}
