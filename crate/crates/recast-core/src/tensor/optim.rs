//! Named parameter storage and the two update rules used here:
//! SGD with Nesterov momentum (teacher training, baselines) and Adam
//! (recasting and fine-tuning).

use super::{Tensor, TensorError};

/// Index into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

#[derive(Debug, Clone, Default)]
pub enum OptState {
    #[default]
    Empty,
    Sgd {
        velocity: Tensor<f32>,
    },
    Adam {
        m: Tensor<f32>,
        v: Tensor<f32>,
        step: u64,
    },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Option<Tensor<f32>>,
    pub state: OptState,
}

/// Arena of named parameters with deterministic iteration order
/// (insertion order of construction).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.items.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.items.push(Param {
            name,
            value,
            grad: None,
            state: OptState::Empty,
        });
        ParamId(self.items.len() as u32 - 1)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.items[id.0 as usize].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.items[id.0 as usize].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.items[id.0 as usize]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.items[id.0 as usize]
    }

    /// Two distinct entries mutably at once (running mean/var pairs).
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<f32>, &mut Tensor<f32>) {
        let (ai, bi) = (a.0 as usize, b.0 as usize);
        assert_ne!(ai, bi);
        if ai < bi {
            let (lo, hi) = self.items.split_at_mut(bi);
            (&mut lo[ai].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.items.split_at_mut(ai);
            (&mut hi[0].value, &mut lo[bi].value)
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<f32>) {
        let p = &mut self.items[id.0 as usize];
        match &mut p.grad {
            Some(existing) => {
                for (dst, &src) in existing.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
            None => p.grad = Some(g.clone()),
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = None;
        }
    }

    /// Drop optimizer state (used when a recasting step starts a fresh
    /// optimization problem over re-initialized blocks).
    pub fn reset_opt_state(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.items[id.0 as usize].state = OptState::Empty;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    SgdNesterov,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// (epoch, divisor) milestones; at each milestone epoch the learning
    /// rate is divided by the divisor.
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn sgd_nesterov(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptKind::SgdNesterov,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            schedule: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptKind::Adam,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            schedule: Vec::new(),
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<(usize, f64)>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.lr > 0.0) {
            return Err(TensorError::BadOptimizerConfig(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::BadOptimizerConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(TensorError::BadOptimizerConfig(format!(
                    "{name} must be in (0,1), got {b}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate at `epoch` after applying all milestones that have
    /// passed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr;
        for &(at, div) in &self.schedule {
            if epoch >= at {
                lr /= div;
            }
        }
        lr
    }
}

/// Apply one update to the listed parameters; `epoch` selects the
/// scheduled learning rate.
pub fn optimizer_step(
    params: &mut ParamSet,
    ids: &[ParamId],
    config: &OptimizerConfig,
    epoch: usize,
) -> Result<(), TensorError> {
    config.validate()?;
    let lr = config.lr_at(epoch) as f32;
    let wd = config.weight_decay as f32;
    for &id in ids {
        let p = params.param_mut(id);
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| TensorError::MissingGradient(p.name.clone()))?;
        match config.kind {
            OptKind::SgdNesterov => {
                let mu = config.momentum as f32;
                if !matches!(p.state, OptState::Sgd { .. }) {
                    p.state = OptState::Sgd {
                        velocity: Tensor::zeros(p.value.shape()),
                    };
                }
                let OptState::Sgd { velocity } = &mut p.state else {
                    unreachable!()
                };
                for i in 0..p.value.numel() {
                    let g = grad.data()[i] + wd * p.value.data()[i];
                    let v = &mut velocity.data_mut()[i];
                    *v = mu * *v + g;
                    // Nesterov lookahead: step along g + mu*v
                    p.value.data_mut()[i] -= lr * (g + mu * *v);
                }
            }
            OptKind::Adam => {
                let (b1, b2) = (config.beta1 as f32, config.beta2 as f32);
                let eps = config.epsilon as f32;
                if !matches!(p.state, OptState::Adam { .. }) {
                    p.state = OptState::Adam {
                        m: Tensor::zeros(p.value.shape()),
                        v: Tensor::zeros(p.value.shape()),
                        step: 0,
                    };
                }
                let OptState::Adam { m, v, step } = &mut p.state else {
                    unreachable!()
                };
                *step += 1;
                let t = *step as f32;
                let bc1 = 1.0 - b1.powf(t);
                let bc2 = 1.0 - b2.powf(t);
                for i in 0..p.value.numel() {
                    let g = grad.data()[i] + wd * p.value.data()[i];
                    let mi = &mut m.data_mut()[i];
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    let vi = &mut v.data_mut()[i];
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    p.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> (ParamSet, ParamId) {
        let mut set = ParamSet::new();
        let id = set.push("w", Tensor::scalar(v));
        (set, id)
    }

    #[test]
    fn plain_sgd_step() {
        let (mut set, id) = one_param(1.0);
        set.accumulate_grad(id, &Tensor::scalar(1.0));
        let cfg = OptimizerConfig::sgd_nesterov(0.1, 0.0, 0.0);
        optimizer_step(&mut set, &[id], &cfg, 0).unwrap();
        assert!((set.value(id).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // At step 1 with default betas the bias-corrected update is
        // lr * g/|g| up to epsilon, independent of |g|.
        for g in [0.001f32, 0.5, 40.0] {
            let (mut set, id) = one_param(2.0);
            set.accumulate_grad(id, &Tensor::scalar(g));
            let cfg = OptimizerConfig::adam(0.01);
            optimizer_step(&mut set, &[id], &cfg, 0).unwrap();
            let delta = (2.0 - set.value(id).item()).abs();
            assert!(
                (delta - 0.01).abs() < 1e-4,
                "first Adam step {delta} should be ~lr for g={g}"
            );
        }
    }

    #[test]
    fn schedule_divides_lr() {
        let cfg = OptimizerConfig::adam(0.0005).with_schedule(vec![(5, 10.0)]);
        assert!((cfg.lr_at(0) - 0.0005).abs() < 1e-12);
        assert!((cfg.lr_at(4) - 0.0005).abs() < 1e-12);
        assert!((cfg.lr_at(5) - 0.00005).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 0.00005).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut set, id) = one_param(1.0);
        let cfg = OptimizerConfig::adam(0.01);
        let err = optimizer_step(&mut set, &[id], &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn config_validation() {
        let mut cfg = OptimizerConfig::adam(0.01);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::sgd_nesterov(0.1, 1.0, 0.0);
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.9;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn nesterov_momentum_accumulates() {
        // Two steps with constant gradient 1, mu=0.5, lr=1:
        // step1: v=1, w -= (1 + 0.5*1) = 1.5 -> w = -1.5
        // step2: v=1.5, w -= (1 + 0.75) = 1.75 -> w = -3.25
        let (mut set, id) = one_param(0.0);
        let cfg = OptimizerConfig::sgd_nesterov(1.0, 0.5, 0.0);
        set.accumulate_grad(id, &Tensor::scalar(1.0));
        optimizer_step(&mut set, &[id], &cfg, 0).unwrap();
        assert!((set.value(id).item() + 1.5).abs() < 1e-6);
        set.zero_grads();
        set.accumulate_grad(id, &Tensor::scalar(1.0));
        optimizer_step(&mut set, &[id], &cfg, 0).unwrap();
        assert!((set.value(id).item() + 3.25).abs() < 1e-6);
    }
}
