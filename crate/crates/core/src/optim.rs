//! SGD with momentum, Adam, and the step learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::model::{Gradients, NetworkModel, ParamKind};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::adam()),
            "sgd" => Ok(OptimizerKind::sgd(SGD_MOMENTUM)),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Per-parameter moment buffers plus hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; every slot is then updated once with [`update`](Self::update).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter slot `slot` in place. `decay` applies weight decay.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T], decay: bool) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(format!(
                "parameter slot {slot}: {} values, {} gradients",
                param.len(),
                grad.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::invalid("update called before begin_step"));
        }
        while self.first.len() <= slot {
            self.first.push(Vec::new());
            self.second.push(Vec::new());
        }
        if self.first[slot].len() != param.len() {
            if !self.first[slot].is_empty() {
                return Err(Error::shape(format!("parameter slot {slot} changed size")));
            }
            self.first[slot] = vec![T::zero(); param.len()];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second[slot] = vec![T::zero(); param.len()];
            }
        }
        let lr = T::lit(self.lr);
        let wd = T::lit(if decay { self.weight_decay } else { 0.0 });
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::lit(momentum);
                for ((p, &g), v) in param.iter_mut().zip(grad).zip(self.first[slot].iter_mut()) {
                    *v = mu * *v + g + wd * *p;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = T::lit(1.0 / (1.0 - beta1.powi(t)));
                let c2 = T::lit(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                for (i, p) in param.iter_mut().enumerate() {
                    let g = grad[i] + wd * *p;
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    *p -= lr * (m[i] * c1) / ((v[i] * c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// One step over every model parameter. Thresholds skip weight decay and
    /// are floored afterwards.
    pub fn step_model(&mut self, model: &mut NetworkModel<T>, grads: &Gradients<T>) -> Result<()> {
        self.begin_step();
        let mut params = model.params_mut();
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (slot, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
            let decay = p.kind != ParamKind::Threshold;
            self.update(slot, p.data, g.data(), decay)?;
        }
        model.clamp_thresholds();
        Ok(())
    }
}

/// `base_lr` divided by 5 at `⌊0.6T⌋`, `⌊0.8T⌋` and `⌊0.9T⌋` (each inclusive);
/// a boundary that falls on epoch 0 is skipped.
pub fn lr_at_epoch(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    let drops = [6, 8, 9]
        .iter()
        .map(|&tenths| total_epochs * tenths / 10)
        .filter(|&b| b > 0 && epoch >= b)
        .count();
    base_lr / 5f64.powi(drops as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(opt: &mut OptimizerState<f64>, p: &mut [f64], g: &[f64]) {
        opt.begin_step();
        opt.update(0, p, g, true).unwrap();
    }

    #[test]
    fn sgd_examples() {
        let mut o = OptimizerState::new(OptimizerKind::sgd(0.0), 0.1, 0.0);
        let mut p = [1.0];
        one_step(&mut o, &mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut o = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1, 0.0);
        let mut p = [1.0];
        one_step(&mut o, &mut p, &[1.0]);
        one_step(&mut o, &mut p, &[1.0]);
        assert!((o.first[0][0] - 1.9).abs() < 1e-15);
        assert!((p[0] - (1.0 - 0.1 * (1.0 + 1.9))).abs() < 1e-15);

        let mut p = [0.7, -0.3];
        let mut o = OptimizerState::new(OptimizerKind::sgd(0.9), 0.1, 0.0);
        one_step(&mut o, &mut p, &[0.0, 0.0]);
        assert_eq!(p, [0.7, -0.3]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1.0, 1e-3, -250.0] {
            let mut o = OptimizerState::new(OptimizerKind::adam(), 0.01, 0.0);
            let mut p = [0.5];
            one_step(&mut o, &mut p, &[g]);
            let moved = 0.5 - p[0];
            assert!((moved.abs() - 0.01).abs() < 1e-6 * 0.01 / g.abs().min(1.0));
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut o = OptimizerState::new(OptimizerKind::adam(), 0.01, 0.0);
        let mut p = [0.25, -4.0];
        for _ in 0..100 {
            one_step(&mut o, &mut p, &[0.0, 0.0]);
        }
        assert_eq!(p, [0.25, -4.0]);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut o = OptimizerState::new(OptimizerKind::sgd(0.0), 0.1, 0.5);
        let mut p = [2.0];
        one_step(&mut o, &mut p, &[0.0]);
        assert!((p[0] - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
        let mut q = [2.0];
        o.begin_step();
        o.update(1, &mut q, &[0.0], false).unwrap();
        assert_eq!(q, [2.0]);
    }

    #[test]
    fn mismatched_shapes() {
        let mut o = OptimizerState::<f64>::new(OptimizerKind::adam(), 0.01, 0.0);
        o.begin_step();
        assert!(o.update(0, &mut [1.0, 2.0], &[1.0], true).is_err());
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at_epoch(0.1, 59, 100), 0.1);
        assert!((lr_at_epoch(0.1, 60, 100) - 0.02).abs() < 1e-15);
        assert!((lr_at_epoch(0.1, 80, 100) - 0.004).abs() < 1e-15);
        assert!((lr_at_epoch(0.1, 90, 100) - 0.0008).abs() < 1e-15);
        assert_eq!(lr_at_epoch(0.1, 0, 1), 0.1);
        for t in 1..40 {
            let lrs: Vec<f64> = (0..t).map(|e| lr_at_epoch(1.0, e, t)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            assert!(drops <= 3);
            assert_eq!(lrs[0], 1.0);
        }
    }
}
