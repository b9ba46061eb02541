use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId, ParamSet};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Update rule and hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// SGD with heavy-ball momentum and coupled L2 weight decay.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay.
    Adamw {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::SgdMomentum {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        Self::Adamw {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::SgdMomentum { lr, .. } | Self::Adamw { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            Self::Adamw {
                lr,
                beta1,
                beta2,
                epsilon,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
struct Slots<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Optimizer with per-parameter state buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    state: BTreeMap<ParamId, Slots<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            state: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Drops all state buffers and the step counter.
    pub fn reset(&mut self) {
        self.state.clear();
        self.steps = 0;
    }

    /// Applies one update to every parameter that has a gradient; others are untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        for (&id, g) in grads {
            if params.get(id).shape() != g.shape() {
                return Err(shape_err(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        self.steps += 1;
        let t = self.steps;
        for (&id, g) in grads {
            let p = params.get_mut(id).data_mut();
            let slots = self.state.entry(id).or_insert_with(|| Slots {
                first: vec![T::zero(); p.len()],
                second: Vec::new(),
            });
            match self.kind {
                OptimizerKind::SgdMomentum {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
                    for ((pv, &gv), buf) in p.iter_mut().zip(g.data()).zip(&mut slots.first) {
                        let mut d = gv;
                        if wd != T::zero() {
                            d += wd * *pv;
                        }
                        if mu != T::zero() {
                            *buf = mu * *buf + d;
                            d = *buf;
                        }
                        *pv -= lr * d;
                    }
                }
                OptimizerKind::Adamw {
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                } => {
                    if slots.second.is_empty() {
                        slots.second = vec![T::zero(); p.len()];
                    }
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let (lr_t, eps, decay) = (T::of(lr), T::of(epsilon), T::of(lr * weight_decay));
                    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
                    for (i, (pv, &gv)) in p.iter_mut().zip(g.data()).enumerate() {
                        if decay != T::zero() {
                            *pv -= decay * *pv;
                        }
                        let m = &mut slots.first[i];
                        *m = b1 * *m + (T::one() - b1) * gv;
                        let v = &mut slots.second[i];
                        *v = b2 * *v + (T::one() - b2) * gv * gv;
                        let mhat = slots.first[i] / bc1;
                        let vhat = slots.second[i] / bc2;
                        *pv -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn single(v: f64) -> (ParamSet<f64>, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.insert("p", Tensor::scalar(v)).unwrap();
        (ps, id)
    }

    fn grad(id: ParamId, g: f64) -> Gradients<f64> {
        let mut m = Gradients::new();
        m.insert(id, Tensor::scalar(g));
        m
    }

    #[test]
    fn sgd_plain_step() {
        let (mut ps, id) = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0)).unwrap();
        opt.step(&mut ps, &grad(id, 2.0)).unwrap();
        assert!((ps.get(id).item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op_for_all_kinds() {
        for kind in [OptimizerKind::sgd(0.1, 0.9), OptimizerKind::adamw(0.01)] {
            let (mut ps, id) = single(1.25);
            let mut opt = Optimizer::new(kind).unwrap();
            for _ in 0..5 {
                opt.step(&mut ps, &grad(id, 0.0)).unwrap();
            }
            assert_eq!(ps.get(id).item(), 1.25);
        }
    }

    #[test]
    fn momentum_zero_equals_gradient_descent() {
        let (mut ps, id) = single(3.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.05, 0.0)).unwrap();
        let mut manual = 3.0f64;
        for k in 0..10 {
            let g = 0.3 * k as f64 - 1.0;
            opt.step(&mut ps, &grad(id, g)).unwrap();
            manual -= 0.05 * g;
        }
        assert_eq!(ps.get(id).item(), manual);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_gradient_sign() {
        // At step 1 the bias-corrected update is lr·g/(|g| + eps).
        for g in [2.0, -0.5] {
            let (mut ps, id) = single(0.0);
            let mut opt = Optimizer::new(OptimizerKind::adamw(0.01)).unwrap();
            opt.step(&mut ps, &grad(id, g)).unwrap();
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((ps.get(id).item() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(Optimizer::<f64>::new(OptimizerKind::sgd(-0.1, 0.0)).is_err());
        assert!(Optimizer::<f64>::new(OptimizerKind::sgd(0.1, -0.5)).is_err());
        let (mut ps, id) = single(1.0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0)).unwrap();
        let mut bad = Gradients::new();
        bad.insert(id, Tensor::zeros(&[2]));
        assert!(opt.step(&mut ps, &bad).is_err());
    }
}
