use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamSlot;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Self {
        OptimizerState {
            config,
            velocity: BTreeMap::new(),
        }
    }
}

/// `v = m*v + g + wd*p; p = p - lr*v` on one tensor.
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    grad.expect_shape(param.shape())?;
    velocity.expect_shape(param.shape())?;
    let (lr, m, wd) = (
        T::from_f64(lr),
        T::from_f64(momentum),
        T::from_f64(weight_decay),
    );
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// One update over `slots` at learning rate `lr`. Parameters for which
/// `frozen` holds keep their values and velocities. Any non-finite
/// gradient aborts before anything is modified.
pub fn sgd_step<T: Scalar>(
    slots: Vec<ParamSlot<'_, T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    frozen: impl Fn(&ParamSlot<'_, T>) -> bool,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    if let Some(bad) = slots.iter().find(|s| !s.grad.all_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient in {}",
            bad.name
        )));
    }
    let cfg = state.config;
    for slot in slots {
        if frozen(&slot) {
            continue;
        }
        let v = state
            .velocity
            .entry(slot.name.clone())
            .or_insert_with(|| Tensor::zeros(slot.value.shape().to_vec()));
        let wd = if slot.kind.decays() {
            cfg.weight_decay
        } else {
            0.0
        };
        sgd_update(slot.value, slot.grad, v, lr, cfg.momentum, wd)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ParamKind;

    fn slot<'a>(
        name: &str,
        value: &'a mut Tensor<f64>,
        grad: &'a mut Tensor<f64>,
        kind: ParamKind,
    ) -> ParamSlot<'a, f64> {
        ParamSlot {
            name: name.into(),
            value,
            grad,
            kind,
            in_4d_block: false,
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::full(vec![3], 1.5);
        let mut g = Tensor::zeros(vec![3]);
        let mut st = OptimizerState::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        sgd_step(
            vec![slot("w", &mut p, &mut g, ParamKind::Weight)],
            &mut st,
            0.1,
            |_| false,
        )
        .unwrap();
        assert_eq!(p.data(), &[1.5; 3]);
    }

    #[test]
    fn plain_step() {
        let mut p = Tensor::scalar(1.0);
        let mut g = Tensor::scalar(2.0);
        let mut st = OptimizerState::new(SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        sgd_step(
            vec![slot("w", &mut p, &mut g, ParamKind::Weight)],
            &mut st,
            0.1,
            |_| false,
        )
        .unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_and_decay_rules() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.5,
            weight_decay: 0.1,
        };
        let mut st = OptimizerState::new(cfg);
        let (mut w, mut gw) = (Tensor::scalar(2.0), Tensor::scalar(1.0));
        let (mut b, mut gb) = (Tensor::scalar(2.0), Tensor::scalar(1.0));
        for _ in 0..2 {
            let slots = vec![
                slot("w", &mut w, &mut gw, ParamKind::Weight),
                slot("b", &mut b, &mut gb, ParamKind::BnShift),
            ];
            sgd_step(slots, &mut st, cfg.lr, |_| false).unwrap();
        }
        // weight: v1 = 1.2, p1 = 1.4; v2 = 0.6 + 1 + 0.14 = 1.74, p2 = 0.53
        assert!((w.data()[0] - 0.53).abs() < 1e-12);
        // no decay: v1 = 1, p1 = 1.5; v2 = 1.5, p2 = 0.75
        assert!((b.data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_nan() {
        let mut st = OptimizerState::new(SgdConfig::default());
        let (mut w, mut g) = (Tensor::scalar(1.0), Tensor::scalar(5.0));
        sgd_step(
            vec![slot("w", &mut w, &mut g, ParamKind::Weight)],
            &mut st,
            0.1,
            |_| true,
        )
        .unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert!(st.velocity.is_empty());
        let mut bad = Tensor::scalar(f64::NAN);
        let err = sgd_step(
            vec![slot(
                "res3.fd1.conv4d.weight",
                &mut w,
                &mut bad,
                ParamKind::Weight,
            )],
            &mut st,
            0.1,
            |_| false,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Training(m) if m.contains("res3.fd1")));
        assert_eq!(err.exit_code(), 5);
    }
}
