//! Stochastic gradient descent with classical momentum and coupled weight
//! decay:
//!
//! ```text
//! v ← momentum·v + (grad + weight_decay·param)
//! param ← param − lr·v
//! ```

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::models::Params;
use crate::scalar::Scalar;

/// One update on a single tensor; velocity starts at zero.
pub fn sgd_update_tensor<T: Scalar>(
    param: &mut ArrayViewMutD<'_, T>,
    grad: &ArrayViewD<'_, T>,
    velocity: &mut ArrayD<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Domain(format!(
            "sgd shapes disagree: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    ndarray::Zip::from(param)
        .and(grad)
        .and(velocity)
        .for_each(|p, &g, v| {
            *v = momentum * *v + (g + weight_decay * *p);
            *p = *p - lr * *v;
        });
    Ok(())
}

/// Momentum SGD over every trainable tensor of one network. Velocity buffers
/// are allocated on the first step and keyed by visitation order.
pub struct Sgd<T: Scalar> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<ArrayD<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut impl Params<T>, lr: T) -> Result<()> {
        if self.velocity.is_empty() {
            net.visit("", &mut |_, kind, v| {
                if kind == crate::models::ParamKind::Trainable {
                    self.velocity.push(ArrayD::zeros(v.raw_dim()));
                }
            });
        }
        let velocity = &mut self.velocity;
        let (momentum, weight_decay) = (self.momentum, self.weight_decay);
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        net.visit_step("", &mut |name, mut p, g| {
            if err.is_some() {
                return;
            }
            if idx >= velocity.len() {
                err = Some(Error::Domain(format!(
                    "optimizer state has {} tensors but network exposes more (at {name})",
                    velocity.len()
                )));
                return;
            }
            if let Err(e) = sgd_update_tensor(&mut p, &g, &mut velocity[idx], lr, momentum, weight_decay) {
                err = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != velocity.len() {
            return Err(Error::Domain(format!(
                "optimizer state has {} tensors but network exposed {idx}",
                velocity.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn step_scalar(param: f64, grad: f64, lr: f64, momentum: f64, wd: f64, vel: f64) -> (f64, f64) {
        let mut p = arr1(&[param]).into_dyn();
        let g = arr1(&[grad]).into_dyn();
        let mut v = arr1(&[vel]).into_dyn();
        sgd_update_tensor(
            &mut p.view_mut(),
            &g.view(),
            &mut v,
            lr,
            momentum,
            wd,
        )
        .unwrap();
        (p[[0]], v[[0]])
    }

    #[test]
    fn plain_gradient_step() {
        let (p, _) = step_scalar(1.0, 0.5, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let (p, v) = step_scalar(1.25, 0.0, 0.1, 0.9, 0.0, 0.0);
        assert_eq!(p, 1.25);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weight_decay_hand_value() {
        let (p, _) = step_scalar(1.0, 0.0, 0.1, 0.0, 0.0005, 0.0);
        assert!((p - 0.99995).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let (p1, v1) = step_scalar(1.0, 1.0, 0.1, 0.9, 0.0, 0.0);
        assert!((v1 - 1.0).abs() < 1e-12);
        assert!((p1 - 0.9).abs() < 1e-12);
        let (p2, v2) = step_scalar(p1, 1.0, 0.1, 0.9, 0.0, v1);
        assert!((v2 - 1.9).abs() < 1e-12);
        assert!((p2 - (p1 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let mut p = arr1(&[1.0, 2.0]).into_dyn();
        let g = arr1(&[0.1]).into_dyn();
        let mut v = arr1(&[0.0, 0.0]).into_dyn();
        assert!(matches!(
            sgd_update_tensor(&mut p.view_mut(), &g.view(), &mut v, 0.1, 0.9, 0.0),
            Err(Error::Domain(_))
        ));
    }
}
