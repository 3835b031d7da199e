//! Plain SGD with decoupled-from-nothing weight decay: the decay term is
//! added to the gradient before the step, and gradients are cleared after.

use crate::error::{GdError, Result};
use crate::tensor::Tensor;

/// p <- p - lr * (grad + weight_decay * p) for every tensor, then clear
/// the gradients. A parameter without an accumulated gradient is a
/// contract error: the caller asked to step something it never reached.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(GdError::contract(format!("sgd lr must be > 0, got {lr}")));
    }
    if weight_decay < 0.0 {
        return Err(GdError::contract(format!(
            "sgd weight_decay must be >= 0, got {weight_decay}"
        )));
    }
    for p in params {
        let grad = p
            .take_grad()
            .ok_or_else(|| GdError::contract("sgd_step on a parameter with no gradient"))?;
        for (v, g) in p.values_mut().iter_mut().zip(&grad) {
            *v -= lr * (g + weight_decay * *v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_step() {
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[1.0]);
        sgd_step([&mut p], 0.1, 0.0).unwrap();
        assert!((p.values()[0] - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none(), "grad cleared after step");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::scalar(3.5);
        p.accumulate_grad(&[0.0]);
        sgd_step([&mut p], 0.1, 0.0).unwrap();
        assert_eq!(p.values()[0], 3.5);
    }

    #[test]
    fn decay_only_arithmetic() {
        // p=2, grad=0, lr=0.1, wd=0.5 -> p - 0.1*0.5*2 = 1.9
        let mut p = Tensor::scalar(2.0);
        p.accumulate_grad(&[0.0]);
        sgd_step([&mut p], 0.1, 0.5).unwrap();
        assert!((p.values()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(1.0);
        assert!(sgd_step([&mut p], 0.1, 0.0).is_err());
    }

    #[test]
    fn invalid_hyperparams_rejected() {
        let mut p = Tensor::scalar(1.0);
        p.accumulate_grad(&[1.0]);
        assert!(sgd_step([&mut p], 0.0, 0.0).is_err());
        p.accumulate_grad(&[1.0]);
        assert!(sgd_step([&mut p], 0.1, -1.0).is_err());
    }
}
