//! Central-difference gradient oracle.
//!
//! Independent of the backward pass by construction: it only ever evaluates
//! forward code, once per perturbed coordinate, and is meant to be run in
//! f64 mode where the O(eps^2) truncation error leaves plenty of headroom
//! against the 1e-4 relative tolerance the gradient suites use.

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Gradient of a scalar-valued function by central differences:
/// g_i = (f(x + eps * e_i) - f(x - eps * e_i)) / (2 * eps).
pub fn finite_diff_grad<E, F>(f: F, x: &Tensor<E>, eps: f64) -> Result<Vec<E>>
where
    E: Element,
    F: Fn(&Tensor<E>) -> Result<Tensor<E>>,
{
    let eps_e = E::from_f64(eps);
    let two_eps = E::from_f64(2.0 * eps);
    let base = x.data().to_vec();
    let mut grad = vec![E::zero(); base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = plus[i] + eps_e;
        let xp = Tensor::from_vec(plus, x.shape())?;
        let fp = f(&xp)?.item()?;

        let mut minus = base.clone();
        minus[i] = minus[i] - eps_e;
        let xm = Tensor::from_vec(minus, x.shape())?;
        let fm = f(&xm)?.item()?;

        grad[i] = (fp - fm) / two_eps;
    }
    Ok(grad)
}

/// Relative error with a small absolute floor so that near-zero gradients do
/// not inflate the ratio with finite-difference noise.
pub fn rel_error<E: Element>(a: E, b: E) -> f64 {
    let a = a.to_f64();
    let b = b.to_f64();
    let denom = a.abs().max(b.abs()).max(1e-3);
    (a - b).abs() / denom
}

/// Maximum elementwise relative error between two gradients.
pub fn max_rel_error<E: Element>(analytic: &[E], numeric: &[E]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_has_gradient_two_x() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let g = finite_diff_grad(|t| t.mul(t)?.sum_all(), &x, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::from_vec(vec![0.3, -0.7, 1.1], &[3]).unwrap();
        let g = finite_diff_grad(|_| Ok(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn agrees_with_backward_on_two_layer_conv_net() {
        use crate::tensor::ops::conv2d;
        let mut rng = crate::rng::Rng::new(11);
        let x = Tensor::<f64>::param(
            (0..2 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            &[1, 2, 3, 3],
        )
        .unwrap();
        let w1: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let w2: Vec<f64> = (0..(2 * 3)).map(|_| rng.uniform(-0.5, 0.5)).collect();

        let run = |inp: &Tensor<f64>| -> Result<Tensor<f64>> {
            let w1 = Tensor::from_vec(w1.clone(), &[3, 2, 3, 3])?;
            let w2 = Tensor::from_vec(w2.clone(), &[2, 3, 1, 1])?;
            let h = conv2d(inp, &w1, None, 1, 1)?.gelu()?;
            conv2d(&h, &w2, None, 1, 0)?.mean_all()
        };

        let loss = run(&x).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let numeric = finite_diff_grad(run, &x, 1e-5).unwrap();
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }
}
