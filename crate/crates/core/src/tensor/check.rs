//! Finite-difference gradient verification.

use super::{Result, Tensor};

fn rel_err(auto: f64, fd: f64) -> f64 {
    (auto - fd).abs() / auto.abs().max(fd.abs()).max(1e-8)
}

/// Max relative error between the autodiff gradient of `f` at `x` and a
/// central-difference estimate with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (r, c) = x.shape();
    let input = Tensor::param(r, c, x.to_vec())?;
    f(&input)?.backward()?;
    let auto = input.grad().unwrap_or_else(|| vec![0.0; r * c]);
    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::constant(r, c, plus)?)?.item();
        let fm = f(&Tensor::constant(r, c, minus)?)?.item();
        worst = worst.max(rel_err(auto[i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}

/// Same check over every element of several trainable leaves; `f` rebuilds
/// the scalar loss from the current parameter values on each call.
pub fn grad_check_params<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i))).collect();
    grad_check_coords(f, params, &coords, eps)
}

/// [`grad_check_params`] restricted to `(parameter, element)` coordinates.
pub fn grad_check_coords<F>(f: F, params: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    params.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let autos: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()])).collect();
    params.iter().for_each(Tensor::zero_grad);
    let mut worst: f64 = 0.0;
    for &(k, i) in coords {
        let p = &params[k];
        let orig = p.data()[i];
        p.data_mut()[i] = orig + eps;
        let fp = f()?.item();
        p.data_mut()[i] = orig - eps;
        let fm = f()?.item();
        p.data_mut()[i] = orig;
        worst = worst.max(rel_err(autos[k][i], (fp - fm) / (2.0 * eps)));
    }
    Ok(worst)
}
