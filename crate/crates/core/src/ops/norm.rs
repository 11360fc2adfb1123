//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Learned affine parameters and running statistics of one normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
}

#[derive(Clone, Debug)]
pub struct BatchNormOutput<T: Real> {
    pub output: Tensor<T>,
    /// Updated running statistics; equal to the inputs in eval mode.
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrad<T: Real> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check<T: Real>(input: &Tensor<T>, p: &BatchNormParams<'_, T>, epsilon: f64) -> Result<()> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "batchnorm epsilon must be positive, got {epsilon}"
        )));
    }
    let c = input.shape().c;
    for (name, len) in [
        ("gamma", p.gamma.len()),
        ("beta", p.beta.len()),
        ("running_mean", p.running_mean.len()),
        ("running_var", p.running_var.len()),
    ] {
        if len != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                expected: format!("{c} {name} entries"),
                actual: len.to_string(),
            });
        }
    }
    Ok(())
}

/// Biased per-channel mean and variance over `(n, h, w)`.
fn batch_stats<T: Real>(input: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = input.shape();
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += input.plane(n, c).iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for n in 0..s.n {
        for c in 0..s.c {
            let m = mean[c];
            var[c] += input.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}

pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    p: &BatchNormParams<'_, T>,
    mode: Mode,
    momentum: f64,
    epsilon: f64,
) -> Result<BatchNormOutput<T>> {
    check(input, p, epsilon)?;
    let s = input.shape();
    let eps = T::from_f64_lossy(epsilon);
    let (mean, var, running_mean, running_var) = match mode {
        Mode::Eval => (
            p.running_mean.to_vec(),
            p.running_var.to_vec(),
            p.running_mean.to_vec(),
            p.running_var.to_vec(),
        ),
        Mode::Train => {
            let (mean, var) = batch_stats(input);
            let m = T::from_f64_lossy(momentum);
            let count = s.n * s.plane();
            // running variance tracks the unbiased estimate
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            let rm = p
                .running_mean
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (T::one() - m) * r + m * b)
                .collect();
            let rv = p
                .running_var
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                .collect();
            (mean, var, rm, rv)
        }
    };
    let mut out = input.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % s.c;
        let scale = p.gamma[c] / (var[c] + eps).sqrt();
        let shift = p.beta[c] - mean[c] * scale;
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    Ok(BatchNormOutput {
        output: out,
        running_mean,
        running_var,
    })
}

/// Gradients of `sum(batchnorm(input) * grad_out)`. Train mode differentiates
/// through the batch statistics; eval mode treats the running statistics as constants.
pub fn batchnorm_backward<T: Real>(
    input: &Tensor<T>,
    p: &BatchNormParams<'_, T>,
    mode: Mode,
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrad<T>> {
    check(input, p, epsilon)?;
    input.expect_same_shape("batchnorm_backward", grad_out)?;
    let s = input.shape();
    let eps = T::from_f64_lossy(epsilon);
    let (mean, var) = match mode {
        Mode::Eval => (p.running_mean.to_vec(), p.running_var.to_vec()),
        Mode::Train => batch_stats(input),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let x = input.plane(n, c);
            let g = grad_out.plane(n, c);
            for (&xv, &gv) in x.iter().zip(g) {
                dbeta[c] += gv;
                dgamma[c] += gv * (xv - mean[c]) * inv_std[c];
            }
        }
    }

    let mut grad_in = Tensor::zeros(s);
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let plane = s.plane();
    for (i, chunk) in grad_in.data_mut().chunks_exact_mut(plane).enumerate() {
        let (n, c) = (i / s.c, i % s.c);
        let x = input.plane(n, c);
        let g = grad_out.plane(n, c);
        let k = p.gamma[c] * inv_std[c];
        match mode {
            Mode::Eval => {
                for (d, &gv) in chunk.iter_mut().zip(g) {
                    *d = gv * k;
                }
            }
            Mode::Train => {
                for ((d, &gv), &xv) in chunk.iter_mut().zip(g).zip(x) {
                    let xhat = (xv - mean[c]) * inv_std[c];
                    *d = k / count * (count * gv - dbeta[c] - xhat * dgamma[c]);
                }
            }
        }
    }
    Ok(BatchNormGrad {
        input: grad_in,
        gamma: dgamma,
        beta: dbeta,
    })
}
