//! Independent oracles shared by the operator unit tests.

use rand::Rng;

use crate::ops::ConvParams;
use crate::tensor::{Real, Shape, Tensor};

pub fn random_tensor<T: Real>(rng: &mut impl Rng, shape: Shape) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

/// Direct summation over every output cell, output channel, input channel
/// and kernel tap; out-of-range taps read zero.
pub fn brute_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    p: &ConvParams,
) -> Tensor<f64> {
    let s = x.shape();
    let eh = p.dilation * (p.kernel_h - 1) + 1;
    let ew = p.dilation * (p.kernel_w - 1) + 1;
    let oh = (s.h + 2 * p.pad_h - eh) / p.stride + 1;
    let ow = (s.w + 2 * p.pad_w - ew) / p.stride + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, p.out_channels, oh, ow).unwrap());
    for n in 0..s.n {
        for o in 0..p.out_channels {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for i in 0..s.c {
                        for ky in 0..p.kernel_h {
                            for kx in 0..p.kernel_w {
                                let iy = (y * p.stride + ky * p.dilation) as isize - p.pad_h as isize;
                                let ix = (xo * p.stride + kx * p.dilation) as isize - p.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += x.get(n, i, iy as usize, ix as usize) * w.get(o, i, ky, kx);
                            }
                        }
                    }
                    out.set(n, o, y, xo, acc);
                }
            }
        }
    }
    out
}

/// Central finite differences of a scalar function of `x`, step 1e-4.
pub fn finite_diff(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let h = 1e-4;
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

pub fn finite_diff_vec(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-4;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}
