use crate::error::Result;
use crate::tensor::{Real, Shape, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    // NaN passes through so a diverging run stays visible
    input.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

/// Softmax across channels at every `(n, h, w)`, stabilized by subtracting
/// the per-pixel maximum.
pub fn softmax_over_channels<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let mut out = input.clone();
    let data = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let max = (0..s.c).fold(T::neg_infinity(), |m, c| m.max(data[idx(c)]));
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (data[idx(c)] - max).exp();
                data[idx(c)] = e;
                total += e;
            }
            for c in 0..s.c {
                data[idx(c)] = data[idx(c)] / total;
            }
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax: `p * (g - sum_c p * g)`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    probs.expect_same_shape("softmax_backward", grad_out)?;
    let s = probs.shape();
    let plane = s.plane();
    let mut grad = Tensor::zeros(s);
    let (p, g, d) = (probs.data(), grad_out.data(), grad.data_mut());
    for n in 0..s.n {
        let base = n * s.c * plane;
        for px in 0..plane {
            let dot: T = (0..s.c).map(|c| p[base + c * plane + px] * g[base + c * plane + px]).sum();
            for c in 0..s.c {
                let i = base + c * plane + px;
                d[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(grad)
}

/// Per-pixel argmax over channels; ties go to the lowest channel index.
pub fn argmax_channels<T: Real>(input: &Tensor<T>) -> Vec<Vec<usize>> {
    let s: Shape = input.shape();
    (0..s.n)
        .map(|n| {
            (0..s.plane())
                .map(|p| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if input.data()[s.index(n, c, 0, 0) + p] > input.data()[s.index(n, best, 0, 0) + p] {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testing::{finite_diff, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn relu_cases() {
        let neg = Tensor::<f32>::full(shape(1, 2, 3, 3), -0.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::<f32>::full(shape(1, 2, 3, 3), 0.5);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // keep inputs away from the kink
        let x = random_tensor::<f64>(&mut rng, shape(2, 2, 5, 5)).map(|v| if v.abs() < 0.05 { 0.5 } else { v });
        let g = random_tensor::<f64>(&mut rng, x.shape());
        let fd = finite_diff(&x, |xp| relu(xp).dot(&g).unwrap());
        assert!(fd.max_abs_diff(&relu_backward(&x, &g).unwrap()).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_cases() {
        let eq = Tensor::<f32>::full(shape(1, 2, 1, 1), 3.0);
        assert_eq!(softmax_over_channels(&eq).data(), &[0.5, 0.5]);
        let big = Tensor::from_vec(shape(1, 2, 1, 1), vec![1000.0f32, 0.0]).unwrap();
        let p = softmax_over_channels(&big);
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-6 && p.data()[1] < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor::<f32>(&mut rng, shape(2, 5, 4, 3)).scale(10.0);
        let p = softmax_over_channels(&x);
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..3 {
                    let s: f32 = (0..5).map(|c| p.get(n, c, h, w)).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!((0..5).all(|c| p.get(n, c, h, w) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor::<f64>(&mut rng, shape(2, 4, 3, 3));
        let g = random_tensor::<f64>(&mut rng, x.shape());
        let analytic = softmax_backward(&softmax_over_channels(&x), &g).unwrap();
        let fd = finite_diff(&x, |xp| softmax_over_channels(xp).dot(&g).unwrap());
        assert!(fd.max_abs_diff(&analytic).unwrap() < 1e-6);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let t = Tensor::from_vec(shape(1, 3, 1, 2), vec![1.0f32, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![vec![0, 1]]);
    }
}
