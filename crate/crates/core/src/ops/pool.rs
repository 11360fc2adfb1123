use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Max-pooling geometry. Out-of-range cells never win (the border acts as -inf).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolParams {
    pub fn new(window: usize, stride: usize, pad: usize) -> Self {
        Self {
            window,
            stride,
            pad,
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "pool window and stride must be >= 1".into(),
            ));
        }
        if self.pad >= self.window {
            return Err(Error::InvalidArgument(format!(
                "pool padding {} must be smaller than window {}",
                self.pad, self.window
            )));
        }
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.window > ph || self.window > pw {
            return Err(Error::Shape(format!(
                "pool window {} exceeds padded input {ph}x{pw}",
                self.window
            )));
        }
        Ok((
            (ph - self.window) / self.stride + 1,
            (pw - self.window) / self.stride + 1,
        ))
    }

    /// Valid input range `[lo, hi)` covered by output index `o` along an axis of `extent`.
    fn window_range(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.window as isize).max(0) as usize).min(extent);
        (lo, hi)
    }
}

/// Index of the winning input cell per output cell (first maximum in scan order).
fn argmax_map<T: Real>(input: &Tensor<T>, p: &PoolParams) -> Result<(Shape, Vec<usize>)> {
    let s = input.shape();
    let (oh, ow) = p.output_extent(s.h, s.w)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut winners = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            let plane = input.plane(n, c);
            for oy in 0..oh {
                let (y0, y1) = p.window_range(oy, s.h);
                for ox in 0..ow {
                    let (x0, x1) = p.window_range(ox, s.w);
                    let mut best = y0 * s.w + x0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if plane[y * s.w + x] > plane[best] {
                                best = y * s.w + x;
                            }
                        }
                    }
                    winners.push(base + best);
                }
            }
        }
    }
    Ok((out_shape, winners))
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let (shape, winners) = argmax_map(input, p)?;
    let data = winners.iter().map(|&i| input.data()[i]).collect();
    Tensor::from_vec(shape, data)
}

/// Routes each output gradient to the input cell that won the forward max.
pub fn maxpool2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &PoolParams,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (shape, winners) = argmax_map(input, p)?;
    if grad_out.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d_backward",
            expected: shape.to_string(),
            actual: grad_out.shape().to_string(),
        });
    }
    let mut grad = Tensor::zeros(input.shape());
    let g = grad.data_mut();
    for (&i, &v) in winners.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(grad)
}

/// Per-(n, c) spatial mean, shape `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let count = T::from_usize(s.plane()).unwrap();
    let data = input
        .data()
        .chunks_exact(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() / count)
        .collect();
    Tensor::from_vec(Shape { h: 1, w: 1, ..s }, data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let expected = Shape {
        h: 1,
        w: 1,
        ..input_shape
    };
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            expected: expected.to_string(),
            actual: grad_out.shape().to_string(),
        });
    }
    let count = T::from_usize(input_shape.plane()).unwrap();
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / count, input_shape.plane()));
    }
    Tensor::from_vec(input_shape, data)
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
    fn constant_map_stays_constant() {
        let t = Tensor::<f32>::full(shape(1, 2, 7, 7), 3.5);
        let out = maxpool2d(&t, &PoolParams::new(3, 2, 1)).unwrap();
        assert_eq!(out.shape().dims(), [1, 2, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn two_by_two() {
        let t = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2d(&t, &PoolParams::new(2, 2, 0)).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn negative_values_ignore_padding() {
        let t = Tensor::<f32>::full(shape(1, 1, 4, 4), -2.0);
        let out = maxpool2d(&t, &PoolParams::new(3, 2, 1)).unwrap();
        assert!(out.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn matches_naive_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor::<f32>(&mut rng, shape(2, 3, 8, 8));
        for p in [PoolParams::new(2, 2, 0), PoolParams::new(3, 2, 1), PoolParams::new(3, 1, 0)] {
            let out = maxpool2d(&t, &p).unwrap();
            let os = out.shape();
            for n in 0..2 {
                for c in 0..3 {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            let mut m = f32::NEG_INFINITY;
                            for dy in 0..p.window {
                                for dx in 0..p.window {
                                    let y = (oy * p.stride + dy) as isize - p.pad as isize;
                                    let x = (ox * p.stride + dx) as isize - p.pad as isize;
                                    if (0..8).contains(&y) && (0..8).contains(&x) {
                                        m = m.max(t.get(n, c, y as usize, x as usize));
                                    }
                                }
                            }
                            assert_eq!(out.get(n, c, oy, ox), m);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor::<f64>(&mut rng, shape(2, 2, 9, 9));
        let p = PoolParams::new(3, 2, 1);
        let g = random_tensor::<f64>(&mut rng, maxpool2d(&x, &p).unwrap().shape());
        let analytic = maxpool2d_backward(&x, &p, &g).unwrap();
        let fd = finite_diff(&x, |xp| maxpool2d(xp, &p).unwrap().dot(&g).unwrap());
        assert!(fd.max_abs_diff(&analytic).unwrap() < 1e-6);
    }

    #[test]
    fn gap_values_and_gradient() {
        let t = Tensor::<f32>::full(shape(1, 1, 5, 5), 2.5);
        assert_eq!(global_avg_pool(&t).data(), &[2.5]);
        let mut spike = Tensor::<f32>::zeros(shape(1, 1, 28, 28));
        spike.set(0, 0, 3, 17, 784.0);
        assert_eq!(global_avg_pool(&spike).data(), &[1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor::<f64>(&mut rng, shape(2, 3, 4, 5));
        let g = random_tensor::<f64>(&mut rng, shape(2, 3, 1, 1));
        let analytic = global_avg_pool_backward(x.shape(), &g).unwrap();
        assert!((analytic.get(1, 2, 3, 4) - g.get(1, 2, 0, 0) / 20.0).abs() < 1e-15);
        let fd = finite_diff(&x, |xp| global_avg_pool(xp).dot(&g).unwrap());
        assert!(fd.max_abs_diff(&analytic).unwrap() < 1e-6);
    }
}
