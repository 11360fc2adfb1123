//! Strided, dilated 2-D cross-correlation and its gradients.
//!
//! Each output cell at `(oy, ox)` reads input taps at
//! `(oy * stride - pad + ky * dilation, ox * stride - pad + kx * dilation)`.
//! The kernel is not flipped.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Square kernel with resolution-preserving padding `dilation * (kernel - 1) / 2`.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let pad = dilation * (kernel.saturating_sub(1)) / 2;
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation,
            pad_h: pad,
            pad_w: pad,
            in_channels,
            out_channels,
        }
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.pad_h = pad;
        self.pad_w = pad;
        self
    }

    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel_h - 1) + 1,
            self.dilation * (self.kernel_w - 1) + 1,
        )
    }

    pub fn weight_shape(&self) -> Result<Shape> {
        Shape::new(
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        )
    }

    /// Spatial output extent for an `h × w` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride and dilation must be >= 1 (stride {}, dilation {})",
                self.stride, self.dilation
            )));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel extent must be >= 1".into()));
        }
        let (eh, ew) = self.effective_kernel();
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if eh > ph || ew > pw {
            return Err(Error::Shape(format!(
                "effective kernel {eh}x{ew} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Convolution weights `(out, in, kh, kw)` and an optional per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Filter<T> {
    pub fn new(weights: Tensor<T>, bias: Option<Vec<T>>) -> Self {
        Self { weights, bias }
    }

    fn check(&self, p: &ConvParams) -> Result<()> {
        let expected = p.weight_shape()?;
        if self.weights.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d filter",
                expected: expected.to_string(),
                actual: self.weights.shape().to_string(),
            });
        }
        if let Some(b) = &self.bias {
            if b.len() != p.out_channels {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    expected: p.out_channels.to_string(),
                    actual: b.len().to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Gradient with respect to a [`Filter`].
#[derive(Clone, Debug, PartialEq)]
pub struct FilterGrad<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

fn check_input<T: Real>(input: &Tensor<T>, p: &ConvParams) -> Result<(usize, usize)> {
    let s = input.shape();
    if s.c != p.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv2d input channels",
            expected: p.in_channels.to_string(),
            actual: s.c.to_string(),
        });
    }
    p.output_extent(s.h, s.w)
}

/// Range of output columns `ox` whose tap `ox * stride + offset` lands in `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ox with ox*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest ox with ox*s + offset <= extent - 1
    let hi_num = extent as isize - 1 - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Unfolds one image `(c, h, w)` into a `(c*kh*kw) × (oh*ow)` matrix.
fn im2col<T: Real>(
    image: &[T],
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let cols = oh * ow;
    let mut row = 0;
    for ci in 0..p.in_channels {
        let plane = &image[ci * h * w..(ci + 1) * h * w];
        for ky in 0..p.kernel_h {
            let y_off = (ky * p.dilation) as isize - p.pad_h as isize;
            for kx in 0..p.kernel_w {
                let x_off = (kx * p.dilation) as isize - p.pad_w as isize;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (x_lo, x_hi) = valid_range(ow, p.stride, x_off, w);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * p.stride) as isize + y_off;
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..x_lo].fill(T::zero());
                    line[x_hi..].fill(T::zero());
                    if x_lo >= x_hi {
                        continue;
                    }
                    if p.stride == 1 {
                        let start = (x_lo as isize + x_off) as usize;
                        line[x_lo..x_hi].copy_from_slice(&src[start..start + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            line[ox] = src[((ox * p.stride) as isize + x_off) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into an image.
fn col2im<T: Real>(
    col: &[T],
    h: usize,
    w: usize,
    p: &ConvParams,
    oh: usize,
    ow: usize,
    image: &mut [T],
) {
    let cols = oh * ow;
    let mut row = 0;
    for ci in 0..p.in_channels {
        let plane = &mut image[ci * h * w..(ci + 1) * h * w];
        for ky in 0..p.kernel_h {
            let y_off = (ky * p.dilation) as isize - p.pad_h as isize;
            for kx in 0..p.kernel_w {
                let x_off = (kx * p.dilation) as isize - p.pad_w as isize;
                let src = &col[row * cols..(row + 1) * cols];
                let (x_lo, x_hi) = valid_range(ow, p.stride, x_off, w);
                for oy in 0..oh {
                    let iy = (oy * p.stride) as isize + y_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for ox in x_lo..x_hi {
                        dst[((ox * p.stride) as isize + x_off) as usize] += line[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D convolution with stride, dilation and zero padding.
pub fn conv2d<T: Real>(input: &Tensor<T>, filter: &Filter<T>, p: &ConvParams) -> Result<Tensor<T>> {
    filter.check(p)?;
    let (oh, ow) = check_input(input, p)?;
    let s = input.shape();
    let out_shape = Shape::new(s.n, p.out_channels, oh, ow)?;
    let in_per = s.c * s.h * s.w;
    let out_per = p.out_channels * oh * ow;
    let k = p.col_rows();
    let weights = MatRef::new(filter.weights.data(), p.out_channels, k);

    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_per)
        .zip(input.data().par_chunks(in_per))
        .for_each(|(dst, image)| {
            if p.is_pointwise() {
                gemm(weights, MatRef::new(image, k, oh * ow), T::zero(), dst);
            } else {
                let mut col = vec![T::zero(); k * oh * ow];
                im2col(image, s.h, s.w, p, oh, ow, &mut col);
                gemm(weights, MatRef::new(&col, k, oh * ow), T::zero(), dst);
            }
            if let Some(bias) = &filter.bias {
                for (plane, &b) in dst.chunks_exact_mut(oh * ow).zip(bias) {
                    plane.iter_mut().for_each(|v| *v += b);
                }
            }
        });
    Tensor::from_vec(out_shape, out)
}

/// Gradients of `sum(conv2d(input) * grad_out)` with respect to input and filter.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    filter: &Filter<T>,
    p: &ConvParams,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, FilterGrad<T>)> {
    filter.check(p)?;
    let (oh, ow) = check_input(input, p)?;
    let s = input.shape();
    let out_shape = Shape::new(s.n, p.out_channels, oh, ow)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward grad_out",
            expected: out_shape.to_string(),
            actual: grad_out.shape().to_string(),
        });
    }
    let in_per = s.c * s.h * s.w;
    let out_per = p.out_channels * oh * ow;
    let k = p.col_rows();
    let pixels = oh * ow;

    // Per-item partial filter gradients are reduced in batch order below, so
    // the result does not depend on how rayon schedules the items.
    let mut grad_in = vec![T::zero(); input.len()];
    let partials: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_per)
        .zip(input.data().par_chunks(in_per))
        .zip(grad_out.data().par_chunks(out_per))
        .map(|((gin, image), gout)| {
            let gout_mat = MatRef::new(gout, p.out_channels, pixels);
            let mut gw = vec![T::zero(); p.out_channels * k];
            if p.is_pointwise() {
                gemm(gout_mat, MatRef::transposed(image, pixels, k), T::zero(), &mut gw);
                gemm(
                    MatRef::transposed(filter.weights.data(), k, p.out_channels),
                    gout_mat,
                    T::zero(),
                    gin,
                );
            } else {
                let mut col = vec![T::zero(); k * pixels];
                im2col(image, s.h, s.w, p, oh, ow, &mut col);
                gemm(gout_mat, MatRef::transposed(&col, pixels, k), T::zero(), &mut gw);
                gemm(
                    MatRef::transposed(filter.weights.data(), k, p.out_channels),
                    gout_mat,
                    T::zero(),
                    &mut col,
                );
                col2im(&col, s.h, s.w, p, oh, ow, gin);
            }
            gw
        })
        .collect();

    let mut gw = vec![T::zero(); p.out_channels * k];
    for part in &partials {
        for (acc, v) in gw.iter_mut().zip(part) {
            *acc += *v;
        }
    }
    let grad_bias = filter.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); p.out_channels];
        for item in grad_out.data().chunks_exact(out_per) {
            for (acc, plane) in gb.iter_mut().zip(item.chunks_exact(pixels)) {
                *acc += plane.iter().copied().sum::<T>();
            }
        }
        gb
    });
    Ok((
        Tensor::from_vec(s, grad_in)?,
        FilterGrad {
            weights: Tensor::from_vec(p.weight_shape()?, gw)?,
            bias: grad_bias,
        },
    ))
}

/// Pixelwise linear map from `c` to `n_classes` channels (a 1×1 convolution).
pub fn classifier_1x1<T: Real>(input: &Tensor<T>, k: &Filter<T>) -> Result<Tensor<T>> {
    let ws = k.weights.shape();
    if ws.h != 1 || ws.w != 1 {
        return Err(Error::InvalidArgument(format!(
            "classifier kernel must be 1x1, got {}x{}",
            ws.h, ws.w
        )));
    }
    conv2d(input, k, &classifier_params(ws.c, ws.n))
}

pub fn classifier_params(in_channels: usize, n_classes: usize) -> ConvParams {
    ConvParams::same(in_channels, n_classes, 1, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::testing::{brute_conv2d, finite_diff, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor::<f32>(&mut rng, shape(2, 1, 5, 6));
        let f = Filter::new(Tensor::full(shape(1, 1, 1, 1), 1.0), None);
        let p = ConvParams::same(1, 1, 1, 1, 1);
        assert_eq!(conv2d(&x, &f, &p).unwrap(), x);
        let g = random_tensor::<f32>(&mut rng, x.shape());
        let (gi, _) = conv2d_backward(&x, &f, &p, &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn impulse_through_dilated_ones_kernel_forms_grid() {
        let mut x = Tensor::<f32>::zeros(shape(1, 1, 11, 11));
        x.set(0, 0, 5, 5, 1.0);
        let f = Filter::new(Tensor::full(shape(1, 1, 3, 3), 1.0), None);
        let p = ConvParams::same(1, 1, 3, 1, 2);
        assert_eq!(p.pad_h, 2);
        let y = conv2d(&x, &f, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        for h in 0..11 {
            for w in 0..11 {
                let on = [3, 5, 7].contains(&h) && [3, 5, 7].contains(&w);
                assert_eq!(y.get(0, 0, h, w), if on { 1.0 } else { 0.0 }, "({h},{w})");
            }
        }
    }

    #[test]
    fn matches_brute_force_strided_dilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor::<f32>(&mut rng, shape(1, 3, 7, 7));
        let f = Filter::new(random_tensor(&mut rng, shape(2, 3, 3, 3)), Some(vec![0.25, -0.5]));
        let p = ConvParams::same(3, 2, 3, 2, 2);
        let y = conv2d(&x, &f, &p).unwrap();
        let oracle = brute_conv2d(&x.cast::<f64>(), &f.weights.cast(), f.bias.as_deref().map(|b| b.iter().map(|&v| v as f64).collect::<Vec<_>>()).as_deref(), &p);
        assert_eq!(y.shape(), oracle.shape());
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn padding_wider_than_map() {
        // taps that miss the map entirely in one row or column
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(h, w) in &[(2, 2), (1, 3), (2, 5)] {
            let x = random_tensor::<f64>(&mut rng, shape(1, 2, h, w));
            let f = Filter::new(random_tensor(&mut rng, shape(2, 2, 3, 3)), None);
            let p = ConvParams::same(2, 2, 3, 1, 4);
            let y = conv2d(&x, &f, &p).unwrap();
            let oracle = brute_conv2d(&x, &f.weights, None, &p);
            assert!(y.max_abs_diff(&oracle).unwrap() < 1e-12);
            let g = random_tensor::<f64>(&mut rng, y.shape());
            let (gi, _) = conv2d_backward(&x, &f, &p, &g).unwrap();
            let fd = finite_diff(&x, |xp| conv2d(xp, &f, &p).unwrap().dot(&g).unwrap());
            assert!(fd.max_abs_diff(&gi).unwrap() < 1e-6);
        }
    }

    #[test]
    fn output_extent_formula() {
        let p = ConvParams::same(1, 1, 3, 2, 1);
        assert_eq!(p.output_extent(224, 224).unwrap(), (112, 112));
        let p = ConvParams::same(1, 1, 7, 2, 1);
        assert_eq!(p.output_extent(224, 224).unwrap(), (112, 112));
        let p = ConvParams::same(1, 1, 3, 1, 4);
        assert_eq!(p.output_extent(28, 28).unwrap(), (28, 28));
        // effective extent 9 does not fit a 3-wide unpadded input
        let p = ConvParams::same(1, 1, 3, 1, 4).with_padding(0);
        assert!(p.output_extent(3, 3).is_err());
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f32>::zeros(shape(1, 2, 4, 4));
        let f = Filter::new(Tensor::zeros(shape(1, 3, 3, 3)), None);
        assert!(conv2d(&x, &f, &ConvParams::same(3, 1, 3, 1, 1)).is_err());
        assert!(conv2d(&x, &f, &ConvParams::same(2, 1, 3, 1, 1)).is_err());
        let f = Filter::new(Tensor::zeros(shape(1, 2, 3, 3)), None);
        let p = ConvParams::same(2, 1, 3, 1, 1);
        assert!(conv2d_backward(&x, &f, &p, &Tensor::zeros(shape(1, 1, 3, 3))).is_err());
        let mut zero_stride = p;
        zero_stride.stride = 0;
        assert!(conv2d(&x, &f, &zero_stride).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor::<f32>(&mut rng, shape(2, 2, 6, 6));
        let f = Filter::new(random_tensor(&mut rng, shape(3, 2, 3, 3)), Some(vec![1.0; 3]));
        let p = ConvParams::same(2, 3, 3, 2, 2);
        let y = conv2d(&x, &f, &p).unwrap();
        let (gi, gf) = conv2d_backward(&x, &f, &p, &Tensor::zeros(y.shape())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gf.weights.data().iter().all(|&v| v == 0.0));
        assert!(gf.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, dilation, pad) in &[(1, 1, 1), (2, 1, 0), (1, 2, 2), (2, 2, 1), (1, 4, 4)] {
            let x = random_tensor::<f64>(&mut rng, shape(2, 2, 9, 9));
            let w = random_tensor::<f64>(&mut rng, shape(3, 2, 3, 3));
            let b = vec![0.1, -0.2, 0.3];
            let p = ConvParams::same(2, 3, 3, stride, dilation).with_padding(pad);
            let f = Filter::new(w.clone(), Some(b.clone()));
            let y = conv2d(&x, &f, &p).unwrap();
            let g = random_tensor::<f64>(&mut rng, y.shape());
            let (gi, gf) = conv2d_backward(&x, &f, &p, &g).unwrap();

            let fd_x = finite_diff(&x, |xp| conv2d(xp, &f, &p).unwrap().dot(&g).unwrap());
            assert!(fd_x.max_abs_diff(&gi).unwrap() < 1e-6);
            let fd_w = finite_diff(&w, |wp| {
                conv2d(&x, &Filter::new(wp.clone(), Some(b.clone())), &p).unwrap().dot(&g).unwrap()
            });
            assert!(fd_w.max_abs_diff(&gf.weights).unwrap() < 1e-6);
            let gb = gf.bias.unwrap();
            let sums: Vec<f64> = (0..3)
                .map(|c| (0..y.shape().n).map(|n| g.plane(n, c).iter().sum::<f64>()).sum())
                .collect();
            for (a, e) in gb.iter().zip(&sums) {
                assert!((a - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn classifier_rejects_spatial_kernel() {
        let x = Tensor::<f32>::zeros(shape(1, 2, 4, 4));
        let k = Filter::new(Tensor::zeros(shape(3, 2, 3, 3)), None);
        assert!(classifier_1x1(&x, &k).is_err());
    }

    #[test]
    fn classifier_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor::<f32>(&mut rng, shape(1, 3, 4, 4));
        let eye = Tensor::from_fn(shape(3, 3, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(classifier_1x1(&x, &Filter::new(eye, None)).unwrap(), x);
        let zero = Filter::new(Tensor::zeros(shape(5, 3, 1, 1)), None);
        assert!(classifier_1x1(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
