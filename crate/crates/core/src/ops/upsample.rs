use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Source coordinate and weights for one output index under the
/// align-corners mapping `src = dst * (in - 1) / (out - 1)`.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn align_corner_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return Tap { lo: 0, hi: 0, frac: T::zero() };
            }
            // exact rational position o * (in-1) / (out-1)
            let num = o * (input - 1);
            let den = output - 1;
            let lo = num / den;
            let rem = num % den;
            let hi = (lo + 1).min(input - 1);
            let frac = T::from_usize(rem).unwrap() / T::from_usize(den).unwrap();
            Tap { lo, hi, frac }
        })
        .collect()
}

fn check_up<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    let s = input.shape();
    if out_h < s.h || out_w < s.w {
        return Err(Error::InvalidArgument(format!(
            "bilinear_upsample cannot downscale {}x{} to {out_h}x{out_w}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Align-corners bilinear upsampling. Corner values are reproduced exactly.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_up(input, out_h, out_w)?;
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w)?;
    let ty = align_corner_taps::<T>(s.h, out_h);
    let tx = align_corner_taps::<T>(s.w, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for y in &ty {
                let r0 = &plane[y.lo * s.w..(y.lo + 1) * s.w];
                let r1 = &plane[y.hi * s.w..(y.hi + 1) * s.w];
                for x in &tx {
                    let top = r0[x.lo] + (r0[x.hi] - r0[x.lo]) * x.frac;
                    let bot = r1[x.lo] + (r1[x.hi] - r1[x.lo]) * x.frac;
                    out.push(top + (bot - top) * y.frac);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn bilinear_upsample_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let g = grad_out.shape();
    if g.n != input_shape.n || g.c != input_shape.c || g.h < input_shape.h || g.w < input_shape.w {
        return Err(Error::ShapeMismatch {
            op: "bilinear_upsample_backward",
            expected: format!("upsampled {input_shape}"),
            actual: g.to_string(),
        });
    }
    let ty = align_corner_taps::<T>(input_shape.h, g.h);
    let tx = align_corner_taps::<T>(input_shape.w, g.w);
    let mut grad = Tensor::zeros(input_shape);
    let w = input_shape.w;
    for n in 0..g.n {
        for c in 0..g.c {
            let go = grad_out.plane(n, c);
            let base = input_shape.index(n, c, 0, 0);
            let dst = &mut grad.data_mut()[base..base + input_shape.plane()];
            for (oy, y) in ty.iter().enumerate() {
                for (ox, x) in tx.iter().enumerate() {
                    let v = go[oy * g.w + ox];
                    let (one_y, one_x) = (T::one() - y.frac, T::one() - x.frac);
                    dst[y.lo * w + x.lo] += v * one_y * one_x;
                    dst[y.lo * w + x.hi] += v * one_y * x.frac;
                    dst[y.hi * w + x.lo] += v * y.frac * one_x;
                    dst[y.hi * w + x.hi] += v * y.frac * x.frac;
                }
            }
        }
    }
    Ok(grad)
}

/// General image resize with half-pixel centers (scales up or down).
pub fn resize_bilinear<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w)?;
    let taps = |inp: usize, out: usize| -> Vec<Tap<T>> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                Tap { lo, hi, frac: T::from_f64_lossy(src - lo as f64) }
            })
            .collect()
    };
    let ty = taps(s.h, out_h);
    let tx = taps(s.w, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for y in &ty {
                for x in &tx {
                    let a = plane[y.lo * s.w + x.lo];
                    let b = plane[y.lo * s.w + x.hi];
                    let cc = plane[y.hi * s.w + x.lo];
                    let d = plane[y.hi * s.w + x.hi];
                    let top = a + (b - a) * x.frac;
                    let bot = cc + (d - cc) * x.frac;
                    out.push(top + (bot - top) * y.frac);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Target extent `(h, w)` whose shorter side equals `shorter`, aspect preserved.
pub fn shorter_side_extent(h: usize, w: usize, shorter: usize) -> (usize, usize) {
    if h <= w {
        let nw = (w as f64 * shorter as f64 / h as f64).round() as usize;
        (shorter, nw.max(shorter))
    } else {
        let nh = (h as f64 * shorter as f64 / w as f64).round() as usize;
        (nh.max(shorter), shorter)
    }
}

pub fn resize_shorter_side<T: Real>(input: &Tensor<T>, shorter: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    let (h, w) = shorter_side_extent(s.h, s.w, shorter);
    resize_bilinear(input, h, w)
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
    fn row_interpolation() {
        let t = Tensor::from_vec(shape(1, 1, 1, 2), vec![0.0f32, 1.0]).unwrap();
        let up = bilinear_upsample(&t, 1, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constants_and_identity() {
        let c = Tensor::<f32>::full(shape(1, 2, 3, 4), 1.25);
        assert!(bilinear_upsample(&c, 9, 13).unwrap().data().iter().all(|&v| (v - 1.25).abs() < 1e-6));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor::<f32>(&mut rng, shape(1, 2, 5, 5));
        assert_eq!(bilinear_upsample(&x, 5, 5).unwrap(), x);
        assert!(bilinear_upsample(&x, 4, 8).is_err());
    }

    #[test]
    fn corners_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor::<f32>(&mut rng, shape(1, 1, 8, 8));
        let up = bilinear_upsample(&x, 64, 64).unwrap();
        assert_eq!(up.get(0, 0, 0, 0), x.get(0, 0, 0, 0));
        assert_eq!(up.get(0, 0, 63, 63), x.get(0, 0, 7, 7));
        assert_eq!(up.get(0, 0, 0, 63), x.get(0, 0, 0, 7));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor::<f64>(&mut rng, shape(2, 2, 3, 4));
        let g = random_tensor::<f64>(&mut rng, shape(2, 2, 7, 9));
        let analytic = bilinear_upsample_backward(x.shape(), &g).unwrap();
        let fd = finite_diff(&x, |xp| bilinear_upsample(xp, 7, 9).unwrap().dot(&g).unwrap());
        assert!(fd.max_abs_diff(&analytic).unwrap() < 1e-6);
    }

    #[test]
    fn shorter_side_keeps_aspect() {
        assert_eq!(shorter_side_extent(480, 640, 256), (256, 341));
        assert_eq!(shorter_side_extent(640, 480, 256), (341, 256));
        assert_eq!(shorter_side_extent(64, 64, 73), (73, 73));
        let t = Tensor::<f32>::full(shape(1, 3, 30, 50), 0.5);
        let r = resize_shorter_side(&t, 60).unwrap();
        assert_eq!((r.shape().h, r.shape().w), (60, 100));
        assert!(r.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }
}
