//! Whole-network forward and backward passes.

use std::collections::BTreeMap;

use super::{BlockSpec, ConvUnit, ModelGraph, Weights, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm, batchnorm_backward, classifier_1x1, classifier_params, conv2d, conv2d_backward,
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, relu, relu_backward,
    BatchNormParams, Filter, Mode, PoolParams, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecOptions {
    pub mode: Mode,
    pub momentum: f64,
    pub epsilon: f64,
    /// Purely linear network: normalization is skipped, rectifiers are
    /// removed and max pooling becomes a window sum. Used for receptive-field probes.
    pub linear: bool,
    /// Stop after this level; the trace's features are then that level's output.
    pub until_level: Option<usize>,
}

impl ExecOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            linear: false,
            until_level: None,
        }
    }

    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            ..Self::eval()
        }
    }

    pub fn linear_probe() -> Self {
        Self {
            linear: true,
            ..Self::eval()
        }
    }

    pub fn until(mut self, level: usize) -> Self {
        self.until_level = Some(level);
        self
    }
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self::eval()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Real = f32> {
    /// `(n, n_classes, 1, 1)`.
    pub logits: Tensor<T>,
    /// Final-level feature map, before pooling.
    pub features: Tensor<T>,
    pub taps: BTreeMap<usize, Tensor<T>>,
    /// Updated running statistics (train mode only); the caller decides whether to apply them.
    pub running_stats: Weights<T>,
}

#[derive(Clone, Debug)]
struct UnitCache<T: Real> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    bn_out: Tensor<T>,
}

#[derive(Clone, Debug)]
enum BlockCache<T: Real> {
    Pool {
        input: Tensor<T>,
    },
    Units {
        input_shape: Shape,
        units: Vec<UnitCache<T>>,
        skip: Option<UnitCache<T>>,
        /// Pre-rectifier sum.
        sum: Tensor<T>,
    },
}

/// Forward activations retained for [`backward`].
#[derive(Clone, Debug)]
pub struct Trace<T: Real = f32> {
    pub features: Tensor<T>,
    pub taps: BTreeMap<usize, Tensor<T>>,
    pub running_stats: Weights<T>,
    opts: ExecOptions,
    input_shape: Shape,
    blocks: Vec<(usize, usize, BlockCache<T>)>,
}

impl<T: Real> Trace<T> {
    pub fn options(&self) -> &ExecOptions {
        &self.opts
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    pub input: Tensor<T>,
    /// Learnable-parameter gradients keyed like the model's weights.
    pub params: Weights<T>,
}

/// Runs the backbone and the pooled classifier. `taps` lists levels whose
/// outputs are returned.
pub fn forward<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    mode: Mode,
    taps: &[usize],
) -> Result<ForwardOutput<T>> {
    let opts = ExecOptions { mode, ..ExecOptions::eval() };
    let trace = run(model, input, &opts, taps, false)?;
    let logits = classify_head(model, &trace.features)?;
    Ok(ForwardOutput {
        logits,
        features: trace.features,
        taps: trace.taps,
        running_stats: trace.running_stats,
    })
}

/// Forward pass that keeps every activation needed for [`backward`].
pub fn forward_trace<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    opts: &ExecOptions,
    taps: &[usize],
) -> Result<Trace<T>> {
    run(model, input, opts, taps, true)
}

fn check_input<T: Real>(model: &ModelGraph<T>, input: &Tensor<T>) -> Result<()> {
    let s = input.shape();
    if s.c != model.in_channels {
        return Err(Error::ShapeMismatch {
            op: "forward input channels",
            expected: model.in_channels.to_string(),
            actual: s.c.to_string(),
        });
    }
    let os = model.output_stride();
    if !s.h.is_multiple_of(os) || !s.w.is_multiple_of(os) {
        return Err(Error::InvalidArgument(format!(
            "{} needs input extents divisible by {os}, got {}x{}",
            model.name(),
            s.h,
            s.w
        )));
    }
    Ok(())
}

fn run<T: Real>(
    model: &ModelGraph<T>,
    input: &Tensor<T>,
    opts: &ExecOptions,
    taps: &[usize],
    keep: bool,
) -> Result<Trace<T>> {
    check_input(model, input)?;
    if let Some(l) = opts.until_level {
        model.level(l)?;
    }
    let mut x = input.clone();
    let mut tapped = BTreeMap::new();
    let mut stats = Weights::new();
    let mut blocks = Vec::new();
    for level in &model.levels {
        for (bi, block) in level.blocks.iter().enumerate() {
            let prefix = level.block_prefix(bi);
            let (y, cache) = block_forward(model, block, &prefix, x, opts, &mut stats)?;
            if keep {
                blocks.push((level.index, bi, cache));
            }
            x = y;
        }
        if taps.contains(&level.index) {
            tapped.insert(level.index, x.clone());
        }
        if opts.until_level == Some(level.index) {
            break;
        }
    }
    Ok(Trace {
        features: x,
        taps: tapped,
        running_stats: stats,
        opts: *opts,
        input_shape: input.shape(),
        blocks,
    })
}

fn bn_params<'a, T: Real>(model: &'a ModelGraph<T>, bn: &str) -> Result<BatchNormParams<'a, T>> {
    Ok(BatchNormParams {
        gamma: model.param(&format!("{bn}.gamma"))?.data(),
        beta: model.param(&format!("{bn}.beta"))?.data(),
        running_mean: model.param(&format!("{bn}.running_mean"))?.data(),
        running_var: model.param(&format!("{bn}.running_var"))?.data(),
    })
}

fn unit_filter<T: Real>(model: &ModelGraph<T>, unit: &ConvUnit) -> Result<Filter<T>> {
    Ok(Filter::new(model.param(&format!("{}.weight", unit.conv))?.clone(), None))
}

fn unit_forward<T: Real>(
    model: &ModelGraph<T>,
    unit: &ConvUnit,
    x: Tensor<T>,
    opts: &ExecOptions,
    stats: &mut Weights<T>,
) -> Result<UnitCache<T>> {
    let conv_out = conv2d(&x, &unit_filter(model, unit)?, &unit.params)?;
    if opts.linear {
        return Ok(UnitCache {
            input: x,
            bn_out: conv_out.clone(),
            conv_out,
        });
    }
    let p = bn_params(model, &unit.bn)?;
    let bn = batchnorm(&conv_out, &p, opts.mode, opts.momentum, opts.epsilon)?;
    if opts.mode == Mode::Train {
        stats.insert(format!("{}.running_mean", unit.bn), Tensor::vector(bn.running_mean)?);
        stats.insert(format!("{}.running_var", unit.bn), Tensor::vector(bn.running_var)?);
    }
    Ok(UnitCache {
        input: x,
        conv_out,
        bn_out: bn.output,
    })
}

fn block_forward<T: Real>(
    model: &ModelGraph<T>,
    block: &BlockSpec,
    prefix: &str,
    x: Tensor<T>,
    opts: &ExecOptions,
    stats: &mut Weights<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    if let Some(p) = block.pool_params() {
        let y = if opts.linear { sum_pool(&x, &p)? } else { maxpool2d(&x, &p)? };
        return Ok((y, BlockCache::Pool { input: x }));
    }
    let input_shape = x.shape();
    let skip_input = block.has_residual.then(|| x.clone());
    let units = block.main_units(prefix);
    let mut caches = Vec::with_capacity(units.len());
    let mut h = x;
    for (i, unit) in units.iter().enumerate() {
        let cache = unit_forward(model, unit, h, opts, stats)?;
        let last = i + 1 == units.len();
        h = if last || opts.linear {
            cache.bn_out.clone()
        } else {
            relu(&cache.bn_out)
        };
        caches.push(cache);
    }
    let mut skip = None;
    if let Some(sx) = skip_input {
        match block.projection_unit(prefix) {
            Some(pu) => {
                let cache = unit_forward(model, &pu, sx, opts, stats)?;
                h = h.add(&cache.bn_out)?;
                skip = Some(cache);
            }
            None => h = h.add(&sx)?,
        }
    }
    let out = if opts.linear || !block.ends_with_relu() { h.clone() } else { relu(&h) };
    Ok((
        out,
        BlockCache::Units {
            input_shape,
            units: caches,
            skip,
            sum: h,
        },
    ))
}

fn unit_backward<T: Real>(
    model: &ModelGraph<T>,
    unit: &ConvUnit,
    cache: &UnitCache<T>,
    opts: &ExecOptions,
    grad: Tensor<T>,
    grads: &mut Weights<T>,
) -> Result<Tensor<T>> {
    let grad_conv = if opts.linear {
        grad
    } else {
        let p = bn_params(model, &unit.bn)?;
        let g = batchnorm_backward(&cache.conv_out, &p, opts.mode, opts.epsilon, &grad)?;
        grads.insert(format!("{}.gamma", unit.bn), Tensor::vector(g.gamma)?);
        grads.insert(format!("{}.beta", unit.bn), Tensor::vector(g.beta)?);
        g.input
    };
    let (gx, fg) = conv2d_backward(&cache.input, &unit_filter(model, unit)?, &unit.params, &grad_conv)?;
    grads.insert(format!("{}.weight", unit.conv), fg.weights);
    Ok(gx)
}

/// Back-propagates `grad_features` (gradient of a scalar with respect to
/// `trace.features`) to the input and every parameter used.
pub fn backward<T: Real>(
    model: &ModelGraph<T>,
    trace: &Trace<T>,
    grad_features: &Tensor<T>,
) -> Result<Gradients<T>> {
    trace.features.expect_same_shape("backward", grad_features)?;
    if trace.blocks.is_empty() && !model.levels.is_empty() {
        return Err(Error::InvalidArgument("trace holds no activations".into()));
    }
    let opts = &trace.opts;
    let mut params = Weights::new();
    let mut g = grad_features.clone();
    for (li, bi, cache) in trace.blocks.iter().rev() {
        let level = model.level(*li)?;
        let block = &level.blocks[*bi];
        let prefix = level.block_prefix(*bi);
        g = match cache {
            BlockCache::Pool { input } => {
                let p = block.pool_params().expect("pool block");
                if opts.linear {
                    sum_pool_backward(input.shape(), &p, &g)?
                } else {
                    maxpool2d_backward(input, &p, &g)?
                }
            }
            BlockCache::Units {
                input_shape,
                units,
                skip,
                sum,
            } => {
                let g_sum = if opts.linear || !block.ends_with_relu() {
                    g
                } else {
                    relu_backward(sum, &g)?
                };
                let specs = block.main_units(&prefix);
                let mut gh = g_sum.clone();
                for (i, (spec, uc)) in specs.iter().zip(units).enumerate().rev() {
                    if i + 1 != specs.len() && !opts.linear {
                        gh = relu_backward(&uc.bn_out, &gh)?;
                    }
                    gh = unit_backward(model, spec, uc, opts, gh, &mut params)?;
                }
                if block.has_residual {
                    let gs = match (block.projection_unit(&prefix), skip) {
                        (Some(pu), Some(sc)) => unit_backward(model, &pu, sc, opts, g_sum, &mut params)?,
                        _ => g_sum,
                    };
                    gh = gh.add(&gs)?;
                }
                debug_assert_eq!(gh.shape(), *input_shape);
                gh
            }
        };
    }
    if g.shape() != trace.input_shape {
        return Err(Error::ShapeMismatch {
            op: "backward",
            expected: trace.input_shape.to_string(),
            actual: g.shape().to_string(),
        });
    }
    Ok(Gradients { input: g, params })
}

/// Global average pooling followed by the 1×1 classifier.
pub fn classify_head<T: Real>(model: &ModelGraph<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    classifier_1x1(&global_avg_pool(features), &model.classifier()?)
}

/// Returns the gradient with respect to `features` and the classifier gradients.
pub fn classify_head_backward<T: Real>(
    model: &ModelGraph<T>,
    features: &Tensor<T>,
    grad_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Weights<T>)> {
    let k = model.classifier()?;
    let pooled = global_avg_pool(features);
    let ws = k.weights.shape();
    let (gp, fg) = conv2d_backward(&pooled, &k, &classifier_params(ws.c, ws.n), grad_logits)?;
    let mut grads = Weights::new();
    grads.insert(CLASSIFIER_WEIGHT.to_string(), fg.weights);
    if let Some(b) = fg.bias {
        grads.insert(CLASSIFIER_BIAS.to_string(), Tensor::vector(b)?);
    }
    Ok((global_avg_pool_backward(features.shape(), &gp)?, grads))
}

fn sum_pool<T: Real>(x: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let s = x.shape();
    let (oh, ow) = p.output_extent(s.h, s.w)?;
    let out_shape = Shape::new(s.n, s.c, oh, ow)?;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for (iy, ix) in window(p, oy, ox, s.h, s.w) {
                        acc += plane[iy * s.w + ix];
                    }
                    out.set(n, c, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

fn sum_pool_backward<T: Real>(input_shape: Shape, p: &PoolParams, g: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input_shape;
    let gs = g.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..gs.h {
                for ox in 0..gs.w {
                    let v = g.get(n, c, oy, ox);
                    for (iy, ix) in window(p, oy, ox, s.h, s.w) {
                        let i = s.index(n, c, iy, ix);
                        out.data_mut()[i] += v;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn window(p: &PoolParams, oy: usize, ox: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (s, k, pad) = (p.stride, p.window, p.pad);
    (0..k).flat_map(move |ky| {
        (0..k).filter_map(move |kx| {
            let iy = (oy * s + ky).checked_sub(pad)?;
            let ix = (ox * s + kx).checked_sub(pad)?;
            (iy < h && ix < w).then_some((iy, ix))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_drn_c, build_resnet, convert_to_drn_a, WidthMultiplier};
    use crate::ops::testing::random_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eighth() -> WidthMultiplier {
        WidthMultiplier::new(1, 8).unwrap()
    }

    #[test]
    fn final_resolutions() {
        let r = build_resnet(18, 10, eighth(), 0).unwrap();
        let a = convert_to_drn_a(&r).unwrap();
        let x = Tensor::<f32>::full(Shape::new(1, 3, 224, 224).unwrap(), 0.1);
        let fr = forward(&r, &x, Mode::Eval, &[6]).unwrap();
        let fa = forward(&a, &x, Mode::Eval, &[4, 5, 6]).unwrap();
        assert_eq!(fr.taps[&6].shape().dims(), [1, r.feature_channels(), 7, 7]);
        assert_eq!(fa.taps[&6].shape().dims(), [1, a.feature_channels(), 28, 28]);
        for l in [4, 5] {
            assert_eq!((fa.taps[&l].shape().h, fa.taps[&l].shape().w), (28, 28));
        }
        assert_eq!(fa.logits.shape().dims(), [1, 10, 1, 1]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let r = build_resnet(18, 10, eighth(), 0).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 40, 64).unwrap());
        assert!(forward(&r, &x, Mode::Eval, &[]).is_err());
        let c = build_drn_c(26, 10, eighth(), 0).unwrap();
        assert!(forward(&c, &x, Mode::Eval, &[]).is_ok());
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut m = build_drn_c(26, 5, eighth(), 0).unwrap();
        for k in [CLASSIFIER_WEIGHT, CLASSIFIER_BIAS] {
            let t = m.weights.get_mut(k).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor::<f32>(&mut rng, Shape::new(2, 3, 32, 32).unwrap());
        let out = forward(&m, &x, Mode::Eval, &[]).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_reports_running_stats() {
        let m = build_drn_c(26, 4, eighth(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor::<f32>(&mut rng, Shape::new(2, 3, 16, 16).unwrap());
        let out = forward(&m, &x, Mode::Train, &[]).unwrap();
        let n_bn = m.conv_units().len();
        assert_eq!(out.running_stats.len(), 2 * n_bn);
        assert!(forward(&m, &x, Mode::Eval, &[]).unwrap().running_stats.is_empty());
    }
}
