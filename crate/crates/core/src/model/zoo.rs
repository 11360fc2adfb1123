//! Architecture builders.
//!
//! Level 1 is the stem convolution, level 2 the max pool (ResNet/DRN-A) or
//! its strided residual replacement (DRN-B/C), and levels 3..6 hold the
//! residual groups G2..G5. DRN-B/C append levels 7 and 8.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{
    ArchFamily, BlockKind, BlockSpec, LevelSpec, ModelGraph, WidthMultiplier, Weights,
    BOTTLENECK_EXPANSION, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT,
};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{Shape, Tensor};

const IMAGE_CHANNELS: usize = 3;

/// Builds any supported architecture; `drn-a` is produced by converting the
/// ResNet of the same depth.
pub fn build(
    family: ArchFamily,
    depth: usize,
    n_classes: usize,
    width: WidthMultiplier,
    seed: u64,
) -> Result<ModelGraph> {
    match family {
        ArchFamily::ResNet => build_resnet(depth, n_classes, width, seed),
        ArchFamily::DrnA => convert_to_drn_a(&build_resnet(depth, n_classes, width, seed)?),
        ArchFamily::DrnB => build_drn_b(depth, n_classes, width, seed),
        ArchFamily::DrnC => build_drn_c(depth, n_classes, width, seed),
        ArchFamily::Custom => Err(Error::Unsupported(
            "custom graphs are assembled by hand, not built".into(),
        )),
    }
}

fn check_classes(n_classes: usize) -> Result<()> {
    if n_classes == 0 {
        return Err(Error::InvalidArgument("n_classes must be >= 1".into()));
    }
    Ok(())
}

fn residual_level(
    index: usize,
    kind: BlockKind,
    count: usize,
    in_channels: usize,
    channels: usize,
    stride: usize,
    entry_dilation: usize,
    dilation: usize,
    has_residual: bool,
) -> LevelSpec {
    let blocks = (0..count)
        .map(|i| {
            let first = i == 0;
            let (inc, s) = if first { (in_channels, stride) } else { (channels, 1) };
            BlockSpec {
                kind,
                in_channels: inc,
                channels,
                stride: s,
                dilation,
                entry_dilation: if first { entry_dilation } else { dilation },
                has_residual,
                projection: has_residual && (s != 1 || inc != channels),
            }
        })
        .collect();
    LevelSpec {
        index,
        blocks,
        dilation,
        downsample: stride > 1,
    }
}

fn conv_level(index: usize, in_channels: usize, channels: usize, kernel: usize, stride: usize) -> LevelSpec {
    LevelSpec {
        index,
        blocks: vec![BlockSpec {
            kind: BlockKind::Conv { kernel },
            in_channels,
            channels,
            stride,
            dilation: 1,
            entry_dilation: 1,
            has_residual: false,
            projection: false,
        }],
        dilation: 1,
        downsample: stride > 1,
    }
}

/// Standard residual network with output stride 32.
pub fn build_resnet(
    depth: usize,
    n_classes: usize,
    width: WidthMultiplier,
    seed: u64,
) -> Result<ModelGraph> {
    check_classes(n_classes)?;
    let (kind, counts) = match depth {
        18 => (BlockKind::Basic, [2, 2, 2, 2]),
        34 => (BlockKind::Basic, [3, 4, 6, 3]),
        50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
        _ => {
            return Err(Error::Unsupported(format!(
                "resnet depth {depth} (supported: 18, 34, 50)"
            )))
        }
    };
    let stem = width.channels(64);
    let mut levels = vec![
        conv_level(1, IMAGE_CHANNELS, stem, 7, 2),
        LevelSpec {
            index: 2,
            blocks: vec![BlockSpec {
                kind: BlockKind::MaxPool { window: 3, pad: 1 },
                in_channels: stem,
                channels: stem,
                stride: 2,
                dilation: 1,
                entry_dilation: 1,
                has_residual: false,
                projection: false,
            }],
            dilation: 1,
            downsample: true,
        },
    ];
    let mut in_ch = stem;
    for (g, (&count, base)) in counts.iter().zip([64, 128, 256, 512]).enumerate() {
        let planes = width.channels(base);
        let out = if kind == BlockKind::Bottleneck {
            planes * BOTTLENECK_EXPANSION
        } else {
            planes
        };
        let stride = if g == 0 { 1 } else { 2 };
        levels.push(residual_level(g + 3, kind, count, in_ch, out, stride, 1, 1, true));
        in_ch = out;
    }
    finish(ArchFamily::ResNet, depth, n_classes, width, levels, seed)
}

/// Removes striding from G4_1 and G5_1 and dilates the following convolutions
/// by 2 (G4) and 4 (G5). Weights are carried over unchanged.
pub fn convert_to_drn_a<T: crate::tensor::Real>(model: &ModelGraph<T>) -> Result<ModelGraph<T>> {
    if model.family != ArchFamily::ResNet {
        return Err(Error::InvalidArgument(format!(
            "convert_to_drn_a expects a resnet, got {}",
            model.family
        )));
    }
    let mut out = model.clone();
    out.family = ArchFamily::DrnA;
    for level in &mut out.levels {
        let (entry, dilation) = match level.index {
            5 => (1, 2),
            6 => (2, 4),
            _ => continue,
        };
        level.dilation = dilation;
        level.downsample = false;
        for (i, block) in level.blocks.iter_mut().enumerate() {
            block.stride = 1;
            block.dilation = dilation;
            block.entry_dilation = if i == 0 { entry } else { dilation };
        }
    }
    Ok(out)
}

fn build_degridded(
    family: ArchFamily,
    depth: usize,
    n_classes: usize,
    width: WidthMultiplier,
    seed: u64,
) -> Result<ModelGraph> {
    check_classes(n_classes)?;
    let counts = match (family, depth) {
        (_, 26) => [1, 1, 2, 2, 2, 2, 1, 1],
        (ArchFamily::DrnC, 42) => [1, 1, 3, 4, 6, 3, 1, 1],
        _ => {
            let supported = if family == ArchFamily::DrnC { "26, 42" } else { "26" };
            return Err(Error::Unsupported(format!(
                "{family} depth {depth} (supported: {supported})"
            )));
        }
    };
    let ch: Vec<usize> = [16, 32, 64, 128, 256, 512, 512, 512]
        .iter()
        .map(|&c| width.channels(c))
        .collect();
    let tail_residual = family == ArchFamily::DrnB;
    let basic = BlockKind::Basic;
    let levels = vec![
        conv_level(1, IMAGE_CHANNELS, ch[0], 7, 1),
        residual_level(2, basic, counts[1], ch[0], ch[1], 2, 1, 1, true),
        residual_level(3, basic, counts[2], ch[1], ch[2], 2, 1, 1, true),
        residual_level(4, basic, counts[3], ch[2], ch[3], 2, 1, 1, true),
        residual_level(5, basic, counts[4], ch[3], ch[4], 1, 1, 2, true),
        residual_level(6, basic, counts[5], ch[4], ch[5], 1, 2, 4, true),
        residual_level(7, basic, counts[6], ch[5], ch[6], 1, 2, 2, tail_residual),
        residual_level(8, basic, counts[7], ch[6], ch[7], 1, 1, 1, tail_residual),
    ];
    finish(family, depth, n_classes, width, levels, seed)
}

/// DRN-B: max pooling replaced by strided residual blocks, plus 2- then
/// 1-dilated residual levels at the end.
pub fn build_drn_b(depth: usize, n_classes: usize, width: WidthMultiplier, seed: u64) -> Result<ModelGraph> {
    build_degridded(ArchFamily::DrnB, depth, n_classes, width, seed)
}

/// DRN-C: DRN-B without residual connections in levels 7 and 8.
pub fn build_drn_c(depth: usize, n_classes: usize, width: WidthMultiplier, seed: u64) -> Result<ModelGraph> {
    build_degridded(ArchFamily::DrnC, depth, n_classes, width, seed)
}

/// Wraps hand-written levels (analysis fixtures, fragments) as a custom graph
/// with initialized weights.
pub fn assemble(levels: Vec<LevelSpec>, in_channels: usize, n_classes: usize, seed: u64) -> Result<ModelGraph> {
    check_classes(n_classes)?;
    if levels.is_empty() || levels.iter().any(|l| l.blocks.is_empty()) {
        return Err(Error::InvalidArgument("fragment needs at least one block per level".into()));
    }
    let depth = levels.iter().flat_map(|l| &l.blocks).map(|b| b.main_units("").len()).sum();
    let mut model = ModelGraph {
        family: ArchFamily::Custom,
        depth,
        n_classes,
        in_channels,
        width: WidthMultiplier::FULL,
        levels,
        weights: Weights::new(),
    };
    model.weights = init_weights(&model, seed)?;
    Ok(model)
}

/// Single-block level of one plain `kernel × kernel` conv.
pub fn plain_conv_level(
    index: usize,
    in_channels: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) -> LevelSpec {
    let mut level = conv_level(index, in_channels, channels, kernel, stride);
    level.dilation = dilation;
    level.blocks[0].dilation = dilation;
    level.blocks[0].entry_dilation = dilation;
    level
}

/// Residual level of basic blocks with uniform dilation.
pub fn basic_level(
    index: usize,
    blocks: usize,
    in_channels: usize,
    channels: usize,
    stride: usize,
    dilation: usize,
    has_residual: bool,
) -> LevelSpec {
    residual_level(index, BlockKind::Basic, blocks, in_channels, channels, stride, dilation, dilation, has_residual)
}

fn finish(
    family: ArchFamily,
    depth: usize,
    n_classes: usize,
    width: WidthMultiplier,
    levels: Vec<LevelSpec>,
    seed: u64,
) -> Result<ModelGraph> {
    let mut model = ModelGraph {
        family,
        depth,
        n_classes,
        in_channels: IMAGE_CHANNELS,
        width,
        levels,
        weights: Weights::new(),
    };
    model.weights = init_weights(&model, seed)?;
    Ok(model)
}

/// He (fan-in) Gaussian convolutions, unit-gamma/zero-beta normalization,
/// zero biases.
pub(crate) fn init_weights(model: &ModelGraph, seed: u64) -> Result<Weights> {
    let mut rng = SeedStream::new(seed).rng("weights");
    let mut weights = Weights::new();
    let he = |shape: Shape, rng: &mut _| -> Result<Tensor> {
        let fan_in = (shape.c * shape.h * shape.w) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data = (0..shape.numel()).map(|_| sample(&normal, rng)).collect();
        Tensor::from_vec(shape, data)
    };
    for (_, unit) in model.conv_units() {
        let shape = unit.params.weight_shape()?;
        weights.insert(format!("{}.weight", unit.conv), he(shape, &mut rng)?);
        let c = unit.params.out_channels;
        let bn = &unit.bn;
        weights.insert(format!("{bn}.gamma"), Tensor::vector(vec![1.0; c])?);
        weights.insert(format!("{bn}.beta"), Tensor::vector(vec![0.0; c])?);
        weights.insert(format!("{bn}.running_mean"), Tensor::vector(vec![0.0; c])?);
        weights.insert(format!("{bn}.running_var"), Tensor::vector(vec![1.0; c])?);
    }
    let feat = model.feature_channels();
    weights.insert(
        CLASSIFIER_WEIGHT.to_string(),
        he(Shape::new(model.n_classes, feat, 1, 1)?, &mut rng)?,
    );
    weights.insert(CLASSIFIER_BIAS.to_string(), Tensor::vector(vec![0.0; model.n_classes])?);
    Ok(weights)
}

fn sample(normal: &Normal<f64>, rng: &mut impl Rng) -> f32 {
    normal.sample(rng) as f32
}

impl ModelGraph {
    /// Replaces the 1×1 classifier with a freshly initialized one for `n_classes`.
    pub fn reset_classifier(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        check_classes(n_classes)?;
        let feat = self.feature_channels();
        let mut rng = SeedStream::new(seed).rng("classifier");
        let normal = Normal::new(0.0, (2.0 / feat as f64).sqrt()).expect("positive std");
        let shape = Shape::new(n_classes, feat, 1, 1)?;
        let data = (0..shape.numel()).map(|_| sample(&normal, &mut rng)).collect();
        self.weights.insert(CLASSIFIER_WEIGHT.to_string(), Tensor::from_vec(shape, data)?);
        self.weights
            .insert(CLASSIFIER_BIAS.to_string(), Tensor::vector(vec![0.0; n_classes])?);
        self.n_classes = n_classes;
        Ok(())
    }
}
