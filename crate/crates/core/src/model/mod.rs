//! Declarative network graphs: ResNet baselines and the DRN-A/B/C variants.

mod exec;
mod io;
mod zoo;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use exec::{
    backward, classify_head, classify_head_backward, forward, forward_trace, ExecOptions,
    ForwardOutput, Gradients, Trace,
};
pub use io::{
    graph_path, graph_text, load_graph, load_model, load_weights, parse_graph, read_weights, save_graph,
    save_model, save_weights, write_weights,
};
pub use zoo::{
    assemble, basic_level, build, build_drn_b, build_drn_c, build_resnet, convert_to_drn_a, plain_conv_level,
};

use crate::error::{Error, Result};
use crate::ops::{ConvParams, Filter, PoolParams};
use crate::tensor::{Real, Tensor};

/// Named parameters and running statistics.
pub type Weights<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchFamily {
    ResNet,
    DrnA,
    DrnB,
    DrnC,
    /// Hand-assembled fragment (analysis fixtures).
    Custom,
}

impl ArchFamily {
    pub fn is_drn(&self) -> bool {
        matches!(self, ArchFamily::DrnA | ArchFamily::DrnB | ArchFamily::DrnC)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchFamily::ResNet => "resnet",
            ArchFamily::DrnA => "drn-a",
            ArchFamily::DrnB => "drn-b",
            ArchFamily::DrnC => "drn-c",
            ArchFamily::Custom => "custom",
        }
    }
}

impl fmt::Display for ArchFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(ArchFamily::ResNet),
            "drn-a" | "drn_a" => Ok(ArchFamily::DrnA),
            "drn-b" | "drn_b" => Ok(ArchFamily::DrnB),
            "drn-c" | "drn_c" => Ok(ArchFamily::DrnC),
            "custom" => Ok(ArchFamily::Custom),
            other => Err(Error::Unsupported(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Positive rational channel multiplier, e.g. `1/8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    num: u32,
    den: u32,
}

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!(
                "width multiplier must be positive, got {num}/{den}"
            )));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Scaled channel count, rounded to the nearest multiple of 4 and at least 4.
    /// Full width is exact.
    pub fn channels(&self, base: usize) -> usize {
        if self.num == self.den {
            return base;
        }
        let scaled = base as f64 * self.as_f64();
        ((scaled / 4.0).round() as usize * 4).max(4)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid width multiplier `{s}`"));
        let s = s.trim();
        if let Some((a, b)) = s.split_once('/') {
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            return Self::new(a, b);
        }
        if let Ok(v) = s.parse::<u32>() {
            return Self::new(v, 1);
        }
        let v: f64 = s.parse().map_err(|_| bad())?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(bad());
        }
        Self::new((v * 1000.0).round() as u32, 1000)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Single Conv-BN-ReLU group with a `kernel × kernel` filter.
    Conv { kernel: usize },
    /// Max pooling with a `window × window` window and `pad` cells of -inf border.
    MaxPool { window: usize, pad: usize },
    /// Two 3×3 Conv-BN groups.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand.
    Bottleneck,
}

impl BlockKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockKind::Conv { .. } => "conv",
            BlockKind::MaxPool { .. } => "maxpool",
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }
}

pub const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub channels: usize,
    pub stride: usize,
    /// Dilation of every 3×3 conv after the first.
    pub dilation: usize,
    /// Dilation of the block's first spatial conv.
    pub entry_dilation: usize,
    pub has_residual: bool,
    /// 1×1 Conv-BN on the skip path.
    pub projection: bool,
}

/// One Conv-BN pair and the weight names it reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvUnit {
    pub conv: String,
    pub bn: String,
    pub params: ConvParams,
}

impl ConvUnit {
    fn new(prefix: &str, conv: &str, bn: &str, params: ConvParams) -> Self {
        Self {
            conv: format!("{prefix}.{conv}"),
            bn: format!("{prefix}.{bn}"),
            params,
        }
    }
}

impl BlockSpec {
    /// Main-path Conv-BN units in execution order. Empty for pooling blocks.
    pub fn main_units(&self, prefix: &str) -> Vec<ConvUnit> {
        let (i, o, s) = (self.in_channels, self.channels, self.stride);
        match self.kind {
            BlockKind::Conv { kernel } => vec![ConvUnit::new(
                prefix,
                "conv1",
                "bn1",
                ConvParams::same(i, o, kernel, s, self.entry_dilation),
            )],
            BlockKind::MaxPool { .. } => Vec::new(),
            BlockKind::Basic => vec![
                ConvUnit::new(prefix, "conv1", "bn1", ConvParams::same(i, o, 3, s, self.entry_dilation)),
                ConvUnit::new(prefix, "conv2", "bn2", ConvParams::same(o, o, 3, 1, self.dilation)),
            ],
            BlockKind::Bottleneck => {
                let width = o / BOTTLENECK_EXPANSION;
                vec![
                    ConvUnit::new(prefix, "conv1", "bn1", ConvParams::same(i, width, 1, 1, 1)),
                    ConvUnit::new(
                        prefix,
                        "conv2",
                        "bn2",
                        ConvParams::same(width, width, 3, s, self.entry_dilation),
                    ),
                    ConvUnit::new(prefix, "conv3", "bn3", ConvParams::same(width, o, 1, 1, 1)),
                ]
            }
        }
    }

    pub fn projection_unit(&self, prefix: &str) -> Option<ConvUnit> {
        (self.has_residual && self.projection).then(|| {
            ConvUnit::new(
                prefix,
                "proj",
                "proj_bn",
                ConvParams::same(self.in_channels, self.channels, 1, self.stride, 1),
            )
        })
    }

    pub fn pool_params(&self) -> Option<PoolParams> {
        match self.kind {
            BlockKind::MaxPool { window, pad } => Some(PoolParams::new(window, self.stride, pad)),
            _ => None,
        }
    }

    /// Whether the block's output passes through a final rectifier after the
    /// (optional) residual sum.
    pub fn ends_with_relu(&self) -> bool {
        !matches!(self.kind, BlockKind::MaxPool { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    /// 1-based level number.
    pub index: usize,
    pub blocks: Vec<BlockSpec>,
    pub dilation: usize,
    pub downsample: bool,
}

impl LevelSpec {
    pub fn block_prefix(&self, block: usize) -> String {
        format!("level{}.block{}", self.index, block + 1)
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels)
    }

    pub fn stride(&self) -> usize {
        self.blocks.iter().map(|b| b.stride).product()
    }

    pub fn kind(&self) -> BlockKind {
        self.blocks[0].kind
    }

    pub fn has_residual(&self) -> bool {
        self.blocks.iter().any(|b| b.has_residual)
    }
}

/// A network description plus its bound weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T: Real = f32> {
    pub family: ArchFamily,
    pub depth: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub width: WidthMultiplier,
    pub levels: Vec<LevelSpec>,
    pub weights: Weights<T>,
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Whether a weight record is a learnable parameter (running statistics are not).
pub fn is_learnable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

impl<T: Real> ModelGraph<T> {
    pub fn name(&self) -> String {
        format!("{}-{}", self.family, self.depth)
    }

    pub fn level(&self, index: usize) -> Result<&LevelSpec> {
        self.levels
            .iter()
            .find(|l| l.index == index)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no level {index}", self.name())))
    }

    pub fn final_level(&self) -> usize {
        self.levels.last().map_or(0, |l| l.index)
    }

    pub fn feature_channels(&self) -> usize {
        self.levels.last().map_or(self.in_channels, |l| l.out_channels())
    }

    /// Input resolution divided by final feature resolution.
    pub fn output_stride(&self) -> usize {
        self.levels.iter().map(|l| l.stride()).product()
    }

    /// Number of learnable scalars (convolutions, normalization affine terms, classifier).
    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .filter(|(k, _)| is_learnable(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Weighted convolution layers on the main path plus the classifier.
    pub fn weighted_layers(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.blocks.iter())
            .map(|b| b.main_units("").len())
            .sum::<usize>()
            + 1
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights.get(name).ok_or_else(|| Error::WeightRecord {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn classifier(&self) -> Result<Filter<T>> {
        let w = self.param(CLASSIFIER_WEIGHT)?.clone();
        let b = self.weights.get(CLASSIFIER_BIAS).map(|t| t.data().to_vec());
        Ok(Filter::new(w, b))
    }

    pub fn has_maxpool(&self) -> bool {
        self.levels
            .iter()
            .flat_map(|l| &l.blocks)
            .any(|b| matches!(b.kind, BlockKind::MaxPool { .. }))
    }

    pub fn level_dilations(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dilation).collect()
    }

    /// Every Conv-BN unit in the graph with its owning level.
    pub fn conv_units(&self) -> Vec<(usize, ConvUnit)> {
        let mut out = Vec::new();
        for level in &self.levels {
            for (bi, block) in level.blocks.iter().enumerate() {
                let prefix = level.block_prefix(bi);
                for u in block.main_units(&prefix).into_iter().chain(block.projection_unit(&prefix)) {
                    out.push((level.index, u));
                }
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            family: self.family,
            depth: self.depth,
            n_classes: self.n_classes,
            in_channels: self.in_channels,
            width: self.width,
            levels: self.levels.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every expected record exists with the right shape.
    pub fn validate_weights(&self) -> Result<()> {
        for (name, shape) in expected_records(self) {
            let t = self.param(&name)?;
            if t.shape() != shape {
                return Err(Error::WeightRecord {
                    name,
                    reason: format!("expected shape {shape}, found {}", t.shape()),
                });
            }
        }
        Ok(())
    }
}

/// `(name, shape)` of every record a graph's weights must contain, in name order.
pub fn expected_records<T: Real>(model: &ModelGraph<T>) -> Vec<(String, crate::tensor::Shape)> {
    use crate::tensor::Shape;
    let mut out = BTreeMap::new();
    for (_, unit) in model.conv_units() {
        out.insert(format!("{}.weight", unit.conv), unit.params.weight_shape().expect("valid conv"));
        let c = unit.params.out_channels;
        for stat in ["gamma", "beta", "running_mean", "running_var"] {
            out.insert(format!("{}.{stat}", unit.bn), Shape::new(1, c, 1, 1).expect("valid bn"));
        }
    }
    let feat = model.feature_channels();
    out.insert(
        CLASSIFIER_WEIGHT.to_string(),
        Shape::new(model.n_classes, feat, 1, 1).expect("valid classifier"),
    );
    out.insert(CLASSIFIER_BIAS.to_string(), Shape::new(1, model.n_classes, 1, 1).expect("valid bias"));
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_parsing_and_rounding() {
        let w: WidthMultiplier = "1/8".parse().unwrap();
        assert_eq!(w.to_string(), "1/8");
        assert_eq!("0.125".parse::<WidthMultiplier>().unwrap(), w);
        assert_eq!("2/16".parse::<WidthMultiplier>().unwrap(), w);
        assert_eq!(w.channels(64), 8);
        assert_eq!(w.channels(512), 64);
        assert_eq!(w.channels(16), 4);
        assert_eq!(w.channels(24), 4);
        assert_eq!(WidthMultiplier::FULL.channels(16), 16);
        assert!("0".parse::<WidthMultiplier>().is_err());
        assert!("x".parse::<WidthMultiplier>().is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for f in [ArchFamily::ResNet, ArchFamily::DrnA, ArchFamily::DrnB, ArchFamily::DrnC] {
            assert_eq!(f.as_str().parse::<ArchFamily>().unwrap(), f);
        }
        assert!("vgg".parse::<ArchFamily>().is_err());
    }
}
