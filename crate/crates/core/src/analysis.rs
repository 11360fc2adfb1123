//! Receptive fields and gridding diagnostics.

use serde::Serialize;

use crate::cam::class_activation_maps;
use crate::error::{Error, Result};
use crate::model::{
    assemble, backward, forward_trace, plain_conv_level, BlockKind, BlockSpec, ExecOptions, ModelGraph,
};
use crate::tensor::{Shape, Tensor};

/// Receptive field of one level's units, in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RfSpec {
    pub rf_h: usize,
    pub rf_w: usize,
    /// Input pixels between horizontally adjacent units.
    pub jump: usize,
    /// Input coordinate `(h, w)` of unit (0, 0)'s field center.
    pub anchor: (i64, i64),
}

/// `(kernel, stride, dilation, pad)` of every layer on a block's main path.
fn main_path(block: &BlockSpec) -> Vec<(usize, usize, usize, usize)> {
    if let BlockKind::MaxPool { window, pad } = block.kind {
        return vec![(window, block.stride, 1, pad)];
    }
    block
        .main_units("")
        .iter()
        .map(|u| (u.params.kernel_h, u.params.stride, u.params.dilation, u.params.pad_h))
        .collect()
}

/// Composes `rf' = rf + d(k-1)·jump`, `jump' = jump·s` over every layer up
/// to and including `level`. Skip paths never widen the field, so only the
/// main path is walked.
pub fn analytic_rf<T: crate::Real>(model: &ModelGraph<T>, level: usize) -> Result<RfSpec> {
    model.level(level)?;
    let (mut rf, mut jump, mut anchor) = (1i64, 1i64, 0i64);
    for l in model.levels.iter().take_while(|l| l.index <= level) {
        for block in &l.blocks {
            for (k, s, d, pad) in main_path(block) {
                let span = (d * (k - 1)) as i64;
                anchor += (span / 2 - pad as i64) * jump;
                rf += span * jump;
                jump *= s as i64;
            }
        }
    }
    Ok(RfSpec {
        rf_h: rf as usize,
        rf_w: rf as usize,
        jump: jump as usize,
        anchor: (anchor, anchor),
    })
}

/// f64 copy of `model` with every conv filled with `1/fan_in`; normalization
/// and rectifiers are bypassed by the linear execution mode.
pub fn linear_probe(model: &ModelGraph) -> ModelGraph<f64> {
    let mut probe: ModelGraph<f64> = model.cast();
    for (_, unit) in model.conv_units() {
        let w = probe.weights.get_mut(&format!("{}.weight", unit.conv)).expect("conv weight");
        let s = w.shape();
        let v = 1.0 / (s.c * s.h * s.w) as f64;
        w.data_mut().iter_mut().for_each(|x| *x = v);
    }
    probe
}

fn support_box(grad: &Tensor<f64>) -> Option<(usize, usize, usize, usize)> {
    let s = grad.shape();
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for h in 0..s.h {
        for w in 0..s.w {
            if (0..s.c).all(|c| grad.get(0, c, h, w) == 0.0) {
                continue;
            }
            b = Some(match b {
                None => (h, w, h, w),
                Some((h1, w1, h2, w2)) => (h1.min(h), w1.min(w), h2.max(h), w2.max(w)),
            });
        }
    }
    b
}

/// Square input extent large enough to hold the whole field of `unit` and
/// its right neighbour, rounded up to the model's output stride.
pub fn probe_extent<T: crate::Real>(model: &ModelGraph<T>, level: usize, unit: (usize, usize)) -> Result<usize> {
    let a = analytic_rf(model, level)?;
    let far = unit.0.max(unit.1 + 1) as i64 * a.jump as i64 + a.anchor.0.max(0) + a.rf_h as i64;
    let os = model.output_stride() as i64;
    Ok(((far + os) / os * os) as usize)
}

/// A unit whose field lies inside the input when probed at [`probe_extent`].
pub fn interior_unit<T: crate::Real>(model: &ModelGraph<T>, level: usize) -> Result<(usize, usize)> {
    let a = analytic_rf(model, level)?;
    let half = a.rf_h as i64 / 2 - a.anchor.0;
    let u = (half.max(0) as usize).div_ceil(a.jump) + 1;
    Ok((u, u))
}

/// Measures the field as the bounding box of the input-gradient support of
/// `unit` (row, column) in a linear probe of the network. The jump is the
/// offset between the fields of `unit` and its right neighbour.
pub fn empirical_rf(model: &ModelGraph, level: usize, unit: (usize, usize)) -> Result<RfSpec> {
    let extent = probe_extent(model, level, unit)?;
    let probe = linear_probe(model);
    let x = Tensor::<f64>::zeros(Shape::new(1, model.in_channels, extent, extent)?);
    let trace = forward_trace(&probe, &x, &ExecOptions::linear_probe().until(level), &[])?;
    let fs = trace.features.shape();
    if unit.0 >= fs.h || unit.1 + 1 >= fs.w {
        return Err(Error::InvalidArgument(format!(
            "unit {unit:?} outside the {}x{} level-{level} map",
            fs.h, fs.w
        )));
    }
    let field = |(uh, uw): (usize, usize)| -> Result<(usize, usize, usize, usize)> {
        let mut g = Tensor::zeros(fs);
        g.set(0, 0, uh, uw, 1.0);
        let grads = backward(&probe, &trace, &g)?;
        support_box(&grads.input)
            .ok_or_else(|| Error::InvalidArgument(format!("unit {unit:?} has an all-zero input gradient")))
    };
    let (h1, w1, h2, w2) = field(unit)?;
    let (_, nw1, _, _) = field((unit.0, unit.1 + 1))?;
    let jump = nw1 - w1;
    let center = |lo: usize, hi: usize| (lo + hi) as i64 / 2;
    Ok(RfSpec {
        rf_h: h2 - h1 + 1,
        rf_w: w2 - w1 + 1,
        jump,
        anchor: (
            center(h1, h2) - (unit.0 * jump) as i64,
            center(w1, w2) - (unit.1 * jump) as i64,
        ),
    })
}

/// Single-channel stack of 3×3 all-ones convolutions with the given dilations.
pub fn dilated_stack(dilations: &[usize]) -> Result<ModelGraph<f64>> {
    let levels = dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| plain_conv_level(i + 1, 1, 1, 3, 1, d))
        .collect();
    let mut m: ModelGraph<f64> = assemble(levels, 1, 1, 0)?.cast();
    for (name, w) in m.weights.iter_mut() {
        if name.ends_with(".weight") && name.starts_with("level") {
            w.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
    }
    Ok(m)
}

/// Output of `fragment` (run linearly) for a one-hot input at `impulse`
/// `(row, column)` in channel 0 of an `extent = (h, w)` map.
pub fn impulse_response(
    fragment: &ModelGraph<f64>,
    impulse: (usize, usize),
    extent: (usize, usize),
) -> Result<Tensor<f64>> {
    let (h, w) = extent;
    if impulse.0 >= h || impulse.1 >= w {
        return Err(Error::InvalidArgument(format!("impulse {impulse:?} outside {h}x{w}")));
    }
    let mut x = Tensor::zeros(Shape::new(1, fragment.in_channels, h, w)?);
    x.set(0, 0, impulse.0, impulse.1, 1.0);
    Ok(forward_trace(fragment, &x, &ExecOptions::linear_probe(), &[])?.features)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GriddingReport {
    /// Share of energy on the lattice, in [0, 1].
    pub ratio: f64,
    pub period: usize,
    pub total_energy: f64,
    /// Lattice origin `(h, w)`.
    pub phase: (usize, usize),
}

/// Per-cell energy summed over batch and channels.
fn energy_map<T: crate::Real>(map: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let s = map.shape();
    let mut e = vec![0.0; s.plane()];
    for (i, v) in map.data().iter().enumerate() {
        let v = v.to_f64_lossy();
        e[i % s.plane()] += v * v;
    }
    (s.h, s.w, e)
}

/// Fraction of squared magnitude on cells congruent to `phase` modulo
/// `period`. Without a phase, the lattice is anchored at the most energetic
/// cell (lowest row, then column, on ties). An all-zero map reports 0.
pub fn gridding_energy<T: crate::Real>(
    map: &Tensor<T>,
    period: usize,
    phase: Option<(usize, usize)>,
) -> Result<GriddingReport> {
    if period == 0 {
        return Err(Error::InvalidArgument("period must be >= 1".into()));
    }
    let (h, w, e) = energy_map(map);
    let phase = phase.unwrap_or_else(|| {
        let mut best = 0;
        for (i, &v) in e.iter().enumerate() {
            if v > e[best] {
                best = i;
            }
        }
        (best / w, best % w)
    });
    let total: f64 = e.iter().sum();
    let on: f64 = (0..h)
        .filter(|y| y % period == phase.0 % period)
        .flat_map(|y| {
            (0..w)
                .filter(|x| x % period == phase.1 % period)
                .map(move |x| (y, x))
        })
        .map(|(y, x)| e[y * w + x])
        .sum();
    Ok(GriddingReport {
        ratio: if total > 0.0 { on / total } else { 0.0 },
        period,
        total_energy: total,
        phase,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelGridReport {
    pub model: String,
    pub level: usize,
    pub class: usize,
    pub period: usize,
    pub ratio: f64,
    pub total_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RfReport {
    pub model: String,
    pub level: usize,
    pub rf: [usize; 2],
    pub jump: usize,
}

impl RfReport {
    pub fn new(model: &str, level: usize, rf: &RfSpec) -> Self {
        Self {
            model: model.to_string(),
            level,
            rf: [rf.rf_h, rf.rf_w],
            jump: rf.jump,
        }
    }
}

/// Lattice energy at period 4 of each model's final-level activation map for
/// its top-scoring class. A diagnostic: nothing is asserted about the values.
pub fn degridding_comparison(models: &[(String, &ModelGraph)], input: &Tensor) -> Result<Vec<ModelGridReport>> {
    const PERIOD: usize = 4;
    models
        .iter()
        .map(|(name, m)| {
            let maps = class_activation_maps(m, input, false)?;
            let s = maps.maps.shape();
            let class = (0..s.c)
                .max_by(|&a, &b| {
                    let mean = |c: usize| maps.maps.plane(0, c).iter().map(|&v| v as f64).sum::<f64>();
                    mean(a).total_cmp(&mean(b)).then(b.cmp(&a))
                })
                .unwrap_or(0);
            let plane = Tensor::from_vec(Shape::new(1, 1, s.h, s.w)?, maps.maps.plane(0, class).to_vec())?;
            // remove the mean so a constant offset does not swamp the lattice structure
            let mean = plane.sum() / plane.len() as f32;
            let centered = plane.map(|v| v - mean);
            let r = gridding_energy(&centered, PERIOD, None)?;
            Ok(ModelGridReport {
                model: name.clone(),
                level: m.final_level(),
                class,
                period: PERIOD,
                ratio: r.ratio,
                total_energy: r.total_energy,
            })
        })
        .collect()
}
