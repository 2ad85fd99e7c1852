//! Forward and backward passes of the target-aware detection head.
//!
//! Pipeline for one query feature map `F` and a registered target:
//!
//! 1. `F_mod = (T_loc * F) . F`: the 1x1 target feature is correlated with
//!    every spatial position and the result gates `F` channel-wise.
//! 2. A stack of 3x3 convolutions reduces `F_mod` to one score channel.
//! 3. A softmax over all positions gives a distribution whose expected grid
//!    coordinate is the target center.
//! 4. The feature sampled (bilinearly) at the center feeds an MLP that
//!    predicts a center offset and the box size.
//! 5. ROIAlign pools the predicted box to `S x S`, and its dot product with
//!    `T_cls` through a sigmoid is the box confidence.
//!
//! Every differentiable step has a matching `*_backward` that returns input
//! gradients for a given upstream gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{FeatureMap, PooledFeature, ScoreMap};
use super::KernelError;
use crate::geometry::BBox;

/// Channel schedule of the score module.
pub const DEFAULT_SCORE_SCHEDULE: [usize; 5] = [256, 128, 64, 32, 1];
/// Hidden width of the box refinement MLP.
pub const DEFAULT_REFINE_HIDDEN: usize = 256;
/// Sub-samples per bin axis in [`roi_align`].
pub const ROI_SAMPLING_RATIO: usize = 2;
/// Default `T_cls` resolution.
pub const DEFAULT_CLS_SIZE: usize = 5;

/// Coordinates this close outside the grid are clamped instead of rejected.
const COORD_SLACK: f64 = 1e-9;

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// modulation

/// `out[c, p] = (sum_c' t_loc[c'] f[c', p]) * f[c, p]`.
pub fn modulate(f: &FeatureMap, t_loc: &[f64]) -> Result<FeatureMap, KernelError> {
    if t_loc.len() != f.channels() {
        return Err(KernelError::Shape(format!(
            "t_loc has {} channels, feature map has {}",
            t_loc.len(),
            f.channels()
        )));
    }
    let gate = correlation(f, t_loc);
    let plane = f.height() * f.width();
    let mut out = f.clone();
    for c_plane in out.data_mut().chunks_mut(plane) {
        for (v, g) in c_plane.iter_mut().zip(&gate) {
            *v *= g;
        }
    }
    Ok(out)
}

/// Per-position dot product of `t_loc` with the feature column.
fn correlation(f: &FeatureMap, t_loc: &[f64]) -> Vec<f64> {
    let plane = f.height() * f.width();
    let mut gate = vec![0.0; plane];
    for (c, &t) in t_loc.iter().enumerate() {
        let src = &f.data()[c * plane..(c + 1) * plane];
        for (g, v) in gate.iter_mut().zip(src) {
            *g += t * v;
        }
    }
    gate
}

/// Gradients of [`modulate`] with respect to `f` and `t_loc`.
pub fn modulate_backward(
    f: &FeatureMap,
    t_loc: &[f64],
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>), KernelError> {
    if t_loc.len() != f.channels() || !f.same_shape(grad_out) {
        return Err(KernelError::Shape("modulate_backward operand shapes".into()));
    }
    let plane = f.height() * f.width();
    let gate = correlation(f, t_loc);
    // r[p] = sum_c g[c,p] f[c,p]
    let mut r = vec![0.0; plane];
    for c in 0..f.channels() {
        let fs = &f.data()[c * plane..(c + 1) * plane];
        let gs = &grad_out.data()[c * plane..(c + 1) * plane];
        for p in 0..plane {
            r[p] += gs[p] * fs[p];
        }
    }
    let mut grad_f = vec![0.0; f.data().len()];
    let mut grad_t = vec![0.0; t_loc.len()];
    for c in 0..f.channels() {
        let fs = &f.data()[c * plane..(c + 1) * plane];
        let gs = &grad_out.data()[c * plane..(c + 1) * plane];
        let dst = &mut grad_f[c * plane..(c + 1) * plane];
        for p in 0..plane {
            dst[p] = gs[p] * gate[p] + t_loc[c] * r[p];
            grad_t[c] += r[p] * fs[p];
        }
    }
    Ok((f.with_data(grad_f)?, grad_t))
}

// ---------------------------------------------------------------------------
// score module

/// 3x3 convolution with zero padding 1 and stride 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv3x3 {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    /// Uniform weights in `[-scale, scale]`.
    pub fn random(in_channels: usize, out_channels: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut layer = Conv3x3::zeros(in_channels, out_channels);
        for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        layer
    }

    fn check(&self) -> Result<(), KernelError> {
        if self.weight.len() != self.out_channels * self.in_channels * 9 || self.bias.len() != self.out_channels {
            return Err(KernelError::Shape(format!(
                "conv {}->{} parameter sizes",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap, KernelError> {
        if input.channels() != self.in_channels {
            return Err(KernelError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let plane = h * w;
        let mut out = vec![0.0; self.out_channels * plane];
        for o in 0..self.out_channels {
            let dst = &mut out[o * plane..(o + 1) * plane];
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input.data()[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // output (y, x) reads input (y + ky - 1, x + kx - 1)
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let srow = &src[sy * w..(sy + 1) * w];
                            for x in x_lo..x_hi {
                                drow[x] += wv * srow[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        Ok(FeatureMap::from_fn(self.out_channels, h, w, |c, y, x| {
            out[(c * h + y) * w + x]
        }))
    }

    /// Gradient with respect to the layer input.
    pub fn backward_input(&self, grad_out: &FeatureMap) -> FeatureMap {
        let (h, w) = (grad_out.height(), grad_out.width());
        let plane = h * w;
        let mut grad = vec![0.0; self.in_channels * plane];
        for o in 0..self.out_channels {
            let g = &grad_out.data()[o * plane..(o + 1) * plane];
            for i in 0..self.in_channels {
                let dst = &mut grad[i * plane..(i + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for y in y_lo..y_hi {
                            let sy = y + ky - 1;
                            for x in x_lo..x_hi {
                                dst[sy * w + x + kx - 1] += wv * g[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::from_fn(self.in_channels, h, w, |c, y, x| grad[(c * h + y) * w + x])
    }
}

/// Convolution stack reducing a feature map to one score channel, ReLU
/// between layers and none after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHead {
    layers: Vec<Conv3x3>,
}

impl ScoreHead {
    pub fn from_layers(layers: Vec<Conv3x3>) -> Result<Self, KernelError> {
        if layers.is_empty() {
            return Err(KernelError::Shape("score head needs at least one layer".into()));
        }
        for l in &layers {
            l.check()?;
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(KernelError::Shape(format!(
                    "score head layers {}->{} and {}->{} do not chain",
                    pair[0].in_channels, pair[0].out_channels, pair[1].in_channels, pair[1].out_channels
                )));
            }
        }
        if layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(KernelError::Shape("score head must end in one channel".into()));
        }
        Ok(ScoreHead { layers })
    }

    /// All-zero head for a channel schedule such as `[256, 128, 64, 32, 1]`.
    pub fn zeros(schedule: &[usize]) -> Result<Self, KernelError> {
        ScoreHead::from_layers(schedule.windows(2).map(|p| Conv3x3::zeros(p[0], p[1])).collect())
    }

    /// Random head; each layer's weights are scaled by `gain / sqrt(9 * in)`.
    pub fn random(schedule: &[usize], gain: f64, rng: &mut impl Rng) -> Result<Self, KernelError> {
        ScoreHead::from_layers(
            schedule
                .windows(2)
                .map(|p| Conv3x3::random(p[0], p[1], gain / (9.0 * p[0] as f64).sqrt(), rng))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Conv3x3] {
        &self.layers
    }

    pub fn schedule(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_channels];
        s.extend(self.layers.iter().map(|l| l.out_channels));
        s
    }

    /// Pre-activations of every layer.
    fn trace(&self, f: &FeatureMap) -> Result<Vec<FeatureMap>, KernelError> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = f.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x)?;
            if k + 1 < self.layers.len() {
                let mut a = z.clone();
                a.data_mut().iter_mut().for_each(|v| *v = relu(*v));
                x = a;
            }
            pre.push(z);
        }
        Ok(pre)
    }

    pub fn forward(&self, f: &FeatureMap) -> Result<ScoreMap, KernelError> {
        let last = self.trace(f)?.pop().expect("non-empty head");
        ScoreMap::new(last.height(), last.width(), last.into_data())
    }

    /// Gradient of the score map with respect to the input feature map.
    pub fn backward(&self, f: &FeatureMap, grad: &ScoreMap) -> Result<FeatureMap, KernelError> {
        if grad.height() != f.height() || grad.width() != f.width() {
            return Err(KernelError::Shape("score gradient size".into()));
        }
        let pre = self.trace(f)?;
        let mut g = FeatureMap::new(1, grad.height(), grad.width(), grad.data().to_vec())?;
        for k in (0..self.layers.len()).rev() {
            g = self.layers[k].backward_input(&g);
            if k > 0 {
                for (gv, &z) in g.data_mut().iter_mut().zip(pre[k - 1].data()) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
        Ok(g)
    }

    /// Sign pattern of all hidden pre-activations; two inputs with the same
    /// pattern lie on the same linear piece of the head.
    pub fn relu_pattern(&self, f: &FeatureMap) -> Result<Vec<bool>, KernelError> {
        let pre = self.trace(f)?;
        Ok(pre[..pre.len() - 1]
            .iter()
            .flat_map(|z| z.data().iter().map(|&v| v > 0.0))
            .collect())
    }
}

/// Runs the score module on a modulated feature map.
pub fn score_stack(f_mod: &FeatureMap, head: &ScoreHead) -> Result<ScoreMap, KernelError> {
    head.forward(f_mod)
}

// ---------------------------------------------------------------------------
// softmax center

/// Softmax distribution over grid positions and its expected coordinate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterPrediction {
    /// Row-major probabilities over `H * W` positions.
    pub p: Vec<f64>,
    pub c_y: f64,
    pub c_x: f64,
    pub height: usize,
    pub width: usize,
}

pub fn softmax_center(map: &ScoreMap) -> Result<CenterPrediction, KernelError> {
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite("score map"));
    }
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = map.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    let w = map.width();
    let (mut c_y, mut c_x) = (0.0, 0.0);
    for (k, &pk) in p.iter().enumerate() {
        c_y += pk * (k / w) as f64;
        c_x += pk * (k % w) as f64;
    }
    Ok(CenterPrediction {
        p,
        c_y,
        c_x,
        height: map.height(),
        width: w,
    })
}

/// Gradient of `grad_cy * c_y + grad_cx * c_x` with respect to the scores.
pub fn softmax_center_backward(center: &CenterPrediction, grad_cy: f64, grad_cx: f64) -> ScoreMap {
    let w = center.width;
    let data = center
        .p
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk * (grad_cy * ((k / w) as f64 - center.c_y) + grad_cx * ((k % w) as f64 - center.c_x)))
        .collect();
    ScoreMap::new(center.height, w, data).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// bilinear sampling

/// Lower index, upper index and fractional weight for one axis.
fn axis_weights(len: usize, coord: f64) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (coord.floor() as usize).min(len - 2);
    (i0, i0 + 1, coord - i0 as f64)
}

fn check_coord(name: &'static str, v: f64, len: usize) -> Result<f64, KernelError> {
    let hi = (len - 1) as f64;
    if !v.is_finite() || v < -COORD_SLACK || v > hi + COORD_SLACK {
        return Err(KernelError::OutOfRange {
            name,
            value: v,
            max: hi,
        });
    }
    Ok(v.clamp(0.0, hi))
}

/// Bilinear interpolation of every channel at `(y, x)` in grid coordinates.
pub fn bilinear_sample(f: &FeatureMap, y: f64, x: f64) -> Result<Vec<f64>, KernelError> {
    let y = check_coord("y", y, f.height())?;
    let x = check_coord("x", x, f.width())?;
    let (y0, y1, ly) = axis_weights(f.height(), y);
    let (x0, x1, lx) = axis_weights(f.width(), x);
    Ok((0..f.channels())
        .map(|c| {
            (1.0 - ly) * ((1.0 - lx) * f.at(c, y0, x0) + lx * f.at(c, y0, x1))
                + ly * ((1.0 - lx) * f.at(c, y1, x0) + lx * f.at(c, y1, x1))
        })
        .collect())
}

/// Gradients of `sum_c grad_out[c] * sample[c]` with respect to the map and
/// the two coordinates. The coordinate gradients are one-sided at integers.
pub fn bilinear_sample_backward(
    f: &FeatureMap,
    y: f64,
    x: f64,
    grad_out: &[f64],
) -> Result<(FeatureMap, f64, f64), KernelError> {
    if grad_out.len() != f.channels() {
        return Err(KernelError::Shape("bilinear gradient length".into()));
    }
    let y = check_coord("y", y, f.height())?;
    let x = check_coord("x", x, f.width())?;
    let (y0, y1, ly) = axis_weights(f.height(), y);
    let (x0, x1, lx) = axis_weights(f.width(), x);
    let mut grad = FeatureMap::zeros(f.channels(), f.height(), f.width());
    let (mut gy, mut gx) = (0.0, 0.0);
    for (c, &g) in grad_out.iter().enumerate() {
        let (v00, v01, v10, v11) = (f.at(c, y0, x0), f.at(c, y0, x1), f.at(c, y1, x0), f.at(c, y1, x1));
        let d = grad.data_mut();
        let off = |yy: usize, xx: usize| (c * f.height() + yy) * f.width() + xx;
        d[off(y0, x0)] += g * (1.0 - ly) * (1.0 - lx);
        d[off(y0, x1)] += g * (1.0 - ly) * lx;
        d[off(y1, x0)] += g * ly * (1.0 - lx);
        d[off(y1, x1)] += g * ly * lx;
        if f.height() > 1 {
            gy += g * ((1.0 - lx) * (v10 - v00) + lx * (v11 - v01));
        }
        if f.width() > 1 {
            gx += g * ((1.0 - ly) * (v01 - v00) + ly * (v11 - v10));
        }
    }
    Ok((grad, gy, gx))
}

// ---------------------------------------------------------------------------
// box refinement

/// Fully connected layer, `weight` is `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn random(inputs: usize, outputs: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut d = Dense::zeros(inputs, outputs);
        for w in d.weight.iter_mut().chain(d.bias.iter_mut()) {
            *w = rng.random_range(-scale..=scale);
        }
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn backward_input(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (o, &g) in grad.iter().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (dst, w) in out.iter_mut().zip(row) {
                *dst += g * w;
            }
        }
        out
    }
}

/// MLP with ReLU on hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, KernelError> {
        if layers.is_empty() {
            return Err(KernelError::Shape("mlp needs at least one layer".into()));
        }
        for l in &layers {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(KernelError::Shape(format!(
                    "dense {}->{} parameter sizes",
                    l.inputs, l.outputs
                )));
            }
        }
        if layers.windows(2).any(|p| p[0].outputs != p[1].inputs) {
            return Err(KernelError::Shape("mlp layers do not chain".into()));
        }
        Ok(Mlp { layers })
    }

    /// Zero MLP for dims such as `[C, 256, 256, 4]`.
    pub fn zeros(dims: &[usize]) -> Result<Self, KernelError> {
        Mlp::from_layers(dims.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect())
    }

    pub fn random(dims: &[usize], gain: f64, rng: &mut impl Rng) -> Result<Self, KernelError> {
        Mlp::from_layers(
            dims.windows(2)
                .map(|p| Dense::random(p[0], p[1], gain / (p[0] as f64).sqrt(), rng))
                .collect(),
        )
    }

    /// Refinement MLP `C -> 256 -> 256 -> 4` with the given bias on the
    /// output layer and zero weights elsewhere.
    pub fn bias_only(channels: usize, output_bias: [f64; 4]) -> Self {
        let mut m = Mlp::zeros(&[channels, DEFAULT_REFINE_HIDDEN, DEFAULT_REFINE_HIDDEN, 4]).expect("valid dims");
        m.layers.last_mut().expect("three layers").bias = output_bias.to_vec();
        m
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (k, l) in self.layers.iter().enumerate() {
            let z = l.forward(&a);
            if k + 1 < self.layers.len() {
                a = z.iter().map(|&v| relu(v)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != self.inputs() {
            return Err(KernelError::Shape(format!(
                "mlp expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        Ok(self.trace(x).pop().expect("non-empty mlp"))
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<Vec<f64>, KernelError> {
        if x.len() != self.inputs() || grad_out.len() != self.outputs() {
            return Err(KernelError::Shape("mlp backward operand sizes".into()));
        }
        let pre = self.trace(x);
        let mut g = grad_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            g = self.layers[k].backward_input(&g);
            if k > 0 {
                for (gv, &z) in g.iter_mut().zip(&pre[k - 1]) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn relu_pattern(&self, x: &[f64]) -> Vec<bool> {
        let pre = self.trace(x);
        pre[..pre.len() - 1]
            .iter()
            .flatten()
            .map(|&v| v > 0.0)
            .chain(pre.last().into_iter().flatten().skip(2).map(|&v| v > 0.0))
            .collect()
    }
}

/// Refined box in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxPrediction {
    pub delta_cy: f64,
    pub delta_cx: f64,
    pub s_y: f64,
    pub s_x: f64,
    /// Refined center `(c_y + delta_cy, c_x + delta_cx)`.
    pub center_y: f64,
    pub center_x: f64,
    pub confidence: Option<f64>,
}

impl BoxPrediction {
    pub fn to_bbox(&self) -> BBox {
        BBox::new(
            self.center_x - 0.5 * self.s_x,
            self.center_y - 0.5 * self.s_y,
            self.s_x,
            self.s_y,
        )
    }

    /// `[center_y, center_x, s_y, s_x]`, the differentiable outputs.
    pub fn outputs(&self) -> [f64; 4] {
        [self.center_y, self.center_x, self.s_y, self.s_x]
    }
}

/// Predicts center offset and size from the feature sampled at the center.
pub fn refine_box(f: &FeatureMap, center: &CenterPrediction, mlp: &Mlp) -> Result<BoxPrediction, KernelError> {
    refine_box_at(f, center.c_y, center.c_x, mlp)
}

pub fn refine_box_at(f: &FeatureMap, c_y: f64, c_x: f64, mlp: &Mlp) -> Result<BoxPrediction, KernelError> {
    if mlp.inputs() != f.channels() || mlp.outputs() != 4 {
        return Err(KernelError::Shape(format!(
            "refine mlp must map {} -> 4, got {} -> {}",
            f.channels(),
            mlp.inputs(),
            mlp.outputs()
        )));
    }
    let feat = bilinear_sample(f, c_y, c_x)?;
    let o = mlp.forward(&feat)?;
    Ok(BoxPrediction {
        delta_cy: o[0],
        delta_cx: o[1],
        s_y: relu(o[2]),
        s_x: relu(o[3]),
        center_y: c_y + o[0],
        center_x: c_x + o[1],
        confidence: None,
    })
}

/// Gradients of `grad . [center_y, center_x, s_y, s_x]` with respect to the
/// feature map and the input center.
pub fn refine_box_backward(
    f: &FeatureMap,
    c_y: f64,
    c_x: f64,
    mlp: &Mlp,
    grad: [f64; 4],
) -> Result<(FeatureMap, f64, f64), KernelError> {
    let feat = bilinear_sample(f, c_y, c_x)?;
    let o = mlp.forward(&feat)?;
    let grad_o = [
        grad[0],
        grad[1],
        if o[2] > 0.0 { grad[2] } else { 0.0 },
        if o[3] > 0.0 { grad[3] } else { 0.0 },
    ];
    let grad_feat = mlp.backward(&feat, &grad_o)?;
    let (grad_f, gy, gx) = bilinear_sample_backward(f, c_y, c_x, &grad_feat)?;
    Ok((grad_f, gy + grad[0], gx + grad[1]))
}

// ---------------------------------------------------------------------------
// ROIAlign and confidence

/// Pools `bbox` (grid units) into `size x size` bins. Each bin averages
/// `2 x 2` bilinear samples at the bin's regular sub-grid points; sample
/// coordinates outside the grid are clamped to its border.
pub fn roi_align(f: &FeatureMap, bbox: &BBox, size: usize) -> Result<PooledFeature, KernelError> {
    if size == 0 {
        return Err(KernelError::Shape("roi output size must be positive".into()));
    }
    if bbox.is_degenerate() {
        return Err(KernelError::DegenerateBox);
    }
    let (h, w) = (f.height(), f.width());
    if bbox.x2() <= -0.5 || bbox.y2() <= -0.5 || bbox.x >= w as f64 - 0.5 || bbox.y >= h as f64 - 0.5 {
        return Err(KernelError::BoxOutsideGrid);
    }
    let r = ROI_SAMPLING_RATIO;
    let bin_h = bbox.h / size as f64;
    let bin_w = bbox.w / size as f64;
    let (hi_y, hi_x) = ((h - 1) as f64, (w - 1) as f64);
    let ys: Vec<(usize, usize, f64)> = (0..size * r)
        .map(|k| {
            let v = bbox.y + bin_h * ((k / r) as f64 + ((k % r) as f64 + 0.5) / r as f64);
            axis_weights(h, v.clamp(0.0, hi_y))
        })
        .collect();
    let xs: Vec<(usize, usize, f64)> = (0..size * r)
        .map(|k| {
            let v = bbox.x + bin_w * ((k / r) as f64 + ((k % r) as f64 + 0.5) / r as f64);
            axis_weights(w, v.clamp(0.0, hi_x))
        })
        .collect();
    let count = (r * r) as f64;
    let mut out = vec![0.0; f.channels() * size * size];
    for c in 0..f.channels() {
        for i in 0..size {
            for j in 0..size {
                let mut acc = 0.0;
                for &(y0, y1, ly) in &ys[i * r..(i + 1) * r] {
                    for &(x0, x1, lx) in &xs[j * r..(j + 1) * r] {
                        let top = f.at(c, y0, x0) + lx * (f.at(c, y0, x1) - f.at(c, y0, x0));
                        let bot = f.at(c, y1, x0) + lx * (f.at(c, y1, x1) - f.at(c, y1, x0));
                        acc += top + ly * (bot - top);
                    }
                }
                out[(c * size + i) * size + j] = acc / count;
            }
        }
    }
    PooledFeature::new(f.channels(), size, out)
}

/// `sigmoid(<roi, t_cls>)`.
pub fn cls_confidence(roi: &PooledFeature, t_cls: &PooledFeature) -> Result<f64, KernelError> {
    if roi.channels() != t_cls.channels() || roi.size() != t_cls.size() {
        return Err(KernelError::Shape(format!(
            "roi {}x{s}x{s} vs t_cls {}x{t}x{t}",
            roi.channels(),
            t_cls.channels(),
            s = roi.size(),
            t = t_cls.size()
        )));
    }
    Ok(sigmoid(dot(roi.data(), t_cls.data())))
}

/// Gradients of `grad * cls_confidence` with respect to both operands.
pub fn cls_confidence_backward(
    roi: &PooledFeature,
    t_cls: &PooledFeature,
    grad: f64,
) -> Result<(Vec<f64>, Vec<f64>), KernelError> {
    let s = cls_confidence(roi, t_cls)?;
    let k = grad * s * (1.0 - s);
    Ok((
        t_cls.data().iter().map(|t| k * t).collect(),
        roi.data().iter().map(|r| k * r).collect(),
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
