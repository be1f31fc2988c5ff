//! A small layer zoo with analytic forward and backward passes.
//!
//! Networks are plain ordered layer lists. Convolutions are 3x3, stride 1,
//! zero padding 1, lowered to a GEMM through an im2col buffer.

use std::cell::RefCell;
use std::fmt;

use crate::rng::{self, FmRng};
use crate::tensor::{bilinear_resize, bilinear_resize_backward, softmax_channels, DenseMap};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Relu,
    /// Bilinear upsampling by a factor of two in each spatial axis.
    Upsample2x,
    HeadSoftmax,
    HeadSigmoid,
    HeadExp,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Conv3x3,
        LayerKind::Relu,
        LayerKind::Upsample2x,
        LayerKind::HeadSoftmax,
        LayerKind::HeadSigmoid,
        LayerKind::HeadExp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Relu => "relu",
            LayerKind::Upsample2x => "bilinear-up2",
            LayerKind::HeadSoftmax => "head-softmax",
            LayerKind::HeadSigmoid => "head-sigmoid",
            LayerKind::HeadExp => "head-exp",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<LayerKind> {
        LayerKind::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv3x3,
            in_channels,
            out_channels,
        }
    }

    /// A parameter-free layer acting on `channels` channels.
    pub fn pointwise(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => self.out_channels * self.in_channels * 9 + self.out_channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub role: Role,
}

impl NetworkSpec {
    /// `conv -> relu -> ... -> conv` with the given hidden widths, followed
    /// by `upsample` bilinear 2x layers.
    pub fn conv_stack(
        role: Role,
        in_channels: usize,
        hidden: &[usize],
        out_channels: usize,
        upsample: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for &h in hidden {
            layers.push(LayerSpec::conv(c, h));
            layers.push(LayerSpec::pointwise(LayerKind::Relu, h));
            c = h;
        }
        layers.push(LayerSpec::conv(c, out_channels));
        for _ in 0..upsample {
            layers.push(LayerSpec::pointwise(LayerKind::Upsample2x, out_channels));
        }
        NetworkSpec { layers, role }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec {
                layer: 0,
                reason: "network has no layers".into(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::InvalidSpec {
                    layer: i,
                    reason: "zero channels".into(),
                });
            }
            if l.kind != LayerKind::Conv3x3 && l.in_channels != l.out_channels {
                return Err(Error::InvalidSpec {
                    layer: i,
                    reason: format!("{} cannot change the channel count", l.kind.name()),
                });
            }
            if l.kind == LayerKind::HeadSoftmax && l.in_channels < 2 {
                return Err(Error::InvalidSpec {
                    layer: i,
                    reason: "softmax head needs at least two channels".into(),
                });
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::InvalidSpec {
                    layer: i,
                    reason: format!(
                        "expects {} input channels, previous layer produces {}",
                        l.in_channels,
                        self.layers[i - 1].out_channels
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_channels)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Spatial magnification from input to output.
    pub fn upsample_factor(&self) -> usize {
        let ups = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Upsample2x)
            .count();
        1 << ups
    }
}

/// Checks the structural pairing of a teacher with its student.
pub fn validate_pair(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    if teacher.in_channels() != student.in_channels()
        || teacher.out_channels() != student.out_channels()
        || teacher.upsample_factor() != student.upsample_factor()
    {
        return Err(Error::InvalidArgument(
            "teacher and student disagree on input/output geometry".into(),
        ));
    }
    if teacher.param_count() <= student.param_count() {
        return Err(Error::InvalidArgument(format!(
            "teacher has {} parameters, student {}; the teacher must be strictly larger",
            teacher.param_count(),
            student.param_count()
        )));
    }
    Ok(())
}

/// Named flat parameter arrays, one per parameterized layer. A conv entry
/// holds its `out x in x 3 x 3` weights followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Vec<f64>)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Self {
        ParamSet { entries }
    }

    /// All-zero parameters shaped for `spec`.
    pub fn zeros_for(spec: &NetworkSpec) -> Self {
        let entries = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_count() > 0)
            .map(|(i, l)| (layer_param_name(i), vec![0.0; l.param_count()]))
            .collect();
        ParamSet { entries }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), vec![0.0; v.len()]))
                .collect(),
        }
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Vec<f64>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.len() == y.len())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, v) in &mut self.entries {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, v)| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Checks names and lengths against `spec`.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = ParamSet::zeros_for(spec);
        if !self.same_layout(&expected) {
            return Err(Error::shape(
                "parameter set does not match the network spec".to_string(),
            ));
        }
        Ok(())
    }
}

pub fn layer_param_name(layer: usize) -> String {
    format!("conv{layer}")
}

/// He-normal conv weights, zero biases. Bitwise deterministic for a seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng: FmRng = rng::seeded(seed, rng::stream::INIT);
    let mut entries = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if l.kind != LayerKind::Conv3x3 {
            continue;
        }
        let n_w = l.out_channels * l.in_channels * 9;
        let std = (2.0 / (l.in_channels as f64 * 9.0)).sqrt();
        let mut v = Vec::with_capacity(n_w + l.out_channels);
        for _ in 0..n_w {
            v.push(std * rng::normal(&mut rng));
        }
        v.extend(std::iter::repeat_n(0.0, l.out_channels));
        entries.push((layer_param_name(i), v));
    }
    Ok(ParamSet { entries })
}

/// Every intermediate activation of one forward pass; `maps[0]` is the
/// input and `maps[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations {
    maps: Vec<DenseMap>,
}

impl Activations {
    pub fn output(&self) -> &DenseMap {
        self.maps.last().expect("activations are never empty")
    }

    pub fn input(&self) -> &DenseMap {
        &self.maps[0]
    }

    pub fn layer_output(&self, layer: usize) -> &DenseMap {
        &self.maps[layer + 1]
    }
}

fn conv_param<'a>(params: &'a ParamSet, layer: usize, spec: &LayerSpec) -> Result<&'a [f64]> {
    let name = layer_param_name(layer);
    let p = params
        .get(&name)
        .ok_or_else(|| Error::shape(format!("missing parameters {name}")))?;
    if p.len() != spec.param_count() {
        return Err(Error::shape(format!(
            "{name} has {} values, expected {}",
            p.len(),
            spec.param_count()
        )));
    }
    Ok(p)
}

/// Runs `input` through the network, keeping every activation.
pub fn forward(spec: &NetworkSpec, params: &ParamSet, input: &DenseMap) -> Result<(DenseMap, Activations)> {
    spec.validate()?;
    if input.channels() != spec.in_channels() {
        return Err(Error::shape(format!(
            "input has {} channels, network expects {}",
            input.channels(),
            spec.in_channels()
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    let mut maps = Vec::with_capacity(spec.layers.len() + 1);
    maps.push(input.clone());
    for (i, l) in spec.layers.iter().enumerate() {
        let x = maps.last().unwrap();
        let y = match l.kind {
            LayerKind::Conv3x3 => conv3x3_forward(x, conv_param(params, i, l)?, l.out_channels),
            LayerKind::Relu => x.map(|v| v.max(0.0)),
            LayerKind::Upsample2x => bilinear_resize(x, 2 * x.height(), 2 * x.width())?,
            LayerKind::HeadSoftmax => softmax_channels(x),
            LayerKind::HeadSigmoid => x.map(sigmoid),
            LayerKind::HeadExp => x.map(f64::exp),
        };
        maps.push(y);
    }
    let out = maps.last().unwrap().clone();
    Ok((out, Activations { maps }))
}

/// Forward pass that keeps only the output.
pub fn predict(spec: &NetworkSpec, params: &ParamSet, input: &DenseMap) -> Result<DenseMap> {
    Ok(forward(spec, params, input)?.0)
}

/// Reverse-mode gradients of the forward map: `(param_grads, input_grad)`.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParamSet,
    cache: &Activations,
    grad_output: &DenseMap,
) -> Result<(ParamSet, DenseMap)> {
    if cache.maps.len() != spec.layers.len() + 1 {
        return Err(Error::shape("activation record does not match the network"));
    }
    if !grad_output.same_shape(cache.output()) {
        return Err(Error::shape(format!(
            "output gradient {:?} vs cached output {:?}",
            grad_output.shape(),
            cache.output().shape()
        )));
    }
    let mut grads = ParamSet::zeros_for(spec);
    let mut g = grad_output.clone();
    for (i, l) in spec.layers.iter().enumerate().rev() {
        let x = &cache.maps[i];
        let y = &cache.maps[i + 1];
        g = match l.kind {
            LayerKind::Conv3x3 => {
                let w = conv_param(params, i, l)?;
                let pg = grads
                    .get_mut(&layer_param_name(i))
                    .expect("layout built from the same spec");
                conv3x3_backward(x, w, l.out_channels, &g, pg)
            }
            LayerKind::Relu => {
                let mut out = g;
                for (gv, xv) in out.values_mut().iter_mut().zip(x.values()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                out
            }
            LayerKind::Upsample2x => bilinear_resize_backward(&g, x.height(), x.width())?,
            LayerKind::HeadSoftmax => softmax_backward(y, &g),
            LayerKind::HeadSigmoid => {
                let mut out = g;
                for (gv, s) in out.values_mut().iter_mut().zip(y.values()) {
                    *gv *= s * (1.0 - s);
                }
                out
            }
            LayerKind::HeadExp => {
                let mut out = g;
                for (gv, e) in out.values_mut().iter_mut().zip(y.values()) {
                    *gv *= e;
                }
                out
            }
        };
    }
    Ok((grads, g))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_backward(probs: &DenseMap, g: &DenseMap) -> DenseMap {
    let n = probs.plane_len();
    let c = probs.channels();
    let (p, gv) = (probs.values(), g.values());
    let mut out = DenseMap::zeros(c, probs.height(), probs.width());
    let o = out.values_mut();
    for px in 0..n {
        let mut dot = 0.0;
        for k in 0..c {
            dot += p[k * n + px] * gv[k * n + px];
        }
        for k in 0..c {
            o[k * n + px] = p[k * n + px] * (gv[k * n + px] - dot);
        }
    }
    out
}

thread_local! {
    /// Column buffers reused across calls; fresh multi-megabyte allocations
    /// cost more in page faults than the GEMM they feed.
    static SCRATCH: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

/// `cols[(ci * 9 + ky * 3 + kx) * hw + y * w + x] = input[ci, y + ky - 1, x + kx - 1]`
fn im2col(input: &DenseMap, cols: &mut Vec<f64>) {
    let (c, h, w) = input.shape();
    let hw = h * w;
    cols.clear();
    cols.resize(c * 9 * hw, 0.0);
    for ci in 0..c {
        let src = input.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    // dst x maps to src x + kx - 1
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> DenseMap {
    let hw = h * w;
    let mut out = DenseMap::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                drow[x - 1] += srow[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                drow[x] += srow[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                drow[x + 1] += srow[x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given shapes
    // and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv3x3_forward(input: &DenseMap, params: &[f64], out_c: usize) -> DenseMap {
    let (in_c, h, w) = input.shape();
    let hw = h * w;
    let k = in_c * 9;
    let (weights, bias) = params.split_at(out_c * k);
    let mut out = vec![0.0; out_c * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    SCRATCH.with_borrow_mut(|(cols, _)| {
        im2col(input, cols);
        gemm(out_c, k, hw, weights, (k as isize, 1), cols, (hw as isize, 1), 1.0, &mut out);
    });
    DenseMap::from_vec(out_c, h, w, out).expect("sized above")
}

/// Accumulates weight and bias gradients into `param_grad` and returns the
/// input gradient.
fn conv3x3_backward(
    input: &DenseMap,
    params: &[f64],
    out_c: usize,
    grad_out: &DenseMap,
    param_grad: &mut [f64],
) -> DenseMap {
    let (in_c, h, w) = input.shape();
    let hw = h * w;
    let k = in_c * 9;
    let weights = &params[..out_c * k];
    let g = grad_out.values();
    let (gw, gb) = param_grad.split_at_mut(out_c * k);
    for (o, b) in gb.iter_mut().enumerate() {
        *b += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    SCRATCH.with_borrow_mut(|(cols, dcols)| {
        im2col(input, cols);
        // dW = G * cols^T
        gemm(out_c, hw, k, g, (hw as isize, 1), cols, (1, hw as isize), 1.0, gw);
        // dcols = W^T * G
        dcols.clear();
        dcols.resize(k * hw, 0.0);
        gemm(k, out_c, hw, weights, (1, k as isize), g, (hw as isize, 1), 0.0, dcols);
        col2im(dcols, in_c, h, w)
    })
}
