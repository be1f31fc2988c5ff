//! Channel-major dense maps and the resampling primitives built on them.

use crate::{Error, Result};

/// A `(channels, height, width)` grid of `f64`, stored channel-major and
/// row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DenseMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        DenseMap {
            channels,
            height,
            width,
            values: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        Ok(DenseMap {
            channels,
            height,
            width,
            values,
        })
    }

    /// Builds a map by evaluating `f(c, y, x)` at every cell.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        DenseMap {
            channels,
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[self.offset(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(c, y, x);
        self.values[i] = v;
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &DenseMap) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMap {
        DenseMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies channels `start..start + count` into a new map.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<DenseMap> {
        if start + count > self.channels {
            return Err(Error::shape(format!(
                "channels {start}..{} out of {}",
                start + count,
                self.channels
            )));
        }
        let n = self.plane_len();
        DenseMap::from_vec(
            count,
            self.height,
            self.width,
            self.values[start * n..(start + count) * n].to_vec(),
        )
    }

    /// Stacks maps of equal extent along the channel axis.
    pub fn concat_channels(parts: &[&DenseMap]) -> Result<DenseMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("nothing to concatenate"))?;
        let (h, w) = (first.height, first.width);
        let mut values = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape("concatenated maps differ in extent"));
            }
            channels += p.channels;
            values.extend_from_slice(&p.values);
        }
        DenseMap::from_vec(channels, h, w, values)
    }

    /// Mirrors every channel left to right.
    pub fn flip_horizontal(&self) -> DenseMap {
        let w = self.width;
        DenseMap::from_fn(self.channels, self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Index of the largest channel at each pixel (first wins on ties).
    pub fn argmax_channels(&self) -> Vec<usize> {
        let n = self.plane_len();
        (0..n)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.values[p];
                for c in 1..self.channels {
                    let v = self.values[c * n + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

/// Per-pixel softmax over channels with max-subtraction.
pub fn softmax_channels(logits: &DenseMap) -> DenseMap {
    let n = logits.plane_len();
    let c = logits.channels();
    let mut out = logits.clone();
    let v = out.values_mut();
    for p in 0..n {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(v[k * n + p]);
        }
        let mut sum = 0.0;
        for k in 0..c {
            let e = (v[k * n + p] - m).exp();
            v[k * n + p] = e;
            sum += e;
        }
        for k in 0..c {
            v[k * n + p] /= sum;
        }
    }
    out
}

/// Interpolation stencil along one axis: for each output index, the two
/// source indices and the weight of the second one.
#[derive(Debug, Clone)]
struct AxisStencil {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisStencil {
    /// Half-pixel centres (align-corners = false), clamped at the edges.
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for d in 0..out_len {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        AxisStencil { lo, hi, frac }
    }
}

fn check_resize(map: &DenseMap, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} is empty"
        )));
    }
    if map.height() == 0 || map.width() == 0 {
        return Err(Error::InvalidArgument("resize source is empty".into()));
    }
    Ok(())
}

/// Channel-wise bilinear resampling with half-pixel centres and clamped
/// edges.
pub fn bilinear_resize(map: &DenseMap, out_h: usize, out_w: usize) -> Result<DenseMap> {
    check_resize(map, out_h, out_w)?;
    let ys = AxisStencil::new(map.height(), out_h);
    let xs = AxisStencil::new(map.width(), out_w);
    let w_in = map.width();
    let mut out = DenseMap::zeros(map.channels(), out_h, out_w);
    for c in 0..map.channels() {
        let src = map.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            let r0 = &src[y0 * w_in..(y0 + 1) * w_in];
            let r1 = &src[y1 * w_in..(y1 + 1) * w_in];
            for ox in 0..out_w {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// The entries `(ys[i], xs[j])` of `bilinear_resize(map, out_h, out_w)`,
/// computed without materializing the rest of the resized map.
pub fn bilinear_resize_at(map: &DenseMap, out_h: usize, out_w: usize, ys: &[usize], xs: &[usize]) -> Result<DenseMap> {
    check_resize(map, out_h, out_w)?;
    if ys.iter().any(|&y| y >= out_h) || xs.iter().any(|&x| x >= out_w) {
        return Err(Error::InvalidArgument(format!(
            "sample index outside the {out_h}x{out_w} resized grid"
        )));
    }
    let sy = AxisStencil::new(map.height(), out_h);
    let sx = AxisStencil::new(map.width(), out_w);
    let w_in = map.width();
    let mut out = DenseMap::zeros(map.channels(), ys.len(), xs.len());
    for c in 0..map.channels() {
        let src = map.channel(c);
        let dst = out.channel_mut(c);
        for (i, &oy) in ys.iter().enumerate() {
            let (y0, y1, fy) = (sy.lo[oy], sy.hi[oy], sy.frac[oy]);
            let r0 = &src[y0 * w_in..(y0 + 1) * w_in];
            let r1 = &src[y1 * w_in..(y1 + 1) * w_in];
            for (j, &ox) in xs.iter().enumerate() {
                let (x0, x1, fx) = (sx.lo[ox], sx.hi[ox], sx.frac[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[i * xs.len() + j] = top + (bot - top) * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad` (at the resized extent)
/// back onto an `in_h x in_w` grid.
pub fn bilinear_resize_backward(grad: &DenseMap, in_h: usize, in_w: usize) -> Result<DenseMap> {
    if in_h == 0 || in_w == 0 {
        return Err(Error::InvalidArgument("resize source is empty".into()));
    }
    let (out_h, out_w) = (grad.height(), grad.width());
    let ys = AxisStencil::new(in_h, out_h);
    let xs = AxisStencil::new(in_w, out_w);
    let mut out = DenseMap::zeros(grad.channels(), in_h, in_w);
    for c in 0..grad.channels() {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..out_h {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += v * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    Ok(out)
}

/// Source index for nearest-neighbour resampling with half-pixel centres.
#[inline]
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}
