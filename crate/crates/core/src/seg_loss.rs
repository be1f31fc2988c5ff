//! Pixel-wise supervised cross-entropy and the pixel-wise KL distillation
//! loss. Both return the scalar loss and its gradient with respect to the
//! student's logits.

use crate::tensor::{softmax_channels, DenseMap};
use crate::{Error, Result};

/// Label value excluded from supervised losses and from scoring.
pub const IGNORE: u8 = 255;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-30;

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::shape(format!(
                "{} label ids for a {height}x{width} map",
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    /// Argmax over channels.
    pub fn from_argmax(map: &DenseMap) -> Self {
        LabelMap {
            height: map.height(),
            width: map.width(),
            ids: map.argmax_channels().into_iter().map(|c| c as u8).collect(),
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    #[inline]
    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let w = self.width;
        let mut ids = Vec::with_capacity(self.ids.len());
        for y in 0..self.height {
            ids.extend((0..w).map(|x| self.ids[y * w + w - 1 - x]));
        }
        LabelMap {
            height: self.height,
            width: w,
            ids,
        }
    }

    /// Errors if a non-ignore id is not below `num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .ids
            .iter()
            .find(|&&id| id != IGNORE && id as usize >= num_classes)
        {
            Some(id) => Err(Error::InvalidArgument(format!(
                "label {id} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

/// Per-pixel class distributions (channel sums of one).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap(DenseMap);

impl ProbMap {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(map: DenseMap) -> Result<Self> {
        let n = map.plane_len();
        let c = map.channels();
        let v = map.values();
        if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        for px in 0..n {
            let s: f64 = (0..c).map(|k| v[k * n + px]).sum();
            if (s - 1.0).abs() > Self::SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "pixel {px} sums to {s}, not 1"
                )));
            }
        }
        Ok(ProbMap(map))
    }

    pub fn from_logits(logits: &DenseMap) -> Self {
        ProbMap(softmax_channels(logits))
    }

    /// One-hot distribution of each label id. Ignore pixels are rejected.
    pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<Self> {
        labels.check_classes(num_classes)?;
        if labels.ids().contains(&IGNORE) {
            return Err(Error::InvalidArgument(
                "one-hot targets cannot contain ignore pixels".into(),
            ));
        }
        let (h, w) = (labels.height(), labels.width());
        Ok(ProbMap(DenseMap::from_fn(num_classes, h, w, |c, y, x| {
            if labels.get(y, x) as usize == c {
                1.0
            } else {
                0.0
            }
        })))
    }

    pub fn as_map(&self) -> &DenseMap {
        &self.0
    }

    pub fn into_map(self) -> DenseMap {
        self.0
    }
}

#[inline]
fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Mean over pixels of `KL(p_teacher || softmax(student_logits))`.
///
/// The gradient is `(p_student - p_teacher) / |I|` per pixel and channel.
pub fn pixelwise_kl_loss(teacher: &ProbMap, student_logits: &DenseMap) -> Result<(f64, DenseMap)> {
    let t = teacher.as_map();
    if !t.same_shape(student_logits) {
        return Err(Error::shape(format!(
            "teacher {:?} vs student {:?}",
            t.shape(),
            student_logits.shape()
        )));
    }
    let n = t.plane_len();
    if n == 0 {
        return Err(Error::shape("empty prediction grid"));
    }
    if !student_logits.is_finite() {
        return Err(Error::NonFinite("student logits".into()));
    }
    let c = t.channels();
    let ps = softmax_channels(student_logits);
    let inv_n = 1.0 / n as f64;
    let (tv, sv) = (t.values(), ps.values());
    let mut loss = 0.0;
    for px in 0..n {
        let mut acc = 0.0;
        for k in 0..c {
            let pt = tv[k * n + px];
            if pt > 0.0 {
                acc += -pt * floored_ln(sv[k * n + px]) + pt * floored_ln(pt);
            }
        }
        loss += acc;
    }
    let mut grad = ps;
    for (g, pt) in grad.values_mut().iter_mut().zip(tv) {
        *g = (*g - pt) * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Mean over non-ignored pixels of `-ln p_student[label]`.
pub fn pixelwise_ce_loss(student_logits: &DenseMap, labels: &LabelMap) -> Result<(f64, DenseMap)> {
    let (c, h, w) = student_logits.shape();
    if labels.height() != h || labels.width() != w {
        return Err(Error::shape(format!(
            "labels {}x{} vs logits {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    labels.check_classes(c)?;
    if !student_logits.is_finite() {
        return Err(Error::NonFinite("student logits".into()));
    }
    let n = h * w;
    let valid = labels.ids().iter().filter(|&&id| id != IGNORE).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    let inv_n = 1.0 / valid as f64;
    let mut grad = softmax_channels(student_logits);
    let mut loss = 0.0;
    let g = grad.values_mut();
    for (px, &id) in labels.ids().iter().enumerate() {
        if id == IGNORE {
            for k in 0..c {
                g[k * n + px] = 0.0;
            }
            continue;
        }
        let id = id as usize;
        loss += -floored_ln(g[id * n + px]);
        for k in 0..c {
            let onehot = if k == id { 1.0 } else { 0.0 };
            g[k * n + px] = (g[k * n + px] - onehot) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
