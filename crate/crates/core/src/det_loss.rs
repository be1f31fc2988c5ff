//! Anchor-free (FCOS-style) detection: target assignment, centerness,
//! GIoU, and the soft-target output-matching loss with its hard-label
//! instantiation.
//!
//! A detection head emits, at every location of every pyramid level, `C`
//! independent class probabilities, four side distances `(l, t, r, b)` in
//! input pixels and a centerness score. The distillation loss is
//!
//! ```text
//! L_cls    = 1/N_pos * sum_{loc, c} BCE(p_T, p_S)
//! L_reg    = sum_{loc} (sum_c p_T / N_pos) * (1 - GIoU(t_T, t_S))
//! L_center = sum_{loc} BCE(q_T, q_S)
//! N_pos    = max(1, sum_{loc, c} p_T)
//! ```
//!
//! and replacing the teacher by one-hot targets gives the supervised loss.
//! Gradients are taken with respect to the head's raw outputs: class and
//! centerness logits before the sigmoid, distance logits before
//! `exp(.) * stride`.

use crate::nn::sigmoid;
use crate::tensor::DenseMap;
use crate::{Error, Result};

/// One pyramid level: its stride and the `(min_dist, max_dist]` range of
/// `max(l, t, r, b)` it is responsible for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    pub stride: usize,
    pub min_dist: f64,
    pub max_dist: f64,
}

impl LevelSpec {
    pub fn new(stride: usize, min_dist: f64, max_dist: f64) -> Self {
        LevelSpec {
            stride,
            min_dist,
            max_dist,
        }
    }

    /// Grid extent of this level for an `image_h x image_w` input.
    pub fn grid(&self, image_h: usize, image_w: usize) -> (usize, usize) {
        (image_h.div_ceil(self.stride), image_w.div_ceil(self.stride))
    }

    /// Input-pixel coordinates `(x, y)` of grid cell `(gx, gy)`.
    #[inline]
    pub fn location(&self, gx: usize, gy: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (s / 2.0 + gx as f64 * s, s / 2.0 + gy as f64 * s)
    }
}

/// Strides strictly increasing; ranges tile `(0, inf)`.
pub fn validate_levels(levels: &[LevelSpec]) -> Result<()> {
    let first = levels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no pyramid levels".into()))?;
    if first.min_dist != 0.0 {
        return Err(Error::InvalidArgument(
            "the first level range must start at 0".into(),
        ));
    }
    for (i, l) in levels.iter().enumerate() {
        if l.stride == 0 || !(l.min_dist < l.max_dist) {
            return Err(Error::InvalidArgument(format!("level {i} is degenerate")));
        }
        if i > 0 {
            let prev = &levels[i - 1];
            if l.stride <= prev.stride {
                return Err(Error::InvalidArgument(
                    "level strides must strictly increase".into(),
                ));
            }
            if l.min_dist != prev.max_dist {
                return Err(Error::InvalidArgument(format!(
                    "level {i} range does not continue level {}",
                    i - 1
                )));
            }
        }
    }
    if levels.last().unwrap().max_dist != f64::INFINITY {
        return Err(Error::InvalidArgument(
            "the last level range must be unbounded".into(),
        ));
    }
    Ok(())
}

/// An axis-aligned box in input pixels with its class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: u8,
}

impl BoxLabel {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoxLabel>,
}

/// Head outputs at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelField {
    /// `(C, H, W)` class probabilities.
    pub cls: DenseMap,
    /// `(4, H, W)` side distances `l, t, r, b`.
    pub reg: DenseMap,
    /// `(1, H, W)` centerness.
    pub center: DenseMap,
}

impl LevelField {
    fn check(&self) -> Result<()> {
        let (_, h, w) = self.cls.shape();
        if self.reg.shape() != (4, h, w) || self.center.shape() != (1, h, w) {
            return Err(Error::shape("level heads disagree in extent"));
        }
        Ok(())
    }

    fn zeros(num_classes: usize, h: usize, w: usize) -> Self {
        LevelField {
            cls: DenseMap::zeros(num_classes, h, w),
            reg: DenseMap::zeros(4, h, w),
            center: DenseMap::zeros(1, h, w),
        }
    }
}

/// Detection outputs over all pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DetField {
    pub levels: Vec<LevelField>,
}

impl DetField {
    pub fn num_classes(&self) -> usize {
        self.levels.first().map_or(0, |l| l.cls.channels())
    }

    pub fn num_locations(&self) -> usize {
        self.levels.iter().map(|l| l.cls.plane_len()).sum()
    }

    /// Number of raw channels a head must emit: classes, four distances,
    /// one centerness.
    pub fn raw_channels(num_classes: usize) -> usize {
        num_classes + 5
    }

    /// Applies the head nonlinearities to raw per-level outputs laid out as
    /// `[class logits | l t r b logits | centerness logit]`.
    pub fn from_raw(raw: &[DenseMap], levels: &[LevelSpec], num_classes: usize) -> Result<Self> {
        if raw.len() != levels.len() {
            return Err(Error::shape(format!(
                "{} raw maps for {} levels",
                raw.len(),
                levels.len()
            )));
        }
        let mut out = Vec::with_capacity(raw.len());
        for (r, spec) in raw.iter().zip(levels) {
            if r.channels() != Self::raw_channels(num_classes) {
                return Err(Error::shape(format!(
                    "raw head has {} channels, expected {}",
                    r.channels(),
                    Self::raw_channels(num_classes)
                )));
            }
            let stride = spec.stride as f64;
            out.push(LevelField {
                cls: r.slice_channels(0, num_classes)?.map(sigmoid),
                reg: r.slice_channels(num_classes, 4)?.map(|z| z.exp() * stride),
                center: r.slice_channels(num_classes + 4, 1)?.map(sigmoid),
            });
        }
        Ok(DetField { levels: out })
    }

    fn check_geometry(&self, other: &DetField) -> Result<()> {
        if self.levels.len() != other.levels.len() {
            return Err(Error::shape("fields differ in level count"));
        }
        for (a, b) in self.levels.iter().zip(&other.levels) {
            a.check()?;
            b.check()?;
            if a.cls.shape() != b.cls.shape() {
                return Err(Error::shape(format!(
                    "level geometry {:?} vs {:?}",
                    a.cls.shape(),
                    b.cls.shape()
                )));
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.cls.is_finite() && l.reg.is_finite() && l.center.is_finite())
    }
}

/// Loss gradients with respect to the raw head outputs, per level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetGrads {
    pub levels: Vec<LevelField>,
}

impl DetGrads {
    /// Gradients in the raw channel layout accepted by
    /// [`DetField::from_raw`].
    pub fn to_raw(&self) -> Result<Vec<DenseMap>> {
        self.levels
            .iter()
            .map(|l| DenseMap::concat_channels(&[&l.cls, &l.reg, &l.center]))
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .map(|l| l.cls.max_abs().max(l.reg.max_abs()).max(l.center.max_abs()))
            .fold(0.0, f64::max)
    }
}

/// Per-level hard targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    /// Class of the assigned box at each location, `None` for negatives.
    pub class: Vec<Option<u8>>,
    /// `(4, H, W)` target distances, zero at negatives.
    pub reg: DenseMap,
    /// `(1, H, W)` centerness targets, zero at negatives.
    pub center: DenseMap,
}

impl LevelTargets {
    pub fn num_positives(&self) -> usize {
        self.class.iter().filter(|c| c.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetTargets {
    pub levels: Vec<LevelTargets>,
}

impl DetTargets {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(LevelTargets::num_positives).sum()
    }

    /// The one-hot field the supervised loss matches against. Distances at
    /// negatives are set to 1 (their regression weight is zero).
    pub fn to_field(&self, num_classes: usize) -> Result<DetField> {
        let mut levels = Vec::with_capacity(self.levels.len());
        for t in &self.levels {
            let (_, h, w) = t.reg.shape();
            let n = h * w;
            let mut f = LevelField::zeros(num_classes, h, w);
            f.reg.values_mut().fill(1.0);
            for (p, cls) in t.class.iter().enumerate() {
                if let Some(c) = *cls {
                    let c = c as usize;
                    if c >= num_classes {
                        return Err(Error::InvalidArgument(format!(
                            "target class {c} out of range for {num_classes} classes"
                        )));
                    }
                    f.cls.values_mut()[c * n + p] = 1.0;
                    for k in 0..4 {
                        f.reg.values_mut()[k * n + p] = t.reg.values()[k * n + p];
                    }
                    f.center.values_mut()[p] = t.center.values()[p];
                }
            }
            levels.push(f);
        }
        Ok(DetField { levels })
    }
}

/// FCOS assignment: a location is positive for a box when it lies strictly
/// inside it and the largest side distance falls in the level's range; the
/// smallest such box wins.
pub fn assign_targets(
    gt: &GroundTruth,
    levels: &[LevelSpec],
    image_h: usize,
    image_w: usize,
) -> DetTargets {
    let mut out = Vec::with_capacity(levels.len());
    for spec in levels {
        let (gh, gw) = spec.grid(image_h, image_w);
        let n = gh * gw;
        let mut class = vec![None; n];
        let mut reg = DenseMap::zeros(4, gh, gw);
        let mut center = DenseMap::zeros(1, gh, gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let (px, py) = spec.location(gx, gy);
                let mut best: Option<(f64, &BoxLabel, [f64; 4])> = None;
                for b in &gt.boxes {
                    let d = [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py];
                    if d.iter().any(|&v| v <= 0.0) {
                        continue;
                    }
                    let m = d.iter().copied().fold(0.0, f64::max);
                    if !(m > spec.min_dist && m <= spec.max_dist) {
                        continue;
                    }
                    let area = b.area();
                    if best.is_none_or(|(a, _, _)| area < a) {
                        best = Some((area, b, d));
                    }
                }
                if let Some((_, b, d)) = best {
                    let p = gy * gw + gx;
                    class[p] = Some(b.class);
                    for (k, v) in d.iter().enumerate() {
                        reg.values_mut()[k * n + p] = *v;
                    }
                    center.values_mut()[p] = centerness_of(d);
                }
            }
        }
        out.push(LevelTargets {
            class,
            reg,
            center,
        });
    }
    DetTargets { levels: out }
}

#[inline]
fn centerness_of([l, t, r, b]: [f64; 4]) -> f64 {
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`
pub fn centerness_target(l: f64, t: f64, r: f64, b: f64) -> Result<f64> {
    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "centerness needs positive distances, got ({l}, {t}, {r}, {b})"
        )));
    }
    Ok(centerness_of([l, t, r, b]))
}

/// GIoU between two boxes given as side distances `(l, t, r, b)` from a
/// shared location, and its gradient with respect to the second box.
pub fn giou_pair(a: [f64; 4], b: [f64; 4]) -> Result<(f64, [f64; 4])> {
    if a.iter().chain(&b).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "GIoU needs positive finite distances, got {a:?} and {b:?}"
        )));
    }
    Ok(giou_unchecked(a, b))
}

fn giou_unchecked(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let [al, at, ar, ab] = a;
    let [bl, bt, br, bb] = b;
    let area_a = (al + ar) * (at + ab);
    let area_b = (bl + br) * (bt + bb);

    let iw = al.min(bl) + ar.min(br);
    let ih = at.min(bt) + ab.min(bb);
    let inter = iw * ih;
    let union = area_a + area_b - inter;

    let cw = al.max(bl) + ar.max(br);
    let ch = at.max(bt) + ab.max(bb);
    let enclose = cw * ch;

    let giou = inter / union - (enclose - union) / enclose;

    // Which argument each min/max selects, as a 0/1 indicator on b.
    let ind = |pick_b: bool| if pick_b { 1.0 } else { 0.0 };
    let d_inter = [
        ih * ind(bl < al),
        iw * ind(bt < at),
        ih * ind(br < ar),
        iw * ind(bb < ab),
    ];
    let d_area_b = [bt + bb, bl + br, bt + bb, bl + br];
    let d_enclose = [
        ch * ind(bl > al),
        cw * ind(bt > at),
        ch * ind(br > ar),
        cw * ind(bb > ab),
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_b[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        // -(C - U)/C = U/C - 1
        let d_pen = (d_union * enclose - union * d_enclose[k]) / (enclose * enclose);
        grad[k] = d_iou + d_pen;
    }
    (giou, grad)
}

/// The three loss terms, their sum, the soft positive count, and
/// gradients over the student's raw head outputs.
#[derive(Debug, Clone)]
pub struct DetLoss {
    pub cls: f64,
    pub reg: f64,
    pub center: f64,
    pub total: f64,
    /// `sum p_T` before clamping.
    pub n_pos: f64,
    pub grads: DetGrads,
}

#[inline]
fn floored_ln(p: f64) -> f64 {
    p.max(crate::seg_loss::LOG_FLOOR).ln()
}

#[inline]
fn bce(target: f64, pred: f64) -> f64 {
    -target * floored_ln(pred) - (1.0 - target) * floored_ln(1.0 - pred)
}

/// Soft-target output matching between a teacher and a student field.
pub fn det_distill_loss(teacher: &DetField, student: &DetField) -> Result<DetLoss> {
    teacher.check_geometry(student)?;
    if !teacher.is_finite() {
        return Err(Error::NonFinite("teacher detection field".into()));
    }
    if !student.is_finite() {
        return Err(Error::NonFinite("student detection field".into()));
    }
    let n_pos: f64 = teacher
        .levels
        .iter()
        .map(|l| l.cls.values().iter().sum::<f64>())
        .sum();
    let norm = n_pos.max(1.0);
    let inv_norm = 1.0 / norm;

    let (mut l_cls, mut l_reg, mut l_center) = (0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(teacher.levels.len());
    for (t, s) in teacher.levels.iter().zip(&student.levels) {
        let (c, h, w) = t.cls.shape();
        let n = h * w;
        let mut g = LevelField::zeros(c, h, w);

        let (tc, sc) = (t.cls.values(), s.cls.values());
        let mut cls_sum = 0.0;
        for i in 0..c * n {
            cls_sum += bce(tc[i], sc[i]);
            g.cls.values_mut()[i] = (sc[i] - tc[i]) * inv_norm;
        }
        l_cls += cls_sum * inv_norm;

        let (tr, sr) = (t.reg.values(), s.reg.values());
        for p in 0..n {
            let weight: f64 = (0..c).map(|k| tc[k * n + p]).sum::<f64>() * inv_norm;
            let ta = [tr[p], tr[n + p], tr[2 * n + p], tr[3 * n + p]];
            let sa = [sr[p], sr[n + p], sr[2 * n + p], sr[3 * n + p]];
            let (giou, dgiou) = giou_pair(ta, sa)?;
            l_reg += weight * (1.0 - giou);
            for k in 0..4 {
                // d/dz of exp(z) * stride is the distance itself
                g.reg.values_mut()[k * n + p] = -weight * dgiou[k] * sa[k];
            }
        }

        let (tq, sq) = (t.center.values(), s.center.values());
        for p in 0..n {
            l_center += bce(tq[p], sq[p]);
            g.center.values_mut()[p] = sq[p] - tq[p];
        }
        grads.push(g);
    }
    Ok(DetLoss {
        cls: l_cls,
        reg: l_reg,
        center: l_center,
        total: l_cls + l_reg + l_center,
        n_pos,
        grads: DetGrads { levels: grads },
    })
}

/// The hard-label loss: [`det_distill_loss`] against the one-hot field
/// built from `targets`.
pub fn det_supervised_loss(student: &DetField, targets: &DetTargets) -> Result<DetLoss> {
    if targets.levels.len() != student.levels.len() {
        return Err(Error::shape("targets and student differ in level count"));
    }
    let hard = targets.to_field(student.num_classes())?;
    det_distill_loss(&hard, student)
}
