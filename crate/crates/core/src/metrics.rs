//! Segmentation and detection evaluation.

use crate::det_loss::{DetField, GroundTruth, LevelSpec};
use crate::seg_loss::{LabelMap, IGNORE};
use crate::{Error, Result};

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape("confusion counts are not square"));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("merging matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Counts every non-ignored pixel of `gt` against `pred`.
pub fn accumulate_confusion(pred: &LabelMap, gt: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape("prediction and ground truth extents differ"));
    }
    let k = cm.num_classes;
    for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
        if g == IGNORE {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= k || g >= k {
            return Err(Error::InvalidArgument(format!(
                "class id {} outside the {k}-class matrix",
                p.max(g)
            )));
        }
        cm.counts[g * k + p] += 1;
    }
    Ok(())
}

/// Per-class IoU (`None` where the class has an empty union) and their
/// mean over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let gt_total: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred_total: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let union = gt_total + pred_total - tp;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoDefinedClass);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, mean))
}

/// Fraction of pixels on which two predictions agree.
pub fn agreement(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape("agreement between maps of different extent"));
    }
    let n = a.ids().len();
    if n == 0 {
        return Err(Error::shape("agreement over an empty map"));
    }
    let same = a.ids().iter().zip(b.ids()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / n as f64)
}

/// Running agreement over several image pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgreementCounter {
    pub same: u64,
    pub total: u64,
}

impl AgreementCounter {
    pub fn add(&mut self, a: &LabelMap, b: &LabelMap) -> Result<()> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::shape("agreement between maps of different extent"));
        }
        self.same += a.ids().iter().zip(b.ids()).filter(|(x, y)| x == y).count() as u64;
        self.total += a.ids().len() as u64;
        Ok(())
    }

    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.same as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class: u8,
    pub score: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Plain IoU of two `(x1, y1, x2, y2)` boxes.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn det_box(d: &Detection) -> [f64; 4] {
    [d.x1, d.y1, d.x2, d.y2]
}

/// Decodes a head field into scored boxes.
///
/// A location/class pair is a candidate when its class probability reaches
/// `score_thresh`; its score is `sqrt(p * centerness)`. Candidates go
/// through greedy per-class NMS and the best `max_dets` are kept.
pub fn decode_detections(
    field: &DetField,
    levels: &[LevelSpec],
    score_thresh: f64,
    nms_iou: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let mut cands = Vec::new();
    for (lf, spec) in field.levels.iter().zip(levels) {
        let (c, h, w) = lf.cls.shape();
        let n = h * w;
        let (cls, reg, ctr) = (lf.cls.values(), lf.reg.values(), lf.center.values());
        for gy in 0..h {
            for gx in 0..w {
                let p = gy * w + gx;
                let (px, py) = spec.location(gx, gy);
                for k in 0..c {
                    let prob = cls[k * n + p];
                    if prob < score_thresh {
                        continue;
                    }
                    cands.push(Detection {
                        x1: px - reg[p],
                        y1: py - reg[n + p],
                        x2: px + reg[2 * n + p],
                        y2: py + reg[3 * n + p],
                        class: k as u8,
                        score: (prob * ctr[p]).sqrt(),
                    });
                }
            }
        }
    }
    // stable: equal scores keep decode order
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        if kept.len() >= max_dets {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && box_iou(det_box(k), det_box(&d)) > nms_iou);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Bounding boxes and the COCO size buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(self, area: f64) -> bool {
        const S: f64 = 32.0 * 32.0;
        const M: f64 = 96.0 * 96.0;
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < S,
            AreaRange::Medium => (S..M).contains(&area),
            AreaRange::Large => area >= M,
        }
    }
}

/// IoU thresholds `0.50:0.05:0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + i as f64 * 0.05)
}

/// Recall thresholds `0.00:0.01:1.00`.
pub fn recall_thresholds() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

pub const MAX_DETS_PER_IMAGE: usize = 100;

/// COCO-style detection summary. `None` marks a value with no ground truth
/// to score against.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct APReport {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub aps: Option<f64>,
    pub apm: Option<f64>,
    pub apl: Option<f64>,
}

impl APReport {
    pub fn named(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("mAP", self.map),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("APs", self.aps),
            ("APm", self.apm),
            ("APl", self.apl),
        ]
    }
}

/// Interpolated AP for one (class, area range, IoU threshold), or `None`
/// when no ground truth falls in the range.
fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[GroundTruth],
    class: u8,
    range: AreaRange,
    iou_thr: f64,
) -> Option<f64> {
    // (score, is_tp) for every non-ignored detection, images in order
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (img_dets, gt) in dets.iter().zip(gts) {
        // non-ignored ground truth first so matches prefer it
        let mut g: Vec<([f64; 4], bool)> = gt
            .boxes
            .iter()
            .filter(|b| b.class == class)
            .map(|b| ([b.x1, b.y1, b.x2, b.y2], !range.contains(b.area())))
            .collect();
        g.sort_by_key(|(_, ignore)| *ignore);
        n_gt += g.iter().filter(|(_, ignore)| !ignore).count();

        let mut d: Vec<&Detection> = img_dets.iter().filter(|d| d.class == class).collect();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(MAX_DETS_PER_IMAGE);

        let mut taken = vec![false; g.len()];
        for det in d {
            let mut best: Option<usize> = None;
            let mut best_iou = iou_thr;
            for (gi, (gbox, gignore)) in g.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                // once matched to a real gt, never fall back to an ignored one
                if let Some(b) = best {
                    if !g[b].1 && *gignore {
                        break;
                    }
                }
                let iou = box_iou(*gbox, det_box(det));
                if iou < best_iou {
                    continue;
                }
                best_iou = iou;
                best = Some(gi);
            }
            match best {
                Some(gi) => {
                    taken[gi] = true;
                    if !g[gi].1 {
                        scored.push((det.score, true));
                    }
                }
                None => {
                    if range.contains(det.area()) {
                        scored.push((det.score, false));
                    }
                }
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    // stable sort keeps image order among equal scores
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &scored {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let rt = recall_thresholds();
    let mut sum = 0.0;
    for r in rt {
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / rt.len() as f64)
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// COCO-style AP suite: mAP over IoU 0.50:0.05:0.95, AP50, AP75 and the
/// small/medium/large buckets, averaged over classes with ground truth.
pub fn coco_ap_suite(dets: &[Vec<Detection>], gts: &[GroundTruth]) -> Result<APReport> {
    if dets.len() != gts.len() {
        return Err(Error::shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let max_class = gts
        .iter()
        .flat_map(|g| g.boxes.iter().map(|b| b.class))
        .chain(dets.iter().flatten().map(|d| d.class))
        .max();
    let Some(max_class) = max_class else {
        return Ok(APReport::default());
    };
    let classes: Vec<u8> = (0..=max_class).collect();
    let thr = iou_thresholds();
    let table = |range: AreaRange, t: &[f64]| {
        mean_defined(
            t.iter()
                .flat_map(|&th| classes.iter().map(move |&c| (c, th)))
                .map(|(c, th)| average_precision(dets, gts, c, range, th)),
        )
    };
    Ok(APReport {
        map: table(AreaRange::All, &thr),
        ap50: table(AreaRange::All, &thr[..1]),
        ap75: table(AreaRange::All, &thr[5..6]),
        aps: table(AreaRange::Small, &thr),
        apm: table(AreaRange::Medium, &thr),
        apl: table(AreaRange::Large, &thr),
    })
}
