//! Scalar reference implementations and random instance builders shared by
//! the integration tests. Nothing here calls the library routine it is
//! checking.
#![allow(dead_code)]

use std::collections::HashSet;

use fmatch::det_loss::{assign_targets, BoxLabel, DetField, GroundTruth, LevelField, LevelSpec};
use fmatch::metrics::Detection;
use fmatch::nn::{self, LayerKind, NetworkSpec, ParamSet};
use fmatch::rng::{self, FmRng, Rng};
use fmatch::seg_loss::{LabelMap, IGNORE};
use fmatch::DenseMap;

pub fn rng(seed: u64) -> FmRng {
    rng::seeded(seed, 0xC0FFEE)
}

pub fn random_map(r: &mut FmRng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> DenseMap {
    DenseMap::from_fn(c, h, w, |_, _, _| r.random_range(lo..hi))
}

/// Random per-pixel distributions, occasionally with exact zeros.
pub fn random_probs(r: &mut FmRng, c: usize, h: usize, w: usize) -> DenseMap {
    let mut m = DenseMap::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut v: Vec<f64> = (0..c)
                .map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.01..1.0) })
                .collect();
            if v.iter().all(|&p| p == 0.0) {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            for (k, p) in v.iter().enumerate() {
                m.set(k, y, x, p / s);
            }
        }
    }
    m
}

pub fn scalar_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn ln_floor(p: f64) -> f64 {
    p.max(1e-30).ln()
}

/// Pixel-averaged `sum_c pT (ln pT - ln pS)` with `pS = softmax(logits)`.
pub fn kl_oracle(teacher: &DenseMap, logits: &DenseMap) -> f64 {
    let (c, h, w) = logits.shape();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let z: Vec<f64> = (0..c).map(|k| logits.get(k, y, x)).collect();
            let ps = scalar_softmax(&z);
            for k in 0..c {
                let pt = teacher.get(k, y, x);
                if pt > 0.0 {
                    total += pt * (ln_floor(pt) - ln_floor(ps[k]));
                }
            }
        }
    }
    total / (h * w) as f64
}

pub fn ce_oracle(logits: &DenseMap, labels: &LabelMap) -> f64 {
    let (c, h, w) = logits.shape();
    let (mut total, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let id = labels.get(y, x);
            if id == IGNORE {
                continue;
            }
            let z: Vec<f64> = (0..c).map(|k| logits.get(k, y, x)).collect();
            total -= ln_floor(scalar_softmax(&z)[id as usize]);
            n += 1;
        }
    }
    total / n as f64
}

/// Zero-padded 3x3 convolution written as six nested loops. Weights are
/// `[out][in][ky][kx]` followed by one bias per output channel.
pub fn conv_oracle(input: &DenseMap, params: &[f64], out_c: usize) -> DenseMap {
    let (in_c, h, w) = input.shape();
    let bias = &params[out_c * in_c * 9..];
    let mut out = DenseMap::zeros(out_c, h, w);
    for o in 0..out_c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for i in 0..in_c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let wv = params[((o * in_c + i) * 3 + ky) * 3 + kx];
                            acc += wv * input.get(i, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(o, y, x, acc);
            }
        }
    }
    out
}

pub fn bce(t: f64, p: f64) -> f64 {
    -t * ln_floor(p) - (1.0 - t) * ln_floor(1.0 - p)
}

/// GIoU of two boxes given as corner coordinates.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

/// Side distances about a point to corner coordinates about the origin.
pub fn ltrb_box(d: [f64; 4]) -> [f64; 4] {
    [-d[0], -d[1], d[2], d[3]]
}

/// `(L_cls, L_reg, L_center)` of the soft-target detection loss, by
/// direct summation.
pub fn det_distill_oracle(teacher: &DetField, student: &DetField) -> (f64, f64, f64) {
    let mut n_pos = 0.0;
    for l in &teacher.levels {
        let (c, h, w) = l.cls.shape();
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    n_pos += l.cls.get(k, y, x);
                }
            }
        }
    }
    let norm = if n_pos < 1.0 { 1.0 } else { n_pos };
    let (mut cls, mut reg, mut ctr) = (0.0, 0.0, 0.0);
    for (t, s) in teacher.levels.iter().zip(&student.levels) {
        let (c, h, w) = t.cls.shape();
        for y in 0..h {
            for x in 0..w {
                let mut wsum = 0.0;
                for k in 0..c {
                    cls += bce(t.cls.get(k, y, x), s.cls.get(k, y, x)) / norm;
                    wsum += t.cls.get(k, y, x);
                }
                let td = [0, 1, 2, 3].map(|k| t.reg.get(k, y, x));
                let sd = [0, 1, 2, 3].map(|k| s.reg.get(k, y, x));
                reg += wsum / norm * (1.0 - giou_corners(ltrb_box(td), ltrb_box(sd)));
                ctr += bce(t.center.get(0, y, x), s.center.get(0, y, x));
            }
        }
    }
    (cls, reg, ctr)
}

pub fn centerness_oracle(d: [f64; 4]) -> f64 {
    let lr = d[0].min(d[2]) / d[0].max(d[2]);
    let tb = d[1].min(d[3]) / d[1].max(d[3]);
    (lr * tb).sqrt()
}

/// The FCOS loss with binary cross-entropy classification, written from
/// the hard assignment: positives come from strict containment, the
/// level's distance range and smallest area.
pub fn fcos_supervised_oracle(
    student: &DetField,
    gt: &GroundTruth,
    levels: &[LevelSpec],
) -> (f64, f64, f64) {
    struct Pos {
        class: usize,
        d: [f64; 4],
    }
    let mut assigned: Vec<Vec<Option<Pos>>> = Vec::new();
    let mut n_pos = 0usize;
    for (spec, s) in levels.iter().zip(&student.levels) {
        let (_, h, w) = s.cls.shape();
        let mut lv = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let px = spec.stride as f64 * (x as f64 + 0.5);
                let py = spec.stride as f64 * (y as f64 + 0.5);
                let mut best: Option<(f64, Pos)> = None;
                for b in &gt.boxes {
                    let d = [px - b.x1, py - b.y1, b.x2 - px, b.y2 - py];
                    let inside = d.iter().all(|&v| v > 0.0);
                    let m = d[0].max(d[1]).max(d[2]).max(d[3]);
                    if !inside || m <= spec.min_dist || m > spec.max_dist {
                        continue;
                    }
                    let area = (b.x2 - b.x1) * (b.y2 - b.y1);
                    if best.as_ref().is_none_or(|(a, _)| area < *a) {
                        best = Some((
                            area,
                            Pos {
                                class: b.class as usize,
                                d,
                            },
                        ));
                    }
                }
                if best.is_some() {
                    n_pos += 1;
                }
                lv.push(best.map(|(_, p)| p));
            }
        }
        assigned.push(lv);
    }
    let norm = n_pos.max(1) as f64;
    let (mut cls, mut reg, mut ctr) = (0.0, 0.0, 0.0);
    for (lv, s) in assigned.iter().zip(&student.levels) {
        let (c, _, w) = s.cls.shape();
        for (p, a) in lv.iter().enumerate() {
            let (y, x) = (p / w, p % w);
            for k in 0..c {
                let target = match a {
                    Some(pos) if pos.class == k => 1.0,
                    _ => 0.0,
                };
                cls += bce(target, s.cls.get(k, y, x)) / norm;
            }
            let q_target = match a {
                Some(pos) => {
                    let sd = [0, 1, 2, 3].map(|k| s.reg.get(k, y, x));
                    reg += (1.0 - giou_corners(ltrb_box(pos.d), ltrb_box(sd))) / norm;
                    centerness_oracle(pos.d)
                }
                None => 0.0,
            };
            ctr += bce(q_target, s.center.get(0, y, x));
        }
    }
    (cls, reg, ctr)
}

/// A random single-class-distribution detection field on `levels` for an
/// `h x w` input.
pub fn random_field(r: &mut FmRng, levels: &[LevelSpec], c: usize, h: usize, w: usize) -> DetField {
    DetField {
        levels: levels
            .iter()
            .map(|l| {
                let (gh, gw) = l.grid(h, w);
                LevelField {
                    cls: random_map(r, c, gh, gw, 0.01, 0.99),
                    reg: random_map(r, 4, gh, gw, 0.3, 3.0).map(|v| v * l.stride as f64),
                    center: random_map(r, 1, gh, gw, 0.01, 0.99),
                }
            })
            .collect(),
    }
}

pub fn random_raw(r: &mut FmRng, levels: &[LevelSpec], c: usize, h: usize, w: usize) -> Vec<DenseMap> {
    levels
        .iter()
        .map(|l| {
            let (gh, gw) = l.grid(h, w);
            random_map(r, c + 5, gh, gw, -2.0, 2.0)
        })
        .collect()
}

pub fn random_boxes(r: &mut FmRng, n: usize, classes: u8, h: f64, w: f64) -> GroundTruth {
    let boxes = (0..n)
        .map(|_| {
            let bw = r.random_range(2.0..w / 1.5);
            let bh = r.random_range(2.0..h / 1.5);
            let x1 = r.random_range(0.0..w - bw);
            let y1 = r.random_range(0.0..h - bh);
            BoxLabel {
                x1,
                y1,
                x2: x1 + bw,
                y2: y1 + bh,
                class: r.random_range(0..classes),
            }
        })
        .collect();
    GroundTruth { boxes }
}

/// Per-class IoU from explicit pixel sets.
pub fn miou_oracle(preds: &[LabelMap], gts: &[LabelMap], c: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let mut per = Vec::new();
    for k in 0..c as u8 {
        let mut p_set = HashSet::new();
        let mut g_set = HashSet::new();
        for (img, (p, g)) in preds.iter().zip(gts).enumerate() {
            for (i, (&pv, &gv)) in p.ids().iter().zip(g.ids()).enumerate() {
                if gv == IGNORE {
                    continue;
                }
                if pv == k {
                    p_set.insert((img, i));
                }
                if gv == k {
                    g_set.insert((img, i));
                }
            }
        }
        let union = p_set.union(&g_set).count();
        let inter = p_set.intersection(&g_set).count();
        per.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per, mean)
}

fn corner_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let u = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / u
}

/// AP for one class, IoU threshold and area range, by building the whole
/// precision/recall curve and taking, for every recall threshold, the best
/// precision at any rank reaching it.
pub fn ap_oracle(
    dets: &[Vec<Detection>],
    gts: &[GroundTruth],
    class: u8,
    area: (f64, f64),
    thr: f64,
) -> Option<f64> {
    let in_range = |a: f64| a >= area.0 && a < area.1;
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0;
    for (ds, g) in dets.iter().zip(gts) {
        let boxes: Vec<([f64; 4], bool)> = g
            .boxes
            .iter()
            .filter(|b| b.class == class)
            .map(|b| ([b.x1, b.y1, b.x2, b.y2], in_range(b.area())))
            .collect();
        n_gt += boxes.iter().filter(|b| b.1).count();
        let mut mine: Vec<&Detection> = ds.iter().filter(|d| d.class == class).collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        mine.truncate(100);
        let mut used = vec![false; boxes.len()];
        for d in mine {
            let db = [d.x1, d.y1, d.x2, d.y2];
            // best counted gt, else best out-of-range gt; ties go to the later box
            let pick = |counted: bool| {
                let mut best: Option<(usize, f64)> = None;
                for (i, (b, c)) in boxes.iter().enumerate() {
                    let iou = corner_iou(*b, db);
                    if used[i] || *c != counted || iou < thr {
                        continue;
                    }
                    if best.is_none_or(|(_, v)| iou >= v) {
                        best = Some((i, iou));
                    }
                }
                best.map(|(i, _)| i)
            };
            match pick(true).map(|i| (i, true)).or_else(|| pick(false).map(|i| (i, false))) {
                Some((i, counted)) => {
                    used[i] = true;
                    if counted {
                        ranked.push((d.score, true));
                    }
                }
                None => {
                    if in_range(d.area()) {
                        ranked.push((d.score, false));
                    }
                }
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut curve = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub const AREA_ALL: (f64, f64) = (0.0, f64::INFINITY);
pub const AREA_S: (f64, f64) = (0.0, 1024.0);
pub const AREA_M: (f64, f64) = (1024.0, 9216.0);
pub const AREA_L: (f64, f64) = (9216.0, f64::INFINITY);

/// The full AP suite from [`ap_oracle`]: mAP, AP50, AP75, APs, APm, APl.
pub fn ap_suite_oracle(dets: &[Vec<Detection>], gts: &[GroundTruth], classes: u8) -> [Option<f64>; 6] {
    let thr: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mean = |area: (f64, f64), ts: &[f64]| {
        let v: Vec<f64> = ts
            .iter()
            .flat_map(|&t| (0..classes).map(move |c| (c, t)))
            .filter_map(|(c, t)| ap_oracle(dets, gts, c, area, t))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    [
        mean(AREA_ALL, &thr),
        mean(AREA_ALL, &thr[..1]),
        mean(AREA_ALL, &thr[5..6]),
        mean(AREA_S, &thr),
        mean(AREA_M, &thr),
        mean(AREA_L, &thr),
    ]
}

/// Random detections near the given ground truth plus clutter.
pub fn random_dets(r: &mut FmRng, gt: &GroundTruth, classes: u8, extra: usize) -> Vec<Detection> {
    let mut out = Vec::new();
    for b in &gt.boxes {
        if r.random_bool(0.8) {
            let j = |r: &mut FmRng| r.random_range(-3.0..3.0);
            let x1 = b.x1 + j(r);
            let y1 = b.y1 + j(r);
            out.push(Detection {
                x1,
                y1,
                x2: (b.x2 + j(r)).max(x1 + 1.0),
                y2: (b.y2 + j(r)).max(y1 + 1.0),
                class: if r.random_bool(0.85) { b.class } else { r.random_range(0..classes) },
                score: r.random_range(0.0..1.0),
            });
        }
    }
    for _ in 0..extra {
        let x1 = r.random_range(0.0..100.0);
        let y1 = r.random_range(0.0..100.0);
        out.push(Detection {
            x1,
            y1,
            x2: x1 + r.random_range(1.0..60.0),
            y2: y1 + r.random_range(1.0..60.0),
            class: r.random_range(0..classes),
            score: r.random_range(0.0..1.0),
        });
    }
    out
}

/// Largest coordinate-wise error of `analytic` against `numeric`, relative
/// to the largest numeric magnitude.
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let fp = f(&xs);
            xs[i] = orig - h;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `sum(g * f(x))` for a fixed random `g`, so its gradient is the
/// backward pass of `g`.
pub fn probe_loss(spec: &NetworkSpec, params: &ParamSet, x: &DenseMap, g: &DenseMap) -> f64 {
    let y = nn::predict(spec, params, x).unwrap();
    y.values().iter().zip(g.values()).map(|(a, b)| a * b).sum()
}

pub fn with_flat(params: &ParamSet, flat: &[f64]) -> ParamSet {
    let mut p = params.clone();
    let mut off = 0;
    for (_, v) in p.entries_mut() {
        let n = v.len();
        v.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    p
}

pub fn flat(params: &ParamSet) -> Vec<f64> {
    params.entries().iter().flat_map(|(_, v)| v.iter().copied()).collect()
}

/// Smallest |pre-activation| feeding any relu.
pub fn relu_margin(spec: &NetworkSpec, params: &ParamSet, x: &DenseMap) -> f64 {
    let (_, cache) = nn::forward(spec, params, x).unwrap();
    let mut m = f64::INFINITY;
    for (i, l) in spec.layers.iter().enumerate() {
        if l.kind == LayerKind::Relu {
            let input = if i == 0 { cache.input() } else { cache.layer_output(i - 1) };
            m = m.min(input.values().iter().fold(f64::INFINITY, |a, v| a.min(v.abs())));
        }
    }
    m
}

/// Checks parameter and input gradients of `spec` against central
/// differences; returns the worst relative error.
pub fn check_network(spec: &NetworkSpec, seed: u64, in_h: usize, in_w: usize) -> f64 {
    let mut attempt = 0;
    loop {
        let mut r = rng(seed * 1000 + attempt);
        let mut params = nn::init_params(spec, seed + attempt).unwrap();
        for (_, v) in params.entries_mut() {
            for x in v.iter_mut() {
                *x += r.random_range(-0.2..0.2);
            }
        }
        let x = random_map(&mut r, spec.in_channels(), in_h, in_w, -1.0, 1.0);
        if relu_margin(spec, &params, &x) < 1e-3 {
            attempt += 1;
            continue;
        }
        let (y, cache) = nn::forward(spec, &params, &x).unwrap();
        let (oc, oh, ow) = y.shape();
        let g = random_map(&mut r, oc, oh, ow, -1.0, 1.0);
        let (pg, ig) = nn::backward(spec, &params, &cache, &g).unwrap();

        let p0 = flat(&params);
        let num_p = numeric_grad(&p0, 1e-5, |p| probe_loss(spec, &with_flat(&params, p), &x, &g));
        let num_x = numeric_grad(x.values(), 1e-5, |v| {
            let xi = DenseMap::from_vec(x.channels(), in_h, in_w, v.to_vec()).unwrap();
            probe_loss(spec, &params, &xi, &g)
        });
        return grad_rel_err(&flat(&pg), &num_p).max(grad_rel_err(ig.values(), &num_x));
    }
}

/// Builds the one-hot teacher field from the box list directly.
pub fn one_hot_teacher(gt: &GroundTruth, levels: &[LevelSpec], c: usize, h: usize, w: usize) -> DetField {
    let targets = assign_targets(gt, levels, h, w);
    let mut out = Vec::new();
    for (lt, spec) in targets.levels.iter().zip(levels) {
        let (gh, gw) = spec.grid(h, w);
        let mut f = LevelField {
            cls: DenseMap::zeros(c, gh, gw),
            reg: DenseMap::filled(4, gh, gw, 1.0),
            center: DenseMap::zeros(1, gh, gw),
        };
        for gy in 0..gh {
            for gx in 0..gw {
                if let Some(k) = lt.class[gy * gw + gx] {
                    f.cls.set(k as usize, gy, gx, 1.0);
                    let d: [f64; 4] = std::array::from_fn(|i| lt.reg.get(i, gy, gx));
                    for (i, v) in d.iter().enumerate() {
                        f.reg.set(i, gy, gx, *v);
                    }
                    f.center.set(0, gy, gx, centerness_oracle(d));
                }
            }
        }
        out.push(f);
    }
    DetField { levels: out }
}
