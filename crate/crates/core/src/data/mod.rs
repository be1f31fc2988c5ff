//! Procedural driving scenes, augmentation, and the unlabeled frame stream.
//!
//! Each scene is a pure function of `(world.seed, index)`. Index space is
//! split three ways: `[0, labeled_count)` is the labeled training set,
//! the next `val_count` indices are the validation set, and everything
//! after that is the unlabeled stream.

mod io;

pub use io::{
    read_boxes, read_dataset, read_image, read_labels, write_boxes, write_dataset, write_image,
    write_labels, BoxesRecord,
};

use crate::det_loss::{BoxLabel, GroundTruth};
use crate::rng::{self, FmRng, Rng};
use crate::seg_loss::{LabelMap, IGNORE};
use crate::tensor::{bilinear_resize_at, nearest_index, DenseMap};
use crate::{Error, Result};

pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;

/// Foreground shape families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Disc,
    /// Isosceles triangle with a flattened apex.
    Triangle,
}

/// How instances of one foreground class are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub shape: Shape,
    /// Width range in pixels (diameter for discs).
    pub width: (f64, f64),
    /// Height range in pixels (ignored for discs).
    pub height: (f64, f64),
    /// Mean RGB; instances jitter around it by `color_jitter`.
    pub color: [f64; 3],
    pub color_jitter: f64,
    /// Stripe period in pixels and orientation in radians.
    pub stripe_period: f64,
    pub stripe_angle: f64,
    pub stripe_amplitude: f64,
}

const BASE_STYLES: [ClassStyle; 4] = [
    // vehicle
    ClassStyle {
        shape: Shape::Rect,
        width: (14.0, 30.0),
        height: (8.0, 14.0),
        color: [0.55, 0.35, 0.35],
        color_jitter: 0.25,
        stripe_period: 6.0,
        stripe_angle: 0.0,
        stripe_amplitude: 0.25,
    },
    // pedestrian
    ClassStyle {
        shape: Shape::Rect,
        width: (5.0, 9.0),
        height: (12.0, 22.0),
        color: [0.45, 0.4, 0.5],
        color_jitter: 0.25,
        stripe_period: 4.0,
        stripe_angle: std::f64::consts::FRAC_PI_2,
        stripe_amplitude: 0.25,
    },
    // sign
    ClassStyle {
        shape: Shape::Disc,
        width: (8.0, 16.0),
        height: (8.0, 16.0),
        color: [0.6, 0.45, 0.3],
        color_jitter: 0.25,
        stripe_period: 5.0,
        stripe_angle: std::f64::consts::FRAC_PI_4,
        stripe_amplitude: 0.25,
    },
    // cone
    ClassStyle {
        shape: Shape::Triangle,
        width: (8.0, 16.0),
        height: (9.0, 18.0),
        color: [0.85, 0.45, 0.15],
        color_jitter: 0.25,
        stripe_period: 8.0,
        stripe_angle: -std::f64::consts::FRAC_PI_4,
        stripe_amplitude: 0.25,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    /// Two background classes (road, sky) plus foreground classes.
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Standard deviation of additive per-pixel noise.
    pub noise: f64,
    pub labeled_count: usize,
    pub val_count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            num_classes: 6,
            height: 64,
            width: 128,
            min_objects: 2,
            max_objects: 6,
            noise: 0.06,
            labeled_count: 10,
            val_count: 24,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 || self.num_classes > IGNORE as usize {
            return Err(Error::InvalidArgument(format!(
                "{} classes; need road, sky and at least one foreground class",
                self.num_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument("world images must be at least 8x8".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument("min_objects exceeds max_objects".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Drawing style of foreground class `class` (>= 2).
    pub fn style(&self, class: u8) -> ClassStyle {
        let k = (class as usize).saturating_sub(2);
        let mut s = BASE_STYLES[k % BASE_STYLES.len()];
        // classes beyond the base table reuse a shape with rotated stripes
        let cycle = k / BASE_STYLES.len();
        s.stripe_angle += cycle as f64 * 0.7;
        s.stripe_period += cycle as f64;
        s
    }

    pub fn labeled_indices(&self) -> std::ops::Range<u64> {
        0..self.labeled_count as u64
    }

    pub fn val_indices(&self) -> std::ops::Range<u64> {
        let start = self.labeled_count as u64;
        start..start + self.val_count as u64
    }

    /// First index of the unlabeled stream.
    pub fn unlabeled_base(&self) -> u64 {
        (self.labeled_count + self.val_count) as u64
    }

    pub fn class_names(&self) -> Vec<String> {
        const NAMES: [&str; 6] = ["road", "sky", "vehicle", "pedestrian", "sign", "cone"];
        (0..self.num_classes)
            .map(|c| {
                NAMES
                    .get(c)
                    .map_or_else(|| format!("class{c}"), |s| s.to_string())
            })
            .collect()
    }
}

/// A labeled scene: RGB image in `[0, 1]`, dense labels and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: DenseMap,
    pub labels: LabelMap,
    pub gt: GroundTruth,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

fn inside(shape: Shape, b: &BoxLabel, px: f64, py: f64) -> bool {
    if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
        return false;
    }
    match shape {
        Shape::Rect => true,
        Shape::Disc => {
            let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
            let r = (b.x2 - b.x1) / 2.0;
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            let f = (py - b.y1) / (b.y2 - b.y1);
            let half = (0.2 + 0.8 * f) * (b.x2 - b.x1) / 2.0;
            (px - (b.x1 + b.x2) / 2.0).abs() <= half
        }
    }
}

fn overlaps(a: &BoxLabel, b: &BoxLabel, margin: f64) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

/// Renders scene `index` of `world`. Bitwise deterministic.
pub fn generate_scene(world: &WorldConfig, index: u64) -> SceneSample {
    let mut rng = rng::seeded(world.seed, rng::stream::SCENE_BASE.wrapping_add(index));
    let (h, w) = (world.height, world.width);
    let (hf, wf) = (h as f64, w as f64);

    let horizon = rng::uniform(&mut rng, 0.3, 0.55) * hf;
    let road_tone = rng::uniform(&mut rng, 0.32, 0.5);
    let sky_top = [
        rng::uniform(&mut rng, 0.35, 0.55),
        rng::uniform(&mut rng, 0.5, 0.7),
        rng::uniform(&mut rng, 0.75, 0.95),
    ];
    let sky_fade = rng::uniform(&mut rng, 0.1, 0.3);

    let mut image = DenseMap::zeros(3, h, w);
    let mut labels = LabelMap::filled(h, w, ROAD);
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            if py < horizon {
                labels.set(y, x, SKY);
                let t = py / horizon;
                for c in 0..3 {
                    image.set(c, y, x, sky_top[c] + sky_fade * t);
                }
            } else {
                // lane markings every 32 px give the road some structure
                let lane = if (x / 4) % 8 == 0 && y as f64 > horizon + 6.0 { 0.12 } else { 0.0 };
                for c in 0..3 {
                    image.set(c, y, x, road_tone + lane + 0.02 * c as f64);
                }
            }
        }
    }

    let n_obj = rng.random_range(world.min_objects..=world.max_objects);
    let n_fg = world.num_classes - 2;
    let mut boxes: Vec<(BoxLabel, ClassStyle)> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = 2 + rng.random_range(0..n_fg) as u8;
        let style = world.style(class);
        let bw = rng::uniform(&mut rng, style.width.0, style.width.1).round();
        let bh = match style.shape {
            Shape::Disc => bw,
            _ => rng::uniform(&mut rng, style.height.0, style.height.1).round(),
        };
        if bw >= wf || bh >= hf {
            continue;
        }
        let mut placed = None;
        for _ in 0..20 {
            let x1 = rng.random_range(0..=(w - bw as usize)) as f64;
            // objects stand on the road; signs may float anywhere
            let y1 = if style.shape == Shape::Disc {
                rng.random_range(0..=(h - bh as usize)) as f64
            } else {
                let lo = (horizon - bh * 0.5).max(0.0).floor() as usize;
                let hi = h - bh as usize;
                rng.random_range(lo.min(hi)..=hi) as f64
            };
            let b = BoxLabel {
                x1,
                y1,
                x2: x1 + bw,
                y2: y1 + bh,
                class,
            };
            if boxes.iter().all(|(o, _)| !overlaps(o, &b, 1.0)) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else { continue };
        boxes.push((b, style));
    }

    for (b, style) in &boxes {
        let base: [f64; 3] = std::array::from_fn(|c| {
            (style.color[c] + rng::uniform(&mut rng, -style.color_jitter, style.color_jitter))
                .clamp(0.05, 0.95)
        });
        let phase = rng::uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let (sa, ca) = style.stripe_angle.sin_cos();
        let freq = std::f64::consts::TAU / style.stripe_period;
        for y in b.y1 as usize..(b.y2.ceil() as usize).min(h) {
            for x in b.x1 as usize..(b.x2.ceil() as usize).min(w) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !inside(style.shape, b, px, py) {
                    continue;
                }
                labels.set(y, x, b.class);
                let stripe = (freq * (px * ca + py * sa) + phase).sin();
                let gain = 1.0 + style.stripe_amplitude * stripe.signum();
                for c in 0..3 {
                    image.set(c, y, x, base[c] * gain);
                }
            }
        }
    }

    for v in image.values_mut() {
        *v = (*v + world.noise * rng::normal(&mut rng)).clamp(0.0, 1.0);
    }

    SceneSample {
        image,
        labels,
        gt: GroundTruth {
            boxes: boxes.into_iter().map(|(b, _)| b).collect(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    /// When false only the random crop is applied.
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: 0.5,
            scale_max: 2.0,
            hflip_prob: 0.5,
            crop_h: 32,
            crop_w: 64,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::InvalidArgument(format!(
                "scale range ({}, {}) must be positive and ordered",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidArgument("flip probability outside [0, 1]".into()));
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::InvalidArgument("crop size must be nonzero".into()));
        }
        Ok(())
    }

    /// Crop-only variant used when streaming unlabeled frames.
    pub fn crop_only(&self) -> Self {
        AugmentConfig {
            enabled: false,
            ..*self
        }
    }
}

/// One concrete draw of the augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    /// Top-left of the crop in the scaled (and flipped) image.
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

fn scaled_extent(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Draws augmentation parameters for an `h x w` sample. The draw order is
/// fixed (scale, flip, crop row, crop column) whatever `cfg.enabled` is.
pub fn sample_augment(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut FmRng) -> AugmentParams {
    let scale = rng::uniform(rng, cfg.scale_min, cfg.scale_max);
    let flip = rng.random::<f64>() < cfg.hflip_prob;
    let (scale, flip) = if cfg.enabled { (scale, flip) } else { (1.0, false) };
    let (sh, sw) = scaled_extent(h, w, scale);
    let crop_y = rng.random_range(0..=sh.saturating_sub(cfg.crop_h));
    let crop_x = rng.random_range(0..=sw.saturating_sub(cfg.crop_w));
    AugmentParams {
        scale,
        flip,
        crop_y,
        crop_x,
        crop_h: cfg.crop_h,
        crop_w: cfg.crop_w,
    }
}

/// Scale (bilinear for the image, nearest for labels), optional
/// horizontal flip, then crop. Regions past the scaled extent are padded
/// with zeros and the ignore label.
pub fn apply_augment(sample: &SceneSample, p: &AugmentParams) -> Result<SceneSample> {
    if p.crop_h == 0 || p.crop_w == 0 {
        return Err(Error::InvalidArgument("degenerate crop size".into()));
    }
    if !(p.scale > 0.0) {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let (sh, sw) = scaled_extent(h, w, p.scale);

    let (fx, fy) = (sw as f64 / w as f64, sh as f64 / h as f64);
    let mut boxes: Vec<BoxLabel> = sample
        .gt
        .boxes
        .iter()
        .map(|b| BoxLabel {
            x1: b.x1 * fx,
            y1: b.y1 * fy,
            x2: b.x2 * fx,
            y2: b.y2 * fy,
            class: b.class,
        })
        .collect();
    if p.flip {
        let swf = sw as f64;
        for b in &mut boxes {
            let (x1, x2) = (swf - b.x2, swf - b.x1);
            b.x1 = x1;
            b.x2 = x2;
        }
    }

    // only the crop window of the scaled, flipped scene is resampled
    let (ch, cw) = (p.crop_h, p.crop_w);
    let ys: Vec<usize> = (p.crop_y..(p.crop_y + ch).min(sh)).collect();
    let xs: Vec<usize> = (p.crop_x..(p.crop_x + cw).min(sw))
        .map(|x| if p.flip { sw - 1 - x } else { x })
        .collect();
    let window = bilinear_resize_at(&sample.image, sh, sw, &ys, &xs)?;
    let mut out_img = DenseMap::zeros(3, ch, cw);
    let mut out_lab = LabelMap::filled(ch, cw, IGNORE);
    for (y, &sy) in ys.iter().enumerate() {
        let ly = nearest_index(sy, h, sh);
        for (x, &sx) in xs.iter().enumerate() {
            for c in 0..3 {
                out_img.set(c, y, x, window.get(c, y, x));
            }
            out_lab.set(y, x, sample.labels.get(ly, nearest_index(sx, w, sw)));
        }
    }
    // visible extent of real pixels inside the crop
    let vis_w = sw.saturating_sub(p.crop_x).min(cw) as f64;
    let vis_h = sh.saturating_sub(p.crop_y).min(ch) as f64;
    let (ox, oy) = (p.crop_x as f64, p.crop_y as f64);
    let gt_boxes = boxes
        .into_iter()
        .filter_map(|b| {
            let c = BoxLabel {
                x1: (b.x1 - ox).clamp(0.0, vis_w),
                y1: (b.y1 - oy).clamp(0.0, vis_h),
                x2: (b.x2 - ox).clamp(0.0, vis_w),
                y2: (b.y2 - oy).clamp(0.0, vis_h),
                class: b.class,
            };
            c.is_valid().then_some(c)
        })
        .collect();
    Ok(SceneSample {
        image: out_img,
        labels: out_lab,
        gt: GroundTruth { boxes: gt_boxes },
    })
}

/// Draws parameters from `rng` and applies them.
pub fn augment(sample: &SceneSample, cfg: &AugmentConfig, rng: &mut FmRng) -> Result<SceneSample> {
    cfg.validate()?;
    let p = sample_augment(cfg, sample.height(), sample.width(), rng);
    apply_augment(sample, &p)
}

/// A frame from the unlabeled stream with its global scene index.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u64,
    pub image: DenseMap,
}

/// Endless stream of unlabeled frames, disjoint from the labeled and
/// validation index ranges.
#[derive(Debug, Clone)]
pub struct UnlabeledStream {
    world: WorldConfig,
    next: u64,
}

impl UnlabeledStream {
    /// Position of the next frame relative to the start of the stream.
    pub fn position(&self) -> u64 {
        self.next
    }

    /// Full sample for the next frame. Labels exist because the world is
    /// synthetic; training code only reads the image.
    pub fn next_sample(&mut self) -> (u64, SceneSample) {
        let index = self.world.unlabeled_base() + self.next;
        self.next += 1;
        (index, generate_scene(&self.world, index))
    }
}

impl Iterator for UnlabeledStream {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        let (index, s) = self.next_sample();
        Some(Frame {
            index,
            image: s.image,
        })
    }
}

pub fn unlabeled_stream(world: &WorldConfig, start: u64) -> UnlabeledStream {
    UnlabeledStream {
        world: world.clone(),
        next: start,
    }
}
