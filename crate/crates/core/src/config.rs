//! INI-style run configuration.
//!
//! ```text
//! [run]
//! task = segmentation
//! seed = 0
//! steps = 1000
//!
//! [network.student]
//! hidden = 8, 8
//! upsample = 1
//! ```
//!
//! Sections: `[run]`, `[world]`, `[network.teacher]`, `[network.student]`,
//! `[sgd]`, `[augment]`, `[detection]`. Keys not given keep the task's
//! defaults. Unknown sections and keys are errors. `#` and `;` start
//! comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::det_loss::{DetField, LevelSpec};
use crate::nn::{LayerKind, NetworkSpec, Role};
use crate::trainer::{RunConfig, Task};
use crate::{Error, Result};

/// `section -> key -> (line, value)`
type Sections = BTreeMap<String, BTreeMap<String, (usize, String)>>;

fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split(['#', ';']).next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                line: line_no,
                reason: "unterminated section header".into(),
            })?;
            let name = name.trim().to_string();
            out.entry(name.clone()).or_default();
            current = Some(name);
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            reason: format!("expected key = value, got {line:?}"),
        })?;
        let section = current.as_ref().ok_or_else(|| Error::Config {
            line: line_no,
            reason: "key outside of any section".into(),
        })?;
        let key = k.trim().to_string();
        let prev = out
            .get_mut(section)
            .expect("section inserted on header")
            .insert(key.clone(), (line_no, v.trim().to_string()));
        if prev.is_some() {
            return Err(Error::Config {
                line: line_no,
                reason: format!("duplicate key {key:?} in [{section}]"),
            });
        }
    }
    Ok(out)
}

struct Section<'a> {
    name: &'a str,
    keys: BTreeMap<String, (usize, String)>,
}

impl Section<'_> {
    fn take<T: FromStr>(&mut self, key: &str, into: &mut T) -> Result<()> {
        if let Some((line, v)) = self.keys.remove(key) {
            *into = v.parse().map_err(|_| Error::Config {
                line,
                reason: format!("invalid value {v:?} for {}.{key}", self.name),
            })?;
        }
        Ok(())
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.keys.remove(key)
    }

    fn finish(self) -> Result<()> {
        match self.keys.into_iter().next() {
            Some((k, (line, _))) => Err(Error::Config {
                line,
                reason: format!("unknown key {k:?} in [{}]", self.name),
            }),
            None => Ok(()),
        }
    }
}

/// Hidden widths and number of up-×2 layers of a `conv_stack` network.
pub fn stack_shape(spec: &NetworkSpec) -> (Vec<usize>, usize) {
    let convs: Vec<usize> = spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Conv3x3)
        .map(|l| l.out_channels)
        .collect();
    let hidden = convs[..convs.len().saturating_sub(1)].to_vec();
    let up = spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Upsample2x)
        .count();
    (hidden, up)
}

fn parse_list(line: usize, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                line,
                reason: format!("invalid width {s:?}"),
            })
        })
        .collect()
}

/// `stride:min:max` entries separated by commas; `inf` is allowed for max.
fn parse_levels(line: usize, v: &str) -> Result<Vec<LevelSpec>> {
    let bad = |reason: String| Error::Config { line, reason };
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let f: Vec<&str> = item.split(':').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad(format!("level {item:?} is not stride:min:max")));
            }
            let stride = f[0].parse().map_err(|_| bad(format!("bad stride in {item:?}")))?;
            let lo = f[1].parse().map_err(|_| bad(format!("bad min in {item:?}")))?;
            let hi = f[2].parse().map_err(|_| bad(format!("bad max in {item:?}")))?;
            Ok(LevelSpec::new(stride, lo, hi))
        })
        .collect()
}

fn format_levels(levels: &[LevelSpec]) -> String {
    levels
        .iter()
        .map(|l| format!("{}:{}:{}", l.stride, l.min_dist, l.max_dist))
        .collect::<Vec<_>>()
        .join(", ")
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Parses a configuration. The task is read first; everything else
    /// overrides that task's defaults.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut sections = parse_sections(text)?;
        let mut section = |name: &'static str| Section {
            name,
            keys: sections.remove(name).unwrap_or_default(),
        };

        let mut run = section("run");
        let mut task = Task::Segmentation;
        run.take("task", &mut task)?;
        let mut cfg = RunConfig::for_task(task);
        run.take("seed", &mut cfg.seed)?;
        run.take("steps", &mut cfg.steps)?;
        run.take("teacher_steps", &mut cfg.teacher_steps)?;
        run.take("batch_size", &mut cfg.batch_size)?;
        if let Some((_, v)) = run.take_raw("out_dir") {
            cfg.out_dir = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        run.finish()?;

        let mut world = section("world");
        let w = &mut cfg.world;
        world.take("seed", &mut w.seed)?;
        world.take("num_classes", &mut w.num_classes)?;
        world.take("height", &mut w.height)?;
        world.take("width", &mut w.width)?;
        world.take("min_objects", &mut w.min_objects)?;
        world.take("max_objects", &mut w.max_objects)?;
        world.take("noise", &mut w.noise)?;
        world.take("labeled_count", &mut w.labeled_count)?;
        world.take("val_count", &mut w.val_count)?;
        world.finish()?;

        let out = match task {
            Task::Segmentation => cfg.world.num_classes,
            Task::Detection => DetField::raw_channels(cfg.world.num_classes),
        };
        for (name, role) in [("network.teacher", Role::Teacher), ("network.student", Role::Student)] {
            let mut s = section(name);
            let spec = match role {
                Role::Teacher => &mut cfg.teacher_spec,
                Role::Student => &mut cfg.student_spec,
            };
            let (mut hidden, mut up) = stack_shape(spec);
            if let Some((line, v)) = s.take_raw("hidden") {
                hidden = parse_list(line, &v)?;
            }
            s.take("upsample", &mut up)?;
            s.finish()?;
            *spec = NetworkSpec::conv_stack(role, 3, &hidden, out, up);
        }

        let mut sgd = section("sgd");
        sgd.take("momentum", &mut cfg.sgd.momentum)?;
        sgd.take("weight_decay", &mut cfg.sgd.weight_decay)?;
        sgd.take("base_lr", &mut cfg.sgd.base_lr)?;
        sgd.take("power", &mut cfg.sgd.power)?;
        sgd.finish()?;

        let mut aug = section("augment");
        let a = &mut cfg.augment;
        aug.take("scale_min", &mut a.scale_min)?;
        aug.take("scale_max", &mut a.scale_max)?;
        aug.take("hflip_prob", &mut a.hflip_prob)?;
        aug.take("crop_h", &mut a.crop_h)?;
        aug.take("crop_w", &mut a.crop_w)?;
        aug.take("enabled", &mut a.enabled)?;
        aug.finish()?;

        let mut det = section("detection");
        if let Some((line, v)) = det.take_raw("levels") {
            cfg.levels = parse_levels(line, &v)?;
        }
        det.take("score_thresh", &mut cfg.eval.score_thresh)?;
        det.take("nms_iou", &mut cfg.eval.nms_iou)?;
        det.take("max_dets", &mut cfg.eval.max_dets)?;
        det.finish()?;

        if let Some((name, keys)) = sections.into_iter().next() {
            let line = keys.values().map(|(l, _)| *l).min().unwrap_or(0);
            return Err(Error::Config {
                line,
                reason: format!("unknown section [{name}]"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Emits every setting; `from_ini(to_ini())` reproduces the config.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let w = &self.world;
        writeln!(s, "[run]").unwrap();
        writeln!(s, "task = {}", self.task).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "steps = {}", self.steps).unwrap();
        writeln!(s, "teacher_steps = {}", self.teacher_steps).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        if let Some(d) = &self.out_dir {
            writeln!(s, "out_dir = {}", d.display()).unwrap();
        }
        writeln!(s, "\n[world]").unwrap();
        writeln!(s, "seed = {}", w.seed).unwrap();
        writeln!(s, "num_classes = {}", w.num_classes).unwrap();
        writeln!(s, "height = {}", w.height).unwrap();
        writeln!(s, "width = {}", w.width).unwrap();
        writeln!(s, "min_objects = {}", w.min_objects).unwrap();
        writeln!(s, "max_objects = {}", w.max_objects).unwrap();
        writeln!(s, "noise = {}", w.noise).unwrap();
        writeln!(s, "labeled_count = {}", w.labeled_count).unwrap();
        writeln!(s, "val_count = {}", w.val_count).unwrap();
        for (name, spec) in [("teacher", &self.teacher_spec), ("student", &self.student_spec)] {
            let (hidden, up) = stack_shape(spec);
            writeln!(s, "\n[network.{name}]").unwrap();
            writeln!(s, "hidden = {}", join(&hidden)).unwrap();
            writeln!(s, "upsample = {up}").unwrap();
        }
        writeln!(s, "\n[sgd]").unwrap();
        writeln!(s, "momentum = {}", self.sgd.momentum).unwrap();
        writeln!(s, "weight_decay = {}", self.sgd.weight_decay).unwrap();
        writeln!(s, "base_lr = {}", self.sgd.base_lr).unwrap();
        writeln!(s, "power = {}", self.sgd.power).unwrap();
        let a = &self.augment;
        writeln!(s, "\n[augment]").unwrap();
        writeln!(s, "scale_min = {}", a.scale_min).unwrap();
        writeln!(s, "scale_max = {}", a.scale_max).unwrap();
        writeln!(s, "hflip_prob = {}", a.hflip_prob).unwrap();
        writeln!(s, "crop_h = {}", a.crop_h).unwrap();
        writeln!(s, "crop_w = {}", a.crop_w).unwrap();
        writeln!(s, "enabled = {}", a.enabled).unwrap();
        if self.task == Task::Detection {
            writeln!(s, "\n[detection]").unwrap();
            writeln!(s, "levels = {}", format_levels(&self.levels)).unwrap();
            writeln!(s, "score_thresh = {}", self.eval.score_thresh).unwrap();
            writeln!(s, "nms_iou = {}", self.eval.nms_iou).unwrap();
            writeln!(s, "max_dets = {}", self.eval.max_dets).unwrap();
        }
        s
    }
}
