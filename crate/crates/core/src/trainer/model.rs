//! Networks bound to a task: input preprocessing, prediction, and the
//! teacher interface consumed by distillation.

use crate::data::SceneSample;
use crate::det_loss::{DetField, DetGrads, LevelSpec};
use crate::nn::{self, NetworkSpec, ParamSet};
use crate::seg_loss::ProbMap;
use crate::tensor::{bilinear_resize, DenseMap};
use crate::{Error, Result};

use super::Task;

/// Pixel normalization applied before every network: images in `[0, 1]`
/// are centered on 0.5 and scaled to roughly unit spread.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_SCALE: f64 = 4.0;

fn normalize(x: DenseMap) -> DenseMap {
    x.map(|v| (v - PIXEL_MEAN) * PIXEL_SCALE)
}

/// Foreground prior of the detection class and centerness heads. Its logit
/// is added to those raw channels so an initialized network predicts mostly
/// background instead of 0.5 everywhere; the shift is constant, so
/// gradients pass through unchanged.
const CLS_PRIOR: f64 = 0.01;

fn prior_logit() -> f64 {
    (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln()
}

/// A network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

/// Forward record for one detection input, kept for the backward pass.
pub struct DetForward {
    pub field: DetField,
    caches: Vec<nn::Activations>,
}

impl Model {
    pub fn new(spec: NetworkSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Model { spec, params })
    }

    /// Segmentation input: the image shrunk by the network's upsampling
    /// factor so the logits come out at full resolution.
    fn seg_input(&self, image: &DenseMap) -> Result<DenseMap> {
        let f = self.spec.upsample_factor();
        let (h, w) = (image.height(), image.width());
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by the network's upsampling factor {f}"
            )));
        }
        let x = if f == 1 {
            image.clone()
        } else {
            bilinear_resize(image, h / f, w / f)?
        };
        Ok(normalize(x))
    }

    /// Per-pixel class logits at the image's resolution.
    pub fn seg_logits(&self, image: &DenseMap) -> Result<(DenseMap, nn::Activations)> {
        let x = self.seg_input(image)?;
        nn::forward(&self.spec, &self.params, &x)
    }

    /// Class probabilities at the image's resolution.
    pub fn seg_probs(&self, image: &DenseMap) -> Result<ProbMap> {
        Ok(ProbMap::from_logits(&self.seg_logits(image)?.0))
    }

    /// Runs the shared head once per pyramid level on the image resampled to
    /// that level's grid.
    pub fn det_forward(&self, image: &DenseMap, levels: &[LevelSpec], num_classes: usize) -> Result<DetForward> {
        if self.spec.upsample_factor() != 1 {
            return Err(Error::InvalidArgument(
                "detection networks cannot contain upsampling layers".into(),
            ));
        }
        let mut raw = Vec::with_capacity(levels.len());
        let mut caches = Vec::with_capacity(levels.len());
        for l in levels {
            let (gh, gw) = l.grid(image.height(), image.width());
            let x = normalize(bilinear_resize(image, gh, gw)?);
            let (mut y, cache) = nn::forward(&self.spec, &self.params, &x)?;
            let shift = prior_logit();
            let (center, channels) = (num_classes + 4, y.channels());
            for c in (0..num_classes).chain([center]).filter(|&c| c < channels) {
                y.channel_mut(c).iter_mut().for_each(|v| *v += shift);
            }
            raw.push(y);
            caches.push(cache);
        }
        Ok(DetForward {
            field: DetField::from_raw(&raw, levels, num_classes)?,
            caches,
        })
    }

    pub fn det_field(&self, image: &DenseMap, levels: &[LevelSpec], num_classes: usize) -> Result<DetField> {
        Ok(self.det_forward(image, levels, num_classes)?.field)
    }

    /// Parameter gradients of a detection loss, summed over levels.
    pub fn det_backward(&self, fwd: &DetForward, grads: &DetGrads) -> Result<ParamSet> {
        let raw = grads.to_raw()?;
        let mut total = ParamSet::zeros_for(&self.spec);
        for (cache, g) in fwd.caches.iter().zip(&raw) {
            let (pg, _) = nn::backward(&self.spec, &self.params, cache, g)?;
            total.add_scaled(&pg, 1.0);
        }
        Ok(total)
    }

    /// Parameter gradients of a segmentation loss.
    pub fn seg_backward(&self, cache: &nn::Activations, grad: &DenseMap) -> Result<ParamSet> {
        Ok(nn::backward(&self.spec, &self.params, cache, grad)?.0)
    }

    pub fn check_task(&self, task: Task, num_classes: usize) -> Result<()> {
        let want = match task {
            Task::Segmentation => num_classes,
            Task::Detection => DetField::raw_channels(num_classes),
        };
        if self.spec.in_channels() != 3 || self.spec.out_channels() != want {
            return Err(Error::InvalidArgument(format!(
                "network maps {} -> {} channels; {task} with {num_classes} classes needs 3 -> {want}",
                self.spec.in_channels(),
                self.spec.out_channels()
            )));
        }
        Ok(())
    }
}

/// Soft targets for distillation, evaluated on exactly the patch the
/// student sees.
pub trait Teacher {
    fn seg_targets(&self, patch: &SceneSample) -> Result<ProbMap>;

    fn det_targets(&self, patch: &SceneSample, levels: &[LevelSpec], num_classes: usize) -> Result<DetField>;
}

impl Teacher for Model {
    fn seg_targets(&self, patch: &SceneSample) -> Result<ProbMap> {
        self.seg_probs(&patch.image)
    }

    fn det_targets(&self, patch: &SceneSample, levels: &[LevelSpec], num_classes: usize) -> Result<DetField> {
        self.det_field(&patch.image, levels, num_classes)
    }
}
