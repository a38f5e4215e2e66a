//! Online training-data generation by Gaussian sampling in pose-shape
//! parameter space.
//!
//! Every draw owns an RNG seeded from `(seed, period, index)`, so any example
//! of the stream can be regenerated on its own and producers can run in any
//! order without changing the result.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::patches::{extract_patch_set, FaceBox, Image, PatchConfig};
use crate::shape::{params_to_shape, shape_to_params, wrap_angle, LandmarkSet, PoseShapeParams, ShapeModel, ShapeError};
use crate::tensor::Tensor;

/// Fraction of the face-box side covered by the mean shape at the coarse
/// (mean-shape) centre.
pub const MEAN_SHAPE_FILL: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub sigma: f64,
    /// Probability of drawing around the mean-shape centre.
    pub mixture_weight: f64,
    pub periods: usize,
    pub seed: u64,
    /// Shuffle face order within each period.
    pub shuffle: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            mixture_weight: 0.5,
            periods: 1,
            seed: 0,
            shuffle: true,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.mixture_weight) {
            return Err(format!("mixture weight must lie in [0, 1], got {}", self.mixture_weight));
        }
        if self.periods == 0 {
            return Err("periods must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    MeanShape,
    GroundTruth,
}

/// A normalised face ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub id: String,
    pub image: Image,
    pub landmarks: LandmarkSet,
    /// Normalised-to-raw coordinate map.
    pub map: crate::patches::SimilarityMap,
    /// Fitted ground-truth parameters.
    pub params: PoseShapeParams,
}

impl Face {
    pub fn new(id: impl Into<String>, image: Image, landmarks: LandmarkSet, map: crate::patches::SimilarityMap, model: &ShapeModel) -> Result<Self, ShapeError> {
        let params = shape_to_params(&landmarks, model)?;
        Ok(Self {
            id: id.into(),
            image,
            landmarks,
            map,
            params,
        })
    }
}

/// Pose placing the mean shape centred in the face box, its larger bounding
/// extent covering [`MEAN_SHAPE_FILL`] of the box side.
pub fn mean_center(model: &ShapeModel, face_box: &FaceBox) -> PoseShapeParams {
    let [x0, y0, x1, y1] = model.mean_shape().bounds();
    let extent = (x1 - x0).max(y1 - y0).max(f64::MIN_POSITIVE);
    PoseShapeParams {
        alpha: vec![0.0; model.components()],
        t2d: face_box.center(),
        beta: 0.0,
        f: MEAN_SHAPE_FILL * face_box.side() / extent,
    }
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed for a sub-stream.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ b)
}

/// Draws from the two-branch mixture. Always consumes one uniform for the
/// branch and then one normal per parameter dimension.
pub fn sample_params<R: Rng + ?Sized>(
    s_gt: &PoseShapeParams,
    mean_center: &PoseShapeParams,
    model: &ShapeModel,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> (PoseShapeParams, Branch) {
    let u: f64 = rng.gen();
    let (branch, center) = if u < cfg.mixture_weight {
        (Branch::MeanShape, mean_center)
    } else {
        (Branch::GroundTruth, s_gt)
    };
    let scales = model.param_scales();
    let mut v = center.to_vector();
    for (x, &s) in v.iter_mut().zip(scales) {
        let z: f64 = rng.sample(StandardNormal);
        *x += cfg.sigma * s * z;
    }
    let p = v.len() - 4;
    v[p + 2] = wrap_angle(v[p + 2]);
    // keep the scale positive; only reachable for very large sigma
    v[p + 3] = v[p + 3].max(1e-3 * center.f.abs().max(1e-12));
    (PoseShapeParams::from_vector(&v), branch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub patches: Vec<Tensor>,
    /// `(θ* − θ_sampled) / side`, flat `[x0, y0, x1, y1, ...]`.
    pub target: Vec<f64>,
    pub sampled: LandmarkSet,
    pub source: usize,
    pub branch: Branch,
}

/// Patches at the sampled shape and the normalised increment back to truth.
pub fn example_at(image: &Image, theta_gt: &LandmarkSet, sampled: LandmarkSet, patch_cfg: &PatchConfig) -> (Vec<Tensor>, Vec<f64>) {
    let side = image.face_box().side();
    let patches = extract_patch_set(image, &sampled, patch_cfg);
    let target = theta_gt
        .to_flat()
        .iter()
        .zip(sampled.to_flat())
        .map(|(g, s)| (g - s) / side)
        .collect();
    (patches, target)
}

pub fn generate_example(
    image: &Image,
    theta_gt: &LandmarkSet,
    s_sampled: &PoseShapeParams,
    model: &ShapeModel,
    patch_cfg: &PatchConfig,
) -> Result<TrainingExample, ShapeError> {
    let sampled = params_to_shape(s_sampled, model)?;
    let (patches, target) = example_at(image, theta_gt, sampled.clone(), patch_cfg);
    Ok(TrainingExample {
        patches,
        target,
        sampled,
        source: 0,
        branch: Branch::GroundTruth,
    })
}

/// A sampled shape before patch extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledShape {
    /// Index into the face slice the stream was built from.
    pub source: usize,
    kept: usize,
    pub theta: LandmarkSet,
    pub branch: Branch,
}

/// Lazily generated, period-major sequence of training examples.
#[derive(Debug, Clone)]
pub struct SampleStream<'a> {
    faces: Vec<&'a Face>,
    sources: Vec<usize>,
    model: &'a ShapeModel,
    cfg: SamplingConfig,
    patch_cfg: PatchConfig,
    skipped: usize,
}

impl<'a> SampleStream<'a> {
    /// Faces whose annotation does not match the model are skipped and
    /// counted.
    pub fn new(faces: &'a [Face], model: &'a ShapeModel, cfg: SamplingConfig, patch_cfg: PatchConfig) -> Self {
        let mut kept = Vec::with_capacity(faces.len());
        let mut sources = Vec::with_capacity(faces.len());
        for (i, f) in faces.iter().enumerate() {
            if f.landmarks.len() == model.landmark_count() && f.params.alpha.len() == model.components() {
                kept.push(f);
                sources.push(i);
            }
        }
        let skipped = faces.len() - kept.len();
        if skipped > 0 {
            log::warn!("sampling: skipped {skipped} face(s) without a usable annotation");
        }
        Self {
            faces: kept,
            sources,
            model,
            cfg,
            patch_cfg,
            skipped,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn faces_per_period(&self) -> usize {
        self.faces.len()
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.cfg
    }

    /// Face order (indices into the kept faces) for one period.
    pub fn period_order(&self, period: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.faces.len()).collect();
        if self.cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, u64::MAX, period));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Draw for face `face` in `period`; independent of every other draw.
    pub fn draw(&self, period: u64, face: usize) -> (PoseShapeParams, Branch) {
        let f = self.faces[face];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, period, face as u64));
        let center = mean_center(self.model, &f.image.face_box());
        sample_params(&f.params, &center, self.model, &self.cfg, &mut rng)
    }

    /// Example `index` of the unbounded stream (periods are not capped).
    pub fn example(&self, index: u64) -> TrainingExample {
        let n = self.faces.len() as u64;
        let period = index / n;
        let order = self.period_order(period);
        self.example_in(period, order[(index % n) as usize])
    }

    /// Sampled shapes for stream positions `start..start + count`, without
    /// patches.
    pub fn shapes(&self, start: u64, count: usize) -> Vec<SampledShape> {
        let n = self.faces.len() as u64;
        let mut out = Vec::with_capacity(count);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for index in start..start + count as u64 {
            let period = index / n;
            if cached.as_ref().map(|c| c.0) != Some(period) {
                cached = Some((period, self.period_order(period)));
            }
            let face = cached.as_ref().unwrap().1[(index % n) as usize];
            out.push(self.shape_in(period, face));
        }
        out
    }

    /// Examples `start..start + count`.
    pub fn batch(&self, start: u64, count: usize) -> Vec<TrainingExample> {
        self.shapes(start, count).into_iter().map(|s| self.materialize(s)).collect()
    }

    fn shape_in(&self, period: u64, face: usize) -> SampledShape {
        let (params, branch) = self.draw(period, face);
        SampledShape {
            source: self.sources[face],
            kept: face,
            theta: params_to_shape(&params, self.model).expect("stream faces match the model"),
            branch,
        }
    }

    fn materialize(&self, s: SampledShape) -> TrainingExample {
        let f = self.faces[s.kept];
        let (patches, target) = example_at(&f.image, &f.landmarks, s.theta.clone(), &self.patch_cfg);
        TrainingExample {
            patches,
            target,
            sampled: s.theta,
            source: s.source,
            branch: s.branch,
        }
    }

    fn example_in(&self, period: u64, face: usize) -> TrainingExample {
        self.materialize(self.shape_in(period, face))
    }

    pub fn iter(&self) -> impl Iterator<Item = TrainingExample> + '_ {
        let total = self.cfg.periods as u64 * self.faces.len() as u64;
        (0..total).map(move |i| self.example(i))
    }
}

/// `T × N` examples generated on demand.
pub fn training_stream<'a>(faces: &'a [Face], model: &'a ShapeModel, cfg: SamplingConfig, patch_cfg: PatchConfig) -> SampleStream<'a> {
    SampleStream::new(faces, model, cfg, patch_cfg)
}
