//! Seeded synthetic faces with exactly known landmarks.
//!
//! A fixed landmark template is deformed by a low-dimensional linear shape
//! model and a jittered similarity pose. Each landmark carries its own
//! oriented pattern (two crossed odd Gabor waves under a Gaussian envelope)
//! drawn over a smooth background with pixel noise. The appearance seed fixes
//! the shape basis and the patterns; the sample seed fixes the faces drawn,
//! so train and test sets with different sample seeds share one generator.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patches::{FaceBox, Image};
use crate::sampling::{derive_seed, MEAN_SHAPE_FILL};
use crate::shape::{rotation, LandmarkSet};

const BASIS_TAG: u64 = 0x4241_5349;
const FACE_TAG: u64 = 0x4641_4345;
const PATTERN_TAG: u64 = 0x5041_5454;

/// Crop margin that makes the face box plus margin cover the whole image.
pub const IMAGE_MARGIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("face {index}: landmarks kept colliding after {tries} draws")]
    Collision { index: usize, tries: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    /// Crossed odd Gabor waves with per-landmark orientation.
    CrossedGabor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub landmark_count: usize,
    pub image_size: usize,
    pub shape_components: usize,
    /// Fixes the shape basis and the landmark patterns.
    pub appearance_seed: u64,
    /// Fixes the faces drawn from the generator.
    pub seed: u64,
    pub count: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub texture: TextureKind,
    /// Standard deviation of the first shape component, as a fraction of
    /// the face-box side; later components shrink geometrically.
    pub shape_std: f64,
    /// Translation jitter as a fraction of the face-box side.
    pub translation_std: f64,
    /// Rotation jitter in radians.
    pub rotation_std: f64,
    /// Relative scale jitter.
    pub scale_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            landmark_count: 5,
            image_size: 64,
            shape_components: 3,
            appearance_seed: 7,
            seed: 1,
            count: 200,
            noise: 0.02,
            texture: TextureKind::CrossedGabor,
            shape_std: 0.05,
            translation_std: 0.04,
            rotation_std: 0.1,
            scale_std: 0.06,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.landmark_count < 3 {
            return Err(SynthError::Spec("at least 3 landmarks are required".into()));
        }
        if self.count == 0 {
            return Err(SynthError::Spec("count must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(SynthError::Spec("image size must be at least 16".into()));
        }
        if self.shape_components + 4 > 2 * self.landmark_count {
            return Err(SynthError::Spec(format!(
                "{} shape components do not fit {} landmarks",
                self.shape_components, self.landmark_count
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(SynthError::Spec("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Face box whose margin-grown square is exactly the image.
    pub fn face_box(&self) -> FaceBox {
        let n = self.image_size as f64;
        let side = n / (1.0 + 2.0 * IMAGE_MARGIN);
        let off = (n - side) / 2.0;
        FaceBox::new(off, off, side, side)
    }

    /// Standard deviations of the shape components in pixels.
    pub fn component_stds(&self) -> Vec<f64> {
        let side = self.face_box().side();
        (0..self.shape_components).map(|k| self.shape_std * side * 0.75f64.powi(k as i32)).collect()
    }
}

/// Landmark pattern parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pattern {
    orientation: f64,
    wavelength: [f64; 2],
    envelope: f64,
    amplitude: f64,
}

impl Pattern {
    fn value(&self, dx: f64, dy: f64) -> f64 {
        let (s, c) = self.orientation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let env = (-(dx * dx + dy * dy) / (2.0 * self.envelope * self.envelope)).exp();
        let tau = std::f64::consts::TAU;
        self.amplitude * env * ((tau * u / self.wavelength[0]).sin() + 0.6 * (tau * v / self.wavelength[1]).sin())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFace {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// Generator internals alongside the drawn faces.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    /// Template in pixels, centred on the origin.
    pub template: LandmarkSet,
    /// Orthonormal shape directions, `2M × P`.
    pub basis: DMatrix<f64>,
    pub faces: Vec<SyntheticFace>,
}

/// Canonical layout in units of the mean-shape extent: two eyes first, then
/// nose and mouth corners, then points on a lower arc.
fn unit_template(m: usize) -> Vec<[f64; 2]> {
    let base = [[-0.35, -0.3], [0.35, -0.3], [0.0, 0.05], [-0.25, 0.4], [0.25, 0.4]];
    let mut pts: Vec<[f64; 2]> = base.iter().take(m).copied().collect();
    let extra = m.saturating_sub(base.len());
    for k in 0..extra {
        let a = std::f64::consts::PI * (0.1 + 0.8 * (k as f64 + 0.5) / extra as f64);
        pts.push([0.45 * a.cos(), 0.1 + 0.35 * a.sin()]);
    }
    pts
}

fn template_pixels(spec: &SyntheticSpec) -> LandmarkSet {
    let pts = unit_template(spec.landmark_count);
    let n = pts.len() as f64;
    let c = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let centered: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] - c[0], p[1] - c[1]]).collect();
    let set = LandmarkSet::new(centered);
    let [x0, y0, x1, y1] = set.bounds();
    let k = MEAN_SHAPE_FILL * spec.face_box().side() / (x1 - x0).max(y1 - y0);
    set.map(|p| [p[0] * k, p[1] * k])
}

/// Random orthonormal directions orthogonal to the template, its 90°
/// rotation and both translations, so they carry no similarity component.
fn shape_basis(template: &LandmarkSet, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let flat = template.to_flat();
    let n = flat.len();
    let rot: Vec<f64> = flat.chunks_exact(2).flat_map(|q| [-q[1], q[0]]).collect();
    let tx: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let ty: Vec<f64> = (0..n).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    let push = |v: DVector<f64>, ortho: &mut Vec<DVector<f64>>| -> bool {
        let mut w = v;
        for _ in 0..2 {
            for o in ortho.iter() {
                let d = o.dot(&w);
                w -= o * d;
            }
        }
        let norm = w.norm();
        if norm > 1e-8 {
            ortho.push(w / norm);
            true
        } else {
            false
        }
    };
    for v in [flat, rot, tx, ty] {
        push(DVector::from_vec(v), &mut ortho);
    }
    let fixed = ortho.len();
    while ortho.len() < fixed + p {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        push(v, &mut ortho);
    }
    DMatrix::from_columns(&ortho[fixed..])
}

fn patterns(spec: &SyntheticSpec) -> Vec<Pattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.appearance_seed, PATTERN_TAG, 0));
    let m = spec.landmark_count;
    let scale = spec.face_box().side() / 53.0;
    (0..m)
        .map(|j| Pattern {
            orientation: std::f64::consts::TAU * j as f64 / m as f64 + rng.gen_range(-0.1..0.1),
            wavelength: [scale * rng.gen_range(8.0..10.0), scale * rng.gen_range(6.0..8.0)],
            envelope: scale * rng.gen_range(3.0..3.5),
            amplitude: 0.25,
        })
        .collect()
}

/// Pattern of landmark `j` sampled on a `size × size` grid centred on the
/// landmark (no background, no noise).
pub fn landmark_template(spec: &SyntheticSpec, j: usize, size: usize) -> Vec<f64> {
    let pat = patterns(spec)[j];
    let r = (size / 2) as f64;
    (0..size * size)
        .map(|i| pat.value((i % size) as f64 - r, (i / size) as f64 - r))
        .collect()
}

fn render(spec: &SyntheticSpec, pats: &[Pattern], landmarks: &LandmarkSet, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = spec.image_size;
    let tau = std::f64::consts::TAU;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.gen_range(0.0..tau);
            let freq = rng.gen_range(0.5..1.5) / n as f64;
            (a.cos() * freq, a.sin() * freq, rng.gen_range(0.0..tau), rng.gen_range(0.02..0.05))
        })
        .collect();
    let reach = pats.iter().map(|p| p.envelope).fold(0.0, f64::max) * 4.0;
    let mut px = vec![0.0; n * n];
    for (i, v) in px.iter_mut().enumerate() {
        let (x, y) = ((i % n) as f64, (i / n) as f64);
        let mut val = 0.5;
        for &(fx, fy, ph, amp) in &waves {
            val += amp * (tau * (fx * x + fy * y) + ph).cos();
        }
        for (p, pat) in landmarks.points().iter().zip(pats) {
            let (dx, dy) = (x - p[0], y - p[1]);
            if dx.abs() < reach && dy.abs() < reach {
                val += pat.value(dx, dy);
            }
        }
        if spec.noise > 0.0 {
            val += spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
        *v = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    px
}

fn min_separation(l: &LandmarkSet) -> f64 {
    let p = l.points();
    let mut best = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            best = best.min((p[i][0] - p[j][0]).hypot(p[i][1] - p[j][1]));
        }
    }
    best
}

const MAX_TRIES: usize = 100;

/// Draws `spec.count` faces. Generation of face `i` depends only on the
/// spec and `i`.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    let template = template_pixels(spec);
    let mut brng = ChaCha8Rng::seed_from_u64(derive_seed(spec.appearance_seed, BASIS_TAG, 0));
    let basis = shape_basis(&template, spec.shape_components, &mut brng);
    let pats = patterns(spec);
    let stds = spec.component_stds();
    let fb = spec.face_box();
    let side = fb.side();
    let center = fb.center();
    let min_sep = pats.iter().map(|p| p.envelope).fold(0.0, f64::max) * 2.5;
    let tflat = DVector::from_vec(template.to_flat());

    let mut faces = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, FACE_TAG, index as u64));
        let mut landmarks = None;
        for _ in 0..MAX_TRIES {
            let mut z = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
            let alpha = DVector::from_iterator(stds.len(), stds.iter().map(|&s| z(s)));
            let canon = &tflat + &basis * alpha;
            let beta = z(spec.rotation_std);
            let f = 1.0 + z(spec.scale_std);
            let t = [center[0] + z(spec.translation_std * side), center[1] + z(spec.translation_std * side)];
            let r = rotation(beta);
            let pts: Vec<[f64; 2]> = canon
                .as_slice()
                .chunks_exact(2)
                .map(|q| {
                    [
                        f * (r[0][0] * q[0] + r[0][1] * q[1]) + t[0],
                        f * (r[1][0] * q[0] + r[1][1] * q[1]) + t[1],
                    ]
                })
                .collect();
            let l = LandmarkSet::new(pts);
            let [x0, y0, x1, y1] = l.bounds();
            let inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= (spec.image_size - 1) as f64 && y1 <= (spec.image_size - 1) as f64;
            if f > 0.0 && inside && min_separation(&l) >= min_sep {
                landmarks = Some(l);
                break;
            }
        }
        let landmarks = landmarks.ok_or(SynthError::Collision { index, tries: MAX_TRIES })?;
        let pixels = render(spec, &pats, &landmarks, &mut rng);
        let image = Image::new(spec.image_size, spec.image_size, 1, pixels, fb).expect("generated image is consistent");
        faces.push(SyntheticFace { image, landmarks });
    }
    Ok(SyntheticDataset {
        spec: *spec,
        template,
        basis,
        faces,
    })
}

/// Normalised cross-correlation of two equally sized vectors.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    ab / (aa * bb).sqrt()
}
